import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmctta.errors import ContractError
from mmctta.fusion import (
    IntraModalResult,
    TeacherOutput,
    impa_fuse,
    impa_weights,
    intra_modal,
    teacher_predict,
    xmpf_fuse,
    xmpf_weight,
)
from mmctta.nn import Layer, Network, init_network, l2_normalize


def random_output(rng, n, c, f):
    return TeacherOutput(
        rng.dirichlet(np.ones(c), n),
        rng.dirichlet(np.ones(c), n),
        l2_normalize(rng.standard_normal((n, f)))[0],
        l2_normalize(rng.standard_normal((n, f)))[0],
    )


class TestTeacherPredict:
    def test_no_copies_is_raw(self, small_net, rng):
        out = teacher_predict(small_net, rng.standard_normal((5, 4)), [])
        np.testing.assert_array_equal(out.p_aug, out.p)
        np.testing.assert_array_equal(out.z_aug, out.z)

    def test_identity_copies(self, small_net, rng):
        x = rng.standard_normal((5, 4))
        out = teacher_predict(small_net, x, [x.copy(), x.copy()])
        np.testing.assert_allclose(out.p_aug, out.p, atol=1e-9)
        np.testing.assert_allclose(out.z_aug, out.z, atol=1e-9)

    def test_probabilities_are_averaged(self):
        # encoder passes x through; classifier scales it so (1,0) and (0,1) are near one-hot
        net = Network((Layer(np.eye(2), np.zeros(2), "identity"), Layer(50 * np.eye(2), np.zeros(2), "identity")))
        out = teacher_predict(net, np.array([[0.0, 0.0]]), [np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])])
        np.testing.assert_allclose(out.p_aug, [[0.5, 0.5]], atol=1e-12)

    def test_antipodal_copies_fall_back_to_raw_feature(self):
        net = Network((Layer(np.eye(2), np.zeros(2), "identity"), Layer(np.eye(2), np.zeros(2), "identity")))
        x = np.array([[0.3, 0.4]])
        out = teacher_predict(net, x, [np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]])])
        np.testing.assert_allclose(out.z_aug, out.z)
        np.testing.assert_allclose(out.z, [[0.6, 0.8]])

    def test_mismatched_copy(self, small_net, rng):
        with pytest.raises(ContractError):
            teacher_predict(small_net, rng.standard_normal((5, 4)), [rng.standard_normal((4, 4))])


class TestWeights:
    def test_two_class_softmax(self):
        mu = np.eye(2)
        z = np.array([[1.0, 0.0]])
        w, _ = impa_weights(z, z, mu, np.array([0]), np.array([0]))
        assert w[0] == pytest.approx(math.e / (math.e + 1))
        assert w[0] == pytest.approx(0.7311, abs=1e-4)

    def test_equal_similarities(self):
        mu = np.tile([1.0, 0.0], (4, 1))
        z = np.array([[0.6, 0.8]])
        w, w_aug = impa_weights(z, z, mu, np.array([2]), np.array([3]))
        assert w[0] == pytest.approx(0.25) and w_aug[0] == pytest.approx(0.25)

    def test_naive_oracle(self, rng):
        out = random_output(rng, 7, 4, 3)
        mu = rng.standard_normal((4, 3))
        k, ka = out.p.argmax(1), out.p_aug.argmax(1)
        w, w_aug = impa_weights(out.z, out.z_aug, mu, k, ka)
        for j in range(7):
            s = [math.exp(sum(mu[i, d] * out.z[j, d] for d in range(3))) for i in range(4)]
            sa = [math.exp(sum(mu[i, d] * out.z_aug[j, d] for d in range(3))) for i in range(4)]
            assert w[j] == pytest.approx(s[k[j]] / sum(s), abs=1e-12)
            assert w_aug[j] == pytest.approx(sa[ka[j]] / sum(sa), abs=1e-12)

    def test_monotone_in_similarity(self):
        mu = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        angles = np.linspace(1.4, 0.0, 15)
        z = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        k = np.zeros(15, dtype=int)
        w, _ = impa_weights(z, z, mu, k, k)
        assert (np.diff(w) > 0).all()


class TestImpaFuse:
    def test_equal_weights(self, rng):
        p, pa = rng.dirichlet(np.ones(3), 4), rng.dirichlet(np.ones(3), 4)
        one = np.ones(4)
        np.testing.assert_allclose(impa_fuse(p, pa, one, one), (p + pa) / 2)

    def test_vanishing_aug_weight(self, rng):
        p, pa = rng.dirichlet(np.ones(3), 4), rng.dirichlet(np.ones(3), 4)
        fused = impa_fuse(p, pa, np.ones(4), np.full(4, 1e-12))
        assert np.abs(fused - p).max() < 1e-9

    def test_hand_example(self):
        fused = impa_fuse(np.array([[0.8, 0.2]]), np.array([[0.2, 0.8]]), np.array([3.0]), np.array([1.0]))
        np.testing.assert_allclose(fused, [[0.65, 0.35]])


class TestXmpf:
    def test_weight_branches(self):
        w, wa = np.array([0.3, 0.3]), np.array([0.4, 0.4])
        np.testing.assert_allclose(xmpf_weight(w, wa, np.array([1, 1]), np.array([1, 2])), [0.7, 0.4])

    def test_agreement_doubles_equal_weights(self):
        w = np.array([0.35, 0.35])
        hat = xmpf_weight(w, w, np.array([0, 0]), np.array([0, 1]))
        assert hat[0] == pytest.approx(2 * hat[1])

    def _result(self, p, w_hat):
        n = p.shape[0]
        zeros = np.zeros((n, 2))
        k = p.argmax(1)
        half = np.full(n, w_hat / 2)
        return IntraModalResult(p, p, zeros, zeros, k, k, half, half, p, np.full(n, float(w_hat)))

    def test_equal_weights_average(self, rng):
        a, b = rng.dirichlet(np.ones(3), 5), rng.dirichlet(np.ones(3), 5)
        out = xmpf_fuse(self._result(a, 0.8), self._result(b, 0.8))
        np.testing.assert_allclose(out.p_xm, (a + b) / 2)

    def test_dominant_modality_decides(self, rng):
        a, b = rng.dirichlet(np.ones(4), 32), rng.dirichlet(np.ones(4), 32)
        out = xmpf_fuse(self._result(a, 1e-6), self._result(b, 1.0))
        np.testing.assert_array_equal(out.y_hat, b.argmax(1))

    def test_agreement(self):
        p = np.array([[0.05, 0.05, 0.9]])
        assert xmpf_fuse(self._result(p, 0.5), self._result(p, 0.9)).y_hat[0] == 2

    def test_ties_break_low(self):
        p = np.array([[0.4, 0.4, 0.2]])
        assert xmpf_fuse(self._result(p, 1.0), self._result(p, 1.0)).y_hat[0] == 0

    def test_point_count_mismatch(self, rng):
        with pytest.raises(ContractError):
            xmpf_fuse(self._result(rng.dirichlet(np.ones(3), 4), 1), self._result(rng.dirichlet(np.ones(3), 5), 1))

    def test_reliable_modality_wins_over_uniform(self):
        n, c = 6, 4
        labels = np.arange(n) % c
        clean = np.eye(c)[labels]
        uniform = np.full((n, c), 1.0 / c)
        mu = np.eye(c)
        feats = np.eye(c)[labels]
        r_clean = intra_modal(TeacherOutput(clean, clean, feats, feats), mu)
        r_noisy = intra_modal(TeacherOutput(uniform, uniform, feats, feats), mu)
        np.testing.assert_array_equal(xmpf_fuse(r_noisy, r_clean).y_hat, labels)


class TestIntraModes:
    def test_modes(self, rng):
        out = random_output(rng, 6, 3, 4)
        mu = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(intra_modal(out, mu, "raw").p_hat, out.p)
        np.testing.assert_array_equal(intra_modal(out, mu, "aug").p_hat, out.p_aug)
        np.testing.assert_allclose(intra_modal(out, mu, "average").p_hat, (out.p + out.p_aug) / 2)
        full = intra_modal(out, mu)
        # inter-modal weight always comes from the centroid weights
        np.testing.assert_array_equal(intra_modal(out, mu, "raw").w_hat, full.w_hat)

    def test_unknown_mode(self, rng):
        with pytest.raises(ContractError):
            intra_modal(random_output(rng, 2, 3, 4), np.eye(3, 4), "max")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 32), st.integers(2, 5))
def test_convexity_and_bounds(seed, n, c):
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal((c, 3))
    r2, r3 = (intra_modal(random_output(rng, n, c, 3), mu) for _ in range(2))
    for r in (r2, r3):
        assert ((r.w > 0) & (r.w < 1) & (r.w_aug > 0) & (r.w_aug < 1)).all()
        assert ((r.w_hat > 0) & (r.w_hat < 2)).all()
        np.testing.assert_allclose(r.p_hat.sum(1), 1.0, atol=1e-9)
        lo, hi = np.minimum(r.p, r.p_aug), np.maximum(r.p, r.p_aug)
        assert (r.p_hat >= lo - 1e-12).all() and (r.p_hat <= hi + 1e-12).all()
    xm = xmpf_fuse(r2, r3)
    np.testing.assert_allclose(xm.p_xm.sum(1), 1.0, atol=1e-9)
    lo, hi = np.minimum(r2.p_hat, r3.p_hat), np.maximum(r2.p_hat, r3.p_hat)
    assert (xm.p_xm >= lo - 1e-12).all() and (xm.p_xm <= hi + 1e-12).all()
    np.testing.assert_array_equal(xm.y_hat, xm.p_xm.argmax(1))


def test_teacher_predict_on_real_network(rng):
    net = init_network(3, 4, rng)
    x = rng.standard_normal((10, 3))
    out = teacher_predict(net, x, [x * 0.5, x * 0.75])
    np.testing.assert_allclose(np.linalg.norm(out.z_aug, axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.p_aug.sum(1), 1.0, atol=1e-9)
