import dataclasses
import math

import numpy as np
import pytest

from mmctta.adapter import (
    AdapterConfig,
    MethodVariant,
    init,
    median_filter,
    run_sequence,
    step,
    student_update,
    with_variant,
)
from mmctta.errors import ConfigError
from mmctta.fusion import teacher_predict
from mmctta.nn import forward
from mmctta.stream import (
    DEFAULT_ANGLES_3D,
    DEFAULT_SCALES_2D,
    MODALITIES,
    SegmentSpec,
    SourceDataset,
    augment,
    make_source_dataset,
    make_stream,
)

SMALL = AdapterConfig(n_q=24, n_enq=4, lr=0.01, lambda_s=0.9)
SHIFTED = [SegmentSpec("shift", 6, noise_gain_2d=1.0, rotation_3d=0.5, noise_gain_3d=1.0)]


@pytest.fixture
def fresh(pretrained):
    p2, p3, feats = pretrained

    def make(cfg=SMALL, seed=0):
        return init(p2, p3, feats, cfg, seed)

    return make


def batches(world, segments=SHIFTED, seed=0):
    return list(make_stream(world, segments, seed))


def predictions(state, stream, cfg):
    out = run_sequence(state, stream, cfg, [s.name for s in SHIFTED], keep_predictions=True)
    return out.predictions


def flat(state, role):
    return np.concatenate([getattr(state.pairs[m], role).flat() for m in MODALITIES])


class TestInit:
    def test_queues_and_centroids(self, fresh):
        state = fresh()
        for m in MODALITIES:
            mem = state.memory[m]
            assert all(len(q) == SMALL.n_q for q in mem.queues)
            for k, q in enumerate(mem.queues):
                np.testing.assert_allclose(mem.centroids.live[k], q.data.mean(axis=0), atol=1e-15)
                np.testing.assert_allclose(np.linalg.norm(q.data, axis=1), 1.0, atol=1e-9)

    def test_teacher_copies_student(self, fresh):
        state = fresh()
        np.testing.assert_array_equal(flat(state, "teacher"), flat(state, "student"))

    def test_same_seed_same_state(self, fresh):
        a, b = fresh(seed=5), fresh(seed=5)
        for m in MODALITIES:
            for qa, qb in zip(a.memory[m].queues, b.memory[m].queues):
                assert qa.data.tobytes() == qb.data.tobytes()

    def test_missing_class_rejected(self, pretrained):
        p2, p3, feats = pretrained
        z, y = feats["2d"]
        keep = y != 0
        with pytest.raises(ConfigError):
            init(p2, p3, {"2d": (z[keep], y[keep]), "3d": feats["3d"]}, SMALL, 0)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"lambda_s": 1.5}, {"p_rs": -0.1}, {"lr": -1.0}, {"lambda_cts": -1.0},
        {"n_q": 4, "n_enq": 5}, {"eval_output": "max"}, {"cts_form": "x"}, {"variant": "nope"},
    ])
    def test_invalid(self, kw):
        with pytest.raises((ConfigError, ValueError)):
            AdapterConfig(**kw)

    def test_with_variant(self):
        assert with_variant(SMALL, "no_xmpf").variant is MethodVariant.NO_XMPF


class TestStep:
    def test_source_only_is_frozen(self, fresh, tiny_world):
        cfg = with_variant(SMALL, "source_only")
        state = fresh(cfg)
        before = flat(state, "student"), flat(state, "teacher")
        for b in batches(tiny_world):
            pred, state = step(state, b, cfg)
            teach = [forward(state.pairs[m].teacher, b.modality(m)).probs for m in MODALITIES]
            np.testing.assert_array_equal(pred, 0.5 * (teach[0] + teach[1]))
        np.testing.assert_array_equal(flat(state, "student"), before[0])
        np.testing.assert_array_equal(flat(state, "teacher"), before[1])

    def test_zero_lr_and_unit_momentum_match_source(self, fresh, tiny_world):
        cfg = dataclasses.replace(SMALL, lr=0.0, lambda_s=1.0)
        frozen = with_variant(cfg, "source_only")
        a = predictions(fresh(cfg), batches(tiny_world), cfg)
        b = predictions(fresh(frozen), batches(tiny_world), frozen)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, atol=1e-12)

    def test_pseudo_labels_match_scalar_oracle(self, fresh, tiny_world):
        state = fresh()
        b = batches(tiny_world)[0]
        teachers = {m: state.pairs[m].teacher for m in MODALITIES}
        mu = {m: state.memory[m].centroids.live.copy() for m in MODALITIES}
        step(state, b, SMALL)
        copies = {"2d": augment(b, "2d", DEFAULT_SCALES_2D), "3d": augment(b, "3d", DEFAULT_ANGLES_3D)}
        outs = {m: teacher_predict(teachers[m], b.modality(m), [c.modality(m) for c in copies[m]]) for m in MODALITIES}
        c = mu["2d"].shape[0]
        expected = []
        for j in range(b.n_points):
            fused, weight = {}, {}
            for m in MODALITIES:
                o = outs[m]

                def centroid_weight(z, k):
                    e = [math.exp(sum(mu[m][i, d] * z[d] for d in range(z.shape[0]))) for i in range(c)]
                    return e[k] / sum(e)

                k, ka = int(np.argmax(o.p[j])), int(np.argmax(o.p_aug[j]))
                w, wa = centroid_weight(o.z[j], k), centroid_weight(o.z_aug[j], ka)
                fused[m] = [(w * o.p[j, i] + wa * o.p_aug[j, i]) / (w + wa) for i in range(c)]
                weight[m] = w + wa if k == ka else max(w, wa)
            total = weight["2d"] + weight["3d"]
            p = [(weight["2d"] * fused["2d"][i] + weight["3d"] * fused["3d"][i]) / total for i in range(c)]
            expected.append(int(np.argmax(p)))
        np.testing.assert_array_equal(state.last_pseudo_labels, expected)

    def test_teacher_moves_by_momentum(self, fresh, tiny_world):
        state = fresh()
        t0 = flat(state, "teacher")
        _, state = step(state, batches(tiny_world)[0], SMALL)
        np.testing.assert_allclose(flat(state, "teacher") - t0, (1 - SMALL.lambda_s) * (flat(state, "student") - t0), atol=1e-12)

    def test_without_contrastive_term_update_is_plain_pseudo_label_step(self, fresh, tiny_world):
        cfg = dataclasses.replace(SMALL, lambda_cts=0.0)
        state = fresh(cfg)
        before = dict(state.pairs)
        b = batches(tiny_world)[0]
        _, state = step(state, b, cfg)
        for m in MODALITIES:
            ref, _ = student_update(before[m], b.modality(m), state.last_pseudo_labels, cfg)
            np.testing.assert_array_equal(state.pairs[m].student.flat(), ref.student.flat())
            np.testing.assert_array_equal(state.pairs[m].teacher.flat(), ref.teacher.flat())

    def test_labels_never_read(self, fresh, tiny_world):
        stream = batches(tiny_world)
        rng = np.random.default_rng(0)
        scrambled = [dataclasses.replace(b, labels=rng.permutation(b.labels)) for b in stream]
        a, b = fresh(), fresh()
        for x, y in zip(stream, scrambled):
            pa, a = step(a, x, SMALL)
            pb, b = step(b, y, SMALL)
            assert pa.tobytes() == pb.tobytes()

    def test_record_fields(self, fresh, tiny_world):
        state = fresh()
        _, state = step(state, batches(tiny_world)[0], SMALL)
        rec = state.last_record
        for m in MODALITIES:
            for key in ("ce", "cts", "agree", "w", "w_aug", "w_hat", "enqueued", "source_frac"):
                assert f"{key}_{m}" in rec
        assert isinstance(rec["restored"], bool)


class TestVariants:
    def test_no_restore_equals_comac_without_restoration(self, fresh, tiny_world):
        cfg = dataclasses.replace(SMALL, p_rs=0.0)
        a = predictions(fresh(cfg), batches(tiny_world), cfg)
        nr = with_variant(cfg, "no_restore")
        b = predictions(fresh(nr), batches(tiny_world), nr)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    def test_no_impa_equals_comac_without_augmentation(self, fresh, tiny_world):
        # with no augmented copies both views coincide, so every mixing rule agrees
        cfg = dataclasses.replace(SMALL, aug_2d=(), aug_3d=())
        a = predictions(fresh(cfg), batches(tiny_world), cfg)
        ni = with_variant(cfg, "no_impa")
        b = predictions(fresh(ni), batches(tiny_world), ni)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, atol=1e-12)

    def test_no_update_keeps_centroids(self, fresh, tiny_world):
        cfg = with_variant(SMALL, "no_update")
        state = fresh(cfg)
        mu0 = {m: state.memory[m].centroids.live.copy() for m in MODALITIES}
        for b in batches(tiny_world):
            _, state = step(state, b, cfg)
        for m in MODALITIES:
            np.testing.assert_array_equal(state.memory[m].centroids.live, mu0[m])

    def test_restoration_fills_with_source(self, fresh, tiny_world):
        cfg = dataclasses.replace(SMALL, p_rs=1.0)
        state = fresh(cfg)
        for b in batches(tiny_world):
            _, state = step(state, b, cfg)
            assert state.last_record["restored"]
        assert all(q.source_fraction == 1.0 for m in MODALITIES for q in state.memory[m].queues)

    def test_pslabel_median_filter(self):
        probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.7, 0.3], [0.2, 0.8], [0.45, 0.55]])
        np.testing.assert_array_equal(median_filter(probs), [True, False, True, True, False])

    def test_pslabel_keeps_at_least_half(self, fresh, tiny_world):
        cfg = with_variant(SMALL, "pslabel")
        state = fresh(cfg)
        for b in batches(tiny_world):
            _, state = step(state, b, cfg)
            for m in MODALITIES:
                assert 2 * state.last_record[f"kept_{m}"] >= b.n_points

    def test_entropy_min_freezes_encoder(self, fresh, tiny_world):
        cfg = with_variant(SMALL, "entropy_min")
        state = fresh(cfg)
        before = {m: state.pairs[m].student for m in MODALITIES}
        for b in batches(tiny_world):
            _, state = step(state, b, cfg)
        for m in MODALITIES:
            old, new = before[m].layers, state.pairs[m].student.layers
            for a, b in zip(old[:-1], new[:-1]):
                np.testing.assert_array_equal(a.weight, b.weight)
            assert not np.array_equal(old[-1].weight, new[-1].weight)


class TestRunSequence:
    def test_empty_stream(self, fresh):
        out = run_sequence(fresh(), [], SMALL, ["a"])
        assert out.overall is None and out.segments == [] and out.trace == []

    def test_deterministic(self, fresh, tiny_world):
        sa, sb = fresh(), fresh()
        a = run_sequence(sa, batches(tiny_world), SMALL, ["shift"], keep_predictions=True)
        b = run_sequence(sb, batches(tiny_world), SMALL, ["shift"], keep_predictions=True)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.predictions, b.predictions))
        assert a.trace == b.trace
        for m in MODALITIES:
            for qa, qb in zip(sa.memory[m].queues, sb.memory[m].queues):
                assert qa.data.tobytes() == qb.data.tobytes()

    def test_duplicate_sample_rejected(self, fresh, tiny_world):
        b = batches(tiny_world)[0]
        with pytest.raises(ConfigError):
            run_sequence(fresh(), [b, b], SMALL, ["shift"])

    def test_trace_counts(self, fresh, tiny_world):
        stream = batches(tiny_world)
        out = run_sequence(fresh(), stream, SMALL, ["shift"])
        assert len(out.trace) == len(stream)
        assert sum(r["correct"] for r in out.trace) == round(out.overall.accuracy * out.overall.n_points)

    def test_clean_source_only_matches_holdout(self, pretrained, tiny_world):
        p2, p3, feats = pretrained
        cfg = with_variant(SMALL, "source_only")
        hold = SourceDataset.stack(make_source_dataset(tiny_world, 40, seed=3).holdout)
        p = 0.5 * (forward(p2.student, hold.x2d).probs + forward(p3.student, hold.x3d).probs)
        held = float((p.argmax(1) == hold.labels).mean())
        out = run_sequence(init(p2, p3, feats, cfg, 0), make_stream(tiny_world, [SegmentSpec("clean", 40)], 11), cfg, ["clean"])
        assert abs(out.overall.accuracy - held) < 0.03
