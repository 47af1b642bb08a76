"""Fast invariant checks runnable from an installed package (``mmctta selftest``)."""

from __future__ import annotations

import numpy as np

from .fusion import TeacherOutput, intra_modal, xmpf_fuse
from .memory import RestorationPolicy, contrastive_loss, enqueue, maybe_restore, new_queue
from .nn import backward, cross_entropy, ema_update, forward, init_network, l2_normalize


def _check_gradients(rng) -> float:
    net = init_network(4, 3, rng, hidden=(6,), feature_dim=5)
    x = rng.standard_normal((7, 4))
    y = rng.integers(0, 3, 7)
    queues = [l2_normalize(rng.standard_normal((6, 5)))[0] for _ in range(3)]
    sel = np.arange(3)

    def loss(n):
        c = forward(n, x)
        ce, _ = cross_entropy(c.probs, y)
        cts, _ = contrastive_loss(c.z[sel], 0, queues)
        return ce + cts

    c = forward(net, x)
    _, g_logits = cross_entropy(c.probs, y)
    _, g_anchor = contrastive_loss(c.z[sel], 0, queues)
    g_z = np.zeros_like(c.z)
    g_z[sel] = g_anchor
    analytic = backward(net, c, g_logits, g_z).flat()
    flat = net.flat()
    sizes = [p.size for p in net.params()]
    shapes = [p.shape for p in net.params()]

    def unflat(v):
        parts = np.split(v, np.cumsum(sizes)[:-1])
        return net.with_params([p.reshape(s) for p, s in zip(parts, shapes)])

    worst = 0.0
    for i in rng.choice(flat.size, size=20, replace=False):
        e = np.zeros_like(flat)
        e[i] = 1e-5
        num = (loss(unflat(flat + e)) - loss(unflat(flat - e))) / 2e-5
        worst = max(worst, abs(num - analytic[i]) / max(abs(num), abs(analytic[i]), 1e-8))
    return worst


def _check_fusion(rng) -> float:
    n, c, f = 9, 4, 3

    def side():
        p = rng.dirichlet(np.ones(c), n)
        pa = rng.dirichlet(np.ones(c), n)
        z = l2_normalize(rng.standard_normal((n, f)))[0]
        za = l2_normalize(rng.standard_normal((n, f)))[0]
        return TeacherOutput(p, pa, z, za)

    mu = l2_normalize(rng.standard_normal((c, f)))[0]
    a, b = side(), side()
    ra, rb = intra_modal(a, mu), intra_modal(b, mu)
    got = xmpf_fuse(ra, rb).p_xm
    err = 0.0
    for i in range(n):
        hats, weights = [], []
        for o in (a, b):
            k, ka = int(np.argmax(o.p[i])), int(np.argmax(o.p_aug[i]))
            w = np.exp(mu @ o.z[i])
            w = w[k] / w.sum()
            wa = np.exp(mu @ o.z_aug[i])
            wa = wa[ka] / wa.sum()
            hats.append((w * o.p[i] + wa * o.p_aug[i]) / (w + wa))
            weights.append(w + wa if k == ka else max(w, wa))
        ref = (weights[0] * hats[0] + weights[1] * hats[1]) / (weights[0] + weights[1])
        err = max(err, float(np.abs(ref - got[i]).max()))
    return err


def _check_queue(rng) -> bool:
    q = new_queue(rng.standard_normal((8, 3)))
    bank = rng.standard_normal((8, 3))
    policy = RestorationPolicy(p_rs=0.5, n_enq=3, tau_cf=0.0)
    for _ in range(200):
        upd = enqueue(q, rng.standard_normal((int(rng.integers(0, 4)), 3)))
        q, _ = maybe_restore(q, upd, bank, policy, rng)
        if len(q) != 8 or not np.all(np.diff(q.tags) > 0):
            return False
    return True


def _check_ema(rng) -> float:
    s = init_network(3, 2, rng, hidden=(4,), feature_dim=3)
    t = init_network(3, 2, rng, hidden=(4,), feature_dim=3)
    t0 = t
    for _ in range(100):
        t = ema_update(t, s, 0.999)
    ref = s.flat() + 0.999 ** 100 * (t0.flat() - s.flat())
    return float(np.abs(t.flat() - ref).max())


def run_selftest(verbose: bool = True) -> bool:
    rng = np.random.default_rng(2024)
    checks = [
        ("gradients match finite differences", lambda: _check_gradients(rng), lambda v: v < 1e-4),
        ("fusion matches the per-point formula", lambda: _check_fusion(rng), lambda v: v < 1e-10),
        ("queues keep capacity and FIFO order", lambda: _check_queue(rng), bool),
        ("EMA matches its closed form", lambda: _check_ema(rng), lambda v: v < 1e-9),
    ]
    ok = True
    for name, fn, good in checks:
        value = fn()
        passed = bool(good(value))
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name} ({value})")
    return ok
