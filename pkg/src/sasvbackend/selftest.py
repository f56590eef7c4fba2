"""Built-in oracle and invariant checks, runnable from the CLI.

Each check recomputes an operation through an independent, deliberately
naive route (index loops, scalar math, midpoint threshold sweeps) and
compares against the library path. Exit status communicates the verdict so
the suite can gate deployments without a test harness installed.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import attention as att
from . import fusion, metrics
from . import tensor as T
from ._mem import tune_malloc
from .tensor import RunningStats, Tensor
from .training import Adam, weighted_cross_entropy


def _fd_gradcheck(make_loss, tensors, h=1e-6):
    for t in tensors:
        t.zero_grad()
    with T.recording() as tape:
        loss = make_loss()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        nflat = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss().item()
            flat[i] = orig - h
            down = make_loss().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        numeric = nflat.reshape(t.data.shape)
        err = np.abs(analytic - numeric) / np.maximum(
            1.0, np.maximum(np.abs(analytic), np.abs(numeric))
        )
        worst = max(worst, float(err.max()))
    return worst


def _projected(out, rng):
    return T.sum_all(T.mul(out, Tensor(rng.uniform(-1, 1, out.shape))))


def check_layer_gradients():
    rng = np.random.default_rng(0)
    worst = 0.0

    x = Tensor(rng.uniform(-1, 1, (2, 3, 6)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (4, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    worst = max(worst, _fd_gradcheck(
        lambda: _projected(T.conv1d(x, w, b, 1, 1), np.random.default_rng(1)), [x, w, b]))

    x2 = Tensor(rng.uniform(-1, 1, (2, 2, 5, 5)), requires_grad=True)
    w2 = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
    b2 = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
    worst = max(worst, _fd_gradcheck(
        lambda: _projected(T.conv2d(x2, w2, b2, 1, 1), np.random.default_rng(1)), [x2, w2, b2]))

    xb = Tensor(rng.uniform(-1, 1, (4, 3, 5)), requires_grad=True)
    gm = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    bt = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
    stats = RunningStats(3)
    worst = max(worst, _fd_gradcheck(
        lambda: _projected(T.batch_norm(xb, gm, bt, stats.copy(), True),
                           np.random.default_rng(1)), [xb, gm, bt]))

    xp = Tensor(rng.uniform(-1, 1, (2, 3, 10)), requires_grad=True)
    worst = max(worst, _fd_gradcheck(
        lambda: _projected(T.adaptive_avg_pool1d(xp, 3), np.random.default_rng(1)), [xp]))

    for kind, shape in ((att.PA, (2, 3, 4)), (att.SE1D, (2, 3, 4)),
                        (att.SE2D, (2, 3, 3, 4)), (att.VSE, (2, 3, 3, 4))):
        params = att.AttentionParams.init(
            kind, np.random.default_rng(5), channels=3, features=4, reduction=2)
        xa = Tensor(rng.uniform(-1, 1, shape), requires_grad=True)
        tensors = [xa] + [wt for _, wt in params.named_weights()]
        worst = max(worst, _fd_gradcheck(
            lambda: _projected(att.apply_attention(xa, params),
                               np.random.default_rng(1)), tensors))

    return worst < 1e-6, f"max relative gradient error {worst:.3g}"


def check_conv_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(5):
        x = rng.uniform(-1, 1, (2, 3, 8))
        w = rng.uniform(-1, 1, (4, 3, 3))
        b = rng.uniform(-1, 1, 4)
        got = T.conv1d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
        ref = np.zeros_like(got)
        for bi in range(2):
            for co in range(4):
                for lo in range(8):
                    acc = b[co]
                    for ci in range(3):
                        for ki in range(3):
                            src = lo + ki - 1
                            if 0 <= src < 8:
                                acc += x[bi, ci, src] * w[co, ci, ki]
                    ref[bi, co, lo] = acc
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst < 1e-12, f"max deviation {worst:.3g}"


def check_circulant_properties():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(1, 32))
        v = rng.normal(size=n)
        mat = fusion.circulant(v)
        for i in range(n):
            if not np.array_equal(np.roll(mat[i], 1), mat[(i + 1) % n]):
                return False, f"row rotation broken at D={n}"
            for j in range(n):
                if mat[i, j] != v[(j - i) % n]:
                    return False, f"index structure broken at D={n}"
        if not np.allclose(mat.sum(axis=1), v.sum(), atol=1e-9):
            return False, f"row sums broken at D={n}"
    return True, "rotation, index structure and row sums hold"


def check_eer_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(40):
        n_pos = int(rng.integers(1, 80))
        n_neg = int(rng.integers(1, 80))
        scores = np.round(rng.uniform(0, 1, n_pos + n_neg), int(rng.integers(1, 4)))
        pos, neg = scores[:n_pos], scores[n_pos:]
        got, _ = metrics.eer(pos, neg)
        distinct = sorted(set(pos.tolist()) | set(neg.tolist()))
        thresholds = [distinct[0] - 1.0]
        thresholds += [(a + b) / 2 for a, b in zip(distinct, distinct[1:])]
        thresholds.append(distinct[-1] + 1.0)
        prev = None
        ref = None
        for t in thresholds:
            far = float(np.mean(neg >= t))
            frr = float(np.mean(pos < t))
            if far - frr <= 0:
                if far == frr:
                    ref = far
                else:
                    pf, pr = prev
                    frac = (pf - pr) / ((pf - pr) - (far - frr))
                    ref = pf + frac * (far - pf)
                break
            prev = (far, frr)
        worst = max(worst, abs(got - ref))
    return worst < 1e-9, f"max |library - bruteforce| = {worst:.3g}"


def check_adam_oracle():
    rng = np.random.default_rng(4)
    p0 = rng.uniform(-1, 1, 4)
    p = Tensor(p0.copy(), requires_grad=True)
    state = Adam([("p", p)])
    ref = p0.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = rng.uniform(-1, 1, 4)
        p.grad = g.copy()
        state.step(lr=1e-2, weight_decay=1e-3)
        gd = g + 1e-3 * ref
        m = 0.9 * m + 0.1 * gd
        v = 0.999 * v + 0.001 * gd * gd
        ref = ref - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    worst = float(np.abs(p.data - ref).max())
    return worst < 1e-12, f"max deviation {worst:.3g}"


def check_cross_entropy_oracle():
    rng = np.random.default_rng(5)
    logits = rng.uniform(-8, 8, (16, 2))
    labels = rng.integers(0, 2, 16)
    got = weighted_cross_entropy(Tensor(logits), labels, (0.1, 0.9)).item()
    total = 0.0
    for i in range(16):
        mx = max(logits[i])
        logz = mx + math.log(math.exp(logits[i, 0] - mx) + math.exp(logits[i, 1] - mx))
        total += (0.1, 0.9)[labels[i]] * (logz - logits[i, labels[i]])
    ref = total / 16
    return abs(got - ref) < 1e-12, f"deviation {abs(got - ref):.3g}"


def check_batch_norm_moments():
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, (8, 4, 6))
    out = T.batch_norm(
        Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), RunningStats(4), True
    ).data
    mean = np.abs(out.mean(axis=(0, 2))).max()
    var = out.var(axis=(0, 2))
    expected = x.var(axis=(0, 2)) / (x.var(axis=(0, 2)) + 1e-5)
    var_err = np.abs(var - expected).max()
    return mean < 1e-9 and var_err < 1e-6, f"|mean|={mean:.2g}, var deviation={var_err:.2g}"


CHECKS = [
    ("layer-gradients-vs-finite-differences", check_layer_gradients),
    ("conv1d-vs-loop-oracle", check_conv_oracle),
    ("circulant-algebra", check_circulant_properties),
    ("eer-vs-exhaustive-threshold-oracle", check_eer_oracle),
    ("adam-vs-scalar-reference", check_adam_oracle),
    ("weighted-cross-entropy-vs-loop", check_cross_entropy_oracle),
    ("batch-norm-moments", check_batch_norm_moments),
]


def run(out=print) -> bool:
    tune_malloc()
    all_ok = True
    for name, fn in CHECKS:
        start = time.perf_counter()
        ok, detail = fn()
        all_ok &= ok
        status = "ok" if ok else "FAIL"
        out(f"{status:4s} {name} ({detail}, {time.perf_counter() - start:.2f}s)")
    return all_ok
