"""Self-checking property suites runnable from the command line.

Suites:

grad
    float64 central-difference checks of every primitive, layer and loss
    (relative error below 1e-6) and of a tiny end-to-end model (below 1e-4).
norm
    group and sequence normalisation produce zero mean, unit variance.
metrics
    vectorised confusion counts equal a per-pixel loop; CSI <= POD and
    CSI <= 1 - FAR; binned counts add up to the overall counts.
shape
    every STMU kind maps ``[2, 6, 1, 64, 64]`` to itself with outputs in
    (0, 1); a DSTA unit with zeroed output paths is an exact identity.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import evaluation, layers, stmu, training
from . import numerics as nx
from .architecture import McsdNet, ModelConfig, PyramidPooling
from .numerics import Rng, Tensor

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4
SUITES = ("grad", "norm", "metrics", "shape")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    value: float
    limit: float
    seconds: float


def _probe(rng: Rng, shape) -> np.ndarray:
    return rng.normal(shape, np.float64)


def _weighted(out: Tensor, probe: np.ndarray) -> Tensor:
    return (out * Tensor(probe)).sum()


def _t(rng: Rng, shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(shape, np.float64) * scale, requires_grad=True)


def _checked(module) -> list[Tensor]:
    """Parameters with a non-trivial gradient.

    A key bias adds the same amount to every score in a softmax row, so its
    gradient is identically zero; it is covered by :func:`key_bias_gradient`.
    """
    return [p for n, p in module.named_parameters() if not n.endswith("key.bias")]


def _key_biases(module) -> list[Tensor]:
    return [p for n, p in module.named_parameters() if n.endswith("key.bias")]


# ---------------------------------------------------------------------------
# grad
# ---------------------------------------------------------------------------

def _primitive_cases(rng: Rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """name -> (scalar function, parameters) for every differentiable building block."""
    cases = {}

    def unary(name, fn, x):
        p = _probe(rng, fn(x).shape)
        cases[name] = (lambda: _weighted(fn(x), p), [x])

    def binary(name, fn, a, b):
        p = _probe(rng, fn(a, b).shape)
        cases[name] = (lambda: _weighted(fn(a, b), p), [a, b])

    binary("add", nx.add, _t(rng, (3, 4)), _t(rng, (1, 4)))
    binary("mul", nx.mul, _t(rng, (3, 4)), _t(rng, (3, 1)))
    binary("div", nx.div, _t(rng, (3, 4)), Tensor(rng.uniform(1.0, 2.0, (3, 4), np.float64), requires_grad=True))
    unary("exp", nx.exp, _t(rng, (3, 4)))
    unary("log", nx.log, Tensor(rng.uniform(0.5, 2.0, (3, 4), np.float64), requires_grad=True))
    unary("sqrt", nx.sqrt, Tensor(rng.uniform(0.5, 2.0, (3, 4), np.float64), requires_grad=True))
    unary("tanh", nx.tanh, _t(rng, (3, 4)))
    unary("sigmoid", nx.sigmoid, _t(rng, (3, 4)))
    unary("power", lambda x: nx.power(x, 3.0), _t(rng, (3, 4)))
    binary("matmul", nx.matmul, _t(rng, (2, 3, 4)), _t(rng, (4, 5)))
    unary("softmax", lambda x: nx.softmax(x, -1), _t(rng, (3, 5)))
    unary("standardize", lambda x: nx.standardize(x, -1, 1e-5), _t(rng, (3, 6), 3.0))
    unary("sum_mean", lambda x: x.sum(axis=1) + x.mean(axis=1), _t(rng, (3, 4)))
    unary("transpose_reshape", lambda x: x.transpose(1, 0, 2).reshape(4, 6), _t(rng, (2, 4, 3)))
    unary("getitem", lambda x: x[1:, ::2], _t(rng, (3, 4)))
    binary("concat", lambda a, b: nx.concat([a, b], axis=1), _t(rng, (2, 3)), _t(rng, (2, 2)))
    unary("pad_axis", lambda x: nx.pad_axis(x, 1, 1, 2), _t(rng, (2, 3)))
    x = _t(rng, (2, 3, 6, 6))
    w = _t(rng, (4, 3, 3, 3), 0.3)
    b = _t(rng, (4,))
    p = _probe(rng, (2, 4, 6, 6))
    cases["conv2d"] = (lambda: _weighted(nx.conv2d(x, w, b, 1, 2, 2), p), [x, w, b])
    xs = _t(rng, (1, 2, 7, 7))
    ws = _t(rng, (3, 2, 3, 3), 0.3)
    ps = _probe(rng, (1, 3, 3, 3))
    cases["conv2d_stride"] = (lambda: _weighted(nx.conv2d(xs, ws, None, 2, 0, 1), ps), [xs, ws])
    xt = _t(rng, (2, 3, 3, 3))
    wt = _t(rng, (3, 2, 2, 2), 0.3)
    bt = _t(rng, (2,))
    pt = _probe(rng, (2, 2, 6, 6))
    cases["conv_transpose2d"] = (lambda: _weighted(nx.conv_transpose2d(xt, wt, bt, 2), pt), [xt, wt, bt])
    unary("maxpool2d", lambda x: nx.maxpool2d(x, 2), _t(rng, (2, 2, 4, 4)))
    unary("adaptive_avg_pool2d", lambda x: nx.adaptive_avg_pool2d(x, 3, 2), _t(rng, (2, 2, 7, 5)))
    unary("upsample_nearest", lambda x: nx.upsample_nearest(x, 2), _t(rng, (1, 2, 3, 3)))
    unary("broadcast_spatial", lambda x: nx.broadcast_spatial(x, 3, 2), _t(rng, (2, 3, 1, 1)))

    dt = np.float64
    gn = layers.GroupNorm(2, 4, dtype=dt)
    gn.gamma_scale.data = rng.normal((4,), dt)
    gn.beta_shift.data = rng.normal((4,), dt)
    xg = _t(rng, (2, 4, 3, 3), 3.0)
    pg = _probe(rng, xg.shape)
    cases["group_norm"] = (lambda: _weighted(layers.group_norm(xg, gn), pg), [xg] + gn.parameters())
    sn = layers.SequenceNorm((2, 2, 2, 2), dtype=dt)
    sn.gamma_scale.data = rng.normal((2, 2, 2, 2), dt)
    sn.beta_shift.data = rng.normal((2, 2, 2, 2), dt)
    xq = _t(rng, (2, 2, 2, 2, 2), 3.0)
    pq = _probe(rng, xq.shape)
    cases["sequence_norm"] = (lambda: _weighted(layers.sequence_norm(xq, sn), pq), [xq] + sn.parameters())
    cnr = layers.ConvNormReLU(2, 4, rng, groups=2, dtype=dt)
    xc = _t(rng, (1, 2, 4, 4))
    pc = _probe(rng, (1, 4, 4, 4))
    cases["conv_norm_relu"] = (lambda: _weighted(cnr(xc), pc), [xc] + cnr.parameters())
    mha = layers.MultiHeadSelfAttention(4, 2, rng, dt)
    xa = _t(rng, (2, 3, 4))
    pa = _probe(rng, xa.shape)
    cases["multi_head_self_attention"] = (lambda: _weighted(mha(xa), pa), [xa] + _checked(mha))
    pp = PyramidPooling(2, (1, 2), rng, dt)
    xp = _t(rng, (1, 2, 4, 4))
    ppr = _probe(rng, xp.shape)
    cases["pyramid_pool"] = (lambda: _weighted(pp(xp), ppr), [xp] + pp.parameters())

    extent = (3, 2, 2, 2)
    for kind in ("dsta", "tformer", "conv3d", "convlstm"):
        unit = stmu.build_stmu(kind, extent, 2, rng, dtype=dt)
        for prm in unit.parameters():
            prm.data = rng.normal(prm.shape, dt) * 0.5
        xs_ = _t(rng, (2,) + extent)
        pr = _probe(rng, xs_.shape)
        cases[f"stmu_{kind}"] = (lambda u=unit, x=xs_, pr=pr: _weighted(stmu.stmu_apply(x, u.kind, u), pr),
                                 [xs_] + _checked(unit))

    prob = Tensor(rng.uniform(0.05, 0.95, (2, 3, 1, 2, 2), np.float64), requires_grad=True)
    target = (rng.random((2, 3, 1, 2, 2)) < 0.5).astype(np.float64)
    cases["focal_loss"] = (lambda: training.focal_loss(prob, target, training.FocalLossConfig(2.0)), [prob])
    cases["binary_cross_entropy"] = (lambda: training.binary_cross_entropy(prob, target), [prob])
    return cases


KINK_MARGIN = 5e-4


class _KinkMonitor:
    """Smallest distance of any ReLU input or positive maxpool winner to a kink."""

    def __init__(self):
        self.margin = np.inf

    def __enter__(self):
        self._relu, self._pool = nx.relu, nx.maxpool2d

        def relu(x):
            self.margin = min(self.margin, float(np.abs(x.data).min()))
            return self._relu(x)

        def maxpool2d(x, factor):
            n, c, h, w = x.shape
            win = x.data.reshape(n, c, h // factor, factor, w // factor, factor)
            win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // factor, w // factor, -1)
            top = np.sort(win, axis=-1)[..., -2:]
            gap = (top[..., 1] - top[..., 0])[top[..., 1] > 0]
            if gap.size:
                self.margin = min(self.margin, float(gap.min()))
            return self._pool(x, factor)

        nx.relu, nx.maxpool2d = relu, maxpool2d
        return self

    def __exit__(self, *exc):
        nx.relu, nx.maxpool2d = self._relu, self._pool
        return False


def tiny_model_case(seed: int = 0, kind: str = "dsta"):
    """A two-level float64 model on 8x8 inputs and its focal-loss closure.

    Finite differences are only valid where the loss is smooth within the
    step, so the input is redrawn (deterministically) until every ReLU input
    and every positive maxpool winner is at least ``KINK_MARGIN`` away from
    its kink.
    """
    cfg = ModelConfig(levels=2, channels=(4, 4), stmu_kind=kind, stmu_depth=1, atrous_rates=(1, 2),
                      heads=2, seq_len=2, image_size=(8, 8), groups=2)
    model = McsdNet(cfg, seed=seed, dtype=np.float64)
    for draw in range(100):
        rng = Rng(seed).spawn(1000 + draw)
        x = Tensor(rng.normal((1, 2, 1, 8, 8), np.float64))
        y = (rng.random((1, 2, 1, 8, 8)) < 0.3).astype(np.float64)
        with _KinkMonitor() as mon:
            model(x)
        if mon.margin >= KINK_MARGIN:
            break
    else:
        raise RuntimeError("no smooth probe point found")
    return model, (lambda: training.focal_loss(model(x), y))


def key_bias_gradient(seed: int = 0) -> float:
    """Largest key-bias gradient relative to the largest other gradient (should be ~0)."""
    model, fn = tiny_model_case(seed)
    with nx.Tape() as tape:
        loss = fn()
    tape.backward(loss)
    kb = max(float(np.abs(p.grad).max()) for p in _key_biases(model))
    rest = max(float(np.abs(p.grad).max()) for p in _checked(model) if p.grad is not None)
    model.zero_grad()
    return kb / rest


def suite_grad(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, (fn, params) in _primitive_cases(Rng(seed)).items():
        t0 = time.perf_counter()
        err = nx.grad_check(fn, params, eps=1e-5, max_coords=24, seed=seed)
        out.append(CheckResult("grad", name, err < PRIMITIVE_TOL, err, PRIMITIVE_TOL, time.perf_counter() - t0))
    t0 = time.perf_counter()
    model, fn = tiny_model_case(seed)
    err = nx.grad_check(fn, _checked(model), eps=1e-5, max_coords=4, seed=seed)
    out.append(CheckResult("grad", "end_to_end_tiny_model", err < MODEL_TOL, err, MODEL_TOL, time.perf_counter() - t0))
    t0 = time.perf_counter()
    kb = key_bias_gradient(seed)
    out.append(CheckResult("grad", "key_bias_zero_gradient", kb < 1e-10, kb, 1e-10, time.perf_counter() - t0))
    return out


# ---------------------------------------------------------------------------
# norm
# ---------------------------------------------------------------------------

def norm_deviation(samples: int = 20, seed: int = 0) -> tuple[float, float]:
    """Worst per-extent |mean| and |variance - 1| over random inputs with variance >= 1."""
    rng = Rng(seed)
    worst_mean = worst_var = 0.0
    gn = layers.GroupNorm(4, 8, dtype=np.float64)
    sn = layers.SequenceNorm((3, 4, 5, 5), dtype=np.float64)
    for _ in range(samples):
        spread = float(rng.uniform(1.0, 10.0, (), np.float64))
        shift = float(rng.uniform(-50.0, 50.0, (), np.float64))
        x = rng.normal((2, 8, 6, 6), np.float64) * spread + shift
        z = layers.group_norm(Tensor(x), gn).data.reshape(2, 4, -1)
        s = rng.normal((2, 3, 4, 5, 5), np.float64) * spread + shift
        q = layers.sequence_norm(Tensor(s), sn).data.reshape(2, -1)
        for v in (z, q):
            worst_mean = max(worst_mean, float(np.abs(v.mean(-1)).max()))
            worst_var = max(worst_var, float(np.abs(v.var(-1) - 1.0).max()))
    return worst_mean, worst_var


def suite_norm(seed: int = 0) -> list[CheckResult]:
    t0 = time.perf_counter()
    m, v = norm_deviation(20, seed)
    dt = time.perf_counter() - t0
    return [CheckResult("norm", "mean", m < 1e-6, m, 1e-6, dt),
            CheckResult("norm", "variance", v < 1e-4, v, 1e-4, dt)]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def loop_confusion(pred, gt) -> tuple[int, int, int, int]:
    tp = fp = fn = tn = 0
    for p, g in zip(np.asarray(pred).reshape(-1).tolist(), np.asarray(gt).reshape(-1).tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def suite_metrics(seed: int = 0) -> list[CheckResult]:
    rng = Rng(seed)
    out = []
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(50):
        density = float(rng.random(()))
        pred = (rng.random((32, 32)) < density).astype(np.uint8)
        gt = (rng.random((32, 32)) < float(rng.random(()))).astype(np.uint8)
        c = evaluation.confusion(pred, gt)
        mismatches += (c.tp, c.fp, c.fn, c.tn) != loop_confusion(pred, gt)
    out.append(CheckResult("metrics", "loop_oracle", mismatches == 0, mismatches, 0, time.perf_counter() - t0))

    t0 = time.perf_counter()
    violations = 0
    for tp, fp, fn in rng.integers(0, 1000, (1000, 3)).tolist():
        c = evaluation.ConfusionCounts(tp, fp, fn, 0)
        p, f, s = evaluation.pod(c), evaluation.far(c), evaluation.csi(c)
        if None in (p, f, s):
            continue
        # exact rational comparison avoids rounding at equality
        s_q = Fraction(tp, tp + fp + fn)
        violations += s_q > Fraction(tp, tp + fn) or s_q > 1 - Fraction(fp, tp + fp)
    out.append(CheckResult("metrics", "csi_inequalities", violations == 0, violations, 0, time.perf_counter() - t0))

    t0 = time.perf_counter()
    preds = [(rng.random((2, 10, 10)) < 0.1).astype(np.uint8) for _ in range(12)]
    gts = [(rng.random((2, 10, 10)) < float(rng.uniform(0.0, 0.08, (), np.float64))).astype(np.uint8) for _ in range(12)]
    report = evaluation.binned_evaluate(preds, gts)
    pooled = evaluation.ConfusionCounts()
    for sub in report.bins.values():
        pooled = pooled + sub.counts
    ok = pooled == report.counts and sum(s.samples for s in report.bins.values()) == report.samples
    two = evaluation.assign_bin(evaluation.coverage_fraction(np.r_[np.ones(2), np.zeros(98)]), evaluation.default_bins())
    ok = ok and (two.lo, two.hi) == (2, 3)
    out.append(CheckResult("metrics", "binned_totals", ok, float(not ok), 0, time.perf_counter() - t0))
    return out


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------

def suite_shape(seed: int = 0) -> list[CheckResult]:
    out = []
    x = Tensor(Rng(seed).random((2, 6, 1, 64, 64)).astype(np.float32))
    for kind in stmu.StmuKind:
        t0 = time.perf_counter()
        y = McsdNet(ModelConfig(stmu_kind=kind), seed=seed)(x).data
        ok = y.shape == x.shape and bool(((y > 0) & (y < 1)).all())
        out.append(CheckResult("shape", f"forward_{kind.value}", ok, float(not ok), 0, time.perf_counter() - t0))
    t0 = time.perf_counter()
    unit = stmu.Dsta((6, 8, 4, 4), 4, Rng(seed))
    unit.fuse.weight.data[:] = 0
    unit.fuse.bias.data[:] = 0
    seq = Tensor(Rng(seed + 1).normal((2, 6, 8, 4, 4), np.float32))
    diff = float(np.abs(stmu.dsta_forward(seq, unit).data - seq.data).max())
    out.append(CheckResult("shape", "dsta_zero_identity", diff == 0.0, diff, 0, time.perf_counter() - t0))
    return out


_RUNNERS = {"grad": suite_grad, "norm": suite_norm, "metrics": suite_metrics, "shape": suite_shape}


def run_suites(names, seed: int = 0) -> list[CheckResult]:
    if isinstance(names, str):
        names = SUITES if names == "all" else (names,)
    unknown = [n for n in names if n not in _RUNNERS]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {', '.join(SUITES)} or all")
    results = []
    for n in names:
        results.extend(_RUNNERS[n](seed))
    return results


def summary(results: list[CheckResult]) -> dict:
    return {
        "passed": all(r.passed for r in results),
        "failures": [r.name for r in results if not r.passed],
        "checks": [asdict(r) for r in results],
    }
