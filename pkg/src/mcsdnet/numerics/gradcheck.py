"""Central-difference gradient checking against tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import Tape, Tensor


class GradCheckError(ValueError):
    pass


def _evaluate(f: Callable[[], Tensor]) -> float:
    out = f()
    if out.size != 1:
        raise GradCheckError(f"function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def numerical_grad(f: Callable[[], Tensor], param: Tensor, eps: float, coords=None) -> np.ndarray:
    """Central differences ``(f(p+eps) - f(p-eps)) / (2 eps)`` per coordinate.

    Only the coordinates listed in ``coords`` (flat indices) are filled; the
    rest are left at zero.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = _evaluate(f)
        flat[i] = orig - eps
        fm = _evaluate(f)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(param.shape)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    elementwise: bool = False,
) -> float:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``f`` takes no arguments and reads ``params`` by closure.  With
    ``max_coords`` set, at most that many flat coordinates per parameter are
    probed, drawn without replacement from ``Rng(seed)``.

    The error of one parameter is ``max|a - n| / max(max|a|, max|n|, 1e-8)``
    over its probed coordinates (a relative error in the max norm); the
    worst parameter's error is returned.  ``elementwise=True`` instead takes
    ``max(|a - n| / max(|a|, |n|, 1e-8))``, which is dominated by
    finite-difference noise on coordinates whose gradient is nearly zero.
    """
    if not eps > 0:
        raise GradCheckError("eps must be positive")
    for p in params:
        if p.dtype != np.float64:
            raise GradCheckError("gradient checks require float64 parameters")
    if _evaluate(f) != _evaluate(f):
        raise GradCheckError("function is not deterministic")

    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    for p, s in zip(params, saved):
        p.requires_grad = s
        p.grad = None

    rng = Rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = rng.gen.choice(p.size, size=max_coords, replace=False)
        n = numerical_grad(f, p, eps, coords)
        a_flat, n_flat = a.reshape(-1), n.reshape(-1)
        if coords is not None:
            a_flat, n_flat = a_flat[coords], n_flat[coords]
        if not a_flat.size:
            continue
        diff = np.abs(a_flat - n_flat)
        if elementwise:
            err = float((diff / np.maximum(np.maximum(np.abs(a_flat), np.abs(n_flat)), 1e-8)).max())
        else:
            err = float(diff.max() / max(np.abs(a_flat).max(), np.abs(n_flat).max(), 1e-8))
        worst = max(worst, err)
    return worst
