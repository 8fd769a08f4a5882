"""Finite-difference verification of reverse-mode gradients.

The numeric side is a central difference and never reuses the analytic
path, so the two routes stay independent.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, eps: float) -> np.ndarray:
    """Central-difference gradient of loss_fn w.r.t. every entry of param."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn().item()
        flat[i] = orig - eps
        lo = loss_fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def _numeric_grad_entries(loss_fn: Callable[[], Tensor], param: Tensor,
                          entries: np.ndarray, eps: float):
    """Central differences plus the one-sided (forward, backward) slopes."""
    flat = param.data.reshape(-1)
    out = np.zeros(len(entries))
    fwd = np.zeros(len(entries))
    bwd = np.zeros(len(entries))
    mid = loss_fn().item()
    for j, i in enumerate(entries):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn().item()
        flat[i] = orig - eps
        lo = loss_fn().item()
        flat[i] = orig
        out[j] = (hi - lo) / (2.0 * eps)
        fwd[j] = (hi - mid) / eps
        bwd[j] = (mid - lo) / eps
    return out, fwd, bwd


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float = 1e-5, floor: float = 1e-8,
               max_entries: int | None = None,
               rng: np.random.Generator | None = None,
               kink_aware: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn must rebuild the graph on every call (stochastic parts frozen).
    Near-zero gradient pairs are compared absolutely against the floor.
    max_entries caps the number of numerically probed entries per parameter
    (chosen by rng), which keeps large models tractable.

    kink_aware handles objectives that are only piecewise smooth (relu /
    maxpool kinks): instead of the central difference, each entry is scored
    by its distance to the interval spanned by the forward and backward
    one-sided slopes, widened by the interval's own width to absorb the
    O(eps * curvature) offset of each one-sided estimate. At a smooth point
    the interval is eps-narrow, so a wrong gradient is still caught; at a
    kink inside the stencil the analytic value is a one-sided derivative
    and lies within the (there much wider) bracket.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    worst = 0.0
    for name, p in params.items():
        ana = analytic[name].reshape(-1)
        if max_entries is not None and p.data.size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            entries = rng.choice(p.data.size, size=max_entries, replace=False)
        else:
            entries = np.arange(p.data.size)
        num, fwd, bwd = _numeric_grad_entries(loss_fn, p, entries, eps)
        sub = ana[entries]
        denom = np.maximum(np.maximum(np.abs(sub), np.abs(num)), floor)
        if kink_aware:
            lo_b = np.minimum(fwd, bwd)
            hi_b = np.maximum(fwd, bwd)
            width = hi_b - lo_b
            dist = np.maximum(lo_b - width - sub, sub - (hi_b + width))
            err = float(np.max(np.maximum(dist, 0.0) / denom))
        else:
            err = float(np.max(np.abs(sub - num) / denom))
        worst = max(worst, err)
    return worst
