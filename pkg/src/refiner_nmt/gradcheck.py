"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float, coords=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x`` (mutated in place, then restored)."""
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for k in range(flat.size) if coords is None else coords:
        orig = flat[k]
        flat[k] = orig + eps
        fp = f()
        flat[k] = orig - eps
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * eps)
    return out


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    epsilon: float = 1e-4,
) -> float:
    """Max relative error between backprop and central differences for a scalar ``fn``.

    ``fn`` must be deterministic; reseed any RNG it uses inside ``fn``.
    """
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=float), requires_grad=True)
    with Graph() as g:
        loss = fn(x)
    g.backward(loss, params=[x])

    def f():
        return float(fn(Tensor(x.data)).data)

    numeric = numeric_grad(f, x.data, epsilon)
    return float(relative_error(x.grad, numeric).max())


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    epsilon: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Per-parameter max relative error for a closure over model parameters.

    With ``max_coords`` set, each tensor is probed on a random subset of that
    many coordinates; analytic gradients are always computed in full.
    """
    for p in params.values():
        p.grad = None
    with Graph() as g:
        loss = loss_fn()
    g.backward(loss, params=list(params.values()))
    analytic = {name: p.grad.copy() for name, p in params.items()}

    def f():
        return float(loss_fn().data)

    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        n = p.data.size
        coords = None
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        numeric = numeric_grad(f, p.data, epsilon, coords)
        a = analytic[name].reshape(-1)
        num = numeric.reshape(-1)
        if coords is not None:
            a, num = a[coords], num[coords]
        errors[name] = float(relative_error(a, num).max()) if a.size else 0.0
    return errors
