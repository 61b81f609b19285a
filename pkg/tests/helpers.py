"""Shared numeric test utilities: central finite differences and error norms."""

from __future__ import annotations

from typing import Callable

import numpy as np

from tmlab import autodiff as ad


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Relative error with an absolute floor of 1 in the denominator."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_gradient(
    f: Callable[[], ad.Tensor],
    param: ad.Tensor,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central finite differences of a scalar-valued closure wrt `param`.

    Returns (flat coordinate indices, numeric gradient at those coords).
    When max_coords is set, a seeded random subset of coordinates is
    probed (large embedding tables would otherwise dominate runtime).
    """
    flat = param.data.reshape(-1)
    n = flat.size
    if max_coords is not None and n > max_coords:
        assert rng is not None
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)
    grads = np.zeros(len(coords), dtype=np.float64)
    for out_i, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        with ad.no_grad():
            up = float(f().data)
        flat[i] = orig - h
        with ad.no_grad():
            down = float(f().data)
        flat[i] = orig
        grads[out_i] = (up - down) / (2.0 * h)
    return coords, grads


def check_gradients(
    f: Callable[[], ad.Tensor],
    params: dict[str, ad.Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Analytic-vs-numeric gradient comparison; returns the worst relative error."""
    loss = f()
    ad.zero_grads(params.values())
    ad.backward(loss, params=params.values())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        coords, num = numeric_gradient(f, p, h=h, max_coords=max_coords, rng=rng)
        ana = p.grad.reshape(-1)[coords]
        err = max_rel_err(ana, num)
        worst = max(worst, err)
    return worst
