"""Tensor-product Gauss-Hermite rules for Gaussian expectations."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .errors import ConfigError


@lru_cache(maxsize=None)
def _rule_1d(order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = hermegauss(order)
    return nodes, weights / np.sqrt(2.0 * np.pi)


def standard_rule(orders: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Nodes (n, D) and weights (n,) integrating against N(0, I_D).

    ``orders[k]`` is the number of points along axis ``k``.
    """
    if any(o < 1 for o in orders):
        raise ConfigError("quadrature order must be at least 1", field="quadrature_order")
    rules = [_rule_1d(int(o)) for o in orders]
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
    weights = np.prod(np.stack([w.reshape(-1) for w in wgrids], axis=1), axis=1)
    return nodes, weights


def safe_cholesky(cov: np.ndarray) -> np.ndarray:
    """Batched Cholesky with a small relative jitter on failure."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        d = cov.shape[-1]
        scale = np.trace(cov, axis1=-2, axis2=-1)[..., None, None] / d
        return np.linalg.cholesky(cov + 1e-10 * np.abs(scale) * np.eye(d))


def gaussian_nodes(
    mean: np.ndarray, cov: np.ndarray, orders: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadrature points for a batch of Gaussians.

    Returns ``x`` with shape (B, n, D), the standard nodes ``xi`` (n, D) and
    weights (n,). The lower Cholesky factor is used, so the first axes of
    ``x`` depend only on the first axes of ``xi``.
    """
    x, xi, w, _ = factored_nodes(mean, cov, orders)
    return x, xi, w


def factored_nodes(mean, cov, orders):
    """As :func:`gaussian_nodes`, also returning the Cholesky factors (B, D, D)."""
    xi, w = standard_rule(tuple(orders))
    L = safe_cholesky(cov)
    x = mean[:, None, :] + xi @ np.swapaxes(L, -1, -2)
    return x, xi, w, L


def expect(fn, mean: np.ndarray, cov: np.ndarray, order: int) -> np.ndarray:
    """``E[fn(x)]`` for each Gaussian in the batch, ``fn`` acting on (B, n, D)."""
    D = mean.shape[-1]
    x, _, w = gaussian_nodes(mean, cov, (order,) * D)
    vals = fn(x)
    return np.einsum("n,bn...->b...", w, vals)
