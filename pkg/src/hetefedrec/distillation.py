"""Relation-based ensemble self-distillation across the tier tables.

Each round the server samples a few items, measures their pairwise cosine
similarities in every table, averages those matrices into a shared target,
and nudges each table's similarities toward it.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np

from hetefedrec.model import TieredParams

log = logging.getLogger(__name__)

COS_EPS = 1e-12


def select_kd_items(num_items: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if k > num_items:
        warnings.warn(f"distillation subset size {k} exceeds {num_items} items; using all items", stacklevel=2)
        k = num_items
    if k < 2:
        raise ValueError(f"distillation needs at least 2 items, got {k}")
    return rng.choice(num_items, size=k, replace=False)


def pairwise_cosine(V: np.ndarray, subset) -> np.ndarray:
    X = V[np.asarray(subset)]
    norms = np.linalg.norm(X, axis=1)
    return (X @ X.T) / (np.outer(norms, norms) + COS_EPS)


def ensemble_distance(*matrices: np.ndarray) -> np.ndarray:
    """Elementwise mean of the per-tier similarity matrices."""
    shape = matrices[0].shape
    if any(m.shape != shape for m in matrices):
        raise ValueError(f"similarity matrices differ in shape: {[m.shape for m in matrices]}")
    return sum(matrices) / len(matrices)


def kd_loss(V: np.ndarray, subset, d_ens: np.ndarray) -> float:
    """Squared Frobenius distance between the table's similarities and the target."""
    return float(np.sum((pairwise_cosine(V, subset) - d_ens) ** 2))


def kd_loss_grad(V: np.ndarray, subset, d_ens: np.ndarray):
    """Loss and gradient w.r.t. the ``len(subset)`` selected rows (target held fixed)."""
    X = V[np.asarray(subset)]
    norms = np.linalg.norm(X, axis=1)
    dots = X @ X.T
    denom = np.outer(norms, norms) + COS_EPS
    diff = dots / denom - d_ens
    loss = float(np.sum(diff**2))
    R = 2.0 * diff
    A = R / denom
    grad = (A + A.T) @ X
    B = -R * dots / denom**2
    dnorm = (B + B.T) @ norms
    safe = np.where(norms > 0, norms, 1.0)
    grad += (dnorm / safe)[:, None] * X * (norms > 0)[:, None]
    return loss, grad


def distill_step(
    params: TieredParams,
    k: int,
    steps: int,
    kd_lr: float,
    rng: np.random.Generator,
    trace: list | None = None,
) -> TieredParams:
    """Pull every table's subset similarities toward their cross-tier mean.

    The target is computed once from the incoming tables.  If ``trace`` is
    given, the summed loss before each step (and after the last) is appended.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    out = params.copy()
    if steps == 0:
        return out
    subset = select_kd_items(params.num_items, k, rng)
    d_ens = ensemble_distance(*(pairwise_cosine(t, subset) for t in params.tables))
    for step in range(steps):
        total = 0.0
        for table in out.tables:
            loss, grad = kd_loss_grad(table, subset, d_ens)
            table[subset] -= kd_lr * grad
            total += loss
        if trace is not None:
            trace.append(total)
    if trace is not None:
        trace.append(sum(kd_loss(t, subset, d_ens) for t in out.tables))
    return out
