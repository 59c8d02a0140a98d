"""Client-side objectives, Adam, and the local training loop.

Local parameters live in a flat ``dict[str, ndarray]``:

* ``"u"``: the private user embedding,
* ``"V"``: the client's copy of its tier's item table,
* ``"t{k}.{w1,b1,...}"``: scorer ``k`` for every tier ``k <= tier``.

Objectives return ``(loss, grads)`` with ``grads`` keyed the same way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from hetefedrec.dataset import holdout, negative_batch
from hetefedrec.model import PROB_EPS, ScorerParams, clamp_prob, sigmoid

log = logging.getLogger(__name__)

REG_EPS = 1e-8


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf during local training."""


# --------------------------------------------------------------------------
# losses


def bce_loss(preds, labels) -> float:
    """Summed binary cross-entropy."""
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if preds.size == 0:
        raise ValueError("empty batch")
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in shape")
    return float(-np.sum(labels * np.log(preds) + (1.0 - labels) * np.log1p(-preds)))


def _standardize(V: np.ndarray):
    centered = V - V.mean(axis=0)
    var = np.mean(centered**2, axis=0)
    inv_std = 1.0 / np.sqrt(var + REG_EPS)
    return centered, var, inv_std


def decorrelation_reg(V: np.ndarray) -> float:
    """Frobenius norm of the column correlation matrix, divided by the width."""
    return decorrelation_reg_grad(V, need_grad=False)[0]


def decorrelation_reg_grad(V: np.ndarray, need_grad: bool = True):
    V = np.asarray(V, dtype=float)
    n, width = V.shape
    if n < 2:
        raise ValueError("decorrelation needs at least two rows")
    centered, var, inv_std = _standardize(V)
    Z = centered * inv_std
    corr = Z.T @ Z / n
    norm = np.sqrt(np.sum(corr**2))
    value = norm / width
    if not need_grad:
        return value, None
    if norm == 0.0:
        return value, np.zeros_like(V)
    dcorr = corr / (width * norm)
    dZ = 2.0 * Z @ dcorr / n
    # through Z = C * (var + eps)^-1/2 with var = mean(C^2)
    dinv = np.sum(dZ * centered, axis=0)
    dvar = -0.5 * dinv * inv_std**3
    dC = dZ * inv_std + dvar * 2.0 * centered / n
    return value, dC - dC.mean(axis=0)


def singular_variance(V: np.ndarray) -> float:
    """Variance of the eigenvalues of the column covariance (population normalisation)."""
    V = np.asarray(V, dtype=float)
    if V.shape[0] < 2:
        raise ValueError("covariance needs at least two rows")
    centered = V - V.mean(axis=0)
    cov = centered.T @ centered / V.shape[0]
    eig = np.linalg.eigvalsh(cov)
    return float(np.var(eig))


# --------------------------------------------------------------------------
# recommendation objective


def theta_keys(k: int) -> list[str]:
    return [f"t{k}.{name}" for name in ("w1", "b1", "w2", "b2", "w3", "b3")]


def pack_thetas(params: dict, thetas: Sequence[ScorerParams]) -> dict:
    for k, theta in enumerate(thetas):
        for key, a in zip(theta_keys(k), theta.arrays().values()):
            params[key] = a
    return params


def unpack_theta(params: Mapping[str, np.ndarray], k: int) -> ScorerParams:
    return ScorerParams(*(params[key] for key in theta_keys(k)))


def _task_term(u, V, theta: ScorerParams, items, labels, local_items, grads, k, need_grad):
    """One recommendation-loss term on the leading ``theta.width`` dimensions."""
    n = theta.width
    un = u[:n]
    if local_items is not None:
        norm = 1.0 / np.sqrt(local_items.size)
        user = 0.5 * (un + norm * V[local_items, :n].sum(axis=0))
    else:
        user = un
    rows = V[items, :n]
    x = np.concatenate([np.broadcast_to(user, rows.shape), rows], axis=1)
    z, cache = theta.forward(x)
    raw = sigmoid(z)
    p = clamp_prob(raw)
    loss = bce_loss(p, labels)
    if not need_grad:
        return loss
    # d(bce)/dz is p - r, zero where the clamp is active
    dz = np.where((raw > PROB_EPS) & (raw < 1.0 - PROB_EPS), p - labels, 0.0)
    dx, gtheta = theta.backward(cache, dz)
    duser = dx[:, :n].sum(axis=0)
    gV = grads["V"][:, :n]
    np.add.at(gV, items, dx[:, n:])
    if local_items is not None:
        grads["u"][:n] += 0.5 * duser
        gV[local_items] += 0.5 * norm * duser
    else:
        grads["u"][:n] += duser
    for key, g in zip(theta_keys(k), gtheta.arrays().values()):
        grads[key] += g
    return loss


def objective(
    params: Mapping[str, np.ndarray],
    tier: int,
    items: np.ndarray,
    labels: np.ndarray,
    alpha: float = 0.0,
    udl: bool = True,
    local_items: np.ndarray | None = None,
    need_grad: bool = True,
):
    """Client loss and gradients.

    With ``udl`` the loss sums one recommendation term per tier ``k <= tier``,
    each using scorer ``k`` on the leading ``width_k`` dimensions of the user
    embedding and item table; otherwise only the client's own tier term is
    used.  Tiers above Small add ``alpha`` times the decorrelation penalty of
    the table rows the batch touches, so the gradient stays row-sparse.
    """
    for k in range(tier + 1):
        if theta_keys(k)[0] not in params:
            raise ValueError(f"tier {tier} client is missing scorer {k}")
    items = np.asarray(items, dtype=np.int64)
    labels = np.asarray(labels, dtype=float)
    grads = {key: np.zeros_like(a) for key, a in params.items()} if need_grad else None
    u, V = params["u"], params["V"]
    loss = 0.0
    for k in range(tier + 1) if udl else (tier,):
        theta = unpack_theta(params, k)
        if k == tier and theta.width != V.shape[1]:
            raise ValueError(f"scorer {k} width {theta.width} does not match table width {V.shape[1]}")
        loss += _task_term(u, V, theta, items, labels, local_items, grads, k, need_grad)
    rows = np.unique(items)
    if tier > 0 and alpha > 0 and rows.size >= 2:
        reg, greg = decorrelation_reg_grad(V[rows], need_grad)
        loss += alpha * reg
        if need_grad:
            grads["V"][rows] += alpha * greg
    return loss, grads


@dataclass
class ClientState:
    user: int
    tier: int
    u: np.ndarray
    rng_seed: int = 0


def _local_params(client: ClientState, V: np.ndarray, thetas: Sequence[ScorerParams]) -> dict:
    if len(thetas) <= client.tier:
        raise ValueError(f"tier {client.tier} client needs scorers 0..{client.tier}, got {len(thetas)}")
    if client.u.shape[0] != V.shape[1]:
        raise ValueError(f"user width {client.u.shape[0]} does not match table width {V.shape[1]}")
    return pack_thetas({"u": client.u, "V": V}, thetas[: client.tier + 1])


def dual_task_loss(client: ClientState, V_tier, thetas, batch, udl: bool = True, local_items=None) -> float:
    items, labels = batch
    return objective(_local_params(client, V_tier, thetas), client.tier, items, labels,
                     udl=udl, local_items=local_items, need_grad=False)[0]


def client_loss(client: ClientState, V_tier, thetas, batch, alpha: float, udl: bool = True, local_items=None) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    items, labels = batch
    return objective(_local_params(client, V_tier, thetas), client.tier, items, labels,
                     alpha=alpha, udl=udl, local_items=local_items, need_grad=False)[0]


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam update of ``params`` in place."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {key!r} at step {state.step + 1}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for key, g in grads.items():
        if key not in state.m:
            state.m[key] = np.zeros_like(params[key])
            state.v[key] = np.zeros_like(params[key])
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[key] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# --------------------------------------------------------------------------
# local training


@dataclass(frozen=True)
class UpdatePacket:
    """What a client uploads: parameter deltas (received minus trained).

    ``delta_thetas`` maps tier index to the scorer delta.  There is no field
    for the user embedding, which never leaves the device.
    """

    client_id: int
    tier: int
    delta_V: np.ndarray
    delta_thetas: dict
    losses: tuple = ()
    val_loss: float | None = None

    @property
    def width(self) -> int:
        return self.delta_V.shape[1]


def local_train(
    client: ClientState,
    V: np.ndarray,
    thetas: Sequence[ScorerParams],
    positives: np.ndarray,
    num_items: int,
    rng: np.random.Generator,
    *,
    local_epochs: int = 2,
    lr: float = 1e-3,
    alpha: float = 1.0,
    udl: bool = True,
    neg_ratio: int = 4,
    batch_size: int = 0,
    base_model: str = "ncf",
    validation_frac: float = 0.0,
) -> UpdatePacket | None:
    """Train on the client's own data and return its upload.

    Runs ``local_epochs`` passes with a fresh Adam state, resampling negatives
    every pass.  The private embedding ``client.u`` is updated in place.
    ``batch_size=0`` means one full-batch step per pass.  Returns ``None`` for
    clients without training positives.
    """
    positives = np.asarray(positives, dtype=np.int64)
    if positives.size == 0:
        log.debug("client %d has no training data; skipped", client.user)
        return None
    fit, val = holdout(positives, validation_frac, rng)
    local_items = fit if base_model == "lightgcn" else None

    params = _local_params(client, V.copy(), [t.copy() for t in thetas])
    params["u"] = client.u.copy()
    received = {key: a.copy() for key, a in params.items() if key != "u"}
    state = AdamState()
    losses = []
    for _ in range(local_epochs):
        items, labels = negative_batch(fit, num_items, neg_ratio, rng)
        order = rng.permutation(items.size) if batch_size else np.arange(items.size)
        step = batch_size or items.size
        epoch_loss = 0.0
        for start in range(0, items.size, step):
            idx = order[start : start + step]
            loss, grads = objective(params, client.tier, items[idx], labels[idx], alpha, udl, local_items)
            if not np.isfinite(loss):
                raise NonFiniteError(f"client {client.user}: non-finite loss {loss}")
            try:
                adam_step(params, grads, state, lr)
            except NonFiniteError as exc:
                raise NonFiniteError(f"client {client.user}: {exc}") from None
            epoch_loss += loss
        losses.append(epoch_loss)

    val_loss = None
    if val.size:
        items, labels = negative_batch(val, num_items, neg_ratio, rng)
        val_loss = objective(params, client.tier, items, labels, udl=False, local_items=local_items, need_grad=False)[0]

    client.u[...] = params["u"]
    delta_thetas = {
        k: ScorerParams(*(received[key] - params[key] for key in theta_keys(k))) for k in range(client.tier + 1)
    }
    return UpdatePacket(
        client_id=client.user,
        tier=client.tier,
        delta_V=received["V"] - params["V"],
        delta_thetas=delta_thetas,
        losses=tuple(losses),
        val_loss=val_loss,
    )
