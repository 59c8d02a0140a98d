"""Scoring models over tiered item-embedding tables.

The scorer is a 3-layer feedforward net on the concatenated ``[user, item]``
pair, ``2N -> 8 -> 8 -> 1`` with ReLU between layers and a sigmoid output.
Forward passes return caches so the training code can backpropagate by hand.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

PROB_EPS = 1e-7
HIDDEN = 8
EMBED_STD = 0.01
CHECKPOINT_VERSION = 1


class Tier(enum.IntEnum):
    SMALL = 0
    MEDIUM = 1
    LARGE = 2

    @property
    def label(self) -> str:
        return self.name.lower()


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class ScorerParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def init(cls, width: int, rng: np.random.Generator) -> "ScorerParams":
        return cls(
            _glorot(rng, 2 * width, HIDDEN), np.zeros(HIDDEN),
            _glorot(rng, HIDDEN, HIDDEN), np.zeros(HIDDEN),
            _glorot(rng, HIDDEN, 1), np.zeros(1),
        )

    @classmethod
    def zeros(cls, width: int) -> "ScorerParams":
        return cls(
            np.zeros((2 * width, HIDDEN)), np.zeros(HIDDEN),
            np.zeros((HIDDEN, HIDDEN)), np.zeros(HIDDEN),
            np.zeros((HIDDEN, 1)), np.zeros(1),
        )

    @property
    def width(self) -> int:
        """Embedding width this scorer consumes (half its input width)."""
        return self.w1.shape[0] // 2

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ScorerParams":
        return ScorerParams(**{k: v.copy() for k, v in self.arrays().items()})

    def map(self, fn, *others: "ScorerParams") -> "ScorerParams":
        return ScorerParams(**{k: fn(v, *(o.arrays()[k] for o in others)) for k, v in self.arrays().items()})

    def __sub__(self, other: "ScorerParams") -> "ScorerParams":
        return self.map(np.subtract, other)

    def __add__(self, other: "ScorerParams") -> "ScorerParams":
        return self.map(np.add, other)

    def allclose(self, other: "ScorerParams", atol: float = 0.0) -> bool:
        return all(np.allclose(a, b, rtol=0, atol=atol) for a, b in zip(self.arrays().values(), other.arrays().values()))

    def equal(self, other: "ScorerParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    # forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray):
        """Logits for a ``(B, 2N)`` input batch, plus the backward cache."""
        z1 = x @ self.w1 + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ self.w2 + self.b2
        h2 = np.maximum(z2, 0.0)
        z3 = (h2 @ self.w3)[:, 0] + self.b3[0]
        return z3, (x, z1, h1, z2, h2)

    def backward(self, cache, dz3: np.ndarray):
        """Gradients w.r.t. the input batch and every parameter."""
        x, z1, h1, z2, h2 = cache
        dz3 = dz3[:, None]
        gw3 = h2.T @ dz3
        gb3 = dz3.sum(axis=0)
        dz2 = (dz3 @ self.w3.T) * (z2 > 0)
        gw2 = h1.T @ dz2
        gb2 = dz2.sum(axis=0)
        dz1 = (dz2 @ self.w2.T) * (z1 > 0)
        gw1 = x.T @ dz1
        gb1 = dz1.sum(axis=0)
        dx = dz1 @ self.w1.T
        return dx, ScorerParams(gw1, gb1, gw2, gb2, gw3, gb3)


def _check_width(u: np.ndarray, v: np.ndarray, theta: ScorerParams) -> None:
    if u.shape[-1] != v.shape[-1] or u.shape[-1] != theta.width:
        raise ValueError(
            f"dimension mismatch: user {u.shape[-1]}, item {v.shape[-1]}, scorer expects {theta.width}"
        )


def clamp_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def ncf_predict(u: np.ndarray, v: np.ndarray, theta: ScorerParams) -> float:
    """Preference probability for one (user, item) pair."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_width(u, v, theta)
    z, _ = theta.forward(np.concatenate([u, v])[None, :])
    return float(clamp_prob(sigmoid(z))[0])


def score_pairs(u: np.ndarray, rows: np.ndarray, theta: ScorerParams) -> np.ndarray:
    """Probabilities for one user against a ``(B, N)`` block of item rows."""
    _check_width(u, rows, theta)
    x = np.concatenate([np.broadcast_to(u, rows.shape), rows], axis=1)
    z, _ = theta.forward(x)
    return clamp_prob(sigmoid(z))


def score_users(users: np.ndarray, V: np.ndarray, theta: ScorerParams) -> np.ndarray:
    """``(U, I)`` probability matrix for many users against a whole table.

    The first layer is split into user and item halves so the ``(U*I, 2N)``
    concatenation is never materialised.
    """
    _check_width(users, V, theta)
    n = theta.width
    zu = users @ theta.w1[:n] + theta.b1
    zv = V @ theta.w1[n:]
    h1 = np.maximum(zu[:, None, :] + zv[None, :, :], 0.0)
    h2 = np.maximum(h1 @ theta.w2 + theta.b2, 0.0)
    z3 = (h2 @ theta.w3)[..., 0] + theta.b3[0]
    return clamp_prob(sigmoid(z3))


def lightgcn_propagate(u: np.ndarray, V: np.ndarray, local_items: Sequence[int]):
    """One propagation layer on the star graph of a user and its local items.

    Edge weights are ``1/sqrt(deg_u * deg_v)`` with ``deg_u = len(local_items)``
    and ``deg_v = 1``; only local degrees are visible on the device.  Outputs
    are the mean of the layer-0 and layer-1 embeddings.  Returns the propagated
    user vector and the propagated rows of ``local_items`` (in that order).
    """
    local_items = np.asarray(local_items, dtype=np.int64)
    if local_items.size == 0:
        raise ValueError("LightGCN propagation needs at least one local item")
    rows = V[local_items]
    norm = 1.0 / np.sqrt(local_items.size)
    u_prop = 0.5 * (u + norm * rows.sum(axis=0))
    rows_prop = 0.5 * (rows + norm * u)
    return u_prop, rows_prop


def truncate(x: np.ndarray, n: int) -> np.ndarray:
    """Leading ``n`` embedding dimensions as a view of ``x``."""
    if n > x.shape[-1] or n < 0:
        raise ValueError(f"cannot truncate width {x.shape[-1]} to {n}")
    return x[..., :n]


def init_embedding(rng: np.random.Generator, rows: int, width: int) -> np.ndarray:
    return rng.normal(0.0, EMBED_STD, size=(rows, width))


# --------------------------------------------------------------------------
# public parameters


@dataclass
class TieredParams:
    """Public parameters: one item table and one scorer per model tier.

    Homogeneous strategies use a single-tier instance.
    """

    tables: list[np.ndarray]
    thetas: list[ScorerParams]

    def __post_init__(self):
        if len(self.tables) != len(self.thetas) or not self.tables:
            raise ValueError("need one scorer per table")
        widths = self.widths
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ValueError("tier widths must be strictly increasing")
        if len({t.shape[0] for t in self.tables}) != 1:
            raise ValueError("all tables must share the item count")
        for t, th in zip(self.tables, self.thetas):
            if th.width != t.shape[1]:
                raise ValueError("scorer width does not match its table")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(t.shape[1] for t in self.tables)

    @property
    def num_items(self) -> int:
        return self.tables[0].shape[0]

    def copy(self) -> "TieredParams":
        return TieredParams([t.copy() for t in self.tables], [th.copy() for th in self.thetas])

    def equal(self, other: "TieredParams") -> bool:
        return (
            self.widths == other.widths
            and all(np.array_equal(a, b) for a, b in zip(self.tables, other.tables))
            and all(a.equal(b) for a, b in zip(self.thetas, other.thetas))
        )

    def prefix_gap(self) -> float:
        """Largest deviation of any narrower table from the widest table's prefix."""
        wide = self.tables[-1]
        gaps = [np.max(np.abs(t - wide[:, : t.shape[1]]), initial=0.0) for t in self.tables[:-1]]
        return float(max(gaps, default=0.0))


def init_params(num_items: int, widths: Iterable[int], rng: np.random.Generator, aligned: bool = True) -> TieredParams:
    """Draw tier tables and scorers.

    With ``aligned`` every table's columns ``[w_{k-1}, w_k)`` hold the same
    values, so each narrower table equals the prefix of every wider one.
    """
    widths = tuple(int(w) for w in widths)
    if any(b <= a for a, b in zip(widths, widths[1:])):
        raise ValueError("tier widths must be strictly increasing")
    if aligned:
        full = init_embedding(rng, num_items, widths[-1])
        tables = [full[:, :w].copy() for w in widths]
    else:
        tables = [init_embedding(rng, num_items, w) for w in widths]
    thetas = [ScorerParams.init(w, rng) for w in widths]
    return TieredParams(tables, thetas)


def save_checkpoint(path, params: TieredParams, tiers: Sequence[int] | None = None) -> None:
    """Write ``params`` to an ``.npz`` with a JSON header array."""
    tiers = list(range(len(params.tables))) if tiers is None else [int(t) for t in tiers]
    header = {
        "version": CHECKPOINT_VERSION,
        "rows": params.num_items,
        "dims": list(params.widths),
        "tiers": tiers,
    }
    arrays = {"header": np.array(json.dumps(header))}
    for k, (table, theta) in enumerate(zip(params.tables, params.thetas)):
        arrays[f"V{k}"] = table
        for name, a in theta.arrays().items():
            arrays[f"theta{k}_{name}"] = a
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[TieredParams, list[int]]:
    with np.load(path) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        tables, thetas = [], []
        for k in range(len(header["dims"])):
            tables.append(data[f"V{k}"].copy())
            thetas.append(ScorerParams(**{f.name: data[f"theta{k}_{f.name}"].copy() for f in fields(ScorerParams)}))
    params = TieredParams(tables, thetas)
    if params.num_items != header["rows"] or list(params.widths) != header["dims"]:
        raise ValueError("checkpoint header does not match its arrays")
    return params, header["tiers"]
