"""Full-catalogue top-K evaluation and embedding diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from hetefedrec.dataset import InteractionDataset, GroupAssignment
from hetefedrec.model import ScorerParams, TieredParams, Tier, score_users
from hetefedrec.training import decorrelation_reg, singular_variance

GROUP_NAMES = tuple(t.label for t in Tier)
_CHUNK = 256


def recall_at_k(ranked: Sequence[int], test_items, k: int = 20) -> float:
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("recall needs at least one test item")
    hits = sum(1 for i in list(ranked)[:k] if int(i) in test)
    return hits / len(test)


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_at_k(ranked: Sequence[int], test_items, k: int = 20) -> float:
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("NDCG needs at least one test item")
    top = list(ranked)[:k]
    gains = np.array([1.0 if int(i) in test else 0.0 for i in top])
    dcg = float(np.sum(gains * _discounts(len(top)))) if top else 0.0
    idcg = float(np.sum(_discounts(min(len(test), k))))
    return dcg / idcg


def order_scores(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep ascending index order."""
    return np.argsort(-np.asarray(scores), kind="stable")


def _user_vectors(users: np.ndarray, U: np.ndarray, V: np.ndarray, ds: InteractionDataset, base_model: str):
    if base_model != "lightgcn":
        return U
    out = U.copy()
    for r, user in enumerate(users):
        local = ds.train[user]
        if local.size:
            out[r] = 0.5 * (U[r] + V[local].sum(axis=0) / np.sqrt(local.size))
    return out


def rank_items(u: np.ndarray, V: np.ndarray, theta: ScorerParams, train_items, base_model: str = "ncf") -> np.ndarray:
    """Every item outside ``train_items`` ordered by the model's score."""
    train_items = np.asarray(train_items, dtype=np.int64)
    user = u
    if base_model == "lightgcn" and train_items.size:
        user = 0.5 * (u + V[train_items].sum(axis=0) / np.sqrt(train_items.size))
    scores = score_users(np.asarray(user)[None, :], V, theta)[0]
    order = order_scores(scores)
    return order[~np.isin(order, train_items)]


def _topk(scores: np.ndarray, users: np.ndarray, ds: InteractionDataset, k: int) -> list[np.ndarray]:
    out = []
    for row, user in zip(scores, users):
        row = row.copy()
        row[ds.train[user]] = -np.inf
        out.append(order_scores(row)[:k])
    return out


@dataclass
class MetricsReport:
    epoch: int
    strategy: str
    k: int
    recall: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    users: dict = field(default_factory=dict)
    singular_variance: tuple = ()
    decorrelation: tuple = ()
    skipped: int = 0
    seconds: float = 0.0

    def rows(self) -> list[tuple]:
        """``(epoch, strategy, group, metric, value)`` records; wall-clock time is left out."""
        out = []
        for group in self.recall:
            out.append((self.epoch, self.strategy, group, f"recall@{self.k}", self.recall[group]))
            out.append((self.epoch, self.strategy, group, f"ndcg@{self.k}", self.ndcg[group]))
        for t, value in enumerate(self.singular_variance):
            out.append((self.epoch, self.strategy, "diagnostic", f"singular_variance_V{t}", value))
        for t, value in enumerate(self.decorrelation):
            out.append((self.epoch, self.strategy, "diagnostic", f"decorrelation_V{t}", value))
        return out

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "strategy": self.strategy,
            "k": self.k,
            "recall": dict(self.recall),
            "ndcg": dict(self.ndcg),
            "users": dict(self.users),
            "singular_variance": list(self.singular_variance),
            "decorrelation": list(self.decorrelation),
            "skipped": self.skipped,
            "seconds": self.seconds,
        }


def per_user_metrics(
    params: TieredParams,
    slots: np.ndarray,
    user_emb: Mapping[int, np.ndarray],
    ds: InteractionDataset,
    k: int = 20,
    base_model: str = "ncf",
    local_models: Mapping[int, tuple[np.ndarray, ScorerParams]] | None = None,
) -> dict[int, tuple[float, float]]:
    """``{user: (recall, ndcg)}`` for every user with held-out items.

    A user is scored with table/scorer ``slots[user]`` unless ``local_models``
    provides a private model for them.
    """
    local_models = local_models or {}
    users = ds.users_with_test()
    out: dict[int, tuple[float, float]] = {}

    def record(batch_users, top):
        for user, ranked in zip(batch_users, top):
            test = ds.test[user]
            out[int(user)] = (recall_at_k(ranked, test, k), ndcg_at_k(ranked, test, k))

    for user in users:
        if int(user) in local_models:
            V, theta = local_models[int(user)]
            u = user_emb[int(user)][None, :]
            scores = score_users(_user_vectors(np.array([user]), u, V, ds, base_model), V, theta)
            record([user], _topk(scores, [user], ds, k))
    shared = np.array([u for u in users if int(u) not in local_models], dtype=np.int64)
    for slot in range(len(params.tables)):
        mine = shared[slots[shared] == slot] if shared.size else shared
        V, theta = params.tables[slot], params.thetas[slot]
        for start in range(0, mine.size, _CHUNK):
            batch = mine[start : start + _CHUNK]
            U = np.stack([user_emb[int(u)] for u in batch])
            scores = score_users(_user_vectors(batch, U, V, ds, base_model), V, theta)
            record(batch, _topk(scores, batch, ds, k))
    return out


def evaluate_all(
    params: TieredParams,
    slots: np.ndarray,
    user_emb: Mapping[int, np.ndarray],
    ds: InteractionDataset,
    groups: GroupAssignment,
    strategy: str,
    epoch: int = 0,
    k: int = 20,
    base_model: str = "ncf",
    local_models=None,
) -> MetricsReport:
    """Macro-averaged Recall@K / NDCG@K overall and per client group."""
    scores = per_user_metrics(params, slots, user_emb, ds, k, base_model, local_models)
    report = MetricsReport(epoch=epoch, strategy=strategy, k=k)
    report.skipped = ds.num_users - len(scores)
    evaluated = np.array(sorted(scores), dtype=np.int64)
    buckets = [("overall", evaluated)]
    buckets += [(GROUP_NAMES[t], evaluated[groups.tiers[evaluated] == t]) for t in range(len(GROUP_NAMES))]
    for name, members in buckets:
        if members.size == 0:
            continue
        report.recall[name] = float(np.mean([scores[int(u)][0] for u in members]))
        report.ndcg[name] = float(np.mean([scores[int(u)][1] for u in members]))
        report.users[name] = int(members.size)
    report.singular_variance = tuple(singular_variance(t) for t in params.tables)
    report.decorrelation = tuple(decorrelation_reg(t) for t in params.tables)
    return report
