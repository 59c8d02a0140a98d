"""The federated training loop and the strategies it can run.

A :class:`Federation` bundles what a simulation needs: the dataset and client
groups (client side), the public parameters and queue (server side), and the
per-strategy plan.  :func:`run_round` performs one select/train/aggregate/
distill cycle; :func:`run_experiment` drives whole epochs and evaluates after
each one.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hetefedrec import aggregation
from hetefedrec._rng import stream
from hetefedrec.config import ExperimentConfig, Strategy
from hetefedrec.dataset import (
    GroupAssignment,
    InteractionDataset,
    binarize_and_split,
    load_interactions,
    partition_clients,
    synth_dataset,
)
from hetefedrec.distillation import distill_step
from hetefedrec.evaluation import MetricsReport, evaluate_all
from hetefedrec.model import EMBED_STD, ScorerParams, TieredParams, init_params
from hetefedrec.training import ClientState, UpdatePacket, local_train

log = logging.getLogger(__name__)

__all__ = [
    "Strategy",
    "Plan",
    "ServerState",
    "Federation",
    "load_dataset",
    "make_plan",
    "select_clients",
    "run_round",
    "run_experiment",
]


@dataclass(frozen=True)
class Plan:
    """What a strategy does, resolved from the config."""

    widths: tuple[int, ...]
    heterogeneous: bool
    udl: bool
    alpha: float
    distill: bool
    aggregator: str  # "padded" | "clustered" | "homogeneous" | "none"
    exclude_groups: tuple[int, ...] = ()


def make_plan(config: ExperimentConfig) -> Plan:
    s = config.strategy
    w = config.widths
    if s is Strategy.HETEFEDREC:
        return Plan(w, True, config.udl, config.alpha, config.kd_enabled, "padded")
    if s is Strategy.DIRECT_AGGREGATE:
        return Plan(w, True, False, 0.0, False, "padded")
    if s is Strategy.CLUSTERED:
        return Plan(w, True, False, 0.0, False, "clustered")
    if s is Strategy.STANDALONE:
        return Plan(w, True, False, 0.0, False, "none")
    if s is Strategy.ALL_SMALL:
        return Plan((w[0],), False, False, 0.0, False, "homogeneous")
    if s is Strategy.ALL_LARGE:
        return Plan((w[-1],), False, False, 0.0, False, "homogeneous")
    if s is Strategy.ALL_LARGE_EXCLUSIVE:
        excluded = (0,) if config.exclusive_groups == "medium+large" else (0, 1)
        return Plan((w[-1],), False, False, 0.0, False, "homogeneous", excluded)
    raise ValueError(f"unknown strategy {s!r}")


@dataclass
class ServerState:
    params: TieredParams
    queue: np.ndarray
    position: int = 0
    round: int = 0
    epoch: int = 0
    log: list = field(default_factory=list)


def select_clients(state: ServerState, round_size: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Next ``round_size`` ids from the queue.

    When the queue is exhausted it is reshuffled with ``rng`` and the epoch
    counter advances.  The last round of an epoch may be short.
    """
    if round_size < 1:
        raise ValueError("round_size must be >= 1")
    if state.position >= state.queue.size:
        if rng is None:
            raise ValueError("queue exhausted and no generator given to reshuffle it")
        state.queue = rng.permutation(state.queue.size)
        state.position = 0
        state.epoch += 1
    ids = state.queue[state.position : state.position + round_size]
    state.position += ids.size
    return ids


def load_dataset(config: ExperimentConfig) -> InteractionDataset:
    if config.source == "synthetic":
        return synth_dataset(
            config.synth_users,
            config.synth_items,
            config.synth_latent_dim,
            config.synth_skew,
            seed=config.seed,
            mean_count=config.synth_mean_count or None,
            train_frac=config.train_frac,
        )
    raw = load_interactions(config.path, config.format or None)
    return binarize_and_split(raw, config.train_frac, config.seed)


@dataclass
class _LocalModel:
    """Sparse record of a standalone client's deviation from the initial table."""

    rows: np.ndarray
    values: np.ndarray
    thetas: list


class Federation:
    """A simulated deployment for one config."""

    def __init__(
        self,
        config: ExperimentConfig,
        ds: InteractionDataset | None = None,
        groups: GroupAssignment | None = None,
    ):
        self.config = config
        self.plan = make_plan(config)
        self.ds = ds if ds is not None else load_dataset(config)
        self.groups = groups if groups is not None else partition_clients(self.ds, config.quantiles)
        n = self.ds.num_users
        self.slots = self.groups.tiers.copy() if self.plan.heterogeneous else np.zeros(n, dtype=np.int64)
        params = init_params(self.ds.num_items, self.plan.widths, stream(config.seed, "init"), config.aligned_init)
        self.initial = params.copy()
        self.state = ServerState(params=params, queue=np.arange(n))
        self.state.position = n  # first selection shuffles
        self.clients = []
        for user in range(n):
            slot = int(self.slots[user])
            u = stream(config.seed, "user_init", user).normal(0.0, EMBED_STD, size=self.plan.widths[slot])
            self.clients.append(ClientState(user=user, tier=slot, u=u, rng_seed=config.seed))
        self.local: dict[int, _LocalModel] = {}
        self.last_packets: list[UpdatePacket] = []
        self.kd_trace: list[float] = []

    @property
    def round_size(self) -> int:
        return min(self.config.round_size, self.ds.num_users)

    # client side ----------------------------------------------------------

    def received_model(self, user: int) -> tuple[np.ndarray, list[ScorerParams]]:
        """What ``user`` downloads: its tier table plus scorers ``0..tier``."""
        slot = int(self.slots[user])
        if self.plan.aggregator == "none":
            V, thetas = self.local_model(user)
            return V, thetas[: slot + 1]
        params = self.state.params
        return params.tables[slot], params.thetas[: slot + 1]

    def local_model(self, user: int) -> tuple[np.ndarray, list[ScorerParams]]:
        slot = int(self.slots[user])
        V = self.initial.tables[slot].copy()
        thetas = [t.copy() for t in self.initial.thetas]
        rec = self.local.get(user)
        if rec is not None:
            V[rec.rows] = rec.values
            thetas[: len(rec.thetas)] = rec.thetas
        return V, thetas

    def train_client(self, user: int) -> UpdatePacket | None:
        c = self.config
        V, thetas = self.received_model(user)
        return local_train(
            self.clients[user],
            V,
            thetas,
            self.ds.train[user],
            self.ds.num_items,
            stream(c.seed, "client", user, self.state.round),
            local_epochs=c.local_epochs,
            lr=c.lr,
            alpha=self.plan.alpha,
            udl=self.plan.udl,
            neg_ratio=c.neg_ratio,
            batch_size=c.batch_size,
            base_model=c.base_model,
            validation_frac=c.validation_frac,
        )

    def _keep_local(self, packet: UpdatePacket) -> None:
        V, thetas = self.received_model(packet.client_id)
        trained = V - packet.delta_V
        rows = np.flatnonzero(np.any(trained != self.initial.tables[packet.tier], axis=1))
        new_thetas = [thetas[k] - packet.delta_thetas[k] for k in range(packet.tier + 1)]
        self.local[packet.client_id] = _LocalModel(rows, trained[rows], new_thetas)

    # server side ----------------------------------------------------------

    def aggregate(self, packets: list[UpdatePacket]) -> TieredParams:
        plan, params, reduce = self.plan, self.state.params, self.config.aggregate
        if plan.aggregator == "padded":
            return aggregation.hetero_aggregate(packets, params, reduce)
        if plan.aggregator == "clustered":
            return aggregation.clustered_aggregate(packets, params, reduce)
        if plan.aggregator == "homogeneous":
            kept = [p for p in packets if self.groups.tiers[p.client_id] not in plan.exclude_groups]
            return aggregation.homogeneous_aggregate(kept, params, reduce)
        return params

    def evaluate(self, epoch: int) -> MetricsReport:
        start = time.perf_counter()
        local = None
        if self.plan.aggregator == "none":
            local = {}
            for user in self.ds.users_with_test():
                V, thetas = self.local_model(int(user))
                local[int(user)] = (V, thetas[int(self.slots[user])])
        report = evaluate_all(
            self.state.params,
            self.slots,
            {c.user: c.u for c in self.clients},
            self.ds,
            self.groups,
            self.config.strategy.value,
            epoch=epoch,
            k=self.config.top_k,
            base_model=self.config.base_model,
            local_models=local,
        )
        report.seconds = time.perf_counter() - start
        return report


def run_round(fed: Federation, rng: np.random.Generator | None = None) -> list[UpdatePacket]:
    """One round: select, train in parallel, aggregate, optionally distill.

    Returns the packets the server received (before any strategy filtering).
    """
    state, c = fed.state, fed.config
    ids = sorted(int(i) for i in select_clients(state, fed.round_size, rng))
    if c.workers > 1:
        with ThreadPoolExecutor(max_workers=c.workers) as pool:
            results = list(pool.map(fed.train_client, ids))
    else:
        results = [fed.train_client(user) for user in ids]
    packets = [p for p in results if p is not None]
    skipped = len(results) - len(packets)
    if skipped:
        log.info("round %d: %d clients skipped (no training data)", state.round, skipped)

    if fed.plan.aggregator == "none":
        for p in packets:
            fed._keep_local(p)
    else:
        state.params = fed.aggregate(packets)
        if fed.plan.distill and len(state.params.tables) > 1:
            k = min(c.kd_k, state.params.num_items)
            state.params = distill_step(
                state.params, k, c.kd_steps, c.kd_lr, stream(c.seed, "distill", state.round), fed.kd_trace
            )
    fed.last_packets = packets
    state.round += 1
    return packets


def run_experiment(
    config: ExperimentConfig,
    ds: InteractionDataset | None = None,
    on_epoch: Callable[[int, Federation, MetricsReport], None] | None = None,
) -> list[MetricsReport]:
    """Train for ``config.epochs`` epochs; the first report is the untrained model."""
    fed = Federation(config, ds)
    report = fed.evaluate(0)
    fed.state.log.append(report)
    if on_epoch:
        on_epoch(0, fed, report)
    for epoch in range(1, config.epochs + 1):
        rng = stream(config.seed, "select", epoch)
        run_round(fed, rng)
        while fed.state.position < fed.state.queue.size:
            run_round(fed)
        report = fed.evaluate(epoch)
        fed.state.log.append(report)
        log.info("epoch %d %s ndcg@%d %.5f", epoch, config.strategy.value, config.top_k, report.ndcg.get("overall", 0.0))
        if on_epoch:
            on_epoch(epoch, fed, report)
    return fed.state.log
