"""Server-side reduction of client uploads.

Deltas follow the sign convention ``param <- param - sum(deltas)``.  Packets
are always reduced in ascending client-id order so floating-point sums are
reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from hetefedrec.model import ScorerParams, TieredParams
from hetefedrec.training import UpdatePacket

log = logging.getLogger(__name__)


def pad_update(delta: np.ndarray, target: int) -> np.ndarray:
    """Zero-extend ``delta`` on the right to ``target`` columns."""
    rows, width = delta.shape
    if width > target:
        raise ValueError(f"cannot pad width {width} down to {target}")
    out = np.zeros((rows, target), dtype=delta.dtype)
    out[:, :width] = delta
    return out


@dataclass(frozen=True)
class ItemAggregate:
    full: np.ndarray
    slices: tuple[np.ndarray, ...]


def _ordered(packets: Iterable[UpdatePacket]) -> list[UpdatePacket]:
    return sorted(packets, key=lambda p: p.client_id)


def _valid_item_packet(packet: UpdatePacket, widths: Sequence[int], num_items: int) -> bool:
    if not 0 <= packet.tier < len(widths):
        log.warning("rejecting packet from client %d: unknown tier %d", packet.client_id, packet.tier)
        return False
    if packet.delta_V.shape != (num_items, widths[packet.tier]):
        log.warning(
            "rejecting packet from client %d: delta shape %s does not match tier %d width %d",
            packet.client_id, packet.delta_V.shape, packet.tier, widths[packet.tier],
        )
        return False
    return True


def _scale(reduce: str, count: int) -> float:
    if reduce == "sum":
        return 1.0
    if reduce == "mean":
        return 1.0 / max(count, 1)
    raise ValueError(f"unknown reduction {reduce!r}")


def aggregate_item_updates(
    packets: Iterable[UpdatePacket], widths: Sequence[int], num_items: int, reduce: str = "sum"
) -> ItemAggregate:
    """Pad every item-table delta to the widest tier and sum them.

    ``slices[k]`` is the leading ``widths[k]`` columns of the sum, the update
    for tier ``k``'s table.
    """
    widths = tuple(widths)
    full = np.zeros((num_items, widths[-1]))
    used = 0
    for p in _ordered(packets):
        if not _valid_item_packet(p, widths, num_items):
            continue
        full[:, : p.width] += p.delta_V
        used += 1
    full *= _scale(reduce, used)
    return ItemAggregate(full, tuple(full[:, :w] for w in widths))


def apply_item_updates(params: TieredParams, agg: ItemAggregate) -> TieredParams:
    if len(agg.slices) != len(params.tables):
        raise ValueError("aggregate tiers do not match parameter tiers")
    tables = [t - s for t, s in zip(params.tables, agg.slices)]
    return TieredParams(tables, [th.copy() for th in params.thetas])


def aggregate_theta(packets: Iterable[UpdatePacket], thetas: Sequence[ScorerParams], reduce: str = "sum") -> list[ScorerParams]:
    """Scorer ``k`` receives the deltas of every client at tier ``k`` or above.

    A packet missing any scorer delta ``0..tier`` is rejected.
    """
    sums = [ScorerParams.zeros(th.width) for th in thetas]
    counts = [0] * len(thetas)
    for p in _ordered(packets):
        missing = [k for k in range(p.tier + 1) if k not in p.delta_thetas]
        bad = [k for k in range(p.tier + 1) if k in p.delta_thetas and p.delta_thetas[k].width != thetas[k].width]
        if p.tier >= len(thetas) or missing or bad:
            log.warning("rejecting scorer deltas from client %d (missing %s, mismatched %s)", p.client_id, missing, bad)
            continue
        for k in range(p.tier + 1):
            sums[k] = sums[k] + p.delta_thetas[k]
            counts[k] += 1
    return [th - s.map(lambda a: a * _scale(reduce, c)) for th, s, c in zip(thetas, sums, counts)]


def hetero_aggregate(packets: Sequence[UpdatePacket], params: TieredParams, reduce: str = "sum") -> TieredParams:
    """Padding aggregation of the item tables plus tiered scorer aggregation."""
    packets = list(packets)
    agg = aggregate_item_updates(packets, params.widths, params.num_items, reduce)
    updated = apply_item_updates(params, agg)
    updated.thetas = aggregate_theta(packets, params.thetas, reduce)
    return updated


def homogeneous_aggregate(packets: Sequence[UpdatePacket], params: TieredParams, reduce: str = "sum") -> TieredParams:
    """Single-table sum-and-apply; every packet must carry the table's width."""
    if len(params.tables) != 1:
        raise ValueError("homogeneous aggregation expects a single-table model")
    width = params.widths[0]
    widths = {p.width for p in packets}
    if widths - {width}:
        raise ValueError(f"mixed packet widths {sorted(widths)} for a width-{width} model")
    total = np.zeros_like(params.tables[0])
    theta_sum = ScorerParams.zeros(width)
    n = 0
    for p in _ordered(packets):
        total += p.delta_V
        theta_sum = theta_sum + p.delta_thetas[p.tier]
        n += 1
    scale = _scale(reduce, n)
    return TieredParams([params.tables[0] - total * scale], [params.thetas[0] - theta_sum.map(lambda a: a * scale)])


def clustered_aggregate(packets: Sequence[UpdatePacket], params: TieredParams, reduce: str = "sum") -> TieredParams:
    """Aggregate each tier's packets into that tier's table and scorer only."""
    tables, thetas = [], []
    for k, (table, theta) in enumerate(zip(params.tables, params.thetas)):
        mine = []
        for p in packets:
            if p.tier != k:
                continue
            if p.delta_V.shape != table.shape or k not in p.delta_thetas:
                log.warning("rejecting packet from client %d for tier %d", p.client_id, k)
                continue
            mine.append(UpdatePacket(p.client_id, 0, p.delta_V, {0: p.delta_thetas[k]}))
        sub = homogeneous_aggregate(mine, TieredParams([table], [theta]), reduce)
        tables.append(sub.tables[0])
        thetas.append(sub.thetas[0])
    return TieredParams(tables, thetas)
