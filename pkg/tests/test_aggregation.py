import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetefedrec.aggregation import (
    aggregate_item_updates,
    aggregate_theta,
    apply_item_updates,
    clustered_aggregate,
    hetero_aggregate,
    homogeneous_aggregate,
    pad_update,
)
from hetefedrec.model import ScorerParams, TieredParams, init_params
from hetefedrec.training import UpdatePacket

WIDTHS = (2, 3, 4)


def packet(rng, cid, tier, widths=WIDTHS, rows=3, scale=1.0):
    deltas = {k: ScorerParams.init(widths[k], rng).map(lambda a: a * scale + rng.normal(0, 0.01, a.shape)) for k in range(tier + 1)}
    return UpdatePacket(cid, tier, rng.normal(0, scale, (rows, widths[tier])), deltas)


# -- padding ----------------------------------------------------------------


def test_pad_example():
    out = pad_update(np.array([[1.0, 2.0], [3.0, 4.0]]), 4)
    assert out.tolist() == [[1, 2, 0, 0], [3, 4, 0, 0]]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 4), st.integers(0, 2**31))
def test_pad_slice_round_trip(rows, width, extra, seed):
    X = np.random.default_rng(seed).normal(size=(rows, width))
    padded = pad_update(X, width + extra)
    assert np.array_equal(padded[:, :width], X)
    assert not padded[:, width:].any()


def test_pad_cannot_shrink():
    with pytest.raises(ValueError):
        pad_update(np.zeros((2, 4)), 3)


def test_single_packet_touches_only_its_prefix(rng):
    params = init_params(3, WIDTHS, rng)
    p = packet(rng, 0, 0)
    new = apply_item_updates(params, aggregate_item_updates([p], WIDTHS, 3))
    assert np.array_equal(new.tables[2][:, :2], params.tables[2][:, :2] - p.delta_V)
    assert np.array_equal(new.tables[2][:, 2:], params.tables[2][:, 2:])


# -- item aggregation -------------------------------------------------------


def test_empty_aggregate_is_zero():
    agg = aggregate_item_updates([], WIDTHS, 3)
    assert agg.full.shape == (3, 4) and not agg.full.any()
    assert [s.shape for s in agg.slices] == [(3, 2), (3, 3), (3, 4)]


def test_small_plus_large_manual():
    small = UpdatePacket(0, 0, np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]), {})
    large = UpdatePacket(1, 2, np.arange(12.0).reshape(3, 4), {})
    agg = aggregate_item_updates([large, small], WIDTHS, 3)
    expected = [[1 + 0, 2 + 1, 2, 3], [3 + 4, 4 + 5, 6, 7], [5 + 8, 6 + 9, 10, 11]]
    assert agg.full.tolist() == expected
    assert agg.slices[0].tolist() == [r[:2] for r in expected]


def test_aggregation_order_is_fixed(rng):
    packets = [packet(rng, cid, cid % 3, scale=1e3) for cid in range(12)]
    a = aggregate_item_updates(packets, WIDTHS, 3).full
    b = aggregate_item_updates(packets[::-1], WIDTHS, 3).full
    assert np.array_equal(a, b)


def test_malformed_packet_is_skipped(rng, caplog):
    good = packet(rng, 0, 1)
    bad = UpdatePacket(1, 1, np.zeros((3, 4)), good.delta_thetas)
    with caplog.at_level(logging.WARNING):
        agg = aggregate_item_updates([good, bad], WIDTHS, 3)
    assert "client 1" in caplog.text
    assert np.array_equal(agg.slices[1], good.delta_V)


def test_mean_reduction(rng):
    packets = [packet(rng, cid, 2) for cid in range(4)]
    total = aggregate_item_updates(packets, WIDTHS, 3).full
    assert np.allclose(aggregate_item_updates(packets, WIDTHS, 3, "mean").full, total / 4, atol=1e-15)


# -- applying ---------------------------------------------------------------


def test_zero_aggregate_leaves_params(rng):
    params = init_params(3, WIDTHS, rng)
    assert apply_item_updates(params, aggregate_item_updates([], WIDTHS, 3)).equal(params)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=10), st.integers(0, 2**31))
def test_aligned_prefixes_survive_any_round(tiers, seed):
    rng = np.random.default_rng(seed)
    params = init_params(3, WIDTHS, rng)
    packets = [packet(rng, cid, t) for cid, t in enumerate(tiers)]
    assert hetero_aggregate(packets, params).prefix_gap() == 0.0


def test_apply_matches_dense_oracle(rng):
    params = init_params(3, WIDTHS, rng)
    packets = [packet(rng, cid, t) for cid, t in enumerate([0, 2, 1, 2, 0])]
    new = apply_item_updates(params, aggregate_item_updates(packets, WIDTHS, 3))
    for k, w in enumerate(WIDTHS):
        oracle = params.tables[k].copy()
        for r in range(3):
            for c in range(w):
                oracle[r, c] -= sum(p.delta_V[r, c] for p in packets if c < p.width)
        assert np.allclose(new.tables[k], oracle, atol=1e-12)


# -- scorer aggregation -----------------------------------------------------


def thetas(rng):
    return [ScorerParams.init(w, rng) for w in WIDTHS]


def test_only_small_round_keeps_wider_scorers(rng):
    th = thetas(rng)
    out = aggregate_theta([packet(rng, 0, 0), packet(rng, 1, 0)], th)
    assert out[1].equal(th[1]) and out[2].equal(th[2])
    assert not out[0].equal(th[0])


def test_theta_per_tier_oracle(rng):
    th = thetas(rng)
    packets = [packet(rng, cid, t) for cid, t in enumerate([2, 0, 1, 1, 2])]
    out = aggregate_theta(packets, th)
    for k in range(3):
        for name, a in th[k].arrays().items():
            oracle = a.copy()
            for p in packets:
                if p.tier >= k:
                    oracle -= p.delta_thetas[k].arrays()[name]
            assert np.allclose(out[k].arrays()[name], oracle, atol=1e-12)


def test_zero_theta_deltas_are_identity(rng):
    th = thetas(rng)
    zero = UpdatePacket(0, 2, np.zeros((3, 4)), {k: ScorerParams.zeros(w) for k, w in enumerate(WIDTHS)})
    assert all(a.equal(b) for a, b in zip(aggregate_theta([zero], th), th))


def test_missing_theta_delta_rejected(rng, caplog):
    th = thetas(rng)
    p = packet(rng, 0, 2)
    broken = UpdatePacket(0, 2, p.delta_V, {0: p.delta_thetas[0], 2: p.delta_thetas[2]})
    with caplog.at_level(logging.WARNING):
        out = aggregate_theta([broken], th)
    assert all(a.equal(b) for a, b in zip(out, th))
    assert "rejecting" in caplog.text


# -- homogeneous / clustered -------------------------------------------------


def single(rng, width):
    return TieredParams([rng.normal(size=(3, width))], [ScorerParams.init(width, rng)])


def test_homogeneous_equals_degenerate_hetero(rng):
    params = single(rng, 4)
    packets = [packet(rng, cid, 0, widths=(4,)) for cid in range(5)]
    assert homogeneous_aggregate(packets, params).equal(hetero_aggregate(packets, params))


def test_homogeneous_filter_then_sum(rng):
    params = single(rng, 4)
    packets = [packet(rng, cid, 0, widths=(4,)) for cid in range(6)]
    kept = [p for p in packets if p.client_id % 2]
    out = homogeneous_aggregate(kept, params)
    oracle = params.tables[0] - sum(p.delta_V for p in sorted(kept, key=lambda p: p.client_id))
    assert np.allclose(out.tables[0], oracle, atol=1e-12)
    w_oracle = params.thetas[0].w1 - sum(p.delta_thetas[0].w1 for p in kept)
    assert np.allclose(out.thetas[0].w1, w_oracle, atol=1e-12)


def test_homogeneous_rejects_mixed_widths(rng):
    params = single(rng, 4)
    with pytest.raises(ValueError):
        homogeneous_aggregate([packet(rng, 0, 0, widths=(4,)), packet(rng, 1, 0, widths=(2,))], params)


def test_clustered_single_tier_population(rng):
    params = init_params(3, WIDTHS, rng)
    packets = [packet(rng, cid, 1) for cid in range(4)]
    out = clustered_aggregate(packets, params)
    sub = homogeneous_aggregate(
        [UpdatePacket(p.client_id, 0, p.delta_V, {0: p.delta_thetas[1]}) for p in packets],
        TieredParams([params.tables[1]], [params.thetas[1]]),
    )
    assert np.array_equal(out.tables[1], sub.tables[0]) and out.thetas[1].equal(sub.thetas[0])
    assert np.array_equal(out.tables[0], params.tables[0]) and np.array_equal(out.tables[2], params.tables[2])


def test_clustered_isolation_and_oracles(rng):
    params = init_params(3, WIDTHS, rng)
    packets = [packet(rng, cid, t) for cid, t in enumerate([0, 0, 1, 2, 2, 1, 0])]
    out = clustered_aggregate(packets, params)
    small_only = clustered_aggregate([p for p in packets if p.tier == 0], params)
    assert np.array_equal(small_only.tables[1], params.tables[1])
    assert np.array_equal(small_only.tables[2], params.tables[2])
    for k in range(3):
        oracle = params.tables[k] - sum(p.delta_V for p in packets if p.tier == k)
        assert np.allclose(out.tables[k], oracle, atol=1e-12)
        b_oracle = params.thetas[k].b1 - sum(p.delta_thetas[k].b1 for p in packets if p.tier == k)
        assert np.allclose(out.thetas[k].b1, b_oracle, atol=1e-12)


def test_one_tier_padded_equals_clustered_prefix(rng):
    params = init_params(3, WIDTHS, rng, aligned=False)
    packets = [packet(rng, cid, 1) for cid in range(3)]
    agg = aggregate_item_updates(packets, WIDTHS, 3)
    clustered = clustered_aggregate(packets, params)
    assert np.array_equal(params.tables[1] - agg.slices[1], clustered.tables[1])
