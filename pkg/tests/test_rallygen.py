import numpy as np
import pytest

from ttball.ballistics import AeroParams, BounceEvent, TableBounceParams, WorldGeometry
from ttball.rallygen import (EDGE_MARGIN, ConditionPool, FailedPoint, PoolRanges, StitchedRally,
                             _Model, build_pools, cut_subsequence, generate_rally,
                             is_valid_trajectory, simulate_segment, stitch_next_segment)
from ttball.trajectory import Trajectory, hz_to_rad

W = WorldGeometry()
H = W.table_height


def test_pool_sizes_and_revalidation(pools):
    M = _Model(W, AeroParams(), TableBounceParams())
    for kind, pool in pools.items():
        assert len(pool) == 300
        for i in range(0, 300, 15):
            p, v, w = pool.entry(i)
            seg = simulate_segment(kind, 0, p, v, hz_to_rad(w), M)
            assert is_valid_trajectory(seg.traj, kind, W, seg.bounces, EDGE_MARGIN), (kind, i)


def test_pools_are_deterministic():
    a = build_pools(20, rng_seed=5)
    b = build_pools(20, rng_seed=5)
    c = build_pools(20, rng_seed=6)
    for k in a:
        assert a[k].fingerprint() == b[k].fingerprint()
        assert a[k].fingerprint() != c[k].fingerprint()


def test_zero_spin_range_gives_zero_spin():
    pools = build_pools(10, rng_seed=2, ranges=PoolRanges(spin_max_hz=0.0))
    for pool in pools.values():
        assert np.all(pool.start_omega == 0.0)


def test_pool_entries_are_read_only(pools):
    with pytest.raises(ValueError):
        pools["serve"].start_p[0, 0] = 1.0


def test_pool_records(pools):
    rec = pools["return"].to_records()[0]
    assert rec["kind"] == "return" and len(rec["omega_hz"]) == 3


# -- stitching ------------------------------------------------------------


def test_stitch_takes_nearest_entry_first(pools):
    pool = pools["return"]
    r = pool.start_p[17] + [0.001, 0.0, 0.0]
    used = np.zeros(len(pool), dtype=bool)
    seg = stitch_next_segment(r, pool, 1, used=used)
    assert used.sum() == 1
    d = np.linalg.norm(pool.start_p - r, axis=1)
    assert used[int(np.argmin(d))]
    assert seg is not None
    assert np.array_equal(seg.traj.p3d[0], r)


def test_stitch_with_single_invalid_entry_returns_none():
    # a return aimed straight down into the hitter's own half
    pool = ConditionPool("return", [[-1.5, 0, H + 0.3]], [[0.5, 0, -4.0]], [[0, 0, 0]])
    used = np.zeros(1, dtype=bool)
    assert stitch_next_segment([-1.5, 0, H + 0.3], pool, 10, used=used) is None
    assert used.all()


def test_empty_pool_gives_failed_point(pools):
    empty = ConditionPool("return", np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    out = generate_rally(3, {**pools, "return": empty})
    assert isinstance(out, FailedPoint)
    assert out.stage == "return" and out.n_segments == 2


# -- validity -------------------------------------------------------------


def _return_like(z_net, x_bounce):
    """Hand-built return from x = -1.5 to x = 1.0 with one far-side bounce."""
    t = np.linspace(0, 0.6, 73)
    x = -1.5 + 2.5 * t / 0.6
    # piecewise parabola through the net height and a bounce at x_bounce
    tb = (x_bounce + 1.5) / 2.5 * 0.6
    z = np.where(t < tb, H + 0.02 + (z_net - H) * 4 * (t / tb) * (1 - t / tb) * 1.05,
                 H + 0.02 + 1.2 * (t - tb) - 4.9 * (t - tb) ** 2)
    z[0] = H + 0.2
    bounces = [BounceEvent(tb, np.array([x_bounce, 0.0, H + 0.02]), None, None)]
    return Trajectory(t, np.c_[x, 0 * t, z]), bounces


def test_low_net_crossing_is_net_fault():
    tr, b = _return_like(H + 0.10, 0.8)
    assert is_valid_trajectory(tr, "return", W, b).reason == "NetFault"


def test_bounce_past_end_line_is_out_of_bounds():
    tr, b = _return_like(H + 0.3, 0.8)
    b = [BounceEvent(b[0].t, np.array([1.5, 0.0, H]), None, None)]
    assert is_valid_trajectory(tr, "return", W, b).reason == "OutOfBounds"
    b = [BounceEvent(b[0].t, np.array([1.36, 0.0, H]), None, None)]
    assert is_valid_trajectory(tr, "return", W, b, edge_margin=0.02).reason == "OutOfBounds"


def test_unknown_kind():
    tr, b = _return_like(H + 0.3, 0.8)
    with pytest.raises(ValueError):
        is_valid_trajectory(tr, "lob", W, b)


# -- rallies --------------------------------------------------------------


def test_rally_structure(rallies):
    for r in rallies:
        assert isinstance(r, StitchedRally)
        kinds = [s.kind for s in r.segments]
        assert kinds[:2] == ["throw", "serve"] and set(kinds[2:]) == {"return"}
        assert 1 <= len(kinds) - 2 <= 10
        for s in r.segments:
            assert is_valid_trajectory(s.traj, s.kind, W, s.bounces, EDGE_MARGIN)


def test_stitches_are_continuous_in_position(rallies):
    for r in rallies:
        for a, b in zip(r.segments, r.segments[1:]):
            assert np.linalg.norm(a.traj.p3d[-1] - b.traj.p3d[0]) <= 1e-9
            assert a.k_end == b.k_start
            assert b.traj.t[0] == pytest.approx(a.traj.t[-1], abs=1e-12)


def test_velocity_changes_at_every_stitch(rallies):
    for r in rallies:
        for a, b in zip(r.segments, r.segments[1:]):
            va = (a.traj.p3d[-1] - a.traj.p3d[-2]) / r.dt
            vb = (b.traj.p3d[1] - b.traj.p3d[0]) / r.dt
            assert np.linalg.norm(va - vb) > 0.5


def test_generation_is_deterministic(pools):
    a = generate_rally(42, pools)
    b = generate_rally(42, pools)
    assert a.fingerprint() == b.fingerprint()
    assert a.trajectory().equals(b.trajectory())


def test_distinct_seeds_give_distinct_rallies(rallies):
    prints = {r.fingerprint() for r in rallies}
    assert len(prints) == len(rallies)


def test_rally_ground_truth(rallies):
    r = rallies[0]
    gt = r.ground_truth()
    assert len(gt["hits"]) == len(r.segments) - 1
    assert len(gt["bounces"]) == 2 + (len(r.segments) - 2)
    assert gt["hits"][0]["t"] == pytest.approx(r.segments[1].t_start)


def test_dense_trajectory_counts_stitch_samples_once(rallies):
    r = rallies[0]
    tr = r.trajectory()
    assert len(tr) == r.segments[-1].k_end - r.segments[0].k_start + 1
    assert np.allclose(np.diff(tr.t), r.dt)


def test_sampled_rejects_non_divisor(rallies):
    with pytest.raises(ValueError):
        rallies[0].sampled(100.0)


def test_fixed_segment_count(pools):
    r = generate_rally(7, pools, max_segments=3)
    assert len(r.segments) == 5


def test_cut_subsequence(rng, rallies):
    tr = rallies[0].sampled(120.0)
    for _ in range(50):
        cut = cut_subsequence(tr, rng)
        assert 20 <= len(cut) <= 250
        i = int(np.searchsorted(tr.t, cut.t[0]))
        assert np.array_equal(tr.p3d[i:i + len(cut)], cut.p3d)
    short = tr.subset(slice(0, 15))
    assert cut_subsequence(short, rng) is short
