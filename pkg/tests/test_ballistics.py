import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ttball.ballistics import (AeroParams, BallState, RacketImpactParams, TableBounceParams,
                               WorldGeometry, aero_acceleration, contact_alpha,
                               integrate_flight, matrix_to_quat, quat_to_matrix, racket_impact,
                               rolling_matrices, sliding_matrices, table_bounce)
from ttball.errors import BadContact, NonFiniteState, NonUnitQuaternion
from oracles import aero_oracle, bounce_oracle, parabola, racket_oracle

W = WorldGeometry()
finite = st.floats(-15, 15, allow_nan=False)
vec = st.tuples(finite, finite, finite)
spin = st.tuples(*[st.floats(-400, 400, allow_nan=False)] * 3)


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


# -- parameter types ------------------------------------------------------


def test_world_defaults_and_validation():
    assert (W.table_length, W.table_width, W.table_height) == (2.74, 1.525, 0.78)
    assert W.net_top == pytest.approx(0.78 + 0.1525)
    with pytest.raises(ValueError):
        WorldGeometry(table_height=0.0)


def test_param_validation():
    with pytest.raises(ValueError):
        AeroParams(k_d=-1e-4)
    with pytest.raises(ValueError):
        TableBounceParams(cor_table=1.2)
    with pytest.raises(ValueError):
        TableBounceParams(mu=-0.1)
    with pytest.raises(ValueError):
        RacketImpactParams(cor_racket=0.0)
    with pytest.raises(ValueError):
        RacketImpactParams(k_p=-1.0)


def test_racket_inertia_is_hollow_sphere():
    p = RacketImpactParams()
    assert p.inertia == pytest.approx(2 / 3 * 0.0027 * 0.02 ** 2, rel=1e-12)


def test_ball_state_rejects_non_finite():
    with pytest.raises(NonFiniteState):
        BallState(0.0, [0, 0, np.nan], [0, 0, 0])


def test_ball_state_record_uses_hz():
    s = BallState(0.5, [1, 2, 3], [4, 5, 6], [2 * math.pi * 10, 0, 0])
    rec = s.to_record()
    assert rec["omega_hz"] == pytest.approx([10, 0, 0])
    back = BallState.from_record(rec)
    assert np.allclose(back.omega, s.omega)


# -- aerodynamics ---------------------------------------------------------


def test_acceleration_at_rest_is_gravity():
    a = aero_acceleration(BallState(0, [0, 0, 1], [0, 0, 0]))
    assert np.allclose(a, [0, 0, -9.81])


def test_drag_hand_value():
    a = aero_acceleration(BallState(0, [0, 0, 1], [10, 0, 0]))
    assert a[0] == pytest.approx(-3.8e-4 * 10 * 10 / 0.0027)
    assert a[0] == pytest.approx(-14.07, abs=0.01)
    assert a[2] == pytest.approx(-9.81)


def test_magnus_hand_value():
    base = aero_acceleration(BallState(0, [0, 0, 1], [10, 0, 0]))
    a = aero_acceleration(BallState(0, [0, 0, 1], [10, 0, 0], [0, 0, 2 * math.pi * 30]))
    assert (a - base)[1] == pytest.approx(3e-6 * 2 * math.pi * 30 * 10 / 0.0027)
    assert (a - base)[1] == pytest.approx(2.09, abs=0.01)


@given(vec, spin)
def test_acceleration_matches_component_oracle(v, w):
    a = aero_acceleration(BallState(0, [0, 0, 1], v, w))
    assert np.allclose(a, aero_oracle(v, w), rtol=1e-12, atol=1e-9)


# -- integration ----------------------------------------------------------


def test_parabola_without_air():
    aero = AeroParams(k_d=0, k_m=0)
    s = BallState(0, [0.3, 0.1, 1.2], [1.0, 0.5, 3.0])
    traj, bounces = integrate_flight(s, 0.5, 1e-3, W, aero)
    assert not bounces
    assert np.max(np.abs(traj.p3d - parabola(s.p, s.v, traj.t))) < 1e-6


def test_parabola_over_one_second_off_table():
    aero = AeroParams(k_d=0, k_m=0)
    # launched high enough beside the table that it never meets a surface in 1 s
    s = BallState(0, [0.0, 3.0, 2.0], [0.5, 0.0, 4.0])
    traj, _ = integrate_flight(s, 1.0, 1e-3, W, aero)
    assert traj.t[-1] == pytest.approx(1.0)
    assert np.max(np.abs(traj.p3d - parabola(s.p, s.v, traj.t))) < 1e-6


def test_drop_bounces_once_with_restitution():
    s = BallState(0, [0.5, 0.2, W.table_height + 0.2], [0, 0, 0])
    aero = AeroParams(k_d=0, k_m=0)
    traj, bounces = integrate_flight(s, 0.4, 1e-3, W, aero)
    assert len(bounces) == 1
    b = bounces[0]
    assert b.pre.v[2] == pytest.approx(-math.sqrt(2 * 9.81 * 0.2), rel=1e-6)
    assert b.post.v[2] == pytest.approx(0.93 * abs(b.pre.v[2]), rel=1e-12)
    assert b.p[2] == pytest.approx(W.table_height)
    assert b.t == pytest.approx(math.sqrt(2 * 0.2 / 9.81), abs=1e-6)


def test_off_table_flight_stops_at_floor():
    s = BallState(0, [3.0, 0.0, 1.0], [1.0, 0.0, 0.0])
    traj, bounces = integrate_flight(s, 5.0, 1e-3)
    assert not bounces
    assert traj.p3d[-1, 2] == pytest.approx(0.0, abs=1e-12)
    assert traj.t[-1] < 1.0


def test_bounce_limit():
    s = BallState(0, [0.0, 0.0, W.table_height + 0.3], [0, 0, 0])
    _, b2 = integrate_flight(s, 3.0, 1e-3, max_bounces=2)
    _, b5 = integrate_flight(s, 3.0, 1e-3, max_bounces=5)
    assert len(b2) == 2 and len(b5) == 5


def test_integration_is_bit_deterministic():
    s = BallState(0, [-1.5, 0.2, 1.0], [5.0, -0.3, 1.0], [10, 100, -20])
    a, _ = integrate_flight(s, 1.0, 1 / 240)
    b, _ = integrate_flight(s, 1.0, 1 / 240)
    assert a.equals(b)


def test_integration_argument_errors():
    s = BallState(0, [0, 0, 1], [0, 0, 0])
    with pytest.raises(ValueError):
        integrate_flight(s, 1.0, 0.0)
    with pytest.raises(ValueError):
        integrate_flight(s, -1.0, 0.01)


def test_non_finite_integration_raises():
    # an absurd drag coefficient overflows the first explicit step
    s = BallState(0, [0, 0, 2.0], [30.0, 0, 0])
    with pytest.raises(NonFiniteState):
        integrate_flight(s, 1.0, 0.1, aero=AeroParams(k_d=1e200))


def rk4_order(dt0=1 / 60, levels=4):
    s = BallState(0, [-1.0, 0.0, 1.5], [6.0, 0.5, 2.0], [40.0, 250.0, -60.0])
    ends = []
    for k in range(levels):
        traj, _ = integrate_flight(s, 0.5, dt0 / 2 ** k, W, AeroParams(), max_bounces=0)
        ends.append(np.r_[traj.p3d[-1]])
    errs = [np.linalg.norm(ends[k] - ends[k + 1]) for k in range(levels - 1)]
    slopes = np.diff(np.log2(errs))
    return -float(np.mean(slopes)), errs


def test_rk4_convergence_order():
    order, errs = rk4_order()
    assert order >= 3.5


# -- table bounce ---------------------------------------------------------


def test_vertical_bounce_is_pure_restitution():
    out = table_bounce(BallState(0, [0, 0, 0.78], [0, 0, -3]))
    assert np.allclose(out.v, [0, 0, 3 * 0.93])
    assert np.allclose(out.omega, 0)


def test_bounce_hand_value_fixed_matrices():
    pre = BallState(0, [0, 0, 0.78], [2, 0, -4])
    assert contact_alpha(pre.v, pre.omega, 0.02, TableBounceParams()) == pytest.approx(0.965)
    out = table_bounce(pre)
    assert out.v[0] == pytest.approx(1.2)
    assert out.omega[1] == pytest.approx(60.0)
    assert out.t == pre.t and np.array_equal(out.p, pre.p)


def test_bounce_requires_downward_velocity():
    with pytest.raises(BadContact):
        table_bounce(BallState(0, [0, 0, 0.78], [1, 0, 0.5]))


def test_matrix_sets_agree_at_switch():
    for M1, M2 in zip(sliding_matrices(0.4, 0.02, 0.93), rolling_matrices(0.02, 0.93)):
        assert np.allclose(M1, M2, atol=1e-12)


@given(vec, spin)
def test_bounce_matches_component_oracle(v, w):
    v = (v[0], v[1], -abs(v[2]) - 0.01)
    out = table_bounce(BallState(0, [0, 0, 0.78], v, w))
    ev, ew = bounce_oracle(v, w)
    assert np.allclose(out.v, ev, atol=1e-9) and np.allclose(out.omega, ew, atol=1e-7)


@given(vec, spin)
def test_bounce_always_leaves_upwards(v, w):
    v = (v[0], v[1], -abs(v[2]) - 1e-3)
    assert table_bounce(BallState(0, [0, 0, 0.78], v, w)).v[2] > 0


@settings(max_examples=300)
@given(vec, spin, st.floats(-1e-8, 1e-8))
def test_bounce_continuous_across_switch(v, w, d):
    # choose the vertical speed so that alpha sits within 1e-8 of the switch
    r, mu, cor = 0.02, 0.25, 0.93
    vs = math.hypot(v[0] + w[1] * r, v[1] + w[0] * r)
    if vs < 1e-3:
        return
    vz = -(0.4 + d) * vs / (mu * (1 + cor))
    pre = BallState(0, [0, 0, 0.78], (v[0], v[1], vz), w)
    out = table_bounce(pre)
    ref_v, _ = bounce_oracle(pre.v, pre.omega, alpha=0.4)
    # the outgoing velocity is Lipschitz in alpha with constant |v_t| + r|w_t|
    lip = abs(v[0]) + abs(v[1]) + r * (abs(w[0]) + abs(w[1]))
    assert np.max(np.abs(out.v - ref_v)) <= 2 * abs(d) * lip + 1e-12 * max(1.0, lip)


def test_cross_sign_switch_changes_slip():
    v, w = np.array([1.0, 0, -2]), np.array([0, 50.0, 0])
    a_summed = contact_alpha(v, w, 0.02, TableBounceParams())
    a_cross = contact_alpha(v, w, 0.02, TableBounceParams(vs_sign="cross"))
    assert a_summed == pytest.approx(0.25 * 1.93 * 2 / 2.0)
    assert a_cross == math.inf


# -- racket impact --------------------------------------------------------


def test_quaternion_round_trip(rng):
    for _ in range(100):
        q = random_quat(rng)
        q = q if q[0] >= 0 else -q
        assert np.allclose(matrix_to_quat(quat_to_matrix(q)), q, atol=1e-12)


def test_frictionless_racket_mirrors_normal_component(rng):
    p = RacketImpactParams(k_p=0.0)
    for _ in range(20):
        q = random_quat(rng)
        pre = BallState(0, [0, 0, 1], rng.normal(size=3) * 5, rng.normal(size=3) * 100)
        out = racket_impact(pre, q, np.zeros(3), p)
        n = quat_to_matrix(q)[:, 2]
        vt_in = pre.v - (pre.v @ n) * n
        vt_out = out.v - (out.v @ n) * n
        assert out.v @ n == pytest.approx(-0.75 * (pre.v @ n))
        assert np.allclose(vt_in, vt_out)
        assert np.allclose(out.omega, pre.omega)


def test_head_on_racket_restitution():
    q = np.array([1.0, 0, 0, 0])
    out = racket_impact(BallState(0, [0, 0, 1], [0, 0, -5]), q, [0, 0, 0],
                        RacketImpactParams(k_p=0.0))
    assert out.v[2] == pytest.approx(3.75)


def test_racket_requires_unit_quaternion():
    with pytest.raises(NonUnitQuaternion):
        racket_impact(BallState(0, [0, 0, 1], [0, 0, -5]), [1, 0, 0, 0.1], [0, 0, 0])


def test_identity_racket_matches_direct_matrices(rng):
    A, B, C, D = RacketImpactParams().matrices()
    for _ in range(20):
        v, w = rng.normal(size=3) * 5, rng.normal(size=3) * 100
        out = racket_impact(BallState(0, [0, 0, 1], v, w), [1, 0, 0, 0], [0, 0, 0])
        assert np.allclose(out.v, A @ v + B @ w) and np.allclose(out.omega, C @ v + D @ w)


def test_racket_matches_scipy_frame_oracle(rng):
    for _ in range(200):
        q, V = random_quat(rng), rng.normal(size=3) * 4
        v, w = rng.normal(size=3) * 8, rng.normal(size=3) * 150
        out = racket_impact(BallState(0, [0, 0, 1], v, w), q, V)
        ev, ew = racket_oracle(v, w, q, V)
        assert np.allclose(out.v, ev, atol=1e-10) and np.allclose(out.omega, ew, atol=1e-8)


def test_racket_frame_energy_does_not_grow(rng):
    p = RacketImpactParams()
    A, B, C, D = p.matrices()
    k = p.inertia / p.ball_mass
    n = 100_000
    v = rng.normal(size=(n, 3)) * rng.uniform(0, 15, (n, 1))
    w = rng.normal(size=(n, 3)) * rng.uniform(0, 2 * np.pi * 60, (n, 1))
    vp, wp = v @ A.T + w @ B.T, v @ C.T + w @ D.T
    before = (v ** 2).sum(1) + k * (w ** 2).sum(1)
    after = (vp ** 2).sum(1) + k * (wp ** 2).sum(1)
    assert np.all(after <= before + 1e-9)
