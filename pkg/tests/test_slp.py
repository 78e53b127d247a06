import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sltube import slp
from sltube.horizon import LtiSystem, build_horizon_operators, matrix_powers
from sltube.verify import random_blt, random_system

from conftest import A_BENCH, B_BENCH
from oracles import dense_closed_loop


def diag_blocks(M, i_blocks, rb, cb, offset):
    """Blocks on the ``offset``-th sub-diagonal."""
    return [M[(i + offset) * rb:(i + offset + 1) * rb, i * cb:(i + 1) * cb]
            for i in range(i_blocks - offset)]


def test_zero_gain_response(bench_sys):
    ops = build_horizon_operators(bench_sys, 5)
    resp = slp.response_from_controller(ops, np.zeros((6, 12)))
    assert np.allclose(resp.phi_x, ops.state_response)
    assert not np.any(resp.phi_u)
    assert np.array_equal(slp.controller_from_response(ops, resp).gains, np.zeros((6, 12)))


def test_scalar_constant_gain_example(scalar_ops):
    ops = scalar_ops(1.0, 1.0, 2)
    K = -0.5 * np.eye(3)
    resp = slp.response_from_controller(ops, K)
    for off, want in enumerate([1.0, 0.5, 0.25]):
        assert np.allclose(diag_blocks(resp.phi_x, 3, 1, 1, off), want)
    for off, want in enumerate([-0.5, -0.25, -0.125]):
        assert np.allclose(diag_blocks(resp.phi_u, 3, 1, 1, off), want)
    px, pu = dense_closed_loop(ops, K)
    assert np.allclose(px, resp.phi_x) and np.allclose(pu, resp.phi_u)


def test_random_gain_subspace_and_round_trip(rng):
    ops = build_horizon_operators(LtiSystem(rng.normal(size=(3, 3)) * 0.5,
                                            rng.normal(size=(3, 2))), 5)
    K = random_blt(rng, ops)
    resp = slp.response_from_controller(ops, K)
    assert slp.subspace_residual(ops, resp) <= 1e-10
    assert np.allclose(slp.controller_from_response(ops, resp).gains, K, atol=1e-8)
    px, _ = dense_closed_loop(ops, K)
    assert np.allclose(px, resp.phi_x, atol=1e-10)


def test_corrupted_response_rejected(scalar_ops):
    ops = scalar_ops(1.0, 1.0, 2)
    resp = slp.response_from_controller(ops, -0.5 * np.eye(3))
    bad = resp.phi_x.copy()
    bad[2, 0] += 0.1
    broken = slp.SystemResponse(bad, resp.phi_u)
    assert slp.subspace_residual(ops, broken) == pytest.approx(0.1)
    with pytest.raises(slp.SubspaceViolation):
        slp.controller_from_response(ops, broken)


def test_non_blt_gain_rejected(scalar_ops):
    ops = scalar_ops(1.0, 1.0, 2)
    K = np.zeros((3, 3))
    K[0, 2] = 1.0
    with pytest.raises(ValueError):
        slp.response_from_controller(ops, K)


def test_identity_response_residual(bench_sys):
    ops = build_horizon_operators(bench_sys, 3)
    resp = slp.SystemResponse(np.eye(8), np.zeros((4, 8)))
    assert slp.subspace_residual(ops, resp) == pytest.approx(np.max(np.abs(ops.za)))


def test_input_form_any_phi_u(rng):
    for _ in range(30):
        ops = random_system(rng)
        resp = slp.response_from_inputs(ops, random_blt(rng, ops, scale=2.0))
        assert slp.subspace_residual(ops, resp) <= 1e-10 * max(1, np.abs(resp.phi_x).max())


def test_df_to_slp_zero_policy(bench_sys):
    ops = build_horizon_operators(bench_sys, 4)
    resp = slp.df_to_slp(ops, np.zeros((5, 8)), np.zeros(5), [1.0, 0.0])
    assert not np.any(resp.phi_u[:, 2:])
    assert np.allclose(resp.phi_x, ops.state_response)


def test_df_to_slp_scalar_hand_rollout(scalar_ops):
    ops = scalar_ops(1.0, 1.0, 1)
    M = np.array([[0.0], [0.2]])
    v = np.array([0.3, 0.0])
    resp = slp.df_to_slp(ops, M, v, [1.0])
    assert resp.phi_u[0, 0] == pytest.approx(0.3)
    x_df, u_df = slp.df_rollout(ops, M, v, [1.0], [0.1])
    x_s, u_s = resp.apply([1.0, 0.1])
    assert np.allclose(u_df, [0.3, 0.02]) and np.allclose(u_s, u_df)
    assert np.allclose(x_s, x_df)


def test_df_to_slp_rejects_zero_state(scalar_ops):
    ops = scalar_ops(1.0, 1.0, 1)
    with pytest.raises(slp.ZeroInitialState):
        slp.df_to_slp(ops, np.zeros((2, 1)), np.zeros(2), [0.0])


def test_df_to_slp_rejects_non_strict_m(scalar_ops):
    ops = scalar_ops(1.0, 1.0, 1)
    with pytest.raises(ValueError):
        slp.df_to_slp(ops, np.array([[1.0], [0.0]]), np.zeros(2), [1.0])


def test_slp_to_df_examples(scalar_ops, bench_sys):
    ops0 = build_horizon_operators(bench_sys, 3)
    M, v = slp.slp_to_df(ops0, slp.response_from_controller(ops0, np.zeros((4, 8))), [1, 2])
    assert not np.any(M) and not np.any(v)
    ops = scalar_ops(1.0, 1.0, 2)
    resp = slp.response_from_controller(ops, -0.5 * np.eye(3))
    M, v = slp.slp_to_df(ops, resp, [1.0])
    assert np.allclose(v, [-0.5, -0.25, -0.125])
    assert np.allclose(M, [[0, 0], [-0.5, 0], [-0.25, -0.5]])
    bad = slp.SystemResponse(np.eye(3), resp.phi_u)
    with pytest.raises(slp.SubspaceViolation):
        slp.slp_to_df(ops, bad, [1.0])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_table_mappings_preserve_trajectories(seed):
    rng = np.random.default_rng(seed)
    ops = random_system(rng)
    n, m, N = ops.n, ops.m, ops.N
    M = random_blt(rng, ops, strict=True)[:, n:]
    v = rng.normal(size=(N + 1) * m)
    x0 = rng.normal(size=n)
    w = rng.uniform(-1, 1, N * n)
    x_df, u_df = slp.df_rollout(ops, M, v, x0, w)
    resp = slp.df_to_slp(ops, M, v, x0)
    x_s, u_s = resp.apply(np.r_[x0, w])
    scale = max(1.0, np.abs(x_df).max())
    assert np.max(np.abs(x_s - x_df)) <= 1e-9 * scale
    assert np.max(np.abs(u_s - u_df)) <= 1e-9 * scale
    M2, v2 = slp.slp_to_df(ops, resp, x0)
    x2, u2 = slp.df_rollout(ops, M2, v2, x0, w)
    assert np.max(np.abs(x2 - x_df)) <= 1e-9 * scale
    assert np.max(np.abs(u2 - u_df)) <= 1e-9 * scale


def test_toeplitz_constant_gain(bench_sys):
    K = np.array([[-0.6, -0.8]])
    tr = slp.toeplitz_from_gain(bench_sys, K, 6)
    AK = A_BENCH + B_BENCH @ K
    for i, P in enumerate(matrix_powers(AK, 6)):
        assert np.allclose(tr.x_blocks[i], P) and np.allclose(tr.u_blocks[i], K @ P)
    ops = build_horizon_operators(bench_sys, 6)
    dense = slp.response_from_controller(ops, np.kron(np.eye(7), K))
    exp = slp.toeplitz_expand(tr)
    assert np.allclose(exp.phi_x, dense.phi_x) and np.allclose(exp.phi_u, dense.phi_u)


def test_toeplitz_zero_inputs(bench_sys):
    tr = slp.ToeplitzResponse(np.array(matrix_powers(A_BENCH, 4)), np.zeros((5, 1, 2)))
    assert slp.toeplitz_recursion_residual(bench_sys, tr) == 0.0
    ops = build_horizon_operators(bench_sys, 4)
    assert slp.subspace_residual(ops, slp.toeplitz_expand(tr)) <= 1e-12


def test_toeplitz_random_recursion(rng, bench_sys):
    ub = rng.normal(size=(3, 1, 2))
    xb = [np.eye(2)]
    for i in range(2):
        xb.append(A_BENCH @ xb[-1] + B_BENCH @ ub[i])
    tr = slp.ToeplitzResponse(np.array(xb), ub)
    ops = build_horizon_operators(bench_sys, 2)
    assert slp.subspace_residual(ops, slp.toeplitz_expand(tr)) <= 1e-10
    broken = slp.ToeplitzResponse(np.array(xb) + 0.01, ub)
    assert slp.toeplitz_recursion_residual(bench_sys, broken) > 1e-3


def test_toeplitz_json_round_trip(bench_sys):
    tr = slp.toeplitz_from_gain(bench_sys, [[-0.5, -0.5]], 3)
    back = slp.ToeplitzResponse.from_dict(json.loads(json.dumps(tr.to_dict())))
    assert np.array_equal(back.x_blocks, tr.x_blocks) and np.array_equal(back.u_blocks, tr.u_blocks)


def test_tube_relation_worked_example(bench_sys):
    """Constant gain with zero offsets: x_i = z_i + sum A_K^{i-1-j} w_j."""
    N = 8
    K = np.array([[-0.6, -0.8]])
    ops = build_horizon_operators(bench_sys, N)
    AK = A_BENCH + B_BENCH @ K
    P = matrix_powers(AK, N)
    tr = slp.toeplitz_from_gain(bench_sys, K, N)
    ar = slp.AffineResponse.from_toeplitz(tr, np.zeros(2 * N + 2), np.zeros(N + 1))
    rng = np.random.default_rng(1)
    x0 = np.array([-0.9, 0.2])
    w = rng.uniform(-0.1, 0.1, size=(N, 2))
    x, u = ar.apply(ops, np.r_[x0, w.ravel()])
    x, u = x.reshape(-1, 2), u.reshape(-1, 1)
    for i in range(N + 1):
        z = P[i] @ x0
        e = sum((P[i - 1 - j] @ w[j] for j in range(i)), np.zeros(2))
        assert np.max(np.abs(x[i] - z - e)) <= 1e-9
        assert np.max(np.abs(u[i] - K @ z - K @ (x[i] - z))) <= 1e-9


def test_affine_zero_offsets_reduce(rng, bench_sys):
    ops = build_horizon_operators(bench_sys, 4)
    K = np.kron(np.eye(5), [[-0.5, -0.4]])
    resp = slp.response_from_controller(ops, K)
    ar = slp.AffineResponse(np.zeros(10), np.zeros(5), resp.phi_x, resp.phi_u)
    assert slp.affine_subspace_residual(ops, ar) <= 1e-10
    ctrl = slp.affine_controller_recovery(ops, ar)
    assert np.allclose(ctrl.gains, slp.controller_from_response(ops, resp).gains)
    assert np.allclose(ctrl.affine_terms, 0)


def test_affine_scalar_nominal(scalar_ops):
    ops = scalar_ops(1.0, 1.0, 1)
    resp = slp.response_from_controller(ops, np.zeros((2, 2)))
    ar = slp.AffineResponse(np.array([0.0, 0.4]), np.array([0.4, 0.0]), resp.phi_x, resp.phi_u)
    fb, nom = slp.affine_residual_parts(ops, ar)
    assert nom == 0.0 and fb <= 1e-12


def test_affine_initial_offset(bench_sys):
    ops = build_horizon_operators(bench_sys, 5)
    rng = np.random.default_rng(2)
    phi_v = rng.normal(size=6)
    z0 = np.array([0.3, -0.2])
    phi_z, dz = slp.nominal_offsets(ops, phi_v, z0)
    assert np.allclose(phi_z[:2], z0)
    tr = slp.toeplitz_from_gain(bench_sys, [[-0.5, -0.5]], 5)
    ar = slp.AffineResponse.from_toeplitz(tr, phi_z, phi_v, dz)
    assert slp.affine_residual_parts(ops, ar)[1] <= 1e-12
    assert slp.affine_subspace_residual(ops, ar) <= 1e-10


def test_affine_recovery_constant_gain_rollout(bench_sys):
    N = 6
    K = np.array([[-0.5, -0.6]])
    ops = build_horizon_operators(bench_sys, N)
    phi_v = np.linspace(0.2, -0.2, N + 1)
    phi_z, _ = slp.nominal_offsets(ops, phi_v)
    ar = slp.AffineResponse.from_toeplitz(slp.toeplitz_from_gain(bench_sys, K, N), phi_z, phi_v)
    ctrl = slp.affine_controller_recovery(ops, ar)
    # a constant gain acting on x - phi_z: k = phi_v - K phi_z blockwise
    want = phi_v - np.kron(np.eye(N + 1), K) @ phi_z
    assert np.allclose(ctrl.affine_terms, want, atol=1e-10)
    w = np.random.default_rng(0).uniform(-0.1, 0.1, 2 * N)
    x0 = np.array([-0.9, 0.0])
    x, u = slp.rollout_controller(bench_sys, ctrl, x0, w)
    xa, ua = ar.apply(ops, np.r_[x0, w])
    assert np.max(np.abs(x - xa)) <= 1e-8 and np.max(np.abs(u - ua)) <= 1e-8


def test_affine_recovery_rejects_bad_offsets(bench_sys):
    ops = build_horizon_operators(bench_sys, 3)
    tr = slp.toeplitz_from_gain(bench_sys, [[-0.5, -0.5]], 3)
    ar = slp.AffineResponse.from_toeplitz(tr, np.ones(8), np.zeros(4))
    with pytest.raises(slp.SubspaceViolation):
        slp.affine_controller_recovery(ops, ar)


def perturbed_affine(rng, ops, eps_fb, eps_nom):
    n, m, N = ops.n, ops.m, ops.N
    resp = slp.response_from_inputs(ops, random_blt(rng, ops))
    phi_v = rng.normal(size=(N + 1) * m)
    phi_z, _ = slp.nominal_offsets(ops, phi_v)
    px = resp.phi_x.copy()
    if eps_fb:
        px[-1, 0] += eps_fb
    if eps_nom:
        phi_z = phi_z.copy()
        phi_z[-1] += eps_nom
    return slp.AffineResponse(phi_z, phi_v, px, resp.phi_u)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps_fb=st.sampled_from([0.0, 1e-3]),
       eps_nom=st.sampled_from([0.0, 1e-3]))
def test_affine_residual_iff_parts(seed, eps_fb, eps_nom):
    rng = np.random.default_rng(seed)
    ops = random_system(rng)
    ar = perturbed_affine(rng, ops, eps_fb, eps_nom)
    fb, nom = slp.affine_residual_parts(ops, ar)
    total = slp.affine_subspace_residual(ops, ar)
    tol = 1e-8
    assert (total <= tol) == (fb <= tol and nom <= tol)
    assert total == pytest.approx(max(fb, nom), rel=1e-9, abs=1e-12)


def test_decoupling_trivial(bench_sys):
    ops = build_horizon_operators(bench_sys, 4)
    tr = slp.toeplitz_from_gain(bench_sys, [[-0.5, -0.5]], 4)
    ar = slp.AffineResponse.from_toeplitz(tr, np.zeros(10), np.zeros(5))
    e, z, res = slp.verify_decoupling(ops, ar, np.zeros(8), np.zeros(2))
    assert not np.any(e) and all(v == 0.0 for v in res.values())


def test_decoupling_scalar(scalar_ops):
    ops = scalar_ops(1.0, 1.0, 1)
    tr = slp.toeplitz_from_gain(ops.sys, [[-0.5]], 1)
    ar = slp.AffineResponse.from_toeplitz(tr, np.zeros(2), np.zeros(2))
    e, _, res = slp.verify_decoupling(ops, ar, [0.1], [0.0])
    assert np.allclose(e, ar.phi_e @ np.r_[0.0, 0.1])
    assert np.allclose(e, [0.0, 0.1])
    assert max(res.values()) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_decoupling_on_benchmark(seed):
    rng = np.random.default_rng(seed)
    sys = LtiSystem(A_BENCH, B_BENCH)
    ops = build_horizon_operators(sys, 10)
    ub = list(0.3 * rng.normal(size=(10, 1, 2))) + [np.zeros((1, 2))]
    xb = [np.eye(2)]
    for k in range(10):
        xb.append(A_BENCH @ xb[k] + B_BENCH @ ub[k])
    phi_v = rng.normal(size=11)
    phi_z, _ = slp.nominal_offsets(ops, phi_v)
    ar = slp.AffineResponse.from_toeplitz(slp.ToeplitzResponse(np.array(xb), np.array(ub)),
                                          phi_z, phi_v)
    assert slp.affine_subspace_residual(ops, ar) <= 1e-10 * max(1, np.abs(ar.phi_e).max())
    _, _, res = slp.verify_decoupling(ops, ar, rng.uniform(-0.1, 0.1, 20), rng.normal(size=2))
    assert max(res.values()) <= 1e-8


def test_affine_json_round_trip(bench_sys):
    ops = build_horizon_operators(bench_sys, 2)
    phi_z, dz = slp.nominal_offsets(ops, [0.1, 0.2, 0.0], [0.5, 0.5])
    ar = slp.AffineResponse.from_toeplitz(slp.toeplitz_from_gain(bench_sys, [[-1, 0]], 2),
                                          phi_z, [0.1, 0.2, 0.0], dz)
    back = slp.AffineResponse.from_dict(json.loads(json.dumps(ar.to_dict())))
    for f in ("phi_z", "phi_v", "phi_e", "phi_k", "delta_z"):
        assert np.array_equal(getattr(back, f), getattr(ar, f))


def test_blt_inverse_matches_dense(rng):
    L = np.tril(rng.normal(size=(9, 9))) + 3 * np.eye(9)
    assert np.allclose(slp.blt_inverse(L, 3), np.linalg.inv(L))
