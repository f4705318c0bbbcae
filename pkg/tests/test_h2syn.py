"""Synthesis LMIs: congruence oracle, solve behavior, controller recovery."""
import json
import time

import numpy as np
import pytest
import scipy.linalg

from conftest import random_stable_pair
from replay_guard._util import min_eig, sym
from replay_guard.h2syn import (
    ReconstructionSingularError,
    SynthesisInfeasibleError,
    SynthesisVariables,
    assemble_covariance_bound,
    build_synthesis_lmis,
    reconstruct_controller,
    solve_h2,
    synthesis_to_dict,
)
from replay_guard.model import (
    DimensionError,
    DynamicController,
    PlantModel,
    WatermarkSpec,
    build_closed_loop,
    spectral_radius,
)
from replay_guard.sdp import check_feasible, solve


def _scalar_plant(a, w=1.0, v=1.0):
    return PlantModel(A=np.array([[a]]), B=np.array([[1.0]]),
                      C=np.array([[1.0]]), D=np.array([[1.0]]),
                      W=np.array([[w]]), V=np.array([[v]]))


def _random_spd(rng, n, floor=0.5):
    G = rng.standard_normal((n, n))
    return sym(G @ G.T + floor * np.eye(n))


def _random_plant(rng, n, nu, ny, nw):
    return PlantModel(A=rng.standard_normal((n, n)),
                      B=rng.standard_normal((n, nu)),
                      C=rng.standard_normal((ny, n)),
                      D=rng.standard_normal((n, nw)),
                      W=_random_spd(rng, nw), V=_random_spd(rng, ny))


def _stationary_output_cov(plant, ctrl, wm):
    """Closed-loop output covariance by a scipy Lyapunov solve."""
    cl = build_closed_loop(plant, ctrl, wm)
    Xt = scipy.linalg.solve_discrete_lyapunov(
        cl.Abig, cl.Bbig @ cl.Wbig @ cl.Bbig.T)
    return cl.Cbig @ Xt @ cl.Cbig.T + plant.V


def _round_trip_residual(vars, ctrl, S, P, plant):
    Q_rt = vars.Y @ plant.A @ vars.X + vars.Y @ plant.B @ ctrl.C_c @ P \
        + S @ ctrl.B_c @ plant.C @ vars.X + S @ ctrl.A_c @ P
    return np.abs(Q_rt - vars.Q).max() / max(1.0, np.abs(vars.Q).max())


def test_lmi_blocks_match_congruence_oracle():
    # Draw (plant, controller, augmented covariance) triples, push the
    # covariance through the change of variables, and check that the emitted
    # affine blocks equal the congruence-transformed Schur forms assembled
    # from first principles.
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(1, 4))
        nu = int(rng.integers(1, 4))
        ny = int(rng.integers(1, 4))
        nw = int(rng.integers(1, 4))
        plant = _random_plant(rng, n, nu, ny, nw)
        A_c = rng.standard_normal((n, n))
        B_c = rng.standard_normal((n, ny))
        C_c = rng.standard_normal((nu, n))
        Gamma = _random_spd(rng, nu)
        Ubar = _random_spd(rng, nu)

        Xbb = _random_spd(rng, 2 * n)
        X = sym(Xbb[:n, :n])
        P = Xbb[n:, :n]
        Xinv = np.linalg.inv(Xbb)
        Y = sym(Xinv[:n, :n])
        S = Xinv[:n, n:]
        L = C_c @ P
        F = S @ B_c
        Q = Y @ plant.A @ X + Y @ plant.B @ L + F @ plant.C @ X + S @ A_c @ P
        T = np.block([[np.eye(n), Y], [np.zeros((n, n)), S.T]])

        Abig = np.block([[plant.A, plant.B @ C_c], [B_c @ plant.C, A_c]])
        Bbig = np.block([[plant.B, plant.D, np.zeros((n, ny))],
                         [np.zeros((n, nu + nw)), B_c]])
        Winv = scipy.linalg.block_diag(
            Gamma, np.linalg.inv(plant.W), np.linalg.inv(plant.V))
        m = nu + nw + ny

        problem = build_synthesis_lmis(plant, Gamma, Ubar=Ubar, delta=0.0)
        blocks = {blk.name: blk for blk in problem.blocks}
        vmap = {v.name: v for v in problem.variables}
        Ybar = _random_spd(rng, ny)
        assign = {"X": X, "Y": Y, "Q": Q, "F": F, "L": L, "Ybar": Ybar}

        raw = np.block([
            [Xbb, Abig @ Xbb, Bbig],
            [Xbb @ Abig.T, Xbb, np.zeros((2 * n, m))],
            [Bbig.T, np.zeros((m, 2 * n)), Winv]])
        Tfull = scipy.linalg.block_diag(T, T, np.eye(m))
        want = Tfull.T @ raw @ Tfull
        got = blocks["covariance"].evaluate(assign, vmap)
        assert np.abs(got - want).max() <= 1e-9 * max(1.0, np.abs(want).max())

        Cbig = np.hstack([plant.C, np.zeros((ny, n))])
        Dbig = np.hstack([np.zeros((ny, nu + nw)), np.eye(ny)])
        raw = np.block([
            [Ybar, Cbig @ Xbb, Dbig],
            [Xbb @ Cbig.T, Xbb, np.zeros((2 * n, m))],
            [Dbig.T, np.zeros((m, 2 * n)), Winv]])
        Tfull = scipy.linalg.block_diag(np.eye(ny), T, np.eye(m))
        want = Tfull.T @ raw @ Tfull
        got = blocks["output"].evaluate(assign, vmap)
        assert np.abs(got - want).max() <= 1e-9 * max(1.0, np.abs(want).max())

        Csel = np.hstack([np.zeros((nu, n)), C_c])
        raw = np.block([[Ubar, Csel @ Xbb], [Xbb @ Csel.T, Xbb]])
        Tfull = scipy.linalg.block_diag(np.eye(nu), T)
        want = Tfull.T @ raw @ Tfull
        got = blocks["input"].evaluate(assign, vmap)
        assert np.abs(got - want).max() <= 1e-9 * max(1.0, np.abs(want).max())


def test_zero_controller_variables_infeasible_for_unstable_plant():
    # with Q = Y A X, F = 0, L = 0 the candidate encodes the open loop, and
    # no covariance bound exists for |a| > 1, whatever the scaling of X, Y
    plant = _scalar_plant(1.1)
    problem = build_synthesis_lmis(plant, np.eye(1))
    for x in np.logspace(-2, 4, 7):
        for y in np.logspace(-2, 4, 7):
            assign = {"X": np.array([[x]]), "Y": np.array([[y]]),
                      "Q": np.array([[y * 1.1 * x]]),
                      "F": np.zeros((1, 1)), "L": np.zeros((1, 1)),
                      "Ybar": np.array([[1e9]])}
            assert check_feasible(problem, assign) < 0.0


def test_scalar_solve_matches_minimum_variance_oracle():
    # With no input penalty the best a strictly proper controller can do is
    # cancel the predictable part of the state, leaving the one-step
    # prediction error plus the injected noise:
    #   min E[y^2] = a^2 Sigma + U + W + V    (b = c = d = 1)
    # where Sigma is the stationary prediction-error variance, the positive
    # root of Sigma = a^2 Sigma V / (Sigma + V) + U + W.
    a, U, W, V = 0.5, 1.0, 1.0, 1.0
    q = U + W
    Sigma = 0.5 * ((a ** 2 - 1.0) * V + q
                   + np.sqrt(((1.0 - a ** 2) * V - q) ** 2 + 4.0 * q * V))
    resid = Sigma - a ** 2 * Sigma * V / (Sigma + V) - q
    assert abs(resid) < 1e-12
    oracle = a ** 2 * Sigma + q + V

    plant = _scalar_plant(a, w=W, v=V)
    wm = WatermarkSpec(U=np.array([[U]]))
    res = solve_h2(plant, wm)
    # a feasible bound can only sit above the true optimum, and the solver
    # should close the gap to tolerance
    assert res.h2_cost >= oracle - 1e-8
    assert res.h2_cost <= oracle * (1.0 + 1e-5)

    out_cov = _stationary_output_cov(plant, res.controller, wm)
    out_var = float(out_cov[0, 0])
    assert spectral_radius(build_closed_loop(plant, res.controller, wm).Abig) < 1.0
    assert out_var <= res.h2_cost + 1e-4
    assert out_var >= oracle - 1e-7


def test_three_tank_synthesis(three_tank):
    wm = WatermarkSpec(U=0.1 * np.eye(4))
    start = time.monotonic()
    res = solve_h2(three_tank, wm)
    assert time.monotonic() - start < 30.0

    cl = build_closed_loop(three_tank, res.controller, wm)
    assert spectral_radius(cl.Abig) < 1.0
    out_cov = _stationary_output_cov(three_tank, res.controller, wm)
    assert min_eig(res.Ybar + 1e-4 * np.eye(3) - out_cov) >= 0.0
    assert np.trace(out_cov) <= res.h2_cost + 1e-4

    v = res.variables
    assert v.coupling_margin() >= 0.5e-7
    prod = v.Y @ v.X + res.S @ res.P
    assert np.abs(prod - np.eye(3)).max() <= 1e-7 * max(1.0, np.abs(v.Y @ v.X).max())
    assert _round_trip_residual(v, res.controller, res.S, res.P, three_tank) <= 1e-7

    for key in ("objective", "iterations", "spectral_radius",
                "output_cov_trace", "verification_slack"):
        assert key in res.diagnostics
    assert res.diagnostics["verification_slack"] >= 0.0
    # deterministic solver output for the benchmark plant
    assert res.h2_cost == pytest.approx(102.852249, rel=1e-3)


def test_covariance_bound_reassembly_satisfies_lyapunov(three_tank):
    wm = WatermarkSpec(U=0.1 * np.eye(4))
    res = solve_h2(three_tank, wm)
    Xbb = assemble_covariance_bound(res.variables, res.S, res.P)
    assert min_eig(Xbb) > 0.0

    # the completion really is the inverse's stated block column
    n = 3
    stack = np.vstack([res.variables.Y, res.S.T])
    prod = Xbb @ stack
    scale = max(1.0, np.abs(Xbb).max() * np.abs(stack).max())
    assert np.abs(prod[:n] - np.eye(n)).max() <= 1e-7 * scale
    assert np.abs(prod[n:]).max() <= 1e-7 * scale
    assert np.allclose(Xbb[:n, :n], res.variables.X)

    cl = build_closed_loop(three_tank, res.controller, wm)
    gap = Xbb - cl.Abig @ Xbb @ cl.Abig.T - cl.Bbig @ cl.Wbig @ cl.Bbig.T
    assert min_eig(gap) > -1e-9

    # the reassembled bound dominates the true stationary covariance
    Xtrue = scipy.linalg.solve_discrete_lyapunov(
        cl.Abig, cl.Bbig @ cl.Wbig @ cl.Bbig.T)
    assert min_eig(Xbb - Xtrue) > -1e-9


def test_cost_monotone_in_watermark_strength(three_tank):
    plant = _scalar_plant(0.5)
    h1 = solve_h2(plant, WatermarkSpec(U=np.array([[1.0]]))).h2_cost
    h4 = solve_h2(plant, WatermarkSpec(U=np.array([[4.0]]))).h2_cost
    assert h4 >= h1 - 1e-6
    assert h4 > h1

    t1 = solve_h2(three_tank, WatermarkSpec(U=np.eye(4))).h2_cost
    t4 = solve_h2(three_tank, WatermarkSpec(U=4.0 * np.eye(4))).h2_cost
    assert t4 >= t1 - 1e-6


def test_input_covariance_bound_honored():
    plant = _scalar_plant(0.5)
    wm = WatermarkSpec(U=np.array([[1.0]]))

    def input_var(res):
        cl = build_closed_loop(plant, res.controller, wm)
        Xt = scipy.linalg.solve_discrete_lyapunov(
            cl.Abig, cl.Bbig @ cl.Wbig @ cl.Bbig.T)
        sel = np.hstack([np.zeros((1, 1)), res.controller.C_c])
        return float((sel @ Xt @ sel.T)[0, 0])

    res0 = solve_h2(plant, wm)
    u0 = input_var(res0)
    assert u0 > 0.0

    ub = 0.5 * u0
    res = solve_h2(plant, wm, Ubar=np.array([[ub]]))
    assert input_var(res) <= ub + 1e-6
    # tightening the input budget cannot improve the objective
    assert res.h2_cost >= res0.h2_cost - 1e-8


def test_unstable_plant_needs_input_power():
    plant = _scalar_plant(1.1)
    wm = WatermarkSpec(U=np.array([[1.0]]))
    res = solve_h2(plant, wm)
    assert spectral_radius(build_closed_loop(plant, res.controller, wm).Abig) < 1.0

    with pytest.raises(SynthesisInfeasibleError) as exc_info:
        solve_h2(plant, wm, Ubar=np.array([[1e-12]]))
    assert exc_info.value.certificate is not None
    assert exc_info.value.certificate > 0.0


def test_output_cap_below_noise_floor_infeasible():
    plant = _scalar_plant(0.5)
    with pytest.raises(SynthesisInfeasibleError) as exc_info:
        solve_h2(plant, WatermarkSpec(U=np.array([[1.0]])), Ybar_cap=0.4)
    assert exc_info.value.certificate is not None
    assert exc_info.value.certificate > 0.0


def test_output_cap_above_optimum_stays_feasible():
    plant = _scalar_plant(0.5)
    wm = WatermarkSpec(U=np.array([[1.0]]))
    h = solve_h2(plant, wm).h2_cost
    res = solve_h2(plant, wm, Ybar_cap=1.05 * h)
    assert res.h2_cost <= 1.05 * h + 1e-6
    # two independent solves of the same optimum agree to solver tolerance
    assert res.h2_cost >= h - 1e-6 * max(1.0, h)


def test_reconstruct_zero_middle_gives_zero_controller():
    plant, _ = random_stable_pair(seed=3)
    n = plant.n_x
    vars = SynthesisVariables(X=2.0 * np.eye(n), Y=np.eye(n),
                              Q=plant.A * 2.0, F=np.zeros((n, plant.n_y)),
                              L=np.zeros((plant.n_u, n)),
                              Ybar=np.eye(plant.n_y))
    ctrl, S, P = reconstruct_controller(vars, plant)
    assert np.abs(ctrl.A_c).max() <= 1e-12
    assert np.abs(ctrl.B_c).max() <= 1e-12
    assert np.abs(ctrl.C_c).max() <= 1e-12
    assert np.abs(S @ P - (np.eye(n) - 2.0 * np.eye(n))).max() <= 1e-10


def test_reconstruction_round_trip_random():
    # the round-trip identity is algebra: it holds for any variables with a
    # well-conditioned I - Y X, feasible or not
    rng = np.random.default_rng(11)
    done = 0
    while done < 50:
        n = int(rng.integers(1, 5))
        nu = int(rng.integers(1, 4))
        ny = int(rng.integers(1, 4))
        nw = int(rng.integers(1, 4))
        plant = _random_plant(rng, n, nu, ny, nw)
        X = _random_spd(rng, n)
        Y = _random_spd(rng, n)
        M = np.eye(n) - Y @ X
        if np.linalg.cond(M) > 1e6:
            continue
        vars = SynthesisVariables(X=X, Y=Y, Q=rng.standard_normal((n, n)),
                                  F=rng.standard_normal((n, ny)),
                                  L=rng.standard_normal((nu, n)),
                                  Ybar=np.eye(ny))
        ctrl, S, P = reconstruct_controller(vars, plant)
        assert _round_trip_residual(vars, ctrl, S, P, plant) <= 1e-7
        assert np.abs(S @ P - M).max() <= 1e-10 * max(1.0, np.abs(M).max())
        prod = Y @ X + S @ P
        assert np.abs(prod - np.eye(n)).max() <= 1e-7 * max(1.0, np.abs(Y @ X).max())
        done += 1


def test_reconstruct_singular_coupling_raises():
    plant, _ = random_stable_pair(seed=5)
    n = plant.n_x
    zero_f = np.zeros((n, plant.n_y))
    zero_l = np.zeros((plant.n_u, n))
    eye_y = np.eye(plant.n_y)
    # I - YX identically zero
    vars = SynthesisVariables(X=np.eye(n), Y=np.eye(n), Q=plant.A,
                              F=zero_f, L=zero_l, Ybar=eye_y)
    with pytest.raises(ReconstructionSingularError):
        reconstruct_controller(vars, plant)
    # rank-deficient but nonzero
    vars = SynthesisVariables(X=np.eye(n), Y=np.diag([1.0] + [0.5] * (n - 1)),
                              Q=plant.A, F=zero_f, L=zero_l, Ybar=eye_y)
    with pytest.raises(ReconstructionSingularError):
        reconstruct_controller(vars, plant)


def test_builder_and_solve_validation_errors(three_tank):
    with pytest.raises(DimensionError):
        build_synthesis_lmis(three_tank, np.eye(3))
    with pytest.raises(ValueError):
        build_synthesis_lmis(three_tank, -np.eye(4))
    with pytest.raises(ValueError):
        build_synthesis_lmis(three_tank, np.eye(4), Ybar_mode="bogus")
    with pytest.raises(DimensionError):
        build_synthesis_lmis(three_tank, np.eye(4), Ybar_mode="fixed",
                             Ybar_fixed=np.eye(2))
    with pytest.raises(DimensionError):
        build_synthesis_lmis(three_tank, np.eye(4), Ubar=np.eye(2))
    with pytest.raises(ValueError):
        build_synthesis_lmis(three_tank, np.eye(4), Ybar_cap=-1.0)
    with pytest.raises(ValueError):
        build_synthesis_lmis(three_tank, np.eye(4), Ybar_mode="fixed",
                             Ybar_fixed=np.eye(3), Ybar_cap=5.0)
    # a singular watermark carries no inverse covariance to parameterize with
    with pytest.raises(ValueError):
        solve_h2(three_tank, WatermarkSpec(U=np.zeros((4, 4))))
    # variable order must match the plant
    vars = SynthesisVariables(X=np.eye(2), Y=0.5 * np.eye(2),
                              Q=np.zeros((2, 2)), F=np.zeros((2, 3)),
                              L=np.zeros((4, 2)), Ybar=np.eye(3))
    with pytest.raises(DimensionError):
        reconstruct_controller(vars, three_tank)


def test_fixed_output_bound_feasibility_switch():
    plant = _scalar_plant(0.5)
    wm = WatermarkSpec(U=np.array([[1.0]]))
    h = solve_h2(plant, wm).h2_cost

    bound = np.array([[1.2 * h]])
    prob = build_synthesis_lmis(plant, wm.Gamma, Ybar_mode="fixed",
                                Ybar_fixed=bound)
    sol = solve(prob)
    assert sol.status == "optimal"
    a = sol.assignments
    vars = SynthesisVariables(X=a["X"], Y=a["Y"], Q=a["Q"], F=a["F"],
                              L=a["L"], Ybar=bound)
    ctrl, _, _ = reconstruct_controller(vars, plant)
    cl = build_closed_loop(plant, ctrl, wm)
    assert spectral_radius(cl.Abig) < 1.0
    out_var = float(_stationary_output_cov(plant, ctrl, wm)[0, 0])
    assert out_var <= 1.2 * h + 1e-6

    # a fixed bound below the measurement noise floor cannot be met
    prob = build_synthesis_lmis(plant, wm.Gamma, Ybar_mode="fixed",
                                Ybar_fixed=np.array([[0.4]]))
    sol = solve(prob)
    assert sol.status == "infeasible"


def test_synthesis_result_serializes(three_tank):
    res = solve_h2(three_tank, WatermarkSpec(U=0.1 * np.eye(4)))
    blob = json.dumps(synthesis_to_dict(res))
    back = json.loads(blob)
    assert back["h2_cost"] == pytest.approx(res.h2_cost)
    assert np.asarray(back["controller"]["A_c"]).shape == (3, 3)
    assert np.asarray(back["Ybar"]).shape == (3, 3)
    for key in ("objective", "iterations", "spectral_radius",
                "output_cov_trace", "verification_slack"):
        assert key in back["diagnostics"]
