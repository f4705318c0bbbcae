"""Data-type validation, closed-loop assembly, and serialization tests."""
import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import THREE_TANK_A, THREE_TANK_B, random_stable_pair
from replay_guard.model import (
    ClosedLoopSystem, DimensionError, DynamicController, PlantModel,
    WatermarkSpec, build_closed_loop, controller_from_dict, controller_to_dict,
    default_regularization, plant_from_dict, plant_to_dict, regularized_noise,
    spectral_radius, to_json, watermark_from_dict, watermark_to_dict,
)


def _block_power_radius(M, iters=4000, seed=7):
    """Independent spectral-radius oracle: two-vector subspace iteration.

    Tracks the dominant 2-dimensional invariant subspace (so complex pairs
    converge) and reads the modulus off the projected 2×2 matrix via the
    quadratic formula.
    """
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((M.shape[0], 2)))
    for _ in range(iters):
        Q, _ = np.linalg.qr(M @ Q)
    T = Q.T @ M @ Q
    tr, det = T[0, 0] + T[1, 1], T[0, 0] * T[1, 1] - T[0, 1] * T[1, 0]
    disc = tr * tr - 4.0 * det
    if disc >= 0:
        roots = [(tr + np.sqrt(disc)) / 2.0, (tr - np.sqrt(disc)) / 2.0]
        return max(abs(r) for r in roots)
    return float(np.sqrt(det))  # complex pair: |λ|² = det


# ---------------------------------------------------------------------------
# PlantModel / WatermarkSpec / DynamicController validation
# ---------------------------------------------------------------------------

def test_plant_dimension_errors_name_offending_block():
    ok = dict(A=np.eye(2), B=np.ones((2, 1)), C=np.ones((1, 2)),
              D=np.eye(2), W=np.eye(2), V=np.eye(1))
    PlantModel(**ok)
    with pytest.raises(DimensionError, match="B"):
        PlantModel(**{**ok, "B": np.ones((3, 1))})
    with pytest.raises(DimensionError, match="C"):
        PlantModel(**{**ok, "C": np.ones((1, 3))})
    with pytest.raises(DimensionError, match="W"):
        PlantModel(**{**ok, "W": np.eye(3)})
    with pytest.raises(DimensionError, match="V"):
        PlantModel(**{**ok, "V": np.eye(2)})


def test_plant_requires_spd_noise():
    base = dict(A=np.eye(1), B=np.eye(1), C=np.eye(1), D=np.eye(1))
    with pytest.raises(ValueError, match="W"):
        PlantModel(**base, W=np.array([[-1.0]]), V=np.eye(1))
    with pytest.raises(ValueError, match="V"):
        PlantModel(**base, W=np.eye(1), V=np.array([[0.0]]))


def test_plant_rejects_nonfinite():
    with pytest.raises(ValueError):
        PlantModel(A=np.array([[np.nan]]), B=np.eye(1), C=np.eye(1),
                   D=np.eye(1), W=np.eye(1), V=np.eye(1))


def test_plant_arrays_are_frozen():
    p = PlantModel(A=np.eye(1), B=np.eye(1), C=np.eye(1), D=np.eye(1),
                   W=np.eye(1), V=np.eye(1))
    with pytest.raises(ValueError):
        p.A[0, 0] = 2.0


def test_watermark_gamma_is_inverse():
    U = np.array([[2.0, 0.5], [0.5, 1.0]])
    wm = WatermarkSpec(U=U)
    assert np.abs(wm.Gamma @ U - np.eye(2)).max() < 1e-10
    assert wm.require_gamma() is wm.Gamma


def test_watermark_singular_has_no_gamma():
    wm = WatermarkSpec(U=np.zeros((2, 2)))
    assert wm.Gamma is None
    with pytest.raises(ValueError):
        wm.require_gamma()


def test_watermark_rejects_wrong_gamma():
    with pytest.raises(ValueError):
        WatermarkSpec(U=np.eye(2), Gamma=2 * np.eye(2))


def test_watermark_rejects_indefinite():
    with pytest.raises(ValueError):
        WatermarkSpec(U=np.array([[1.0, 0.0], [0.0, -0.1]]))


def test_controller_feedthrough_is_zero():
    c = DynamicController(A_c=np.eye(2), B_c=np.ones((2, 1)), C_c=np.ones((1, 2)))
    assert np.all(c.D_c == 0.0)
    assert c.D_c.shape == (1, 1)
    assert c.n_c == 2


def test_controller_dimension_errors():
    with pytest.raises(DimensionError, match="B_c"):
        DynamicController(A_c=np.eye(2), B_c=np.ones((3, 1)), C_c=np.ones((1, 2)))
    with pytest.raises(DimensionError, match="C_c"):
        DynamicController(A_c=np.eye(2), B_c=np.ones((2, 1)), C_c=np.ones((1, 3)))


# ---------------------------------------------------------------------------
# build_closed_loop
# ---------------------------------------------------------------------------

def test_zero_controller_block_structure():
    plant = PlantModel(A=[[0.5]], B=[[1.0]], C=[[1.0]], D=[[1.0]],
                       W=[[1.0]], V=[[1.0]])
    ctrl = DynamicController(A_c=[[0.0]], B_c=[[0.0]], C_c=[[0.0]])
    loop = build_closed_loop(plant, ctrl, WatermarkSpec(U=[[1.0]]))
    assert np.allclose(loop.Abig, [[0.5, 0.0], [0.0, 0.0]])
    assert np.allclose(loop.Cbig, [[1.0, 0.0]])
    assert np.allclose(loop.Dbig, [[0.0, 0.0, 1.0]])


def test_three_tank_closed_loop_shape(three_tank):
    ctrl = DynamicController(A_c=np.zeros((3, 3)), B_c=np.zeros((3, 3)),
                             C_c=np.zeros((4, 3)))
    loop = build_closed_loop(three_tank, ctrl, WatermarkSpec(U=0.1 * np.eye(4)))
    assert loop.Abig.shape == (6, 6)
    assert np.allclose(loop.Abig[:3, :3], THREE_TANK_A)
    assert loop.Bbig.shape == (6, 10)
    assert np.allclose(loop.Bbig[:3, :4], THREE_TANK_B)


def test_build_closed_loop_dimension_errors(three_tank):
    wm = WatermarkSpec(U=np.eye(4))
    with pytest.raises(DimensionError, match="A_c"):
        build_closed_loop(three_tank, DynamicController(
            A_c=np.eye(2), B_c=np.zeros((2, 3)), C_c=np.zeros((4, 2))), wm)
    with pytest.raises(DimensionError, match="B_c"):
        build_closed_loop(three_tank, DynamicController(
            A_c=np.eye(3), B_c=np.zeros((3, 2)), C_c=np.zeros((4, 3))), wm)
    with pytest.raises(DimensionError, match="C_c"):
        build_closed_loop(three_tank, DynamicController(
            A_c=np.eye(3), B_c=np.zeros((3, 3)), C_c=np.zeros((2, 3))), wm)
    with pytest.raises(DimensionError, match="U"):
        build_closed_loop(three_tank, DynamicController(
            A_c=np.eye(3), B_c=np.zeros((3, 3)), C_c=np.zeros((4, 3))),
            WatermarkSpec(U=np.eye(2)))


def test_closed_loop_matches_componentwise_simulation():
    # stepping the augmented realization must equal stepping plant and
    # controller separately, for any noise draw, to machine precision
    plant, ctrl = random_stable_pair(n_x=3, n_u=2, n_y=2, n_w=2, seed=5)
    wm = WatermarkSpec(U=0.3 * np.eye(2))
    loop = build_closed_loop(plant, ctrl, wm)
    rng = np.random.default_rng(42)
    x = rng.standard_normal(3)
    xc = rng.standard_normal(3)
    X = np.concatenate([x, xc])
    for _ in range(20):
        du = rng.standard_normal(2)
        w = rng.standard_normal(2)
        v = rng.standard_normal(2)
        noise = np.concatenate([du, w, v])
        # componentwise: u = C_c x^c + Δu enters the plant, y enters controller
        y = plant.C @ x + v
        u = ctrl.C_c @ xc + du
        x_next = plant.A @ x + plant.B @ u + plant.D @ w
        xc_next = ctrl.A_c @ xc + ctrl.B_c @ y
        y_loop = loop.Cbig @ X + loop.Dbig @ noise
        X = loop.Abig @ X + loop.Bbig @ noise
        assert np.abs(y_loop - y).max() < 1e-13
        x, xc = x_next, xc_next
        assert np.abs(X - np.concatenate([x, xc])).max() < 1e-12


def test_long_run_output_covariance_matches_lyapunov():
    # stationary covariance oracle: discrete Lyapunov solve for the state,
    # then ℂ𝕏ℂᵀ + 𝔻𝕎𝔻ᵀ for the output
    plant, ctrl = random_stable_pair(n_x=2, n_u=1, n_y=1, n_w=1, seed=1)
    wm = WatermarkSpec(U=np.array([[0.5]]))
    loop = build_closed_loop(plant, ctrl, wm)
    Xss = scipy.linalg.solve_discrete_lyapunov(
        loop.Abig, loop.Bbig @ loop.Wbig @ loop.Bbig.T)
    target = loop.Cbig @ Xss @ loop.Cbig.T + loop.Dbig @ loop.Wbig @ loop.Dbig.T

    steps = 10 ** 6
    rng = np.random.default_rng(11)
    chol = np.linalg.cholesky(loop.Wbig)
    noise = rng.standard_normal((steps, loop.Wbig.shape[0])) @ chol.T
    X = np.zeros(loop.Abig.shape[0])
    acc = 0.0
    burn = 200
    A_, B_, C_, D_ = loop.Abig, loop.Bbig, loop.Cbig, loop.Dbig
    for k in range(steps):
        y = C_ @ X + D_ @ noise[k]
        if k >= burn:
            acc += y[0] * y[0]
        X = A_ @ X + B_ @ noise[k]
    emp = acc / (steps - burn)
    assert abs(emp - target[0, 0]) <= 0.05 * target[0, 0]


def test_build_closed_loop_deterministic(three_tank):
    ctrl = DynamicController(A_c=0.1 * np.eye(3), B_c=0.2 * np.ones((3, 3)),
                             C_c=0.3 * np.ones((4, 3)))
    wm = WatermarkSpec(U=0.1 * np.eye(4))
    a = build_closed_loop(three_tank, ctrl, wm)
    b = build_closed_loop(three_tank, ctrl, wm)
    for name in ("Abig", "Bbig", "Cbig", "Dbig", "Wbig"):
        ma, mb = getattr(a, name), getattr(b, name)
        assert ma.tobytes() == mb.tobytes()


def test_wbig_inverse_is_blockwise():
    plant, ctrl = random_stable_pair(n_x=2, n_u=2, n_y=2, n_w=2, seed=3)
    U = np.array([[0.4, 0.1], [0.1, 0.3]])
    wm = WatermarkSpec(U=U)
    loop = build_closed_loop(plant, ctrl, wm)
    expect = scipy.linalg.block_diag(
        wm.Gamma, np.linalg.inv(plant.W), np.linalg.inv(plant.V))
    got = loop.Wbig_inv()
    assert np.abs(got - expect).max() <= 1e-8 * max(1.0, np.abs(expect).max())


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=3), st.integers(min_value=1, max_value=3),
       st.integers(min_value=1, max_value=3), st.integers(min_value=0, max_value=10**6))
def test_closed_loop_block_structure_property(n_x, n_u, n_y, seed):
    rng = np.random.default_rng(seed)
    plant = PlantModel(A=rng.standard_normal((n_x, n_x)),
                       B=rng.standard_normal((n_x, n_u)),
                       C=rng.standard_normal((n_y, n_x)),
                       D=rng.standard_normal((n_x, n_x)),
                       W=np.eye(n_x), V=np.eye(n_y))
    ctrl = DynamicController(A_c=rng.standard_normal((n_x, n_x)),
                             B_c=rng.standard_normal((n_x, n_y)),
                             C_c=rng.standard_normal((n_u, n_x)))
    wm = WatermarkSpec(U=np.eye(n_u))
    loop = build_closed_loop(plant, ctrl, wm)
    assert np.allclose(loop.Abig[:n_x, :n_x], plant.A)
    assert np.allclose(loop.Abig[:n_x, n_x:], plant.B @ ctrl.C_c)
    assert np.allclose(loop.Abig[n_x:, :n_x], ctrl.B_c @ plant.C)
    assert np.allclose(loop.Abig[n_x:, n_x:], ctrl.A_c)
    assert np.allclose(loop.Cbig, np.hstack([plant.C, np.zeros((n_y, n_x))]))
    assert np.all(loop.Wbig == scipy.linalg.block_diag(wm.U, plant.W, plant.V))


# ---------------------------------------------------------------------------
# spectral_radius
# ---------------------------------------------------------------------------

def test_spectral_radius_diagonal():
    assert spectral_radius(np.diag([0.5, -0.9])) == pytest.approx(0.9, abs=1e-8)


def test_spectral_radius_nilpotent():
    assert spectral_radius([[0.0, 1.0], [0.0, 0.0]]) == pytest.approx(0.0, abs=1e-8)


def test_spectral_radius_matches_subspace_iteration():
    rng = np.random.default_rng(123)
    for _ in range(5):
        M = rng.standard_normal((5, 5))
        assert spectral_radius(M) == pytest.approx(_block_power_radius(M), abs=1e-6)


def test_spectral_radius_rejects_bad_input():
    with pytest.raises(ValueError):
        spectral_radius(np.ones((2, 3)))
    with pytest.raises(ValueError):
        spectral_radius([[np.inf, 0.0], [0.0, 1.0]])


# ---------------------------------------------------------------------------
# regularized_noise
# ---------------------------------------------------------------------------

def test_regularized_noise_scalar_blocks():
    plant = PlantModel(A=[[0.5]], B=[[1.0]], C=[[1.0]], D=[[1.0]],
                       W=[[1.0]], V=[[1.0]])
    out = regularized_noise(WatermarkSpec(U=[[1.0]]), plant, 1e-8)
    assert np.allclose(out, np.diag([1.0, 1.0, 1e-8]))


def test_regularized_noise_three_tank(three_tank):
    out = regularized_noise(WatermarkSpec(U=0.1 * np.eye(4)), three_tank, 1e-8)
    assert out.shape == (10, 10)
    assert np.linalg.eigvalsh(out)[0] == pytest.approx(1e-8, rel=1e-6)


def test_regularized_noise_structural_identity(three_tank):
    wm = WatermarkSpec(U=0.1 * np.eye(4))
    out = regularized_noise(wm, three_tank, 1e-4)
    rebuilt = scipy.linalg.block_diag(wm.U, three_tank.W, 1e-4 * np.eye(3))
    assert np.all(out == rebuilt)


def test_regularized_noise_rejects_nonpositive_eps(three_tank):
    wm = WatermarkSpec(U=np.eye(4))
    for bad in (0.0, -1.0, np.nan):
        with pytest.raises(ValueError):
            regularized_noise(wm, three_tank, bad)


def test_default_regularization_scales_with_noise(three_tank):
    # trace(W)/n_w = 1e-3 < 1, so the floor applies
    assert default_regularization(three_tank) == pytest.approx(1e-8)
    big = PlantModel(A=THREE_TANK_A, B=THREE_TANK_B, C=np.eye(3), D=np.eye(3),
                     W=300.0 * np.eye(3), V=np.eye(3))
    assert default_regularization(big) == pytest.approx(1e-8 * 300.0)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def test_plant_json_roundtrip(three_tank):
    d = plant_to_dict(three_tank)
    back = plant_from_dict(d)
    for name in ("A", "B", "C", "D", "W", "V"):
        assert np.allclose(getattr(back, name), getattr(three_tank, name))
    assert d["n_x"] == 3 and d["n_u"] == 4


def test_plant_from_dict_checks_declared_dims(three_tank):
    d = plant_to_dict(three_tank)
    d["n_u"] = 7
    with pytest.raises(DimensionError, match="n_u"):
        plant_from_dict(d)


def test_controller_and_watermark_roundtrip():
    ctrl = DynamicController(A_c=[[0.2, 0.0], [0.1, 0.3]],
                             B_c=[[1.0], [0.5]], C_c=[[1.0, -1.0]])
    back = controller_from_dict(controller_to_dict(ctrl))
    assert np.allclose(back.A_c, ctrl.A_c)
    assert np.allclose(back.B_c, ctrl.B_c)
    assert np.allclose(back.C_c, ctrl.C_c)
    wm = WatermarkSpec(U=[[0.25]])
    back_wm = watermark_from_dict(watermark_to_dict(wm))
    assert np.allclose(back_wm.U, wm.U)
    assert np.allclose(back_wm.Gamma, wm.Gamma)


def test_to_json_writes_file(tmp_path, three_tank):
    path = tmp_path / "plant.json"
    text = to_json(three_tank, path=str(path))
    loaded = json.loads(path.read_text())
    assert json.loads(text) == loaded
    assert loaded["A"][0][0] == 0.96
    assert loaded["B"][2][3] == 21.0


def test_to_json_rejects_unknown_type():
    with pytest.raises(TypeError):
        to_json(42)
