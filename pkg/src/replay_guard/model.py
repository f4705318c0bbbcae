"""Plant, watermark, controller, and closed-loop data types.

The objects here are immutable value types over plain numpy arrays.  A
discrete-time LTI plant

    x_{k+1} = A x_k + B u_k + D w_k,      y_k = C x_k + v_k,

is driven by a control input that carries an additive Gaussian watermark
``Δu_k ~ N(0, U)``, and is placed in feedback with a strictly proper
full-order dynamic output-feedback controller

    x^c_{k+1} = A_c x^c_k + B_c y_k,      u_k = C_c x^c_k.

Stacking ``[x; x^c]`` gives the closed loop

    X_{k+1} = 𝔸 X_k + 𝔹 [Δu; w; v],      y_k = ℂ X_k + 𝔻 [Δu; w; v],

with 𝔸 = [[A, B C_c], [B_c C, A_c]], 𝔹 = [[B, D, O], [O, O, B_c]],
ℂ = [C, O], 𝔻 = [O, O, I] and joint noise covariance 𝕎 = Diag{U, W, V}.
`build_closed_loop` assembles exactly these blocks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._util import (as_matrix, assert_psd, assert_spd, frozen, inv_spd,
                    min_eig, pd_tolerance, sym)


class DimensionError(ValueError):
    """Matrix dimensions are mutually inconsistent; names the bad block."""


def _require_shape(M: np.ndarray, shape, name: str) -> None:
    if M.shape != tuple(shape):
        raise DimensionError(f"{name}: expected shape {tuple(shape)}, got {M.shape}")


@dataclass(frozen=True)
class PlantModel:
    """Open-loop LTI plant with process/measurement noise covariances.

    Attributes:
        A: state matrix, (n_x, n_x).
        B: input matrix, (n_x, n_u).
        C: output matrix, (n_y, n_x).
        D: disturbance loading, (n_x, n_w).
        W: process-noise covariance, (n_w, n_w), symmetric positive definite.
        V: measurement-noise covariance, (n_y, n_y), symmetric positive definite.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    W: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        n_x = A.shape[0]
        _require_shape(A, (n_x, n_x), "A")
        B = as_matrix(self.B, "B")
        if B.shape[0] != n_x:
            raise DimensionError(f"B: expected {n_x} rows, got {B.shape[0]}")
        C = as_matrix(self.C, "C")
        if C.shape[1] != n_x:
            raise DimensionError(f"C: expected {n_x} columns, got {C.shape[1]}")
        D = as_matrix(self.D, "D")
        if D.shape[0] != n_x:
            raise DimensionError(f"D: expected {n_x} rows, got {D.shape[0]}")
        W = as_matrix(self.W, "W")
        _require_shape(W, (D.shape[1], D.shape[1]), "W")
        V = as_matrix(self.V, "V")
        _require_shape(V, (C.shape[0], C.shape[0]), "V")
        assert_spd(W, "W")
        assert_spd(V, "V")
        for name, M in (("A", A), ("B", B), ("C", C), ("D", D), ("W", W), ("V", V)):
            object.__setattr__(self, name, frozen(M))

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def n_w(self) -> int:
        return self.D.shape[1]


@dataclass(frozen=True)
class WatermarkSpec:
    """Watermark covariance ``U`` and its inverse ``Gamma``.

    ``U`` must be positive semidefinite.  ``Gamma`` is formed automatically
    when ``U`` is positive definite; for singular ``U`` (e.g. the zero
    watermark used as a baseline) ``Gamma`` is ``None`` and operations that
    need the inverse covariance raise.
    """

    U: np.ndarray
    Gamma: np.ndarray | None = None

    def __post_init__(self):
        U = as_matrix(self.U, "U")
        _require_shape(U, (U.shape[0], U.shape[0]), "U")
        assert_psd(U, "U")
        object.__setattr__(self, "U", frozen(U))
        if self.Gamma is None:
            if min_eig(U) > pd_tolerance(U):
                object.__setattr__(self, "Gamma", frozen(inv_spd(U)))
        else:
            G = as_matrix(self.Gamma, "Gamma")
            _require_shape(G, U.shape, "Gamma")
            scale = max(float(np.abs(U).max()), 1e-300)
            if np.abs(G @ U - np.eye(U.shape[0])).max() > 1e-8 * max(1.0, scale):
                raise ValueError("Gamma is not the inverse of U (relative error > 1e-8)")
            object.__setattr__(self, "Gamma", frozen(G))

    @property
    def n_u(self) -> int:
        return self.U.shape[0]

    def require_gamma(self) -> np.ndarray:
        if self.Gamma is None:
            raise ValueError("watermark covariance U is singular; Gamma unavailable")
        return self.Gamma


@dataclass(frozen=True)
class DynamicController:
    """Full-order strictly proper output-feedback compensator.

    The feedthrough term is fixed to zero: ``u_k = C_c x^c_k`` uses only the
    current controller state, which keeps the closed-loop output equation
    free of an algebraic loop.
    """

    A_c: np.ndarray
    B_c: np.ndarray
    C_c: np.ndarray

    def __post_init__(self):
        A_c = as_matrix(self.A_c, "A_c")
        n_c = A_c.shape[0]
        _require_shape(A_c, (n_c, n_c), "A_c")
        B_c = as_matrix(self.B_c, "B_c")
        if B_c.shape[0] != n_c:
            raise DimensionError(f"B_c: expected {n_c} rows, got {B_c.shape[0]}")
        C_c = as_matrix(self.C_c, "C_c")
        if C_c.shape[1] != n_c:
            raise DimensionError(f"C_c: expected {n_c} columns, got {C_c.shape[1]}")
        object.__setattr__(self, "A_c", frozen(A_c))
        object.__setattr__(self, "B_c", frozen(B_c))
        object.__setattr__(self, "C_c", frozen(C_c))

    @property
    def n_c(self) -> int:
        return self.A_c.shape[0]

    @property
    def D_c(self) -> np.ndarray:
        # fixed to zero by construction
        return np.zeros((self.C_c.shape[0], self.B_c.shape[1]))


@dataclass(frozen=True)
class ClosedLoopSystem:
    """Augmented realization ``(𝔸, 𝔹, ℂ, 𝔻, 𝕎)`` with the watermark channel."""

    Abig: np.ndarray
    Bbig: np.ndarray
    Cbig: np.ndarray
    Dbig: np.ndarray
    Wbig: np.ndarray
    n_x: int
    n_u: int
    n_w: int
    n_y: int

    def __post_init__(self):
        for name in ("Abig", "Bbig", "Cbig", "Dbig", "Wbig"):
            object.__setattr__(self, name, frozen(as_matrix(getattr(self, name), name)))

    @property
    def n(self) -> int:
        """Augmented state dimension 2 n_x."""
        return self.Abig.shape[0]

    def Wbig_inv(self) -> np.ndarray:
        """Blockwise inverse blkdiag(Γ, W⁻¹, V⁻¹) of the joint noise covariance."""
        nu, nw = self.n_u, self.n_w
        blocks = [self.Wbig[:nu, :nu], self.Wbig[nu:nu + nw, nu:nu + nw],
                  self.Wbig[nu + nw:, nu + nw:]]
        return scipy.linalg.block_diag(*[inv_spd(b) for b in blocks])


def build_closed_loop(plant: PlantModel, ctrl: DynamicController,
                      wm: WatermarkSpec) -> ClosedLoopSystem:
    """Assemble the watermarked closed loop of plant and dynamic controller.

    Args:
        plant: open-loop model.
        ctrl: full-order controller (requires ``ctrl.n_c == plant.n_x``).
        wm: watermark covariance spec (requires ``wm.n_u == plant.n_u``).

    Returns:
        ClosedLoopSystem with blocks

            𝔸 = [[A, B C_c], [B_c C, A_c]],   𝔹 = [[B, D, O], [O, O, B_c]],
            ℂ = [C, O],                        𝔻 = [O, O, I],
            𝕎 = Diag{U, W, V}.

    Raises:
        DimensionError: if any block dimension disagrees, naming the block.
    """
    n_x, n_u, n_y, n_w = plant.n_x, plant.n_u, plant.n_y, plant.n_w
    if ctrl.n_c != n_x:
        raise DimensionError(f"A_c: controller order {ctrl.n_c} != plant order {n_x}")
    if ctrl.B_c.shape[1] != n_y:
        raise DimensionError(f"B_c: expected {n_y} columns, got {ctrl.B_c.shape[1]}")
    if ctrl.C_c.shape[0] != n_u:
        raise DimensionError(f"C_c: expected {n_u} rows, got {ctrl.C_c.shape[0]}")
    if wm.n_u != n_u:
        raise DimensionError(f"U: expected shape {(n_u, n_u)}, got {wm.U.shape}")

    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    Abig = np.block([[A, B @ ctrl.C_c], [ctrl.B_c @ C, ctrl.A_c]])
    Bbig = np.block([
        [B, D, np.zeros((n_x, n_y))],
        [np.zeros((n_x, n_u)), np.zeros((n_x, n_w)), ctrl.B_c],
    ])
    Cbig = np.hstack([C, np.zeros((n_y, n_x))])
    Dbig = np.hstack([np.zeros((n_y, n_u)), np.zeros((n_y, n_w)), np.eye(n_y)])
    Wbig = scipy.linalg.block_diag(wm.U, plant.W, plant.V)
    return ClosedLoopSystem(Abig, Bbig, Cbig, Dbig, Wbig,
                            n_x=n_x, n_u=n_u, n_w=n_w, n_y=n_y)


def spectral_radius(M) -> float:
    """Largest absolute eigenvalue of a square matrix.

    Raises:
        ValueError: for non-square or non-finite input.
    """
    A = as_matrix(M, "M")
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"M must be square, got shape {A.shape}")
    if A.shape[0] == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvals(A)).max())


def default_regularization(plant: PlantModel) -> float:
    """Scale-aware default for the measurement-channel regularizer ε."""
    return 1e-8 * max(1.0, float(np.trace(plant.W)) / plant.n_w)


def regularized_noise(wm: WatermarkSpec, plant: PlantModel, eps: float) -> np.ndarray:
    """Regularized joint covariance 𝕎̃ = Diag{U, W, ε·I}.

    The third (measurement) channel covariance is replaced by ``eps * I`` so
    that the augmented estimator's process noise stays invertible even though
    the controller state itself is noiseless.

    Raises:
        ValueError: if ``eps <= 0``.
    """
    if not np.isscalar(eps) or not np.isfinite(eps) or eps <= 0:
        raise ValueError(f"eps must be a positive scalar, got {eps!r}")
    return scipy.linalg.block_diag(wm.U, plant.W, float(eps) * np.eye(plant.n_y))


# ---------------------------------------------------------------------------
# JSON serialization (row-major matrix arrays with explicit dimensions)
# ---------------------------------------------------------------------------

def _mat(M: np.ndarray) -> list:
    return np.asarray(M, dtype=float).tolist()


def plant_to_dict(plant: PlantModel) -> dict:
    return {
        "n_x": plant.n_x, "n_u": plant.n_u, "n_y": plant.n_y, "n_w": plant.n_w,
        "A": _mat(plant.A), "B": _mat(plant.B), "C": _mat(plant.C),
        "D": _mat(plant.D), "W": _mat(plant.W), "V": _mat(plant.V),
    }


def plant_from_dict(d: dict) -> PlantModel:
    plant = PlantModel(A=d["A"], B=d["B"], C=d["C"], D=d["D"], W=d["W"], V=d["V"])
    for key in ("n_x", "n_u", "n_y", "n_w"):
        if key in d and int(d[key]) != getattr(plant, key):
            raise DimensionError(f"{key}: declared {d[key]}, matrices give "
                                 f"{getattr(plant, key)}")
    return plant


def controller_to_dict(ctrl: DynamicController) -> dict:
    return {"n_c": ctrl.n_c, "A_c": _mat(ctrl.A_c), "B_c": _mat(ctrl.B_c),
            "C_c": _mat(ctrl.C_c)}


def controller_from_dict(d: dict) -> DynamicController:
    return DynamicController(A_c=d["A_c"], B_c=d["B_c"], C_c=d["C_c"])


def watermark_to_dict(wm: WatermarkSpec) -> dict:
    return {"n_u": wm.n_u, "U": _mat(wm.U)}


def watermark_from_dict(d: dict) -> WatermarkSpec:
    return WatermarkSpec(U=d["U"])


def to_json(obj, path=None) -> str:
    """Serialize a plant/controller/watermark (or dict of them) to JSON text."""
    converters = {PlantModel: plant_to_dict, DynamicController: controller_to_dict,
                  WatermarkSpec: watermark_to_dict}
    if type(obj) in converters:
        payload = converters[type(obj)](obj)
    elif isinstance(obj, dict):
        payload = {k: converters[type(v)](v) if type(v) in converters else v
                   for k, v in obj.items()}
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text
