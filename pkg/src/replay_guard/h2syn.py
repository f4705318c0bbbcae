"""H2 dynamic output-feedback synthesis for watermarked loops.

Finds a full-order controller ``(A_c, B_c, C_c)`` minimizing the steady
state output covariance bound ``trace(Ybar)`` of the closed loop driven by
watermark, process, and measurement noise.  The watermark enters through
its inverse covariance ``Gamma``, which appears affinely in the LMIs, so
the same blocks serve both controller synthesis (fixed ``Gamma``) and
watermark optimization (fixed controller).

The nonconvex covariance condition

    Abig Xbb Abig' + Bbig Wbig Bbig' < Xbb,
    Cbig Xbb Cbig' + V < Ybar,

over the augmented covariance bound ``Xbb`` (2n x 2n) is linearized by the
standard congruence / change-of-variables argument.  Partition

    Xbb = [[X, P'], [P, Z]],      Xbb^{-1} = [[Y, S], [S', .]],

so that ``X Y + P' S' = I``, and transform with

    Tcal = [[I, Y], [0, S']],

which maps ``Tcal' Xbb Tcal = [[X, I], [I, Y]]``.  With the controller
variables replaced by

    L = C_c P,    F = S B_c,    Q = Y A X + Y B L + F C X + S A_c P,

both covariance conditions become the LMIs emitted by
``build_synthesis_lmis`` (affine in ``X, Y, Q, F, L, Ybar`` and in
``Gamma``).  The controller is recovered from a solution by factoring
``S P = I - Y X`` (pivoted LU) and inverting the change of variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from ._util import (as_matrix, assert_spd, check_symmetric, dlyap_doubling,
                    frozen, inv_spd, min_eig, sym)
from .model import (ClosedLoopSystem, DimensionError, DynamicController,
                    PlantModel, WatermarkSpec, build_closed_loop,
                    spectral_radius)
from .sdp import (LmiBlockBuilder, LmiProblem, MatrixVariable,
                  SdpNumericalError, SolveOptions, solve)


class H2SynthesisError(RuntimeError):
    """Raised when synthesis post-conditions fail on a solver solution."""


class SynthesisInfeasibleError(H2SynthesisError):
    """The synthesis LMIs admit no strictly feasible point.

    Attributes:
        certificate: lower bound on the infeasibility margin from the
            feasibility phase (how far the best point stays from the cone),
            or None when the solver stopped without a quantitative bound.
    """

    def __init__(self, message: str, certificate: float | None = None):
        super().__init__(message)
        self.certificate = certificate


class ReconstructionSingularError(H2SynthesisError):
    """``I - Y X`` is too ill-conditioned to factor into ``S P``."""


@dataclass(frozen=True)
class SynthesisVariables:
    """Solution of the transformed synthesis LMIs.

    Attributes:
        X: n x n symmetric, plant block of the covariance bound.
        Y: n x n symmetric, plant block of its inverse.
        Q: n x n transformed controller dynamics.
        F: n x n_y transformed output injection (S B_c).
        L: n_u x n transformed state feedback (C_c P).
        Ybar: n_y x n_y symmetric output covariance bound.
    """

    X: np.ndarray
    Y: np.ndarray
    Q: np.ndarray
    F: np.ndarray
    L: np.ndarray
    Ybar: np.ndarray

    def __post_init__(self):
        X = as_matrix(self.X, "X")
        Y = as_matrix(self.Y, "Y")
        check_symmetric(X, "X")
        check_symmetric(Y, "Y")
        n = X.shape[0]
        Q = as_matrix(self.Q, "Q")
        F = as_matrix(self.F, "F")
        L = as_matrix(self.L, "L")
        Ybar = as_matrix(self.Ybar, "Ybar")
        check_symmetric(Ybar, "Ybar")
        if Y.shape != (n, n) or Q.shape != (n, n):
            raise DimensionError("X, Y, Q must share the plant order")
        if F.shape[0] != n or L.shape[1] != n:
            raise DimensionError("F rows and L columns must match the plant order")
        for name, M in (("X", X), ("Y", Y), ("Q", Q), ("F", F), ("L", L),
                        ("Ybar", Ybar)):
            object.__setattr__(self, name, frozen(M))

    @property
    def n_x(self) -> int:
        return self.X.shape[0]

    def coupling(self) -> np.ndarray:
        """The matrix [[X, I], [I, Y]] whose positivity licenses recovery."""
        n = self.n_x
        return np.block([[self.X, np.eye(n)], [np.eye(n), self.Y]])

    def coupling_margin(self) -> float:
        """Smallest eigenvalue of [[X, I], [I, Y]]."""
        return min_eig(self.coupling())


@dataclass(frozen=True)
class SynthesisResult:
    """Reconstructed controller with its certified performance bound.

    Attributes:
        controller: recovered full-order controller.
        Ybar: achieved output covariance bound (matrix).
        h2_cost: trace(Ybar).
        S, P: reconstruction factors with S P = I - Y X.
        variables: the transformed-LMI solution the controller came from.
        diagnostics: solver/verification numbers (objective, iterations,
            closed-loop spectral radius, verified output covariance trace).
    """

    controller: DynamicController
    Ybar: np.ndarray
    h2_cost: float
    S: np.ndarray
    P: np.ndarray
    variables: SynthesisVariables
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "Ybar", frozen(as_matrix(self.Ybar, "Ybar")))
        object.__setattr__(self, "S", frozen(as_matrix(self.S, "S")))
        object.__setattr__(self, "P", frozen(as_matrix(self.P, "P")))


def build_synthesis_lmis(plant: PlantModel, Gamma, Ybar_mode: str = "variable",
                         Ybar_fixed=None, Ubar=None, Ybar_cap: float = None,
                         delta: float = 1e-7) -> LmiProblem:
    """Assemble the transformed H2 synthesis LMIs.

    Args:
        plant: open-loop model.
        Gamma: watermark inverse covariance, symmetric positive definite.
        Ybar_mode: "variable" makes Ybar a decision variable minimized by
            trace; "fixed" freezes it at Ybar_fixed and the problem becomes
            a feasibility search (centered by minimizing trace(X)).
        Ybar_fixed: required when Ybar_mode == "fixed".
        Ubar: optional control-effort bound; adds
            [[Ubar, L, 0], [., X, I], [., ., Y]] >= delta I.
        Ybar_cap: optional scalar cap trace(Ybar) <= Ybar_cap.
        delta: strict-feasibility margin folded into every block.

    Returns:
        LmiProblem over {X, Y, Q, F, L[, Ybar]} with two core blocks:

        (i) covariance:
            [[ [[X,I],[I,Y]], [[AX+BL, A],[Q, YA+FC]], [[B,D,0],[YB,YD,F]] ],
             [ ., [[X,I],[I,Y]], 0 ],
             [ ., ., blkdiag(Gamma, W^-1, V^-1) ]] >= delta I
        (ii) output:
            [[ Ybar, [CX, C], [0,0,I] ],
             [ ., [[X,I],[I,Y]], 0 ],
             [ ., ., blkdiag(Gamma, W^-1, V^-1) ]] >= delta I
    """
    Gamma = as_matrix(Gamma, "Gamma")
    check_symmetric(Gamma, "Gamma")
    assert_spd(Gamma, "Gamma")
    n, nu, ny, nw = plant.n_x, plant.n_u, plant.n_y, plant.n_w
    if Gamma.shape != (nu, nu):
        raise DimensionError(
            f"Gamma: expected shape {(nu, nu)}, got {Gamma.shape}")
    if Ybar_mode not in ("variable", "fixed"):
        raise ValueError(f"unknown Ybar_mode {Ybar_mode!r}")
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    Winv = inv_spd(plant.W)
    Vinv = inv_spd(plant.V)

    X = MatrixVariable("X", n, n, "symmetric")
    Y = MatrixVariable("Y", n, n, "symmetric")
    Q = MatrixVariable("Q", n, n, "full")
    F = MatrixVariable("F", n, ny, "full")
    L = MatrixVariable("L", nu, n, "full")
    variables = [X, Y, Q, F, L]
    Ybar = None
    if Ybar_mode == "variable":
        Ybar = MatrixVariable("Ybar", ny, ny, "symmetric")
        variables.append(Ybar)
    else:
        Ybar_fixed = as_matrix(Ybar_fixed, "Ybar_fixed")
        check_symmetric(Ybar_fixed, "Ybar_fixed")
        if Ybar_fixed.shape != (ny, ny):
            raise DimensionError(
                f"Ybar_fixed: expected shape {(ny, ny)}, got {Ybar_fixed.shape}")

    # covariance LMI: row offsets 0 (2n), 2n (2n), 4n (nu + nw + ny)
    b = LmiBlockBuilder(4 * n + nu + nw + ny, "covariance")
    b.add_term(0, 0, X)
    b.add_const(0, n, np.eye(n))
    b.add_term(n, n, Y)
    b.add_term(0, 2 * n, X, left=A)
    b.add_term(0, 2 * n, L, left=B)
    b.add_const(0, 3 * n, A)
    b.add_term(n, 2 * n, Q)
    b.add_term(n, 3 * n, Y, right=A)
    b.add_term(n, 3 * n, F, right=C)
    b.add_term(2 * n, 2 * n, X)
    b.add_const(2 * n, 3 * n, np.eye(n))
    b.add_term(3 * n, 3 * n, Y)
    b.add_const(0, 4 * n, B)
    b.add_const(0, 4 * n + nu, D)
    b.add_term(n, 4 * n, Y, right=B)
    b.add_term(n, 4 * n + nu, Y, right=D)
    b.add_term(n, 4 * n + nu + nw, F)
    b.add_const(4 * n, 4 * n, Gamma)
    b.add_const(4 * n + nu, 4 * n + nu, Winv)
    b.add_const(4 * n + nu + nw, 4 * n + nu + nw, Vinv)
    blocks = [b.build(variables, shift=delta)]

    # output LMI: row offsets 0 (ny), ny (2n), ny + 2n (nu + nw + ny)
    r1, r2 = ny, ny + 2 * n
    b = LmiBlockBuilder(ny + 2 * n + nu + nw + ny, "output")
    if Ybar is not None:
        b.add_term(0, 0, Ybar)
    else:
        b.add_const(0, 0, Ybar_fixed)
    b.add_term(0, r1, X, left=C)
    b.add_const(0, r1 + n, C)
    b.add_const(0, r2 + nu + nw, np.eye(ny))
    b.add_term(r1, r1, X)
    b.add_const(r1, r1 + n, np.eye(n))
    b.add_term(r1 + n, r1 + n, Y)
    b.add_const(r2, r2, Gamma)
    b.add_const(r2 + nu, r2 + nu, Winv)
    b.add_const(r2 + nu + nw, r2 + nu + nw, Vinv)
    blocks.append(b.build(variables, shift=delta))

    if Ubar is not None:
        Ubar = as_matrix(Ubar, "Ubar")
        check_symmetric(Ubar, "Ubar")
        if Ubar.shape != (nu, nu):
            raise DimensionError(
                f"Ubar: expected shape {(nu, nu)}, got {Ubar.shape}")
        b = LmiBlockBuilder(nu + 2 * n, "input")
        b.add_const(0, 0, Ubar)
        b.add_term(0, nu, L)
        b.add_term(nu, nu, X)
        b.add_const(nu, nu + n, np.eye(n))
        b.add_term(nu + n, nu + n, Y)
        blocks.append(b.build(variables, shift=delta))

    if Ybar_cap is not None:
        if Ybar is None:
            raise ValueError("Ybar_cap requires Ybar_mode='variable'")
        if not Ybar_cap > 0:
            raise ValueError(f"Ybar_cap must be positive, got {Ybar_cap!r}")
        b = LmiBlockBuilder(1, "trace_cap")
        b.add_const(0, 0, [[float(Ybar_cap)]])
        eye = np.eye(ny)
        for i in range(ny):
            b.add_term(0, 0, Ybar, left=-eye[i:i + 1, :], right=eye[:, i:i + 1])
        blocks.append(b.build(variables))

    if Ybar is not None:
        objective = {"Ybar": np.eye(ny)}
    else:
        # feasibility search; pulling trace(X) down keeps the bound tight
        objective = {"X": np.eye(n)}
    return LmiProblem(variables, blocks, objective, "minimize")


def reconstruct_controller(vars: SynthesisVariables,
                           plant: PlantModel) -> tuple:
    """Invert the change of variables to recover the controller.

    Factors ``I - Y X = S P`` by pivoted LU (S = permuted lower factor,
    P = upper factor) and solves the three-factor products for
    ``A_c, B_c, C_c``.

    Returns:
        (DynamicController, S, P).

    Raises:
        ReconstructionSingularError: when ``I - Y X`` has a pivot below
            1e-12 of its norm or condition number above 1e12.
    """
    n = plant.n_x
    if vars.n_x != n:
        raise DimensionError(
            f"variables have order {vars.n_x}, plant has order {n}")
    X, Y, Q, F, L = vars.X, vars.Y, vars.Q, vars.F, vars.L
    M = np.eye(n) - Y @ X
    svals = np.linalg.svd(M, compute_uv=False)
    norm = float(svals[0])
    if svals[-1] <= 0 or norm / svals[-1] > 1e12:
        raise ReconstructionSingularError(
            f"I - YX has condition number above 1e12 (sigma_min={svals[-1]:.3e})")
    perm, low, up = scipy.linalg.lu(M)
    if np.min(np.abs(np.diag(up))) < 1e-12 * norm:
        raise ReconstructionSingularError(
            f"I - YX pivot below 1e-12 of norm {norm:.3e}")
    S = perm @ low
    P = up

    A, B, C = plant.A, plant.B, plant.C
    C_c = np.linalg.solve(P.T, L.T).T
    B_c = np.linalg.solve(S, F)
    mid = Q - Y @ A @ X - Y @ B @ L - F @ C @ X
    A_c = np.linalg.solve(P.T, np.linalg.solve(S, mid).T).T
    ctrl = DynamicController(A_c=A_c, B_c=B_c, C_c=C_c)

    Q_rt = Y @ A @ X + Y @ B @ ctrl.C_c @ P + S @ ctrl.B_c @ C @ X \
        + S @ ctrl.A_c @ P
    resid = np.max(np.abs(Q_rt - Q)) / max(1.0, np.max(np.abs(Q)))
    if resid > 1e-7:
        raise ReconstructionSingularError(
            f"change-of-variables round trip residual {resid:.3e} > 1e-7")
    return ctrl, S, P


def assemble_covariance_bound(vars: SynthesisVariables, S, P) -> np.ndarray:
    """Rebuild the augmented bound Xbb from its transformed blocks.

    Uses Xbb = [[X, P'], [P, Z]] with Z = -P Y S^{-T}, the unique
    completion consistent with X Y + P' S' = I.
    """
    # Z solves Z S' = -P Y  (from the second block row of Xbb Xbb^{-1} = I)
    Z = np.linalg.solve(S, -(P @ vars.Y).T).T
    return np.block([[vars.X, P.T], [P, sym(Z)]])


def solve_h2(plant: PlantModel, wm: WatermarkSpec, Ubar=None,
             Ybar_cap: float = None, delta: float = 1e-7,
             options: Optional[SolveOptions] = None) -> SynthesisResult:
    """Minimize trace(Ybar) over the synthesis LMIs and rebuild the controller.

    Args:
        plant: open-loop model.
        wm: watermark spec; its inverse covariance parameterizes the LMIs.
        Ubar: optional control-effort covariance bound.
        Ybar_cap: optional scalar cap on trace(Ybar).
        delta: strict margin for all LMIs.
        options: solver overrides.

    Returns:
        SynthesisResult whose closed loop is verified stable with
        Lyapunov-evaluated output covariance below Ybar + 1e-5 I.

    Raises:
        SynthesisInfeasibleError: no strictly feasible point (carries the
            feasibility-phase certificate).
        ReconstructionSingularError: controller recovery broke down.
        H2SynthesisError: solver returned but verification failed.
    """
    Gamma = wm.require_gamma()
    problem = build_synthesis_lmis(plant, Gamma, Ybar_mode="variable",
                                   Ubar=Ubar, Ybar_cap=Ybar_cap, delta=delta)
    sol = solve(problem, options)
    if sol.status == "infeasible":
        raise SynthesisInfeasibleError(
            "synthesis LMIs are infeasible", certificate=sol.phase1_certificate)
    if sol.status != "optimal":
        raise SdpNumericalError(
            f"synthesis solve stopped with status {sol.status!r}")
    a = sol.assignments
    vars = SynthesisVariables(X=a["X"], Y=a["Y"], Q=a["Q"], F=a["F"],
                              L=a["L"], Ybar=a["Ybar"])
    ctrl, S, P = reconstruct_controller(vars, plant)

    cl = build_closed_loop(plant, ctrl, wm)
    rho = spectral_radius(cl.Abig)
    if rho >= 1.0:
        raise H2SynthesisError(
            f"reconstructed closed loop unstable (spectral radius {rho:.6f})")
    Xtrue = dlyap_doubling(cl.Abig, sym(cl.Bbig @ cl.Wbig @ cl.Bbig.T))
    out_cov = sym(cl.Cbig @ Xtrue @ cl.Cbig.T + plant.V)
    slack = min_eig(vars.Ybar + 1e-5 * np.eye(plant.n_y) - out_cov)
    if slack < 0:
        raise H2SynthesisError(
            f"Lyapunov verification failed: output covariance exceeds "
            f"Ybar + 1e-5 I by {-slack:.3e}")
    return SynthesisResult(
        controller=ctrl,
        Ybar=vars.Ybar,
        h2_cost=float(np.trace(vars.Ybar)),
        S=S,
        P=P,
        variables=vars,
        diagnostics={
            "objective": sol.objective,
            "iterations": sol.iterations,
            "spectral_radius": rho,
            "output_cov_trace": float(np.trace(out_cov)),
            "verification_slack": float(slack),
        },
    )


def synthesis_to_dict(res: SynthesisResult) -> dict:
    """JSON-ready view of a synthesis result."""
    return {
        "controller": {
            "A_c": res.controller.A_c.tolist(),
            "B_c": res.controller.B_c.tolist(),
            "C_c": res.controller.C_c.tolist(),
        },
        "Ybar": res.Ybar.tolist(),
        "h2_cost": res.h2_cost,
        "diagnostics": dict(res.diagnostics),
    }
