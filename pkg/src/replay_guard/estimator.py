"""Steady-state Kalman design for the watermarked closed loop.

The defender estimates the augmented state 𝐱 = [x; x^c] from measurements
y = ℂ𝐱 + v.  Because the process noise 𝔹𝐰 and the measurement noise v share
the v channel (𝕊 = 𝔹𝕎𝔻ᵀ = [O; B_c V]), the filter is designed on the
decorrelated system

    𝔸̃ = 𝔸 − 𝒦ℂ,    𝒦 = 𝕊V⁻¹ = [O; B_c],

whose effective process noise 𝔹𝕎̃𝔹ᵀ = Diag{B U Bᵀ + D W Dᵀ, ε B_c B_cᵀ}
uses the regularized covariance 𝕎̃ = Diag{U, W, ε·I} (the exact decorrelated
noise has a singular controller block; ε > 0 restores invertibility).

Two routes produce the same design:

* `riccati_steady` — fixed-point iteration of the filtering Riccati map,
  treated as ground truth;
* `kalman_lmi_design` — the trace-maximization LMI over (𝕡, 𝕐), whose
  feasible 𝕡 are exactly the matrices below the inverse Riccati solution,
  so the optimum recovers it.  This is the optimization-compatible surrogate
  used by the watermark co-design, where Γ = U⁻¹ enters the constraint
  affinely.

Gain conventions: the filter is run in filtered (measurement-update) form,

    x̂_{k|k} = x̂_{k|k−1} + 𝕃 r_k,
    x̂_{k+1|k} = 𝔸 x̂_{k|k} + 𝒦 (y_k − ℂ x̂_{k|k}) + [B Δu_k; O],

so `KalmanDesign.Lbig` stores the filtered gain 𝕃 = 𝕏̄ℂᵀ(ℂ𝕏̄ℂᵀ + V)⁻¹.
The LMI's native unknown is the predictor-form gain 𝕃_pred = 𝕡⁻¹𝕐 = 𝔸̃𝕃,
kept as `L_pred` for diagnostics.

Because the running filter feeds the realized watermark Δu forward, the
innovations it produces are *not* governed by the design covariance 𝕏̄
(which prices Δu as noise): they follow the run covariance

    𝕏_run = M 𝕏_run Mᵀ + Diag{D W Dᵀ, O} + 𝔸̃𝕃V𝕃ᵀ𝔸̃ᵀ,   M = 𝔸̃(I − 𝕃ℂ),

and `innov_cov` = ℂ𝕏_runℂᵀ + V is what the χ² detector must whiten with.
The design-priced variant ℂ𝕏̄ℂᵀ restricted to the plant block is kept as
`innov_cov_design`.  The two are linked exactly by

    𝕏̄ − 𝕏_run = dlyap(M, Diag{B U Bᵀ, ε B_c B_cᵀ}).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._util import dlyap_doubling, frozen, inv_spd, solve_spd, sym
from .model import ClosedLoopSystem, WatermarkSpec
from .sdp import (LmiBlockBuilder, LmiProblem, MatrixVariable, SolveOptions,
                  check_feasible, solve)

__all__ = [
    "KalmanDesign", "EstimationError", "RiccatiConvergenceError",
    "riccati_steady", "kalman_lmi_design", "design_from_riccati",
    "kalman_to_dict",
]


class EstimationError(RuntimeError):
    """Kalman design failed (infeasible LMI or singular covariance)."""


class RiccatiConvergenceError(EstimationError):
    """Riccati fixed-point iteration did not reach tolerance within the cap."""


@dataclass(frozen=True)
class KalmanDesign:
    """Steady-state augmented Kalman filter and the covariances around it.

    Attributes:
        Lbig: filtered gain 𝕃 (2n_x × n_y).
        L_pred: predictor-form gain 𝔸̃𝕃 = 𝕡⁻¹𝕐.
        Xbar: design (predicted-state) covariance 𝕏̄.
        Pbar: 𝕡 = 𝕏̄⁻¹.
        Ybar_lmi: 𝕐 = 𝕡·L_pred (the LMI's linearized gain variable).
        Xe: upper-left n_x×n_x block of 𝕏̄.
        innov_cov_design: C·Xe·Cᵀ + V (innovation covariance if the watermark
            were unknown noise).
        Xrun: steady covariance of the running filter's prediction error,
            which feeds the realized watermark forward.
        innov_cov: 𝒳 = ℂ·Xrun·ℂᵀ + V, the whitening matrix for detection.
        Atilde: 𝔸 − 𝒦ℂ.
        Kbig: 𝒦 = [O; B_c].
        eps: regularizer used in 𝕎̃.
    """

    Lbig: np.ndarray
    L_pred: np.ndarray
    Xbar: np.ndarray
    Pbar: np.ndarray
    Ybar_lmi: np.ndarray
    Xe: np.ndarray
    innov_cov_design: np.ndarray
    Xrun: np.ndarray
    innov_cov: np.ndarray
    Atilde: np.ndarray
    Kbig: np.ndarray
    eps: float

    def __post_init__(self):
        for name in ("Lbig", "L_pred", "Xbar", "Pbar", "Ybar_lmi", "Xe",
                     "innov_cov_design", "Xrun", "innov_cov", "Atilde", "Kbig"):
            object.__setattr__(self, name, frozen(np.asarray(getattr(self, name),
                                                             dtype=float)))


def _split_noise(cl: ClosedLoopSystem, wm: WatermarkSpec, eps: float):
    """Effective noise loading/covariance, dropping a zero watermark channel.

    Returns (Bn, Wn, Wn_inv_blocks) where Wn_inv_blocks is None when U is
    singular (then the LMI route is unavailable unless U = 0 exactly).
    """
    n, nu, nw, ny = cl.n, cl.n_u, cl.n_w, cl.n_y
    V = cl.Wbig[nu + nw:, nu + nw:]
    W = cl.Wbig[nu:nu + nw, nu:nu + nw]
    Bc = cl.Bbig[:, nu + nw:]
    if wm.Gamma is not None:
        Bn = cl.Bbig
        Wn = scipy.linalg.block_diag(wm.U, W, eps * np.eye(ny))
        Wn_inv = scipy.linalg.block_diag(wm.Gamma, inv_spd(W),
                                         (1.0 / eps) * np.eye(ny))
        return Bn, Wn, Wn_inv
    if np.any(wm.U != 0.0):
        return None, None, None
    # zero watermark: drop the Δu columns entirely
    Bn = np.hstack([cl.Bbig[:, nu:nu + nw], Bc])
    Wn = scipy.linalg.block_diag(W, eps * np.eye(ny))
    Wn_inv = scipy.linalg.block_diag(inv_spd(W), (1.0 / eps) * np.eye(ny))
    return Bn, Wn, Wn_inv


def _default_eps(cl: ClosedLoopSystem) -> float:
    W = cl.Wbig[cl.n_u:cl.n_u + cl.n_w, cl.n_u:cl.n_u + cl.n_w]
    return 1e-8 * max(1.0, float(np.trace(W)) / cl.n_w)


def riccati_steady(Atilde, Bnoise, Cbig, Wnoise, V, tol: float = 1e-12,
                   max_iter: int = 100000):
    """Steady predicted covariance and filtered gain by fixed-point iteration.

    Iterates

        Σ = ℂ𝕏ℂᵀ + V,  𝕃 = 𝕏ℂᵀΣ⁻¹,  𝕏⁺ = 𝔸̃(𝕏 − 𝕃Σ𝕃ᵀ)𝔸̃ᵀ + 𝔹ₙ𝕎ₙ𝔹ₙᵀ

    until ‖Δ𝕏‖∞ ≤ tol·max(1, ‖𝕏‖∞) or the iteration cap.

    Returns:
        (Xbar, Lbig): covariance fixed point and filtered gain 𝕏̄ℂᵀΣ⁻¹.

    Raises:
        RiccatiConvergenceError: iteration cap reached before tolerance.
    """
    Atilde = np.asarray(Atilde, dtype=float)
    Bnoise = np.asarray(Bnoise, dtype=float)
    Cbig = np.asarray(Cbig, dtype=float)
    V = np.asarray(V, dtype=float)
    Q = sym(Bnoise @ np.asarray(Wnoise, dtype=float) @ Bnoise.T)
    X = Q.copy()
    for _ in range(int(max_iter)):
        Sigma = Cbig @ X @ Cbig.T + V
        L = solve_spd(Sigma, Cbig @ X).T
        Xf = X - L @ Sigma @ L.T
        X_next = sym(Atilde @ Xf @ Atilde.T + Q)
        if np.abs(X_next - X).max() <= tol * max(1.0, np.abs(X_next).max()):
            Sigma = Cbig @ X_next @ Cbig.T + V
            L = solve_spd(Sigma, Cbig @ X_next).T
            return X_next, L
        X = X_next
    raise RiccatiConvergenceError(
        f"Riccati iteration did not converge within {max_iter} steps")


def _assemble_design(cl: ClosedLoopSystem, wm: WatermarkSpec, eps: float,
                     Xbar, Pbar, Lbig) -> KalmanDesign:
    n, nu, nw, ny = cl.n, cl.n_u, cl.n_w, cl.n_y
    n_x = cl.n_x
    V = cl.Wbig[nu + nw:, nu + nw:]
    W = cl.Wbig[nu:nu + nw, nu:nu + nw]
    D = cl.Bbig[:n_x, nu:nu + nw]
    Bc = cl.Bbig[n_x:, nu + nw:]
    Kbig = np.vstack([np.zeros((n_x, ny)), Bc])
    Atilde = cl.Abig - Kbig @ cl.Cbig
    L_pred = Atilde @ Lbig
    # the LMI's raw 𝕐 is weakly determined at an interior point; rebuild it
    # from the recovered design so 𝕐 = 𝕡·𝕃_pred holds by construction
    Ybar = Pbar @ L_pred
    M = Atilde @ (np.eye(n) - Lbig @ cl.Cbig)
    DWD = np.zeros((n, n))
    DWD[:n_x, :n_x] = D @ W @ D.T
    AL = Atilde @ Lbig
    Xrun = dlyap_doubling(M, DWD + AL @ V @ AL.T)
    Xe = Xbar[:n_x, :n_x]
    C = cl.Cbig[:, :n_x]
    innov_design = sym(C @ Xe @ C.T + V)
    innov_run = sym(cl.Cbig @ Xrun @ cl.Cbig.T + V)
    return KalmanDesign(
        Lbig=Lbig, L_pred=L_pred, Xbar=sym(Xbar), Pbar=sym(Pbar),
        Ybar_lmi=Ybar, Xe=sym(Xe), innov_cov_design=innov_design,
        Xrun=Xrun, innov_cov=innov_run, Atilde=Atilde, Kbig=Kbig,
        eps=float(eps))


def design_from_riccati(cl: ClosedLoopSystem, wm: WatermarkSpec,
                        eps: float | None = None) -> KalmanDesign:
    """Full Kalman design via the Riccati fixed point (any PSD watermark)."""
    eps = _default_eps(cl) if eps is None else float(eps)
    nu, nw = cl.n_u, cl.n_w
    V = cl.Wbig[nu + nw:, nu + nw:]
    Bc = cl.Bbig[cl.n_x:, nu + nw:]
    Kbig = np.vstack([np.zeros((cl.n_x, cl.n_y)), Bc])
    Atilde = cl.Abig - Kbig @ cl.Cbig
    Bn = cl.Bbig
    Wn = scipy.linalg.block_diag(wm.U, cl.Wbig[nu:nu + nw, nu:nu + nw],
                                 eps * np.eye(cl.n_y))
    Xbar, Lbig = riccati_steady(Atilde, Bn, cl.Cbig, Wn, V)
    Pbar = inv_spd(Xbar)
    return _assemble_design(cl, wm, eps, Xbar, Pbar, Lbig)


def kalman_lmi_design(cl: ClosedLoopSystem, wm: WatermarkSpec,
                      eps: float | None = None,
                      delta: float = 1e-9,
                      options: SolveOptions | None = None) -> KalmanDesign:
    """Kalman design by maximizing trace over the comparison-lemma LMI.

    Solves, in scaled variables 𝕡 = 𝕋𝕡'𝕋, 𝕐 = 𝕋𝕐',

        max tr(𝕡')  s.t.  [[𝕡, 𝕡𝔸̃−𝕐ℂ, 𝕐, 𝕡𝔹],
                            [ ·, 𝕡,       O,  O ],
                            [ ·, ·,     V⁻¹,  O ],
                            [ ·, ·,       ·, 𝕎̃⁻¹]] ⪰ δ·I,

    where 𝕋 = 𝕏̄ᵣ^(−1/2) is the inverse square root of the Riccati
    fixed-point covariance (whose eigenvalues are floored at 1e-10 of the
    largest before inverting).  𝕏̄'s spectrum
    spans from the plant noise floor down to the ε-regularized controller
    block — ten or more orders of magnitude when the loop is nearly
    deadbeat — so the raw maximizer's trace is dominated by directions that
    carry no statistical content and the barrier cannot resolve the
    meaningful ones.  In the 𝕋-scaled variables the maximizer sits near the
    identity and every direction certifies at the same accuracy.

    The feasible 𝕡 form the order interval below the inverse Riccati
    covariance, so any positively weighted trace objective (here weight
    𝕋⁻²) attains the same maximizer as the plain trace.

    Args:
        cl: assembled closed loop (spectral radius < 1 expected).
        wm: watermark spec; U must be positive definite, or exactly zero
            (then the Δu channel is dropped).
        eps: measurement-channel regularizer; default 1e-8·max(1, tr(W)/n_w).
        delta: strict-margin shift δ.
        options: solver overrides.

    Raises:
        EstimationError: infeasible LMI (e.g. undetectable/unstable loop),
            singular recovered 𝕡, or a singular watermark covariance that is
            not identically zero.
    """
    eps = _default_eps(cl) if eps is None else float(eps)
    Bn, Wn, Wn_inv = _split_noise(cl, wm, eps)
    if Bn is None:
        raise EstimationError(
            "watermark covariance is singular but nonzero; the LMI needs "
            "Γ = U⁻¹ (use the Riccati route for semidefinite U)")
    n, nu, nw, ny = cl.n, cl.n_u, cl.n_w, cl.n_y
    V = cl.Wbig[nu + nw:, nu + nw:]
    Vinv = inv_spd(V)
    Bc = cl.Bbig[cl.n_x:, nu + nw:]
    Kbig = np.vstack([np.zeros((cl.n_x, ny)), Bc])
    Atilde = cl.Abig - Kbig @ cl.Cbig

    Xric, Lric = riccati_steady(Atilde, Bn, cl.Cbig, Wn, V)
    wraw, Qv = np.linalg.eigh(sym(Xric))
    wflo = np.maximum(wraw, 1e-10 * max(float(wraw[-1]), eps))
    # 𝕡* = 𝕏̄⁻¹, so 𝕋 = 𝕏̄^(−1/2) puts the scaled maximizer at the identity
    Tscale = sym((Qv / np.sqrt(wflo)) @ Qv.T)
    Tinv = sym((Qv * np.sqrt(wflo)) @ Qv.T)

    P = MatrixVariable("P", n, n)
    Y = MatrixVariable("Y", n, ny, symmetry="full")
    nb = Bn.shape[1]
    size = n + n + ny + nb
    b = LmiBlockBuilder(size, "kalman")
    b.add_term(0, 0, P, left=Tscale, right=Tscale)
    b.add_term(0, n, P, left=Tscale, right=Tscale @ Atilde)
    b.add_term(0, n, Y, left=-Tscale, right=cl.Cbig)
    b.add_term(n, n, P, left=Tscale, right=Tscale)
    b.add_term(0, 2 * n, Y, left=Tscale)
    b.add_term(0, 2 * n + ny, P, left=Tscale, right=Tscale @ Bn)
    b.add_const(2 * n, 2 * n, Vinv)
    b.add_const(2 * n + ny, 2 * n + ny, Wn_inv)
    block = b.build([P, Y], shift=delta)
    problem = LmiProblem([P, Y], [block], {"P": np.eye(n)}, "maximize")

    # warm start at a slightly shrunk image of the Riccati solution: the
    # unshrunk candidate sits on (numerically, marginally across) the LMI
    # boundary, and cold path-following crawls badly through the long flat
    # valley this problem develops when 𝕏̄ is nearly singular
    P0 = sym((Qv * (wflo / wraw)) @ Qv.T)
    Y0 = Tinv @ (sym((Qv / wraw) @ Qv.T) @ (Atilde @ Lric))
    initial = None
    for s in (0.999999, 0.9999, 0.999, 0.995, 0.99, 0.97, 0.9, 0.7):
        cand = {"P": s * P0, "Y": s * Y0}
        if check_feasible(problem, cand) > 0.0:
            initial = cand
            break

    sol = solve(problem, options or SolveOptions(), initial=initial)
    if sol.status == "infeasible":
        raise EstimationError(
            f"Kalman LMI infeasible (margin bound {sol.phase1_certificate}); "
            "closed loop may be undetectable or noise ill-conditioned")
    if sol.status != "optimal":
        raise EstimationError(f"Kalman LMI solver stopped: {sol.status}")
    Ps = sym(sol.assignments["P"])
    lam_min = float(np.linalg.eigvalsh(Ps)[0])
    if lam_min <= 0.0:
        raise EstimationError(f"recovered information matrix singular "
                              f"(min eigenvalue {lam_min:.3e})")
    Pbar = sym(Tscale @ Ps @ Tscale)
    Ps_inv = inv_spd(Ps)
    Xbar = sym(Tinv @ Ps_inv @ Tinv)
    Sigma = cl.Cbig @ Xbar @ cl.Cbig.T + V
    Lbig = solve_spd(Sigma, cl.Cbig @ Xbar).T
    return _assemble_design(cl, wm, eps, Xbar, Pbar, Lbig)


def kalman_to_dict(kd: KalmanDesign) -> dict:
    """JSON-ready dict of the design (matrices as row-major nested lists)."""
    out = {}
    for name in ("Lbig", "L_pred", "Xbar", "Pbar", "Ybar_lmi", "Xe",
                 "innov_cov_design", "Xrun", "innov_cov", "Atilde", "Kbig"):
        out[name] = np.asarray(getattr(kd, name), dtype=float).tolist()
    out["eps"] = kd.eps
    return out
