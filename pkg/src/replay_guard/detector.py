"""Chi-square replay detector and its analytic performance predictions.

The detector watches the innovations of the steady-state Kalman filter.
Under normal operation each innovation ``r_k`` is zero-mean Gaussian with
covariance ``Xcal`` (the run-time innovation covariance), so the windowed
statistic

    g_k = sum_{i=k-T+1}^{k} r_i' Xcal^{-1} r_i

is chi-square distributed with ``m*T`` degrees of freedom, where ``m`` is
the residue dimension.  The alarm threshold ``eta`` is the ``1 - alpha``
quantile of that distribution.

When an attacker replays ``tau`` previously recorded output samples, the
filter keeps injecting fresh watermark noise ``Delta u_k`` that the
recorded outputs cannot reflect.  The estimate discrepancy between the
real run and the recorded one accumulates according to the stable
plant-level recursion with transition ``calA = A (I - L C)`` and forcing
``B U B'``; its steady-state covariance ``calU`` solves the discrete
Lyapunov equation

    calU = calA calU calA' + B U B'.

During the replay window the innovation picks up two independent copies
of this discrepancy (one from the live run, one baked into the
recording), so asymptotically

    E[g_k]        = m*T + 2*T * trace(C' Xcal^{-1} C calU),
    Cov[residue]  = Xcal + 2 C calU C'.

``trace(C' Xcal^{-1} C calU)`` is the detection metric that the watermark
design maximizes: it measures how visible the watermark is through the
detector per unit of detection window.

Conventions
-----------
* ``L`` in ``calA`` is the plant-level block of the augmented filter gain,
  i.e. the top ``n_x`` rows of the filtered gain produced by the estimator
  design.  The controller state is known exactly, so only the plant block
  carries estimation content.
* ``m`` equals the output dimension ``n_y``.
* The product ``B C_c A_c`` also appears in the transient analysis of the
  attacked filter; it only affects terms that decay to zero and plays no
  role in the steady-state formulas above, so it is not computed here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg
import scipy.special

from ._util import (LyapunovInstabilityError, as_matrix, check_symmetric,
                    dlyap_doubling, frozen, inv_spd, sym)
from .model import PlantModel, WatermarkSpec, spectral_radius

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, types only
    from .estimator import KalmanDesign
    from .model import DynamicController


class DetectorError(RuntimeError):
    """Raised when detector inputs are inconsistent or degenerate."""


def chi2_survival(dof: int, x: float) -> float:
    """P(chi2_dof > x), the survival function of the chi-square law."""
    if x < 0:
        return 1.0
    # chi2 with k dof is Gamma(k/2, scale 2); survival = Q(k/2, x/2)
    return float(scipy.special.gammaincc(0.5 * dof, 0.5 * x))


def chi2_threshold(dof: int, alpha: float, tol: float = 1e-8) -> float:
    """Threshold eta with P(chi2_dof > eta) = alpha.

    Uses the regularized upper incomplete gamma function and bisection,
    refined until the bracket width drops below ``tol``.

    Args:
        dof: degrees of freedom, positive integer.
        alpha: target tail probability, strictly between 0 and 1.
        tol: absolute tolerance on the returned quantile.

    Returns:
        The 1 - alpha quantile of the chi-square distribution.
    """
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof!r}")
    dof = int(dof)
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie strictly in (0, 1), got {alpha!r}")

    # Bracket the quantile: survival is decreasing in x, so grow the upper
    # end until it overshoots.  mean + a few std deviations is nearly
    # always enough; doubling covers extreme alphas.
    lo = 0.0
    hi = dof + 10.0 * math.sqrt(2.0 * dof) + 10.0
    while chi2_survival(dof, hi) > alpha:
        hi *= 2.0
        if hi > 1e300:  # pragma: no cover - unreachable for valid alpha
            raise DetectorError("failed to bracket chi-square quantile")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if chi2_survival(dof, mid) > alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def g_statistic(residues, Xcal) -> float:
    """Windowed chi-square statistic sum_i r_i' Xcal^{-1} r_i.

    Args:
        residues: iterable of T innovation vectors of dimension m, or an
            array of shape (T, m).
        Xcal: innovation covariance, m x m symmetric positive definite.

    Returns:
        The nonnegative scalar g_k.
    """
    Xcal = as_matrix(Xcal, "Xcal")
    check_symmetric(Xcal, "Xcal")
    R = np.atleast_2d(np.asarray(residues, dtype=float))
    if R.ndim != 2 or R.shape[1] != Xcal.shape[0]:
        raise ValueError(
            f"residues must be T x {Xcal.shape[0]}, got shape {R.shape}")
    try:
        c, low = scipy.linalg.cho_factor(Xcal)
    except np.linalg.LinAlgError as exc:
        raise DetectorError("innovation covariance is singular") from exc
    white = scipy.linalg.cho_solve((c, low), R.T)
    return float(np.sum(R.T * white))


def dlyap(Acal, M) -> np.ndarray:
    """Solve the discrete Lyapunov equation U = Acal U Acal' + M.

    Args:
        Acal: square matrix with spectral radius < 1.
        M: symmetric positive semidefinite forcing term.

    Returns:
        The symmetric solution U, with residual
        ``max|U - Acal U Acal' - M|`` at most ``1e-10 * max|M|``.

    Raises:
        LyapunovInstabilityError: if the spectral radius of Acal is within
            1e-9 of 1 or larger.
    """
    Acal = as_matrix(Acal, "Acal")
    M = as_matrix(M, "M")
    check_symmetric(M, "M")
    U = dlyap_doubling(Acal, M)
    resid = np.max(np.abs(U - Acal @ U @ Acal.T - M))
    scale = max(np.max(np.abs(M)), 1e-300)
    if resid > 1e-10 * scale:
        # one refinement pass on the residual equation; the correction
        # solves the same Lyapunov equation with the defect as forcing
        defect = sym(M + Acal @ U @ Acal.T - U)
        U = sym(U + dlyap_doubling(Acal, defect))
        resid = np.max(np.abs(U - Acal @ U @ Acal.T - M))
        if resid > 1e-10 * scale:
            raise LyapunovInstabilityError(
                f"Lyapunov residual {resid:.3e} exceeds 1e-10 * {scale:.3e}")
    return U


@dataclass(frozen=True)
class DetectorConfig:
    """Chi-square detector parameters.

    Attributes:
        T: detection window length in steps, at least 1.
        alpha: false-alarm probability per window, in (0, 1).
        m: residue dimension (output dimension of the plant).
        innov_cov: innovation covariance Xcal used for whitening.
        eta: alarm threshold; computed from (m*T, alpha) when omitted,
            validated against the chi-square quantile when supplied.
    """

    T: int
    alpha: float
    m: int
    innov_cov: np.ndarray
    eta: float = None

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"window length T must be >= 1, got {self.T!r}")
        object.__setattr__(self, "T", int(self.T))
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"residue dimension m must be >= 1, got {self.m!r}")
        object.__setattr__(self, "m", int(self.m))
        X = as_matrix(self.innov_cov, "innov_cov")
        check_symmetric(X, "innov_cov")
        if X.shape[0] != self.m:
            raise ValueError(
                f"innov_cov must be {self.m} x {self.m}, got {X.shape}")
        object.__setattr__(self, "innov_cov", frozen(X))
        target = chi2_threshold(self.m * self.T, self.alpha)
        if self.eta is None:
            object.__setattr__(self, "eta", target)
        elif abs(float(self.eta) - target) > 1e-6:
            raise ValueError(
                f"eta {self.eta!r} is not the chi-square quantile "
                f"{target:.8f} for dof={self.m * self.T}, alpha={self.alpha}")
        else:
            object.__setattr__(self, "eta", float(self.eta))

    @property
    def dof(self) -> int:
        return self.m * self.T


class SlidingDetector:
    """Stateful sliding-window chi-square detector for one trajectory.

    Keeps a ring buffer of the last ``T`` whitened residue norms.  Before
    the buffer fills, the statistic uses all residues seen so far and the
    threshold is scaled to ``m*k`` degrees of freedom, so the startup
    transient stays calibrated.

    Not safe to share across trajectories; create one per run.
    """

    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        self._Xinv = inv_spd(np.asarray(cfg.innov_cov))
        self._terms = np.zeros(cfg.T)
        self._count = 0
        # thresholds for the dof ramp m*1, m*2, ..., m*T
        self._etas = [chi2_threshold(cfg.m * k, cfg.alpha)
                      for k in range(1, cfg.T + 1)]

    def update(self, residue) -> tuple:
        """Push one residue; return (g_k, eta_k, alarm).

        Args:
            residue: innovation vector of dimension m.

        Returns:
            g_k: statistic over the current (possibly partial) window.
            eta_k: threshold at the current degrees of freedom.
            alarm: True when g_k > eta_k.
        """
        r = np.asarray(residue, dtype=float).reshape(-1)
        if r.shape[0] != self.cfg.m:
            raise ValueError(
                f"residue must have dimension {self.cfg.m}, got {r.shape[0]}")
        self._terms[self._count % self.cfg.T] = float(r @ self._Xinv @ r)
        self._count += 1
        window = min(self._count, self.cfg.T)
        g = float(np.sum(self._terms[:window]))
        eta = self._etas[window - 1]
        return g, eta, g > eta


@dataclass(frozen=True)
class TheoremPrediction:
    """Analytic attack/no-attack expectations for the chi-square detector.

    Attributes:
        calU: steady-state covariance of the watermark-driven estimate
            discrepancy (n_x x n_x).
        calA: plant-level error transition A (I - L C).
        detection_metric: trace(C' Xcal^{-1} C calU).
        Eg_attack: expected statistic under replay, m*T + 2*T*metric.
        Eg_noattack: expected statistic under normal operation, m*T.
        residue_cov_attack: asymptotic attacked-residue covariance
            Xcal + 2 C calU C'.
    """

    calU: np.ndarray
    calA: np.ndarray
    detection_metric: float
    Eg_attack: float
    Eg_noattack: float
    residue_cov_attack: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "calU", frozen(as_matrix(self.calU, "calU")))
        object.__setattr__(self, "calA", frozen(as_matrix(self.calA, "calA")))
        object.__setattr__(
            self, "residue_cov_attack",
            frozen(as_matrix(self.residue_cov_attack, "residue_cov_attack")))
        if self.Eg_attack < self.Eg_noattack - 1e-12:
            raise ValueError("attacked expectation below the no-attack floor")


def theorem1_predict(plant: PlantModel, ctrl: "DynamicController",
                     kd: "KalmanDesign", wm: WatermarkSpec,
                     cfg: DetectorConfig) -> TheoremPrediction:
    """Predict the detector's response to a replay attack.

    Extracts the plant-level filter gain (top n_x rows of the augmented
    filtered gain), forms calA = A (I - L C), solves the Lyapunov equation
    for the watermark-driven discrepancy covariance, and assembles the
    expected statistic and residue covariance under replay.

    Args:
        plant: open-loop plant.
        ctrl: dynamic output-feedback controller (enters only through the
            estimator design; kept for the call signature symmetry).
        kd: estimator design supplying the filter gain and the run-time
            innovation covariance.
        wm: watermark covariance spec.
        cfg: detector window/threshold configuration.

    Returns:
        TheoremPrediction with calU, calA, the detection metric, the
        expected statistics, and the attacked residue covariance.
    """
    del ctrl  # the estimator design already encodes the controller
    A, B, C = plant.A, plant.B, plant.C
    n_x = plant.n_x
    L_plant = np.asarray(kd.Lbig)[:n_x, :]
    calA = A @ (np.eye(n_x) - L_plant @ C)
    rho = spectral_radius(calA)
    if rho >= 1.0 - 1e-9:
        raise LyapunovInstabilityError(
            f"plant-level error dynamics have spectral radius {rho:.6f}")
    calU = dlyap(calA, sym(B @ wm.U @ B.T))
    Xcal = np.asarray(kd.innov_cov)
    Xinv = inv_spd(Xcal)
    metric = float(np.trace(C.T @ Xinv @ C @ calU))
    mT = float(cfg.m * cfg.T)
    return TheoremPrediction(
        calU=calU,
        calA=calA,
        detection_metric=metric,
        Eg_attack=mT + 2.0 * cfg.T * metric,
        Eg_noattack=mT,
        residue_cov_attack=sym(Xcal + 2.0 * C @ calU @ C.T),
    )
