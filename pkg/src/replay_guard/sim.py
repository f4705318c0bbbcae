"""Closed-loop replay-attack simulation and Monte-Carlo detection curves.

Runs the watermarked loop one step at a time: the plant evolves under the
controller output plus the injected watermark, the steady-state Kalman
filter consumes whatever output the attacker delivers, and the sliding
chi-square detector scores each innovation.  A replay attacker records a
window of true outputs and later feeds them back verbatim, optionally
pushing a constant malicious input into the plant while the loop is blind.

The filter recursion matches the estimator design: the realized watermark
is fed forward into the one-step prediction, so under normal operation the
innovation covariance settles at the run-time value ``Xcal`` used by the
detector for whitening.

Noise is drawn from a counter-based generator (Philox) keyed by the seed,
one row per step, so trajectories are bit-reproducible and trials can be
fanned out by seed without sharing state.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
import scipy.special

from ._util import as_matrix, frozen, sym
from .detector import DetectorConfig, SlidingDetector, TheoremPrediction, theorem1_predict
from .model import (DynamicController, PlantModel, WatermarkSpec,
                    build_closed_loop)

if TYPE_CHECKING:  # pragma: no cover
    from .estimator import KalmanDesign


class SimulationError(RuntimeError):
    """Raised when a simulation is configured inconsistently."""


@dataclass(frozen=True)
class ReplayAttack:
    """Record-and-replay attack description, indexed on the displayed axis.

    The attacker records the true outputs over
    ``[record_start, record_start + record_length)`` and, from
    ``attack_start`` on, delivers the recorded samples in a loop (index
    ``(k - attack_start) mod record_length``).  While replaying it may also
    drive the plant with a constant malicious input; the delivered output
    never reflects it, only the true state diverges.

    Attributes:
        record_start: first recorded step, >= 0.
        record_length: number of recorded steps (the replay period), >= 1.
        attack_start: first step at which recorded data is delivered; must
            not precede the end of the recording window.
        malicious_input: optional constant plant input applied during the
            replay phase; None means zero.
    """

    record_start: int
    record_length: int
    attack_start: int
    malicious_input: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("record_start", "record_length", "attack_start"):
            val = getattr(self, name)
            if int(val) != val:
                raise ValueError(f"{name} must be an integer, got {val!r}")
            object.__setattr__(self, name, int(val))
        if self.record_start < 0:
            raise ValueError(
                f"record_start must be >= 0, got {self.record_start}")
        if self.record_length < 1:
            raise ValueError(
                f"record_length must be >= 1, got {self.record_length}")
        if self.attack_start < self.record_start + self.record_length:
            raise ValueError(
                "attack_start must not precede the end of the recording "
                f"window ({self.record_start + self.record_length}), got "
                f"{self.attack_start}")
        if self.malicious_input is not None:
            ua = np.asarray(self.malicious_input, dtype=float).reshape(-1)
            object.__setattr__(self, "malicious_input", frozen(ua))


@dataclass(frozen=True)
class SimulationTrace:
    """One simulated trajectory on the displayed time axis.

    All arrays have ``horizon`` rows; row ``k`` holds the quantities of
    step ``k`` with ``xhat`` being the one-step prediction x̂_{k|k-1}.

    Attributes:
        x: plant state, (horizon, n_x).
        x_ctrl: controller state, (horizon, n_x).
        xhat: augmented one-step state prediction, (horizon, 2 n_x).
        y: true plant output, (horizon, n_y).
        y_delivered: output seen by controller and filter, (horizon, n_y).
        u: controller output before watermark, (horizon, n_u).
        du: injected watermark, (horizon, n_u).
        residue: innovation y_delivered - C_big xhat, (horizon, n_y).
        g: sliding-window detector statistic, (horizon,).
        eta: detector threshold at each step (dof ramp), (horizon,).
        alarm: g > eta per step, (horizon,) bool.
        under_attack: True where recorded data was delivered, (horizon,) bool.
        seed: RNG seed of this trajectory.
        burnin: discarded stationarity steps before step 0.
        noise_scale: multiplier applied to every noise standard deviation.
        attack: the attack description, or None.
    """

    x: np.ndarray
    x_ctrl: np.ndarray
    xhat: np.ndarray
    y: np.ndarray
    y_delivered: np.ndarray
    u: np.ndarray
    du: np.ndarray
    residue: np.ndarray
    g: np.ndarray
    eta: np.ndarray
    alarm: np.ndarray
    under_attack: np.ndarray
    seed: int
    burnin: int
    noise_scale: float
    attack: Optional[ReplayAttack]

    def __post_init__(self):
        for name in ("x", "x_ctrl", "xhat", "y", "y_delivered", "u", "du",
                     "residue", "g", "eta"):
            object.__setattr__(self, name, frozen(np.asarray(getattr(self, name))))
        for name in ("alarm", "under_attack"):
            arr = np.array(getattr(self, name), dtype=bool, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def horizon(self) -> int:
        return self.g.shape[0]


def _psd_factor(M, name):
    """Deterministic square-root factor S with S S' = M (M only PSD)."""
    M = sym(as_matrix(M, name))
    w, Q = np.linalg.eigh(M)
    if w[0] < -1e-10 * max(1.0, abs(w[-1])):
        raise ValueError(f"{name} must be positive semidefinite")
    return Q @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


def _gaussian_rows(seed: int, steps: int, dim: int) -> np.ndarray:
    """Standard-normal noise table, bit-reproducible for a given seed.

    Uses Philox (counter-based) keyed by the seed and maps uniforms
    through the normal quantile, nudging them off 0 and 1 so the
    quantile stays finite.
    """
    gen = np.random.Generator(np.random.Philox(key=seed))
    u = gen.random((steps, dim))
    u = u * (1.0 - 2.0 ** -53) + 2.0 ** -54
    return scipy.special.ndtri(u)


def _check_design_consistency(cl, ctrl, kd):
    """The estimator design must describe this very closed loop."""
    n_x = ctrl.A_c.shape[0]
    scale = max(1.0, float(np.max(np.abs(cl.Abig))))
    Atilde_want = cl.Abig - np.asarray(kd.Kbig) @ cl.Cbig
    if not np.allclose(kd.Atilde, Atilde_want, atol=1e-8 * scale):
        raise SimulationError(
            "estimator design is inconsistent with the closed loop: "
            "Atilde != Abig - Kbig Cbig")
    Kbig = np.asarray(kd.Kbig)
    kscale = max(1.0, float(np.max(np.abs(Kbig))))
    if not np.allclose(Kbig[:n_x], 0.0, atol=1e-7 * kscale):
        raise SimulationError(
            "estimator design is inconsistent: the plant rows of the "
            "decorrelation gain should vanish")
    if not np.allclose(Kbig[n_x:], ctrl.B_c, atol=1e-7 * kscale):
        raise SimulationError(
            "estimator design is inconsistent with the supplied controller: "
            "the decorrelation gain should replicate B_c")


def simulate(plant: PlantModel, ctrl: DynamicController, kd: "KalmanDesign",
             wm: WatermarkSpec, attack: Optional[ReplayAttack],
             horizon: int, seed: int, cfg: Optional[DetectorConfig] = None,
             burnin: int = 0, noise_scale: float = 1.0) -> SimulationTrace:
    """Simulate the watermarked loop with filter and detector in place.

    Per step: the true output is produced (and recorded if the attacker is
    listening), the attacker delivers either the live or the replayed
    output, the detector scores the innovation, the filtered estimate and
    the controller advance on the delivered output, and the plant advances
    on controller output + watermark (+ malicious input while replaying).
    The one-step prediction feeds the realized watermark forward.

    Args:
        plant: open-loop plant.
        ctrl: dynamic output-feedback controller.
        kd: steady-state estimator design for (plant, ctrl, wm).
        wm: watermark covariance spec.
        attack: replay attack, or None for normal operation.
        horizon: number of displayed steps, >= 1.
        seed: RNG seed; same seed reproduces the trace bit for bit.
        cfg: detector configuration; defaults to a 5-step window at
            alpha = 0.05 whitened by the design's run-time innovation
            covariance.
        burnin: steps simulated and discarded before step 0 so that
            displayed statistics start at stationarity.
        noise_scale: multiplier on all noise standard deviations (0 gives
            a noise-free run, watermark included).

    Returns:
        SimulationTrace over the displayed steps.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if burnin < 0:
        raise ValueError(f"burnin must be >= 0, got {burnin}")
    if noise_scale < 0.0:
        raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
    cl = build_closed_loop(plant, ctrl, wm)
    _check_design_consistency(cl, ctrl, kd)
    n_x, n_u, n_w, n_y = plant.n_x, plant.n_u, plant.n_w, plant.n_y
    if cfg is None:
        cfg = DetectorConfig(T=5, alpha=0.05, m=n_y,
                             innov_cov=np.asarray(kd.innov_cov))
    if cfg.m != n_y:
        raise SimulationError(
            f"detector residue dimension {cfg.m} does not match n_y={n_y}")

    ua = np.zeros(n_u)
    if attack is not None:
        if attack.attack_start >= horizon:
            raise SimulationError(
                f"attack_start {attack.attack_start} lies beyond the "
                f"horizon {horizon}")
        if attack.malicious_input is not None:
            if attack.malicious_input.shape != (n_u,):
                raise SimulationError(
                    f"malicious_input must have shape ({n_u},), got "
                    f"{attack.malicious_input.shape}")
            ua = np.asarray(attack.malicious_input)

    Su = _psd_factor(wm.U, "U") * noise_scale
    Sw = _psd_factor(plant.W, "W") * noise_scale
    Sv = _psd_factor(plant.V, "V") * noise_scale
    z = _gaussian_rows(seed, burnin + horizon, n_u + n_w + n_y)

    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    A_c, B_c, C_c = ctrl.A_c, ctrl.B_c, ctrl.C_c
    Cbig = cl.Cbig
    Lbig = np.asarray(kd.Lbig)
    Atilde = np.asarray(kd.Atilde)
    Kbig = np.asarray(kd.Kbig)

    det = SlidingDetector(cfg)
    x = np.zeros(n_x)
    xc = np.zeros(n_x)
    xhat = np.zeros(2 * n_x)
    buf = None
    if attack is not None:
        buf = np.zeros((attack.record_length, n_y))

    out = {name: np.zeros((horizon, dim)) for name, dim in (
        ("x", n_x), ("x_ctrl", n_x), ("xhat", 2 * n_x), ("y", n_y),
        ("y_delivered", n_y), ("u", n_u), ("du", n_u), ("residue", n_y))}
    g_arr = np.zeros(horizon)
    eta_arr = np.zeros(horizon)
    alarm_arr = np.zeros(horizon, dtype=bool)
    attacked_arr = np.zeros(horizon, dtype=bool)

    for j in range(burnin + horizon):
        k = j - burnin
        du = Su @ z[j, :n_u]
        w = Sw @ z[j, n_u:n_u + n_w]
        v = Sv @ z[j, n_u + n_w:]

        y = C @ x + v
        if attack is not None and \
                0 <= k - attack.record_start < attack.record_length:
            buf[k - attack.record_start] = y
        replaying = attack is not None and k >= attack.attack_start
        if replaying:
            y_del = buf[(k - attack.attack_start) % attack.record_length]
        else:
            y_del = y

        r = y_del - Cbig @ xhat
        if k >= 0:
            g, eta, alarm = det.update(r)
            out["x"][k] = x
            out["x_ctrl"][k] = xc
            out["xhat"][k] = xhat
            out["y"][k] = y
            out["y_delivered"][k] = y_del
            out["du"][k] = du
            out["residue"][k] = r
            g_arr[k] = g
            eta_arr[k] = eta
            alarm_arr[k] = alarm
            attacked_arr[k] = replaying

        xhat_f = xhat + Lbig @ r
        u = C_c @ xc
        if k >= 0:
            out["u"][k] = u
        u_plant = u + du + (ua if replaying else 0.0)

        x = A @ x + B @ u_plant + D @ w
        xc = A_c @ xc + B_c @ y_del
        xhat = Atilde @ xhat_f + Kbig @ y_del
        xhat[:n_x] += B @ du

    return SimulationTrace(
        x=out["x"], x_ctrl=out["x_ctrl"], xhat=out["xhat"], y=out["y"],
        y_delivered=out["y_delivered"], u=out["u"], du=out["du"],
        residue=out["residue"], g=g_arr, eta=eta_arr, alarm=alarm_arr,
        under_attack=attacked_arr, seed=int(seed), burnin=int(burnin),
        noise_scale=float(noise_scale), attack=attack)


@dataclass(frozen=True)
class Scenario:
    """Everything monte_carlo_detection needs to run one experiment.

    Attributes:
        plant, ctrl, kd, wm: the designed loop.
        cfg: detector configuration shared by every trial.
        attack: replay attack applied to the attacked ensemble.
        horizon: displayed steps per trial.
        burnin: stationarity steps discarded before step 0 (default 200).
        noise_scale: noise multiplier forwarded to simulate.
    """

    plant: PlantModel
    ctrl: DynamicController
    kd: "KalmanDesign"
    wm: WatermarkSpec
    cfg: DetectorConfig
    attack: ReplayAttack
    horizon: int
    burnin: int = 200
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.burnin < 0:
            raise ValueError(f"burnin must be >= 0, got {self.burnin}")
        if self.attack is None:
            raise ValueError("scenario requires a replay attack; use "
                             "simulate directly for attack-free runs")


@dataclass(frozen=True)
class DetectionReport:
    """Per-step detection and false-alarm estimates with analytic overlay.

    Attributes:
        beta: empirical detection rate per step over attacked trials.
        se_beta: binomial standard error sqrt(beta (1-beta) / trials).
        alpha_hat: empirical alarm rate per step over unattacked trials.
        se_alpha: binomial standard error of alpha_hat.
        g_mean_attacked: per-step mean statistic, attacked ensemble.
        g_mean_unattacked: per-step mean statistic, unattacked ensemble.
        residue_mean_attacked: per-step mean innovation, attacked ensemble.
        residue_cov_attacked: per-step innovation covariance, attacked
            ensemble, (horizon, n_y, n_y).
        theorem: analytic replay response of this loop.
        trials: trials per ensemble.
        horizon: displayed steps per trial.
        seed: base seed; attacked trial t used seed + t, unattacked
            trial t used seed + trials + t.
        cfg: detector configuration used by every trial.
        attack: the replay attack applied to the attacked ensemble.
    """

    beta: np.ndarray
    se_beta: np.ndarray
    alpha_hat: np.ndarray
    se_alpha: np.ndarray
    g_mean_attacked: np.ndarray
    g_mean_unattacked: np.ndarray
    residue_mean_attacked: np.ndarray
    residue_cov_attacked: np.ndarray
    theorem: TheoremPrediction
    trials: int
    horizon: int
    seed: int
    cfg: DetectorConfig
    attack: ReplayAttack

    def __post_init__(self):
        for name in ("beta", "se_beta", "alpha_hat", "se_alpha",
                     "g_mean_attacked", "g_mean_unattacked",
                     "residue_mean_attacked", "residue_cov_attacked"):
            object.__setattr__(self, name, frozen(np.asarray(getattr(self, name))))
        for name in ("beta", "alpha_hat"):
            rates = getattr(self, name)
            if rates.size and (rates.min() < 0.0 or rates.max() > 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")


def _run_trial(task):
    """One Monte-Carlo trial; module-level so process pools can pickle it."""
    scenario, seed, attacked = task
    tr = simulate(scenario.plant, scenario.ctrl, scenario.kd, scenario.wm,
                  scenario.attack if attacked else None, scenario.horizon,
                  seed, cfg=scenario.cfg, burnin=scenario.burnin,
                  noise_scale=scenario.noise_scale)
    return tr.alarm, tr.g, tr.residue


def monte_carlo_detection(scenario: Scenario, trials: int, seed: int,
                          jobs: int = 1) -> DetectionReport:
    """Estimate detection and false-alarm curves over independent trials.

    Runs ``trials`` attacked runs (per-trial seeds ``seed + t``) and
    ``trials`` unattacked runs (seeds ``seed + trials + t``) and
    aggregates per-step alarm frequencies for each ensemble separately.
    The reduction runs in trial order regardless of ``jobs``, so the
    report is byte-identical for any worker count.

    Args:
        scenario: loop, detector, and attack description.
        trials: trials per ensemble, >= 1.
        seed: base seed for the per-trial seed schedule.
        jobs: worker processes; 1 runs in-process.

    Returns:
        DetectionReport with empirical curves and the analytic overlay.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    theorem = theorem1_predict(scenario.plant, scenario.ctrl, scenario.kd,
                               scenario.wm, scenario.cfg)
    tasks = [(scenario, seed + t, True) for t in range(trials)]
    tasks += [(scenario, seed + trials + t, False) for t in range(trials)]
    if jobs == 1:
        results = map(_run_trial, tasks)
    else:
        pool = ProcessPoolExecutor(max_workers=jobs)
        chunk = max(1, len(tasks) // (4 * jobs))
        results = pool.map(_run_trial, tasks, chunksize=chunk)

    horizon, n_y = scenario.horizon, scenario.plant.n_y
    alarms_att = np.zeros(horizon)
    alarms_una = np.zeros(horizon)
    g_att = np.zeros(horizon)
    g_una = np.zeros(horizon)
    r_sum = np.zeros((horizon, n_y))
    rr_sum = np.zeros((horizon, n_y, n_y))
    for idx, (alarm, g, residue) in enumerate(results):
        if idx < trials:
            alarms_att += alarm
            g_att += g
            r_sum += residue
            rr_sum += np.einsum("ki,kj->kij", residue, residue)
        else:
            alarms_una += alarm
            g_una += g
    if jobs != 1:
        pool.shutdown()

    beta = alarms_att / trials
    alpha_hat = alarms_una / trials
    r_mean = r_sum / trials
    r_cov = rr_sum / trials - np.einsum("ki,kj->kij", r_mean, r_mean)
    return DetectionReport(
        beta=beta,
        se_beta=np.sqrt(beta * (1.0 - beta) / trials),
        alpha_hat=alpha_hat,
        se_alpha=np.sqrt(alpha_hat * (1.0 - alpha_hat) / trials),
        g_mean_attacked=g_att / trials,
        g_mean_unattacked=g_una / trials,
        residue_mean_attacked=r_mean,
        residue_cov_attacked=r_cov,
        theorem=theorem,
        trials=int(trials),
        horizon=horizon,
        seed=int(seed),
        cfg=scenario.cfg,
        attack=scenario.attack)


def _fmt(x) -> str:
    """Shortest exact decimal form; keeps CSV output byte-stable."""
    return repr(float(x))


def trace_to_csv(trace: SimulationTrace) -> str:
    """Render one trajectory as CSV text (step-indexed rows)."""
    n_y = trace.y.shape[1]
    n_u = trace.u.shape[1]
    cols = ["step", "g", "eta", "alarm", "under_attack"]
    cols += [f"residue_{i}" for i in range(n_y)]
    cols += [f"y_{i}" for i in range(n_y)]
    cols += [f"y_delivered_{i}" for i in range(n_y)]
    cols += [f"u_{i}" for i in range(n_u)]
    cols += [f"du_{i}" for i in range(n_u)]
    lines = [",".join(cols)]
    for k in range(trace.horizon):
        row = [str(k), _fmt(trace.g[k]), _fmt(trace.eta[k]),
               str(int(trace.alarm[k])), str(int(trace.under_attack[k]))]
        row += [_fmt(val) for val in trace.residue[k]]
        row += [_fmt(val) for val in trace.y[k]]
        row += [_fmt(val) for val in trace.y_delivered[k]]
        row += [_fmt(val) for val in trace.u[k]]
        row += [_fmt(val) for val in trace.du[k]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def detection_report_to_csv(report: DetectionReport) -> str:
    """Render detection curves plus the analytic overlay as CSV text."""
    cols = ["step", "beta", "se_beta", "alpha_hat", "se_alpha",
            "g_mean_attacked", "g_mean_unattacked",
            "Eg_attack", "Eg_noattack"]
    lines = [",".join(cols)]
    for k in range(report.horizon):
        row = [str(k), _fmt(report.beta[k]), _fmt(report.se_beta[k]),
               _fmt(report.alpha_hat[k]), _fmt(report.se_alpha[k]),
               _fmt(report.g_mean_attacked[k]),
               _fmt(report.g_mean_unattacked[k]),
               _fmt(report.theorem.Eg_attack),
               _fmt(report.theorem.Eg_noattack)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
