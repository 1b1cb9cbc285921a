"""End-to-end gray-box flow: filter the measurements into residual-force
estimates, fit state-to-residual GPs, re-inject them into the approximate
model, and integrate the corrected model under new forcing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import dynamics, gpr
from .dynamics import SystemModel
from .filters import (
    EstimateSeries,
    FilterInit,
    FilterNoiseConfig,
    build_linear_filter_model,
    build_nonlinear_filter_model,
    run_dkf,
    run_dukf,
)
from .gpr import FeatureSpec, FitConfig, GpFitError, GpModel
from .sde import ForcingInterpolant, SimConfig, SimulationDiverged, rk4_path
from .timeseries import TimeSeries

__all__ = [
    "FilterConfig",
    "GpConfig",
    "CorrectedModel",
    "ChannelMetrics",
    "RunReport",
    "estimate_residual",
    "build_corrected_model",
    "predict_response",
    "predict_residual",
    "evaluate",
]


@dataclass
class FilterConfig:
    """Filter selection and tuning for the residual-estimation stage."""

    noise: FilterNoiseConfig = field(default_factory=FilterNoiseConfig)
    kind: str | None = None  # "dkf", "dukf", or None to pick by linearity
    discretization: str = "euler"
    ut_alpha: float = 1.0
    ut_beta: float = 2.0
    ut_kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in (None, "dkf", "dukf"):
            raise ValueError(f"unknown filter kind {self.kind!r}")


@dataclass
class GpConfig:
    """GP fitting options for the residual map."""

    fit: FitConfig = field(default_factory=FitConfig)
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    training_window: float | None = None


@dataclass
class CorrectedModel:
    """The approximate model plus one residual GP per force channel."""

    known: SystemModel
    residual_gps: list[GpModel]
    feature_spec: FeatureSpec

    def __post_init__(self):
        n_state = 2 * self.known.n_dof
        for ch, gp in enumerate(self.residual_gps):
            idx = self.feature_spec.indices_for(ch, n_state)
            if gp.n_features != len(idx):
                raise ValueError(
                    f"channel {ch}: GP has {gp.n_features} features, spec selects {len(idx)}"
                )

    def residual_at(self, y: np.ndarray) -> np.ndarray:
        """GP posterior-mean residual force at one flat state [x, v]."""
        n_state = 2 * self.known.n_dof
        out = np.empty(len(self.residual_gps))
        for ch, gp in enumerate(self.residual_gps):
            idx = self.feature_spec.indices_for(ch, n_state)
            out[ch] = gpr.predict_mean(gp, y[idx][None, :])[0]
        return out


def _measured_quantities(measurements: TimeSeries) -> tuple[str, ...]:
    """Infer the measurement layout from canonical channel labels."""
    quantities = []
    if any(l.startswith("a") for l in measurements.labels):
        quantities.append("acceleration")
    if any(l.startswith("x") for l in measurements.labels):
        quantities.append("displacement")
    if not quantities:
        raise ValueError(
            f"cannot infer measured quantities from labels {measurements.labels}"
        )
    return tuple(quantities)


def estimate_residual(known: SystemModel, measurements: TimeSeries,
                      known_input: TimeSeries,
                      cfg: FilterConfig | None = None) -> EstimateSeries:
    """Joint input-state estimation, DKF for linear approximants, else DUKF."""
    cfg = cfg or FilterConfig()
    if abs(measurements.dt - known_input.dt) > 1e-12 * measurements.dt:
        raise ValueError("measurements and known input must share dt")
    measured = _measured_quantities(measurements)
    kind = cfg.kind or ("dkf" if known.nonlinearity is None else "dukf")
    if kind == "dkf":
        model = build_linear_filter_model(known, measurements.dt, cfg.noise, measured)
        init = FilterInit.from_config(model.n_state, model.n_force, cfg.noise)
        return run_dkf(model, measurements, known_input, init)
    model = build_nonlinear_filter_model(
        known, measurements.dt, cfg.noise, measured, cfg.discretization
    )
    init = FilterInit.from_config(model.n_state, model.n_force, cfg.noise)
    return run_dukf(model, measurements, known_input, init,
                    cfg.ut_alpha, cfg.ut_beta, cfg.ut_kappa)


def build_corrected_model(known: SystemModel, estimates: EstimateSeries,
                          cfg: GpConfig | None = None) -> CorrectedModel:
    """Fit per-channel residual GPs on the filter output's training window."""
    cfg = cfg or GpConfig()
    window = estimates
    if cfg.training_window is not None:
        window = estimates.window(0.0, cfg.training_window)
    sets = gpr.select_features(window, cfg.feature_spec)
    models = []
    failures = []
    for ch, (x, y) in enumerate(sets):
        try:
            models.append(gpr.fit(x, y, cfg.fit))
        except GpFitError as exc:
            failures.append(f"channel {ch}: {exc}")
    if failures:
        raise GpFitError("GP fit failed for " + "; ".join(failures))
    return CorrectedModel(known=known, residual_gps=models,
                          feature_spec=cfg.feature_spec)


def predict_response(corrected: CorrectedModel, forcing: TimeSeries,
                     cfg: SimConfig) -> TimeSeries:
    """Deterministic forward solve of the corrected model (fixed-step RK4).

    The GP posterior mean enters as an additional restoring force; the
    stochastic forcing term is omitted.
    """
    known = corrected.known
    n = known.n_dof
    if forcing.n_channels != n:
        raise ValueError(f"forcing has {forcing.n_channels} channels for {n} DOFs")
    if len(forcing) < cfg.n_samples:
        raise ValueError("forcing record shorter than the requested duration")
    interp = ForcingInterpolant(forcing.values, forcing.dt)
    minv = known.minv
    sign = known.stiffness_sign

    def drift(t, y):
        x, v = y[:n], y[n:]
        nl = dynamics.nonlinear_force(known, x, v)
        resid = corrected.residual_at(y)
        acc = minv @ (interp(t) - known.damping @ v - sign * (known.stiffness @ x)
                      - nl - resid)
        return np.concatenate([v, acc])

    x0 = np.zeros(n) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    v0 = np.zeros(n) if cfg.v0 is None else np.asarray(cfg.v0, dtype=float)
    y0 = np.concatenate([x0, v0])
    n_steps = cfg.n_samples - 1
    states = rk4_path(drift, y0, cfg.dt, n_steps)
    mag = np.max(np.abs(states))
    if not np.isfinite(mag) or mag > cfg.blowup:
        bad = int(np.argmax(np.max(np.abs(states), axis=1) > cfg.blowup))
        raise SimulationDiverged(bad, float(mag))
    resid_mean, _ = predict_residual(corrected, states)
    x, v = states[:, :n], states[:, n:]
    nl = np.array([dynamics.nonlinear_force(known, x[i], v[i])
                   for i in range(states.shape[0])])
    accel = (forcing.values[: states.shape[0]] - v @ known.damping.T
             - sign * (x @ known.stiffness.T) - nl - resid_mean) @ minv.T
    labels = ([f"x{i + 1}" for i in range(n)] + [f"v{i + 1}" for i in range(n)]
              + [f"a{i + 1}" for i in range(n)])
    return TimeSeries(cfg.dt, labels, np.hstack([states, accel]))


def predict_residual(corrected: CorrectedModel, states: np.ndarray,
                     chunk: int = 2048):
    """GP residual mean and standard deviation along a state trajectory.

    states is (T, 2n); returns (T, n_r) mean and std arrays. The variance is
    the per-point posterior variance (no cross covariances), reported as the
    uncertainty band on the re-injected force.
    """
    states = np.atleast_2d(states)
    n_state = 2 * corrected.known.n_dof
    t_len = states.shape[0]
    n_r = len(corrected.residual_gps)
    mean = np.empty((t_len, n_r))
    std = np.empty((t_len, n_r))
    for ch, gp in enumerate(corrected.residual_gps):
        idx = corrected.feature_spec.indices_for(ch, n_state)
        xq_all = states[:, idx]
        for lo in range(0, t_len, chunk):
            hi = min(lo + chunk, t_len)
            xq = xq_all[lo:hi]
            k_star = gpr.kernel_matrix(gp.kernel, xq, gp.train_x)
            mean[lo:hi, ch] = gp.mean.value() + k_star @ gp.alpha
            v = solve_triangular(gp.chol, k_star.T, lower=True)
            prior = np.full(hi - lo, gp.kernel.signal_var)
            var = np.maximum(prior - np.sum(v * v, axis=0), 0.0)
            std[lo:hi, ch] = np.sqrt(var)
    return mean, std


@dataclass
class ChannelMetrics:
    rmse: float
    nrmse: float
    corr: float


@dataclass
class RunReport:
    """Per-window, per-channel comparison of a prediction against truth."""

    windows: dict[str, tuple[float, float]]
    metrics: dict[str, dict[str, ChannelMetrics]]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "windows": {k: list(v) for k, v in self.windows.items()},
            "metrics": {
                w: {ch: vars(m) for ch, m in chans.items()}
                for w, chans in self.metrics.items()
            },
            "meta": self.meta,
        }


def _metrics(pred: np.ndarray, truth: np.ndarray) -> ChannelMetrics:
    err = pred - truth
    rmse = float(np.sqrt(np.mean(err**2)))
    rms = float(np.sqrt(np.mean(truth**2)))
    nrmse = rmse / rms if rms > 0 else (0.0 if rmse == 0 else float("inf"))
    sp, st = np.std(pred), np.std(truth)
    if sp == 0 or st == 0:
        corr = 1.0 if rmse == 0 else 0.0
    else:
        corr = float(np.corrcoef(pred, truth)[0, 1])
    return ChannelMetrics(rmse=rmse, nrmse=nrmse, corr=corr)


def evaluate(predicted: TimeSeries, truth: TimeSeries,
             windows: dict[str, tuple[float, float]] | None = None,
             channels: list[str] | None = None) -> RunReport:
    """RMSE / normalized RMSE / correlation per channel per window."""
    if len(predicted) != len(truth):
        raise ValueError(
            f"length mismatch: predicted {len(predicted)} vs truth {len(truth)}"
        )
    channels = channels or [l for l in predicted.labels if l in truth.labels]
    windows = windows or {"full": (0.0, predicted.duration)}
    out: dict[str, dict[str, ChannelMetrics]] = {}
    for name, (t0, t1) in windows.items():
        pw = predicted.window(t0, t1)
        tw = truth.window(t0, t1)
        out[name] = {
            ch: _metrics(pw.channel(ch), tw.channel(ch)) for ch in channels
        }
    return RunReport(windows=dict(windows), metrics=out)
