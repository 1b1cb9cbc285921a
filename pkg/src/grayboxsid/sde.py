"""Synthetic data generation: strong Taylor 1.5 integration of the governing
SDE plus measurement synthesis.

The stepping core works on callables so that scalar reference problems
(Ornstein-Uhlenbeck, linear test SDEs) can reuse it; ``simulate_taylor15``
wires it to a :class:`~grayboxsid.dynamics.SystemModel`. Sampled forcing is
interpreted as piecewise linear in time, and the scheme's explicit
time-derivative term uses that slope, so deterministic runs (zero noise)
reduce to the order-2 Taylor method for the same interpolated forcing.

For the additive-noise models the diffusion is constant and only the
``J_a b`` double-integral term survives; for the displacement-multiplicative
single-DOF variant the diffusion's drift-rate term is included as well. The
remaining Taylor 1.5 terms vanish identically for these noise structures
(the diffusion never depends on a noisy coordinate).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import SystemModel
from .timeseries import TimeSeries

__all__ = [
    "SimConfig",
    "SimulationDiverged",
    "simulate_taylor15",
    "simulate_deterministic",
    "synthesize_measurements",
    "taylor15_core",
    "rk4_path",
    "sample_increments",
]


class SimulationDiverged(RuntimeError):
    """Raised when a state magnitude crosses the blow-up bound."""

    def __init__(self, step: int, magnitude: float):
        super().__init__(f"state blew up at step {step} (|y| = {magnitude:.3e})")
        self.step = step
        self.magnitude = magnitude


@dataclass
class SimConfig:
    """Sampling grid, seed and measurement setup for one synthetic run."""

    dt: float
    duration: float
    seed: int = 0
    measurement_noise_std: float | list[float] | None = None
    measured_quantities: tuple[str, ...] = ("acceleration",)
    blowup: float = 1e6
    x0: np.ndarray | None = None
    v0: np.ndarray | None = None
    z0: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.duration < self.dt:
            raise ValueError("duration must cover at least one step")
        for q in self.measured_quantities:
            if q not in ("acceleration", "displacement"):
                raise ValueError(f"unknown measured quantity {q!r}")
        if self.measurement_noise_std is not None:
            stds = np.atleast_1d(np.asarray(self.measurement_noise_std, dtype=float))
            if np.any(stds < 0):
                raise ValueError("measurement noise stds must be >= 0")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration / self.dt)) + 1


def sample_increments(rng: np.random.Generator, n_steps: int, n_noise: int,
                      dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Draw correlated (dW, dZ) pairs; dZ is the iterated integral I(1,0).

    Var dW = dt, Var dZ = dt^3/3, Cov(dW, dZ) = dt^2/2.
    """
    xi = rng.standard_normal((n_steps, n_noise, 2))
    dw = np.sqrt(dt) * xi[:, :, 0]
    dz = dt**1.5 * (0.5 * xi[:, :, 0] + xi[:, :, 1] / (2.0 * np.sqrt(3.0)))
    return dw, dz


def taylor15_core(y0, dt, n_steps, drift, drift_jac, drift_rate, diffusion,
                  diffusion_rate, dw, dz, blowup=np.inf):
    """Strong Taylor 1.5 recursion on a generic SDE.

    drift(k, y), drift_jac(k, y), drift_rate(k, y) give a, da/dy, da/dt at
    step k; diffusion(k, y) gives the (d, m) diffusion matrix and
    diffusion_rate(k, y, a) its total time derivative (None when constant).
    dw, dz are (n_steps, m) increment arrays.
    """
    y = np.array(y0, dtype=float)
    out = np.empty((n_steps + 1, y.size))
    out[0] = y
    half_dt2 = 0.5 * dt * dt
    for k in range(n_steps):
        a = drift(k, y)
        jac = drift_jac(k, y)
        b = diffusion(k, y)
        y = (
            y
            + a * dt
            + b @ dw[k]
            + half_dt2 * (jac @ a + drift_rate(k, y))
            + (jac @ b) @ dz[k]
        )
        if diffusion_rate is not None:
            y = y + diffusion_rate(k, out[k], a) @ (dw[k] * dt - dz[k])
        mag = float(np.max(np.abs(y)))
        if not np.isfinite(mag) or mag > blowup:
            raise SimulationDiverged(k + 1, mag)
        out[k + 1] = y
    return out


def rk4_path(f, y0, dt, n_steps):
    """Classic fixed-step RK4 for y' = f(t, y)."""
    y = np.array(y0, dtype=float)
    out = np.empty((n_steps + 1, y.size))
    out[0] = y
    for k in range(n_steps):
        t = k * dt
        k1 = f(t, y)
        k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = f(t + dt, y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = y
    return out


class ForcingInterpolant:
    """Piecewise-linear view of a sampled multichannel forcing record."""

    def __init__(self, values: np.ndarray, dt: float):
        self.values = np.asarray(values, dtype=float)
        self.dt = dt

    def __call__(self, t: float) -> np.ndarray:
        s = t / self.dt
        k = int(np.floor(s))
        if k < 0:
            return self.values[0]
        if k >= self.values.shape[0] - 1:
            return self.values[-1]
        frac = s - k
        return (1.0 - frac) * self.values[k] + frac * self.values[k + 1]

    def slope(self, k: int) -> np.ndarray:
        if k >= self.values.shape[0] - 1:
            return np.zeros(self.values.shape[1])
        return (self.values[k + 1] - self.values[k]) / self.dt


def _initial_state(model: SystemModel, cfg: SimConfig) -> np.ndarray:
    n = model.n_dof
    x0 = np.zeros(n) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    v0 = np.zeros(n) if cfg.v0 is None else np.asarray(cfg.v0, dtype=float)
    state = dynamics.AugmentedState(
        x0, v0, cfg.z0 if model.has_hysteresis else None
    )
    return dynamics.pack_state(model, state)


def _state_labels(model: SystemModel) -> list[str]:
    n = model.n_dof
    labels = [f"x{i + 1}" for i in range(n)] + [f"v{i + 1}" for i in range(n)]
    if model.has_hysteresis:
        labels.append("z")
    return labels


def _acceleration_series(model: SystemModel, states: np.ndarray,
                         forcing: np.ndarray) -> np.ndarray:
    """Deterministic accelerations M^-1 (F - C v - s K x - N) per sample."""
    n = model.n_dof
    x = states[:, :n]
    v = states[:, n:2 * n]
    nl_force = np.zeros_like(x)
    nl = model.nonlinearity
    if isinstance(nl, dynamics.DuffingChain):
        elong = np.diff(x, axis=1, prepend=0.0)
        f_el = nl.alpha * elong**3
        nl_force += f_el
        nl_force[:, :-1] -= f_el[:, 1:]
    elif isinstance(nl, dynamics.BoucWen):
        nl_force[:, nl.attached_dof] = nl.force_scale * states[:, 2 * n]
    elif isinstance(nl, dynamics.DuffingVanDerPol):
        nl_force[:, 0] = nl.alpha * x[:, 0] ** 3
    restoring = (
        v @ model.damping.T
        + model.stiffness_sign * (x @ model.stiffness.T)
        + nl_force
    )
    return (forcing[: states.shape[0]] - restoring) @ model.minv.T


def simulate_taylor15(model: SystemModel, forcing: TimeSeries,
                      cfg: SimConfig) -> TimeSeries:
    """Integrate the stochastic governing equation on the cfg grid.

    Returns displacement, velocity, (hysteretic) and acceleration channels.
    Identical (model, forcing, cfg) reproduce the output bit for bit.
    """
    n = model.n_dof
    if forcing.n_channels != n:
        raise ValueError(f"forcing has {forcing.n_channels} channels for {n} DOFs")
    if abs(forcing.dt - cfg.dt) > 1e-12 * cfg.dt:
        raise ValueError("forcing dt must equal cfg.dt")
    n_samples = cfg.n_samples
    if len(forcing) < n_samples:
        raise ValueError("forcing record shorter than the simulation duration")
    n_steps = n_samples - 1
    fvals = forcing.values
    interp = ForcingInterpolant(fvals, cfg.dt)
    minv_sigma = model.minv @ model.noise_intensity
    d = dynamics.state_size(model)

    def drift(k, y):
        return dynamics.drift(model, y, fvals[k])

    def drift_jac(k, y):
        return dynamics.drift_jacobian(model, y)

    def drift_rate(k, y):
        rate = np.zeros(d)
        rate[n:2 * n] = model.minv @ interp.slope(k)
        return rate

    if model.noise_mode == "additive":
        b_const = np.zeros((d, n))
        b_const[n:2 * n, :] = minv_sigma

        def diffusion(k, y):
            return b_const

        diffusion_rate = None
    else:
        # single-DOF displacement-multiplicative noise: b = [0, (sigma/m) x]
        def diffusion(k, y):
            b = np.zeros((d, n))
            b[n:2 * n, :] = minv_sigma * y[0]
            return b

        def diffusion_rate(k, y, a):
            db = np.zeros((d, n))
            db[n:2 * n, :] = minv_sigma * y[n]
            return db

    rng = np.random.default_rng([cfg.seed, 0])
    dw, dz = sample_increments(rng, n_steps, n, cfg.dt)
    states = taylor15_core(
        _initial_state(model, cfg), cfg.dt, n_steps, drift, drift_jac,
        drift_rate, diffusion, diffusion_rate, dw, dz, cfg.blowup,
    )
    accel = _acceleration_series(model, states, fvals)
    labels = _state_labels(model) + [f"a{i + 1}" for i in range(n)]
    return TimeSeries(cfg.dt, labels, np.hstack([states, accel]))


def simulate_deterministic(model: SystemModel, forcing: TimeSeries, dt: float,
                           duration: float, substeps: int = 1,
                           x0=None, v0=None, z0: float = 0.0,
                           blowup: float = 1e6) -> TimeSeries:
    """RK4 reference solve of the deterministic part of the model.

    substeps > 1 integrates on a refined grid and returns samples on the
    coarse one (used as the high-accuracy oracle in tests).
    """
    cfg = SimConfig(dt=dt, duration=duration, x0=x0, v0=v0, z0=z0)
    if len(forcing) < cfg.n_samples:
        raise ValueError("forcing record shorter than the requested duration")
    n_steps = (cfg.n_samples - 1) * substeps
    interp = ForcingInterpolant(forcing.values, forcing.dt)

    def f(t, y):
        return dynamics.drift(model, y, interp(t))

    fine = rk4_path(f, _initial_state(model, cfg), dt / substeps, n_steps)
    mag = np.max(np.abs(fine))
    if not np.isfinite(mag) or mag > blowup:
        raise SimulationDiverged(n_steps, float(mag))
    states = fine[::substeps]
    accel = _acceleration_series(model, states, forcing.values[: states.shape[0]])
    labels = _state_labels(model) + [f"a{i + 1}" for i in range(model.n_dof)]
    return TimeSeries(dt, labels, np.hstack([states, accel]))


def synthesize_measurements(states: TimeSeries, model: SystemModel,
                            forcing: TimeSeries, cfg: SimConfig) -> TimeSeries:
    """Noisy sensor record: selected response channels plus the input forces.

    Channel order is accelerations first, then displacements, then the clean
    input-force channels. Noise is zero-mean Gaussian per channel; when
    cfg.measurement_noise_std is None each channel gets 1% of its RMS.
    """
    n = model.n_dof
    blocks: list[np.ndarray] = []
    labels: list[str] = []
    if "acceleration" in cfg.measured_quantities:
        cols = [states.channel(f"a{i + 1}") for i in range(n)]
        blocks.extend(cols)
        labels.extend(f"a{i + 1}" for i in range(n))
    if "displacement" in cfg.measured_quantities:
        cols = [states.channel(f"x{i + 1}") for i in range(n)]
        blocks.extend(cols)
        labels.extend(f"x{i + 1}" for i in range(n))
    if not blocks:
        raise ValueError("no measured quantities requested")
    clean = np.column_stack(blocks)
    if cfg.measurement_noise_std is None:
        stds = 0.01 * np.sqrt(np.mean(clean**2, axis=0))
    else:
        stds = np.broadcast_to(
            np.atleast_1d(np.asarray(cfg.measurement_noise_std, dtype=float)),
            (clean.shape[1],),
        ).astype(float)
    rng = np.random.default_rng([cfg.seed, 1])
    noisy = clean + rng.standard_normal(clean.shape) * stds[None, :]
    values = np.hstack([noisy, forcing.values[: len(states)]])
    labels += [f"f{i + 1}" for i in range(n)]
    return TimeSeries(states.dt, labels, values)
