"""Joint input-state estimation with dual filters.

Two coupled recursions run per time step: one estimates the unknown
residual force (random-walk model), the other the structural state. For a
linear approximate model both recursions are linear Kalman updates (DKF);
for a nonlinear approximate model both use the unscented transform (DUKF).

Per-step order is fixed: force measurement update, state measurement update
using the freshly updated force, force time update, state time update. The
measurement model maps states and residual force to measured accelerations
(optionally also displacements), with the known deterministic input entering
accelerations through an explicit feedthrough term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from . import dynamics
from .dynamics import SystemModel
from .timeseries import TimeSeries

__all__ = [
    "FilterNoiseConfig",
    "FilterInit",
    "LinearFilterModel",
    "NonlinearFilterModel",
    "UtWeights",
    "EstimateSeries",
    "FilterFailure",
    "build_linear_filter_model",
    "build_nonlinear_filter_model",
    "compute_ut_weights",
    "run_dkf",
    "run_dukf",
]


class FilterFailure(RuntimeError):
    """Numerical failure inside a filter recursion, tagged with the step."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"filter failed at step {step}: {reason}")
        self.step = step


@dataclass
class FilterNoiseConfig:
    """Process/measurement noise levels and initial covariances.

    q_force scales the force random-walk covariance Q1 = q_force**2 * I;
    q_state scales Q2. measurement_noise_std fills the diagonal of R.

    With acceleration-only measurements the pair (constant displacement
    offset, compensating constant force) is unobservable, so the split
    between the two estimates can drift. displacement_anchor_std, when set,
    appends zero-valued pseudo-measurements of the displacements with that
    standard deviation: a weak zero-mean prior that pins the drift without
    noticeably biasing the in-band estimates (pick it near the expected
    displacement RMS).

    q_state_from_force adds gamma * C_d Q1 C_d^T to Q2, accounting for the
    state prediction treating the estimated force as exact input; without it
    the state covariance collapses and measurement corrections (including
    the anchor rows) have no effect.
    """

    q_force: float | list[float] = 1e-1
    q_state: float | list[float] = 1e-8
    q_state_from_force: float = 0.0
    measurement_noise_std: float | list[float] = 1e-3
    init_state_cov: float = 1.0
    init_force_cov: float = 1e2
    displacement_anchor_std: float | None = None

    def q1_matrix(self, n_force: int) -> np.ndarray:
        q = np.broadcast_to(np.atleast_1d(np.asarray(self.q_force, dtype=float)),
                            (n_force,))
        return np.diag(q.astype(float) ** 2)

    def q2_matrix(self, n_state: int) -> np.ndarray:
        q = np.broadcast_to(np.atleast_1d(np.asarray(self.q_state, dtype=float)),
                            (n_state,))
        return np.diag(q.astype(float))

    def r_matrix(self, n_meas: int, n_anchor: int = 0) -> np.ndarray:
        stds = np.broadcast_to(
            np.atleast_1d(np.asarray(self.measurement_noise_std, dtype=float)),
            (n_meas,),
        ).astype(float)
        if np.any(stds <= 0):
            raise ValueError("measurement noise stds must be positive")
        if n_anchor:
            stds = np.concatenate([stds, np.full(n_anchor, self.displacement_anchor_std)])
        return np.diag(stds**2)


@dataclass
class FilterInit:
    state_mean: np.ndarray
    state_cov: np.ndarray
    force_mean: np.ndarray
    force_cov: np.ndarray

    @classmethod
    def from_config(cls, n_state: int, n_force: int,
                    cfg: FilterNoiseConfig) -> "FilterInit":
        return cls(
            state_mean=np.zeros(n_state),
            state_cov=cfg.init_state_cov * np.eye(n_state),
            force_mean=np.zeros(n_force),
            force_cov=cfg.init_force_cov * np.eye(n_force),
        )


@dataclass
class LinearFilterModel:
    """Discrete state-space model consumed by the DKF.

    State transition y_k = A_d y + B_d F + C_d R; measurements
    z = A_m y + C_m R + D_m F. T is the force random-walk transition.
    """

    a_d: np.ndarray
    b_d: np.ndarray
    c_d: np.ndarray
    a_m: np.ndarray
    c_m: np.ndarray
    d_m: np.ndarray
    t: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    r_meas: np.ndarray
    n_anchor: int = 0

    @property
    def n_state(self) -> int:
        return self.a_d.shape[0]

    @property
    def n_force(self) -> int:
        return self.c_d.shape[1]

    @property
    def n_meas(self) -> int:
        """Physical measurement channels (anchor rows excluded)."""
        return self.a_m.shape[0] - self.n_anchor


@dataclass
class NonlinearFilterModel:
    """Function-handle model consumed by the DUKF.

    f1(r) is the force transition, f2(y, u, r) the one-step state
    transition, h(y, r, u) the measurement map.
    """

    f1: Callable[[np.ndarray], np.ndarray]
    f2: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    n_state: int
    n_force: int
    n_meas: int
    q1: np.ndarray
    q2: np.ndarray
    r_meas: np.ndarray
    n_anchor: int = 0


@dataclass
class UtWeights:
    """Unscented-transform scaling and weights for dimension L."""

    lam: float
    w_mean: np.ndarray
    w_cov: np.ndarray
    L: int

    @property
    def scale(self) -> float:
        """sqrt(L + lambda) multiplying the covariance square root."""
        return float(np.sqrt(self.L + self.lam))


@dataclass
class EstimateSeries:
    """Filtered means/covariances of the state and the residual force."""

    dt: float
    state_mean: np.ndarray
    state_cov: np.ndarray
    force_mean: np.ndarray
    force_cov: np.ndarray

    def __len__(self) -> int:
        return self.state_mean.shape[0]

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def window(self, t_start: float, t_end: float) -> "EstimateSeries":
        i0 = max(int(np.ceil(t_start / self.dt - 1e-9)), 0)
        i1 = min(int(np.floor(t_end / self.dt + 1e-9)) + 1, len(self))
        return EstimateSeries(
            self.dt,
            self.state_mean[i0:i1], self.state_cov[i0:i1],
            self.force_mean[i0:i1], self.force_cov[i0:i1],
        )


def compute_ut_weights(L: int, alpha: float = 1.0, beta: float = 2.0,
                       kappa: float = 0.0) -> UtWeights:
    """Sigma-point weights: lambda = alpha^2 (L + kappa) - L, w0_m =
    lambda/(L+lambda), w0_c = w0_m + 1 - alpha^2 + beta, wi = 1/(2(L+lambda)).
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    if alpha == 0:
        raise ValueError("alpha must be nonzero")
    lam = alpha**2 * (L + kappa) - L
    if L + lam <= 0:
        raise ValueError(f"degenerate scaling: L + lambda = {L + lam}")
    w_mean = np.full(2 * L + 1, 1.0 / (2.0 * (L + lam)))
    w_cov = w_mean.copy()
    w_mean[0] = lam / (L + lam)
    w_cov[0] = lam / (L + lam) + (1.0 - alpha**2 + beta)
    return UtWeights(lam=float(lam), w_mean=w_mean, w_cov=w_cov, L=L)


def _discretize(a_c: np.ndarray, b_c: np.ndarray, dt: float):
    """Exact ZOH discretization via the augmented matrix exponential.

    Returns (A_d, B_d) with B_d = [A_d - I] A_c^-1 B_c evaluated through the
    integral form, so singular A_c (e.g. k = c = 0) is handled too.
    """
    n, m = b_c.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = a_c
    aug[:n, n:] = b_c
    phi = expm(aug * dt)
    return phi[:n, :n], phi[:n, n:]


def _measurement_maps(model: SystemModel, measured: tuple[str, ...]):
    """Rows of (A_m, C_m, D_m) for the requested quantities, accelerations first."""
    n = model.n_dof
    minv = model.minv
    rows_a, rows_c, rows_d = [], [], []
    if "acceleration" in measured:
        rows_a.append(np.hstack([-minv @ model.stiffness, -minv @ model.damping]))
        rows_c.append(-minv)
        rows_d.append(minv)
    if "displacement" in measured:
        rows_a.append(np.hstack([np.eye(n), np.zeros((n, n))]))
        rows_c.append(np.zeros((n, n)))
        rows_d.append(np.zeros((n, n)))
    if not rows_a:
        raise ValueError("at least one measured quantity is required")
    return np.vstack(rows_a), np.vstack(rows_c), np.vstack(rows_d)


def build_linear_filter_model(known: SystemModel, dt: float,
                              noise_cfg: FilterNoiseConfig,
                              measured: tuple[str, ...] = ("acceleration",),
                              ) -> LinearFilterModel:
    """Exact discretization of the linear approximate model plus the
    random-walk residual-force model."""
    if known.nonlinearity is not None:
        raise ValueError("linear filter model requires a linear known model")
    n = known.n_dof
    minv = known.minv
    a_c = np.block([
        [np.zeros((n, n)), np.eye(n)],
        [-minv @ known.stiffness, -minv @ known.damping],
    ])
    b_c = np.vstack([np.zeros((n, n)), minv])
    a_d, b_d = _discretize(a_c, b_c, dt)
    c_d = -b_d
    a_m, c_m, d_m = _measurement_maps(known, measured)
    n_meas = a_m.shape[0]
    n_anchor = 0
    if noise_cfg.displacement_anchor_std is not None and "displacement" not in measured:
        a_m = np.vstack([a_m, np.hstack([np.eye(n), np.zeros((n, n))])])
        c_m = np.vstack([c_m, np.zeros((n, n))])
        d_m = np.vstack([d_m, np.zeros((n, n))])
        n_anchor = n
    q1 = noise_cfg.q1_matrix(n)
    q2 = noise_cfg.q2_matrix(2 * n)
    if noise_cfg.q_state_from_force:
        q2 = q2 + noise_cfg.q_state_from_force * (c_d @ q1 @ c_d.T)
    return LinearFilterModel(
        a_d=a_d, b_d=b_d, c_d=c_d, a_m=a_m, c_m=c_m, d_m=d_m,
        t=np.eye(n),
        q1=q1,
        q2=q2,
        r_meas=noise_cfg.r_matrix(n_meas, n_anchor),
        n_anchor=n_anchor,
    )


def build_nonlinear_filter_model(known: SystemModel, dt: float,
                                 noise_cfg: FilterNoiseConfig,
                                 measured: tuple[str, ...] = ("acceleration",),
                                 discretization: str = "euler",
                                 ) -> NonlinearFilterModel:
    """Filter model for a nonlinear approximate system.

    f2 is the explicit Euler step of the known dynamics driven by input and
    residual force (discretization="rk4" substitutes a 4-stage step on the
    same drift); h maps to measured accelerations/displacements.
    """
    if known.has_hysteresis:
        raise ValueError("hysteretic known models are not supported by the filters")
    if discretization not in ("euler", "rk4"):
        raise ValueError(f"unknown discretization {discretization!r}")
    n = known.n_dof
    minv = known.minv
    sign = known.stiffness_sign

    def drift(y, u, r):
        x, v = y[:n], y[n:]
        nl = dynamics.nonlinear_force(known, x, v)
        acc = minv @ (u - known.damping @ v - sign * (known.stiffness @ x) - nl - r)
        return np.concatenate([v, acc])

    if discretization == "euler":
        def f2(y, u, r):
            return y + drift(y, u, r) * dt
    else:
        def f2(y, u, r):
            k1 = drift(y, u, r)
            k2 = drift(y + 0.5 * dt * k1, u, r)
            k3 = drift(y + 0.5 * dt * k2, u, r)
            k4 = drift(y + dt * k3, u, r)
            return y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    want_acc = "acceleration" in measured
    want_disp = "displacement" in measured
    if not (want_acc or want_disp):
        raise ValueError("at least one measured quantity is required")
    n_meas = n * (int(want_acc) + int(want_disp))
    anchor = noise_cfg.displacement_anchor_std is not None and not want_disp
    n_anchor = n if anchor else 0

    def h(y, r, u):
        x, v = y[:n], y[n:]
        parts = []
        if want_acc:
            nl = dynamics.nonlinear_force(known, x, v)
            parts.append(
                minv @ (u - known.damping @ v - sign * (known.stiffness @ x) - nl - r)
            )
        if want_disp:
            parts.append(x)
        if anchor:
            parts.append(x)
        return np.concatenate(parts)

    q1 = noise_cfg.q1_matrix(n)
    q2 = noise_cfg.q2_matrix(2 * n)
    if noise_cfg.q_state_from_force:
        # force enters the Euler step through -dt * M^-1
        c_equiv = np.vstack([np.zeros((n, n)), -dt * minv])
        q2 = q2 + noise_cfg.q_state_from_force * (c_equiv @ q1 @ c_equiv.T)
    return NonlinearFilterModel(
        f1=lambda r: r,
        f2=f2,
        h=h,
        n_state=2 * n,
        n_force=n,
        n_meas=n_meas,
        q1=q1,
        q2=q2,
        r_meas=noise_cfg.r_matrix(n_meas, n_anchor),
        n_anchor=n_anchor,
    )


def _sym(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def _chol_psd(p: np.ndarray, step: int) -> np.ndarray:
    """Lower Cholesky factor with eigenvalue clipping as the fallback."""
    p = _sym(p)
    try:
        return np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(p)
    w = np.clip(w, 0.0, None)
    repaired = _sym(v @ np.diag(w) @ v.T) + 1e-12 * max(1.0, w.max()) * np.eye(p.shape[0])
    try:
        return np.linalg.cholesky(repaired)
    except np.linalg.LinAlgError:
        raise FilterFailure(step, "covariance square root failed after PSD repair")


def _sigma_points(mean: np.ndarray, cov: np.ndarray, weights: UtWeights,
                  step: int) -> np.ndarray:
    """(2L+1, L) array: mean, then mean +/- scale * columns of chol(P)."""
    root = weights.scale * _chol_psd(cov, step)
    pts = np.empty((2 * weights.L + 1, mean.size))
    pts[0] = mean
    pts[1:weights.L + 1] = mean[None, :] + root.T
    pts[weights.L + 1:] = mean[None, :] - root.T
    return pts


def _ut_moments(points: np.ndarray, weights: UtWeights,
                noise: np.ndarray | None = None):
    mean = weights.w_mean @ points
    dev = points - mean[None, :]
    cov = (dev * weights.w_cov[:, None]).T @ dev
    if noise is not None:
        cov = cov + noise
    return mean, _sym(cov)


def _check_finite(step: int, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise FilterFailure(step, "non-finite values encountered")


def run_dkf(model: LinearFilterModel, measurements: TimeSeries,
            known_input: TimeSeries, init: FilterInit) -> EstimateSeries:
    """Dual Kalman filter over the full measurement record.

    Per step: force measurement update, state measurement update with the
    updated force, force time update (random walk), state time update.
    """
    z_all = measurements.values
    u_all = known_input.values
    n_steps = z_all.shape[0]
    if u_all.shape[0] < n_steps:
        raise ValueError("known_input shorter than measurements")
    if z_all.shape[1] != model.n_meas:
        raise ValueError(
            f"got {z_all.shape[1]} measurement channels, model has {model.n_meas}"
        )
    if model.n_anchor:
        z_all = np.hstack([z_all, np.zeros((n_steps, model.n_anchor))])
    a_d, b_d, c_d = model.a_d, model.b_d, model.c_d
    a_m, c_m, d_m = model.a_m, model.c_m, model.d_m
    t_f = model.t
    p_s = init.state_mean.astype(float).copy()
    cov_s = init.state_cov.astype(float).copy()
    p_f = init.force_mean.astype(float).copy()
    cov_f = init.force_cov.astype(float).copy()

    out_state = np.empty((n_steps, model.n_state))
    out_state_cov = np.empty((n_steps, model.n_state, model.n_state))
    out_force = np.empty((n_steps, model.n_force))
    out_force_cov = np.empty((n_steps, model.n_force, model.n_force))

    for k in range(n_steps):
        z = z_all[k]
        u = u_all[k]
        feed = d_m @ u
        # measurement update I: residual force
        e_f = z - (a_m @ p_s + c_m @ p_f + feed)
        s_f = c_m @ cov_f @ c_m.T + model.r_meas
        try:
            gain_f = np.linalg.solve(s_f, c_m @ cov_f).T
        except np.linalg.LinAlgError:
            raise FilterFailure(k, "force innovation covariance not invertible")
        c_f_upd = p_f + gain_f @ e_f
        cov_f_upd = _sym(cov_f - gain_f @ c_m @ cov_f)
        # measurement update II: state, using the freshly updated force
        e_s = z - (a_m @ p_s + c_m @ c_f_upd + feed)
        s_s = a_m @ cov_s @ a_m.T + model.r_meas
        try:
            gain_s = np.linalg.solve(s_s, a_m @ cov_s).T
        except np.linalg.LinAlgError:
            raise FilterFailure(k, "state innovation covariance not invertible")
        c_s_upd = p_s + gain_s @ e_s
        cov_s_upd = _sym(cov_s - gain_s @ a_m @ cov_s)
        _check_finite(k, c_f_upd, c_s_upd, cov_f_upd, cov_s_upd)
        out_force[k] = c_f_upd
        out_force_cov[k] = cov_f_upd
        out_state[k] = c_s_upd
        out_state_cov[k] = cov_s_upd
        # time update I: force random walk
        p_f = t_f @ c_f_upd
        cov_f = _sym(t_f @ cov_f_upd @ t_f.T + model.q1)
        # time update II: state
        p_s = a_d @ c_s_upd + b_d @ u + c_d @ c_f_upd
        cov_s = _sym(a_d @ cov_s_upd @ a_d.T + model.q2)

    return EstimateSeries(measurements.dt, out_state, out_state_cov,
                          out_force, out_force_cov)


def run_dukf(model: NonlinearFilterModel, measurements: TimeSeries,
             known_input: TimeSeries, init: FilterInit,
             alpha: float = 1.0, beta: float = 2.0, kappa: float = 0.0,
             ) -> EstimateSeries:
    """Dual unscented Kalman filter with separate force/state sigma sets.

    The force measurement update holds the state at its predicted mean; the
    state update then uses the updated force mean. Time updates redraw sigma
    points around the posteriors and push them through the transitions.
    """
    z_all = measurements.values
    u_all = known_input.values
    n_steps = z_all.shape[0]
    if u_all.shape[0] < n_steps:
        raise ValueError("known_input shorter than measurements")
    if z_all.shape[1] != model.n_meas:
        raise ValueError(
            f"got {z_all.shape[1]} measurement channels, model has {model.n_meas}"
        )
    if model.n_anchor:
        z_all = np.hstack([z_all, np.zeros((n_steps, model.n_anchor))])
    w_f = compute_ut_weights(model.n_force, alpha, beta, kappa)
    w_s = compute_ut_weights(model.n_state, alpha, beta, kappa)

    m1 = init.force_mean.astype(float).copy()
    p1 = init.force_cov.astype(float).copy()
    m2 = init.state_mean.astype(float).copy()
    p2 = init.state_cov.astype(float).copy()

    out_state = np.empty((n_steps, model.n_state))
    out_state_cov = np.empty((n_steps, model.n_state, model.n_state))
    out_force = np.empty((n_steps, model.n_force))
    out_force_cov = np.empty((n_steps, model.n_force, model.n_force))

    for k in range(n_steps):
        z = z_all[k]
        u = u_all[k]
        # measurement update I: force sigma set, state fixed at its mean
        f_sig = _sigma_points(m1, p1, w_f, k)
        z_sig = np.array([model.h(m2, fi, u) for fi in f_sig])
        _check_finite(k, z_sig)
        mu1, s1 = _ut_moments(z_sig, w_f, model.r_meas)
        dev_f = f_sig - m1[None, :]
        dev_z = z_sig - mu1[None, :]
        c1 = (dev_f * w_f.w_cov[:, None]).T @ dev_z
        try:
            k1 = np.linalg.solve(s1.T, c1.T).T
        except np.linalg.LinAlgError:
            raise FilterFailure(k, "force innovation covariance not invertible")
        m1_upd = m1 + k1 @ (z - mu1)
        p1_upd = _sym(p1 - k1 @ s1 @ k1.T)
        # measurement update II: state sigma set, force fixed at updated mean
        y_sig = _sigma_points(m2, p2, w_s, k)
        z2_sig = np.array([model.h(yi, m1_upd, u) for yi in y_sig])
        _check_finite(k, z2_sig)
        mu2, s2 = _ut_moments(z2_sig, w_s, model.r_meas)
        dev_y = y_sig - m2[None, :]
        dev_z2 = z2_sig - mu2[None, :]
        c2 = (dev_y * w_s.w_cov[:, None]).T @ dev_z2
        try:
            k2 = np.linalg.solve(s2.T, c2.T).T
        except np.linalg.LinAlgError:
            raise FilterFailure(k, "state innovation covariance not invertible")
        m2_upd = m2 + k2 @ (z - mu2)
        p2_upd = _sym(p2 - k2 @ s2 @ k2.T)
        _check_finite(k, m1_upd, m2_upd, p1_upd, p2_upd)
        out_force[k] = m1_upd
        out_force_cov[k] = p1_upd
        out_state[k] = m2_upd
        out_state_cov[k] = p2_upd
        # time update I: force through f1
        f_sig2 = _sigma_points(m1_upd, p1_upd, w_f, k)
        f_prop = np.array([model.f1(fi) for fi in f_sig2])
        m1, p1 = _ut_moments(f_prop, w_f, model.q1)
        # time update II: state through f2 at the updated force mean
        y_sig2 = _sigma_points(m2_upd, p2_upd, w_s, k)
        y_prop = np.array([model.f2(yi, u, m1_upd) for yi in y_sig2])
        _check_finite(k, y_prop)
        m2, p2 = _ut_moments(y_prop, w_s, model.q2)

    return EstimateSeries(measurements.dt, out_state, out_state_cov,
                          out_force, out_force_cov)


def write_estimates_csv(est: EstimateSeries, means_path, covdiag_path,
                        n_dof: int, meta: dict | None = None) -> None:
    """Serialize filtered means plus the covariance diagonals as CSV pairs."""
    from .timeseries import write_csv

    labels = (
        [f"x{i + 1}" for i in range(n_dof)]
        + [f"v{i + 1}" for i in range(n_dof)]
        + [f"r{i + 1}" for i in range(est.force_mean.shape[1])]
    )
    means = np.hstack([est.state_mean, est.force_mean])
    write_csv(TimeSeries(est.dt, labels, means), means_path, meta)
    var_labels = [f"var_{l}" for l in labels]
    variances = np.hstack([
        np.einsum("kii->ki", est.state_cov),
        np.einsum("kii->ki", est.force_cov),
    ])
    write_csv(TimeSeries(est.dt, var_labels, variances), covdiag_path, meta)
