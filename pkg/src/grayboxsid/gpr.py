"""Gaussian-process maps from estimated states to estimated residual forces.

One independent GP is fitted per residual channel. Hyperparameters (signal
variance, per-dimension lengthscales, observation noise, optionally a
constant mean) are found by maximizing the log marginal likelihood with
analytic gradients, L-BFGS-B on log-parameters, and seeded multi-start.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .filters import EstimateSeries

__all__ = [
    "SquaredExponential",
    "Matern32",
    "Matern52",
    "ZeroMean",
    "ConstantMean",
    "GpModel",
    "GpFitError",
    "FitConfig",
    "FeatureSpec",
    "fit",
    "predict",
    "predict_mean",
    "log_marginal_likelihood",
    "select_features",
    "save_gp_models",
    "load_gp_models",
]

SQRT3 = np.sqrt(3.0)
SQRT5 = np.sqrt(5.0)


class GpFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class SquaredExponential:
    signal_var: float
    lengthscales: tuple[float, ...]


@dataclass(frozen=True)
class Matern32:
    signal_var: float
    lengthscales: tuple[float, ...]


@dataclass(frozen=True)
class Matern52:
    signal_var: float
    lengthscales: tuple[float, ...]


Kernel = SquaredExponential | Matern32 | Matern52

_KERNEL_FAMILIES = {
    "squared_exponential": SquaredExponential,
    "matern32": Matern32,
    "matern52": Matern52,
}


@dataclass(frozen=True)
class ZeroMean:
    def value(self) -> float:
        return 0.0


@dataclass(frozen=True)
class ConstantMean:
    constant: float

    def value(self) -> float:
        return self.constant


MeanFunction = ZeroMean | ConstantMean


def _scaled_diffs(x1: np.ndarray, x2: np.ndarray,
                  lengthscales: np.ndarray) -> np.ndarray:
    """Per-dimension squared differences scaled by lengthscales, (N1,N2,D)."""
    d = (x1[:, None, :] - x2[None, :, :]) / lengthscales[None, None, :]
    return d * d


def kernel_matrix(kernel: Kernel, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    ls = np.asarray(kernel.lengthscales, dtype=float)
    sq = _scaled_diffs(x1, x2, ls)
    r2 = sq.sum(axis=2)
    s2 = kernel.signal_var
    if isinstance(kernel, SquaredExponential):
        return s2 * np.exp(-0.5 * r2)
    r = np.sqrt(np.maximum(r2, 0.0))
    if isinstance(kernel, Matern32):
        return s2 * (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)
    if isinstance(kernel, Matern52):
        return s2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-SQRT5 * r)
    raise TypeError(f"unknown kernel {kernel!r}")


def _kernel_and_grads(family, s2: float, ls: np.ndarray, x: np.ndarray):
    """K_f(X, X) and its derivatives w.r.t. log(s2) and each log(l_d).

    Returns (kf, dk_dlog_s2, list of dk_dlog_ld).
    """
    sq = _scaled_diffs(x, x, ls)
    r2 = sq.sum(axis=2)
    if family is SquaredExponential:
        kf = s2 * np.exp(-0.5 * r2)
        dls = [kf * sq[:, :, d] for d in range(ls.size)]
        return kf, kf, dls
    r = np.sqrt(np.maximum(r2, 0.0))
    if family is Matern32:
        e = np.exp(-SQRT3 * r)
        kf = s2 * (1.0 + SQRT3 * r) * e
        dls = [3.0 * s2 * e * sq[:, :, d] for d in range(ls.size)]
        return kf, kf, dls
    if family is Matern52:
        e = np.exp(-SQRT5 * r)
        kf = s2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * e
        base = (5.0 / 6.0) * s2 * (1.0 + SQRT5 * r) * e
        dls = [2.0 * base * sq[:, :, d] for d in range(ls.size)]
        return kf, kf, dls
    raise TypeError(f"unknown kernel family {family}")


@dataclass
class GpModel:
    """A fitted per-channel GP with its cached Cholesky factorization."""

    kernel: Kernel
    mean: MeanFunction
    noise_var: float
    train_x: np.ndarray
    train_y: np.ndarray
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    log_likelihood: float = float("nan")

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]

    @property
    def n_features(self) -> int:
        return self.train_x.shape[1]


def _factorize(k: np.ndarray, signal_var: float):
    """Lower Cholesky with jitter escalation bounded by 1e-4 * signal_var."""
    jitter = 0.0
    scale = max(signal_var, 1e-300)
    while True:
        try:
            return cholesky(k + jitter * np.eye(k.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = 1e-12 * scale if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-4 * scale:
                raise GpFitError("kernel matrix not factorizable within jitter budget")


def log_marginal_likelihood(family, theta: np.ndarray, x: np.ndarray,
                            y: np.ndarray, with_mean: bool):
    """Log marginal likelihood and its gradient in the packed parameters.

    theta = [log s2, log l_1..log l_D, log noise_var, (mean constant)].
    """
    n, d = x.shape
    s2 = float(np.exp(theta[0]))
    ls = np.exp(theta[1:1 + d])
    noise = float(np.exp(theta[1 + d]))
    mean_const = float(theta[2 + d]) if with_mean else 0.0
    kf, dk_ds2, dk_dls = _kernel_and_grads(family, s2, ls, x)
    k = kf + noise * np.eye(n)
    try:
        low = cholesky(k, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.full(theta.size, np.nan)
    resid = y - mean_const
    alpha = cho_solve((low, True), resid)
    logdet = 2.0 * np.sum(np.log(np.diag(low)))
    lml = -0.5 * float(resid @ alpha) - 0.5 * logdet - 0.5 * n * np.log(2.0 * np.pi)
    kinv = cho_solve((low, True), np.eye(n))
    inner = np.outer(alpha, alpha) - kinv
    grad = np.empty(theta.size)
    grad[0] = 0.5 * float(np.sum(inner * dk_ds2))
    for j, dk in enumerate(dk_dls):
        grad[1 + j] = 0.5 * float(np.sum(inner * dk))
    grad[1 + d] = 0.5 * float(np.trace(inner)) * noise
    if with_mean:
        grad[2 + d] = float(np.sum(alpha))
    return lml, grad


@dataclass
class FitConfig:
    kernel_family: str = "squared_exponential"
    mean_family: str = "zero"
    n_restarts: int = 8
    seed: int = 0
    max_iter: int = 200
    noise_floor: float = 1e-10

    def __post_init__(self):
        if self.kernel_family not in _KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.kernel_family!r}")
        if self.mean_family not in ("zero", "constant"):
            raise ValueError(f"unknown mean family {self.mean_family!r}")


def fit(train_x: np.ndarray, train_y: np.ndarray,
        cfg: FitConfig | None = None) -> GpModel:
    """Maximum-likelihood hyperparameter fit with seeded multi-start."""
    cfg = cfg or FitConfig()
    x = np.atleast_2d(np.asarray(train_x, dtype=float))
    y = np.asarray(train_y, dtype=float).ravel()
    n, d = x.shape
    if n < 2:
        raise GpFitError("need at least two training points")
    if y.size != n:
        raise GpFitError(f"{y.size} targets for {n} inputs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise GpFitError("training data contains non-finite values")
    family = _KERNEL_FAMILIES[cfg.kernel_family]
    with_mean = cfg.mean_family == "constant"

    var_y = float(np.var(y))
    scale_y = max(var_y, 1.0)
    s2_floor = 1e-10 * scale_y
    spread = np.std(x, axis=0)
    spread[spread == 0] = 1.0
    base = np.concatenate([
        [np.log(max(var_y, 1e-10 * scale_y))],
        np.log(spread),
        [np.log(max(1e-4 * scale_y, cfg.noise_floor))],
    ])
    bounds = (
        [(np.log(s2_floor), np.log(1e8 * scale_y))]
        + [(np.log(sp) + np.log(1e-4), np.log(sp) + np.log(1e4)) for sp in spread]
        + [(np.log(cfg.noise_floor), np.log(1e4 * scale_y))]
    )
    if with_mean:
        base = np.concatenate([base, [float(np.mean(y))]])
        span = max(float(np.max(np.abs(y))), 1.0)
        bounds.append((-1e3 * span, 1e3 * span))

    rng = np.random.default_rng(cfg.seed)
    starts = [base]
    # second deterministic start: tighter lengthscales, noisier observations
    alt = base.copy()
    alt[1:1 + d] -= np.log(4.0)
    alt[1 + d] = np.log(max(1e-2 * scale_y, cfg.noise_floor))
    starts.append(alt)
    for _ in range(max(cfg.n_restarts - 2, 0)):
        pert = base.copy()
        pert[0] += rng.uniform(-1.5, 1.5)
        pert[1:1 + d] += rng.uniform(-2.3, 1.2, size=d)
        pert[1 + d] += rng.uniform(-3.0, 3.0)
        starts.append(pert)

    def neg(theta):
        lml, grad = log_marginal_likelihood(family, theta, x, y, with_mean)
        if not np.isfinite(lml):
            return 1e25, np.zeros(theta.size)
        return -lml, -grad

    best = None
    diagnostics = []
    for theta0 in starts:
        theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
        res = minimize(neg, theta0, jac=True, method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": cfg.max_iter})
        lml = -res.fun
        diagnostics.append(f"start lml={lml:.4g} ({res.message})")
        if np.isfinite(lml) and (best is None or lml > best[0]):
            best = (lml, res.x)
    if best is None:
        raise GpFitError("no restart produced a finite likelihood; " +
                         "; ".join(diagnostics))
    lml, theta = best
    s2 = float(np.exp(theta[0]))
    ls = tuple(float(v) for v in np.exp(theta[1:1 + d]))
    noise = float(np.exp(theta[1 + d]))
    mean = ConstantMean(float(theta[2 + d])) if with_mean else ZeroMean()
    kernel = family(signal_var=s2, lengthscales=ls)
    return _finalize(kernel, mean, noise, x, y, lml)


def _finalize(kernel: Kernel, mean: MeanFunction, noise_var: float,
              x: np.ndarray, y: np.ndarray, lml: float = float("nan")) -> GpModel:
    k = kernel_matrix(kernel, x, x) + noise_var * np.eye(x.shape[0])
    low, _ = _factorize(k, kernel.signal_var)
    alpha = cho_solve((low, True), y - mean.value())
    return GpModel(kernel=kernel, mean=mean, noise_var=noise_var,
                   train_x=x, train_y=y, chol=low, alpha=alpha,
                   log_likelihood=lml)


def make_model(kernel: Kernel, mean: MeanFunction, noise_var: float,
               train_x: np.ndarray, train_y: np.ndarray) -> GpModel:
    """Assemble a GpModel from explicit hyperparameters (no optimization)."""
    x = np.atleast_2d(np.asarray(train_x, dtype=float))
    y = np.asarray(train_y, dtype=float).ravel()
    return _finalize(kernel, mean, noise_var, x, y)


def predict(model: GpModel, query_x: np.ndarray):
    """Posterior mean and covariance at the query points."""
    xq = np.atleast_2d(np.asarray(query_x, dtype=float))
    if xq.shape[1] != model.n_features:
        raise ValueError(
            f"query dimension {xq.shape[1]} != training dimension {model.n_features}"
        )
    k_star = kernel_matrix(model.kernel, xq, model.train_x)
    mean = model.mean.value() + k_star @ model.alpha
    v = solve_triangular(model.chol, k_star.T, lower=True)
    cov = kernel_matrix(model.kernel, xq, xq) - v.T @ v
    cov = 0.5 * (cov + cov.T)
    np.fill_diagonal(cov, np.maximum(np.diag(cov), 0.0))
    return mean, cov


def predict_mean(model: GpModel, query_x: np.ndarray) -> np.ndarray:
    """Posterior mean only (fast path used inside forward solves)."""
    xq = np.atleast_2d(np.asarray(query_x, dtype=float))
    k_star = kernel_matrix(model.kernel, xq, model.train_x)
    return model.mean.value() + k_star @ model.alpha


@dataclass
class FeatureSpec:
    """Which state channels feed each residual channel's GP.

    features maps residual-channel index to a list of flat state indices
    (displacements then velocities); None selects all 2n states. Training
    rows are subsampled by stride and additionally thinned to max_points.
    """

    features: dict[int, list[int]] | None = None
    stride: int = 1
    max_points: int = 2000

    def indices_for(self, channel: int, n_state: int) -> list[int]:
        if self.features is None:
            return list(range(n_state))
        if channel not in self.features:
            raise ValueError(f"no feature set for residual channel {channel}")
        idx = list(self.features[channel])
        if not idx:
            raise ValueError(f"empty feature set for residual channel {channel}")
        if any(i < 0 or i >= n_state for i in idx):
            raise ValueError(f"feature index out of range for channel {channel}")
        return idx


def neighborhood_features(n_dof: int, reach: int = 1) -> dict[int, list[int]]:
    """Feature sets using each DOF's displacement/velocity neighborhood."""
    spec = {}
    for ch in range(n_dof):
        dofs = [i for i in range(max(0, ch - reach), min(n_dof, ch + reach + 1))]
        spec[ch] = dofs + [n_dof + i for i in dofs]
    return spec


def select_features(estimates: EstimateSeries, spec: FeatureSpec | None = None,
                    n_channels: int | None = None):
    """Assemble per-residual-channel (train_x, train_y) from filter means."""
    spec = spec or FeatureSpec()
    n_state = estimates.state_mean.shape[1]
    n_channels = n_channels or estimates.force_mean.shape[1]
    n_rows = estimates.state_mean.shape[0]
    stride = max(spec.stride, 1)
    if spec.max_points is not None and n_rows // stride > spec.max_points:
        stride = int(np.ceil(n_rows / spec.max_points))
    rows = np.arange(0, n_rows, stride)
    out = []
    for ch in range(n_channels):
        idx = spec.indices_for(ch, n_state)
        out.append((
            estimates.state_mean[np.ix_(rows, idx)],
            estimates.force_mean[rows, ch],
        ))
    return out


def _digest(x: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x).tobytes())
    h.update(np.ascontiguousarray(y).tobytes())
    return h.hexdigest()[:16]


def save_gp_models(models: list[GpModel], path) -> None:
    """Self-describing JSON with hyperparameters and embedded training data."""
    doc = {"format": "grayboxsid-gp-v1", "channels": []}
    for m in models:
        family = {SquaredExponential: "squared_exponential",
                  Matern32: "matern32", Matern52: "matern52"}[type(m.kernel)]
        doc["channels"].append({
            "kernel": {
                "family": family,
                "signal_var": m.kernel.signal_var,
                "lengthscales": list(m.kernel.lengthscales),
            },
            "mean": {"family": "constant", "constant": m.mean.value()}
            if isinstance(m.mean, ConstantMean) else {"family": "zero"},
            "noise_var": m.noise_var,
            "log_likelihood": m.log_likelihood,
            "digest": _digest(m.train_x, m.train_y),
            "train_x": m.train_x.tolist(),
            "train_y": m.train_y.tolist(),
        })
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_gp_models(path) -> list[GpModel]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "grayboxsid-gp-v1":
        raise ValueError(f"{path}: not a GP model file")
    models = []
    for ch in doc["channels"]:
        family = _KERNEL_FAMILIES[ch["kernel"]["family"]]
        kernel = family(
            signal_var=float(ch["kernel"]["signal_var"]),
            lengthscales=tuple(float(v) for v in ch["kernel"]["lengthscales"]),
        )
        mean = (ConstantMean(float(ch["mean"]["constant"]))
                if ch["mean"]["family"] == "constant" else ZeroMean())
        x = np.asarray(ch["train_x"], dtype=float)
        y = np.asarray(ch["train_y"], dtype=float)
        if ch.get("digest") and ch["digest"] != _digest(x, y):
            raise ValueError(f"{path}: training-data digest mismatch")
        model = _finalize(kernel, mean, float(ch["noise_var"]), x, y,
                          float(ch.get("log_likelihood", float("nan"))))
        models.append(model)
    return models
