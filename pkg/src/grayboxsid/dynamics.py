"""Chain-topology MDOF oscillator models and their deterministic dynamics.

A model is ``M x'' + C x' + s K x + N(x, x') = F`` with diagonal white-noise
intensity ``S`` on the force side; ``s`` is -1 only for the softening
single-DOF variant whose linear stiffness enters with a negative sign.
Three nonlinearity families are supported: a cubic (Duffing) spring on every
chain element, a hysteretic Bouc-Wen element attached to one DOF, and the
cubic term of the Duffing-Van der Pol oscillator.

All functions here are pure; integrators and filters build on the flat-state
helpers (``state_size``, ``drift``, ``drift_jacobian``) where the state is
packed as ``[x_1..x_n, v_1..v_n, (z)]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "DuffingChain",
    "BoucWen",
    "DuffingVanDerPol",
    "Nonlinearity",
    "SystemModel",
    "AugmentedState",
    "chain_matrices",
    "eval_rhs",
    "true_residual",
]


@dataclass(frozen=True)
class DuffingChain:
    """Cubic spring in every chain element: spring i exerts alpha*(x_i - x_{i-1})^3."""

    alpha: float


@dataclass(frozen=True)
class BoucWen:
    """Hysteretic element (1 - k_r) * q_y * z attached to one DOF.

    The auxiliary state obeys
    z' = (alpha*v - gamma*z*|v|*|z|**(eta-1) - beta*v*|z|**eta) / d_y
    with v the attached DOF's velocity.
    """

    alpha: float
    beta: float
    gamma: float
    eta: float
    k_r: float
    d_y: float
    q_y: float
    attached_dof: int = 0

    def __post_init__(self):
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        if not self.d_y > 0:
            raise ValueError("d_y must be positive")
        if self.q_y < 0:
            raise ValueError("q_y must be >= 0")

    def zdot(self, v: float, z: float) -> float:
        az = abs(z)
        return (
            self.alpha * v
            - self.gamma * z * abs(v) * az ** (self.eta - 1)
            - self.beta * v * az**self.eta
        ) / self.d_y

    def zdot_grad(self, v: float, z: float) -> tuple[float, float]:
        """(d zdot / d v, d zdot / d z)."""
        az = abs(z)
        d_v = (
            self.alpha
            - self.gamma * z * np.sign(v) * az ** (self.eta - 1)
            - self.beta * az**self.eta
        ) / self.d_y
        # d/dz [z*|z|^(eta-1)] = eta*|z|^(eta-1); d/dz |z|^eta = eta*sign(z)*|z|^(eta-1)
        d_z = (
            -self.gamma * abs(v) * self.eta * az ** (self.eta - 1)
            - self.beta * v * self.eta * np.sign(z) * az ** (self.eta - 1)
        ) / self.d_y
        return d_v, d_z

    @property
    def force_scale(self) -> float:
        return (1.0 - self.k_r) * self.q_y


@dataclass(frozen=True)
class DuffingVanDerPol:
    """Single-DOF cubic term alpha*x^3, optionally with -k*x linear stiffness."""

    alpha: float
    negative_linear_stiffness: bool = False


Nonlinearity = DuffingChain | BoucWen | DuffingVanDerPol | None


def chain_matrices(per_element: np.ndarray) -> np.ndarray:
    """Assemble the symmetric chain matrix from per-element coefficients.

    Element i (1-based) connects DOF i-1 to DOF i, element 1 to ground.
    """
    k = np.asarray(per_element, dtype=float)
    n = k.size
    mat = np.zeros((n, n))
    for i in range(n):
        mat[i, i] += k[i]
        if i + 1 < n:
            mat[i, i] += k[i + 1]
            mat[i, i + 1] -= k[i + 1]
            mat[i + 1, i] -= k[i + 1]
    return mat


@dataclass
class SystemModel:
    """Mass/damping/stiffness matrices plus a nonlinearity description.

    noise_intensity is the diagonal white-noise intensity matrix (N);
    noise_mode selects additive forcing noise or the displacement-
    multiplicative variant (single-DOF only).
    """

    mass: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray
    nonlinearity: Nonlinearity = None
    noise_intensity: np.ndarray | None = None
    noise_mode: str = "additive"

    def __post_init__(self):
        self.mass = np.atleast_2d(np.asarray(self.mass, dtype=float))
        self.damping = np.atleast_2d(np.asarray(self.damping, dtype=float))
        self.stiffness = np.atleast_2d(np.asarray(self.stiffness, dtype=float))
        n = self.mass.shape[0]
        for name, mat in (("mass", self.mass), ("damping", self.damping),
                          ("stiffness", self.stiffness)):
            if mat.shape != (n, n):
                raise ValueError(f"{name} must be {n}x{n}, got {mat.shape}")
            if not np.allclose(mat, mat.T, atol=1e-12 * max(1.0, abs(mat).max())):
                raise ValueError(f"{name} must be symmetric")
        try:
            np.linalg.cholesky(self.mass)
        except np.linalg.LinAlgError:
            raise ValueError("mass matrix must be symmetric positive definite")
        if self.noise_intensity is None:
            self.noise_intensity = np.zeros((n, n))
        else:
            sig = np.asarray(self.noise_intensity, dtype=float)
            if sig.ndim <= 1:
                sig = np.diag(np.broadcast_to(sig, (n,)).astype(float))
            self.noise_intensity = sig
        if self.noise_intensity.shape != (n, n):
            raise ValueError("noise_intensity must be n x n")
        if np.any(np.diag(self.noise_intensity) < 0):
            raise ValueError("noise intensities must be >= 0")
        if self.noise_mode not in ("additive", "multiplicative"):
            raise ValueError(f"unknown noise_mode {self.noise_mode!r}")
        if self.noise_mode == "multiplicative" and n != 1:
            raise ValueError("multiplicative noise is supported for single-DOF models only")
        if isinstance(self.nonlinearity, BoucWen):
            if not 0 <= self.nonlinearity.attached_dof < n:
                raise ValueError("Bouc-Wen attached_dof out of range")
        if isinstance(self.nonlinearity, DuffingVanDerPol) and n != 1:
            raise ValueError("Duffing-Van der Pol nonlinearity is single-DOF")

    @property
    def n_dof(self) -> int:
        return self.mass.shape[0]

    @cached_property
    def minv(self) -> np.ndarray:
        return np.linalg.inv(self.mass)

    @property
    def has_hysteresis(self) -> bool:
        return isinstance(self.nonlinearity, BoucWen)

    @property
    def stiffness_sign(self) -> float:
        nl = self.nonlinearity
        if isinstance(nl, DuffingVanDerPol) and nl.negative_linear_stiffness:
            return -1.0
        return 1.0

    @classmethod
    def chain(cls, masses, dampings, stiffnesses, nonlinearity=None,
              noise_intensity=None, noise_mode="additive") -> "SystemModel":
        """Build a chain-topology model from per-DOF masses and per-element c, k."""
        return cls(
            mass=np.diag(np.asarray(masses, dtype=float)),
            damping=chain_matrices(dampings),
            stiffness=chain_matrices(stiffnesses),
            nonlinearity=nonlinearity,
            noise_intensity=noise_intensity,
            noise_mode=noise_mode,
        )


@dataclass
class AugmentedState:
    """Displacements, velocities and (Bouc-Wen only) the hysteretic state."""

    displacement: np.ndarray
    velocity: np.ndarray
    hysteretic: float | None = None

    def __post_init__(self):
        self.displacement = np.atleast_1d(np.asarray(self.displacement, dtype=float))
        self.velocity = np.atleast_1d(np.asarray(self.velocity, dtype=float))
        if self.displacement.shape != self.velocity.shape:
            raise ValueError("displacement and velocity must have equal length")

    @classmethod
    def zero(cls, model: SystemModel) -> "AugmentedState":
        n = model.n_dof
        z = 0.0 if model.has_hysteresis else None
        return cls(np.zeros(n), np.zeros(n), z)


def state_size(model: SystemModel) -> int:
    return 2 * model.n_dof + (1 if model.has_hysteresis else 0)


def pack_state(model: SystemModel, state: AugmentedState) -> np.ndarray:
    parts = [state.displacement, state.velocity]
    if model.has_hysteresis:
        if state.hysteretic is None:
            raise ValueError("Bouc-Wen model requires a hysteretic state")
        parts.append([state.hysteretic])
    elif state.hysteretic is not None:
        raise ValueError("hysteretic state given for a model without hysteresis")
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def unpack_state(model: SystemModel, y: np.ndarray) -> AugmentedState:
    n = model.n_dof
    z = float(y[2 * n]) if model.has_hysteresis else None
    return AugmentedState(y[:n].copy(), y[n:2 * n].copy(), z)


def nonlinear_force(model: SystemModel, x: np.ndarray, v: np.ndarray,
                    z: float | None = None) -> np.ndarray:
    """The nonlinearity vector N(x, v[, z]) on the force side of the balance."""
    n = model.n_dof
    nl = model.nonlinearity
    out = np.zeros(n)
    if nl is None:
        return out
    if isinstance(nl, DuffingChain):
        elong = np.diff(np.concatenate([[0.0], x]))
        f_el = nl.alpha * elong**3
        out += f_el
        out[:-1] -= f_el[1:]
        return out
    if isinstance(nl, BoucWen):
        if z is None:
            raise ValueError("Bouc-Wen force needs the hysteretic state z")
        out[nl.attached_dof] = nl.force_scale * z
        return out
    if isinstance(nl, DuffingVanDerPol):
        out[0] = nl.alpha * x[0] ** 3
        return out
    raise TypeError(f"unknown nonlinearity {nl!r}")


def nonlinear_force_jacobian(model: SystemModel, x: np.ndarray, v: np.ndarray,
                             z: float | None = None):
    """(dN/dx, dN/dz) -- N never depends on velocity in the supported families."""
    n = model.n_dof
    nl = model.nonlinearity
    dx = np.zeros((n, n))
    dz = np.zeros(n)
    if nl is None:
        return dx, dz
    if isinstance(nl, DuffingChain):
        elong = np.diff(np.concatenate([[0.0], x]))
        stiff = 3.0 * nl.alpha * elong**2
        for i in range(n):
            dx[i, i] += stiff[i]
            if i > 0:
                dx[i, i - 1] -= stiff[i]
            if i + 1 < n:
                dx[i, i] += stiff[i + 1]
                dx[i, i + 1] -= stiff[i + 1]
        return dx, dz
    if isinstance(nl, BoucWen):
        dz[nl.attached_dof] = nl.force_scale
        return dx, dz
    if isinstance(nl, DuffingVanDerPol):
        dx[0, 0] = 3.0 * nl.alpha * x[0] ** 2
        return dx, dz
    raise TypeError(f"unknown nonlinearity {nl!r}")


def restoring_force(model: SystemModel, state: AugmentedState) -> np.ndarray:
    """C v + s K x + N: everything the model moves to the force side."""
    return (
        model.damping @ state.velocity
        + model.stiffness_sign * (model.stiffness @ state.displacement)
        + nonlinear_force(model, state.displacement, state.velocity, state.hysteretic)
    )


def acceleration(model: SystemModel, state: AugmentedState,
                 force: np.ndarray) -> np.ndarray:
    force = np.asarray(force, dtype=float)
    if force.shape != (model.n_dof,):
        raise ValueError(f"force must have shape ({model.n_dof},), got {force.shape}")
    return model.minv @ (force - restoring_force(model, state))


def eval_rhs(model: SystemModel, state: AugmentedState,
             force: np.ndarray) -> AugmentedState:
    """Time derivative of the augmented state under the deterministic force."""
    acc = acceleration(model, state, force)
    zdot = None
    if model.has_hysteresis:
        nl = model.nonlinearity
        zdot = nl.zdot(float(state.velocity[nl.attached_dof]), float(state.hysteretic))
    return AugmentedState(state.velocity.copy(), acc, zdot)


def drift(model: SystemModel, y: np.ndarray, force: np.ndarray) -> np.ndarray:
    """Flat-state drift [v, M^-1 (F - C v - s K x - N), (z')]."""
    state = unpack_state(model, y)
    der = eval_rhs(model, state, force)
    return pack_state(model, der) if model.has_hysteresis else np.concatenate(
        [der.displacement, der.velocity]
    )


def drift_jacobian(model: SystemModel, y: np.ndarray) -> np.ndarray:
    """Jacobian of the flat-state drift with respect to the state."""
    n = model.n_dof
    d = state_size(model)
    x, v = y[:n], y[n:2 * n]
    z = float(y[2 * n]) if model.has_hysteresis else None
    dn_dx, dn_dz = nonlinear_force_jacobian(model, x, v, z)
    jac = np.zeros((d, d))
    jac[:n, n:2 * n] = np.eye(n)
    jac[n:2 * n, :n] = -model.minv @ (model.stiffness_sign * model.stiffness + dn_dx)
    jac[n:2 * n, n:2 * n] = -model.minv @ model.damping
    if model.has_hysteresis:
        nl = model.nonlinearity
        jac[n:2 * n, 2 * n] = -model.minv @ dn_dz
        dzdot_dv, dzdot_dz = nl.zdot_grad(float(v[nl.attached_dof]), z)
        jac[2 * n, n + nl.attached_dof] = dzdot_dv
        jac[2 * n, 2 * n] = dzdot_dz
    return jac


def true_residual(true_model: SystemModel, known_model: SystemModel,
                  state: AugmentedState) -> np.ndarray:
    """Ground-truth residual force: what must be added to the known model so
    that it reproduces the true restoring forces at this state.

    Used as a test oracle only; the estimation pipeline never sees it.
    """
    if true_model.n_dof != known_model.n_dof:
        raise ValueError("models must share n_dof")
    if not np.allclose(true_model.mass, known_model.mass):
        raise ValueError("models must share the mass matrix")
    return restoring_force(true_model, state) - restoring_force(known_model, state)
