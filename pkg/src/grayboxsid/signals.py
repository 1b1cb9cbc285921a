"""Excitation records: band-limited noise, windowed noise, sinusoids, and
external ground-motion files.

Band limiting is done by masking the discrete spectrum of a white-noise
draw and inverting, so out-of-band content is zero up to round-off and a
given seed always reproduces the same record.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .timeseries import TimeSeries

__all__ = [
    "BandLimitedWhiteNoise",
    "HammingModulatedNoise",
    "Sinusoid",
    "ExternalRecord",
    "ForcingSpec",
    "hamming_window",
    "realize",
    "load_ground_motion",
]


@dataclass(frozen=True)
class BandLimitedWhiteNoise:
    f_lo: float
    f_hi: float
    amplitude_std: float
    seed: int = 0


@dataclass(frozen=True)
class HammingModulatedNoise:
    inner: BandLimitedWhiteNoise


@dataclass(frozen=True)
class Sinusoid:
    frequency: float
    amplitude: float
    phase: float = 0.0


@dataclass(frozen=True)
class ExternalRecord:
    path: str
    scale: float = 1.0
    dof_distribution: tuple[float, ...] | None = None


ForcingSpec = BandLimitedWhiteNoise | HammingModulatedNoise | Sinusoid | ExternalRecord


def hamming_window(n: int) -> np.ndarray:
    """w[k] = 0.54 - 0.46 cos(2 pi k / (n-1)); endpoints 0.08, midpoint 1."""
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def _band_limited(spec: BandLimitedWhiteNoise, dt: float, n: int,
                  channel: int) -> np.ndarray:
    nyquist = 0.5 / dt
    if not 0.0 < spec.f_lo < spec.f_hi:
        raise ValueError(f"need 0 < f_lo < f_hi, got ({spec.f_lo}, {spec.f_hi})")
    if spec.f_hi >= nyquist:
        raise ValueError(f"f_hi={spec.f_hi} Hz exceeds Nyquist {nyquist} Hz")
    rng = np.random.default_rng([spec.seed, channel])
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, dt)
    spectrum[(freqs < spec.f_lo) | (freqs > spec.f_hi)] = 0.0
    sig = np.fft.irfft(spectrum, n)
    rms = float(np.sqrt(np.mean(sig**2)))
    if rms > 0:
        sig *= spec.amplitude_std / rms
    return sig


def realize(spec: ForcingSpec, dt: float, duration: float,
            n_channels: int = 1) -> TimeSeries:
    """One deterministic realization of the forcing over [0, duration].

    Noise specs draw independently per channel (seed is combined with the
    channel index); sinusoids repeat on every channel; external records are
    spread over channels by their dof_distribution.
    """
    n = int(round(duration / dt)) + 1
    if isinstance(spec, (BandLimitedWhiteNoise, HammingModulatedNoise)) and n < 16:
        raise ValueError("spectral forcing needs at least 16 samples")
    labels = [f"f{i + 1}" for i in range(n_channels)]
    if isinstance(spec, Sinusoid):
        t = np.arange(n) * dt
        col = spec.amplitude * np.sin(2.0 * np.pi * spec.frequency * t + spec.phase)
        return TimeSeries(dt, labels, np.tile(col[:, None], (1, n_channels)))
    if isinstance(spec, BandLimitedWhiteNoise):
        cols = [_band_limited(spec, dt, n, ch) for ch in range(n_channels)]
        return TimeSeries(dt, labels, np.column_stack(cols))
    if isinstance(spec, HammingModulatedNoise):
        base = realize(spec.inner, dt, duration, n_channels)
        return TimeSeries(dt, labels, base.values * hamming_window(n)[:, None])
    if isinstance(spec, ExternalRecord):
        rec = load_ground_motion(spec.path, dt)
        col = rec.values[:, 0] * spec.scale
        col = col[:n] if col.size >= n else np.concatenate([col, np.zeros(n - col.size)])
        dist = spec.dof_distribution
        if dist is None:
            dist = tuple(1.0 for _ in range(n_channels))
        if len(dist) != n_channels:
            raise ValueError(
                f"dof_distribution has {len(dist)} entries for {n_channels} channels"
            )
        values = col[:, None] * np.asarray(dist, dtype=float)[None, :]
        return TimeSeries(dt, labels, values, meta=dict(rec.meta))
    raise TypeError(f"unknown forcing spec {spec!r}")


def load_ground_motion(path, dt_target: float) -> TimeSeries:
    """Read a ground-motion text record and resample it to dt_target.

    Accepted layouts: two columns (time, value), or a single value column
    preceded by a ``dt=<seconds>`` header line. '#' lines are comments and
    a leading '# dt=...' also works. Resampling is linear interpolation.
    """
    header_dt = None
    rows: list[list[float]] = []
    with open(path) as fh:
        for line in fh:
            stripped = line.strip()
            if not stripped:
                continue
            body = stripped.lstrip("#").strip()
            if body.startswith("dt="):
                header_dt = float(body[3:])
                continue
            if stripped.startswith("#"):
                continue
            rows.append([float(x) for x in stripped.replace(",", " ").split()])
    if not rows:
        raise ValueError(f"{path}: empty ground-motion record")
    data = np.asarray(rows)
    if data.shape[1] == 1:
        if header_dt is None:
            raise ValueError(f"{path}: single-column record needs a dt= header")
        t = np.arange(data.shape[0]) * header_dt
        vals = data[:, 0]
    else:
        t = data[:, 0]
        vals = data[:, 1]
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"{path}: time column must be strictly increasing")
    n_out = int(np.floor((t[-1] - t[0]) / dt_target + 1e-9)) + 1
    t_out = t[0] + np.arange(n_out) * dt_target
    resampled = np.interp(t_out, t, vals)
    meta = {"source": str(path), "source_dt": f"{np.median(np.diff(t)):.6g}"}
    return TimeSeries(dt_target, ["ground_motion"], resampled, meta=meta)
