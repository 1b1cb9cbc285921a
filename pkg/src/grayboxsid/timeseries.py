"""Uniformly sampled multichannel signals and their CSV on-disk format.

The CSV layout is shared by every tool in the package: optional ``#``
provenance comment lines, then one header row (``time`` column first,
then channel labels), then data rows printed with 17 significant digits
so that float64 values survive a write/read round trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["TimeSeries", "read_csv", "write_csv"]


@dataclass
class TimeSeries:
    """A uniformly sampled signal with one column per labeled channel.

    values has shape (n_samples, n_channels); labels are unique and
    ordered like the columns.
    """

    dt: float
    labels: list[str]
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise ValueError("values must be a (n_samples, n_channels) array")
        if len(self.labels) != self.values.shape[1]:
            raise ValueError(
                f"{len(self.labels)} labels for {self.values.shape[1]} channels"
            )
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("channel labels must be unique")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def channel(self, label: str) -> np.ndarray:
        try:
            j = self.labels.index(label)
        except ValueError:
            raise KeyError(f"no channel {label!r}; have {self.labels}") from None
        return self.values[:, j]

    def select(self, labels: list[str]) -> "TimeSeries":
        cols = [self.labels.index(l) for l in labels]
        return TimeSeries(self.dt, list(labels), self.values[:, cols], dict(self.meta))

    def window(self, t_start: float, t_end: float) -> "TimeSeries":
        """Samples with t_start <= t <= t_end (half-open rounding at the ends)."""
        i0 = int(np.ceil(t_start / self.dt - 1e-9))
        i1 = int(np.floor(t_end / self.dt + 1e-9)) + 1
        i0 = max(i0, 0)
        i1 = min(i1, len(self))
        return TimeSeries(self.dt, list(self.labels), self.values[i0:i1], dict(self.meta))

    def hstack(self, other: "TimeSeries") -> "TimeSeries":
        if len(other) != len(self) or abs(other.dt - self.dt) > 1e-12 * self.dt:
            raise ValueError("series must share length and dt")
        return TimeSeries(
            self.dt,
            self.labels + other.labels,
            np.hstack([self.values, other.values]),
            dict(self.meta),
        )


def write_csv(ts: TimeSeries, path, meta: dict | None = None) -> None:
    """Write a TimeSeries in the package CSV format.

    meta entries become a single leading ``# key=value key=value`` line.
    """
    merged = dict(ts.meta)
    if meta:
        merged.update(meta)
    with open(path, "w") as fh:
        if merged:
            tags = " ".join(f"{k}={v}" for k, v in sorted(merged.items()))
            fh.write(f"# {tags}\n")
        fh.write("time," + ",".join(ts.labels) + "\n")
        t = ts.time
        for i in range(len(ts)):
            row = [f"{t[i]:.17g}"] + [f"{v:.17g}" for v in ts.values[i]]
            fh.write(",".join(row) + "\n")


def read_csv(path) -> TimeSeries:
    """Read a TimeSeries written by :func:`write_csv`."""
    meta: dict = {}
    with open(path) as fh:
        line = fh.readline()
        while line.startswith("#"):
            for tag in line[1:].split():
                if "=" in tag:
                    k, v = tag.split("=", 1)
                    meta[k] = v
            line = fh.readline()
        header = [h.strip() for h in line.strip().split(",")]
        if not header or header[0] != "time":
            raise ValueError(f"{path}: expected a 'time' first column, got {header[:1]}")
        rows = [
            [float(x) for x in ln.split(",")]
            for ln in fh
            if ln.strip() and not ln.startswith("#")
        ]
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least two samples")
    data = np.asarray(rows)
    t = data[:, 0]
    steps = np.diff(t)
    dt = steps[0]
    if not np.allclose(steps, dt, rtol=1e-9, atol=1e-12):
        raise ValueError(f"{path}: time column is not uniformly sampled")
    return TimeSeries(dt, header[1:], data[:, 1:], meta)
