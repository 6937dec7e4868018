"""Derive the 18 kinematic signals of one trial.

From the six raw angular-velocity channels we build: the velocities
themselves, their numerical derivatives (angular accelerations), the 3-D
magnitudes of both triples per finger, and the magnitudes of the
thumb-minus-index difference vectors for velocity and acceleration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tapdx import errors
from tapdx.ingest import RawRecording

# Canonical signal order; feature columns downstream are signal-major in
# exactly this order.
SIGNAL_NAMES = (
    "Thumb_x_vel",
    "Thumb_y_vel",
    "Thumb_z_vel",
    "Index_x_vel",
    "Index_y_vel",
    "Index_z_vel",
    "Thumb_vec_vel",
    "Index_vec_vel",
    "Thumb2Index_vec_vel",
    "Thumb_x_acc",
    "Thumb_y_acc",
    "Thumb_z_acc",
    "Index_x_acc",
    "Index_y_acc",
    "Index_z_acc",
    "Thumb_vec_acc",
    "Index_vec_acc",
    "Thumb2Index_vec_acc",
)


@dataclass
class KinematicBundle:
    """The 18 derived time series of one trial, all of the input length."""

    signals: dict[str, np.ndarray]
    timestamps: np.ndarray
    sample_rate_hz: float

    def __post_init__(self) -> None:
        if tuple(self.signals) != SIGNAL_NAMES:
            raise errors.DataError("signal names or order do not match the registry")
        n = len(self.timestamps)
        for name, series in self.signals.items():
            if len(series) != n:
                raise errors.LengthMismatch(f"{name}: length {len(series)} != {n}")
            if name.endswith(("_vec_vel", "_vec_acc")) and np.any(series < 0):
                raise errors.DataError(f"{name}: negative magnitude")

    @property
    def n_samples(self) -> int:
        return len(self.timestamps)


def differentiate(series: np.ndarray, dt: float) -> np.ndarray:
    """Differentiate numerically: central differences at interior points,
    first-order one-sided differences at the two endpoints (the np.gradient
    stencil). Output length equals input length."""
    series = np.asarray(series, dtype=float)
    if len(series) < 2:
        raise errors.SeriesTooShort(f"need >= 2 samples, got {len(series)}")
    if dt <= 0:
        raise errors.DataError(f"dt must be positive, got {dt}")
    return np.gradient(series, dt, edge_order=1)


def vector_magnitude(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Elementwise sqrt(x^2 + y^2 + z^2).

    The three squares are summed smallest-first so the result is bit-exact
    under any axis permutation (and under negating the channels).
    """
    x, y, z = (np.asarray(a, dtype=float) for a in (x, y, z))
    if not (len(x) == len(y) == len(z)):
        raise errors.LengthMismatch(
            f"channel lengths differ: {len(x)}, {len(y)}, {len(z)}"
        )
    squares = np.sort(np.stack([x * x, y * y, z * z]), axis=0)
    return np.sqrt((squares[0] + squares[1]) + squares[2])


def relative_vector(
    thumb_x: np.ndarray,
    thumb_y: np.ndarray,
    thumb_z: np.ndarray,
    index_x: np.ndarray,
    index_y: np.ndarray,
    index_z: np.ndarray,
) -> np.ndarray:
    """Magnitude of the per-sample thumb-minus-index difference vector."""
    thumb = tuple(np.asarray(a, dtype=float) for a in (thumb_x, thumb_y, thumb_z))
    index = tuple(np.asarray(a, dtype=float) for a in (index_x, index_y, index_z))
    lengths = {len(a) for a in thumb + index}
    if len(lengths) != 1:
        raise errors.LengthMismatch(f"channel lengths differ: {sorted(lengths)}")
    return vector_magnitude(
        thumb[0] - index[0], thumb[1] - index[1], thumb[2] - index[2]
    )


def timestamps(n: int, dt: float) -> np.ndarray:
    """Sample times [0, dt, 2*dt, ..., (n-1)*dt]."""
    if n < 1:
        raise errors.DataError(f"need n >= 1, got {n}")
    return np.arange(n) * dt


def derive_kinematics(rec: RawRecording) -> KinematicBundle:
    """Build the full 18-signal bundle from one recording."""
    dt = rec.dt
    vel = {
        "Thumb_x": rec.thumb_x,
        "Thumb_y": rec.thumb_y,
        "Thumb_z": rec.thumb_z,
        "Index_x": rec.index_x,
        "Index_y": rec.index_y,
        "Index_z": rec.index_z,
    }
    acc = {name: differentiate(series, dt) for name, series in vel.items()}

    signals = {f"{name}_vel": np.asarray(series, dtype=float) for name, series in vel.items()}
    signals["Thumb_vec_vel"] = vector_magnitude(vel["Thumb_x"], vel["Thumb_y"], vel["Thumb_z"])
    signals["Index_vec_vel"] = vector_magnitude(vel["Index_x"], vel["Index_y"], vel["Index_z"])
    signals["Thumb2Index_vec_vel"] = relative_vector(
        vel["Thumb_x"], vel["Thumb_y"], vel["Thumb_z"],
        vel["Index_x"], vel["Index_y"], vel["Index_z"],
    )
    for name in ("Thumb_x", "Thumb_y", "Thumb_z", "Index_x", "Index_y", "Index_z"):
        signals[f"{name}_acc"] = acc[name]
    signals["Thumb_vec_acc"] = vector_magnitude(acc["Thumb_x"], acc["Thumb_y"], acc["Thumb_z"])
    signals["Index_vec_acc"] = vector_magnitude(acc["Index_x"], acc["Index_y"], acc["Index_z"])
    signals["Thumb2Index_vec_acc"] = relative_vector(
        acc["Thumb_x"], acc["Thumb_y"], acc["Thumb_z"],
        acc["Index_x"], acc["Index_y"], acc["Index_z"],
    )

    ordered = {name: signals[name] for name in SIGNAL_NAMES}
    return KinematicBundle(
        signals=ordered,
        timestamps=timestamps(rec.n_samples, dt),
        sample_rate_hz=rec.sample_rate_hz,
    )


def write_bundle_csv(bundle: KinematicBundle, path) -> None:
    """Debug emission: wide CSV with timestamp plus the 18 named signals."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("timestamp," + ",".join(SIGNAL_NAMES) + "\n")
        for i in range(bundle.n_samples):
            cells = [repr(float(bundle.timestamps[i]))]
            cells.extend(repr(float(bundle.signals[s][i])) for s in SIGNAL_NAMES)
            fh.write(",".join(cells) + "\n")
