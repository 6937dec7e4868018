"""Statistical feature bank: 41 features per kinematic signal.

Applied to the 18 signals of a trial this yields the 738-column feature
vector. Column names are ``<signal>_<feature>`` and the registry order is
signal-major with a fixed feature order inside each signal, so feature
matrices are column-stable across runs and machines.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from tapdx import errors
from tapdx.ingest import Cohort, Label, RawRecording, parse_label
from tapdx.kinematics import SIGNAL_NAMES, KinematicBundle, derive_kinematics

logger = logging.getLogger(__name__)

MIN_FEATURE_SAMPLES = 16

AUTOCORR_LAGS = tuple(range(1, 10))
QUANTILE_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9)

FEATURE_NAMES = (
    "RMS",
    "min",
    "max",
    "avg",
    "std",
    "median",
    "max_freq",
    "centroid",
    "RMS_of_max_taps",
    "min_of_max_taps",
    "max_of_max_taps",
    "avg_of_max_taps",
    "std_of_max_taps",
    "median_of_max_taps",
    "noise_var",
    "conv_ene",
    "SNR",
    "variance",
    "avg_abs_change",
    *(f"autocorrelation_lag_{k}" for k in AUTOCORR_LAGS),
    *(f"quantile_q_{q}" for q in QUANTILE_LEVELS),
    "rhythm",
    "amplitude",
    "frequency",
    "freqstd",
    "slope",
)

# The full 738-column registry.
COLUMNS = tuple(f"{s}_{f}" for s in SIGNAL_NAMES for f in FEATURE_NAMES)


# ---------------------------------------------------------------------------
# Peak detection (automatic multiscale-based peak detection)
# ---------------------------------------------------------------------------

def ampd_peaks(series: np.ndarray) -> np.ndarray:
    """Indices of the local maxima of a signal, multiscale-denoised.

    After removing the least-squares line, index i counts as a local
    maximum at window scale k when x[i] > x[i-k] and x[i] > x[i+k] (both
    neighbours must exist). The scale lambda with the most maxima is
    selected via the scalogram row sums, and the peaks are the indices
    that are maxima at every scale up to lambda. Indices closer than
    lambda to either end can never qualify. An empty result is valid.
    """
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n < 4:
        raise errors.SeriesTooShort(f"need >= 4 samples, got {n}")
    t = np.arange(n, dtype=float)
    slope, intercept = np.polyfit(t, x, 1)
    x = x - (slope * t + intercept)

    n_scales = int(np.ceil(n / 2)) - 1
    # row_sums[k-1] = count of indices that are NOT maxima at scale k
    # (out-of-window indices included, as in the column-std formulation).
    row_sums = np.empty(n_scales, dtype=np.int64)
    surviving = np.ones(n, dtype=bool)
    masks = []
    for k in range(1, n_scales + 1):
        mask = np.zeros(n, dtype=bool)
        mask[k : n - k] = (x[k : n - k] > x[: n - 2 * k]) & (x[k : n - k] > x[2 * k :])
        masks.append(mask)
        row_sums[k - 1] = n - int(mask.sum())
    lam = int(np.argmin(row_sums)) + 1
    for k in range(lam):
        surviving &= masks[k]
    return np.flatnonzero(surviving)


# ---------------------------------------------------------------------------
# Spectrum
# ---------------------------------------------------------------------------

class Spectrum(NamedTuple):
    frequencies: np.ndarray
    powers: np.ndarray


def spectrum(series: np.ndarray, fs: float) -> Spectrum:
    """One-sided power spectrum of the mean-removed signal, 0..fs/2."""
    x = np.asarray(series, dtype=float)
    if len(x) < 4:
        raise errors.SeriesTooShort(f"need >= 4 samples, got {len(x)}")
    if fs <= 0:
        raise errors.DataError(f"fs must be positive, got {fs}")
    coeffs = np.fft.rfft(x - x.mean())
    powers = np.abs(coeffs) ** 2
    freqs = np.fft.rfftfreq(len(x), d=1.0 / fs)
    return Spectrum(frequencies=freqs, powers=powers)


# ---------------------------------------------------------------------------
# Individual feature functions
# ---------------------------------------------------------------------------

def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x)))


def amplitude(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.max(x) - np.min(x))


def avg_abs_change(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.mean(np.abs(np.diff(x))))


def slope(x: np.ndarray) -> float:
    # Last minus first over N (not N-1): the divisor is part of the
    # published definition and the golden tests pin it.
    x = np.asarray(x, dtype=float)
    return float((x[-1] - x[0]) / len(x))


def autocorrelation(x: np.ndarray, lag: int) -> float:
    """Autocorrelation normalized by the lag-0 sum of squares, so the
    value is bounded by 1 in magnitude; constant signals give 0."""
    x = np.asarray(x, dtype=float)
    centered = x - x.mean()
    denom = float(np.sum(centered * centered))
    if denom == 0.0:
        return 0.0
    return float(np.sum(centered[:-lag] * centered[lag:]) / denom)


def noise_variance(x: np.ndarray) -> float:
    """Robust noise-floor estimate from the median absolute second
    difference; the 1/6 factor is the variance of the second-difference
    operator on unit white noise."""
    x = np.asarray(x, dtype=float)
    second = x[2:] - 2.0 * x[1:-1] + x[:-2]
    sigma = float(np.median(np.abs(second))) / 0.6745
    return sigma * sigma / 6.0


def _spectral_features(spec: Spectrum) -> dict[str, float]:
    freqs, powers = spec
    total = float(np.sum(powers))
    if total <= 0.0:
        return {"max_freq": 0.0, "centroid": 0.0, "rhythm": 0.0,
                "frequency": 0.0, "freqstd": 0.0}
    # dominant bin excludes DC
    k = 1 + int(np.argmax(powers[1:]))
    dominant = float(freqs[k])
    centroid = float(np.sum(freqs * powers) / total)
    spread = float(np.sqrt(np.sum(powers * (freqs - centroid) ** 2) / total))
    return {
        "max_freq": dominant,
        "centroid": centroid,
        "rhythm": float(powers[k] / total),
        "frequency": dominant,
        "freqstd": spread,
    }


def _peak_features(peak_values: np.ndarray) -> dict[str, float]:
    if len(peak_values) == 0:
        # Degenerate signals without detectable taps: keep the vector
        # finite and flag it.
        logger.debug("no peaks detected; peak statistics set to 0")
        return {name: 0.0 for name in (
            "RMS_of_max_taps", "min_of_max_taps", "max_of_max_taps",
            "avg_of_max_taps", "std_of_max_taps", "median_of_max_taps")}
    return {
        "RMS_of_max_taps": rms(peak_values),
        "min_of_max_taps": float(np.min(peak_values)),
        "max_of_max_taps": float(np.max(peak_values)),
        "avg_of_max_taps": float(np.mean(peak_values)),
        "std_of_max_taps": float(np.std(peak_values)),
        "median_of_max_taps": float(np.median(peak_values)),
    }


def extract_features(series: np.ndarray, fs: float) -> dict[str, float]:
    """The 41 statistical features of one signal, in registry order."""
    x = np.asarray(series, dtype=float)
    if len(x) < MIN_FEATURE_SAMPLES:
        raise errors.SeriesTooShort(
            f"need >= {MIN_FEATURE_SAMPLES} samples, got {len(x)}"
        )
    spec = spectrum(x, fs)
    peak_values = x[ampd_peaks(x)]
    spectral = _spectral_features(spec)

    out: dict[str, float] = {}
    out["RMS"] = rms(x)
    out["min"] = float(np.min(x))
    out["max"] = float(np.max(x))
    out["avg"] = float(np.mean(x))
    out["std"] = float(np.std(x))
    out["median"] = float(np.median(x))
    out["max_freq"] = spectral["max_freq"]
    out["centroid"] = spectral["centroid"]
    out.update(_peak_features(peak_values))
    nv = noise_variance(x)
    energy = float(np.sum(x * x))
    out["noise_var"] = nv
    out["conv_ene"] = energy
    # Zero noise floor: SNR pinned to 0 to keep the vector finite.
    out["SNR"] = energy / nv if nv > 0.0 else 0.0
    out["variance"] = float(np.var(x))
    out["avg_abs_change"] = avg_abs_change(x)
    for lag in AUTOCORR_LAGS:
        out[f"autocorrelation_lag_{lag}"] = autocorrelation(x, lag)
    for q in QUANTILE_LEVELS:
        out[f"quantile_q_{q}"] = float(np.quantile(x, q))
    out["rhythm"] = spectral["rhythm"]
    out["amplitude"] = amplitude(x)
    out["frequency"] = spectral["frequency"]
    out["freqstd"] = spectral["freqstd"]
    out["slope"] = slope(x)

    assert tuple(out) == FEATURE_NAMES
    return out


def featurize(bundle: KinematicBundle, fs: float | None = None) -> dict[str, float]:
    """Feature vector of one trial: 738 named values in registry order."""
    if fs is None:
        fs = bundle.sample_rate_hz
    out: dict[str, float] = {}
    for signal_name in SIGNAL_NAMES:
        feats = extract_features(bundle.signals[signal_name], fs)
        for feature_name, value in feats.items():
            out[f"{signal_name}_{feature_name}"] = value
    return out


# ---------------------------------------------------------------------------
# Cohort-level feature matrix
# ---------------------------------------------------------------------------

@dataclass
class RowMeta:
    person_id: str
    trial_id: str
    label: Label


@dataclass
class FeatureMatrix:
    """Trials x features, with row metadata aligned 1:1 with rows."""

    columns: tuple[str, ...]
    values: np.ndarray
    meta: list[RowMeta]

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise errors.DataError("feature matrix is not rectangular")
        if self.values.shape[0] != len(self.meta):
            raise errors.DataError("row metadata does not align with rows")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise errors.FeatureMismatch(f"unknown feature column {name!r}") from None

    def labels(self) -> list[Label]:
        return [m.label for m in self.meta]

    def subject_ids(self) -> list[str]:
        """Distinct person_ids in first-appearance order."""
        seen: dict[str, None] = {}
        for m in self.meta:
            seen.setdefault(m.person_id, None)
        return list(seen)

    def subset(self, names: list[str] | tuple[str, ...]) -> np.ndarray:
        idx = [self.column_index(n) for n in names]
        return self.values[:, idx]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write("person_id,trial_id,label," + ",".join(self.columns) + "\n")
            for m, row in zip(self.meta, self.values):
                cells = [m.person_id, m.trial_id, m.label.value]
                cells.extend(repr(float(v)) for v in row)
                fh.write(",".join(cells) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "FeatureMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            if header[:3] != ["person_id", "trial_id", "label"]:
                raise errors.MissingColumn(f"{path}: bad feature matrix header")
            columns = tuple(header[3:])
            meta = []
            rows = []
            for line in fh:
                cells = line.rstrip("\n").split(",")
                if len(cells) != len(header):
                    raise errors.UnequalChannelLengths(f"{path}: ragged row")
                meta.append(RowMeta(cells[0], cells[1], parse_label(cells[2])))
                rows.append([float(v) for v in cells[3:]])
        values = np.asarray(rows, dtype=float)
        if values.size == 0:
            values = values.reshape(0, len(columns))
        return cls(columns=columns, values=values, meta=meta)


def _featurize_recording(rec: RawRecording) -> np.ndarray:
    vec = featurize(derive_kinematics(rec))
    return np.fromiter(vec.values(), dtype=float, count=len(COLUMNS))


def featurize_cohort(cohort: Cohort, jobs: int = 1) -> FeatureMatrix:
    """One feature row per trial, in cohort order.

    Rows are computed independently (optionally across processes) and
    merged in cohort order, so the result does not depend on jobs.
    """
    if not cohort.recordings:
        raise errors.DataError("empty cohort")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_featurize_recording, cohort.recordings, chunksize=4))
    else:
        rows = [_featurize_recording(rec) for rec in cohort.recordings]
    meta = [RowMeta(r.person_id, r.trial_id, r.label) for r in cohort.recordings]
    return FeatureMatrix(columns=COLUMNS, values=np.vstack(rows), meta=meta)
