"""Load and validate gyroscope finger-tapping trials.

A trial file is a CSV with one row per sample and the six gyroscope
channels as columns; a cohort manifest maps trial files to subjects and
diagnosis labels. All loading is read-only and the resulting objects are
never mutated afterwards, so they are safe to share across threads.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tapdx import errors

# Smallest trial length for which every statistical feature downstream
# (autocorrelation up to lag 9, the discrete spectrum) is well defined.
MIN_SAMPLES = 16

# Subjects performed the task at most six times.
MAX_TRIALS_PER_SUBJECT = 6

DEFAULT_SAMPLE_RATE_HZ = 200.0

CHANNEL_COLUMNS = (
    "gyroThumb_X",
    "gyroThumb_Y",
    "gyroThumb_Z",
    "gyroIndex_X",
    "gyroIndex_Y",
    "gyroIndex_Z",
)

MANIFEST_COLUMNS = ("path", "person_id", "trial_id", "label", "sample_rate_hz")


class Label(enum.Enum):
    """Diagnosis classes, in the fixed order used everywhere downstream."""

    HC = "HC"
    PD = "PD"
    PSP = "PSP"
    MSA = "MSA"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


CLASS_ORDER = (Label.HC, Label.PD, Label.PSP, Label.MSA)

_LABEL_ALIASES = {
    "HC": Label.HC,
    "CTRL": Label.HC,  # the published data uses 'CTRL' for healthy controls
    "PD": Label.PD,
    "PSP": Label.PSP,
    "MSA": Label.MSA,
}


def parse_label(text: str) -> Label:
    """Parse a diagnosis label, case-insensitively, accepting CTRL for HC."""
    try:
        return _LABEL_ALIASES[text.strip().upper()]
    except KeyError:
        raise errors.UnknownLabel(f"unknown diagnosis label {text!r}") from None


@dataclass
class RawRecording:
    """One finger-tapping trial: six angular-velocity channels in deg/s."""

    person_id: str
    trial_id: str
    label: Label
    sample_rate_hz: float
    thumb_x: np.ndarray
    thumb_y: np.ndarray
    thumb_z: np.ndarray
    index_x: np.ndarray
    index_y: np.ndarray
    index_z: np.ndarray

    def __post_init__(self) -> None:
        if self.sample_rate_hz <= 0:
            raise errors.DataError(
                f"sample_rate_hz must be positive, got {self.sample_rate_hz}"
            )
        lengths = {len(ch) for ch in self.channels().values()}
        if len(lengths) != 1:
            raise errors.UnequalChannelLengths(
                f"{self.person_id}/{self.trial_id}: channel lengths {sorted(lengths)}"
            )
        n = lengths.pop()
        if n < MIN_SAMPLES:
            raise errors.EmptySignal(
                f"{self.person_id}/{self.trial_id}: {n} samples, need >= {MIN_SAMPLES}"
            )
        for name, ch in self.channels().items():
            if not np.all(np.isfinite(ch)):
                raise errors.NonNumericSample(
                    f"{self.person_id}/{self.trial_id}: non-finite value in {name}"
                )

    @property
    def n_samples(self) -> int:
        return len(self.thumb_x)

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate_hz

    def channels(self) -> dict[str, np.ndarray]:
        return {
            "gyroThumb_X": self.thumb_x,
            "gyroThumb_Y": self.thumb_y,
            "gyroThumb_Z": self.thumb_z,
            "gyroIndex_X": self.index_x,
            "gyroIndex_Y": self.index_y,
            "gyroIndex_Z": self.index_z,
        }


@dataclass
class Cohort:
    """An ordered collection of recordings with a subject index."""

    recordings: list[RawRecording]
    subjects: dict[str, list[int]] = field(init=False)

    def __post_init__(self) -> None:
        subjects: dict[str, list[int]] = {}
        labels: dict[str, Label] = {}
        seen_trials: set[tuple[str, str]] = set()
        for i, rec in enumerate(self.recordings):
            key = (rec.person_id, rec.trial_id)
            if key in seen_trials:
                raise errors.DuplicateTrial(f"duplicate trial {key}")
            seen_trials.add(key)
            if rec.person_id in labels and labels[rec.person_id] != rec.label:
                raise errors.ConflictingLabel(
                    f"subject {rec.person_id!r} labelled both "
                    f"{labels[rec.person_id].value} and {rec.label.value}"
                )
            labels[rec.person_id] = rec.label
            subjects.setdefault(rec.person_id, []).append(i)
        for pid, idx in subjects.items():
            if len(idx) > MAX_TRIALS_PER_SUBJECT:
                raise errors.TooManyTrials(
                    f"subject {pid!r} has {len(idx)} trials (max {MAX_TRIALS_PER_SUBJECT})"
                )
        self.subjects = subjects

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def subject_label(self, person_id: str) -> Label:
        return self.recordings[self.subjects[person_id][0]].label

    def class_counts(self) -> dict[Label, tuple[int, int]]:
        """Per class: (number of subjects, number of trials)."""
        counts = {label: [0, 0] for label in CLASS_ORDER}
        for pid, idx in self.subjects.items():
            label = self.subject_label(pid)
            counts[label][0] += 1
            counts[label][1] += len(idx)
        return {label: (s, t) for label, (s, t) in counts.items()}


def _parse_sample(text: str, path: Path, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise errors.NonNumericSample(
            f"{path}: row {row}, column {column}: {text!r} is not a number"
        ) from None
    if not math.isfinite(value):
        raise errors.NonNumericSample(
            f"{path}: row {row}, column {column}: non-finite value {text!r}"
        )
    return value


def load_recording(
    path: str | Path,
    *,
    person_id: str,
    trial_id: str,
    label: Label | str,
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
) -> RawRecording:
    """Load one trial CSV.

    The file must carry the six gyroscope columns; a `timestamp` column is
    tolerated and ignored (timestamps are reconstructed from the sample
    rate downstream).
    """
    path = Path(path)
    if isinstance(label, str):
        label = parse_label(label)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise errors.MissingColumn(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        positions = {}
        for column in CHANNEL_COLUMNS:
            if column not in header:
                raise errors.MissingColumn(f"{path}: missing column {column!r}")
            positions[column] = header.index(column)
        samples: dict[str, list[float]] = {c: [] for c in CHANNEL_COLUMNS}
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise errors.UnequalChannelLengths(
                    f"{path}: row {row_number} has {len(row)} cells, header has {len(header)}"
                )
            for column, pos in positions.items():
                samples[column].append(
                    _parse_sample(row[pos], path, row_number, column)
                )
    arrays = {c: np.asarray(v, dtype=float) for c, v in samples.items()}
    return RawRecording(
        person_id=person_id,
        trial_id=trial_id,
        label=label,
        sample_rate_hz=float(sample_rate_hz),
        thumb_x=arrays["gyroThumb_X"],
        thumb_y=arrays["gyroThumb_Y"],
        thumb_z=arrays["gyroThumb_Z"],
        index_x=arrays["gyroIndex_X"],
        index_y=arrays["gyroIndex_Y"],
        index_z=arrays["gyroIndex_Z"],
    )


def write_recording(rec: RawRecording, path: str | Path) -> None:
    """Serialize a recording back to the canonical trial CSV.

    The timestamp column is regenerated from the sample rate and floats are
    written with shortest round-trip repr, so load -> write -> load -> write
    is byte-stable.
    """
    path = Path(path)
    channels = rec.channels()
    dt = rec.dt
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("timestamp," + ",".join(CHANNEL_COLUMNS) + "\n")
        for i in range(rec.n_samples):
            cells = [repr(i * dt)]
            cells.extend(repr(float(channels[c][i])) for c in CHANNEL_COLUMNS)
            fh.write(",".join(cells) + "\n")


def load_cohort(manifest: str | Path) -> Cohort:
    """Load every trial listed in a manifest CSV, in manifest order.

    Relative trial paths are resolved against the manifest's directory.
    """
    manifest = Path(manifest)
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise errors.MissingColumn(f"{manifest}: empty manifest")
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise errors.MissingColumn(f"{manifest}: missing columns {missing}")
        rows = list(reader)
    recordings = []
    for line_number, row in enumerate(rows, start=2):
        if any(row.get(c) is None for c in MANIFEST_COLUMNS):
            raise errors.MissingColumn(
                f"{manifest}: row {line_number} is missing cells"
            )
        trial_path = Path(row["path"])
        if not trial_path.is_absolute():
            trial_path = manifest.parent / trial_path
        rate_text = (row.get("sample_rate_hz") or "").strip()
        rate = float(rate_text) if rate_text else DEFAULT_SAMPLE_RATE_HZ
        recordings.append(
            load_recording(
                trial_path,
                person_id=row["person_id"].strip(),
                trial_id=row["trial_id"].strip(),
                label=parse_label(row["label"]),
                sample_rate_hz=rate,
            )
        )
    return Cohort(recordings=recordings)
