"""Synthetic finger-tapping cohorts for demos and end-to-end tests.

The public recordings cannot be redistributed with this package, so this
module writes a stand-in cohort with the same file layout: tapping-like
oscillations whose rate, amplitude, rhythm variability, and thumb-index
coupling differ by diagnosis class, with per-subject and per-trial random
effects. Everything is a pure function of the seed.
"""

from __future__ import annotations

import argparse
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tapdx.ingest import Label, RawRecording, write_recording


@dataclass
class ClassProfile:
    tap_hz: float        # dominant tapping rate
    amplitude: float     # deg/s scale of the oscillation
    rhythm_jitter: float # slow wander of the instantaneous rate
    noise: float         # additive sensor noise, deg/s
    coupling: float      # how strongly the index finger mirrors the thumb


PROFILES = {
    Label.HC: ClassProfile(tap_hz=4.0, amplitude=260.0, rhythm_jitter=0.04,
                           noise=8.0, coupling=0.40),
    Label.PD: ClassProfile(tap_hz=2.6, amplitude=140.0, rhythm_jitter=0.22,
                           noise=14.0, coupling=0.75),
    Label.PSP: ClassProfile(tap_hz=2.0, amplitude=70.0, rhythm_jitter=0.15,
                            noise=11.0, coupling=0.55),
    Label.MSA: ClassProfile(tap_hz=3.1, amplitude=110.0, rhythm_jitter=0.40,
                            noise=20.0, coupling=0.30),
}


def _trial_channels(profile: ClassProfile, rng: np.random.Generator,
                    n_samples: int, fs: float,
                    subject_rate: float, subject_amp: float) -> dict[str, np.ndarray]:
    dt = 1.0 / fs
    rate = profile.tap_hz * subject_rate * (1.0 + 0.05 * rng.standard_normal())
    amp = profile.amplitude * subject_amp * (1.0 + 0.08 * rng.standard_normal())
    # slowly wandering instantaneous rate models rhythm breakdown
    wander = np.cumsum(rng.standard_normal(n_samples)) * dt
    wander = profile.rhythm_jitter * wander / max(np.std(wander), 1e-9)
    phase = 2.0 * np.pi * np.cumsum(rate * (1.0 + wander)) * dt

    def channel(scale: float, phase_shift: float) -> np.ndarray:
        wave = np.sin(phase + phase_shift) + 0.35 * np.sin(2.0 * phase + 0.8 + phase_shift)
        return scale * amp * wave + profile.noise * rng.standard_normal(n_samples)

    thumb = {
        "x": channel(1.00, 0.0),
        "y": channel(0.55, 0.6),
        "z": channel(0.30, 1.3),
    }
    index = {}
    for axis, share in (("x", 1.00), ("y", 0.55), ("z", 0.30)):
        own = channel(share * 0.6, 2.1)
        index[axis] = (profile.coupling * -thumb[axis]
                       + (1.0 - profile.coupling) * own
                       + profile.noise * rng.standard_normal(n_samples))
    return {
        "thumb_x": thumb["x"], "thumb_y": thumb["y"], "thumb_z": thumb["z"],
        "index_x": index["x"], "index_y": index["y"], "index_z": index["z"],
    }


def make_cohort(
    out_dir: str | Path,
    seed: int = 7,
    subjects_per_class: int = 3,
    trials_per_subject: int = 3,
    n_samples: int = 400,
    sample_rate_hz: float = 200.0,
) -> Path:
    """Write trial CSVs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    trial_dir = out_dir / "trials"
    trial_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest_rows = []
    for label in (Label.HC, Label.PD, Label.PSP, Label.MSA):
        profile = PROFILES[label]
        for s in range(subjects_per_class):
            person_id = f"{label.value}{s + 1:02d}"
            subject_rate = float(np.exp(0.10 * rng.standard_normal()))
            subject_amp = float(np.exp(0.15 * rng.standard_normal()))
            for t in range(trials_per_subject):
                trial_id = f"t{t + 1}"
                channels = _trial_channels(
                    profile, rng, n_samples, sample_rate_hz,
                    subject_rate, subject_amp,
                )
                rec = RawRecording(
                    person_id=person_id,
                    trial_id=trial_id,
                    label=label,
                    sample_rate_hz=sample_rate_hz,
                    **channels,
                )
                filename = f"{person_id}_{trial_id}.csv"
                write_recording(rec, trial_dir / filename)
                manifest_rows.append(
                    (f"trials/{filename}", person_id, trial_id,
                     label.value, sample_rate_hz)
                )
    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "person_id", "trial_id", "label", "sample_rate_hz"])
        writer.writerows(manifest_rows)
    return manifest_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Write a synthetic finger-tapping cohort."
    )
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--subjects", type=int, default=3,
                        help="subjects per class")
    parser.add_argument("--trials", type=int, default=3,
                        help="trials per subject")
    parser.add_argument("--samples", type=int, default=400,
                        help="samples per trial")
    args = parser.parse_args(argv)
    manifest = make_cohort(
        args.out_dir,
        seed=args.seed,
        subjects_per_class=args.subjects,
        trials_per_subject=args.trials,
        n_samples=args.samples,
    )
    print(manifest)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
