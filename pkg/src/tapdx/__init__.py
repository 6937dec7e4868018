"""Finger-tapping gyroscope pipeline: kinematics, statistical features,
ANOVA+SFFS feature selection, and SVM/kNN classification under
leave-one-subject-out cross-validation."""

__version__ = "0.1.0"

from tapdx.ingest import Label, RawRecording, Cohort, load_recording, load_cohort
from tapdx.kinematics import KinematicBundle, derive_kinematics
from tapdx.features import FeatureMatrix, featurize, featurize_cohort

__all__ = [
    "Label",
    "RawRecording",
    "Cohort",
    "load_recording",
    "load_cohort",
    "KinematicBundle",
    "derive_kinematics",
    "FeatureMatrix",
    "featurize",
    "featurize_cohort",
]
