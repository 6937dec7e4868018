import numpy as np
import pytest

from tapdx.features import FeatureMatrix, RowMeta
from tapdx.ingest import CHANNEL_COLUMNS, Label
from tapdx import simulate


def write_trial_csv(path, channels, header=None, extra_rows=None):
    """Write a trial file from a dict of channel name -> list of values."""
    header = header if header is not None else list(CHANNEL_COLUMNS)
    n = max(len(v) for v in channels.values())
    lines = [",".join(header)]
    for i in range(n):
        cells = []
        for column in header:
            values = channels.get(column, [])
            cells.append(str(values[i]) if i < len(values) else "")
        lines.append(",".join(cells))
    if extra_rows:
        lines.extend(extra_rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def simple_channels(n=16, value=1.0):
    return {c: [value * (i + 1) for i in range(n)] for c in CHANNEL_COLUMNS}


def build_matrix(columns, rows, metas):
    return FeatureMatrix(
        columns=tuple(columns),
        values=np.asarray(rows, dtype=float),
        meta=[RowMeta(*m) if not isinstance(m, RowMeta) else m for m in metas],
    )


def informative_noise_matrix(seed=7, n_subjects=8, trials=3, sep=2.5,
                             cross_sd=3.0, n_noise=20):
    """Two jointly-informative features plus pure noise candidates.

    The class signal lives along the (1,1) direction of the two informative
    columns while the (1,-1) direction carries heavy within-class spread,
    so each column alone separates poorly but the pair separates fully.
    """
    rng = np.random.default_rng(seed)
    rows, metas = [], []
    for s in range(n_subjects):
        label = Label.HC if s < n_subjects // 2 else Label.PD
        center = -sep if s < n_subjects // 2 else sep
        for t in range(trials):
            u = center + rng.normal(0.0, 1.0)
            v = rng.normal(0.0, cross_sd)
            informative = [(u + v) / np.sqrt(2.0), (u - v) / np.sqrt(2.0)]
            rows.append(np.concatenate([informative, rng.normal(0.0, 1.0, n_noise)]))
            metas.append(RowMeta(f"s{s:02d}", f"t{t}", label))
    columns = ["inf_0", "inf_1"] + [f"noise_{i}" for i in range(n_noise)]
    return build_matrix(columns, rows, metas)


@pytest.fixture(scope="session")
def synthetic_cohort_dir(tmp_path_factory):
    """A small on-disk cohort shared by CLI-level tests."""
    root = tmp_path_factory.mktemp("cohort")
    manifest = simulate.make_cohort(
        root, seed=3, subjects_per_class=2, trials_per_subject=2, n_samples=256
    )
    return manifest
