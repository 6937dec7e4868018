"""Command-line pipeline: validate, features, select, evaluate, run.

Every run writes run_meta.json capturing the resolved configuration,
library versions, input hashes, and the pinned methodological assumptions,
so that equal metadata implies byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

import tapdx
from tapdx import classify, errors, evaluate, selection
from tapdx.features import FeatureMatrix, featurize_cohort
from tapdx.ingest import CLASS_ORDER, Cohort, load_cohort, load_recording, parse_label

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "TAPDX_CONFIG"

# Methodological choices that are pinned in this implementation and may
# shift exact scores relative to other implementations of the same design.
PINNED_ASSUMPTIONS = (
    "hyperparameter search: seeded log-uniform random search over C and gamma "
    "(kernel uniform over rbf/sigmoid), not a model-based optimizer",
    "multiclass scheme: one-vs-one SMO-trained SVMs with softmax over summed "
    "signed pairwise margins as the probability score",
    "per-fold standardization: columns z-scored with training-fold statistics "
    "before SVM/kNN",
    "SFFS wrapper classifier: rbf SVM with C=1 and gamma=1/n_features",
    "noise variance feature: second-difference median-absolute-deviation "
    "estimator scaled by 1/6",
    "numerical differentiation: central differences with first-order one-sided "
    "endpoints",
    "sigmoid kernel offset fixed at 0",
)

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ERROR = 3


@dataclass
class RunConfig:
    manifest: str = ""
    out: str = "tapdx_out"
    alpha: float = 0.005
    fdr_enabled: bool = False
    fdr_threshold: float = 0.8
    sffs_max_size: int = 15
    trials: int = 200
    seed: int = 42
    classifier: str = "svm"
    knn_k: int = 5
    jobs: int = 1
    cache: bool = True

    def validate(self) -> None:
        if not self.manifest:
            raise errors.ConfigError("no manifest configured")
        if not 0.0 <= self.alpha <= 1.0:
            raise errors.ConfigError(f"alpha={self.alpha} outside [0, 1]")
        if self.sffs_max_size < 1:
            raise errors.ConfigError("sffs_max_size must be >= 1")
        if self.trials < 1:
            raise errors.ConfigError("trials must be >= 1")
        if self.classifier not in ("svm", "knn"):
            raise errors.ConfigError(f"unknown classifier {self.classifier!r}")
        if self.jobs < 1:
            raise errors.ConfigError("jobs must be >= 1")


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise errors.ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise errors.ConfigError(f"bad config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise errors.ConfigError(f"{path}: config must be a mapping")
    paths = doc.get("paths", {})
    cfg.manifest = str(paths.get("manifest", cfg.manifest))
    cfg.out = str(paths.get("out", cfg.out))
    sel = doc.get("selection", {})
    cfg.alpha = float(sel.get("alpha", cfg.alpha))
    cfg.sffs_max_size = int(sel.get("sffs_max_size", cfg.sffs_max_size))
    fdr = sel.get("fdr", {})
    cfg.fdr_enabled = bool(fdr.get("enabled", cfg.fdr_enabled))
    cfg.fdr_threshold = float(fdr.get("threshold", cfg.fdr_threshold))
    cls = doc.get("classify", {})
    cfg.classifier = str(cls.get("classifier", cfg.classifier))
    cfg.knn_k = int(cls.get("knn_k", cfg.knn_k))
    search = doc.get("search", {})
    cfg.trials = int(search.get("trials", cfg.trials))
    cfg.seed = int(search.get("seed", cfg.seed))
    cfg.jobs = int(doc.get("jobs", cfg.jobs))
    cfg.cache = bool(doc.get("cache", cfg.cache))
    return cfg


def _apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.manifest is not None:
        cfg.manifest = args.manifest
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "alpha", None) is not None:
        cfg.alpha = args.alpha
    if getattr(args, "trials", None) is not None:
        cfg.trials = args.trials
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "classifier", None) is not None:
        cfg.classifier = args.classifier
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "no_cache", False):
        cfg.cache = False
    return cfg


# ---------------------------------------------------------------------------
# Hashing and caching
# ---------------------------------------------------------------------------

def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_manifest_rows(manifest_path: Path) -> list[dict]:
    from tapdx.ingest import MANIFEST_COLUMNS

    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise errors.MissingColumn(f"{manifest_path}: empty manifest")
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise errors.MissingColumn(
                f"{manifest_path}: missing columns {missing}"
            )
        rows = list(reader)
    for line_number, row in enumerate(rows, start=2):
        if any(row.get(c) is None for c in MANIFEST_COLUMNS):
            raise errors.MissingColumn(
                f"{manifest_path}: row {line_number} is missing cells"
            )
    return rows


def input_hash(manifest_path: Path) -> str:
    """Content hash of the manifest plus every trial file it references."""
    h = hashlib.sha256()
    h.update(manifest_path.read_bytes())
    for row in _read_manifest_rows(manifest_path):
        trial = Path(row["path"])
        if not trial.is_absolute():
            trial = manifest_path.parent / trial
        h.update(_sha256_file(trial).encode())
    return h.hexdigest()


def _cache_valid(artifact: Path, key: str) -> bool:
    sidecar = artifact.with_suffix(artifact.suffix + ".hash")
    return artifact.exists() and sidecar.exists() and sidecar.read_text().strip() == key


def _write_cache_key(artifact: Path, key: str) -> None:
    artifact.with_suffix(artifact.suffix + ".hash").write_text(key + "\n")


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def _ensure_features(cfg: RunConfig) -> tuple[FeatureMatrix, str]:
    manifest = Path(cfg.manifest)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    key = input_hash(manifest)
    features_path = out / "features.csv"
    if cfg.cache and _cache_valid(features_path, key):
        logger.info("reusing cached feature matrix %s", features_path)
        return FeatureMatrix.from_csv(features_path), key
    cohort = load_cohort(manifest)
    matrix = featurize_cohort(cohort, jobs=cfg.jobs)
    matrix.to_csv(features_path)
    _write_cache_key(features_path, key)
    return matrix, key


def _selection_cache_key(features_key: str, cfg: RunConfig) -> str:
    doc = {
        "features": features_key,
        "alpha": cfg.alpha,
        "fdr_enabled": cfg.fdr_enabled,
        "fdr_threshold": cfg.fdr_threshold,
        "sffs_max_size": cfg.sffs_max_size,
        "classifier": cfg.classifier,
        "knn_k": cfg.knn_k,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _ensure_selection(
    cfg: RunConfig, matrix: FeatureMatrix, features_key: str
) -> tuple[selection.SelectionReport, str]:
    out = Path(cfg.out)
    key = _selection_cache_key(features_key, cfg)
    report_path = out / "selection.json"
    if cfg.cache and _cache_valid(report_path, key):
        logger.info("reusing cached selection report %s", report_path)
        return _load_selection_report(report_path), key
    report = selection.rank_and_filter(
        matrix, alpha=cfg.alpha, fdr_threshold=cfg.fdr_threshold
    )
    candidates = list(report.significant_set)
    if cfg.fdr_enabled:
        allowed = set(report.fdr_set)
        candidates = [c for c in candidates if c in allowed]
    if candidates:
        objective = classify.make_subset_objective(
            matrix, classifier=cfg.classifier, knn_k=cfg.knn_k
        )
        subset, trace = selection.sffs(
            candidates, objective, cfg.sffs_max_size, jobs=cfg.jobs
        )
        report.final_subset = subset
        report.sffs_trace = trace
    else:
        logger.warning("no features pass the significance filter")
    report.to_json(report_path)
    report.to_csv(out / "selection.csv")
    _write_cache_key(report_path, key)
    return report, key


def _load_selection_report(path: Path) -> selection.SelectionReport:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return selection.SelectionReport(
        alpha=doc["alpha"],
        fdr_threshold=doc["fdr_threshold"],
        anova=[
            selection.FeatureStat(
                name=row["feature"], f_stat=row["F"], p=row["p"],
                p_adj=row["p_adj"], rank=row["rank"],
                degenerate=row["degenerate"],
            )
            for row in doc["anova"]
        ],
        significant_set=doc["significant_set"],
        fdr_set=doc["fdr_set"],
        sffs_trace=[
            selection.TraceStep(t["action"], t["feature"], t["objective"])
            for t in doc["sffs_trace"]
        ],
        final_subset=doc["final_subset"],
    )


def _write_run_meta(cfg: RunConfig, features_key: str,
                    extra: dict | None = None) -> None:
    meta = {
        "config": asdict(cfg),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "tapdx": tapdx.__version__,
        },
        "input_hashes": {"cohort": features_key},
        "assumptions": list(PINNED_ASSUMPTIONS),
    }
    if extra:
        meta.update(extra)
    with open(Path(cfg.out) / "run_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def _prob_columns(classes) -> list[str]:
    return [f"p_{c.value if hasattr(c, 'value') else c}" for c in classes]


def _write_predictions_csv(path: Path, matrix: FeatureMatrix,
                           predictions, classes) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("person_id,trial_id,true,pred," + ",".join(_prob_columns(classes)) + "\n")
        for meta, pred in zip(matrix.meta, predictions):
            cells = [meta.person_id, meta.trial_id, meta.label.value,
                     pred.label.value if hasattr(pred.label, "value") else str(pred.label)]
            cells.extend(repr(pred.probabilities[c]) for c in classes)
            fh.write(",".join(cells) + "\n")


def _run_evaluation(cfg: RunConfig, matrix: FeatureMatrix,
                    report: selection.SelectionReport, features_key: str) -> dict:
    out = Path(cfg.out)
    subset = report.final_subset
    if not subset:
        raise errors.DataError("selection produced an empty feature subset")
    classes = [c for c in CLASS_ORDER if c in set(matrix.labels())]

    search_meta: dict = {}
    if cfg.classifier == "svm":
        search_cfg = classify.SearchConfig(trials=cfg.trials, seed=cfg.seed)

        def hp_objective(hp: classify.Hyperparams) -> float:
            return classify.loso_accuracy(matrix, subset, hp, classifier="svm")

        best_hp, trial_log = classify.hyperparameter_search(
            hp_objective, search_cfg, jobs=cfg.jobs
        )
        with open(out / "search_trials.csv", "w", newline="\n", encoding="utf-8") as fh:
            fh.write("trial,kernel,C,gamma,score\n")
            for i, (hp, score) in enumerate(trial_log):
                fh.write(f"{i},{hp.kernel},{hp.c!r},{hp.gamma!r},{score!r}\n")
        search_meta = {
            "best_hyperparams": {"kernel": best_hp.kernel, "C": best_hp.c,
                                 "gamma": best_hp.gamma},
            "search": {"trials": cfg.trials, "seed": cfg.seed},
        }
    else:
        best_hp = classify.Hyperparams(knn_k=cfg.knn_k)
        search_meta = {"best_hyperparams": {"knn_k": cfg.knn_k}}

    predictions = classify.loso_cv(
        matrix, subset, best_hp, classifier=cfg.classifier, classes=classes
    )
    _write_predictions_csv(out / "predictions.csv", matrix, predictions, classes)

    subject_ids = matrix.subject_ids()
    subject_true = []
    subject_preds = []
    by_subject: dict[str, list] = {pid: [] for pid in subject_ids}
    for meta, pred in zip(matrix.meta, predictions):
        by_subject[meta.person_id].append((meta.label, pred))
    for pid in subject_ids:
        labels = {lbl for lbl, _ in by_subject[pid]}
        subject_true.append(labels.pop())
        subject_preds.append(
            evaluate.aggregate_subject([p for _, p in by_subject[pid]])
        )

    evaluate.emit_report(
        out,
        trial_true=matrix.labels(),
        trial_predictions=predictions,
        subject_true=subject_true,
        subject_predictions=subject_preds,
    )

    if cfg.classifier == "svm":
        final_model = classify.train_svm(
            matrix.subset(subset), matrix.labels(), best_hp,
            classes=classes, feature_names=tuple(subset),
        )
        with open(out / "model.json", "w", encoding="utf-8") as fh:
            json.dump(classify.svm_model_to_dict(final_model), fh)
            fh.write("\n")

    cm_subject = evaluate.confusion(subject_true, [p.label for p in subject_preds])
    accuracy = cm_subject.correct / cm_subject.total * 100.0
    print(f"per-subject accuracy: {accuracy:.2f}% "
          f"({cm_subject.correct}/{cm_subject.total})")
    return search_meta


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate(cfg: RunConfig) -> int:
    manifest = Path(cfg.manifest)
    rows = _read_manifest_rows(manifest)
    if not rows:
        print(f"{manifest}: manifest lists no trials")
        return EXIT_CONFIG_ERROR
    failures = 0
    recordings = []
    for row in rows:
        trial = Path(row["path"])
        if not trial.is_absolute():
            trial = manifest.parent / trial
        try:
            rec = load_recording(
                trial,
                person_id=row["person_id"].strip(),
                trial_id=row["trial_id"].strip(),
                label=parse_label(row["label"]),
                sample_rate_hz=float(row["sample_rate_hz"] or 200.0),
            )
            recordings.append(rec)
            print(f"PASS {row['path']}")
        except errors.TapdxError as exc:
            failures += 1
            print(f"FAIL {row['path']}: {exc}")
    if not failures:
        try:
            cohort = Cohort(recordings=recordings)
        except errors.TapdxError as exc:
            print(f"FAIL cohort: {exc}")
            return EXIT_DATA_ERROR
        counts = cohort.class_counts()
        summary = ", ".join(
            f"{label.value} {trials}/{subjects}"
            for label, (subjects, trials) in counts.items()
        )
        print(f"OK: {len(cohort.recordings)} trials, "
              f"{cohort.n_subjects} subjects ({summary})")
        return EXIT_OK
    print(f"{failures}/{len(rows)} files failed validation")
    return EXIT_DATA_ERROR


def cmd_features(cfg: RunConfig) -> int:
    matrix, key = _ensure_features(cfg)
    _write_run_meta(cfg, key)
    print(f"feature matrix: {matrix.n_rows} x {len(matrix.columns)} "
          f"-> {Path(cfg.out) / 'features.csv'}")
    return EXIT_OK


def cmd_select(cfg: RunConfig) -> int:
    matrix, key = _ensure_features(cfg)
    report, _ = _ensure_selection(cfg, matrix, key)
    _write_run_meta(cfg, key)
    print(f"significant features (p < {cfg.alpha}): {len(report.significant_set)}")
    if report.final_subset:
        print(f"selected subset ({len(report.final_subset)}): "
              + ", ".join(report.final_subset))
    else:
        print("no subset selected; nothing passed the filter")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    matrix, key = _ensure_features(cfg)
    report, _ = _ensure_selection(cfg, matrix, key)
    search_meta = _run_evaluation(cfg, matrix, report, key)
    _write_run_meta(cfg, key, extra=search_meta)
    return EXIT_OK


def cmd_run(cfg: RunConfig) -> int:
    return cmd_evaluate(cfg)


COMMANDS = {
    "validate": cmd_validate,
    "features": cmd_features,
    "select": cmd_select,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tapdx",
        description="Finger-tapping differential-diagnosis pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help=f"YAML config (default ${CONFIG_ENV_VAR})")
        p.add_argument("--manifest")
        p.add_argument("--out")
        p.add_argument("--alpha", type=float)
        p.add_argument("--trials", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--classifier", choices=("svm", "knn"))
        p.add_argument("--jobs", type=int)
        p.add_argument("--no-cache", action="store_true")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        cfg.validate()
        return COMMANDS[args.command](cfg)
    except errors.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except errors.NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL_ERROR
    except errors.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
