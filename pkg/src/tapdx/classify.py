"""Multiclass SVM and kNN under leave-one-subject-out cross-validation.

The SVM is a one-vs-one ensemble of soft-margin binary machines trained
with a deterministic SMO solver on a precomputed Gram matrix. Class
probabilities come from a softmax over the per-class sums of signed
pairwise margins, which keeps prediction fully deterministic (no Platt
calibration fit on tiny folds).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np
from numba import njit

from tapdx import errors
from tapdx.features import FeatureMatrix
from tapdx.ingest import CLASS_ORDER, Label

logger = logging.getLogger(__name__)

KKT_TOL = 1e-3
# progress threshold for an SMO step to count as a real update; must sit
# well below the KKT tolerance or near-optimal steps get rejected and the
# solver stalls short of tolerance
_SMO_EPS = 1e-9
# kernel-evaluation budget per pairwise problem
SMO_KERNEL_OP_CAP = 10_000_000

HP_RANGE = (0.01, 100.0)
KERNELS = ("rbf", "sigmoid")


@dataclass
class Hyperparams:
    kernel: str = "rbf"
    c: float = 1.0
    gamma: float = 1.0
    knn_k: int | None = None

    def __post_init__(self) -> None:
        if self.kernel not in KERNELS:
            raise errors.ConfigError(f"unknown kernel {self.kernel!r}")
        lo, hi = HP_RANGE
        if not (lo <= self.c <= hi):
            raise errors.ConfigError(f"C={self.c} outside [{lo}, {hi}]")
        if not (lo <= self.gamma <= hi):
            raise errors.ConfigError(f"gamma={self.gamma} outside [{lo}, {hi}]")
        if self.knn_k is not None and self.knn_k < 1:
            raise errors.ConfigError(f"knn_k={self.knn_k} must be positive")


@dataclass
class SearchConfig:
    trials: int = 200
    seed: int = 42
    c_range: tuple[float, float] = HP_RANGE
    gamma_range: tuple[float, float] = HP_RANGE
    kernels: tuple[str, ...] = KERNELS

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise errors.ConfigError(f"trials={self.trials} must be >= 1")


@dataclass
class Prediction:
    label: Hashable
    probabilities: dict
    person_id: str = ""
    trial_id: str = ""


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

@dataclass
class Standardization:
    mean: np.ndarray
    scale: np.ndarray


def standardize_fit(rows: np.ndarray) -> Standardization:
    """Column means and population stds from training rows only.
    Zero-variance columns pass through unscaled."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise errors.DataError("need at least 2 training rows")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    flat = std == 0.0
    if np.any(flat):
        logger.debug("%d zero-variance columns left unscaled", int(flat.sum()))
    return Standardization(mean=mean, scale=np.where(flat, 1.0, std))


def standardize_apply(params: Standardization, rows: np.ndarray) -> np.ndarray:
    return (np.asarray(rows, dtype=float) - params.mean) / params.scale


def standardize_invert(params: Standardization, rows: np.ndarray) -> np.ndarray:
    return np.asarray(rows, dtype=float) * params.scale + params.mean


# ---------------------------------------------------------------------------
# Kernels and the SMO solver
# ---------------------------------------------------------------------------

def kernel_matrix(kind: str, gamma: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # elementwise broadcasting (no BLAS) so each entry's rounding is
    # independent of batch shape; batch and single-row prediction agree
    # bit for bit
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if kind == "rbf":
        diff = a[:, None, :] - b[None, :, :]
        return np.exp(-gamma * np.sum(diff * diff, axis=-1))
    if kind == "sigmoid":
        return np.tanh(gamma * np.sum(a[:, None, :] * b[None, :, :], axis=-1))
    raise errors.ConfigError(f"unknown kernel {kind!r}")


@njit(cache=True, nogil=True)
def _take_step(K, y, alpha, F, c_value, i1, i2):
    """One SMO pair update; mutates alpha and the cache F (F_i = u_i - y_i
    with u the kernel expansion without threshold). Returns success."""
    if i1 == i2:
        return False
    a1_old = alpha[i1]
    a2_old = alpha[i2]
    y1 = y[i1]
    y2 = y[i2]
    f1 = F[i1]
    f2 = F[i2]
    s = y1 * y2
    if s > 0.0:
        low = max(0.0, a1_old + a2_old - c_value)
        high = min(c_value, a1_old + a2_old)
    else:
        low = max(0.0, a2_old - a1_old)
        high = min(c_value, c_value + a2_old - a1_old)
    if high - low < 1e-12:
        return False
    k11 = K[i1, i1]
    k12 = K[i1, i2]
    k22 = K[i2, i2]
    eta = k11 + k22 - 2.0 * k12
    if eta > 0.0:
        a2 = a2_old + y2 * (f1 - f2) / eta
        if a2 < low:
            a2 = low
        elif a2 > high:
            a2 = high
    else:
        # indefinite kernel direction: the dual is linear or convex along
        # the segment, so evaluate it exactly at both ends
        u1 = f1 + y1
        u2 = f2 + y2
        v1 = u1 - y1 * a1_old * k11 - y2 * a2_old * k12
        v2 = u2 - y1 * a1_old * k12 - y2 * a2_old * k22
        a1_low = a1_old + s * (a2_old - low)
        obj_low = (a1_low + low
                   - 0.5 * a1_low * a1_low * k11 - 0.5 * low * low * k22
                   - s * a1_low * low * k12
                   - y1 * a1_low * v1 - y2 * low * v2)
        a1_high = a1_old + s * (a2_old - high)
        obj_high = (a1_high + high
                    - 0.5 * a1_high * a1_high * k11 - 0.5 * high * high * k22
                    - s * a1_high * high * k12
                    - y1 * a1_high * v1 - y2 * high * v2)
        if obj_low > obj_high + _SMO_EPS:
            a2 = low
        elif obj_high > obj_low + _SMO_EPS:
            a2 = high
        else:
            a2 = a2_old
    if abs(a2 - a2_old) < _SMO_EPS * (a2 + a2_old + _SMO_EPS):
        return False
    a1 = a1_old + s * (a2_old - a2)
    # snap alphas that land within rounding of the box bounds
    snap = 1e-12 * c_value
    if a1 < snap:
        a1 = 0.0
    elif a1 > c_value - snap:
        a1 = c_value
    if a2 < snap:
        a2 = 0.0
    elif a2 > c_value - snap:
        a2 = c_value
    d1 = y1 * (a1 - a1_old)
    d2 = y2 * (a2 - a2_old)
    alpha[i1] = a1
    alpha[i2] = a2
    for i in range(F.shape[0]):
        F[i] += d1 * K[i1, i] + d2 * K[i2, i]
    return True


@njit(cache=True, nogil=True)
def _smo_core(K, y, c_value, tol, kernel_op_cap):
    """Maximal-violating-pair SMO (Keerthi's modification).

    Repeatedly steps on (argmax F over I_low, argmin F over I_up) until
    b_low - b_up <= 2 tol, which bounds every training point's KKT
    violation by tol once the threshold is set to the interval midpoint.
    """
    n = y.shape[0]
    alpha = np.zeros(n)
    F = -y.copy()  # u is identically 0 before any update
    ops = 0
    status = 0
    b_up = 0.0
    b_low = 0.0
    while True:
        b_up = np.inf
        b_low = -np.inf
        i_up = -1
        i_low = -1
        for i in range(n):
            ai = alpha[i]
            if (y[i] > 0.0 and ai < c_value) or (y[i] < 0.0 and ai > 0.0):
                if F[i] < b_up:
                    b_up = F[i]
                    i_up = i
            if (y[i] > 0.0 and ai > 0.0) or (y[i] < 0.0 and ai < c_value):
                if F[i] > b_low:
                    b_low = F[i]
                    i_low = i
        if i_up < 0 or i_low < 0 or b_low - b_up <= 2.0 * tol:
            break
        if not _take_step(K, y, alpha, F, c_value, i_low, i_up):
            # no progress possible on the worst pair; leave the rest to
            # the post-fit check
            break
        ops += 2 * n
        if ops > kernel_op_cap:
            status = 1
            break
    b = -(b_up + b_low) / 2.0
    return alpha, b, status


def smo_solve(
    K: np.ndarray,
    y: np.ndarray,
    c_value: float,
    tol: float = KKT_TOL,
    kernel_op_cap: int = SMO_KERNEL_OP_CAP,
) -> tuple[np.ndarray, float]:
    """Solve the binary soft-margin dual on a precomputed Gram matrix.

    Deterministic maximal-violating-pair SMO. Returns (alpha, b) with the
    decision function f(x) = sum_i alpha_i y_i K(x_i, x) + b.
    """
    K = np.ascontiguousarray(K, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    alpha, b, status = _smo_core(K, y, float(c_value), float(tol),
                                 int(kernel_op_cap))
    if status != 0:
        raise errors.SolverNonconvergence(
            f"kernel-evaluation cap {kernel_op_cap} exceeded",
            best_state=(alpha.copy(), float(b)),
        )
    return alpha, float(b)


def kkt_violation(K: np.ndarray, y: np.ndarray, alpha: np.ndarray, b: float,
                  c_value: float) -> float:
    """Largest KKT violation over the training points (0 when optimal)."""
    y = np.asarray(y, dtype=float)
    f = K @ (alpha * y) + b
    r = y * f - 1.0
    worst = 0.0
    for i in range(len(y)):
        if alpha[i] < 1e-9:
            worst = max(worst, -r[i])
        elif alpha[i] > c_value - 1e-9:
            worst = max(worst, r[i])
        else:
            worst = max(worst, abs(r[i]))
    return worst


# ---------------------------------------------------------------------------
# One-vs-one SVM
# ---------------------------------------------------------------------------

def _ordered_classes(y: Sequence, classes: Sequence | None) -> list:
    present = set(y)
    if classes is not None:
        ordered = [c for c in classes if c in present]
        if set(ordered) != present:
            raise errors.DataError("labels outside the declared class list")
        return ordered
    if all(isinstance(v, Label) for v in present):
        return [c for c in CLASS_ORDER if c in present]
    return sorted(present)


@dataclass
class _PairMachine:
    pos: Hashable
    neg: Hashable
    vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i over the support vectors
    intercept: float


@dataclass
class SvmModel:
    hp: Hyperparams
    classes: list
    standardization: Standardization
    machines: list[_PairMachine]
    feature_names: tuple[str, ...] | None = None

    def _check_width(self, rows: np.ndarray) -> None:
        width = len(self.standardization.mean)
        if rows.shape[1] != width:
            raise errors.FeatureMismatch(
                f"expected {width} features, got {rows.shape[1]}"
            )

    def margins(self, rows: np.ndarray) -> np.ndarray:
        """Per-class sums of signed pairwise margins, shape (n, n_classes)."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        self._check_width(rows)
        z = standardize_apply(self.standardization, rows)
        scores = np.zeros((len(z), len(self.classes)))
        index = {c: i for i, c in enumerate(self.classes)}
        for machine in self.machines:
            k = kernel_matrix(self.hp.kernel, self.hp.gamma, z, machine.vectors)
            # row-wise reduction instead of BLAS keeps batch == single exact
            margin = np.sum(k * machine.dual_coef, axis=1) + machine.intercept
            scores[:, index[machine.pos]] += margin
            scores[:, index[machine.neg]] -= margin
        return scores

    def predict(self, rows: np.ndarray) -> list[Prediction]:
        scores = self.margins(rows)
        shifted = scores - scores.max(axis=1, keepdims=True)
        weights = np.exp(shifted)
        probs = weights / weights.sum(axis=1, keepdims=True)
        out = []
        for row in probs:
            winner = self.classes[int(np.argmax(row))]
            out.append(Prediction(
                label=winner,
                probabilities={c: float(p) for c, p in zip(self.classes, row)},
            ))
        return out


def train_svm(
    X: np.ndarray,
    y: Sequence,
    hp: Hyperparams,
    classes: Sequence | None = None,
    feature_names: tuple[str, ...] | None = None,
) -> SvmModel:
    """Fit the one-vs-one ensemble; standardization is fitted here, on the
    training rows only, and stored with the model."""
    X = np.asarray(X, dtype=float)
    y = list(y)
    if X.shape[0] < 4:
        raise errors.DataError(f"need >= 4 training rows, got {X.shape[0]}")
    ordered = _ordered_classes(y, classes)
    if len(ordered) < 2:
        raise errors.DataError("need at least two classes")
    params = standardize_fit(X)
    z = standardize_apply(params, X)
    y_arr = np.array(y, dtype=object)
    machines = []
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            pos, neg = ordered[i], ordered[j]
            rows = np.flatnonzero((y_arr == pos) | (y_arr == neg))
            signs = np.where(y_arr[rows] == pos, 1.0, -1.0)
            gram = kernel_matrix(hp.kernel, hp.gamma, z[rows], z[rows])
            alpha, intercept = smo_solve(gram, signs, hp.c)
            worst = kkt_violation(gram, signs, alpha, intercept, hp.c)
            if worst > KKT_TOL + 1e-9:
                logger.warning("pair (%s, %s): KKT violation %.2e above tol",
                               pos, neg, worst)
            support = np.flatnonzero(alpha > 1e-12)
            machines.append(_PairMachine(
                pos=pos,
                neg=neg,
                vectors=z[rows][support],
                dual_coef=alpha[support] * signs[support],
                intercept=intercept,
            ))
    return SvmModel(
        hp=hp,
        classes=ordered,
        standardization=params,
        machines=machines,
        feature_names=feature_names,
    )


def svm_model_to_dict(model: SvmModel) -> dict:
    def encode(label):
        return label.value if isinstance(label, Label) else label

    return {
        "kernel": model.hp.kernel,
        "c": model.hp.c,
        "gamma": model.hp.gamma,
        "classes": [encode(c) for c in model.classes],
        "feature_subset": list(model.feature_names or ()),
        "standardization": {
            "mean": model.standardization.mean.tolist(),
            "scale": model.standardization.scale.tolist(),
        },
        "machines": [
            {
                "pos": encode(m.pos),
                "neg": encode(m.neg),
                "vectors": m.vectors.tolist(),
                "dual_coef": m.dual_coef.tolist(),
                "intercept": m.intercept,
            }
            for m in model.machines
        ],
    }


# ---------------------------------------------------------------------------
# kNN baseline
# ---------------------------------------------------------------------------

@dataclass
class KnnModel:
    k: int
    classes: list
    standardization: Standardization
    vectors: np.ndarray
    labels: list
    feature_names: tuple[str, ...] | None = None

    def predict(self, rows: np.ndarray) -> list[Prediction]:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != len(self.standardization.mean):
            raise errors.FeatureMismatch(
                f"expected {len(self.standardization.mean)} features, "
                f"got {rows.shape[1]}"
            )
        z = standardize_apply(self.standardization, rows)
        out = []
        idx = np.arange(len(self.vectors))
        for point in z:
            dist = np.sqrt(np.sum((self.vectors - point) ** 2, axis=1))
            order = np.lexsort((idx, dist))  # distance first, then row index
            votes = {c: 0 for c in self.classes}
            for neighbor in order[: self.k]:
                votes[self.labels[neighbor]] += 1
            best = max(votes.values())
            winner = next(c for c in self.classes if votes[c] == best)
            out.append(Prediction(
                label=winner,
                probabilities={c: votes[c] / self.k for c in self.classes},
            ))
        return out


def train_knn(
    X: np.ndarray,
    y: Sequence,
    k: int,
    classes: Sequence | None = None,
    feature_names: tuple[str, ...] | None = None,
) -> KnnModel:
    X = np.asarray(X, dtype=float)
    y = list(y)
    if k > X.shape[0]:
        raise errors.ConfigError(f"k={k} exceeds {X.shape[0]} training rows")
    params = standardize_fit(X)
    return KnnModel(
        k=k,
        classes=_ordered_classes(y, classes),
        standardization=params,
        vectors=standardize_apply(params, X),
        labels=y,
        feature_names=feature_names,
    )


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------

def hyperparameter_search(
    objective: Callable[[Hyperparams], float],
    cfg: SearchConfig,
    jobs: int = 1,
) -> tuple[Hyperparams, list[tuple[Hyperparams, float]]]:
    """Seeded random search: kernel uniform, C and gamma log-uniform.

    Ties keep the earliest trial; objective failures score -inf. The whole
    trial sequence is drawn up front from the seed, so evaluations may run
    on a thread pool without changing the outcome.
    """
    rng = np.random.default_rng(cfg.seed)
    log_c = tuple(math.log(v) for v in cfg.c_range)
    log_g = tuple(math.log(v) for v in cfg.gamma_range)
    trials = [
        Hyperparams(
            kernel=cfg.kernels[int(rng.integers(len(cfg.kernels)))],
            c=math.exp(rng.uniform(*log_c)),
            gamma=math.exp(rng.uniform(*log_g)),
        )
        for _ in range(cfg.trials)
    ]

    def run(hp: Hyperparams) -> float:
        try:
            return float(objective(hp))
        except Exception as exc:
            logger.info("search trial failed on %s: %s", hp, exc)
            return float("-inf")

    if jobs > 1 and len(trials) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(run, trials))
    else:
        scores = [run(hp) for hp in trials]

    trial_log = list(zip(trials, scores))
    best, best_score = trials[0], scores[0]
    for hp, score in trial_log[1:]:
        if score > best_score:
            best, best_score = hp, score
    return best, trial_log


# ---------------------------------------------------------------------------
# Leave-one-subject-out cross-validation
# ---------------------------------------------------------------------------

def loso_cv(
    matrix: FeatureMatrix,
    subset: Sequence[str],
    hp: Hyperparams,
    classifier: str = "svm",
    classes: Sequence | None = None,
) -> list[Prediction]:
    """Hold out every subject in turn; fit standardization and classifier
    on the remaining subjects' trials; predict the held-out trials.

    Training rows are put in canonical (person_id, trial_id) order before
    fitting, so results do not depend on the matrix's row order. The
    returned list aligns with the matrix rows.
    """
    if classifier not in ("svm", "knn"):
        raise errors.ConfigError(f"unknown classifier {classifier!r}")
    X = matrix.subset(list(subset))
    labels = matrix.labels()
    ordered_all = _ordered_classes(labels, classes)
    keys = [(m.person_id, m.trial_id) for m in matrix.meta]
    canonical = sorted(range(matrix.n_rows), key=lambda i: keys[i])
    subjects = sorted({m.person_id for m in matrix.meta})
    predictions: list[Prediction | None] = [None] * matrix.n_rows
    for held_out in subjects:
        train_idx = [i for i in canonical if matrix.meta[i].person_id != held_out]
        test_idx = [i for i in canonical if matrix.meta[i].person_id == held_out]
        train_labels = [labels[i] for i in train_idx]
        missing = [c for c in ordered_all if c not in train_labels]
        if missing:
            raise errors.ClassMissingInFold(
                f"training fold without subject {held_out!r} lost classes {missing}"
            )
        if classifier == "svm":
            model = train_svm(X[train_idx], train_labels, hp, classes=ordered_all)
        else:
            k = hp.knn_k or 5
            model = train_knn(X[train_idx], train_labels, min(k, len(train_idx)),
                              classes=ordered_all)
        for i, pred in zip(test_idx, model.predict(X[test_idx])):
            pred.person_id = matrix.meta[i].person_id
            pred.trial_id = matrix.meta[i].trial_id
            predictions[i] = pred
    assert all(p is not None for p in predictions)
    return predictions  # type: ignore[return-value]


def loso_accuracy(
    matrix: FeatureMatrix,
    subset: Sequence[str],
    hp: Hyperparams,
    classifier: str = "svm",
) -> float:
    preds = loso_cv(matrix, subset, hp, classifier=classifier)
    truth = matrix.labels()
    return float(np.mean([p.label == t for p, t in zip(preds, truth)]))


def reference_hyperparams(n_features: int, classifier: str = "svm",
                          knn_k: int = 5) -> Hyperparams:
    """Fixed hyperparameters used inside the SFFS wrapper: RBF with C = 1
    and gamma = 1/n_features on standardized columns."""
    gamma = min(max(1.0 / max(n_features, 1), HP_RANGE[0]), HP_RANGE[1])
    return Hyperparams(kernel="rbf", c=1.0, gamma=gamma,
                       knn_k=knn_k if classifier == "knn" else None)


def make_subset_objective(
    matrix: FeatureMatrix,
    classifier: str = "svm",
    knn_k: int = 5,
) -> Callable[[tuple[str, ...]], float]:
    """Objective for SFFS: LOSO accuracy of the wrapped classifier."""

    def objective(subset: tuple[str, ...]) -> float:
        if not subset:
            raise errors.ObjectiveFailure("empty feature subset")
        hp = reference_hyperparams(len(subset), classifier, knn_k)
        return loso_accuracy(matrix, subset, hp, classifier=classifier)

    return objective
