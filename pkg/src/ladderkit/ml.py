"""Gaussian-process regression of knee and cross-over QPs from content features.

The model is a zero-mean GP with an isotropic Matérn-5/2 kernel over
standardised features.  Per-resolution targets are predicted as a chain:
each link sees the features plus the predictions of all earlier links.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, stats
from scipy.spatial.distance import cdist

from .core import ADJACENT_PAIRS, LadderkitError, Resolution, ValidationError
from .features import FEATURE_NAMES, KNEE_FEATURE_SUBSET, FeatureVector

logger = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
MAX_JITTER = 1e-6

KNEE_TARGETS = tuple(r.label for r in Resolution.descending())
CROSSOVER_TARGETS = tuple(f"{h.label}/{l.label}:{side}" for h, l in ADJACENT_PAIRS for side in ("high", "low"))


class ConditioningError(LadderkitError):
    """The kernel matrix stayed non positive-definite after jitter escalation."""


def matern52(x1, x2, sigma_f2: float, length_scale: float) -> float:
    """Matérn-5/2 covariance between two vectors.

    Raises:
        ValidationError: ``length_scale <= 0`` or mismatched dimensions.
    """
    if not length_scale > 0:
        raise ValidationError(f"length scale must be positive, got {length_scale}")
    a, b = np.atleast_1d(np.asarray(x1, float)), np.atleast_1d(np.asarray(x2, float))
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch {a.shape} vs {b.shape}")
    r = float(np.linalg.norm(a - b)) / length_scale
    return sigma_f2 * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * math.exp(-SQRT5 * r)


def _matern_from_dist(d: np.ndarray, sigma_f2: float, length_scale: float) -> np.ndarray:
    r = SQRT5 * d / length_scale
    return sigma_f2 * (1.0 + r + r * r / 3.0) * np.exp(-r)


def matern52_matrix(a: np.ndarray, b: np.ndarray, sigma_f2: float, length_scale: float) -> np.ndarray:
    if not length_scale > 0:
        raise ValidationError(f"length scale must be positive, got {length_scale}")
    return _matern_from_dist(cdist(np.atleast_2d(a), np.atleast_2d(b)), sigma_f2, length_scale)


@dataclass(frozen=True)
class Hyper:
    sigma_f2: float = 1.0
    length_scale: float = 1.0
    sigma_n2: float = 1e-2

    def __post_init__(self):
        if not (self.sigma_f2 > 0 and self.length_scale > 0 and self.sigma_n2 >= 0):
            raise ValidationError(f"invalid hyperparameters {self}")


def _cholesky(k: np.ndarray) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor, adding diagonal jitter up to ``MAX_JITTER`` if needed."""
    n = k.shape[0]
    jitter = 0.0
    while True:
        try:
            return linalg.cholesky(k + jitter * np.eye(n), lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10.0
            if jitter > MAX_JITTER * (1 + 1e-9):
                raise ConditioningError(f"kernel matrix not positive definite with jitter {MAX_JITTER}")


def _lml(dist: np.ndarray, y: np.ndarray, h: Hyper) -> float:
    k = _matern_from_dist(dist, h.sigma_f2, h.length_scale)
    k[np.diag_indices_from(k)] += h.sigma_n2
    try:
        chol, _ = _cholesky(k)
    except ConditioningError:
        return -np.inf
    alpha = linalg.cho_solve((chol, True), y, check_finite=False)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * y.size * math.log(2 * math.pi))


@dataclass(frozen=True)
class SearchConfig:
    """Multi-start coordinate descent over log hyperparameters."""

    starts: int = 5
    iterations: int = 40
    tol: float = 1e-6
    initial_step: float = 1.0
    min_step: float = 1e-2
    seed: int = 0


def warm_search(search: SearchConfig) -> SearchConfig:
    """Single-start, short-step variant for refining a nearby optimum."""
    return SearchConfig(1, search.iterations, search.tol, 0.25, search.min_step, search.seed)


def optimize_hyper(dist: np.ndarray, y: np.ndarray, n_dims: int, init: Optional[Hyper] = None,
                   search: SearchConfig = SearchConfig()) -> Hyper:
    """Maximise the log marginal likelihood on a log-scale grid.

    Bounds scale with the target variance, so a constant target drives the
    signal variance to its (tiny) lower bound.
    """
    vy = max(float(np.var(y)), 1e-12)
    lo = np.log([1e-4 * vy, 0.05, 1e-8 * vy])
    hi = np.log([1e2 * vy, 1e2 * math.sqrt(max(n_dims, 1)), 2.0 * vy])
    first = init or Hyper(vy, math.sqrt(max(n_dims, 1)), 0.1 * vy)
    rng = np.random.default_rng(search.seed)
    starts = [np.clip(np.log([first.sigma_f2, first.length_scale, max(first.sigma_n2, 1e-300)]), lo, hi)]
    starts += [rng.uniform(lo, hi) for _ in range(search.starts - 1)]

    def score(theta):
        return _lml(dist, y, Hyper(*np.exp(theta)))

    best_theta, best = starts[0], -np.inf
    for theta in starts:
        theta = theta.copy()
        f = score(theta)
        step = search.initial_step
        for _ in range(search.iterations):
            gained = 0.0
            for i in range(3):
                for sign in (1.0, -1.0):
                    cand = theta.copy()
                    cand[i] = np.clip(cand[i] + sign * step, lo[i], hi[i])
                    fc = score(cand)
                    if fc > f + search.tol:
                        gained += fc - f
                        theta, f = cand, fc
                        break
            if gained <= search.tol:
                step /= 2.0
                if step < search.min_step:
                    break
        if f > best:
            best_theta, best = theta, f
    if not np.isfinite(best):
        raise ConditioningError("no hyperparameter setting gave a positive-definite kernel")
    return Hyper(*np.exp(best_theta))


@dataclass(frozen=True)
class GPModel:
    """A fitted GP.  Immutable, so safe to share across threads.

    ``feature_subset`` selects columns of the raw input before
    standardisation; ``x_train`` and ``y_train`` keep the raw data so the
    model can be stored and reloaded.
    """

    x_train: np.ndarray
    y_train: np.ndarray
    hyper: Hyper
    feature_subset: Tuple[int, ...]
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def n_inputs(self) -> int:
        return self.x_train.shape[1]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if x.shape[1] != self.n_inputs:
            raise ValidationError(f"model expects {self.n_inputs} inputs, got {x.shape[1]}")
        return (x[:, list(self.feature_subset)] - self.x_mean) / self.x_scale

    @property
    def z_train(self) -> np.ndarray:
        return self.standardize(self.x_train)

    def to_dict(self) -> dict:
        return {
            "kernel": "matern52",
            "hyper": {"sigma_f2": self.hyper.sigma_f2, "length_scale": self.hyper.length_scale,
                      "sigma_n2": self.hyper.sigma_n2},
            "feature_subset": list(self.feature_subset),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "x_train": self.x_train.tolist(),
            "y_train": self.y_train.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GPModel":
        try:
            h = Hyper(**{k: float(v) for k, v in d["hyper"].items()})
            return _assemble(np.asarray(d["x_train"], float), np.asarray(d["y_train"], float), h,
                             tuple(int(i) for i in d["feature_subset"]),
                             np.asarray(d["x_mean"], float), np.asarray(d["x_scale"], float), float(d["y_mean"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed GP model: {exc}") from exc


def _assemble(x: np.ndarray, y: np.ndarray, h: Hyper, subset: Tuple[int, ...], x_mean: np.ndarray,
              x_scale: np.ndarray, y_mean: float) -> GPModel:
    z = (x[:, list(subset)] - x_mean) / x_scale
    k = matern52_matrix(z, z, h.sigma_f2, h.length_scale)
    k[np.diag_indices_from(k)] += h.sigma_n2
    chol, jitter = _cholesky(k)
    alpha = linalg.cho_solve((chol, True), y - y_mean, check_finite=False)
    return GPModel(x, y, h, subset, x_mean, x_scale, y_mean, chol, alpha, jitter)


def gp_fit(x, y, hyper_init: Optional[Hyper] = None, optimize: bool = True,
           feature_subset: Optional[Sequence[int]] = None, search: SearchConfig = SearchConfig()) -> GPModel:
    """Fit a GP to rows ``x`` and targets ``y``.

    Columns are standardised (constant columns are only centred) and ``y``
    is centred.  With ``optimize`` the hyperparameters maximise the log
    marginal likelihood, starting from ``hyper_init``; otherwise
    ``hyper_init`` is used as is.

    A single training row is accepted: the model then predicts that row's
    target everywhere.

    Raises:
        ValidationError: empty or non-finite data, or shape mismatch.
        ConditioningError: Cholesky fails even with jitter ``1e-6``.
    """
    x = np.atleast_2d(np.asarray(x, float))
    y = np.asarray(y, float).ravel()
    if x.shape[0] != y.size or y.size == 0:
        raise ValidationError(f"{x.shape[0]} rows but {y.size} targets")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("training data contains non-finite values")
    subset = tuple(range(x.shape[1])) if feature_subset is None else tuple(int(i) for i in feature_subset)
    if not subset or min(subset) < 0 or max(subset) >= x.shape[1]:
        raise ValidationError(f"feature subset {subset} out of range for {x.shape[1]} columns")
    xs = x[:, list(subset)]
    x_mean = xs.mean(axis=0)
    x_scale = xs.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    y_mean = float(y.mean())
    h = hyper_init or Hyper()
    if optimize and y.size > 1:
        z = (xs - x_mean) / x_scale
        h = optimize_hyper(cdist(z, z), y - y_mean, len(subset), hyper_init, search)
    return _assemble(x, y, h, subset, x_mean, x_scale, y_mean)


def gp_predict(model: GPModel, x) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and latent variance (floored at 0) at the rows of ``x``."""
    z = model.standardize(x)
    ks = matern52_matrix(z, model.z_train, model.hyper.sigma_f2, model.hyper.length_scale)
    mean = model.y_mean + ks @ model.alpha
    v = linalg.solve_triangular(model.chol, ks.T, lower=True, check_finite=False)
    var = np.maximum(model.hyper.sigma_f2 - np.sum(v * v, axis=0), 0.0)
    return mean, var


def log_marginal_likelihood(model: GPModel) -> float:
    z = model.z_train
    return _lml(cdist(z, z), model.y_train - model.y_mean, model.hyper)


# --------------------------------------------------------- cross-validation

@dataclass(frozen=True)
class Metrics:
    mae: float
    r2: float
    lcc: float
    srcc: float

    @classmethod
    def of(cls, y: np.ndarray, pred: np.ndarray) -> "Metrics":
        y, pred = np.asarray(y, float), np.asarray(pred, float)
        mae = float(np.mean(np.abs(y - pred)))
        ss = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 0.0
        # Correlation is undefined for a constant vector; reported as 0.
        if np.ptp(y) == 0 or np.ptp(pred) == 0:
            return cls(mae, r2, 0.0, 0.0)
        lcc = float(np.clip(stats.pearsonr(y, pred)[0], -1.0, 1.0))
        srcc = float(np.clip(stats.spearmanr(y, pred)[0], -1.0, 1.0))
        return cls(mae, r2, lcc, srcc)


@dataclass
class CVReport:
    k: int
    seed: int
    pooled: Metrics
    per_fold: List[Metrics]
    predictions: np.ndarray = field(repr=False)
    folds: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "pooled": vars(self.pooled),
                "per_fold": [vars(m) for m in self.per_fold]}


def fold_assignment(n: int, k: int, seed: int) -> np.ndarray:
    """Fold id per row: a seeded shuffle cut into ``k`` near-equal parts.

    Raises:
        ValidationError: ``k < 2`` or fewer rows than folds.
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValidationError(f"{n} rows cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    for f, part in enumerate(np.array_split(perm, k)):
        folds[part] = f
    return folds


def kfold_cv(x, y, k: int = 10, seed: int = 0, feature_subset: Optional[Sequence[int]] = None,
             hyper: Optional[Hyper] = None, folds: Optional[np.ndarray] = None,
             search: SearchConfig = SearchConfig()) -> CVReport:
    """K-fold cross-validated predictions and metrics.

    With ``hyper`` given the hyperparameters are held fixed; otherwise they
    are optimised inside every training fold.  ``folds`` overrides the
    seeded assignment.
    """
    x = np.atleast_2d(np.asarray(x, float))
    y = np.asarray(y, float).ravel()
    folds = fold_assignment(y.size, k, seed) if folds is None else np.asarray(folds, int)
    if folds.size != y.size:
        raise ValidationError("fold assignment length differs from row count")
    pred = np.empty(y.size)
    per_fold = []
    for f in range(int(folds.max()) + 1):
        test = folds == f
        model = gp_fit(x[~test], y[~test], hyper, optimize=hyper is None,
                       feature_subset=feature_subset, search=search)
        pred[test] = gp_predict(model, x[test])[0]
        per_fold.append(Metrics.of(y[test], pred[test]))
    return CVReport(int(folds.max()) + 1, seed, Metrics.of(y, pred), per_fold, pred, folds)


@dataclass(frozen=True)
class RFEResult:
    removed: Tuple[int, ...]
    subsets: Tuple[Tuple[int, ...], ...]
    scores: Tuple[float, ...]
    best_subset: Tuple[int, ...]
    best_score: float


def rfe_path(x, y, min_features: int = 1, k: int = 10, seed: int = 0,
             features: Optional[Sequence[int]] = None, search: SearchConfig = SearchConfig()) -> RFEResult:
    """Backward elimination by cross-validated MAE.

    At each step the feature whose removal gives the lowest CV MAE is
    dropped.  Hyperparameters are optimised on all rows for each candidate
    subset, warm-started from the parent subset's optimum, and then held
    fixed across its folds.  This keeps the search affordable and every
    subset sees the same folds.  Ties go to the lower column index.

    Raises:
        ValidationError: ``min_features < 1``.
    """
    if min_features < 1:
        raise ValidationError(f"min_features must be >= 1, got {min_features}")
    x = np.atleast_2d(np.asarray(x, float))
    y = np.asarray(y, float).ravel()
    current = list(range(x.shape[1]) if features is None else features)
    folds = fold_assignment(y.size, k, seed)
    refine = warm_search(search)

    parent = gp_fit(x, y, feature_subset=current, search=search).hyper

    def score(subset, init):
        h = gp_fit(x, y, init, feature_subset=subset, search=refine).hyper
        return kfold_cv(x, y, folds=folds, feature_subset=subset, hyper=h).pooled.mae, h

    subsets = [tuple(current)]
    scores = [score(current, parent)[0]]
    removed = []
    while len(current) > min_features:
        trial = []
        for f in current:
            s, h = score([c for c in current if c != f], parent)
            trial.append((s, f, h))
        s, f, parent = min(trial, key=lambda t: t[:2])
        current.remove(f)
        removed.append(f)
        subsets.append(tuple(current))
        scores.append(s)
        logger.debug("RFE dropped %d, CV MAE %.4f", f, s)
    best = int(np.argmin(scores))
    return RFEResult(tuple(removed), tuple(subsets), tuple(scores), subsets[best], scores[best])


def rfe_select(x, y, min_features: int = 1, cv_seed: int = 0, **kwargs) -> Tuple[int, ...]:
    """Feature subset with the best CV MAE along the elimination path."""
    return rfe_path(x, y, min_features, seed=cv_seed, **kwargs).best_subset


# ------------------------------------------------------------ chained models

@dataclass(frozen=True)
class GPChain:
    """Per-target GP models applied in order.

    Link ``i`` sees the raw features plus the predictions of links
    ``0..i-1`` appended as extra columns.
    """

    targets: Tuple[str, ...]
    models: Tuple[Optional[GPModel], ...]
    chained: bool = True

    def predict(self, features) -> Dict[str, np.ndarray]:
        """Predicted targets for one feature vector or a matrix of rows.

        Raises:
            ValidationError: a link is missing.
        """
        if len(self.models) != len(self.targets) or any(m is None for m in self.models):
            missing = [t for t, m in zip(self.targets, self.models) if m is None] or self.targets[len(self.models):]
            raise ValidationError(f"missing chain link(s): {', '.join(missing)}")
        x = _as_matrix(features)
        out: Dict[str, np.ndarray] = {}
        for t, m in zip(self.targets, self.models):
            out[t] = gp_predict(m, _augment(x, out, self.chained))[0]
        return out

    def to_dict(self) -> dict:
        return {"targets": list(self.targets), "chained": self.chained,
                "models": [m.to_dict() for m in self.models]}

    @classmethod
    def from_dict(cls, d: dict) -> "GPChain":
        try:
            return cls(tuple(d["targets"]), tuple(GPModel.from_dict(m) for m in d["models"]),
                       bool(d.get("chained", True)))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed model chain: {exc}") from exc


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, FeatureVector):
        return features.as_array()[None, :]
    return np.atleast_2d(np.asarray(features, float))


def _augment(x: np.ndarray, previous: Mapping[str, np.ndarray], chained: bool) -> np.ndarray:
    if not chained or not previous:
        return x
    return np.column_stack([x] + [np.broadcast_to(v, (x.shape[0],)) for v in previous.values()])


def train_chain(x, targets: Mapping[str, Sequence[float]], order: Sequence[str],
                feature_subsets: Optional[Mapping[str, Sequence[int]]] = None, chained: bool = True,
                search: SearchConfig = SearchConfig(), init: Optional[Mapping[str, Hyper]] = None) -> GPChain:
    """Fit one GP per target in ``order``.

    Training rows for later links use the true values of earlier targets
    as the extra inputs; prediction substitutes the chain's own estimates.
    ``feature_subsets`` restricts the raw feature columns per target; the
    chained inputs are always kept.  With ``init`` each link's search is a
    single warm start from the given hyperparameters.
    """
    x = np.atleast_2d(np.asarray(x, float))
    models = []
    seen: Dict[str, np.ndarray] = {}
    for t in order:
        if t not in targets:
            raise ValidationError(f"no training values for target {t!r}")
        y = np.asarray(targets[t], float)
        xa = _augment(x, seen, chained)
        base = list(range(x.shape[1])) if not feature_subsets or t not in feature_subsets \
            else [int(i) for i in feature_subsets[t]]
        subset = base + list(range(x.shape[1], xa.shape[1]))
        if init and t in init:
            models.append(gp_fit(xa, y, init[t], feature_subset=subset, search=warm_search(search)))
        else:
            models.append(gp_fit(xa, y, feature_subset=subset, search=search))
        seen[t] = y
    return GPChain(tuple(order), tuple(models), chained)


def chain_cv(x, targets: Mapping[str, Sequence[float]], order: Sequence[str], k: int = 10, seed: int = 0,
             chained: bool = True, feature_subsets: Optional[Mapping[str, Sequence[int]]] = None,
             search: SearchConfig = SearchConfig()) -> Dict[str, Metrics]:
    """Cross-validated metrics per target for a whole chain.

    Each training fold re-optimises the hyperparameters, warm-started from
    a chain fitted to all rows.
    """
    x = np.atleast_2d(np.asarray(x, float))
    folds = fold_assignment(x.shape[0], k, seed)
    full = train_chain(x, targets, order, feature_subsets, chained, search)
    init = {t: m.hyper for t, m in zip(order, full.models)}
    pred = {t: np.empty(x.shape[0]) for t in order}
    for f in range(k):
        test = folds == f
        chain = train_chain(x[~test], {t: np.asarray(targets[t])[~test] for t in order}, order,
                            feature_subsets, chained, search, init)
        for t, v in chain.predict(x[test]).items():
            pred[t][test] = v
    return {t: Metrics.of(np.asarray(targets[t], float), pred[t]) for t in order}


def predict_knees_sequential(features, chain: GPChain) -> Dict[Resolution, float]:
    """Real-valued knee QP per resolution, 2160p first.

    Raises:
        ValidationError: the chain is not a complete knee chain.
    """
    if tuple(chain.targets) != KNEE_TARGETS:
        raise ValidationError(f"knee chain must be ordered {KNEE_TARGETS}, got {chain.targets}")
    p = chain.predict(features)
    return {Resolution.from_label(t): float(p[t][0]) for t in KNEE_TARGETS}


def predict_crossovers_sequential(features, chain: GPChain) -> Dict[Tuple[Resolution, Resolution],
                                                                        Tuple[float, float]]:
    """Real-valued ``(qp_high, qp_low)`` per adjacent pair, in the format FL takes."""
    if tuple(chain.targets) != CROSSOVER_TARGETS:
        raise ValidationError(f"cross-over chain must be ordered {CROSSOVER_TARGETS}, got {chain.targets}")
    p = chain.predict(features)
    return {(h, l): (float(p[f"{h.label}/{l.label}:high"][0]), float(p[f"{h.label}/{l.label}:low"][0]))
            for h, l in ADJACENT_PAIRS}


def default_knee_subsets() -> Dict[str, Tuple[int, ...]]:
    return {t: KNEE_FEATURE_SUBSET for t in KNEE_TARGETS}


# ------------------------------------------------------------------ storage

def save_chain(chain: GPChain, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(chain.to_dict()) + "\n")
    return path


def load_chain(path) -> GPChain:
    try:
        return GPChain.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc


@dataclass
class TrainingSet:
    sequence_ids: List[str]
    x: np.ndarray
    targets: Dict[str, np.ndarray]


def write_training_csv(ts: TrainingSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(ts.targets)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence"] + list(FEATURE_NAMES) + names)
        for i, sid in enumerate(ts.sequence_ids):
            w.writerow([sid] + [repr(float(v)) for v in ts.x[i]] + [repr(float(ts.targets[t][i])) for t in names])
    return path


def read_training_csv(path, targets: Sequence[str]) -> TrainingSet:
    """Feature columns F1-F17 plus the named target columns.

    Raises:
        ValidationError: missing columns or non-numeric cells.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = ["sequence"] + list(FEATURE_NAMES) + list(targets)
        missing = [c for c in need if c not in (reader.fieldnames or ())]
        if missing:
            raise ValidationError(f"{path}: missing columns {', '.join(missing)}")
        ids, rows, ys = [], [], []
        for line, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in FEATURE_NAMES])
                ys.append([float(row[t]) for t in targets])
            except ValueError as exc:
                raise ValidationError(f"{path}:{line}: {exc}") from exc
            ids.append(row["sequence"])
    if not ids:
        raise ValidationError(f"{path}: no rows")
    y = np.array(ys)
    return TrainingSet(ids, np.array(rows), {t: y[:, j] for j, t in enumerate(targets)})


# --------------------------------------------------------- synthetic corpus

# Which latent factor drives each synthetic feature column.
CORPUS_LATENT = (0, 0, 1, 0, 1, 2, 2, 2, 1, 2, 2, 2, 1, 1, 2, 0, 0)


def controlled_corpus(n: int = 200, seed: int = 0, noise_features: Sequence[int] = (),
                      feature_noise: float = 0.1, knee_noise: float = 0.2) -> TrainingSet:
    """Features and knee QPs tied together through three latent content factors.

    ``u`` (spatial detail), ``v`` (texture regularity) and ``w`` (motion)
    are independent standard normals.  Feature ``j`` is a monotone function
    of latent ``CORPUS_LATENT[j]`` plus Gaussian noise of relative size
    ``feature_noise``; columns in ``noise_features`` are replaced by pure
    noise.  Knees follow ``K_1080 = K_2160 - 5 + f(features)`` and so on
    down the chain, with means near 30, 25, 25 and 23, plus independent
    per-knee noise ``knee_noise``.
    """
    if n < 1:
        raise ValidationError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    lat = rng.standard_normal((3, n))
    u, v, w = lat
    shapes = (np.tanh, lambda t: t, np.exp, lambda t: t ** 3 / 3 + t)
    cols = []
    for j, k in enumerate(CORPUS_LATENT):
        z = lat[k] + feature_noise * rng.standard_normal(n)
        cols.append(shapes[j % 4](0.7 * z))
    x = np.column_stack(cols)
    for j in noise_features:
        x[:, j] = rng.standard_normal(n)
    eps = knee_noise * rng.standard_normal((4, n))
    k2160 = 30.0 + 1.0 * u + 0.6 * np.tanh(v) - 0.5 * w + 0.3 * u * w + eps[0]
    k1080 = k2160 - 5.0 + 0.5 * v + 0.3 * np.sin(w) + eps[1]
    k720 = k1080 + 0.4 * w - 0.2 * u + eps[2]
    k540 = k720 - 2.0 + 0.3 * np.cos(u) + eps[3]
    ids = [f"ctrl{i:03d}" for i in range(n)]
    return TrainingSet(ids, x, dict(zip(KNEE_TARGETS, (k2160, k1080, k720, k540))))
