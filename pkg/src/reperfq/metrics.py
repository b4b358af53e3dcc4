"""Evaluation quantities: frame accuracy, support-weighted F1, phase-boundary
offsets, Spearman correlation with a permutation p-value, rank AUC, logistic
regression with leave-one-out validation, and the NIHSS shift.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .core import PhaseBoundaries
from .errors import (
    DegenerateInput,
    EmptyInput,
    LengthMismatch,
    NonConvergence,
    OutOfRange,
    ParseError,
    SingleClass,
)

BOUNDARY_NAMES = ("first_arterial", "last_arterial", "last_parenchymal")


def _paired(pred, ref):
    pred = np.asarray(pred).ravel()
    ref = np.asarray(ref).ravel()
    if pred.size != ref.size:
        raise LengthMismatch(f"{pred.size} predictions for {ref.size} references")
    if ref.size == 0:
        raise EmptyInput("no labels to compare")
    return pred, ref


def average_accuracy(pred, ref):
    pred, ref = _paired(pred, ref)
    return float(np.mean(pred == ref))


def weighted_f1(pred, ref):
    """Per-class F1 averaged with reference-support weights.

    Classes absent from the reference carry zero weight; a class whose
    precision and recall are both zero has F1 0.
    """
    pred, ref = _paired(pred, ref)
    total = 0.0
    for cls in np.unique(ref):
        tp = np.sum((pred == cls) & (ref == cls))
        n_pred = np.sum(pred == cls)
        support = np.sum(ref == cls)
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        total += support * f1
    return float(total / ref.size)


# --- phase boundary offsets -------------------------------------------------

@dataclass(frozen=True)
class BoundaryOffset:
    accuracy: float
    mean_frames: Optional[float]
    std_frames: Optional[float]
    mean_seconds: Optional[float]
    fraction_over_one: Optional[float]
    absence_mismatches: int
    n_compared: int

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class OffsetStats:
    first_arterial: BoundaryOffset
    last_arterial: BoundaryOffset
    last_parenchymal: BoundaryOffset

    def to_dict(self):
        return {name: getattr(self, name).to_dict() for name in BOUNDARY_NAMES}


def _as_boundaries(b):
    if isinstance(b, PhaseBoundaries):
        return b.to_dict()
    return dict(b)


def boundary_offsets(pred, ref, times=None):
    """Offsets between predicted and reference phase boundaries.

    Parameters
    ----------
    pred, ref : PhaseBoundaries or mapping, or sequences of them
        One pair per acquisition.
    times : sequence of (sequence of float or None), optional
        Frame times per acquisition; seconds are averaged over acquisitions
        that have them.

    Notes
    -----
    A pair where exactly one side lacks the phase is an absence mismatch: it
    counts against accuracy but is left out of the offset means. When both
    sides lack it the pair is an exact match.
    """
    if isinstance(pred, (PhaseBoundaries, dict)):
        pred, ref = [pred], [ref]
        times = None if times is None else [times]
    pred = [_as_boundaries(b) for b in pred]
    ref = [_as_boundaries(b) for b in ref]
    if len(pred) != len(ref):
        raise LengthMismatch("prediction and reference lists differ in length")
    if times is None:
        times = [None] * len(pred)
    out = {}
    for name in BOUNDARY_NAMES:
        exact, mismatches, frames, seconds = 0, 0, [], []
        for p, r, t in zip(pred, ref, times):
            pv, rv = p.get(name), r.get(name)
            if pv is None or rv is None:
                if pv is None and rv is None:
                    exact += 1
                else:
                    mismatches += 1
                continue
            d = abs(int(pv) - int(rv))
            exact += d == 0
            frames.append(d)
            if t is not None and t[pv] is not None and t[rv] is not None:
                seconds.append(abs(float(t[pv]) - float(t[rv])))
        n = len(pred)
        frames = np.asarray(frames, dtype=np.float64)
        out[name] = BoundaryOffset(
            accuracy=exact / n if n else 1.0,
            mean_frames=float(frames.mean()) if frames.size else None,
            std_frames=float(frames.std()) if frames.size else None,
            mean_seconds=float(np.mean(seconds)) if seconds else None,
            fraction_over_one=float(np.mean(frames > 1)) if frames.size else None,
            absence_mismatches=mismatches,
            n_compared=int(frames.size),
        )
    return OffsetStats(**out)


# --- ranks, correlation, AUC ------------------------------------------------

def midranks(x):
    return stats.rankdata(np.asarray(x, dtype=np.float64), method="average")


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p_value: float


def spearman(x, y, n_permutations=10000, seed=0):
    """Rank correlation with a two-sided permutation p-value.

    ``p = (1 + #{|rho_perm| >= |rho|}) / (n_permutations + 1)``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise LengthMismatch(f"x has {x.size} values, y has {y.size}")
    if x.size < 3:
        raise DegenerateInput("spearman needs at least 3 pairs")
    rx, ry = midranks(x), midranks(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise DegenerateInput("zero rank variance")
    rho = _pearson(rx, ry)
    rng = np.random.default_rng(seed)
    cx = rx - rx.mean()
    cy = ry - ry.mean()
    norm = np.sqrt((cx @ cx) * (cy @ cy))
    hits = 0
    for start in range(0, n_permutations, 1000):
        m = min(1000, n_permutations - start)
        perms = rng.permuted(np.tile(cy, (m, 1)), axis=1)
        hits += int(np.sum(np.abs(perms @ cx / norm) >= abs(rho) - 1e-12))
    return SpearmanResult(rho, (1 + hits) / (n_permutations + 1))


def _binary_labels(labels):
    labels = np.asarray(labels).ravel()
    values = np.unique(labels)
    if not set(values.tolist()) <= {0, 1, False, True}:
        raise DegenerateInput("labels must be binary 0/1")
    if values.size < 2:
        raise SingleClass("both classes must be present")
    return labels.astype(bool)


def roc_auc(scores, labels):
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = _binary_labels(labels)
    if scores.size != pos.size:
        raise LengthMismatch("scores and labels differ in length")
    ranks = midranks(scores)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# --- logistic regression ----------------------------------------------------

L2_WEIGHT = 1e-4
GRAD_TOL = 1e-4


def _standardize(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    ok = std > 0
    Z = np.where(ok, (X - mean) / np.where(ok, std, 1.0), 0.0)
    return Z, mean, std, ok


def fit_logistic(X, y, l2=L2_WEIGHT, max_iter=100):
    """Maximize the L2-penalized mean log-likelihood by Newton steps.

    Returns ``(coef, intercept)``. The intercept is not penalized.

    Raises
    ------
    NonConvergence
        If the gradient norm is still above ``1e-4`` after ``max_iter`` steps.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    A = np.hstack([np.ones((n, 1)), X])
    penalty = np.full(d + 1, l2)
    penalty[0] = 0.0
    w = np.zeros(d + 1)

    def objective(w):
        z = A @ w
        return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(penalty * w * w))

    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(A @ w)))
        grad = A.T @ (p - y) / n + penalty * w
        if np.linalg.norm(grad) <= GRAD_TOL:
            return w[1:], w[0]
        hess = (A * (p * (1 - p))[:, None]).T @ A / n + np.diag(penalty)
        hess[0, 0] += 1e-12
        step = np.linalg.solve(hess, grad)
        f0, lam = objective(w), 1.0
        while lam > 1e-10 and objective(w - lam * step) > f0:
            lam *= 0.5
        w = w - lam * step
    p = 1.0 / (1.0 + np.exp(-(A @ w)))
    if np.linalg.norm(A.T @ (p - y) / n + penalty * w) > GRAD_TOL:
        raise NonConvergence("logistic regression did not converge")
    return w[1:], w[0]


@dataclass(frozen=True)
class LogisticResult:
    auc: float
    accuracy: float
    odds_ratios: tuple
    probabilities: tuple


def logistic_loocv(features, labels):
    """Leave-one-out logistic regression on standardized features.

    Odds ratios are per standard deviation, from the full-data fit; a feature
    with zero variance gets coefficient 0 and odds ratio 1.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = _binary_labels(labels)
    n = X.shape[0]
    if y.size != n:
        raise LengthMismatch("features and labels differ in length")
    if n < 10:
        raise DegenerateInput("logistic_loocv needs at least 10 samples")
    probs = np.empty(n)
    for i in range(n):
        train = np.arange(n) != i
        if y[train].all() or not y[train].any():
            raise SingleClass("a training fold lacks one class")
        Z, mean, std, ok = _standardize(X[train])
        coef, b = fit_logistic(Z, y[train])
        zi = np.where(ok, (X[i] - mean) / np.where(ok, std, 1.0), 0.0)
        probs[i] = 1.0 / (1.0 + np.exp(-(zi @ coef + b)))
    Z, _, _, ok = _standardize(X)
    coef, _ = fit_logistic(Z, y)
    coef = np.where(ok, coef, 0.0)
    return LogisticResult(
        auc=roc_auc(probs, y),
        accuracy=float(np.mean((probs >= 0.5) == y)),
        odds_ratios=tuple(float(v) for v in np.exp(coef)),
        probabilities=tuple(float(v) for v in probs),
    )


# --- clinical scales --------------------------------------------------------

NIHSS_MAX = 42
ETICI_GRADES = ("0", "1", "2A", "2B", "2C", "3")


def nihss_shift(baseline, followup):
    """Baseline minus follow-up NIHSS; positive means improvement."""
    for v in (baseline, followup):
        if int(v) != v or not 0 <= v <= NIHSS_MAX:
            raise OutOfRange(f"NIHSS {v} outside 0..{NIHSS_MAX}")
    return int(baseline) - int(followup)


def etici_success(grade):
    """True for eTICI 2B or better."""
    grade = str(grade).upper()
    if grade not in ETICI_GRADES:
        raise OutOfRange(f"unknown eTICI grade {grade!r}")
    return ETICI_GRADES.index(grade) >= ETICI_GRADES.index("2B")


def mrs_good(mrs):
    """Functional independence: mRS 0-2."""
    if int(mrs) != mrs or not 0 <= mrs <= 6:
        raise OutOfRange(f"mRS {mrs} outside 0..6")
    return mrs <= 2


OUTCOME_COLUMNS = ("auto_tici_ap", "auto_tici_lat", "etici", "mrs", "nihss_bl", "nihss_fu")


@dataclass(frozen=True)
class OutcomeRecord:
    auto_tici_ap: Optional[float]
    auto_tici_lat: Optional[float]
    etici: str
    mrs: int
    nihss_bl: int
    nihss_fu: int

    def __post_init__(self):
        etici_success(self.etici)
        mrs_good(self.mrs)
        nihss_shift(self.nihss_bl, self.nihss_fu)

    @property
    def auto_tici(self):
        vals = [v for v in (self.auto_tici_ap, self.auto_tici_lat) if v is not None]
        return float(np.mean(vals)) if vals else None


def _opt_float(s):
    s = s.strip()
    return None if s == "" else float(s)


def read_outcomes(path):
    """Parse an outcomes CSV whose header lists exactly OUTCOME_COLUMNS."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != set(OUTCOME_COLUMNS):
            raise ParseError(f"{path}: header must be {','.join(OUTCOME_COLUMNS)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(OutcomeRecord(
                    _opt_float(row["auto_tici_ap"]), _opt_float(row["auto_tici_lat"]),
                    row["etici"].strip().upper(), int(row["mrs"]),
                    int(row["nihss_bl"]), int(row["nihss_fu"])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not records:
        raise EmptyInput(f"{path}: no outcome rows")
    return records


def outcome_metrics(records, n_permutations=10000, seed=0):
    """Dichotomized AUCs, correlations and logistic models for a cohort."""
    recs = [r for r in records if r.auto_tici is not None]
    if not recs:
        raise EmptyInput("no records with an autoTICI score")
    score = np.array([r.auto_tici for r in recs])
    success = np.array([etici_success(r.etici) for r in recs])
    good = np.array([mrs_good(r.mrs) for r in recs])
    shift = np.array([nihss_shift(r.nihss_bl, r.nihss_fu) for r in recs])
    grade = np.array([ETICI_GRADES.index(r.etici) for r in recs])
    out = {"n": len(recs)}

    def guarded(name, fn):
        try:
            out[name] = fn()
        except (SingleClass, DegenerateInput, NonConvergence) as exc:
            out[name] = {"error": exc.code}

    guarded("auc_etici_success", lambda: roc_auc(score, success))
    guarded("spearman_etici", lambda: spearman(score, grade, n_permutations, seed).__dict__)
    guarded("spearman_nihss_shift", lambda: spearman(score, shift, n_permutations, seed).__dict__)
    guarded("spearman_mrs", lambda: spearman(score, [r.mrs for r in recs], n_permutations, seed).__dict__)

    def loocv(feats, labels):
        res = logistic_loocv(feats, labels)
        return {"auc": res.auc, "accuracy": res.accuracy, "odds_ratios": list(res.odds_ratios)}

    guarded("logistic_mrs_autotici", lambda: loocv(score, good))
    guarded("logistic_mrs_etici", lambda: loocv(grade, good))
    return out
