"""Per-frame phase classification and constrained sequence decoding.

A frame is described by statistics of a three-frame window (previous,
current, next). A linear softmax turns the window features into phase
probabilities, and the label sequence is decoded by dynamic programming
restricted to the allowed phase transitions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .core import (
    N_PHASES,
    TRANSITIONS,
    AffineTransform2D,
    Frame,
    PhaseBoundaries,
    PhaseLabel,
    PhaseSequence,
)
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    EmptySequence,
    IndexOutOfRange,
    InvalidLabels,
    LabelLengthMismatch,
    NoValidPath,
    NotFitted,
    ParseError,
)
from .geometry import warp_array

FEATURE_SCHEMA = "window-stats-v1"
DARK_LEVEL = 0.5
# mean, std, p5, dark fraction, centroid row, centroid col, 4 quadrant dark fractions
N_FRAME_STATS = 10
# three window frames plus (mean, dark) differences for the two consecutive pairs
N_FEATURES = 3 * N_FRAME_STATS + 4
LOG_ZERO = -1e30


# --- features ---------------------------------------------------------------

def frame_statistics(pixels):
    """The ten per-frame statistics used in window features."""
    px = np.asarray(pixels, dtype=np.float64)
    h, w = px.shape
    dark = px < DARK_LEVEL
    n_dark = dark.sum()
    if n_dark:
        rows, cols = np.nonzero(dark)
        cy = rows.mean() / (h - 1)
        cx = cols.mean() / (w - 1)
    else:
        cy = cx = 0.5
    hh, hw = h // 2, w // 2
    quads = [dark[:hh, :hw], dark[:hh, hw:], dark[hh:, :hw], dark[hh:, hw:]]
    return np.array(
        [px.mean(), px.std(), np.percentile(px, 5), n_dark / dark.size, cy, cx]
        + [q.mean() for q in quads]
    )


def _window_features(stats, index):
    n = len(stats)
    prev_s = stats[max(index - 1, 0)]
    cur_s = stats[index]
    next_s = stats[min(index + 1, n - 1)]
    diffs = [
        cur_s[0] - prev_s[0], cur_s[3] - prev_s[3],
        next_s[0] - cur_s[0], next_s[3] - cur_s[3],
    ]
    return np.concatenate([prev_s, cur_s, next_s, diffs])


def extract_features(acq, index):
    n = len(acq.frames)
    if not 0 <= index < n:
        raise IndexOutOfRange(f"frame index {index} outside [0, {n})")
    window = [max(index - 1, 0), index, min(index + 1, n - 1)]
    stats = {i: frame_statistics(acq.frames[i].pixels) for i in set(window)}
    return _window_features([stats[i] for i in window], 1)


def extract_sequence_features(acq):
    """Window features for every frame, shape ``(n_frames, N_FEATURES)``."""
    stats = [frame_statistics(f.pixels) for f in acq.frames]
    return np.stack([_window_features(stats, i) for i in range(len(stats))])


# --- model ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PhaseModel:
    weights: np.ndarray  # (4, D)
    bias: np.ndarray  # (4,)
    feature_mean: np.ndarray
    feature_std: np.ndarray
    schema: str = FEATURE_SCHEMA

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        mean = np.asarray(self.feature_mean, dtype=np.float64)
        std = np.asarray(self.feature_std, dtype=np.float64)
        d = w.shape[1] if w.ndim == 2 else -1
        if w.shape != (N_PHASES, d) or b.shape != (N_PHASES,) or mean.shape != (d,) or std.shape != (d,):
            raise DimensionMismatch("inconsistent phase model shapes")
        if np.any(std <= 0):
            raise ValueError("feature standard deviations must be positive")
        for name, arr in (("weights", w), ("bias", b), ("feature_mean", mean), ("feature_std", std)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_features(self):
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, n_features=N_FEATURES):
        return cls(np.zeros((N_PHASES, n_features)), np.zeros(N_PHASES),
                   np.zeros(n_features), np.ones(n_features))

    def to_dict(self):
        return {
            "schema": self.schema,
            "n_features": int(self.n_features),
            "weights": [float(v) for v in self.weights.ravel()],
            "bias": [float(v) for v in self.bias],
            "feature_mean": [float(v) for v in self.feature_mean],
            "feature_std": [float(v) for v in self.feature_std],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            d = int(data["n_features"])
            return cls(
                np.asarray(data["weights"], dtype=np.float64).reshape(N_PHASES, d),
                data["bias"], data["feature_mean"], data["feature_std"],
                str(data.get("schema", FEATURE_SCHEMA)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"invalid model document: {exc}") from exc


def save_model(model, path):
    from .io import write_json

    write_json(path, model.to_dict())


def load_model(path):
    from .io import read_json

    model = PhaseModel.from_dict(read_json(path))
    if model.schema != FEATURE_SCHEMA:
        raise ParseError(f"model feature schema {model.schema!r} != {FEATURE_SCHEMA!r}")
    return model


def _softmax(scores):
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _probabilities_from_features(model, features):
    x = (features - model.feature_mean) / model.feature_std
    return _softmax(x @ model.weights.T + model.bias)


def predict_probabilities(model, acq):
    features = extract_sequence_features(acq)
    if features.shape[1] != model.n_features:
        raise DimensionMismatch(
            f"model expects {model.n_features} features, extractor gives {features.shape[1]}")
    return _probabilities_from_features(model, features)


# --- decoding ---------------------------------------------------------------

def _log(probs):
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return np.where(probs > 0, logp, LOG_ZERO)


def decode_constrained(probabilities, transitions=TRANSITIONS):
    """Most likely label sequence that only uses allowed transitions.

    Maximizes the summed log-probability of the chosen labels with a uniform
    prior over the first label. Ties go to the smaller phase index, both at
    the last frame and in every backtracking step.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise EmptySequence("no frames to decode")
    T = np.asarray(transitions) != 0
    n, k = probs.shape
    if T.shape != (k, k):
        raise DimensionMismatch(f"transition matrix must be {k}x{k}")
    logp = _log(probs)

    score = logp[0].copy()
    reachable = np.ones(k, dtype=bool)
    back = np.zeros((n, k), dtype=np.int64)
    for t in range(1, n):
        new_score = np.empty(k)
        new_reach = np.zeros(k, dtype=bool)
        for j in range(k):
            best_i, best = -1, -math.inf
            for i in range(k):
                if T[i, j] and reachable[i] and score[i] > best:
                    best_i, best = i, score[i]
            if best_i < 0:
                new_score[j] = -math.inf
                continue
            back[t, j] = best_i
            new_score[j] = best + logp[t, j]
            new_reach[j] = True
        score, reachable = new_score, new_reach
    if not reachable.any():
        raise NoValidPath("no label sequence satisfies the transition matrix")

    labels = np.empty(n, dtype=np.int64)
    labels[-1] = int(np.argmax(np.where(reachable, score, -math.inf)))
    for t in range(n - 1, 0, -1):
        labels[t - 1] = back[t, labels[t]]
    return labels


def sequence_log_score(probabilities, labels):
    """Summed log-probability of ``labels``, accumulated left to right."""
    logp = _log(np.asarray(probabilities, dtype=np.float64))
    total = 0.0
    for t, lab in enumerate(labels):
        total = total + logp[t, lab]
    return total


def phase_boundaries(labels):
    labels = np.asarray(labels, dtype=np.int64)

    def first(code):
        idx = np.flatnonzero(labels == code)
        return int(idx[0]) if idx.size else None

    def last(code):
        idx = np.flatnonzero(labels == code)
        return int(idx[-1]) if idx.size else None

    return PhaseBoundaries(
        first_arterial=first(PhaseLabel.ARTERIAL),
        last_arterial=last(PhaseLabel.ARTERIAL),
        last_parenchymal=last(PhaseLabel.PARENCHYMAL),
    )


def classify(model, acq):
    probs = predict_probabilities(model, acq)
    return PhaseSequence(probs, decode_constrained(probs))


# --- augmentation -----------------------------------------------------------

def draw_augmentation(rng, shape):
    """Draw one set of augmentation parameters.

    All random numbers are drawn every time so the stream position does not
    depend on which augmentations fire.
    """
    h, w = shape
    do_flip = rng.random() < 0.5
    do_rot = rng.random() < 0.5
    angle = rng.uniform(-10.0, 10.0)
    do_aff = rng.random() < 0.5
    tx = rng.uniform(-0.1 * w, 0.1 * w)
    ty = rng.uniform(-0.1 * h, 0.1 * h)
    scale = rng.uniform(0.8, 1.2)
    return {
        "flip": bool(do_flip),
        "angle": float(angle) if do_rot else 0.0,
        "translation": (float(tx), float(ty)) if do_aff else (0.0, 0.0),
        "scale": float(scale) if do_aff else 1.0,
        "geometric": bool(do_rot or do_aff),
    }


def apply_augmentation(pixels, params):
    px = np.asarray(pixels, dtype=np.float64)
    if params["flip"]:
        px = px[:, ::-1]
    if params["geometric"]:
        h, w = px.shape
        content = AffineTransform2D.similarity(
            params["angle"], params["scale"], params["translation"], ((w - 1) / 2.0, (h - 1) / 2.0))
        px = np.clip(warp_array(px, content.inverse()), 0.0, 1.0)
    return np.ascontiguousarray(px)


def augment(frame, rng):
    """Random flip / rotation / affine jitter, each with probability 0.5."""
    params = draw_augmentation(rng, frame.shape)
    return Frame(apply_augmentation(frame.pixels, params), frame.time_s)


def augment_acquisition(acq, rng):
    """Apply one augmentation draw to every frame of an acquisition."""
    params = draw_augmentation(rng, acq.shape)
    return acq.replace_frames([Frame(apply_augmentation(f.pixels, params), f.time_s) for f in acq.frames])


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    steps_per_epoch: int = 50
    learning_rate: float = 1e-3
    halve_every: int = 10
    n_augment: int = 1
    init_scale: float = 0.01


def _cross_entropy(W, b, X, Y):
    scores = X @ W.T + b
    z = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_norm
    loss = -np.mean(np.sum(Y * logp, axis=1))
    p = np.exp(logp)
    g = (p - Y) / X.shape[0]
    return loss, g.T @ X, g.sum(axis=0)


def _check_dataset(dataset):
    if not dataset:
        raise EmptyDataset("training needs at least one labelled acquisition")
    out = []
    for acq, labels in dataset:
        if labels is None:
            raise LabelLengthMismatch("every training acquisition needs reference labels")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (len(acq.frames),):
            raise LabelLengthMismatch(
                f"{len(labels)} labels for {len(acq.frames)} frames")
        if labels.min() < 0 or labels.max() >= N_PHASES:
            raise InvalidLabels("phase codes must be 0..3")
        out.append((acq, labels))
    return out


def train_on_features(X, y, config=TrainConfig(), rng_seed=0):
    """Fit the linear softmax on a feature matrix.

    Full-batch Adam on the mean cross-entropy. The learning rate starts at
    ``config.learning_rate`` and is halved every ``halve_every`` epochs; a
    step that would raise the loss is retried at half the rate (up to 30
    times) and otherwise skipped, so the loss never increases.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise EmptyDataset("no training frames")
    rng = np.random.default_rng(rng_seed)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Xs = (X - mean) / std
    Y = np.eye(N_PHASES)[y]

    W = rng.normal(0.0, config.init_scale, size=(N_PHASES, X.shape[1]))
    b = np.zeros(N_PHASES)
    mW, vW = np.zeros_like(W), np.zeros_like(W)
    mb, vb = np.zeros_like(b), np.zeros_like(b)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    loss, gW, gb = _cross_entropy(W, b, Xs, Y)
    step = 0
    for epoch in range(config.epochs):
        lr_epoch = config.learning_rate * 0.5 ** (epoch // config.halve_every)
        for _ in range(config.steps_per_epoch):
            step += 1
            mW = beta1 * mW + (1 - beta1) * gW
            vW = beta2 * vW + (1 - beta2) * gW ** 2
            mb = beta1 * mb + (1 - beta1) * gb
            vb = beta2 * vb + (1 - beta2) * gb ** 2
            dW = (mW / (1 - beta1 ** step)) / (np.sqrt(vW / (1 - beta2 ** step)) + eps)
            db = (mb / (1 - beta1 ** step)) / (np.sqrt(vb / (1 - beta2 ** step)) + eps)
            lr = lr_epoch
            for _try in range(30):
                W_new, b_new = W - lr * dW, b - lr * db
                new_loss, new_gW, new_gb = _cross_entropy(W_new, b_new, Xs, Y)
                if new_loss <= loss:
                    W, b, loss, gW, gb = W_new, b_new, new_loss, new_gW, new_gb
                    break
                lr *= 0.5
    return PhaseModel(W, b, mean, std)


def train(dataset, rng_seed=0, config=TrainConfig()):
    """Train a phase model on ``[(acquisition, labels), ...]``.

    Each acquisition contributes its original frames plus ``n_augment``
    augmented copies (one augmentation draw per copy, shared by all frames of
    the copy so that the temporal windows stay consistent).
    """
    dataset = _check_dataset(dataset)
    rng = np.random.default_rng(rng_seed)
    feats, labels = [], []
    for acq, lab in dataset:
        feats.append(extract_sequence_features(acq))
        labels.append(lab)
        for _ in range(config.n_augment):
            feats.append(extract_sequence_features(augment_acquisition(acq, rng)))
            labels.append(lab)
    seed = int(rng.integers(2**31))
    return train_on_features(np.concatenate(feats), np.concatenate(labels), config, seed)


def training_loss(model, dataset):
    feats = np.concatenate([extract_sequence_features(a) for a, _ in dataset])
    y = np.concatenate([np.asarray(l) for _, l in dataset])
    Xs = (feats - model.feature_mean) / model.feature_std
    loss, _, _ = _cross_entropy(model.weights, model.bias, Xs, np.eye(N_PHASES)[y])
    return loss


class PhaseClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on acquisitions, ``predict`` decoded labels.

    ``X`` is a list of acquisitions and ``y`` a list of per-frame label
    arrays. ``predict`` and ``predict_proba`` accept a single acquisition.
    """

    def __init__(self, epochs=100, steps_per_epoch=50, learning_rate=1e-3, halve_every=10,
                 n_augment=1, random_state=0):
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.learning_rate = learning_rate
        self.halve_every = halve_every
        self.n_augment = n_augment
        self.random_state = random_state

    def _config(self):
        return TrainConfig(self.epochs, self.steps_per_epoch, self.learning_rate,
                           self.halve_every, self.n_augment)

    def fit(self, X, y):
        self.model_ = train(list(zip(X, y)), self.random_state, self._config())
        self.classes_ = np.arange(N_PHASES)
        return self

    @classmethod
    def from_model(cls, model):
        clf = cls()
        clf.model_ = model
        clf.classes_ = np.arange(N_PHASES)
        return clf

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFitted("PhaseClassifier is not fitted")

    def predict_proba(self, acq):
        self._check_fitted()
        return predict_probabilities(self.model_, acq)

    def predict(self, acq):
        return decode_constrained(self.predict_proba(acq))

    def score(self, X, y, sample_weight=None):
        """Frame accuracy of decoded labels pooled over all sequences."""
        correct = total = 0
        for acq, lab in zip(X, y):
            pred = self.predict(acq)
            correct += int(np.sum(pred == np.asarray(lab)))
            total += len(lab)
        return correct / total
