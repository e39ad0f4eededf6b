"""Quality predictors: five-bin linear classifiers and ridge regression.

All models standardize the four features internally and embed the scaler.
Training is deterministic: weights start at zero, logistic regression runs
full-batch gradient descent with Armijo backtracking, the linear SVM runs
full-batch subgradient descent on a fixed step schedule, and ridge uses the
closed form. Two runs on the same data and config produce bitwise-identical
model files.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLabelsError, ModelFormatError, VersionMismatchError
from .features import FEATURE_VERSION, FeatureVector

FORMAT_VERSION = 1

BIN_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
_INNER_EDGES = np.array(BIN_EDGES[1:-1])
BIN_MIDPOINTS = (0.1, 0.3, 0.5, 0.7, 0.9)
N_BINS = 5
FAILED_THRESHOLD = 0.6
FAILED_MAX_BIN = 2  # bins {0,1,2} cover Dice < 0.6


def bin_of(dice: float) -> int:
    """Quality bin for a Dice value in [0,1]; values on an edge go to the upper bin."""
    if not (0.0 <= dice <= 1.0):
        raise ValueError(f"dice must be in [0,1], got {dice}")
    return int(np.searchsorted(_INNER_EDGES, dice, side="right"))


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray
    flags: np.ndarray  # True where the feature had zero variance (std stored as 1)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


def fit_scaler(X: np.ndarray) -> Scaler:
    """Per-feature mean and population std; zero-variance features get std 1 and a flag."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a nonempty 2D feature matrix")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    flags = std == 0.0
    std = np.where(flags, 1.0, std)
    return Scaler(mean=mean, std=std, flags=flags)


def balanced_class_weights(bins: np.ndarray, n_classes: int = N_BINS) -> np.ndarray:
    """w_c = n / (k_present * n_c); absent classes get weight 0."""
    bins = np.asarray(bins, dtype=np.intp)
    counts = np.bincount(bins, minlength=n_classes)
    present = counts > 0
    k = int(present.sum())
    if k < 2:
        raise DegenerateLabelsError(f"need at least 2 distinct classes, got {k}")
    weights = np.zeros(n_classes, dtype=np.float64)
    weights[present] = len(bins) / (k * counts[present])
    return weights


@dataclass(frozen=True)
class TrainConfig:
    l2_strength: float = 1.0
    max_iters: int = 500
    tol: float = 1e-6
    seed: int = 0
    class_weighting: str = "balanced"  # "balanced" or "uniform"


@dataclass(frozen=True)
class TrainedModel:
    kind: str  # "logistic", "linear_svm", "ridge"
    scaler: Scaler
    coefficients: np.ndarray  # (5, d) for classifiers, (1, d) for ridge
    intercepts: np.ndarray  # (5,) or (1,)
    class_weights: np.ndarray | None  # weight per bin; 0 marks absent classes. None for ridge.
    bin_edges: tuple = BIN_EDGES
    format_version: int = FORMAT_VERSION
    feature_version: str = FEATURE_VERSION

    @property
    def n_features(self) -> int:
        return self.coefficients.shape[1]


@dataclass(frozen=True)
class QualityPrediction:
    case_id: str
    predicted_bin: int
    predicted_dice: float
    failed: bool


def _check_features(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2D")
    if not np.isfinite(X).all():
        raise ValueError("features contain non-finite values")
    return X


def _sample_weights(bins: np.ndarray, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    if config.class_weighting == "balanced":
        class_w = balanced_class_weights(bins)
    elif config.class_weighting == "uniform":
        counts = np.bincount(np.asarray(bins, dtype=np.intp), minlength=N_BINS)
        if (counts > 0).sum() < 2:
            raise DegenerateLabelsError("need at least 2 distinct classes")
        class_w = (counts > 0).astype(np.float64)
    else:
        raise ValueError(f"unknown class_weighting {config.class_weighting!r}")
    return class_w, class_w[bins]


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def logistic_objective(
    W: np.ndarray, b: np.ndarray, Xs: np.ndarray, Y: np.ndarray, w: np.ndarray, l2: float
) -> float:
    """Sample-weighted mean multinomial cross-entropy plus (l2/2)*||W||^2.

    Mean (not sum) over samples, so duplicating the data leaves the optimum
    unchanged. Intercepts are not penalized.
    """
    Z = Xs @ W.T + b
    Z = Z - Z.max(axis=1, keepdims=True)
    log_p = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    ce = -(Y * log_p).sum(axis=1)
    return float((w * ce).mean() + 0.5 * l2 * (W**2).sum())


def logistic_gradient(
    W: np.ndarray, b: np.ndarray, Xs: np.ndarray, Y: np.ndarray, w: np.ndarray, l2: float
) -> tuple[np.ndarray, np.ndarray]:
    n = Xs.shape[0]
    P = _softmax(Xs @ W.T + b)
    R = (P - Y) * w[:, None] / n
    return R.T @ Xs + l2 * W, R.sum(axis=0)


def train_logistic(X, bins, config: TrainConfig = TrainConfig()) -> TrainedModel:
    """Class-weighted multinomial logistic regression by full-batch gradient
    descent with backtracking line search. Converged when the gradient
    max-norm drops below config.tol."""
    X = _check_features(X)
    bins = np.asarray(bins, dtype=np.intp)
    class_w, w = _sample_weights(bins, config)
    present = np.nonzero(class_w > 0)[0]
    scaler = fit_scaler(X)
    Xs = scaler.transform(X)

    k = present.size
    col = np.searchsorted(present, bins)
    Y = np.zeros((len(bins), k))
    Y[np.arange(len(bins)), col] = 1.0

    W = np.zeros((k, X.shape[1]))
    b = np.zeros(k)
    l2 = config.l2_strength
    for _ in range(config.max_iters):
        gW, gb = logistic_gradient(W, b, Xs, Y, w, l2)
        gnorm = max(np.abs(gW).max(), np.abs(gb).max())
        if gnorm < config.tol:
            break
        loss = logistic_objective(W, b, Xs, Y, w, l2)
        gsq = (gW**2).sum() + (gb**2).sum()
        step = 1.0
        while step > 1e-12:
            W_new = W - step * gW
            b_new = b - step * gb
            if logistic_objective(W_new, b_new, Xs, Y, w, l2) <= loss - 1e-4 * step * gsq:
                break
            step *= 0.5
        W, b = W - step * gW, b - step * gb

    coef = np.zeros((N_BINS, X.shape[1]))
    intercepts = np.zeros(N_BINS)
    coef[present] = W
    intercepts[present] = b
    return TrainedModel(
        kind="logistic", scaler=scaler, coefficients=coef, intercepts=intercepts, class_weights=class_w
    )


def svm_objective(beta: np.ndarray, b: float, Xs: np.ndarray, s: np.ndarray, w: np.ndarray, l2: float) -> float:
    """Sample-weighted mean hinge loss plus (l2/2)*||beta||^2 for one one-vs-rest class."""
    margins = s * (Xs @ beta + b)
    return float((w * np.maximum(0.0, 1.0 - margins)).mean() + 0.5 * l2 * (beta**2).sum())


def train_linear_svm(X, bins, config: TrainConfig = TrainConfig()) -> TrainedModel:
    """One-vs-rest class-weighted linear SVM by deterministic subgradient
    descent with step schedule 1/sqrt(t+1), keeping the best iterate."""
    X = _check_features(X)
    bins = np.asarray(bins, dtype=np.intp)
    class_w, w = _sample_weights(bins, config)
    present = np.nonzero(class_w > 0)[0]
    scaler = fit_scaler(X)
    Xs = scaler.transform(X)
    n = Xs.shape[0]
    l2 = config.l2_strength

    coef = np.zeros((N_BINS, X.shape[1]))
    intercepts = np.zeros(N_BINS)
    for c in present:
        s = np.where(bins == c, 1.0, -1.0)
        beta = np.zeros(X.shape[1])
        b = 0.0
        best = (svm_objective(beta, b, Xs, s, w, l2), beta.copy(), b)
        for t in range(config.max_iters):
            margins = s * (Xs @ beta + b)
            active = margins < 1.0
            g_beta = -(w[active] * s[active]) @ Xs[active] / n + l2 * beta
            g_b = -(w[active] * s[active]).sum() / n
            step = 1.0 / np.sqrt(t + 1.0)
            beta = beta - step * g_beta
            b = b - step * g_b
            obj = svm_objective(beta, b, Xs, s, w, l2)
            if obj < best[0]:
                best = (obj, beta.copy(), b)
        coef[c] = best[1]
        intercepts[c] = best[2]
    return TrainedModel(
        kind="linear_svm", scaler=scaler, coefficients=coef, intercepts=intercepts, class_weights=class_w
    )


def train_ridge(X, dice, l2_strength: float = 1.0) -> TrainedModel:
    """Closed-form ridge on standardized features: w = (X'X + l2*I)^-1 X'y,
    intercept unpenalized (equals mean(y) since columns are centered)."""
    X = _check_features(X)
    y = np.asarray(dice, dtype=np.float64)
    if not np.isfinite(y).all():
        raise ValueError("targets contain non-finite values")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError("targets must align with the feature rows")
    scaler = fit_scaler(X)
    Xs = scaler.transform(X)
    d = X.shape[1]
    A = Xs.T @ Xs + l2_strength * np.eye(d)
    wvec = np.linalg.solve(A, Xs.T @ (y - y.mean()))
    return TrainedModel(
        kind="ridge",
        scaler=scaler,
        coefficients=wvec.reshape(1, d),
        intercepts=np.array([y.mean()]),
        class_weights=None,
    )


def decision_scores(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    """Raw per-class scores (classifiers) or the single regression output (ridge)."""
    xs = model.scaler.transform(np.asarray(x, dtype=np.float64))
    return model.coefficients @ xs + model.intercepts


def predict(model: TrainedModel, f: FeatureVector, case_id: str = "") -> QualityPrediction:
    if model.feature_version != FEATURE_VERSION:
        raise VersionMismatchError(
            f"model feature_version {model.feature_version!r} != extractor {FEATURE_VERSION!r}"
        )
    x = f.as_array()
    if x.shape[0] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got {x.shape[0]}")
    if not np.isfinite(x).all():
        raise ValueError("features contain non-finite values")
    scores = decision_scores(model, x)

    if model.kind == "ridge":
        d = float(np.clip(scores[0], 0.0, 1.0))
        return QualityPrediction(case_id=case_id, predicted_bin=bin_of(d), predicted_dice=d, failed=d < FAILED_THRESHOLD)

    # Absent classes are never predicted; np.argmax takes the first maximum,
    # which breaks ties toward the lower (more conservative) bin.
    masked = np.where(model.class_weights > 0, scores, -np.inf)
    b = int(np.argmax(masked))
    return QualityPrediction(
        case_id=case_id, predicted_bin=b, predicted_dice=BIN_MIDPOINTS[b], failed=b <= FAILED_MAX_BIN
    )


def predict_batch(model: TrainedModel, feats: list[FeatureVector], ids: list[str] | None = None) -> list[QualityPrediction]:
    ids = ids if ids is not None else [""] * len(feats)
    return [predict(model, f, case_id=i) for f, i in zip(feats, ids)]


def _to_doc(model: TrainedModel) -> dict:
    return {
        "format_version": model.format_version,
        "kind": model.kind,
        "feature_version": model.feature_version,
        "scaler": {
            "mean": model.scaler.mean.tolist(),
            "std": model.scaler.std.tolist(),
            "flags": model.scaler.flags.astype(bool).tolist(),
        },
        "coefficients": model.coefficients.tolist(),
        "intercepts": model.intercepts.tolist(),
        "bin_edges": list(model.bin_edges),
        "class_weights": None if model.class_weights is None else model.class_weights.tolist(),
    }


def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def save_model(model: TrainedModel) -> bytes:
    doc = _to_doc(model)
    doc["crc32"] = zlib.crc32(_canonical(doc))
    return json.dumps(doc, sort_keys=True, indent=1).encode()


def load_model(raw: bytes) -> TrainedModel:
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ModelFormatError("missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise ModelFormatError(f"unknown format_version {doc['format_version']}")
    crc = doc.pop("crc32", None)
    if crc != zlib.crc32(_canonical(doc)):
        raise ModelFormatError("checksum mismatch")
    scaler = Scaler(
        mean=np.array(doc["scaler"]["mean"], dtype=np.float64),
        std=np.array(doc["scaler"]["std"], dtype=np.float64),
        flags=np.array(doc["scaler"]["flags"], dtype=bool),
    )
    cw = doc["class_weights"]
    return TrainedModel(
        kind=doc["kind"],
        scaler=scaler,
        coefficients=np.array(doc["coefficients"], dtype=np.float64),
        intercepts=np.array(doc["intercepts"], dtype=np.float64),
        class_weights=None if cw is None else np.array(cw, dtype=np.float64),
        bin_edges=tuple(doc["bin_edges"]),
        format_version=doc["format_version"],
        feature_version=doc["feature_version"],
    )


def save_model_file(model: TrainedModel, path) -> None:
    with open(path, "wb") as f:
        f.write(save_model(model))


def load_model_file(path) -> TrainedModel:
    with open(path, "rb") as f:
        return load_model(f.read())
