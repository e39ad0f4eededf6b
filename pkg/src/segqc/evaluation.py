"""Evaluation protocol: Dice, failed-mask sensitivity, per-bin specificity,
MAE, bootstrap confidence analysis, and leave-one-feature-out ablation."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SegQCError
from .features import FEATURE_NAMES, FeatureVector
from .models import (
    FAILED_THRESHOLD,
    N_BINS,
    QualityPrediction,
    TrainConfig,
    bin_of,
    predict,
    train_linear_svm,
    train_logistic,
    train_ridge,
)
from .volume import Mask


def dice(a: Mask, b: Mask) -> float:
    """2|a n b| / (|a| + |b|); two empty masks count as identical (1.0)."""
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    na, nb = a.count(), b.count()
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a.data, b.data).sum())
    return 2.0 * inter / (na + nb)


def sensitivity_failed(preds: list[QualityPrediction], true_dice: list[float]) -> tuple[float | None, int, int]:
    """Detection rate over truly failed cases (Dice < 0.6).

    Returns (fraction | None, detected, total_failed); the fraction is None
    ("undefined") when no failed case exists.
    """
    if len(preds) != len(true_dice):
        raise ValueError("prediction and truth lists must align")
    if not preds:
        raise ValueError("empty evaluation set")
    failed = [p.failed for p, t in zip(preds, true_dice) if t < FAILED_THRESHOLD]
    total = len(failed)
    detected = sum(failed)
    if total == 0:
        return None, 0, 0
    return detected / total, detected, total


def specificity_bins(pred_bins: list[int], true_bins: list[int]) -> float:
    """One-vs-rest TN/(TN+FP) per bin, averaged over the 5 bins.

    A bin with no negatives (everything truly in that bin) contributes 1.0.
    """
    if len(pred_bins) != len(true_bins):
        raise ValueError("prediction and truth lists must align")
    if not pred_bins:
        raise ValueError("empty evaluation set")
    p = np.asarray(pred_bins)
    t = np.asarray(true_bins)
    per_bin = []
    for b in range(N_BINS):
        neg = t != b
        fp = int(np.logical_and(neg, p == b).sum())
        tn = int(np.logical_and(neg, p != b).sum())
        per_bin.append(tn / (tn + fp) if tn + fp > 0 else 1.0)
    return float(np.mean(per_bin))


def mae(predicted_dice: list[float], true_dice: list[float]) -> tuple[float, float]:
    """Mean and population std of |predicted - true|."""
    if len(predicted_dice) != len(true_dice):
        raise ValueError("prediction and truth lists must align")
    if not predicted_dice:
        raise ValueError("empty evaluation set")
    err = np.abs(np.asarray(predicted_dice, dtype=np.float64) - np.asarray(true_dice, dtype=np.float64))
    return float(err.mean()), float(err.std())


@dataclass(frozen=True)
class EvalReport:
    dataset_id: str
    n_cases: int
    sensitivity: float | None
    detected: int
    total_failed: int
    specificity_avg: float
    mae_mean: float
    mae_std: float
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "n_cases": self.n_cases,
            "sensitivity": self.sensitivity,
            "detected": self.detected,
            "total_failed": self.total_failed,
            "specificity_avg": self.specificity_avg,
            "mae_mean": self.mae_mean,
            "mae_std": self.mae_std,
            "records": self.records,
        }


def evaluate(model, feats: list[FeatureVector], true_dice: list[float], ids: list[str] | None = None,
             dataset_id: str = "eval") -> EvalReport:
    """Score one model on one labeled dataset."""
    if len(feats) != len(true_dice):
        raise ValueError("features and truth lists must align")
    ids = ids if ids is not None else [f"case_{i}" for i in range(len(feats))]
    preds = [predict(model, f, case_id=i) for f, i in zip(feats, ids)]
    true_bins = [bin_of(t) for t in true_dice]
    sens, detected, total = sensitivity_failed(preds, true_dice)
    spec = specificity_bins([p.predicted_bin for p in preds], true_bins)
    m, s = mae([p.predicted_dice for p in preds], true_dice)
    records = [
        {
            "case_id": p.case_id,
            "true_dice": float(t),
            "true_bin": tb,
            "predicted_bin": p.predicted_bin,
            "predicted_dice": p.predicted_dice,
            "failed": p.failed,
            "truly_failed": t < FAILED_THRESHOLD,
        }
        for p, t, tb in zip(preds, true_dice, true_bins)
    ]
    return EvalReport(
        dataset_id=dataset_id,
        n_cases=len(feats),
        sensitivity=sens,
        detected=detected,
        total_failed=total,
        specificity_avg=spec,
        mae_mean=m,
        mae_std=s,
        records=records,
    )


_TRAINERS = {"logistic": train_logistic, "linear_svm": train_linear_svm}


@dataclass(frozen=True)
class BootstrapConfig:
    runs: int = 10000
    sample_size: int = 192
    seed: int = 0
    model_kind: str = "logistic"
    train: TrainConfig = TrainConfig()
    max_redraws_per_run: int = 100
    workers: int = 1


@dataclass(frozen=True)
class BootstrapResult:
    runs: int
    sample_size: int
    sensitivities: np.ndarray
    ci95: tuple[float, float]

    def p_value_below(self, threshold: float) -> float:
        """Fraction of bootstrap runs with sensitivity <= threshold."""
        return float((self.sensitivities <= threshold).mean())


@dataclass(frozen=True)
class BootstrapReport:
    config: BootstrapConfig
    redraws: int
    results: dict  # eval set name -> BootstrapResult

    def to_dict(self) -> dict:
        return {
            "config": {
                "runs": self.config.runs,
                "sample_size": self.config.sample_size,
                "seed": self.config.seed,
                "model_kind": self.config.model_kind,
                "workers": self.config.workers,
            },
            "redraws": self.redraws,
            "results": {
                name: {
                    "runs": r.runs,
                    "sample_size": r.sample_size,
                    "ci95": list(r.ci95),
                    "sensitivities": r.sensitivities.tolist(),
                }
                for name, r in self.results.items()
            },
        }


def _percentile_ci(values: np.ndarray) -> tuple[float, float]:
    # inverted_cdf returns attained sample values, per the empirical-percentile contract.
    lo = float(np.percentile(values, 2.5, method="inverted_cdf"))
    hi = float(np.percentile(values, 97.5, method="inverted_cdf"))
    return lo, hi


def _bootstrap_one(args):
    run_index, X, bins, dice_values, eval_sets, config = args
    rng = np.random.default_rng([config.seed, run_index])
    n = X.shape[0]
    redraws = 0
    while True:
        idx = rng.integers(0, n, size=config.sample_size)
        sample_bins = bins[idx]
        if np.unique(sample_bins).size >= 2:
            break
        redraws += 1
        if redraws > config.max_redraws_per_run:
            raise SegQCError(
                f"bootstrap run {run_index}: no 2-class resample within {config.max_redraws_per_run} redraws"
            )
    if config.model_kind == "ridge":
        model = train_ridge(X[idx], dice_values[idx], config.train.l2_strength)
    else:
        model = _TRAINERS[config.model_kind](X[idx], sample_bins, config.train)
    out = []
    for _, feats, truths in eval_sets:
        preds = [predict(model, f) for f in feats]
        sens, _, _ = sensitivity_failed(preds, truths)
        out.append(sens)
    return redraws, out


def bootstrap_sensitivity(
    train_X: np.ndarray,
    train_dice: list[float],
    eval_sets: list[tuple[str, list[FeatureVector], list[float]]],
    config: BootstrapConfig = BootstrapConfig(),
) -> BootstrapReport:
    """Resample the training set with replacement, retrain, and record the
    failed-mask sensitivity on each eval set for every run.

    Per-run RNG streams derive from (seed, run index), so serial and parallel
    execution produce identical results. Resamples that collapse to a single
    class are redrawn (bounded) and counted.
    """
    X = np.asarray(train_X, dtype=np.float64)
    dice_values = np.asarray(train_dice, dtype=np.float64)
    bins = np.array([bin_of(d) for d in train_dice], dtype=np.intp)
    if np.unique(bins).size < 2:
        raise SegQCError("training set holds a single class; resampling cannot produce 2 classes")
    if config.model_kind not in ("logistic", "linear_svm", "ridge"):
        raise ValueError(f"unknown model kind {config.model_kind!r}")
    for name, _, truths in eval_sets:
        if not any(t < FAILED_THRESHOLD for t in truths):
            raise SegQCError(f"eval set {name!r} has no failed cases; sensitivity would be undefined")

    jobs = [(i, X, bins, dice_values, eval_sets, config) for i in range(config.runs)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            outcomes = list(ex.map(_bootstrap_one, jobs, chunksize=max(1, config.runs // (config.workers * 4))))
    else:
        outcomes = [_bootstrap_one(j) for j in jobs]

    redraws = sum(r for r, _ in outcomes)
    results = {}
    for j, (name, _, _) in enumerate(eval_sets):
        values = np.array([out[j] for _, out in outcomes], dtype=np.float64)
        results[name] = BootstrapResult(
            runs=config.runs, sample_size=config.sample_size, sensitivities=values, ci95=_percentile_ci(values)
        )
    return BootstrapReport(config=config, redraws=redraws, results=results)


@dataclass(frozen=True)
class AblationReport:
    baseline: dict  # eval set name -> {"sensitivity":, "specificity_avg":}
    rows: list  # per left-out feature: {"left_out":, "metrics":, "deltas":}

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "rows": self.rows}


def ablation(
    train_X: np.ndarray,
    train_dice: list[float],
    eval_sets: list[tuple[str, list[FeatureVector], list[float]]],
    config: TrainConfig = TrainConfig(),
) -> AblationReport:
    """Leave out each feature in turn, retrain the logistic model on the
    remaining three, and report sensitivity/specificity deltas vs the full model."""
    X = np.asarray(train_X, dtype=np.float64)
    bins = np.array([bin_of(d) for d in train_dice], dtype=np.intp)
    eval_arrays = [(name, np.array([f.as_array() for f in feats]), list(truths)) for name, feats, truths in eval_sets]

    def metrics_for(keep: list[int]) -> dict:
        model = train_logistic(X[:, keep], bins, config)
        out = {}
        for name, A, truths in eval_arrays:
            preds = [_predict_array(model, A[i, keep], case_id=str(i)) for i in range(A.shape[0])]
            sens, detected, total = sensitivity_failed(preds, truths)
            spec = specificity_bins([p.predicted_bin for p in preds], [bin_of(t) for t in truths])
            out[name] = {"sensitivity": sens, "detected": detected, "total_failed": total, "specificity_avg": spec}
        return out

    full = metrics_for(list(range(X.shape[1])))
    rows = []
    for j, fname in enumerate(FEATURE_NAMES):
        keep = [i for i in range(X.shape[1]) if i != j]
        m = metrics_for(keep)
        deltas = {
            name: {
                "sensitivity": None
                if m[name]["sensitivity"] is None or full[name]["sensitivity"] is None
                else m[name]["sensitivity"] - full[name]["sensitivity"],
                "specificity_avg": m[name]["specificity_avg"] - full[name]["specificity_avg"],
            }
            for name in m
        }
        rows.append({"left_out": fname, "metrics": m, "deltas": deltas})
    return AblationReport(baseline=full, rows=rows)


def _predict_array(model, x: np.ndarray, case_id: str = "") -> QualityPrediction:
    """predict() for a bare coefficient-length feature array (ablation uses
    3-feature subsets that do not form a full FeatureVector)."""
    from .models import BIN_MIDPOINTS, FAILED_MAX_BIN, decision_scores

    scores = decision_scores(model, x)
    masked = np.where(model.class_weights > 0, scores, -np.inf)
    b = int(np.argmax(masked))
    return QualityPrediction(case_id=case_id, predicted_bin=b, predicted_dice=BIN_MIDPOINTS[b], failed=b <= FAILED_MAX_BIN)
