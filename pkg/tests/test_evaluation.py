import numpy as np
import pytest

from segqc.errors import SegQCError
from segqc.evaluation import (
    BootstrapConfig,
    ablation,
    bootstrap_sensitivity,
    dice,
    evaluate,
    mae,
    sensitivity_failed,
    specificity_bins,
)
from segqc.features import FeatureVector
from segqc.models import QualityPrediction, TrainConfig, bin_of
from segqc.volume import Mask


def mask_of(shape, voxels):
    data = np.zeros(shape, dtype=np.uint8)
    for v in voxels:
        data[v] = 1
    return Mask(data)


# ---------------------------------------------------------------- dice


def test_dice_identity():
    a = mask_of((2, 2, 2), [(0, 0, 0), (1, 1, 1)])
    assert dice(a, a) == 1.0


def test_dice_disjoint():
    a = mask_of((1, 1, 4), [(0, 0, 0)])
    b = mask_of((1, 1, 4), [(0, 0, 3)])
    assert dice(a, b) == 0.0


def test_dice_hand_fixture():
    # |a|=2, |b|=3, |a n b|=2 -> 2*2/5 = 0.8
    a = mask_of((1, 1, 4), [(0, 0, 0), (0, 0, 1)])
    b = mask_of((1, 1, 4), [(0, 0, 0), (0, 0, 1), (0, 0, 2)])
    assert dice(a, b) == pytest.approx(0.8)


def test_dice_both_empty():
    e = Mask(np.zeros((2, 2, 2), dtype=np.uint8))
    assert dice(e, e) == 1.0


def test_dice_one_empty():
    a = mask_of((2, 2, 2), [(0, 0, 0)])
    e = Mask(np.zeros((2, 2, 2), dtype=np.uint8))
    assert dice(a, e) == 0.0


def test_dice_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = Mask(rng.integers(0, 2, size=(3, 4, 4)).astype(np.uint8))
        b = Mask(rng.integers(0, 2, size=(3, 4, 4)).astype(np.uint8))
        d = dice(a, b)
        assert d == dice(b, a)
        assert 0.0 <= d <= 1.0
        if a.count() + b.count() > 0:
            assert (d == 1.0) == np.array_equal(a.data, b.data)


def test_dice_dim_mismatch():
    with pytest.raises(ValueError):
        dice(Mask(np.zeros((2, 2, 2), dtype=np.uint8)), Mask(np.zeros((2, 2, 3), dtype=np.uint8)))


# ---------------------------------------------------------------- sensitivity


def _pred(failed, bin_=0):
    return QualityPrediction(case_id="", predicted_bin=bin_ if failed else 4,
                             predicted_dice=0.1 if failed else 0.9, failed=failed)


def test_sensitivity_28_of_37():
    # Arithmetic fixture: 28 detected out of 37 failed reads 0.76.
    preds = [_pred(True)] * 28 + [_pred(False)] * 9 + [_pred(False)] * 13
    truths = [0.3] * 37 + [0.9] * 13
    value, detected, total = sensitivity_failed(preds, truths)
    assert (detected, total) == (28, 37)
    assert value == pytest.approx(28 / 37)
    assert f"{value:.2f}" == "0.76"


def test_sensitivity_undefined_without_failed_cases():
    preds = [_pred(False)] * 5
    truths = [0.9] * 5
    value, detected, total = sensitivity_failed(preds, truths)
    assert value is None
    assert (detected, total) == (0, 0)


def test_sensitivity_all_detected():
    preds = [_pred(True)] * 3
    truths = [0.1, 0.2, 0.59]
    value, detected, total = sensitivity_failed(preds, truths)
    assert value == 1.0
    assert detected <= total


def test_sensitivity_permutation_invariant():
    preds = [_pred(True), _pred(False), _pred(True), _pred(False)]
    truths = [0.1, 0.5, 0.9, 0.3]
    v1 = sensitivity_failed(preds, truths)
    order = [2, 0, 3, 1]
    v2 = sensitivity_failed([preds[i] for i in order], [truths[i] for i in order])
    assert v1 == v2


def test_sensitivity_empty_list():
    with pytest.raises(ValueError):
        sensitivity_failed([], [])


# ---------------------------------------------------------------- specificity


def test_specificity_perfect():
    assert specificity_bins([0, 1, 2, 3, 4], [0, 1, 2, 3, 4]) == 1.0


def test_specificity_hand_fixture():
    # true {3,3,4}, predicted {3,4,4}: bin3 1.0, bin4 0.5, bins 0-2 vacuous -> 0.9
    assert specificity_bins([3, 4, 4], [3, 3, 4]) == pytest.approx(0.9)


def test_specificity_single_bin_dumping():
    # Everything predicted into bin 2, nothing truly 2: bin-2 specificity 0.
    value = specificity_bins([2, 2, 2], [3, 4, 0])
    # bins 0,3,4: each has FP=0 but TN>0 -> 1.0; bin 1 vacuous... bin 1: negatives=3, FP=0 -> 1.0
    assert value == pytest.approx((1.0 + 1.0 + 0.0 + 1.0 + 1.0) / 5)


def test_specificity_permutation_invariant():
    p = [0, 3, 2, 4, 4]
    t = [1, 3, 3, 4, 0]
    order = [4, 2, 0, 1, 3]
    assert specificity_bins(p, t) == specificity_bins([p[i] for i in order], [t[i] for i in order])


# ---------------------------------------------------------------- MAE


def test_mae_identical():
    assert mae([0.5, 0.7], [0.5, 0.7]) == (0.0, 0.0)


def test_mae_single_offset():
    m, s = mae([0.5], [0.7])
    assert m == pytest.approx(0.2)
    assert s == 0.0


def test_mae_midpoint_contribution():
    m, _ = mae([0.7], [0.75])  # classifier bin 3 midpoint vs true 0.75
    assert m == pytest.approx(0.05)


def test_mae_population_std():
    m, s = mae([0.0, 0.0], [0.1, 0.3])
    assert m == pytest.approx(0.2)
    assert s == pytest.approx(0.1)  # population, not sample


# ---------------------------------------------------------------- evaluate


def test_evaluate_full_report(skewed_train_matrix):
    from segqc.models import train_logistic

    X, train_dice, test_feats, test_dice = skewed_train_matrix
    model = train_logistic(X, [bin_of(d) for d in train_dice], TrainConfig())
    rep = evaluate(model, test_feats, test_dice, dataset_id="unit")
    assert rep.dataset_id == "unit"
    assert rep.n_cases == len(test_feats)
    assert len(rep.records) == rep.n_cases
    assert rep.detected <= rep.total_failed
    assert 0.0 <= rep.specificity_avg <= 1.0
    doc = rep.to_dict()
    assert doc["sensitivity"] == rep.sensitivity
    for rec in doc["records"]:
        assert rec["failed"] == (rec["predicted_bin"] <= 2)


# ---------------------------------------------------------------- bootstrap


def _balanced_synthetic(n_per_bin=10):
    # Feature 0 encodes the bin cleanly: trivially separable by any 2-class model.
    X, dice_values = [], []
    mids = [0.1, 0.3, 0.5, 0.7, 0.9]
    for b in range(5):
        for i in range(n_per_bin):
            X.append([b * 10.0 + (i % 3) * 0.1, 0.0, 0.0, 0.0])
            dice_values.append(mids[b])
    return np.array(X), dice_values


def _eval_set(n=20):
    feats, truths = [], []
    mids = [0.1, 0.3, 0.5, 0.7, 0.9]
    for i in range(n):
        b = i % 5
        feats.append(FeatureVector(b * 10.0, 0.0, 0.0, 0.0))
        truths.append(mids[b])
    return feats, truths


def test_bootstrap_deterministic_and_counts():
    X, dv = _balanced_synthetic()
    feats, truths = _eval_set()
    config = BootstrapConfig(runs=20, sample_size=25, seed=42, train=TrainConfig(max_iters=60))
    r1 = bootstrap_sensitivity(X, dv, [("ds", feats, truths)], config)
    r2 = bootstrap_sensitivity(X, dv, [("ds", feats, truths)], config)
    assert r1.to_dict() == r2.to_dict()
    assert len(r1.results["ds"].sensitivities) == 20


def test_bootstrap_degenerate_distribution_ci():
    X, dv = _balanced_synthetic()
    feats, truths = _eval_set()
    config = BootstrapConfig(runs=30, sample_size=60, seed=7, train=TrainConfig(max_iters=120))
    report = bootstrap_sensitivity(X, dv, [("ds", feats, truths)], config)
    sens = report.results["ds"].sensitivities
    assert np.unique(sens).size == 1  # construction: every resample trains a perfect model
    s = float(sens[0])
    assert report.results["ds"].ci95 == (s, s)


def test_bootstrap_ci_bounds_are_attained_samples():
    X, dv = _balanced_synthetic()
    feats, truths = _eval_set()
    config = BootstrapConfig(runs=25, sample_size=12, seed=3, train=TrainConfig(max_iters=60))
    report = bootstrap_sensitivity(X, dv, [("ds", feats, truths)], config)
    res = report.results["ds"]
    lo, hi = res.ci95
    assert lo <= hi
    assert lo in res.sensitivities
    assert hi in res.sensitivities


def test_bootstrap_p_value_below():
    X, dv = _balanced_synthetic()
    feats, truths = _eval_set()
    config = BootstrapConfig(runs=16, sample_size=25, seed=5, train=TrainConfig(max_iters=60))
    res = bootstrap_sensitivity(X, dv, [("ds", feats, truths)], config).results["ds"]
    assert res.p_value_below(1.0) == 1.0
    assert res.p_value_below(-0.01) == 0.0
    t = float(np.median(res.sensitivities))
    assert res.p_value_below(t) == pytest.approx(float((res.sensitivities <= t).mean()))


def test_bootstrap_serial_equals_parallel():
    X, dv = _balanced_synthetic()
    feats, truths = _eval_set()
    base = dict(runs=12, sample_size=20, seed=9, train=TrainConfig(max_iters=60))
    serial = bootstrap_sensitivity(X, dv, [("ds", feats, truths)], BootstrapConfig(workers=1, **base))
    parallel = bootstrap_sensitivity(X, dv, [("ds", feats, truths)], BootstrapConfig(workers=3, **base))
    np.testing.assert_array_equal(serial.results["ds"].sensitivities, parallel.results["ds"].sensitivities)
    assert serial.redraws == parallel.redraws


def test_bootstrap_single_class_train_set_rejected():
    X = np.zeros((10, 4))
    with pytest.raises(SegQCError, match="single class"):
        bootstrap_sensitivity(X, [0.9] * 10, [("ds", *_eval_set())], BootstrapConfig(runs=2, sample_size=4))


def test_bootstrap_eval_set_without_failed_rejected():
    X, dv = _balanced_synthetic()
    feats = [FeatureVector(40.0, 0, 0, 0)] * 4
    truths = [0.9] * 4
    with pytest.raises(SegQCError, match="no failed cases"):
        bootstrap_sensitivity(X, dv, [("ds", feats, truths)], BootstrapConfig(runs=2, sample_size=10))


def test_bootstrap_redraws_counted():
    # Tiny resamples from a 2-class set frequently collapse to one class.
    X = np.array([[0.0, 0, 0, 0]] * 18 + [[10.0, 0, 0, 0]] * 2)
    dv = [0.9] * 18 + [0.1] * 2
    feats, truths = [FeatureVector(0, 0, 0, 0), FeatureVector(10, 0, 0, 0)], [0.9, 0.1]
    config = BootstrapConfig(runs=40, sample_size=2, seed=1, train=TrainConfig(max_iters=40))
    report = bootstrap_sensitivity(X, dv, [("ds", feats, truths)], config)
    assert report.redraws > 0
    assert len(report.results["ds"].sensitivities) == 40


def test_bootstrap_paper_scale_config_echo():
    config = BootstrapConfig(runs=10000, sample_size=192, seed=0)
    assert config.runs == 10000
    assert config.sample_size == 192
    X, dv = _balanced_synthetic()
    feats, truths = _eval_set()
    small = BootstrapConfig(runs=3, sample_size=192, seed=0, train=TrainConfig(max_iters=40))
    doc = bootstrap_sensitivity(X, dv, [("ds", feats, truths)], small).to_dict()
    assert doc["config"]["sample_size"] == 192  # report header echoes the configuration


# ---------------------------------------------------------------- ablation


def test_ablation_structure_and_baseline_consistency():
    X, dv = _balanced_synthetic()
    feats, truths = _eval_set()
    report = ablation(X, dv, [("ds", feats, truths)], TrainConfig(max_iters=150))
    assert len(report.rows) == 4
    names = [r["left_out"] for r in report.rows]
    assert names == ["n_components", "intensity_mode_hu", "smoothness", "containment"]
    doc = report.to_dict()
    assert set(doc) == {"baseline", "rows"}


def test_ablation_noise_feature_leaves_sensitivity_unchanged():
    # Feature 3 is pure noise with zero class signal; leaving it out must not
    # change sensitivity on a cleanly separable construction.
    rng = np.random.default_rng(21)
    X, dv = _balanced_synthetic()
    X[:, 3] = rng.normal(size=X.shape[0]) * 1e-3
    feats, truths = _eval_set()
    report = ablation(X, dv, [("ds", feats, truths)], TrainConfig(max_iters=200))
    row = report.rows[3]
    assert row["left_out"] == "containment"
    assert row["deltas"]["ds"]["sensitivity"] == 0.0
