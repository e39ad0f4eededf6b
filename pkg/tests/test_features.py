import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_intensity_mode, oracle_partition, oracle_smoothness, package_partition
from segqc.errors import EmptyMaskError, NoLungFoundError
from segqc.features import (
    FeatureVector,
    extract_features,
    heuristic_lung_mask,
    intensity_mode,
    label_components,
    lesion_containment,
    read_features_csv,
    smoothness,
    write_features_csv,
)
from segqc.synth import PhantomParams, generate_phantom
from segqc.volume import Mask, Volume


def mask_of(shape, voxels):
    data = np.zeros(shape, dtype=np.uint8)
    for v in voxels:
        data[v] = 1
    return Mask(data)


# ---------------------------------------------------------------- labeling


def test_empty_mask_has_zero_components():
    lab = label_components(Mask(np.zeros((3, 3, 3), dtype=np.uint8)))
    assert lab.count == 0
    assert lab.sizes.size == 0


def test_diagonal_voxels_connect():
    # (0,0,0) and (1,1,1): city-block distance 3, inside the 3x3x3 neighborhood.
    lab = label_components(mask_of((3, 3, 3), [(0, 0, 0), (1, 1, 1)]))
    assert lab.count == 1


def test_two_apart_voxels_do_not_connect():
    lab = label_components(mask_of((3, 3, 3), [(0, 0, 0), (0, 0, 2)]))
    assert lab.count == 2


def test_labels_numbered_in_scan_order():
    lab = label_components(mask_of((2, 3, 3), [(0, 0, 2), (1, 2, 0)]))
    assert lab.labels[0, 0, 2] == 1
    assert lab.labels[1, 2, 0] == 2


def test_sizes_sum_to_foreground():
    rng = np.random.default_rng(1)
    m = Mask((rng.random((6, 6, 6)) < 0.3).astype(np.uint8))
    lab = label_components(m)
    assert lab.sizes.sum() == m.count()
    assert np.all(lab.sizes > 0)


def test_partition_matches_union_find_oracle():
    rng = np.random.default_rng(2)
    for density in (0.05, 0.2, 0.5, 0.8):
        for _ in range(10):
            m = Mask((rng.random((8, 8, 8)) < density).astype(np.uint8))
            lab = label_components(m)
            assert package_partition(lab.labels, lab.count) == oracle_partition(m.data)


def test_count_invariant_under_axis_flips():
    rng = np.random.default_rng(3)
    m = (rng.random((6, 7, 8)) < 0.25).astype(np.uint8)
    base = label_components(Mask(m)).count
    for axis in range(3):
        assert label_components(Mask(np.flip(m, axis=axis).copy())).count == base


def test_partition_stable_under_flips():
    # Flipping changes visit order; the partition (up to relabeling) must not change.
    rng = np.random.default_rng(4)
    m = (rng.random((5, 6, 7)) < 0.3).astype(np.uint8)
    lab = label_components(Mask(m))
    flipped = np.flip(m, axis=0).copy()
    lab_f = label_components(Mask(flipped))
    # Map the flipped partition back to original coordinates and compare.
    back = np.flip(lab_f.labels, axis=0)
    remapped = package_partition(back, lab_f.count)
    assert remapped == package_partition(lab.labels, lab.count)


def test_bridging_never_increases_count():
    rng = np.random.default_rng(5)
    for _ in range(10):
        m = (rng.random((5, 6, 7)) < 0.15).astype(np.uint8)
        lab = label_components(Mask(m))
        if lab.count < 2:
            continue
        a = np.argwhere(lab.labels == 1)[0]
        b = np.argwhere(lab.labels == 2)[0]
        bridged = m.copy()
        # Walk an axis-aligned staircase from a to b; consecutive steps are
        # Chebyshev-adjacent, so the path chains onto both endpoints.
        pos = a.copy()
        while not np.array_equal(pos, b):
            step = np.sign(b - pos)
            pos = pos + step
            bridged[tuple(pos)] = 1
        after = label_components(Mask(bridged)).count
        assert after < lab.count


# ---------------------------------------------------------------- intensity mode


def test_intensity_mode_constant_component():
    img = Volume(np.full((2, 2, 2), -600.0))
    m = mask_of((2, 2, 2), [(0, 0, 0), (0, 0, 1), (0, 1, 0)])
    assert intensity_mode(img, m) == -600.0


def test_intensity_mode_is_sample_mean():
    data = np.zeros((1, 1, 2))
    data[0, 0, 0] = -700.0
    data[0, 0, 1] = -500.0
    assert intensity_mode(Volume(data), mask_of((1, 1, 2), [(0, 0, 0), (0, 0, 1)])) == -600.0


def test_intensity_mode_uses_largest_component_lowest_id_ties():
    # Two single-voxel components: sizes tie, the first-encountered wins.
    data = np.zeros((1, 1, 3))
    data[0, 0, 0] = -100.0
    data[0, 0, 2] = -900.0
    m = mask_of((1, 1, 3), [(0, 0, 0), (0, 0, 2)])
    assert intensity_mode(Volume(data), m) == -100.0


def test_intensity_mode_empty_mask_raises():
    with pytest.raises(EmptyMaskError):
        intensity_mode(Volume(np.zeros((2, 2, 2))), Mask(np.zeros((2, 2, 2), dtype=np.uint8)))


def test_intensity_mode_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(10):
        img = rng.normal(-500, 200, size=(6, 6, 6))
        m = (rng.random((6, 6, 6)) < 0.3).astype(np.uint8)
        if m.sum() == 0:
            continue
        got = intensity_mode(Volume(img), Mask(m))
        assert got == pytest.approx(oracle_intensity_mode(img, m), abs=1e-9)


def test_intensity_mode_bounded_by_component_values():
    rng = np.random.default_rng(7)
    img = rng.normal(size=(5, 5, 5))
    m = (rng.random((5, 5, 5)) < 0.4).astype(np.uint8)
    lab = label_components(Mask(m))
    comp = lab.labels == lab.largest_id()
    got = intensity_mode(Volume(img), Mask(m))
    assert img[comp].min() <= got <= img[comp].max()


# ---------------------------------------------------------------- smoothness


def test_smoothness_single_slice_component():
    assert smoothness(mask_of((3, 3, 3), [(1, 0, 0), (1, 0, 1)])) == 1.0


def test_smoothness_two_slice_fixture():
    # slice z: {(0,0),(0,1)}; slice z+1: {(0,0),(0,1),(1,1)} -> 2*2/(2+3) = 0.8
    m = mask_of((2, 2, 2), [(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 0, 1), (1, 1, 1)])
    assert smoothness(m) == pytest.approx(0.8)


def test_smoothness_unweighted_mean_over_components():
    # Component A: two identical slices -> 1.0. Component B: dice 0.5 pair.
    voxels_a = [(0, 0, 0), (1, 0, 0)]
    voxels_b = [(0, 4, 4), (1, 4, 4), (1, 4, 5), (1, 5, 4)]  # 2*1/(1+3) = 0.5
    m = mask_of((2, 7, 7), voxels_a + voxels_b)
    assert label_components(m).count == 2
    assert smoothness(m) == pytest.approx(0.75)


def test_smoothness_identical_slices_excluded():
    m = mask_of((3, 2, 2), [(0, 0, 0), (1, 0, 0), (2, 0, 0)])
    assert smoothness(m) == 1.0


def test_smoothness_empty_mask():
    assert smoothness(Mask(np.zeros((2, 2, 2), dtype=np.uint8))) == 1.0


def test_smoothness_matches_oracle():
    rng = np.random.default_rng(8)
    for _ in range(15):
        m = (rng.random((5, 5, 5)) < 0.35).astype(np.uint8)
        assert smoothness(Mask(m)) == pytest.approx(oracle_smoothness(m), abs=1e-12)


# ---------------------------------------------------------------- containment


def test_containment_subset_is_one():
    lung = mask_of((2, 2, 2), [(0, 0, 0), (0, 0, 1), (1, 1, 1)])
    m = mask_of((2, 2, 2), [(0, 0, 1)])
    assert lesion_containment(m, lung) == 1.0


def test_containment_half_inside():
    lung = mask_of((1, 2, 4), [(0, 0, 0), (0, 0, 1)])
    m = mask_of((1, 2, 4), [(0, 0, 0), (0, 0, 1), (0, 1, 2), (0, 1, 3)])
    assert lesion_containment(m, lung) == 0.5


def test_containment_empty_mask_vacuous():
    lung = mask_of((2, 2, 2), [(0, 0, 0)])
    assert lesion_containment(Mask(np.zeros((2, 2, 2), dtype=np.uint8)), lung) == 1.0


def test_containment_dim_mismatch():
    with pytest.raises(ValueError):
        lesion_containment(Mask(np.zeros((2, 2, 2), dtype=np.uint8)), Mask(np.zeros((2, 2, 3), dtype=np.uint8)))


# ---------------------------------------------------------------- lung heuristic


def test_heuristic_lung_mask_recovers_phantom_lungs():
    img, _, lung = generate_phantom(123, PhantomParams(n_lesions=2))
    got = heuristic_lung_mask(img)
    inter = np.logical_and(got.data, lung.data).sum()
    union = np.logical_or(got.data, lung.data).sum()
    assert inter / union >= 0.9


def test_heuristic_lung_mask_uniform_volume_fails():
    with pytest.raises(NoLungFoundError):
        heuristic_lung_mask(Volume(np.zeros((8, 8, 8))))


def test_heuristic_lung_mask_keeps_exactly_two_components():
    # Air border at -1000 around a 0 HU body with two -800 ellipsoid cavities.
    img = np.full((12, 32, 32), -1000.0)
    img[:, 4:28, 4:28] = 0.0
    zz, yy, xx = np.ogrid[0:12, 0:32, 0:32]
    left = ((zz - 6) / 4) ** 2 + ((yy - 16) / 6) ** 2 + ((xx - 10) / 4) ** 2 <= 1
    right = ((zz - 6) / 4) ** 2 + ((yy - 16) / 6) ** 2 + ((xx - 22) / 4) ** 2 <= 1
    img[left] = -800.0
    img[right] = -800.0
    got = heuristic_lung_mask(Volume(img))
    lab = label_components(got)
    assert lab.count == 2
    expected = np.logical_or(left, right)
    np.testing.assert_array_equal(got.data.astype(bool), expected)


def test_heuristic_lung_mask_fills_slicewise_holes():
    img = np.full((4, 20, 20), -1000.0)
    img[:, 2:18, 2:18] = 0.0
    img[:, 6:14, 6:14] = -800.0  # cavity
    img[1:3, 9:11, 9:11] = 0.0  # bright lesion-like hole inside the cavity
    got = heuristic_lung_mask(Volume(img))
    assert got.data[1, 9, 9] == 1  # hole filled
    assert got.data[0, 0, 0] == 0


# ---------------------------------------------------------------- extract_features


def test_extract_empty_prediction_sentinels():
    img, _, lung = generate_phantom(5, PhantomParams(n_lesions=1, dims=(16, 32, 32)))
    empty = Mask(np.zeros(img.dims, dtype=np.uint8))
    fv = extract_features(img, empty, lung)
    assert fv == FeatureVector(0, 0.0, 1.0, 1.0)


def test_extract_counts_and_containment_on_clean_phantom():
    img, gt, lung = generate_phantom(77, PhantomParams(n_lesions=3, min_separation=14.0))
    fv = extract_features(img, gt, lung)
    assert fv.n_components == label_components(gt).count
    assert fv.containment == 1.0


def test_extract_dim_mismatch():
    img, gt, lung = generate_phantom(5, PhantomParams(n_lesions=1, dims=(16, 32, 32)))
    small = Mask(np.zeros((8, 8, 8), dtype=np.uint8))
    with pytest.raises(ValueError):
        extract_features(img, small, lung)


def test_extract_deterministic():
    img, gt, lung = generate_phantom(6, PhantomParams(n_lesions=2, dims=(16, 32, 32)))
    a = extract_features(img, gt, lung)
    b = extract_features(img, gt, lung)
    assert a == b  # bitwise-identical dataclasses


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), density=st.floats(0.0, 0.9))
def test_feature_bounds_property(seed, density):
    rng = np.random.default_rng(seed)
    img = Volume(rng.normal(-400, 300, size=(4, 6, 6)))
    pred = Mask((rng.random((4, 6, 6)) < density).astype(np.uint8))
    lung = Mask((rng.random((4, 6, 6)) < 0.5).astype(np.uint8))
    fv = extract_features(img, pred, lung)
    assert 0.0 <= fv.smoothness <= 1.0
    assert 0.0 <= fv.containment <= 1.0
    assert fv.n_components >= 0
    assert (fv.n_components == 0) == (pred.count() == 0)


# ---------------------------------------------------------------- CSV round trip


def test_features_csv_round_trip(tmp_path):
    rows = [
        ("case_0001", FeatureVector(3, -512.25, 0.875, 1.0)),
        ("case_0002", FeatureVector(0, 0.0, 1.0, 1.0)),
    ]
    path = tmp_path / "features.csv"
    write_features_csv(path, rows)
    assert read_features_csv(path) == rows
    header = path.read_text().splitlines()[0]
    assert header == "case_id,n_components,intensity_mode_hu,smoothness,containment"
