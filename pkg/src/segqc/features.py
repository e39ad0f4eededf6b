"""The four ground-truth-free quality features of a lesion segmentation mask.

A connected component is a maximal set of foreground voxels chained through
the full 3x3x3 neighborhood (26-connectivity; every offset in that
neighborhood has city-block distance <= 3). Labeling is deterministic:
components are numbered by their first-encountered voxel in z-major scan
order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, NoLungFoundError
from .volume import Mask, Volume

FEATURE_VERSION = "1"
FEATURE_NAMES = ("n_components", "intensity_mode_hu", "smoothness", "containment")
CSV_COLUMNS = ("case_id",) + FEATURE_NAMES

# Empty-mask sentinels: component count 0 is itself the signal; the other
# entries keep the vector total and finite.
SENTINEL_INTENSITY_HU = 0.0

LUNG_THRESHOLD_HU = -320.0


@dataclass(frozen=True)
class FeatureVector:
    n_components: int
    intensity_mode_hu: float
    smoothness: float
    containment: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.n_components, self.intensity_mode_hu, self.smoothness, self.containment], dtype=np.float64
        )


@dataclass(frozen=True)
class LabeledComponents:
    """Component ids per voxel (0 = background), ids contiguous 1..count."""

    labels: np.ndarray
    count: int
    sizes: np.ndarray  # sizes[i] = voxel count of component i+1

    def largest_id(self) -> int:
        """Id of the largest component; ties broken by lowest id."""
        if self.count == 0:
            raise EmptyMaskError("mask has no components")
        return int(np.argmax(self.sizes)) + 1


_SENTINEL = np.iinfo(np.int64).max


def _shifted(a: np.ndarray, off: tuple[int, int, int], fill) -> np.ndarray:
    out = np.full_like(a, fill)
    src = []
    dst = []
    for d, n in zip(off, a.shape):
        dst.append(slice(max(0, d), n + min(0, d)))
        src.append(slice(max(0, -d), n + min(0, -d)))
    out[tuple(dst)] = a[tuple(src)]
    return out


_OFFSETS = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dz, dy, dx) != (0, 0, 0)]


def label_components(m: Mask) -> LabeledComponents:
    """Label 26-connected components by iterated minimum-id propagation.

    Every foreground voxel starts with its z-major linear index; sweeps take
    the minimum over the 3x3x3 neighborhood until a fixpoint. A component's
    final id is the minimum linear index it contains, so sorting the final
    ids yields first-encounter scan order for free.
    """
    fg = m.data.astype(bool)
    labels = np.zeros(m.dims, dtype=np.int32)
    if not fg.any():
        return LabeledComponents(labels=labels, count=0, sizes=np.zeros(0, dtype=np.int64))

    bg = ~fg
    ids = np.where(fg, np.arange(fg.size, dtype=np.int64).reshape(fg.shape), _SENTINEL)
    while True:
        new = ids.copy()
        for off in _OFFSETS:
            np.minimum(new, _shifted(new, off, _SENTINEL), out=new)
            # Background must never carry an id, or minima would flow through
            # it and bridge disconnected components within one sweep.
            new[bg] = _SENTINEL
        if np.array_equal(new, ids):
            break
        ids = new

    roots = np.unique(ids[fg])
    labels[fg] = np.searchsorted(roots, ids[fg]) + 1
    sizes = np.bincount(labels[fg], minlength=roots.size + 1)[1:].astype(np.int64)
    return LabeledComponents(labels=labels, count=int(roots.size), sizes=sizes)


def intensity_mode(img: Volume, m: Mask) -> float:
    """Mean HU over the largest component (the ML Gaussian mean)."""
    if img.dims != m.dims:
        raise ValueError(f"image dims {img.dims} != mask dims {m.dims}")
    return _intensity_from_labels(img, label_components(m))


def _intensity_from_labels(img: Volume, lab: LabeledComponents) -> float:
    if lab.count == 0:
        raise EmptyMaskError("cannot take the intensity mode of an empty mask")
    return float(img.data[lab.labels == lab.largest_id()].mean())


def smoothness(m: Mask) -> float:
    """Mean over components of the mean 2D Dice between consecutive,
    non-identical axial slices of that component.

    Components without a non-identical slice pair (single-slice or constant
    along z) contribute 1.0; an empty mask returns 1.0.
    """
    return _smoothness_from_labels(label_components(m))


def _smoothness_from_labels(lab: LabeledComponents) -> float:
    if lab.count == 0:
        return 1.0
    per_component = []
    for cid in range(1, lab.count + 1):
        comp = lab.labels == cid
        zs = np.nonzero(comp.any(axis=(1, 2)))[0]
        z0, z1 = zs[0], zs[-1]
        dices = []
        for z in range(z0, z1):
            a = comp[z]
            b = comp[z + 1]
            if np.array_equal(a, b):
                continue
            inter = np.logical_and(a, b).sum()
            dices.append(2.0 * inter / (a.sum() + b.sum()))
        per_component.append(float(np.mean(dices)) if dices else 1.0)
    return float(np.mean(per_component))


def lesion_containment(m: Mask, lung: Mask) -> float:
    """Fraction of mask voxels inside the lung mask; empty masks count as contained."""
    if m.dims != lung.dims:
        raise ValueError(f"mask dims {m.dims} != lung dims {lung.dims}")
    total = m.count()
    if total == 0:
        return 1.0
    inside = int(np.logical_and(m.data, lung.data).sum())
    return inside / total


def heuristic_lung_mask(img: Volume) -> Mask:
    """Threshold-based stand-in for a trained lung segmentation model.

    Thresholds below -320 HU, drops components touching the x/y boundary
    faces (outside air), keeps the two largest remaining components, and
    fills holes slice by slice.
    """
    cand = Mask((img.data < LUNG_THRESHOLD_HU).astype(np.uint8), img.spacing)
    lab = label_components(cand)
    if lab.count == 0:
        raise NoLungFoundError("no voxels below the lung threshold")

    border = np.concatenate(
        [
            lab.labels[:, 0, :].ravel(),
            lab.labels[:, -1, :].ravel(),
            lab.labels[:, :, 0].ravel(),
            lab.labels[:, :, -1].ravel(),
        ]
    )
    touching = set(np.unique(border)) - {0}
    interior = [cid for cid in range(1, lab.count + 1) if cid not in touching]
    if not interior:
        raise NoLungFoundError("every candidate component touches the x/y boundary")

    keep = sorted(interior, key=lambda cid: (-lab.sizes[cid - 1], cid))[:2]
    lung = np.isin(lab.labels, keep)
    for z in range(lung.shape[0]):
        lung[z] = ndimage.binary_fill_holes(lung[z])
    return Mask(lung.astype(np.uint8), img.spacing)


def extract_features(img: Volume, pred: Mask, lung: Mask) -> FeatureVector:
    """Assemble the four quality features for one case."""
    if not (img.dims == pred.dims == lung.dims):
        raise ValueError(f"dims mismatch: image {img.dims}, prediction {pred.dims}, lung {lung.dims}")
    lab = label_components(pred)
    if lab.count == 0:
        return FeatureVector(0, SENTINEL_INTENSITY_HU, 1.0, 1.0)
    return FeatureVector(
        n_components=lab.count,
        intensity_mode_hu=_intensity_from_labels(img, lab),
        smoothness=_smoothness_from_labels(lab),
        containment=lesion_containment(pred, lung),
    )


def write_features_csv(path, rows: list[tuple[str, FeatureVector]]) -> None:
    """One row per case: case_id, n_components, intensity_mode_hu, smoothness, containment."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for case_id, fv in rows:
            w.writerow([case_id, fv.n_components, repr(fv.intensity_mode_hu), repr(fv.smoothness), repr(fv.containment)])


def read_features_csv(path) -> list[tuple[str, FeatureVector]]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected feature CSV columns {header}")
        return [
            (case_id, FeatureVector(int(nc), float(mode), float(smooth), float(cont)))
            for case_id, nc, mode, smooth, cont in r
        ]
