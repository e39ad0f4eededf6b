"""Reproducible phantom CT volumes with known lungs, lesions, and corrupted
predictions spanning the full quality spectrum.

Phantoms are geometric, not anatomical: an air background, an elliptic body
cylinder, two lung ellipsoids, and ellipsoidal lesion blobs inside the lungs.
The features under test depend only on topology, intensity statistics, and
containment, all of which these phantoms control exactly. Every case is a
pure function of (seed, case index), so parallel generation reproduces
serial output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import SegQCError
from .evaluation import dice
from .features import label_components
from .models import BIN_EDGES, N_BINS
from .volume import Mask, Volume

AIR_HU = -1000.0
NOISE_SIGMA_HU = 30.0  # fixed so intensity mode stays discriminative vs lung HU

CORRUPTION_KINDS = ("erode", "dilate", "shift", "drop_components", "scatter_outside", "erase_all")

SPECTRA = ("uniform", "skewed-good")
_SKEWED_GOOD_PROPORTIONS = (0.06, 0.08, 0.14, 0.24, 0.48)
MIN_CASES_PER_BIN = 5


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple[int, int, int] = (32, 64, 64)
    n_lesions: int = 3
    lesion_hu_range: tuple[float, float] = (-700.0, -100.0)
    lung_hu: float = -800.0
    body_hu: float = 0.0
    min_separation: float = 0.0  # minimum distance between lesion centers, voxels


@dataclass(frozen=True)
class PhantomCase:
    case_id: str
    image: Volume
    gt_mask: Mask
    lung_mask: Mask
    pred_mask: Mask
    true_dice: float  # always recomputed from (gt, pred), never trusted from the corruption plan
    corruption: str
    split: str  # "train" or "test"


def _ellipsoid(grids, center, semi) -> np.ndarray:
    zz, yy, xx = grids
    cz, cy, cx = center
    rz, ry, rx = semi
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_phantom(seed, params: PhantomParams = PhantomParams()) -> tuple[Volume, Mask, Mask]:
    """Build (image, gt lesion mask, lung mask), deterministic in `seed`."""
    nz, ny, nx = params.dims
    if nz < 16 or ny < 32 or nx < 32:
        raise SegQCError(f"dims must be at least (16, 32, 32), got {params.dims}")
    rng = np.random.default_rng(seed)
    grids = np.ogrid[0:nz, 0:ny, 0:nx]

    cz, cy, cx = (nz - 1) / 2.0, (ny - 1) / 2.0, (nx - 1) / 2.0
    body = ((grids[1] - cy) / (0.42 * ny)) ** 2 + ((grids[2] - cx) / (0.46 * nx)) ** 2 <= 1.0
    body = np.broadcast_to(body, params.dims)

    lung = np.zeros(params.dims, dtype=bool)
    jitter = rng.uniform(0.92, 1.05, size=6)
    for side, (jr, jo) in zip((-1.0, 1.0), ((jitter[0], jitter[1]), (jitter[2], jitter[3]))):
        semi = (0.40 * nz * jr, 0.26 * ny * jitter[4], 0.15 * nx * jitter[5])
        center = (cz, cy, cx + side * 0.21 * nx * jo)
        if min(semi) < 2.5:
            raise SegQCError(f"lungs do not fit in dims {params.dims}")
        lung |= _ellipsoid(grids, center, semi)
    lung &= body
    if not lung.any():
        raise SegQCError(f"lungs do not fit in dims {params.dims}")

    # Lesion centers are sampled from the lung interior (scaled-ellipsoid
    # margin is approximated by eroding the lung), so blobs stay inside.
    interior = ndimage.binary_erosion(lung, iterations=2)
    candidates = np.argwhere(interior)
    if params.n_lesions > 0 and candidates.shape[0] == 0:
        raise SegQCError("lung interior too small to place lesions")

    gt = np.zeros(params.dims, dtype=bool)
    centers = []
    lesion_hus = []
    blobs = []
    for _ in range(params.n_lesions):
        for _attempt in range(200):
            center = candidates[rng.integers(0, candidates.shape[0])]
            if params.min_separation > 0 and any(
                np.linalg.norm(center - c) < params.min_separation for c in centers
            ):
                continue
            semi = (rng.uniform(1.2, 3.0), rng.uniform(1.6, 4.2), rng.uniform(1.6, 4.2))
            blob = _ellipsoid(grids, center, semi) & lung
            if blob.any():
                break
        else:
            raise SegQCError("could not place a lesion inside the lungs")
        centers.append(center)
        blobs.append(blob)
        lesion_hus.append(rng.uniform(*params.lesion_hu_range))
        gt |= blob

    img = np.full(params.dims, AIR_HU)
    img[body] = params.body_hu
    img[lung] = params.lung_hu
    for blob, hu in zip(blobs, lesion_hus):
        img[blob] = hu
    img += rng.normal(0.0, NOISE_SIGMA_HU, size=params.dims)

    return Volume(img), Mask(gt.astype(np.uint8)), Mask(lung.astype(np.uint8))


def _shift_mask(data: np.ndarray, offsets) -> np.ndarray:
    out = np.zeros_like(data)
    src = []
    dst = []
    for d, n in zip(offsets, data.shape):
        d = int(d)
        dst.append(slice(max(0, d), n + min(0, d)))
        src.append(slice(max(0, -d), n + min(0, -d)))
    if all(s.start < s.stop for s in dst):
        out[tuple(dst)] = data[tuple(src)]
    return out


def corrupt_mask(gt: Mask, lung: Mask, kind: str, magnitude: int, seed) -> Mask:
    """Apply one deterministic corruption of the given kind and magnitude."""
    if kind not in CORRUPTION_KINDS:
        raise SegQCError(f"unknown corruption kind {kind!r}")
    if kind == "erase_all":
        return Mask(np.zeros(gt.dims, dtype=np.uint8), gt.spacing)
    if magnitude == 0:
        return Mask(gt.data.copy(), gt.spacing)

    rng = np.random.default_rng(seed)
    data = gt.data.astype(bool)

    if kind == "erode":
        out = ndimage.binary_erosion(data, iterations=int(magnitude))
    elif kind == "dilate":
        out = ndimage.binary_dilation(data, iterations=int(magnitude))
    elif kind == "shift":
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        offsets = np.rint(magnitude * u).astype(int)
        if not offsets.any():
            offsets[int(np.argmax(np.abs(u)))] = int(np.sign(u[int(np.argmax(np.abs(u)))]) or 1)
        out = _shift_mask(data, offsets)
    elif kind == "drop_components":
        lab = label_components(gt)
        order = sorted(range(1, lab.count + 1), key=lambda cid: (lab.sizes[cid - 1], cid))
        drop = set(order[: int(magnitude)])
        out = data & ~np.isin(lab.labels, list(drop))
    else:  # scatter_outside
        outside = np.argwhere(lung.data == 0)
        out = data.copy()
        grids = np.ogrid[0 : gt.dims[0], 0 : gt.dims[1], 0 : gt.dims[2]]
        for _ in range(int(magnitude)):
            center = outside[rng.integers(0, outside.shape[0])]
            semi = (rng.uniform(0.8, 1.6), rng.uniform(1.0, 2.2), rng.uniform(1.0, 2.2))
            blob = _ellipsoid(grids, center, semi) & (lung.data == 0)
            out |= blob
    return Mask(out.astype(np.uint8), gt.spacing)


def assign_split(case_id: str) -> str:
    """Deterministic ~75/25 train/test split by hash of the case id."""
    h = int.from_bytes(hashlib.sha256(case_id.encode()).digest()[:4], "big")
    return "test" if h % 4 == 3 else "train"


def _target_counts(n_cases: int, spectrum: str) -> list[int]:
    if spectrum == "uniform":
        proportions = [1.0 / N_BINS] * N_BINS
    elif spectrum == "skewed-good":
        proportions = list(_SKEWED_GOOD_PROPORTIONS)
    else:
        raise SegQCError(f"unknown spectrum {spectrum!r}; choose one of {SPECTRA}")
    if n_cases < N_BINS * MIN_CASES_PER_BIN:
        raise SegQCError(
            f"n_cases={n_cases} cannot give every bin {MIN_CASES_PER_BIN} cases; need at least {N_BINS * MIN_CASES_PER_BIN}"
        )
    counts = [int(p * n_cases) for p in proportions]
    remainders = [(p * n_cases - c, -b) for b, (p, c) in enumerate(zip(proportions, counts))]
    for _ in range(n_cases - sum(counts)):
        b = -max(remainders, key=lambda t: t)[1]
        counts[b] += 1
        remainders[b] = (-1.0, -b)
    while min(counts) < MIN_CASES_PER_BIN:
        counts[int(np.argmax(counts))] -= 1
        counts[int(np.argmin(counts))] += 1
    return counts


# Corruption search menu per target bin: (kind, magnitude range, scatter blob count range).
_BIN_MENU = {
    4: [("none", (0, 0), (0, 0)), ("erode", (1, 1), (0, 0)), ("dilate", (1, 1), (0, 0))],
    3: [
        ("dilate", (1, 3), (0, 0)),
        ("shift", (1, 2), (0, 0)),
        ("erode", (1, 2), (0, 0)),
    ],
    2: [
        ("shift", (1, 4), (1, 2)),
        ("dilate", (2, 6), (1, 2)),
        ("erode", (1, 4), (1, 2)),
        ("drop_components", (1, 3), (1, 2)),
    ],
    1: [
        ("shift", (2, 7), (2, 3)),
        ("dilate", (4, 9), (2, 3)),
        ("erode", (2, 5), (2, 3)),
    ],
    0: [
        ("shift", (4, 14), (3, 5)),
        ("erase_all", (0, 0), (0, 0)),
        ("erode", (3, 7), (3, 5)),
    ],
}


def _dice_bin(d: float) -> int:
    return int(np.searchsorted(np.array(BIN_EDGES[1:-1]), d, side="right"))


def _build_case(master_seed: int, index: int, target_bin: int, dims) -> PhantomCase:
    case_id = f"case_{index:04d}"
    for attempt in range(10):
        rng = np.random.default_rng([master_seed, index, attempt])
        n_lesions = int(rng.integers(1, 5))
        params = PhantomParams(dims=dims, n_lesions=n_lesions)
        img, gt, lung = generate_phantom([master_seed, index, attempt, 1], params)

        menu = list(_BIN_MENU[target_bin])
        order = rng.permutation(len(menu))
        for mi in order:
            kind, (m_lo, m_hi), (s_lo, s_hi) = menu[mi]
            scatter_n = int(rng.integers(s_lo, s_hi + 1)) if s_hi > 0 else 0
            scatter_seed = int(rng.integers(2**63))
            for magnitude in range(m_lo, m_hi + 1):
                step_seed = int(rng.integers(2**63))
                if kind == "none":
                    pred = Mask(gt.data.copy(), gt.spacing)
                    desc = "none"
                elif kind == "erase_all":
                    pred = corrupt_mask(gt, lung, "erase_all", 0, step_seed)
                    desc = "erase_all"
                else:
                    pred = corrupt_mask(gt, lung, kind, magnitude, step_seed)
                    desc = f"{kind}:{magnitude}"
                if scatter_n > 0:
                    pred = corrupt_mask(pred, lung, "scatter_outside", scatter_n, scatter_seed)
                    desc += f"+scatter_outside:{scatter_n}"
                d = dice(gt, pred)
                if _dice_bin(d) == target_bin:
                    return PhantomCase(
                        case_id=case_id,
                        image=img,
                        gt_mask=gt,
                        lung_mask=lung,
                        pred_mask=pred,
                        true_dice=d,
                        corruption=desc,
                        split=assign_split(case_id),
                    )
    raise SegQCError(f"case {case_id}: could not land a corruption in quality bin {target_bin} within the retry budget")


def build_dataset(n_cases: int, seed: int, spectrum: str = "uniform", dims=(32, 64, 64)) -> list[PhantomCase]:
    """Generate n_cases phantoms whose recomputed Dice values give every
    quality bin at least 5 cases; split assignment hashes the case id."""
    if n_cases <= 0:
        raise SegQCError("n_cases must be positive")
    counts = _target_counts(n_cases, spectrum)
    targets = [b for b in range(N_BINS) for _ in range(counts[b])]
    order_rng = np.random.default_rng([seed, 0x7A66])
    targets = [targets[i] for i in order_rng.permutation(n_cases)]
    return [_build_case(seed, i, targets[i], tuple(dims)) for i in range(n_cases)]
