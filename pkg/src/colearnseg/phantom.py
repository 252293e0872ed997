"""Synthetic PET-CT slice phantoms with analytically known ground truth.

Each slice renders a thorax-like geometry: a body ellipse, two low-intensity
lung fields, a brighter central mediastinum, soft-tissue blobs inside the
lungs (tumors, plus look-alike distractors with no uptake), and a hot
cardiac-like region that mimics physiological uptake. The cardiac region is
never labeled tumor: it is the confound a fusion network must learn to
suppress, and the trap for any PET-threshold-only segmentation.

Classes: other=0, lungs=1, mediastinum=2, tumor=3.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, DataError
from .pgm import read_pgm, write_pgm

CLASS_OTHER, CLASS_LUNGS, CLASS_MEDIASTINUM, CLASS_TUMOR = 0, 1, 2, 3
CLASS_NAMES = {CLASS_OTHER: "other", CLASS_LUNGS: "lungs",
               CLASS_MEDIASTINUM: "mediastinum", CLASS_TUMOR: "tumors"}

CT_AIR = 0.02
CT_LUNG = 0.15
CT_SOFT_BLOB = 0.40   # tumors and their CT look-alikes
CT_BODY = 0.50
CT_MEDIASTINUM = 0.70

PET_LUNG = 0.3
PET_BODY = 0.5
PET_MEDIASTINUM = 0.8

# radial uptake falls to 40% of peak exactly at the blob radius, so the
# standard 40%-of-peak connected threshold recovers the labeled disc
_FALLOFF = np.log(2.5)


@dataclass
class TumorBlob:
    cy: float
    cx: float
    radius: float
    peak_suv: float


@dataclass
class PhantomSpec:
    image_size: int = 64
    studies: int = 1
    slices_per_study: int = 2
    tumor_count: tuple = (1, 3)
    peak_suv: tuple = (5.0, 20.0)
    heart_peak_suv: tuple = (6.0, 12.0)
    ct_noise_sigma: float = 0.02
    pet_noise_sigma: float = 0.1
    seed: int = 0
    tumors: list | None = None  # explicit TumorBlob placement overriding the draw

    def __post_init__(self):
        if self.image_size % 16:
            raise ConfigError(f"image_size must be divisible by 16, got {self.image_size}")
        lo, hi = self.tumor_count
        if not (1 <= lo <= hi <= 7):
            raise ConfigError(f"tumor_count range must lie within [1, 7], got {self.tumor_count}")
        lo, hi = self.peak_suv
        if not (5.0 <= lo <= hi <= 20.0):
            raise ConfigError(f"peak_suv range must lie within [5, 20], got {self.peak_suv}")
        if self.slices_per_study < 1 or self.studies < 1:
            raise ConfigError("studies and slices_per_study must be >= 1")


@dataclass
class StudySlice:
    """A registered CT/PET slice pair with its per-pixel ground truth."""

    ct: np.ndarray        # [h,w] float32 grayscale in [0,1]
    pet_suv: np.ndarray   # [h,w] float32 nonnegative SUV
    labels: np.ndarray    # [h,w] uint8 in {0..3}
    meta: dict = field(default_factory=dict)


def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _radial_uptake(size: int, blob: TumorBlob) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    r2 = ((yy - blob.cy) ** 2 + (xx - blob.cx) ** 2) / (blob.radius ** 2)
    return blob.peak_suv * np.exp(-_FALLOFF * r2)


def _inside(mask: np.ndarray, blob: TumorBlob) -> bool:
    disc = _ellipse_mask(mask.shape[0], blob.cy, blob.cx, blob.radius, blob.radius)
    return bool((disc & ~mask).sum() == 0)


def generate_study(spec: PhantomSpec, study_index: int = 0) -> list:
    """Render the slices of one study, deterministic in (spec.seed, study_index)."""
    rng = np.random.default_rng((spec.seed, study_index))
    n = spec.image_size
    # per-study anatomy jitter
    body_ry = n * (0.46 + rng.uniform(-0.01, 0.01))
    body_rx = n * (0.40 + rng.uniform(-0.01, 0.01))
    lung_dy = rng.uniform(-0.01, 0.01)
    slices = []
    for slice_index in range(spec.slices_per_study):
        body = _ellipse_mask(n, n * 0.5, n * 0.5, body_ry, body_rx)
        lungs = np.zeros((n, n), dtype=bool)
        for side in (-1, 1):
            lungs |= _ellipse_mask(
                n, n * (0.48 + lung_dy + rng.uniform(-0.005, 0.005)),
                n * (0.5 + side * 0.21), n * 0.26, n * 0.135)
        mediastinum = _ellipse_mask(n, n * 0.52, n * 0.5, n * 0.21, n * 0.105)
        mediastinum &= ~lungs
        heart_blob = TumorBlob(
            cy=n * (0.60 + rng.uniform(-0.01, 0.01)),
            cx=n * (0.52 + rng.uniform(-0.01, 0.01)),
            radius=n * 0.075,
            peak_suv=float(rng.uniform(*spec.heart_peak_suv)))
        heart = _ellipse_mask(n, heart_blob.cy, heart_blob.cx,
                              heart_blob.radius, heart_blob.radius)

        if spec.tumors is not None:
            tumors = list(spec.tumors)
            for blob in tumors:
                if not _inside(body, blob):
                    raise DataError(
                        f"tumor at ({blob.cy:.1f}, {blob.cx:.1f}) lies outside the body")
        else:
            tumors = _draw_tumors(spec, rng, n, lungs)

        distractors = _draw_distractors(rng, n, lungs, tumors)

        labels = np.zeros((n, n), dtype=np.uint8)
        labels[lungs] = CLASS_LUNGS
        labels[mediastinum] = CLASS_MEDIASTINUM
        labels[heart] = CLASS_OTHER  # physiological uptake is never tumor
        tumor_mask = np.zeros((n, n), dtype=bool)
        for blob in tumors:
            tumor_mask |= _ellipse_mask(n, blob.cy, blob.cx, blob.radius, blob.radius)
        labels[tumor_mask] = CLASS_TUMOR

        ct = np.full((n, n), CT_AIR, dtype=np.float64)
        ct[body] = CT_BODY
        ct[lungs] = CT_LUNG
        ct[mediastinum] = CT_MEDIASTINUM
        ct[heart] = CT_MEDIASTINUM  # CT cannot tell the heart from the mediastinum
        for blob in distractors + tumors:
            disc = _ellipse_mask(n, blob.cy, blob.cx, blob.radius, blob.radius)
            ct[disc] = CT_SOFT_BLOB
        ct += rng.normal(0.0, spec.ct_noise_sigma, size=ct.shape)
        ct = np.clip(ct, 0.0, 1.0)

        pet = np.zeros((n, n), dtype=np.float64)
        pet[body] = PET_BODY
        pet[lungs] = PET_LUNG
        pet[mediastinum | heart] = PET_MEDIASTINUM
        for blob in [heart_blob] + tumors:
            pet = np.maximum(pet, _radial_uptake(n, blob))
        pet += rng.normal(0.0, spec.pet_noise_sigma, size=pet.shape)
        pet = np.clip(pet, 0.0, None)
        pet[~body] = 0.0

        meta = {
            "study": study_index,
            "slice": slice_index,
            "body": {"cy": n * 0.5, "cx": n * 0.5, "ry": body_ry, "rx": body_rx},
            "tumors": [asdict(b) for b in tumors],
            "heart": asdict(heart_blob),
        }
        slices.append(StudySlice(ct=ct.astype(np.float32),
                                 pet_suv=pet.astype(np.float32),
                                 labels=labels, meta=meta))
    return slices


def _draw_tumors(spec, rng, n, lungs, max_tries=200):
    count = int(rng.integers(spec.tumor_count[0], spec.tumor_count[1] + 1))
    blobs = []
    for _ in range(count):
        for _ in range(max_tries):
            blob = TumorBlob(
                cy=float(rng.uniform(n * 0.2, n * 0.8)),
                cx=float(rng.uniform(n * 0.15, n * 0.85)),
                radius=float(rng.uniform(n * 0.045, n * 0.09)),
                peak_suv=float(rng.uniform(*spec.peak_suv)))
            clear = all((blob.cy - o.cy) ** 2 + (blob.cx - o.cx) ** 2
                        > (blob.radius + o.radius + 2) ** 2 for o in blobs)
            if clear and _inside(lungs, blob):
                blobs.append(blob)
                break
    if not blobs:
        raise DataError("could not place any tumor inside the lung fields")
    return blobs


def _draw_distractors(rng, n, lungs, tumors, max_tries=100):
    """CT look-alike blobs with no uptake, labeled as lung tissue."""
    blobs = []
    for _ in range(int(rng.integers(1, 3))):
        for _ in range(max_tries):
            blob = TumorBlob(
                cy=float(rng.uniform(n * 0.2, n * 0.8)),
                cx=float(rng.uniform(n * 0.15, n * 0.85)),
                radius=float(rng.uniform(n * 0.035, n * 0.06)),
                peak_suv=0.0)
            clear = all((blob.cy - o.cy) ** 2 + (blob.cx - o.cx) ** 2
                        > (blob.radius + o.radius + 2) ** 2 for o in tumors + blobs)
            if clear and _inside(lungs, blob):
                blobs.append(blob)
                break
    return blobs


def generate_dataset(spec: PhantomSpec) -> list:
    """All studies of the spec: a list of per-study slice lists."""
    return [generate_study(spec, i) for i in range(spec.studies)]


# ---------------------------------------------------------------------------
# ground-truth pipeline operations
# ---------------------------------------------------------------------------


def suv_normalize(raw_pet: np.ndarray, dose_coefficient: float) -> np.ndarray:
    """Linear rescale of raw uptake by a study-specific coefficient."""
    if dose_coefficient <= 0:
        raise DataError(f"dose coefficient must be positive, got {dose_coefficient}")
    return (raw_pet * np.float32(dose_coefficient)).astype(np.float32)


_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def connected_threshold_tumor(pet_suv: np.ndarray, seed_point: tuple,
                              fraction: float = 0.4) -> np.ndarray:
    """Flood fill from a seed over pixels >= 40% of the component's peak uptake.

    The peak is refined iteratively: grow the component at the current
    threshold, then re-read its maximum, until a fixed point. The component's
    values never exceed that peak.
    """
    sy, sx = int(seed_point[0]), int(seed_point[1])
    if pet_suv[sy, sx] <= 0:
        warnings.warn("seed in zero-uptake region; returning empty mask")
        return np.zeros_like(pet_suv, dtype=bool)
    peak = float(pet_suv[sy, sx])
    mask = None
    for _ in range(64):
        eligible = pet_suv >= fraction * peak
        comps, _ = ndimage.label(eligible, structure=_FOUR_CONN)
        mask = comps == comps[sy, sx]
        new_peak = float(pet_suv[mask].max())
        if new_peak == peak:
            break
        peak = new_peak
    if mask.all():
        warnings.warn("connected threshold is degenerate: region covers the whole image")
    return mask


def isodata_threshold(ct: np.ndarray, tol: float = 1e-4, max_iter: int = 100) -> float:
    """Iterative optimal threshold: midpoint of foreground/background means.

    Falls back to 0.5 with a warning when the iteration cannot converge
    (degenerate, e.g. constant images).
    """
    t = float(ct.mean())
    for _ in range(max_iter):
        fg = ct >= t
        if fg.all() or not fg.any():
            break
        t_new = 0.5 * (float(ct[fg].mean()) + float(ct[~fg].mean()))
        if abs(t_new - t) < tol:
            return t_new
        t = t_new
    warnings.warn("adaptive threshold did not converge; falling back to 0.5")
    return 0.5


def adaptive_threshold_lungs(ct: np.ndarray, tol: float = 1e-4,
                             max_iter: int = 100) -> np.ndarray:
    """Optimal-threshold the CT, then keep interior low-intensity regions.

    Dark connected components that touch the image border (outside air) are
    discarded; what remains are the lung fields, left and right separated by
    the mediastinum.
    """
    t = isodata_threshold(ct, tol=tol, max_iter=max_iter)
    dark = ct < t
    comps, count = ndimage.label(dark, structure=_FOUR_CONN)
    border = np.unique(np.concatenate([comps[0], comps[-1], comps[:, 0], comps[:, -1]]))
    mask = np.zeros_like(dark)
    for label in range(1, count + 1):
        if label in border:
            continue
        comp = comps == label
        if comp.sum() >= 8:  # speckles from noise are not lung fields
            mask |= comp
    return mask


def kfold_split(studies: list, k: int, seed: int = 0) -> list:
    """Study-level partition into k (train, test) pairs, disjoint and covering."""
    if k < 1 or k > len(studies):
        raise ContractError(f"k must lie in 1..{len(studies)}, got {k}")
    order = np.random.default_rng(seed).permutation(len(studies))
    groups = np.array_split(order, k)
    folds = []
    for g in groups:
        test_idx = set(int(i) for i in g)
        train = [studies[i] for i in range(len(studies)) if i not in test_idx]
        test = [studies[i] for i in range(len(studies)) if i in test_idx]
        folds.append((train, test))
    return folds


# ---------------------------------------------------------------------------
# on-disk study bundles
# ---------------------------------------------------------------------------

PET_SCALE = 1000.0  # stored SUV is scaled by 1000 into uint16


def save_study_bundle(study_dir: str, slices: list, spec: PhantomSpec,
                      study_index: int) -> None:
    os.makedirs(study_dir, exist_ok=True)
    for i, s in enumerate(slices):
        ct16 = np.round(np.clip(s.ct, 0, 1) * 65535).astype(np.uint16)
        pet16 = np.round(np.clip(s.pet_suv * PET_SCALE, 0, 65535)).astype(np.uint16)
        write_pgm(os.path.join(study_dir, f"ct_{i:04d}.pgm"), ct16)
        write_pgm(os.path.join(study_dir, f"pet_{i:04d}.pgm"), pet16)
        write_pgm(os.path.join(study_dir, f"labels_{i:04d}.pgm"), s.labels.astype(np.uint8))
    manifest = {
        "spec": _spec_dict(spec),
        "seed": spec.seed,
        "study_index": study_index,
        "slice_count": len(slices),
        "meta": [s.meta for s in slices],
    }
    tmp = os.path.join(study_dir, "study.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(study_dir, "study.json"))


def load_study_bundle(study_dir: str) -> list:
    with open(os.path.join(study_dir, "study.json")) as fh:
        manifest = json.load(fh)
    slices = []
    metas = manifest.get("meta") or [{} for _ in range(manifest["slice_count"])]
    for i in range(manifest["slice_count"]):
        ct = read_pgm(os.path.join(study_dir, f"ct_{i:04d}.pgm")).astype(np.float32) / 65535.0
        pet = read_pgm(os.path.join(study_dir, f"pet_{i:04d}.pgm")).astype(np.float32) / PET_SCALE
        labels = read_pgm(os.path.join(study_dir, f"labels_{i:04d}.pgm")).astype(np.uint8)
        if labels.max() > CLASS_TUMOR:
            raise DataError(f"{study_dir}: label map holds classes above {CLASS_TUMOR}")
        slices.append(StudySlice(ct=ct, pet_suv=pet, labels=labels, meta=metas[i]))
    return slices


def save_dataset_bundle(out_dir: str, spec: PhantomSpec) -> list:
    """Generate and write every study; returns the in-memory dataset."""
    os.makedirs(out_dir, exist_ok=True)
    dataset = []
    for idx in range(spec.studies):
        slices = generate_study(spec, idx)
        save_study_bundle(os.path.join(out_dir, f"study_{idx:04d}"), slices, spec, idx)
        dataset.append(slices)
    manifest = {"spec": _spec_dict(spec), "studies": spec.studies,
                "slices_per_study": spec.slices_per_study}
    tmp = os.path.join(out_dir, "dataset.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "dataset.json"))
    return dataset


def load_dataset_bundle(root: str) -> list:
    names = sorted(d for d in os.listdir(root)
                   if d.startswith("study_") and os.path.isdir(os.path.join(root, d)))
    if not names:
        raise DataError(f"{root}: no study bundles found")
    return [load_study_bundle(os.path.join(root, d)) for d in names]


def _spec_dict(spec: PhantomSpec) -> dict:
    d = asdict(spec)
    if d.get("tumors"):
        d["tumors"] = [asdict(b) if isinstance(b, TumorBlob) else b for b in spec.tumors]
    return d
