"""Synthetic volumes, portable volume I/O, splits, batching and augmentation.

Volume file format (bit-exact across platforms): a UTF-8 JSON sidecar
``{id, shape, spacing, dtype, order}`` next to a raw little-endian payload
file.  ``dtype`` is ``"f32"`` (IEEE-754 binary32, images) or ``"u8"``
(unsigned 8-bit, label masks); ``order`` is always ``"C"``.  A dataset is a
JSON manifest listing case entries with labeled flags.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mcseg.errors import (
    DtypeMismatchError,
    InvalidConfigError,
    InvalidInputError,
    MalformedHeaderError,
    TruncatedPayloadError,
)

DATASET_MANIFEST = "dataset.json"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class Volume:
    """Dense scalar grid with spacing metadata."""

    data: np.ndarray
    spacing: Tuple[float, ...]
    id: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim:
            raise InvalidInputError("spacing length must match volume dimensionality")
        if not np.isfinite(self.data).all():
            raise InvalidInputError(f"volume {self.id!r} contains non-finite values")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


@dataclass
class LabelMask:
    """Per-voxel category labels in {0..C-1}."""

    data: np.ndarray
    spacing: Tuple[float, ...]
    id: str
    num_categories: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim:
            raise InvalidInputError("spacing length must match mask dimensionality")
        if self.num_categories <= 0:
            self.num_categories = max(2, int(self.data.max()) + 1)
        if self.num_categories < 2:
            raise InvalidInputError("a mask needs at least 2 categories")
        if int(self.data.max()) >= self.num_categories:
            raise InvalidInputError("mask values must be < num_categories")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


@dataclass
class Dataset:
    """Ordered cases plus the labeled/unlabeled id partition."""

    cases: List[Tuple[Volume, Optional[LabelMask]]]
    labeled_ids: List[str]
    unlabeled_ids: List[str]

    def __post_init__(self):
        ids = [v.id for v, _ in self.cases]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("case ids must be unique")
        if set(self.labeled_ids) & set(self.unlabeled_ids):
            raise InvalidInputError("labeled and unlabeled ids overlap")
        if set(self.labeled_ids) | set(self.unlabeled_ids) != set(ids):
            raise InvalidInputError("labeled/unlabeled ids must cover all cases")
        by_id = {v.id: m for v, m in self.cases}
        for cid in self.labeled_ids:
            if by_id[cid] is None:
                raise InvalidInputError(f"labeled case {cid!r} has no mask")

    def __len__(self) -> int:
        return len(self.cases)

    def case(self, case_id: str) -> Tuple[Volume, Optional[LabelMask]]:
        for vol, mask in self.cases:
            if vol.id == case_id:
                return vol, mask
        raise KeyError(case_id)


@dataclass
class Batch:
    """One two-stream mini-batch; labeled members come first."""

    images: np.ndarray            # (B, 1, *patch) float32
    masks: Optional[np.ndarray]   # (n_labeled, *patch) uint8 or None
    labeled_flags: np.ndarray     # (B,) bool
    case_ids: List[str] = field(default_factory=list)


@dataclass
class SynthConfig:
    """Controls the synthetic shape generator."""

    num_cases: int = 100
    extents: Tuple[int, ...] = (64, 64)
    noise_sigma: float = 0.5
    shape_family: str = "ellipse"  # "ellipse" | "two_lobe"
    seed: int = 0
    contrast: float = 1.0

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        if len(self.extents) not in (2, 3) or any(e < 16 for e in self.extents):
            raise InvalidConfigError(f"extents must be 2-D/3-D with >=16 voxels per axis, got {self.extents}")
        if self.noise_sigma < 0:
            raise InvalidConfigError("noise_sigma must be >= 0")
        if self.shape_family not in ("ellipse", "two_lobe"):
            raise InvalidConfigError(f"unknown shape_family {self.shape_family!r}")
        if self.num_cases < 1:
            raise InvalidConfigError("num_cases must be >= 1")


def normalize_intensity(data: np.ndarray) -> np.ndarray:
    """Per-case shift/scale to zero mean and unit variance."""
    data = np.asarray(data, dtype=np.float32)
    mean = data.mean(dtype=np.float64)
    std = data.std(dtype=np.float64)
    if std < 1e-12:
        return (data - np.float32(mean)).astype(np.float32)
    return ((data - mean) / std).astype(np.float32)


def _ellipse_mask(extents, center, axes, angle) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(e, dtype=np.float64) for e in extents], indexing="ij")
    # rotate in the principal plane (last two axes)
    u = grids[-2] - center[-2]
    v = grids[-1] - center[-1]
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    ur = cos_a * u + sin_a * v
    vr = -sin_a * u + cos_a * v
    q = (ur / axes[-2]) ** 2 + (vr / axes[-1]) ** 2
    if len(extents) == 3:
        q = q + ((grids[0] - center[0]) / axes[0]) ** 2
    return q <= 1.0


def _random_shape(extents, family: str, rng: np.random.Generator) -> np.ndarray:
    center = [rng.uniform(0.35, 0.65) * e for e in extents]
    axes = [rng.uniform(0.14, 0.30) * e for e in extents]
    angle = rng.uniform(0.0, math.pi)
    mask = _ellipse_mask(extents, center, axes, angle)
    if family == "two_lobe":
        offset = [rng.uniform(-0.18, 0.18) * e for e in extents]
        center2 = [c + o for c, o in zip(center, offset)]
        axes2 = [a * rng.uniform(0.55, 0.9) for a in axes]
        angle2 = rng.uniform(0.0, math.pi)
        mask = mask | _ellipse_mask(extents, center2, axes2, angle2)
    return mask


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Render random smooth shapes with exact masks plus Gaussian noise.

    Deterministic for a fixed seed.  Intensities are normalized per case to
    zero mean / unit variance, the same preprocessing the loader applies.
    """
    rng = np.random.default_rng(cfg.seed)
    spacing = (1.0,) * len(cfg.extents)
    cases: List[Tuple[Volume, Optional[LabelMask]]] = []
    for i in range(cfg.num_cases):
        fg = _random_shape(cfg.extents, cfg.shape_family, rng)
        image = cfg.contrast * fg.astype(np.float64)
        if cfg.noise_sigma > 0:
            image = image + cfg.noise_sigma * rng.standard_normal(cfg.extents)
        cid = f"case_{i:03d}"
        vol = Volume(normalize_intensity(image), spacing, cid)
        mask = LabelMask(fg.astype(np.uint8), spacing, cid, num_categories=2)
        cases.append((vol, mask))
    ids = [v.id for v, _ in cases]
    return Dataset(cases=cases, labeled_ids=ids, unlabeled_ids=[])


def split_labeled(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Deterministic shuffled labeled/unlabeled split.

    The labeled count is round(fraction * len(ds)); masks are dropped from
    unlabeled cases so downstream code cannot leak them.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = len(ds)
    n_labeled = int(round(fraction * n))
    if n_labeled < 1:
        raise InvalidConfigError(f"fraction {fraction} leaves no labeled cases out of {n}")
    order = np.random.default_rng(seed).permutation(n)
    labeled_idx = set(order[:n_labeled].tolist())
    cases: List[Tuple[Volume, Optional[LabelMask]]] = []
    labeled_ids, unlabeled_ids = [], []
    for i, (vol, mask) in enumerate(ds.cases):
        if i in labeled_idx:
            if mask is None:
                raise InvalidConfigError(f"case {vol.id!r} selected as labeled but has no mask")
            cases.append((vol, mask))
            labeled_ids.append(vol.id)
        else:
            cases.append((vol, None))
            unlabeled_ids.append(vol.id)
    return Dataset(cases=cases, labeled_ids=labeled_ids, unlabeled_ids=unlabeled_ids)


def pad_reflect(arr: np.ndarray, patch: Sequence[int]) -> np.ndarray:
    pads = []
    for dim, target in zip(arr.shape, patch):
        short = max(0, target - dim)
        pads.append((short // 2, short - short // 2))
    if any(p != (0, 0) for p in pads):
        arr = np.pad(arr, pads, mode="reflect")
    return arr

def _crop_origin(shape, patch, rng) -> Tuple[int, ...]:
    return tuple(int(rng.integers(0, dim - p + 1)) for dim, p in zip(shape, patch))


def sample_batch(
    ds: Dataset,
    patch: Sequence[int],
    rng: np.random.Generator,
    n_labeled: int = 2,
    n_unlabeled: int = 2,
) -> Batch:
    """Random crops with fixed labeled/unlabeled composition.

    When the unlabeled pool is empty, unlabeled slots are filled from the
    labeled pool with masks withheld (consistency terms still apply).
    """
    patch = tuple(int(p) for p in patch)
    if not ds.labeled_ids:
        raise InvalidConfigError("dataset has no labeled cases")
    labeled_pool = list(ds.labeled_ids)
    unlabeled_pool = list(ds.unlabeled_ids) or labeled_pool
    picks = [(str(cid), True) for cid in rng.choice(labeled_pool, size=n_labeled)] + [
        (str(cid), False) for cid in rng.choice(unlabeled_pool, size=n_unlabeled)
    ]
    images, mask_crops, flags, ids = [], [], [], []
    for cid, labeled in picks:
        vol, mask = ds.case(cid)
        img = pad_reflect(vol.data, patch)
        origin = _crop_origin(img.shape, patch, rng)
        window = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        images.append(img[window])
        if labeled:
            mdat = pad_reflect(mask.data, patch)
            mask_crops.append(mdat[window])
        flags.append(labeled)
        ids.append(cid)
    stacked = np.stack(images).astype(np.float32)[:, None]
    masks = np.stack(mask_crops).astype(np.uint8) if mask_crops else None
    return Batch(images=stacked, masks=masks, labeled_flags=np.array(flags), case_ids=ids)


def sample_flip_rot(ndim: int, rng: np.random.Generator) -> Tuple[Tuple[bool, ...], int]:
    """Draw one transform from {flip per axis} x {rot 0/90/180/270}."""
    flips = tuple(bool(rng.integers(0, 2)) for _ in range(ndim))
    rot = int(rng.integers(0, 4))
    return flips, rot


def apply_flip_rot(arr: np.ndarray, flips: Sequence[bool], rot: int) -> np.ndarray:
    """Apply axis flips then a right-angle rotation in the principal plane."""
    for axis, flip in enumerate(flips):
        if flip:
            arr = np.flip(arr, axis=axis)
    if rot % 4:
        arr = np.rot90(arr, k=rot % 4, axes=(arr.ndim - 2, arr.ndim - 1))
    return np.ascontiguousarray(arr)


def invert_flip_rot(arr: np.ndarray, flips: Sequence[bool], rot: int) -> np.ndarray:
    """Inverse of apply_flip_rot (rotate back, then unflip)."""
    if rot % 4:
        arr = np.rot90(arr, k=-(rot % 4), axes=(arr.ndim - 2, arr.ndim - 1))
    for axis, flip in enumerate(flips):
        if flip:
            arr = np.flip(arr, axis=axis)
    return np.ascontiguousarray(arr)


def augment(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    rng: np.random.Generator,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Jointly transform an image and its mask by one sampled flip/rotation.

    The principal-plane rotation requires the last two axes to be square.
    """
    flips, rot = sample_flip_rot(image.ndim, rng)
    out_image = apply_flip_rot(image, flips, rot)
    out_mask = apply_flip_rot(mask, flips, rot) if mask is not None else None
    return out_image, out_mask


# ---------------------------------------------------------------------------
# volume + dataset I/O


def _sidecar_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    path = Path(path)
    sidecar = path if path.suffix == ".json" else Path(str(path) + ".json")
    return sidecar, sidecar.with_suffix(".raw")


def save_volume(path: Union[str, Path], obj: Union[Volume, LabelMask]) -> Path:
    """Write a volume or mask as sidecar JSON plus raw little-endian payload."""
    sidecar, payload = _sidecar_paths(path)
    if isinstance(obj, LabelMask):
        dtype_tag, arr = "u8", np.ascontiguousarray(obj.data, dtype=_DTYPES["u8"])
    else:
        dtype_tag, arr = "f32", np.ascontiguousarray(obj.data, dtype=_DTYPES["f32"])
    header = {
        "id": obj.id,
        "shape": list(arr.shape),
        "spacing": list(obj.spacing),
        "dtype": dtype_tag,
        "order": "C",
    }
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    sidecar.write_text(json.dumps(header, indent=1) + "\n", encoding="utf-8")
    payload.write_bytes(arr.tobytes(order="C"))
    return sidecar


def load_volume(path: Union[str, Path]) -> Union[Volume, LabelMask]:
    """Inverse of save_volume; raises distinct errors per failure mode."""
    sidecar, payload = _sidecar_paths(path)
    try:
        header = json.loads(sidecar.read_text(encoding="utf-8"))
    except (ValueError, OSError) as exc:
        raise MalformedHeaderError(f"{sidecar}: unreadable header ({exc})") from exc
    for key in ("id", "shape", "spacing", "dtype", "order"):
        if key not in header:
            raise MalformedHeaderError(f"{sidecar}: missing key {key!r}")
    if header["order"] != "C":
        raise MalformedHeaderError(f"{sidecar}: unsupported order {header['order']!r}")
    if header["dtype"] not in _DTYPES:
        raise DtypeMismatchError(f"{sidecar}: unsupported dtype {header['dtype']!r}")
    shape = tuple(int(s) for s in header["shape"])
    dtype = _DTYPES[header["dtype"]]
    raw = payload.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise TruncatedPayloadError(
            f"{payload}: payload holds {len(raw)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    spacing = tuple(float(s) for s in header["spacing"])
    if header["dtype"] == "u8":
        return LabelMask(arr.copy(), spacing, str(header["id"]))
    return Volume(arr.astype(np.float32), spacing, str(header["id"]))


def save_dataset(ds: Dataset, out_dir: Union[str, Path]) -> Path:
    """Write all case files plus the dataset manifest into a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    labeled = set(ds.labeled_ids)
    for vol, mask in ds.cases:
        img_name = f"{vol.id}_img.json"
        save_volume(out_dir / img_name, vol)
        mask_name = None
        if mask is not None:
            mask_name = f"{vol.id}_mask.json"
            save_volume(out_dir / mask_name, mask)
        entries.append(
            {"id": vol.id, "image": img_name, "mask": mask_name, "labeled": vol.id in labeled}
        )
    manifest = out_dir / DATASET_MANIFEST
    manifest.write_text(json.dumps({"cases": entries}, indent=1) + "\n", encoding="utf-8")
    return manifest


def load_dataset(path: Union[str, Path], normalize: bool = True) -> Dataset:
    """Load a dataset manifest; per-case intensity normalization is applied
    here unless disabled."""
    path = Path(path)
    manifest = path / DATASET_MANIFEST if path.is_dir() else path
    try:
        spec = json.loads(manifest.read_text(encoding="utf-8"))
        entries = spec["cases"]
    except (ValueError, KeyError, OSError) as exc:
        raise MalformedHeaderError(f"{manifest}: unreadable dataset manifest ({exc})") from exc
    base = manifest.parent
    cases, labeled_ids, unlabeled_ids = [], [], []
    for entry in entries:
        vol = load_volume(base / entry["image"])
        if not isinstance(vol, Volume):
            raise DtypeMismatchError(f"{entry['image']}: expected an f32 image volume")
        if normalize:
            vol = Volume(normalize_intensity(vol.data), vol.spacing, vol.id)
        mask = None
        if entry.get("mask"):
            mask = load_volume(base / entry["mask"])
            if not isinstance(mask, LabelMask):
                raise DtypeMismatchError(f"{entry['mask']}: expected a u8 label mask")
        cases.append((vol, mask))
        (labeled_ids if entry.get("labeled") else unlabeled_ids).append(vol.id)
    return Dataset(cases=cases, labeled_ids=labeled_ids, unlabeled_ids=unlabeled_ids)
