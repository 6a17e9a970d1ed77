"""Volumes, the lesion phantom, 2.5-D patch extraction and sliding-window synthesis."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "PatchPair",
    "PatchDataset",
    "PhantomSpec",
    "PhantomError",
    "VolumeFormatError",
    "InsufficientSlicesError",
    "ConfigurationError",
    "generate_phantom",
    "global_mapping",
    "extract_patches",
    "make_dataset",
    "synthesize_volume",
    "save_volume",
    "load_volume",
    "normalize_intensity",
    "denormalize_intensity",
    "load_phantom_spec",
    "save_phantom_spec",
]

STACK = 5
HALF = STACK // 2


class PhantomError(RuntimeError):
    """Lesions could not be placed within the retry budget."""


class VolumeFormatError(ValueError):
    pass


class InsufficientSlicesError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class Volume:
    """A (depth, height, width) scalar image."""

    voxels: np.ndarray
    modality_tag: str = ""
    intensity_range: tuple = None
    original_range: Optional[tuple] = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"a Volume needs 3-D voxels, got shape {self.voxels.shape}")
        if self.intensity_range is None:
            self.intensity_range = (float(self.voxels.min()), float(self.voxels.max()))

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    @property
    def shape(self) -> tuple:
        return self.voxels.shape


@dataclass
class PatchPair:
    source: np.ndarray  # (5, H, W)
    target: np.ndarray  # (1, H, W)
    center: tuple       # (z, y, x) of the patch centre
    mask: Optional[np.ndarray] = None


@dataclass
class PatchDataset:
    """Stacked patch pairs: source (N, 5, H, W), target (N, 1, H, W), optional mask."""

    source: np.ndarray
    target: np.ndarray
    mask: Optional[np.ndarray] = None

    def __len__(self):
        return self.source.shape[0]

    @classmethod
    def from_pairs(cls, pairs: Sequence[PatchPair]) -> "PatchDataset":
        if not pairs:
            raise ValueError("empty patch list")
        mask = None
        if all(p.mask is not None for p in pairs):
            mask = np.stack([p.mask for p in pairs])
        return cls(np.stack([p.source for p in pairs]), np.stack([p.target for p in pairs]), mask)

    def subset(self, idx) -> "PatchDataset":
        return PatchDataset(self.source[idx], self.target[idx], None if self.mask is None else self.mask[idx])


# ---------------------------------------------------------------------------
# phantom


@dataclass
class PhantomSpec:
    shape: tuple = (16, 64, 64)
    blob_count: int = 24
    blob_sigma: float = 6.0
    shape_count: int = 6
    lesion_count: int = 2
    lesion_radius: tuple = (3.0, 6.0)
    lesion_offset: float = 0.25
    texture_amplitude: float = 0.15
    texture_frequency: float = 0.9
    dilation: float = 1.0
    noise: float = 0.01
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.lesion_radius = tuple(float(r) for r in self.lesion_radius)


def save_phantom_spec(spec: PhantomSpec, path: str):
    with open(path, "w") as fh:
        json.dump(asdict(spec), fh, indent=2)


def load_phantom_spec(path: str) -> PhantomSpec:
    with open(path) as fh:
        raw = json.load(fh)
    known = set(PhantomSpec.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown phantom spec keys: {sorted(unknown)}")
    return PhantomSpec(**raw)


def global_mapping(s: np.ndarray) -> np.ndarray:
    """Smooth nonlinear contrast map from source to target intensities on [0, 1]."""
    return 0.15 + 0.8 * (1.0 - s) ** 2 + 0.35 * s ** 3


def _ellipsoid(grid, center, radii):
    zz, yy, xx = grid
    return (((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2) <= 1.0


def generate_phantom(spec: PhantomSpec):
    """Return ``(source, target, lesion_mask)`` volumes for ``spec``.

    The source is smooth random anatomy plus a few constant-intensity shapes,
    rescaled to [0, 1]. Lesions are ellipsoids that are faintly brighter in
    the source. The target applies :func:`global_mapping` everywhere except
    a slightly dilated region around each lesion, where the contrast is
    inverted and a source-dependent texture is added.
    """
    d, h, w = spec.shape
    if min(spec.shape) < 16:
        raise ValueError(f"phantom extents must be >= 16 per axis, got {spec.shape}")
    rng = np.random.default_rng(spec.seed)
    grid = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")

    anatomy = np.zeros(spec.shape)
    impulses = rng.integers(0, [d, h, w], size=(spec.blob_count, 3))
    for (z, y, x), a in zip(impulses, rng.uniform(0.5, 1.5, spec.blob_count)):
        anatomy[z, y, x] += a
    anatomy = ndimage.gaussian_filter(anatomy, sigma=(spec.blob_sigma / 2, spec.blob_sigma, spec.blob_sigma),
                                      mode="reflect")
    anatomy = (anatomy - anatomy.min()) / max(np.ptp(anatomy), 1e-12)
    for _ in range(spec.shape_count):
        c = rng.uniform([0, 0, 0], [d, h, w])
        r = rng.uniform([2, 4, 4], [5, 12, 12])
        anatomy[_ellipsoid(grid, c, r)] = rng.uniform(0.2, 0.9)
    source = 0.1 + 0.8 * anatomy

    core = np.zeros(spec.shape, dtype=bool)
    region = np.zeros(spec.shape, dtype=bool)
    placed = 0
    tries = 0
    rmin, rmax = spec.lesion_radius
    while placed < spec.lesion_count:
        tries += 1
        if tries > spec.max_retries:
            raise PhantomError(f"placed {placed} of {spec.lesion_count} lesions after {spec.max_retries} attempts")
        radii = rng.uniform(rmin, rmax, size=3)
        radii[0] = min(radii[0], (d - 2 * spec.dilation - 2) / 2)
        outer = radii + spec.dilation
        lo = np.ceil(outer)
        hi = np.array([d, h, w]) - 1 - np.ceil(outer)
        if np.any(hi < lo):
            continue
        c = rng.uniform(lo, hi)
        blob = _ellipsoid(grid, c, outer)
        if np.any(blob & region):
            continue
        core |= _ellipsoid(grid, c, radii)
        region |= blob
        placed += 1

    source = np.where(core, np.clip(source + spec.lesion_offset, 0.0, 1.0), source)
    # map the stored precision so target == global_mapping(stored source) holds exactly
    source = source.astype(np.float32).astype(np.float64)
    target = global_mapping(source)
    if spec.lesion_count:
        texture = spec.texture_amplitude * np.sin(2 * np.pi * spec.texture_frequency * (grid[1] + grid[2]) / 4.0
                                                   + 6.0 * source)
        lesion_target = 1.0 - global_mapping(source) + texture
        target = np.where(region, lesion_target, target)
    if spec.noise > 0:
        source = source + spec.noise * rng.standard_normal(spec.shape)
        target = target + spec.noise * rng.standard_normal(spec.shape)
    source = source.astype(np.float32)
    target = target.astype(np.float32)
    return (Volume(source, "source"), Volume(target, "target"),
            Volume(region.astype(np.float32), "lesion_mask"))


# ---------------------------------------------------------------------------
# patches


def _stack_indices(z: int, depth: int) -> np.ndarray:
    return np.clip(np.arange(z - HALF, z + HALF + 1), 0, depth - 1)


def extract_patches(source: Volume, target: Volume, count: int, patch_hw: int = 64,
                    rng: Optional[np.random.Generator] = None, mask: Optional[Volume] = None) -> list[PatchPair]:
    """Random aligned 2.5-D patch pairs with centres uniform over valid positions."""
    if source.shape != target.shape:
        raise ValueError(f"source {source.shape} and target {target.shape} are not aligned")
    d, h, w = source.shape
    if d < STACK:
        raise InsufficientSlicesError(f"need at least {STACK} slices for 2.5-D stacks, volume has {d}")
    if patch_hw > h or patch_hw > w:
        raise ValueError(f"patch size {patch_hw} does not fit in {h}x{w} slices")
    rng = rng if rng is not None else np.random.default_rng(0)
    zs = rng.integers(HALF, d - HALF, size=count)
    ys = rng.integers(0, h - patch_hw + 1, size=count)
    xs = rng.integers(0, w - patch_hw + 1, size=count)
    half = patch_hw // 2
    pairs = []
    for z, y, x in zip(zs, ys, xs):
        sl = (slice(y, y + patch_hw), slice(x, x + patch_hw))
        pairs.append(PatchPair(
            source=source.voxels[(slice(z - HALF, z + HALF + 1),) + sl].copy(),
            target=target.voxels[(slice(z, z + 1),) + sl].copy(),
            center=(int(z), int(y + half), int(x + half)),
            mask=None if mask is None else mask.voxels[(slice(z, z + 1),) + sl].copy(),
        ))
    return pairs


def make_dataset(spec: PhantomSpec, count: int = 300, patch_hw: int = 64, seed: int = 0,
                 normalize: bool = True) -> PatchDataset:
    """Generate a phantom and draw ``count`` patch pairs from it."""
    src, tgt, mask = generate_phantom(spec)
    if normalize:
        src, tgt = normalize_intensity(src), normalize_intensity(tgt)
    pairs = extract_patches(src, tgt, count, patch_hw, np.random.default_rng(seed), mask=mask)
    return PatchDataset.from_pairs(pairs)


def _windows(n: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def synthesize_volume(gen: Union[Callable, object], source: Volume, patch_hw: int = 64, stride: int = 32,
                      batch_size: int = 16) -> Volume:
    """Apply ``gen`` over overlapping windows of every slice and average the overlaps.

    ``gen`` is a :class:`~dualsynth.networks.GeneratorNet` (run in eval mode)
    or any callable mapping a (B, 5, h, w) array to (B, 1, h, w). Slices near
    the volume boundary use edge-replicated stacks.
    """
    d, h, w = source.shape
    if d < STACK:
        raise InsufficientSlicesError(f"need at least {STACK} slices, volume has {d}")
    if stride < 1 or stride > patch_hw:
        raise ConfigurationError(f"stride {stride} leaves coverage gaps for patch size {patch_hw}")
    if patch_hw > h or patch_hw > w:
        raise ConfigurationError(f"patch size {patch_hw} exceeds slice size {h}x{w}")
    fn = _as_callable(gen)
    vox = source.voxels
    acc = np.zeros((d, h, w), dtype=np.float64)
    cnt = np.zeros((d, h, w), dtype=np.float64)
    jobs = [(z, y, x) for z in range(d) for y in _windows(h, patch_hw, stride) for x in _windows(w, patch_hw, stride)]
    for i in range(0, len(jobs), batch_size):
        chunk = jobs[i:i + batch_size]
        batch = np.stack([vox[_stack_indices(z, d), y:y + patch_hw, x:x + patch_hw] for z, y, x in chunk])
        out = np.asarray(fn(batch))
        for (z, y, x), o in zip(chunk, out):
            acc[z, y:y + patch_hw, x:x + patch_hw] += o[0]
            cnt[z, y:y + patch_hw, x:x + patch_hw] += 1.0
    return Volume((acc / cnt).astype(vox.dtype), "synthetic")


def _as_callable(gen):
    from .networks import GeneratorNet, generator_forward
    from .autodiff import no_grad

    if isinstance(gen, GeneratorNet):
        def run(batch):
            was = gen.training
            gen.eval()
            try:
                with no_grad():
                    return generator_forward(gen, batch.astype(gen.dtype)).data
            finally:
                gen.training = was
        return run
    return gen


# ---------------------------------------------------------------------------
# file format and intensity normalization

_SIDECAR_VERSION = 1


def _paths(path: str):
    base = path[:-5] if path.endswith(".json") else path
    return base + ".json", base + ".raw"


def save_volume(v: Volume, path: str) -> str:
    """Write ``<path>.raw`` (float32 little-endian, z-major) and ``<path>.json``."""
    meta_path, raw_path = _paths(path)
    os.makedirs(os.path.dirname(os.path.abspath(meta_path)), exist_ok=True)
    data = np.ascontiguousarray(v.voxels, dtype="<f4")
    data.tofile(raw_path)
    meta = {
        "format_version": _SIDECAR_VERSION,
        "extents": [int(s) for s in v.shape],
        "dtype": "float32",
        "byte_order": "little",
        "order": "z-major",
        "intensity_range": [float(data.min()), float(data.max())],
        "modality_tag": v.modality_tag,
        "original_range": None if v.original_range is None else [float(x) for x in v.original_range],
        "payload": os.path.basename(raw_path),
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2)
    return meta_path


def load_volume(path: str) -> Volume:
    meta_path, raw_path = _paths(path)
    with open(meta_path) as fh:
        meta = json.load(fh)
    raw_path = os.path.join(os.path.dirname(meta_path), meta.get("payload", os.path.basename(raw_path)))
    extents = tuple(int(e) for e in meta["extents"])
    data = np.fromfile(raw_path, dtype="<f4")
    expected = int(np.prod(extents))
    if data.size != expected:
        raise VolumeFormatError(f"sidecar declares {expected} voxels {extents} but payload holds {data.size}")
    data = data.reshape(extents).astype(np.float32)
    rng_found = (float(data.min()), float(data.max()))
    stored = tuple(meta["intensity_range"])
    if rng_found != stored:
        raise VolumeFormatError(f"stored intensity range {stored} does not match payload range {rng_found}")
    orig = meta.get("original_range")
    return Volume(data, meta.get("modality_tag", ""), rng_found, None if orig is None else tuple(orig))


def normalize_intensity(v: Volume) -> Volume:
    """Linear map of the intensity range onto [-1, 1]; keeps the range for inversion."""
    lo, hi = (float(v.voxels.min()), float(v.voxels.max()))
    if not hi > lo:
        raise ValueError(f"cannot normalize a constant volume (range [{lo}, {hi}])")
    vox = (2.0 * (v.voxels.astype(np.float64) - lo) / (hi - lo) - 1.0).astype(v.voxels.dtype)
    return Volume(vox, v.modality_tag, original_range=(lo, hi))


def denormalize_intensity(v: Volume, original_range: Optional[tuple] = None) -> Volume:
    rng_ = original_range if original_range is not None else v.original_range
    if rng_ is None:
        raise ValueError("volume carries no original intensity range")
    lo, hi = rng_
    vox = ((v.voxels.astype(np.float64) + 1.0) * 0.5 * (hi - lo) + lo).astype(v.voxels.dtype)
    return Volume(vox, v.modality_tag)
