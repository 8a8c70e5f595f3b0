"""Volumes: synthetic generation, the ``.vol`` file format, resampling and two-view cropping."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError, VolumeFormatError

Triple = tuple[int, int, int]

FAMILIES = ("sphere", "cube", "shell")
CUBE_EXTENTS = ("equal-volume", "radius")

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _triple(values, name: str, cast=int) -> tuple:
    values = tuple(cast(v) for v in values)
    if len(values) != 3:
        raise ValidationError(f"{name}: expected 3 components, got {len(values)}")
    return values


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.spacing = _triple(self.spacing, "spacing", float)
        if self.data.ndim != 3:
            raise ValidationError(f"data: expected a 3D array, got ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise ValidationError(f"shape: every component must be >= 1, got {self.data.shape}")
        if min(self.spacing) <= 0:
            raise ValidationError(f"spacing: every component must be > 0, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise ValidationError("data: contains non-finite intensities")

    @property
    def shape(self) -> Triple:
        return tuple(self.data.shape)


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic volume.

    The class id picks the lesion geometry: 0 sphere, 1 cube, 2 hollow shell.
    ``cube_extent="equal-volume"`` sizes the cube to the volume of the sphere of
    the same radius, so total lesion mass cannot separate spheres from cubes;
    ``"radius"`` makes it the L-infinity ball (half-side = radius).
    """

    shape: Triple = (32, 32, 32)
    num_lesions: int = 2
    lesion_radius_range: tuple[float, float] = (3.0, 5.0)
    lesion_intensity: float = 1.0
    background_noise_sigma: float = 0.1
    class_id: int = 0
    num_classes: int = 2
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    cube_extent: str = "equal-volume"

    def validate(self) -> "SyntheticSpec":
        self.shape = _triple(self.shape, "shape")
        if min(self.shape) < 1:
            raise ValidationError(f"shape: every component must be >= 1, got {self.shape}")
        if self.num_lesions < 0:
            raise ValidationError(f"num_lesions: must be >= 0, got {self.num_lesions}")
        lo, hi = (float(r) for r in self.lesion_radius_range)
        if not 0 < lo <= hi:
            raise ValidationError(f"lesion_radius_range: need 0 < min <= max, got {(lo, hi)}")
        if self.num_lesions and 2 * hi + 1 > min(self.shape):
            raise ValidationError(
                f"lesion_radius_range: radius {hi} does not fit inside shape {self.shape}"
            )
        if not 1 <= self.num_classes <= len(FAMILIES):
            raise ValidationError(f"num_classes: must be in 1..{len(FAMILIES)}, got {self.num_classes}")
        if not 0 <= self.class_id < self.num_classes:
            raise ValidationError(
                f"class_id: must be in 0..{self.num_classes - 1}, got {self.class_id}"
            )
        if self.cube_extent not in CUBE_EXTENTS:
            raise ValidationError(f"cube_extent: must be one of {CUBE_EXTENTS}, got {self.cube_extent!r}")
        if self.background_noise_sigma < 0:
            raise ValidationError("background_noise_sigma: must be >= 0")
        if not math.isfinite(self.lesion_intensity):
            raise ValidationError("lesion_intensity: must be finite")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"{sorted(unknown)[0]}: unknown synthetic spec field")
        return cls(**d).validate()


@dataclass
class ViewPair:
    u: Volume
    v: Volume
    crop_origins: tuple[Triple, Triple]
    source_id: str = ""


def lesion_mask(
    shape: Triple, center: Sequence[float], radius: float, family: str, cube_extent: str = "equal-volume"
) -> np.ndarray:
    """Boolean voxel mask of one lesion; voxel centers sit at integer coordinates."""
    zz, yy, xx = np.indices(shape, dtype=np.float64)
    dz, dy, dx = zz - center[0], yy - center[1], xx - center[2]
    if family == "sphere":
        return dz * dz + dy * dy + dx * dx <= radius * radius
    if family == "cube":
        half = radius if cube_extent == "radius" else 0.5 * radius * (4.0 * math.pi / 3.0) ** (1.0 / 3.0)
        return (np.abs(dz) <= half) & (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if family == "shell":
        inner = radius - max(1.0, 0.35 * radius)
        d2 = dz * dz + dy * dy + dx * dx
        return (d2 <= radius * radius) & (d2 > inner * inner)
    raise ValidationError(f"family: unknown geometry family {family!r}")


def seeded_rng(*key: int) -> np.random.Generator:
    """Counter-based generator keyed by integers, independent of call order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def lesion_layout(spec: SyntheticSpec, seed: int) -> list[tuple[tuple[float, float, float], float]]:
    """Seeded (center, radius) of every lesion; centers keep the whole ball inside the volume."""
    spec.validate()
    rng = seeded_rng(seed, spec.class_id, 1)
    lo, hi = spec.lesion_radius_range
    out = []
    for _ in range(spec.num_lesions):
        radius = float(rng.uniform(lo, hi))
        out.append((tuple(float(rng.uniform(radius, n - 1 - radius)) for n in spec.shape), radius))
    return out


def generate_synthetic_volume(spec: SyntheticSpec, seed: int) -> Volume:
    """Gaussian background noise plus the union of the class's lesions (overlaps are not stacked)."""
    spec.validate()
    shape = spec.shape
    if spec.background_noise_sigma > 0:
        data = seeded_rng(seed, spec.class_id, 0).normal(0.0, spec.background_noise_sigma, size=shape)
    else:
        data = np.zeros(shape)
    family = FAMILIES[spec.class_id]
    union = np.zeros(shape, dtype=bool)
    for center, radius in lesion_layout(spec, seed):
        union |= lesion_mask(shape, center, radius, family, spec.cube_extent)
    data[union] += spec.lesion_intensity
    return Volume(data.astype(np.float32), spec.spacing)


# --- .vol format -----------------------------------------------------------


def save_volume(v: Volume | np.ndarray, path, spacing=None, dtype: str = "f32le") -> None:
    if isinstance(v, Volume):
        data, spacing = v.data, v.spacing
    else:
        data = np.asarray(v)
        spacing = spacing or (1.0, 1.0, 1.0)
    if dtype not in _DTYPES:
        raise ValidationError(f"dtype: unsupported {dtype!r}")
    if data.ndim != 3:
        raise ValidationError(f"data: expected a 3D array, got ndim={data.ndim}")
    header = {"shape": list(data.shape), "spacing": [float(s) for s in spacing], "dtype": dtype}
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def read_vol(path) -> tuple[np.ndarray, tuple[float, float, float], str]:
    """Read any ``.vol`` file, returning (array, spacing, dtype tag)."""
    path = Path(path)
    if not path.exists():
        raise VolumeFormatError(f"missing file: {path}")
    raw = path.read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise VolumeFormatError("malformed header: no newline terminator")
    try:
        header = json.loads(raw[:end].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
        dtype = header["dtype"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header: {exc}") from exc
    if len(shape) != 3 or len(spacing) != 3 or dtype not in _DTYPES:
        raise VolumeFormatError(f"malformed header: {header}")
    np_dtype = _DTYPES[dtype]
    payload = raw[end + 1:]
    expected = math.prod(shape) * np_dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload size mismatch: header implies {expected} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
    return data, spacing, dtype


def load_volume(path) -> Volume:
    data, spacing, dtype = read_vol(path)
    return Volume(data.astype(np.float32), spacing)


# --- resampling ------------------------------------------------------------


def _resample_axis(a: np.ndarray, axis: int, n_out: int, scale: float) -> np.ndarray:
    """Linear interpolation along one axis with voxel-center alignment.

    Output voxel i samples input coordinate (i + 0.5) * scale - 0.5, clamped
    to the valid range. ``lo + (hi - lo) * t`` keeps constants exact.
    """
    n_in = a.shape[axis]
    x = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = x - i0
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    bshape = [1] * a.ndim
    bshape[axis] = n_out
    return lo + (hi - lo) * t.reshape(bshape)


def resample(v: Volume, target_spacing) -> Volume:
    target = _triple(target_spacing, "target_spacing", float)
    if min(target) <= 0:
        raise ValidationError(f"target_spacing: every component must be > 0, got {target}")
    if target == v.spacing:
        return Volume(v.data.copy(), v.spacing)
    out_shape = tuple(int(round(n * s / t)) for n, s, t in zip(v.shape, v.spacing, target))
    if min(out_shape) < 1:
        raise ValidationError(f"target_spacing: degenerate output shape {out_shape}")
    a = v.data.astype(np.float64)
    for axis in range(3):
        a = _resample_axis(a, axis, out_shape[axis], target[axis] / v.spacing[axis])
    return Volume(a.astype(np.float32), target)


# --- cropping --------------------------------------------------------------


def random_crop_views(v: Volume, crop_shape, seed: int, source_id: str = "") -> ViewPair:
    crop = _triple(crop_shape, "crop_shape")
    if any(c > n or c < 1 for c, n in zip(crop, v.shape)):
        raise ValidationError(f"crop_shape: {crop} does not fit inside volume shape {v.shape}")
    rng = seeded_rng(seed)
    origins = []
    views = []
    for _ in range(2):
        o = tuple(int(rng.integers(0, n - c + 1)) for n, c in zip(v.shape, crop))
        sl = tuple(slice(oi, oi + c) for oi, c in zip(o, crop))
        origins.append(o)
        views.append(Volume(v.data[sl].copy(), v.spacing))
    return ViewPair(views[0], views[1], (origins[0], origins[1]), source_id)


@dataclass
class VolumeDataset:
    """A directory of ``.vol`` files with an optional ``labels.csv``."""

    paths: list[Path]
    labels: list[int] = field(default_factory=list)

    @classmethod
    def from_dir(cls, root, labels_csv=None) -> "VolumeDataset":
        import csv

        root = Path(root)
        if not root.is_dir():
            raise VolumeFormatError(f"missing data directory: {root}")
        labels_path = Path(labels_csv) if labels_csv else root / "labels.csv"
        if labels_path.exists():
            with open(labels_path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            paths, labels = [], []
            for row in rows:
                p = root / row["filename"]
                if not p.exists():
                    raise VolumeFormatError(f"labels/volumes mismatch: {p.name} listed but missing")
                paths.append(p)
                labels.append(int(row["class_id"]))
            return cls(paths, labels)
        return cls(sorted(root.glob("*.vol")))

    def __len__(self) -> int:
        return len(self.paths)

    def load(self, i: int) -> Volume:
        return load_volume(self.paths[i])
