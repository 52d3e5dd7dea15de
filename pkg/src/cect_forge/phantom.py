"""Synthetic paired CT / CECT cardiac slices, augmentation, splits and HUV1 files.

A phantom is an elliptical soft-tissue body on air with an elliptical heart
(myocardium) holding four elliptical chambers. On the plain CT every chamber
holds unenhanced blood. On the CECT the two left chambers (LA, LV) are
enhanced above 300 HU and the two right chambers get a weaker enhancement
below it, as in an arterial-phase acquisition.

Noise is drawn on an acquisition grid (``acquisition_size`` pixels per side)
and area-averaged down to ``image_size``, the same way the scans themselves
are resampled before training. Masks are noiseless.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .loss import TrainingSample, normalize_hu
from .registration import RigidTransform2D, resample


class PhantomGeometryError(RuntimeError):
    pass


class VolumeFormatError(IOError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    acquisition_size: int = 512
    hu_air: float = -1000.0
    hu_soft_tissue: float = 40.0
    hu_myocardium: float = 50.0
    hu_blood_unenhanced: float = 40.0
    hu_left_enhanced_range: tuple[float, float] = (350.0, 500.0)
    hu_right_enhanced_range: tuple[float, float] = (120.0, 250.0)
    noise_sigma: float = 15.0
    center_jitter: float = 0.10      # heart center, fraction of the image side
    radius_jitter: float = 0.25      # relative chamber radius jitter
    rotation_jitter_deg: float = 20.0
    pixel_spacing_mm: float = 3.2    # 0.4 mm acquisition pixels seen at 64 px
    slice_thickness_mm: float = 3.0
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hu_left_enhanced_range", tuple(map(float, self.hu_left_enhanced_range)))
        object.__setattr__(self, "hu_right_enhanced_range", tuple(map(float, self.hu_right_enhanced_range)))
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.acquisition_size < self.image_size or self.acquisition_size % self.image_size:
            raise ValueError("acquisition_size must be a multiple of image_size")
        if self.hu_left_enhanced_range[0] <= 300.0:
            raise ValueError("left-chamber enhancement must stay above 300 HU")
        if self.hu_right_enhanced_range[1] >= 300.0:
            raise ValueError("right-chamber enhancement must stay below 300 HU")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def effective_noise_sigma(self) -> float:
        """Per-pixel noise after area-averaging to ``image_size``."""
        return self.noise_sigma * self.image_size / self.acquisition_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hu_left_enhanced_range"] = list(self.hu_left_enhanced_range)
        d["hu_right_enhanced_range"] = list(self.hu_right_enhanced_range)
        return d


@dataclass
class PhantomPair:
    ct: np.ndarray            # HU
    cect: np.ndarray          # HU
    chamber_mask: np.ndarray  # uint8, LA | LV
    heart_mask: np.ndarray    # uint8
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    displacement: RigidTransform2D | None = None
    seed: int | None = None

    @property
    def chamber_area_px(self) -> int:
        return int(self.chamber_mask.sum())

    def sample(self) -> TrainingSample:
        return TrainingSample(normalize_hu(self.ct), normalize_hu(self.cect),
                              self.chamber_mask.astype(np.float64), self.heart_mask.astype(np.float64))


@dataclass(frozen=True)
class _Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float  # radians

    def raster(self, size: int, scale: float = 1.0) -> np.ndarray:
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        dx, dy = xs - self.cx, ys - self.cy
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (dx * c + dy * s) / (self.a * scale)
        v = (-dx * s + dy * c) / (self.b * scale)
        return u * u + v * v <= 1.0


@dataclass
class Anatomy:
    body: _Ellipse
    heart: _Ellipse
    chambers: dict[str, _Ellipse] = field(default_factory=dict)
    enhancement: dict[str, float] = field(default_factory=dict)


# heart-frame offsets (fractions of heart semi-axes) and radii (fractions of image side)
_CHAMBERS = {
    "LV": ((0.46, 0.44), 0.085),
    "LA": ((0.46, -0.44), 0.07),
    "RV": ((-0.46, 0.44), 0.08),
    "RA": ((-0.46, -0.44), 0.065),
}
LEFT = ("LA", "LV")


def _dilate(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def _draw_anatomy(cfg: PhantomConfig, rng: np.random.Generator) -> Anatomy:
    S = cfg.image_size
    mid = (S - 1) / 2.0
    body = _Ellipse(mid, mid + 0.02 * S, 0.48 * S, 0.44 * S, 0.0)
    for _ in range(cfg.max_retries):
        j = cfg.center_jitter * S
        hcx, hcy = mid + rng.uniform(-j, j), mid - 0.02 * S + rng.uniform(-j, j)
        ha, hb = 0.30 * S * rng.uniform(0.92, 1.08), 0.27 * S * rng.uniform(0.92, 1.08)
        hang = math.radians(rng.uniform(-cfg.rotation_jitter_deg, cfg.rotation_jitter_deg))
        heart = _Ellipse(hcx, hcy, ha, hb, hang)
        c, s = math.cos(hang), math.sin(hang)
        chambers = {}
        for name, ((u, v), r) in _CHAMBERS.items():
            u += rng.uniform(-0.05, 0.05)
            v += rng.uniform(-0.05, 0.05)
            rad = r * S * rng.uniform(1 - cfg.radius_jitter, 1 + cfg.radius_jitter)
            aspect = rng.uniform(0.8, 1.0)
            ox, oy = u * ha, v * hb
            chambers[name] = _Ellipse(hcx + ox * c - oy * s, hcy + ox * s + oy * c, rad, rad * aspect,
                                      rng.uniform(0.0, math.pi))
        if _geometry_ok(S, body, heart, chambers):
            lo, hi = cfg.hu_left_enhanced_range
            rlo, rhi = cfg.hu_right_enhanced_range
            enh = {n: float(rng.uniform(lo, hi)) if n in LEFT else float(rng.uniform(rlo, rhi))
                   for n in chambers}
            return Anatomy(body, heart, chambers, enh)
    raise PhantomGeometryError(f"no valid chamber layout after {cfg.max_retries} attempts")


def _geometry_ok(S, body, heart, chambers, scale: float = 1.0) -> bool:
    heart_px = heart.raster(S)
    if np.any(heart_px & ~body.raster(S)):
        return False
    inner = ~_dilate(~heart_px)
    grown = []
    for e in chambers.values():
        m = e.raster(S, scale)
        if not m.any() or np.any(m & ~inner):
            return False
        grown.append(_dilate(m))
    for i in range(len(grown)):
        for k in range(i + 1, len(grown)):
            if np.any(grown[i] & grown[k]):
                return False
    return True


def _acquisition_noise(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    S, A = cfg.image_size, cfg.acquisition_size
    if cfg.noise_sigma == 0:
        return np.zeros((S, S))
    f = A // S
    return rng.normal(0.0, cfg.noise_sigma, size=(S, f, S, f)).mean(axis=(1, 3))


def render(cfg: PhantomConfig, anatomy: Anatomy, rng: np.random.Generator, radius_scale: float = 1.0,
           seed: int | None = None) -> PhantomPair:
    S = cfg.image_size
    body = anatomy.body.raster(S)
    heart = anatomy.heart.raster(S)
    base = np.full((S, S), cfg.hu_air)
    base[body] = cfg.hu_soft_tissue
    base[heart] = cfg.hu_myocardium
    ct = base.copy()
    cect = base.copy()
    chambers = np.zeros((S, S), dtype=bool)
    for name, e in anatomy.chambers.items():
        m = e.raster(S, radius_scale)
        ct[m] = cfg.hu_blood_unenhanced
        cect[m] = anatomy.enhancement[name]
        if name in LEFT:
            chambers |= m
    ct = ct + _acquisition_noise(cfg, rng)
    cect = cect + _acquisition_noise(cfg, rng)
    spacing = (cfg.pixel_spacing_mm, cfg.pixel_spacing_mm, cfg.slice_thickness_mm)
    return PhantomPair(ct, cect, chambers.astype(np.uint8), heart.astype(np.uint8), spacing, None, seed)


def generate_pair(cfg: PhantomConfig, seed: int | None = None) -> PhantomPair:
    """One phantom slice pair; a pure function of ``(cfg, seed)``."""
    seed = cfg.seed if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    anatomy = _draw_anatomy(cfg, rng)
    return render(cfg, anatomy, rng, seed=seed)


def slice_scales(depth: int) -> np.ndarray:
    """Smooth chamber-radius profile along a stack, 1.0 at the middle slice."""
    if depth == 1:
        return np.ones(1)
    k = np.arange(depth) - (depth - 1) / 2.0
    return 0.8 + 0.2 * np.cos(np.pi * k / depth)


def generate_volume(cfg: PhantomConfig, seed: int | None = None, depth: int = 4) -> list[PhantomPair]:
    """A stack of ``depth`` slices sharing anatomy, chamber radii varying smoothly."""
    seed = cfg.seed if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    anatomy = _draw_anatomy(cfg, rng)
    return [render(cfg, anatomy, rng, float(f), seed) for f in slice_scales(depth)]


def displace(pair: PhantomPair, t: RigidTransform2D, fill: float = -1000.0) -> PhantomPair:
    """Copy of ``pair`` with the CECT and chamber mask moved by ``t``."""
    return replace(pair, cect=resample(pair.cect, t, "bilinear", fill),
                   chamber_mask=resample(pair.chamber_mask, t, "nearest", 0).astype(np.uint8),
                   displacement=t)


def augment(pair: PhantomPair, seed: int, max_angle_deg: float = 25.0, angle_deg: float | None = None,
            fill: float = -1000.0) -> PhantomPair:
    """Rotate every image of the pair by one angle drawn from U(-max, +max) degrees.

    Intensity images use bilinear interpolation, masks nearest neighbour.
    ``angle_deg`` overrides the random draw.
    """
    if angle_deg is None:
        angle_deg = float(np.random.default_rng(seed).uniform(-max_angle_deg, max_angle_deg))
    if angle_deg == 0.0:
        return replace(pair, ct=pair.ct.copy(), cect=pair.cect.copy(), chamber_mask=pair.chamber_mask.copy(),
                       heart_mask=pair.heart_mask.copy())
    t = RigidTransform2D(0.0, 0.0, angle_deg)
    return replace(
        pair,
        ct=resample(pair.ct, t, "bilinear", fill),
        cect=resample(pair.cect, t, "bilinear", fill),
        chamber_mask=resample(pair.chamber_mask, t, "nearest", 0).astype(np.uint8),
        heart_mask=resample(pair.heart_mask, t, "nearest", 0).astype(np.uint8),
    )


SPLIT_RATIO = (120, 10, 20)


def split_dataset(n_total: int, seed: int) -> dict[str, np.ndarray]:
    """Disjoint train/val/test index sets in the 120:10:20 ratio."""
    if n_total < 3:
        raise ValueError(f"need at least 3 cases to split, got {n_total}")
    total = sum(SPLIT_RATIO)
    n_val = max(1, int(round(n_total * SPLIT_RATIO[1] / total)))
    n_test = max(1, int(round(n_total * SPLIT_RATIO[2] / total)))
    n_train = n_total - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n_total} cases leave no training set")
    perm = np.random.default_rng(seed).permutation(n_total)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


# HUV1 volumes --------------------------------------------------------------

HUV_MAGIC = b"HUV1"
HUV_VERSION = 1
_HUV_HEADER = struct.Struct("<4sHIIIfff")


@dataclass
class Volume:
    data: np.ndarray  # float32, (depth, height, width)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim == 2:
            d = d[None]
        if d.ndim != 3:
            raise VolumeFormatError(f"volume must be 2-d or 3-d, got shape {d.shape}")
        self.data = d
        self.spacing = tuple(float(s) for s in self.spacing)


def save_volume(vol, path, spacing=None) -> None:
    if not isinstance(vol, Volume):
        vol = Volume(vol, spacing or (1.0, 1.0, 1.0))
    D, H, W = vol.data.shape
    header = _HUV_HEADER.pack(HUV_MAGIC, HUV_VERSION, W, H, D, *vol.spacing)
    Path(path).write_bytes(header + vol.data.astype("<f4").tobytes())


def load_volume(path) -> Volume:
    buf = Path(path).read_bytes()
    if len(buf) < _HUV_HEADER.size:
        raise VolumeFormatError(f"{path}: file shorter than HUV1 header")
    magic, version, W, H, D, sx, sy, sz = _HUV_HEADER.unpack_from(buf)
    if magic != HUV_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != HUV_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    payload = len(buf) - _HUV_HEADER.size
    if W * H * D * 4 != payload:
        raise VolumeFormatError(f"{path}: header says {W}x{H}x{D} but payload has {payload} bytes")
    data = np.frombuffer(buf, dtype="<f4", offset=_HUV_HEADER.size).reshape(D, H, W).astype(np.float32)
    return Volume(data, (sx, sy, sz))
