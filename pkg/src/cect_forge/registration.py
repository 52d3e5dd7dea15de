"""Rigid 2D registration by mutual-information maximization, and resampling.

Transforms act about the image center ``c = ((W-1)/2, (H-1)/2)`` in pixel
index coordinates (x = column, y = row)::

    p' = R(theta) (p - c) + c + (tx, ty)

``resample(img, t)`` produces ``out(p) = img(t^-1(p))``, i.e. it moves image
content by ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import minimize


@dataclass(frozen=True)
class RigidTransform2D:
    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0  # degrees

    def rotation(self) -> np.ndarray:
        a = math.radians(self.theta)
        return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])

    def apply(self, points: np.ndarray, center) -> np.ndarray:
        """Map ``points[..., 2]`` given as (x, y)."""
        c = np.asarray(center, dtype=np.float64)
        return (np.asarray(points, dtype=np.float64) - c) @ self.rotation().T + c + (self.tx, self.ty)

    def inverse(self) -> "RigidTransform2D":
        t = self.rotation().T @ np.array([self.tx, self.ty])
        return RigidTransform2D(-float(t[0]), -float(t[1]), -self.theta)

    def compose(self, other: "RigidTransform2D") -> "RigidTransform2D":
        """``self after other``."""
        t = self.rotation() @ np.array([other.tx, other.ty]) + (self.tx, self.ty)
        return RigidTransform2D(float(t[0]), float(t[1]), self.theta + other.theta)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.tx, self.ty, self.theta)

    def to_dict(self) -> dict:
        return {"tx": self.tx, "ty": self.ty, "theta": self.theta}


IDENTITY = RigidTransform2D()


def _source_coords(shape, t: RigidTransform2D):
    H, W = shape
    c = ((W - 1) / 2.0, (H - 1) / 2.0)
    inv = t.inverse()
    if inv.theta == 0.0 and inv.tx == 0.0 and inv.ty == 0.0:
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        return xs, ys
    R = inv.rotation()
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    dx, dy = xs - c[0], ys - c[1]
    qx = R[0, 0] * dx + R[0, 1] * dy + c[0] + inv.tx
    qy = R[1, 0] * dx + R[1, 1] * dy + c[1] + inv.ty
    return qx, qy


def resample(img: np.ndarray, t: RigidTransform2D, interp: str = "bilinear", fill: float = -1000.0,
             return_valid: bool = False):
    """Resample ``img`` under ``t``; samples falling outside the grid get ``fill``."""
    img = np.asarray(img)
    H, W = img.shape
    qx, qy = _source_coords(img.shape, t)
    eps = 1e-9
    valid = (qx >= -eps) & (qx <= W - 1 + eps) & (qy >= -eps) & (qy <= H - 1 + eps)
    if interp == "nearest":
        ix = np.clip(np.floor(qx + 0.5).astype(np.intp), 0, W - 1)
        iy = np.clip(np.floor(qy + 0.5).astype(np.intp), 0, H - 1)
        out = np.where(valid, img[iy, ix], fill).astype(img.dtype)
    elif interp == "bilinear":
        qx = np.clip(qx, 0, W - 1)
        qy = np.clip(qy, 0, H - 1)
        x0 = np.floor(qx).astype(np.intp)
        y0 = np.floor(qy).astype(np.intp)
        fx, fy = qx - x0, qy - y0
        x1 = np.minimum(x0 + 1, W - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        f = img.astype(np.float64)
        val = ((1 - fy) * ((1 - fx) * f[y0, x0] + fx * f[y0, x1])
               + fy * ((1 - fx) * f[y1, x0] + fx * f[y1, x1]))
        out = np.where(valid, val, fill)
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    return (out, valid) if return_valid else out


# mutual information -----------------------------------------------------------

def _bin_indices(v: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.intp)
    idx = np.floor((v - lo) * (bins / (hi - lo))).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def _entropy(counts: np.ndarray) -> float:
    c = counts[counts > 0].astype(np.float64)
    p = c / c.sum()
    return float(-np.sum(p * np.log(p)))


def entropies(a: np.ndarray, b: np.ndarray, bins: int = 32, mask=None) -> tuple[float, float, float]:
    """Marginal and joint entropies (nats) from an equal-width ``bins x bins`` histogram.

    Each image is binned over its own observed range within ``mask``.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        m = np.asarray(mask) != 0
        a, b = a[m], b[m]
    else:
        a, b = a.ravel(), b.ravel()
    if a.size == 0:
        raise ValueError("no pixels to compare")
    ia, ib = _bin_indices(a, bins), _bin_indices(b, bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins)
    ha = _entropy(np.bincount(ia, minlength=bins))
    hb = _entropy(np.bincount(ib, minlength=bins))
    return ha, hb, _entropy(joint)


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 32, mask=None) -> float:
    """``H(a) + H(b) - H(a, b)`` in nats, clipped at 0."""
    ha, hb, hab = entropies(a, b, bins, mask)
    return max(0.0, ha + hb - hab)


# registration -------------------------------------------------------------

@dataclass(frozen=True)
class RegistrationOptions:
    bins: int = 32
    max_shift: float = 8.0
    shift_step: float = 2.0
    max_angle: float = 15.0
    angle_step: float = 3.0
    xatol: float = 0.01
    fatol: float = 1e-7
    max_iter: int = 400
    fill: float = -1000.0
    smooth_sigma: float = 0.7  # Gaussian pre-smoothing (px) of both images; 0 disables
    starts: int = 5  # Nelder-Mead runs from the best distinct grid points


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform2D
    mi: float
    mi_initial: float
    converged: bool
    evaluations: int


def _mi_under(moving, fixed, t: RigidTransform2D, opts: RegistrationOptions) -> float:
    moved, valid = resample(moving, t, "bilinear", opts.fill, return_valid=True)
    if valid.sum() < 16:
        return 0.0
    return mutual_information(moved, fixed, opts.bins, valid)


def register_rigid(moving: np.ndarray, fixed: np.ndarray, opts: RegistrationOptions | None = None) -> RegistrationResult:
    """Find the transform ``t`` maximizing ``MI(resample(moving, t), fixed)``.

    Both images are first smoothed with a small Gaussian, which suppresses
    the interpolation artifacts of MI at sub-pixel offsets; the reported MI
    values refer to the smoothed pair. A coarse grid over shifts and angles
    is followed by Nelder-Mead refinements from the ``opts.starts`` best grid
    points. If no simplex beats the grid, the best grid point is returned
    with ``converged=False``.
    """
    opts = opts or RegistrationOptions()
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape:
        raise ValueError(f"moving {moving.shape} and fixed {fixed.shape} differ in shape")
    if opts.smooth_sigma > 0:
        moving = gaussian_filter(moving, opts.smooth_sigma, mode="nearest")
        fixed = gaussian_filter(fixed, opts.smooth_sigma, mode="nearest")
    evals = 0

    def score(p):
        nonlocal evals
        evals += 1
        return _mi_under(moving, fixed, RigidTransform2D(*map(float, p)), opts)

    mi0 = score((0.0, 0.0, 0.0))
    shifts = np.arange(-opts.max_shift, opts.max_shift + 1e-9, opts.shift_step)
    angles = np.arange(-opts.max_angle, opts.max_angle + 1e-9, opts.angle_step)
    grid = [(0.0, 0.0, 0.0)] + [(float(tx), float(ty), float(th)) for th in angles for ty in shifts for tx in shifts
                               if (tx, ty, th) != (0, 0, 0)]
    values = np.array([mi0] + [score(p) for p in grid[1:]])
    # stable sort keeps the identity first among ties
    order = np.argsort(-values, kind="stable")[:max(1, opts.starts)]

    best, best_p, converged = values[order[0]], grid[order[0]], False
    for k in order:
        x0 = np.array(grid[k])
        simplex = np.vstack([x0, x0 + [opts.shift_step / 2, 0, 0], x0 + [0, opts.shift_step / 2, 0],
                             x0 + [0, 0, opts.angle_step / 2]])
        res = minimize(lambda p: -score(p), x0, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "xatol": opts.xatol, "fatol": opts.fatol,
                                "maxiter": opts.max_iter})
        if -res.fun > best:
            best, best_p, converged = float(-res.fun), tuple(map(float, res.x)), bool(res.success)
    return RegistrationResult(RigidTransform2D(*best_p), float(best), mi0, converged, evals)


# downsampling -------------------------------------------------------------

def _area_weights(n: int, size: int) -> np.ndarray:
    """``size x n`` matrix averaging ``n`` input cells into ``size`` output cells by overlap."""
    edges = np.linspace(0.0, n, size + 1)
    w = np.zeros((size, n))
    for i in range(size):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(math.floor(lo)), min(n, int(math.ceil(hi)))):
            w[i, j] = min(hi, j + 1) - max(lo, j)
        w[i] /= hi - lo
    return w


def downsample_to(img: np.ndarray, size: int) -> np.ndarray:
    """Box (area-average) downsampling of a 2D image to ``size x size``."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    if size > H or size > W or size < 1:
        raise ValueError(f"downsample_to cannot go from {img.shape} to {size}x{size}")
    if H % size == 0 and W % size == 0:
        return img.reshape(size, H // size, size, W // size).mean(axis=(1, 3))
    return _area_weights(H, size) @ img @ _area_weights(W, size).T
