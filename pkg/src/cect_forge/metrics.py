"""Image-quality and chamber-agreement measures, and the evaluation report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .registration import entropies

DEFAULT_PEAK = 4095.0
DEFAULT_BINS = 32
DEFAULT_VTH_HU = 300.0


def _mask_or_all(a: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return np.ones(a.shape, dtype=bool)
    m = np.asarray(mask) != 0
    if m.shape != a.shape:
        raise ValueError(f"mask shape {m.shape} does not match image {a.shape}")
    if not m.any():
        raise ValueError("empty mask")
    return m


def nmi(a: np.ndarray, b: np.ndarray, mask=None, bins: int = DEFAULT_BINS) -> float:
    """``2 I(a; b) / (H(a) + H(b))`` over masked pixels, in [0, 1].

    Two constant images (both entropies 0) give 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = _mask_or_all(a, mask)
    ha, hb, hab = entropies(a, b, bins, m)
    if ha + hb == 0.0:
        return 1.0
    return float(min(1.0, max(0.0, 2.0 * (ha + hb - hab) / (ha + hb))))


def psnr(a: np.ndarray, b: np.ndarray, mask=None, peak: float = DEFAULT_PEAK) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = _mask_or_all(a, mask)
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def threshold_segment(pred_hu: np.ndarray, v_th: float = DEFAULT_VTH_HU, heart_mask=None) -> np.ndarray:
    """``(pred >= v_th) & heart_mask`` as uint8. No morphology."""
    seg = np.asarray(pred_hu) >= v_th
    if heart_mask is not None:
        seg &= np.asarray(heart_mask) != 0
    return seg.astype(np.uint8)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a) != 0
    b = np.asarray(b) != 0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def pearson(x, y) -> tuple[float, float]:
    """Sample correlation and its two-sided p-value (t distribution, n - 2 dof)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-d series of equal length")
    n = x.size
    if n < 3:
        raise ValueError("pearson needs at least 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson is undefined for a zero-variance series")
    rho = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * stats.t.sf(abs(t), n - 2))


@dataclass
class BlandAltman:
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    means: np.ndarray
    diffs: np.ndarray

    def summary(self) -> dict:
        return {"mean_diff": self.mean_diff, "sd_diff": self.sd_diff,
                "loa_low": self.loa_low, "loa_high": self.loa_high}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mean", "diff"])
        for m, d in zip(self.means, self.diffs):
            w.writerow([repr(float(m)), repr(float(d))])
        return buf.getvalue()


def bland_altman(x, y) -> BlandAltman:
    """Agreement of ``x`` (e.g. predicted) with ``y`` (reference); diff = x - y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("bland_altman needs two 1-d series of equal length")
    if x.size < 2:
        raise ValueError("bland_altman needs at least 2 pairs")
    diffs = x - y
    md = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltman(md, sd, md - 1.96 * sd, md + 1.96 * sd, (x + y) / 2.0, diffs)


def volume_ml(mask, spacing) -> float:
    """Voxel count times voxel volume; ``spacing`` is (x, y, z) in mm."""
    sx, sy, sz = spacing
    return float(np.count_nonzero(mask)) * sx * sy * sz / 1000.0


def volume_percent_error(v_pred: float, v_true: float) -> float:
    if v_true <= 0:
        raise ValueError("reference volume must be positive")
    return 100.0 * abs(v_pred - v_true) / v_true


# report -------------------------------------------------------------------

def _mean_sd(values) -> dict:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return {"mean": math.nan, "sd": math.nan}
    if np.isinf(v).any():
        return {"mean": float(np.mean(v)), "sd": math.nan}
    return {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0}


def _enc(x):
    if isinstance(x, float):
        if math.isinf(x):
            return "+inf" if x > 0 else "-inf"
        if math.isnan(x):
            return None
    if isinstance(x, dict):
        return {k: _enc(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_enc(v) for v in x]
    return x


def _dec(x):
    if x == "+inf":
        return math.inf
    if x == "-inf":
        return -math.inf
    if x is None:
        return math.nan
    if isinstance(x, dict):
        return {k: _dec(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_dec(v) for v in x]
    return x


REPORT_KEYS = ("nmi", "psnr_db", "dice", "dv_percent", "pearson_rho", "pearson_p", "bland_altman",
               "slices", "volumes", "settings")


@dataclass
class EvalReport:
    slices: list[dict] = field(default_factory=list)   # {case, slice, nmi, psnr_db, dice}
    volumes: list[dict] = field(default_factory=list)  # {case, volume_pred_ml, volume_true_ml, dv_percent}
    settings: dict = field(default_factory=dict)
    pearson_rho: float = math.nan
    pearson_p: float = math.nan
    bland_altman: dict = field(default_factory=dict)
    bland_altman_table: list[tuple[float, float]] = field(default_factory=list)

    @classmethod
    def build(cls, slices, volumes, settings) -> "EvalReport":
        rep = cls(list(slices), list(volumes), dict(settings))
        pred = [v["volume_pred_ml"] for v in volumes]
        true = [v["volume_true_ml"] for v in volumes]
        if len(volumes) >= 3:
            try:
                rep.pearson_rho, rep.pearson_p = pearson(pred, true)
            except ValueError:
                pass
        if len(volumes) >= 2:
            ba = bland_altman(pred, true)
            rep.bland_altman = ba.summary()
            rep.bland_altman_table = [(float(m), float(d)) for m, d in zip(ba.means, ba.diffs)]
        return rep

    def aggregate(self, key: str) -> dict:
        rows = self.volumes if key == "dv_percent" else self.slices
        return _mean_sd(r[key] for r in rows)

    def to_dict(self) -> dict:
        return {
            "nmi": self.aggregate("nmi"),
            "psnr_db": self.aggregate("psnr_db"),
            "dice": self.aggregate("dice"),
            "dv_percent": self.aggregate("dv_percent"),
            "pearson_rho": self.pearson_rho,
            "pearson_p": self.pearson_p,
            "bland_altman": dict(self.bland_altman),
            "slices": self.slices,
            "volumes": self.volumes,
            "settings": self.settings,
        }

    def to_json(self) -> str:
        return json.dumps(_enc(self.to_dict()), indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = _dec(json.loads(text))
        missing = set(REPORT_KEYS) - set(d)
        if missing:
            raise ValueError(f"report is missing keys {sorted(missing)}")
        rep = cls(d["slices"], d["volumes"], d["settings"], d["pearson_rho"], d["pearson_p"], d["bland_altman"])
        if len(rep.volumes) >= 2:
            pred = np.array([v["volume_pred_ml"] for v in rep.volumes])
            true = np.array([v["volume_true_ml"] for v in rep.volumes])
            rep.bland_altman_table = [(float(m), float(dd)) for m, dd in zip((pred + true) / 2.0, pred - true)]
        return rep

    def bland_altman_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mean", "diff"])
        for m, d in self.bland_altman_table:
            w.writerow([repr(m), repr(d)])
        return buf.getvalue()
