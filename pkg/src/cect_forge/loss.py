"""Training objective: masked RMSE + binarized cross entropy + L2 decay.

All images enter the loss in normalized units, ``(HU + 1024) / 4095``. The
RMSE and BCE pixel sums run over heart-mask pixels only; the RMSE divisor is
the number of heart pixels in each image. For a batch the per-image data
terms are averaged and the weight decay is added once.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

HU_OFFSET = 1024.0
HU_WIDTH = 4095.0


def normalize_hu(hu):
    return (np.asarray(hu, dtype=np.float64) + HU_OFFSET) / HU_WIDTH


def denormalize_hu(x):
    return np.asarray(x, dtype=np.float64) * HU_WIDTH - HU_OFFSET


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.01
    lam: float = 0.001
    s: float = 10.0
    v_th: float = float(normalize_hu(300.0))
    bce_reduction: str = "sum"  # over heart pixels; "mean" divides by their count

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError("alpha, beta and lambda must be non-negative")
        if self.s <= 0:
            raise ValueError("sigmoid steepness s must be positive")
        if self.bce_reduction not in ("sum", "mean"):
            raise ValueError(f"bce_reduction must be 'sum' or 'mean', got {self.bce_reduction!r}")

    @classmethod
    def from_hu_threshold(cls, v_th_hu: float = 300.0, **kw) -> "LossConfig":
        return cls(v_th=float(normalize_hu(v_th_hu)), **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingSample:
    """One image (``[S,S]``) or a batch (``[N,S,S]``) of aligned arrays.

    ``ct`` and ``cect`` are in normalized units; the masks are 0/1.
    """

    ct: np.ndarray
    cect: np.ndarray
    chamber_mask: np.ndarray
    heart_mask: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.ct, self.cect, self.chamber_mask, self.heart_mask)}
        if len(shapes) != 1:
            raise DimensionError(f"sample arrays disagree in shape: {sorted(shapes)}")
        for name in ("chamber_mask", "heart_mask"):
            m = getattr(self, name)
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{name} must be 0/1 valued")
        if np.any((self.chamber_mask != 0) & (self.heart_mask == 0)):
            raise ValueError("chamber_mask must lie inside heart_mask")

    def batched(self) -> "TrainingSample":
        if self.ct.ndim == 3:
            return self
        return TrainingSample(self.ct[None], self.cect[None], self.chamber_mask[None], self.heart_mask[None])

    @classmethod
    def stack(cls, samples) -> "TrainingSample":
        samples = [s.batched() for s in samples]
        return cls(*(np.concatenate([getattr(s, f) for s in samples]) for f in
                     ("ct", "cect", "chamber_mask", "heart_mask")))


def _as_nchw(x: Tensor) -> Tensor:
    if x.data.ndim == 2:
        return Tensor(x.data[None, None], x.requires_grad, _parents=(x,),
                      _vjp=lambda g: (g[0, 0],), op="reshape") if x.requires_grad else Tensor(x.data[None, None])
    if x.data.ndim == 3:
        return Tensor(x.data[:, None], x.requires_grad, _parents=(x,),
                      _vjp=lambda g: (g[:, 0],), op="reshape") if x.requires_grad else Tensor(x.data[:, None])
    return x


def _masks_nchw(arr, shape) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    if a.shape != shape:
        raise DimensionError(f"mask/target shape {a.shape} does not match prediction {shape}")
    return a


def rmse_per_image(pred: Tensor, target, mask) -> Tensor:
    """Masked RMSE of each image in the batch, shape ``[N]``."""
    pred = _as_nchw(T.as_tensor(pred))
    target = _masks_nchw(target, pred.shape).astype(np.float64)
    mask = _masks_nchw(mask, pred.shape) != 0
    counts = mask.sum(axis=(1, 2, 3)).astype(np.float64)
    if np.any(counts == 0):
        warnings.warn("empty mask in rmse_term; its RMSE is defined as 0", RuntimeWarning, stacklevel=2)
    sq = T.square(T.masked_select(T.sub(pred, target), mask))
    return T.sqrt(T.divide(T.tsum(sq, axis=(1, 2, 3)), np.maximum(counts, 1.0)))


def bce_per_image(pred: Tensor, chamber_mask, mask, s: float, v_th: float, reduction: str = "sum") -> Tensor:
    """Masked BCE of ``steep_sigmoid(pred)`` against the chamber mask, shape ``[N]``.

    ``reduction="sum"`` adds over mask pixels; ``"mean"`` divides each image's
    sum by its mask count (an empty mask contributes 0).
    """
    pred = _as_nchw(T.as_tensor(pred))
    y = _masks_nchw(chamber_mask, pred.shape).astype(np.float64)
    mask = _masks_nchw(mask, pred.shape) != 0
    total = T.sigmoid_bce(pred, y, s, v_th, mask, axis=(1, 2, 3))
    if reduction == "sum":
        return total
    counts = np.maximum(mask.sum(axis=(1, 2, 3)), 1).astype(np.float64)
    return T.divide(total, counts)


def rmse_term(pred, target, mask) -> Tensor:
    """Scalar masked RMSE (batch mean of per-image values)."""
    return T.mean(rmse_per_image(pred, target, mask))


def bce_term(pred, chamber_mask, mask, s: float = 10.0, v_th: float = float(normalize_hu(300.0)),
             reduction: str = "sum") -> Tensor:
    """Scalar masked BCE (batch mean of per-image values)."""
    return T.mean(bce_per_image(pred, chamber_mask, mask, s, v_th, reduction))


def weight_decay(weights) -> Tensor | float:
    total = None
    for w in weights:
        term = T.tsum(T.square(w))
        total = term if total is None else T.add(total, term)
    return Tensor(0.0) if total is None else total


def composite_loss(pred, sample: TrainingSample, params, cfg: LossConfig) -> tuple[Tensor, dict]:
    """``alpha * RMSE + beta * BCE`` on the heart mask plus ``lam / 2 * sum ||W||^2``.

    ``params`` may be a :class:`~cect_forge.model.ModelParams`, an iterable of
    weight tensors, or ``None`` (no decay term). Returns the scalar loss
    tensor and the weighted contributions ``{"rmse", "bce", "l2"}`` as floats.
    """
    if params is None:
        weights = []
    elif hasattr(params, "weights"):
        weights = params.weights()
    else:
        weights = list(params)
    rmse = rmse_term(pred, sample.cect, sample.heart_mask)
    bce = bce_term(pred, sample.chamber_mask, sample.heart_mask, cfg.s, cfg.v_th, cfg.bce_reduction)
    l2 = weight_decay(weights)
    loss = T.add(T.add(T.scale(rmse, cfg.alpha), T.scale(bce, cfg.beta)), T.scale(l2, cfg.lam / 2.0))
    breakdown = {
        "rmse": cfg.alpha * rmse.item(),
        "bce": cfg.beta * bce.item(),
        "l2": cfg.lam / 2.0 * float(T.as_tensor(l2).item()),
    }
    return loss, breakdown
