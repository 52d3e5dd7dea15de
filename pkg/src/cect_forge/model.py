"""Deconvolutional encoder/decoder with a 1x1 residual skip from the input.

Layout (1-based layer indices)::

    enc1..enc8   conv3x3 -> BN -> ReLU, stride 2 on enc2/4/6/8
    bottleneck   conv3x3 -> BN -> ReLU
    dec1..dec8   odd: transposed conv 2x2/2, even: conv3x3, each -> BN -> ReLU
    head         conv3x3 to one channel, linear
    output       head + conv1x1(input)
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

ENCODER_CHANNELS = (16, 16, 32, 32, 64, 64, 128, 128)
DECODER_CHANNELS = (128, 64, 64, 32, 32, 16, 16, 16)

CWT_MAGIC = b"CWT1"
CWT_VERSION = 1


class ModelConfigError(ValueError):
    pass


class WeightsFormatError(IOError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 128
    encoder_channels: tuple[int, ...] = ENCODER_CHANNELS
    bottleneck_channels: int = 128
    decoder_channels: tuple[int, ...] = DECODER_CHANNELS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if len(self.encoder_channels) != 8 or len(self.decoder_channels) != 8:
            raise ModelConfigError("encoder and decoder must each have exactly 8 layers")
        if min(self.encoder_channels + self.decoder_channels + (self.bottleneck_channels,)) < 1:
            raise ModelConfigError("channel counts must be positive")
        if self.input_size < 16 or self.input_size % 16:
            raise ModelConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")

    @classmethod
    def scaled(cls, width_divisor: int = 4, input_size: int = 64, seed: int = 0) -> "ModelConfig":
        """Default widths divided by ``width_divisor`` (quarter width by default)."""
        d = int(width_divisor)
        return cls(
            input_size=input_size,
            encoder_channels=tuple(max(1, c // d) for c in ENCODER_CHANNELS),
            bottleneck_channels=max(1, 128 // d),
            decoder_channels=tuple(max(1, c // d) for c in DECODER_CHANNELS),
            seed=seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" | "transpose"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    batch_norm: bool
    activation: str  # "relu" | "linear"


def layer_specs(cfg: ModelConfig) -> list[LayerSpec]:
    specs = []
    c = 1
    for i, f in enumerate(cfg.encoder_channels, start=1):
        specs.append(LayerSpec(f"enc{i}", "conv", c, f, 3, 2 if i % 2 == 0 else 1, True, "relu"))
        c = f
    specs.append(LayerSpec("bottleneck", "conv", c, cfg.bottleneck_channels, 3, 1, True, "relu"))
    c = cfg.bottleneck_channels
    for i, f in enumerate(cfg.decoder_channels, start=1):
        if i % 2 == 1:
            specs.append(LayerSpec(f"dec{i}", "transpose", c, f, 2, 2, True, "relu"))
        else:
            specs.append(LayerSpec(f"dec{i}", "conv", c, f, 3, 1, True, "relu"))
        c = f
    specs.append(LayerSpec("head", "conv", c, 1, 3, 1, False, "linear"))
    specs.append(LayerSpec("skip", "conv", 1, 1, 1, 1, False, "linear"))
    return specs


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def weights(self) -> list[Tensor]:
        """Convolution kernels only; these are the weight-decayed tensors."""
        return [t for name, t in self.tensors.items() if name.endswith("/weight")]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def records(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((name, t.data) for name, t in self.tensors.items())
        out.update(self.buffers)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.tensors.items()),
            OrderedDict((k, v.copy()) for k, v in self.buffers.items()),
        )


def build_network(cfg: ModelConfig) -> ModelParams:
    if not isinstance(cfg, ModelConfig):
        raise ModelConfigError(f"expected ModelConfig, got {type(cfg).__name__}")
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams(cfg)
    for spec in layer_specs(cfg):
        if spec.kind == "transpose":
            shape = (spec.in_channels, spec.out_channels, 2, 2)
            fan_in = spec.in_channels
        else:
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            fan_in = spec.in_channels * spec.kernel * spec.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params.tensors[f"{spec.name}/weight"] = Tensor(w, requires_grad=True)
        if spec.batch_norm:
            # a bias ahead of batch norm is cancelled by the mean subtraction
            params.tensors[f"{spec.name}/bn/gamma"] = Tensor(np.ones(spec.out_channels), requires_grad=True)
            params.tensors[f"{spec.name}/bn/beta"] = Tensor(np.zeros(spec.out_channels), requires_grad=True)
            params.buffers[f"{spec.name}/bn/running_mean"] = np.zeros(spec.out_channels)
            params.buffers[f"{spec.name}/bn/running_var"] = np.ones(spec.out_channels)
        else:
            params.tensors[f"{spec.name}/bias"] = Tensor(np.zeros(spec.out_channels), requires_grad=True)
    return params


def forward(params: ModelParams, x, mode: str = "infer", trace: list | None = None,
            bn_momentum: float = T.BN_MOMENTUM) -> Tensor:
    """Run the network on ``x[N,1,S,S]``; ``mode`` is ``"train"`` or ``"infer"``.

    If ``trace`` is a list, ``(layer name, output shape)`` pairs are appended.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = T.as_tensor(x)
    S = params.config.input_size
    if x.data.ndim != 4 or x.shape[1:] != (1, S, S):
        raise DimensionError(f"expected input [N,1,{S},{S}], got {x.shape}")
    training = mode == "train"
    p = params.tensors
    h = x
    specs = layer_specs(params.config)
    for spec in specs[:-2]:
        w = p[f"{spec.name}/weight"]
        if spec.kind == "transpose":
            h = T.conv2d_transpose(h, w)
        else:
            h = T.conv2d(h, w, None, spec.stride)
        h = T.batch_norm(h, p[f"{spec.name}/bn/gamma"], p[f"{spec.name}/bn/beta"],
                         params.buffers[f"{spec.name}/bn/running_mean"],
                         params.buffers[f"{spec.name}/bn/running_var"], training, bn_momentum)
        h = T.relu(h)
        if trace is not None:
            trace.append((spec.name, h.shape))
    head = T.conv2d(h, p["head/weight"], p["head/bias"], 1)
    skip = T.conv2d(x, p["skip/weight"], p["skip/bias"], 1)
    out = T.add(head, skip)
    if trace is not None:
        trace.append(("head", head.shape))
        trace.append(("skip", skip.shape))
    return out


def recalibrate_bn(params: ModelParams, x: np.ndarray, batch_size: int = 8) -> None:
    """Set every running mean/var to the average batch statistic over ``x`` under the current weights.

    During training the running averages trail weights that keep moving;
    recomputing them once with the final weights removes that lag.
    Partial trailing batches are skipped, as in training.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    bs = min(batch_size, x.shape[0])
    for k in range(x.shape[0] // bs):
        # momentum k/(k+1) turns the running update into a cumulative mean
        forward(params, x[k * bs:(k + 1) * bs], "train", bn_momentum=k / (k + 1))


def predict(params: ModelParams, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Inference-mode forward over a stack of images ``[N,S,S]`` or ``[N,1,S,S]``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[:, None]
    outs = [forward(params, x[i:i + batch_size], "infer").data for i in range(0, len(x), batch_size)]
    out = np.concatenate(outs, axis=0)
    return out[:, 0] if squeeze else out


# weights file ---------------------------------------------------------------

def write_cwt(path, records: "OrderedDict[str, np.ndarray]") -> None:
    chunks = [CWT_MAGIC, struct.pack("<HI", CWT_VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_cwt(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:4] != CWT_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightsFormatError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HI", take(6))
    if version != CWT_VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    records = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightsFormatError(f"{path}: record name is not UTF-8") from exc
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        records[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise WeightsFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return records


def save_weights(params: ModelParams, path) -> None:
    write_cwt(path, params.records())


def _infer_config(records, input_size: int) -> ModelConfig:
    try:
        enc = [records[f"enc{i}/weight"].shape[0] for i in range(1, 9)]
        bott = records["bottleneck/weight"].shape[0]
        dec = [records[f"dec{i}/weight"].shape[1 if i % 2 else 0] for i in range(1, 9)]
    except KeyError as exc:
        raise WeightsFormatError(f"missing record {exc}") from None
    return ModelConfig(input_size, tuple(enc), bott, tuple(dec))


def load_weights(path, config: ModelConfig | None = None, input_size: int = 128) -> ModelParams:
    """Read a CWT1 file into fresh parameters.

    Without ``config`` the channel widths are read off the record shapes.
    Every record must match the architecture exactly, otherwise nothing is
    returned.
    """
    records = read_cwt(path)
    cfg = config or _infer_config(records, input_size)
    params = build_network(cfg)
    expected = params.records()
    if list(records) != list(expected):
        missing = set(expected) ^ set(records)
        raise WeightsFormatError(f"{path}: record set does not match architecture ({sorted(missing)[:4]})")
    for name, arr in records.items():
        if arr.shape != expected[name].shape:
            raise WeightsFormatError(f"{path}: {name} has shape {arr.shape}, expected {expected[name].shape}")
    for name, t in params.tensors.items():
        t.data = records[name].copy()
    for name in params.buffers:
        params.buffers[name] = records[name].copy()
    return params
