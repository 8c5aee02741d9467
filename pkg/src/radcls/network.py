"""CBAM-augmented residual classifier for single-channel images.

The backbone is a bottleneck residual network; each block's transform
branch passes through channel attention then spatial attention before the
skip addition.  The head is global average pooling, dropout, and a linear
layer to two logits (tear vs no tear).  PyTorch supplies convolution,
pooling, and reverse-mode gradients; everything architectural lives here.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

EXPANSION = 4  # bottleneck output channels = EXPANSION * mid channels


class ConfigError(ValueError):
    """Model configuration violates a structural constraint."""


class ShapeError(ValueError):
    """An input does not match the shape a layer expects."""


@dataclass
class CbamConfig:
    reduction_ratio: int = 16
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.reduction_ratio < 1:
            raise ConfigError(f"reduction_ratio must be >= 1, got {self.reduction_ratio}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be odd, got {self.spatial_kernel}")


@dataclass
class ModelConfig:
    stage_block_counts: list[int] = field(default_factory=lambda: [3, 4, 6, 3])
    stage_channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    num_classes: int = 2
    dropout_p: float = 0.2
    cbam: CbamConfig = field(default_factory=CbamConfig)
    input_size: int = 512
    cbam_per_block: bool = True

    def __post_init__(self):
        # two diagnosis classes by design; any override is ignored
        self.num_classes = 2
        if len(self.stage_block_counts) != len(self.stage_channels):
            raise ConfigError("stage_block_counts and stage_channels must have equal length")
        if not self.stage_block_counts:
            raise ConfigError("at least one stage is required")
        if any(n < 1 for n in self.stage_block_counts):
            raise ConfigError("block counts must be >= 1")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage channels must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.input_size < 1:
            raise ConfigError("input_size must be positive")

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Small preset for tests and desk-scale runs."""
        return cls(
            stage_block_counts=[1, 1],
            stage_channels=[8, 16],
            input_size=64,
            cbam=CbamConfig(reduction_ratio=4, spatial_kernel=7),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["cbam"] = CbamConfig(**d.get("cbam", {}))
        return cls(**d)


class ChannelAttention(nn.Module):
    """Per-channel gate from spatially pooled statistics.

    A shared two-layer MLP (hidden size C / reduction) maps the spatial
    average and spatial maximum of each channel; the sigmoid of the summed
    outputs gates the channels.  Output shape (N, C, 1, 1), values in (0, 1).
    """

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction != 0:
            raise ConfigError(
                f"channel count {channels} not divisible by reduction ratio {reduction}"
            )
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, channels, bias=False)

    def forward(self, x):
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        gate = self.fc2(F.relu(self.fc1(avg))) + self.fc2(F.relu(self.fc1(mx)))
        return torch.sigmoid(gate)[:, :, None, None]


class SpatialAttention(nn.Module):
    """Per-pixel gate from channel-pooled statistics.

    The channel-wise mean and maximum maps are stacked and passed through a
    same-padded k x k convolution; the sigmoid gates every pixel.  Output
    shape (N, 1, H, W), values in (0, 1).
    """

    def __init__(self, kernel_size: int):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"spatial kernel must be odd, got {kernel_size}")
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class Cbam(nn.Module):
    """Channel attention then spatial attention, each multiplied in."""

    def __init__(self, channels: int, cfg: CbamConfig):
        super().__init__()
        self.channel = ChannelAttention(channels, cfg.reduction_ratio)
        self.spatial = SpatialAttention(cfg.spatial_kernel)

    def forward(self, x):
        x = x * self.channel(x)
        x = x * self.spatial(x)
        return x


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand, with attention before the skip addition."""

    def __init__(self, in_channels: int, mid_channels: int, stride: int,
                 cbam_cfg: CbamConfig, use_cbam: bool):
        super().__init__()
        out_channels = mid_channels * EXPANSION
        self.conv1 = nn.Conv2d(in_channels, mid_channels, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_channels)
        self.conv2 = nn.Conv2d(mid_channels, mid_channels, 3, stride=stride,
                               padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid_channels)
        self.conv3 = nn.Conv2d(mid_channels, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.cbam = Cbam(out_channels, cbam_cfg) if use_cbam else None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.downsample = None

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        if self.cbam is not None:
            out = self.cbam(out)
        identity = self.downsample(x) if self.downsample is not None else x
        return F.relu(out + identity)


class CbamResNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        stem_channels = cfg.stage_channels[0]
        self.stem_conv = nn.Conv2d(1, stem_channels, 7, stride=2, padding=3, bias=False)
        self.stem_bn = nn.BatchNorm2d(stem_channels)
        stages = []
        in_channels = stem_channels
        for s, (n_blocks, mid) in enumerate(zip(cfg.stage_block_counts, cfg.stage_channels)):
            blocks = []
            for b in range(n_blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                use_cbam = cfg.cbam_per_block or b == n_blocks - 1
                blocks.append(Bottleneck(in_channels, mid, stride, cfg.cbam, use_cbam))
                in_channels = mid * EXPANSION
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.dropout = nn.Dropout(cfg.dropout_p)
        self.fc = nn.Linear(in_channels, cfg.num_classes)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.cfg.input_size \
                or x.shape[3] != self.cfg.input_size:
            raise ShapeError(
                f"stem.conv expects (N, 1, {self.cfg.input_size}, {self.cfg.input_size}), "
                f"got {tuple(x.shape)}"
            )
        out = F.relu(self.stem_bn(self.stem_conv(x)))
        out = F.max_pool2d(out, 3, stride=2, padding=1)
        out = self.stages(out)
        out = out.mean(dim=(2, 3))
        out = self.dropout(out)
        return self.fc(out)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic initial parameter arrays keyed by state-dict path.

    Convolution and linear weights (and the final layer's bias) draw from a
    fan-in-scaled uniform; normalization scales start at 1, shifts at 0,
    running statistics at the identity.
    """
    template = CbamResNet(cfg).state_dict()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, tensor in template.items():
        shape = tuple(tensor.shape)
        if name.endswith("num_batches_tracked"):
            params[name] = np.zeros(shape, dtype=np.int64)
        elif name.endswith("running_mean"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name.endswith("running_var"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".weight") and len(shape) >= 2:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif name.endswith(".weight"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias") and _matching_weight_ndim(template, name) >= 2:
            fan_in = int(np.prod(tuple(template[name.replace(".bias", ".weight")].shape)[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return params


def _matching_weight_ndim(template: dict, bias_name: str) -> int:
    """Dimensionality of the weight paired with a bias, 0 when there is none.

    Distinguishes linear/conv biases (weight is a matrix or kernel, bias
    drawn like the weight) from normalization shifts (1-D weight, start 0).
    """
    weight = template.get(bias_name.replace(".bias", ".weight"))
    return 0 if weight is None else weight.ndim


def build_model(cfg: ModelConfig, seed: int | None = None,
                params: dict[str, np.ndarray] | None = None) -> CbamResNet:
    """Instantiate the network and load parameters (fresh ones if none given)."""
    model = CbamResNet(cfg)
    if params is None:
        params = init_params(cfg, 0 if seed is None else seed)
    load_params(model, params)
    model.eval()
    return model


def load_params(model: CbamResNet, params: dict[str, np.ndarray]) -> None:
    tensors = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in params.items()}
    model.load_state_dict(tensors)


def params_of(model: CbamResNet) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


CHECKPOINT_MAGIC = b"RADCLSCKPT1\n"


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    """Write config plus a flat name -> array map in a byte-stable format.

    Layout: magic, little-endian uint64 header length, JSON header
    (config and an ordered array index), then the raw row-major array
    bytes.  Re-saving a loaded checkpoint reproduces the file exactly.
    """
    index = []
    offset = 0
    blobs = []
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr)
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>=|"),
                      "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": cfg.to_dict(), "arrays": index},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a radcls checkpoint")
        raw = f.read(8)
        if len(raw) < 8:
            raise ValueError(f"truncated checkpoint: {path}")
        (header_len,) = struct.unpack("<Q", raw)
        header_bytes = f.read(header_len)
        if len(header_bytes) < header_len:
            raise ValueError(f"truncated checkpoint: {path}")
        header = json.loads(header_bytes.decode())
        data = f.read()
    cfg = ModelConfig.from_dict(header["config"])
    params: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + count * dtype.itemsize > len(data):
            raise ValueError(
                f"truncated checkpoint: array '{entry['name']}' extends past end of {path}"
            )
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        params[entry["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    return cfg, params


def layer_paths(model: CbamResNet) -> list[str]:
    """Names usable as feature-map hooks, outermost stages first."""
    return [name for name, _ in model.named_modules() if name]


def default_cam_layer(model: CbamResNet) -> str:
    return f"stages.{len(model.stages) - 1}"
