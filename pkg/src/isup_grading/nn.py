"""Small convolutional encoder, MLP heads, Adam with cosine annealing, EMA and checkpoints.

Parameter sets are plain ``dict[str, torch.Tensor]`` keyed by the module's
parameter names; every training stage in the package moves weights around in
that form.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .errors import CheckpointError, NumericError, ShapeError

ParamSet = "OrderedDict[str, torch.Tensor]"

_ACTIVATIONS = {"silu": nn.SiLU, "relu": nn.ReLU, "gelu": nn.GELU, "tanh": nn.Tanh}


@dataclass(frozen=True)
class EncoderSpec:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel_size: int = 3
    stride: int = 2
    # average-pool factor applied to the 256x256 input before the first conv
    input_pool: int = 4
    groups: int = 4
    pool: str = "avg"
    embedding_dim: int = 128
    activation: str = "silu"

    def __post_init__(self):
        if self.embedding_dim < 8:
            raise ValueError("embedding_dim must be >= 8")
        if self.pool not in ("avg", "max"):
            raise ValueError(f"unknown global pool {self.pool!r}")


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple[int, ...]
    activation: str = "silu"
    # "batch" puts BatchNorm1d before each hidden activation
    norm: str = "none"

    def __post_init__(self):
        if self.norm not in ("none", "batch"):
            raise ValueError(f"unknown MLP norm {self.norm!r}")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec = EncoderSpec()):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        cin = 3
        for cout in spec.channels:
            layers += [
                nn.Conv2d(cin, cout, spec.kernel_size, spec.stride, padding=spec.kernel_size // 2),
                nn.GroupNorm(min(spec.groups, cout), cout),
                _ACTIVATIONS[spec.activation](),
            ]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.proj = nn.Linear(cin, spec.embedding_dim) if cin != spec.embedding_dim else nn.Identity()

    def stem(self, x) -> torch.Tensor:
        """Pixels -> pooled NCHW input of the conv trunk. Parameter-free, so callers may cache it."""
        x = to_nchw(x, _dtype_of(self))
        if self.spec.input_pool > 1:
            x = nn.functional.avg_pool2d(x, self.spec.input_pool)
        return x

    def trunk(self, h: torch.Tensor) -> torch.Tensor:
        h = self.features(h)
        h = h.mean(dim=(2, 3)) if self.spec.pool == "avg" else h.amax(dim=(2, 3))
        return self.proj(h)

    def forward(self, x) -> torch.Tensor:
        return self.trunk(self.stem(x))


class MLP(nn.Module):
    def __init__(self, spec: MLPSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        w = spec.widths
        for i in range(len(w) - 1):
            hidden = i < len(w) - 2
            # a bias straight before BatchNorm is cancelled by the mean subtraction
            layers.append(nn.Linear(w[i], w[i + 1], bias=not (hidden and spec.norm == "batch")))
            if hidden:
                if spec.norm == "batch":
                    layers.append(nn.BatchNorm1d(w[i + 1]))
                layers.append(_ACTIVATIONS[spec.activation]())
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _dtype_of(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def to_nchw(batch, dtype=torch.float32) -> torch.Tensor:
    """B x H x W x 3 pixels (uint8 or [0, 1] floats) -> B x 3 x H x W tensor in [0, 1]."""
    if isinstance(batch, np.ndarray):
        scale = batch.dtype == np.uint8
        t = torch.from_numpy(np.ascontiguousarray(batch))
    else:
        t = batch
        scale = t.dtype == torch.uint8
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise ShapeError(f"expected a B x H x W x 3 batch, got shape {tuple(t.shape)}")
    if t.shape[-1] == 3:
        t = t.permute(0, 3, 1, 2)
    elif t.shape[1] != 3:
        raise ShapeError(f"expected 3 colour channels, got shape {tuple(t.shape)}")
    t = t.to(dtype)
    if scale:
        t = t / 255.0
    return t.contiguous()


def param_set(module: nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    """Live (shared-storage) parameter tensors of ``module``."""
    return OrderedDict((prefix + n, p) for n, p in module.named_parameters())


def clone_params(params: Mapping[str, torch.Tensor]) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((n, p.detach().clone()) for n, p in params.items())


def sub_params(params: Mapping[str, torch.Tensor], prefix: str) -> "OrderedDict[str, torch.Tensor]":
    """Entries under ``prefix.``, with the prefix stripped."""
    cut = len(prefix) + 1
    return OrderedDict((n[cut:], p) for n, p in params.items() if n.startswith(prefix + "."))


def check_same_shapes(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> None:
    if list(a) != list(b):
        raise ShapeError(f"parameter names differ: {sorted(set(a) ^ set(b))}")
    for n in a:
        if a[n].shape != b[n].shape:
            raise ShapeError(f"{n}: shape {tuple(a[n].shape)} != {tuple(b[n].shape)}")


def forward_embed(encoder: Encoder, params: Mapping[str, torch.Tensor] | None, patch_batch) -> torch.Tensor:
    """B x E embeddings of a patch batch, optionally under substituted parameters."""
    if params is None:
        return encoder(patch_batch)
    return functional_call(encoder, dict(params), (patch_batch,))


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class OptimizerState:
    base_lr: float = 3e-4
    total_steps: int = 1
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)

    @property
    def lr(self) -> float:
        """Learning rate the next update will use."""
        return cosine_lr(self.step, self.total_steps, self.base_lr, self.min_lr)

    def schedule_json(self) -> dict:
        return {k: getattr(self, k) for k in ("base_lr", "total_steps", "min_lr", "beta1", "beta2", "eps", "step")}


@torch.no_grad()
def adam_step(opt: OptimizerState, params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor]):
    """One Adam update in place on ``params`` using the scheduled learning rate.

    Missing gradients (parameters unused by the loss) are treated as zero.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}", name=name)
    lr = opt.lr
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None:
            m = torch.zeros_like(p)
            v = torch.zeros_like(p)
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        opt.m[name], opt.v[name] = m, v
        p -= lr * (m / bc1) / (torch.sqrt(v / bc2) + opt.eps)
    return opt, params


def grads_of(params: Mapping[str, torch.Tensor]) -> "OrderedDict[str, torch.Tensor | None]":
    return OrderedDict((n, p.grad) for n, p in params.items())


@torch.no_grad()
def ema_update(teacher: Mapping[str, torch.Tensor], student: Mapping[str, torch.Tensor], momentum: float):
    """teacher <- momentum * teacher + (1 - momentum) * student, in place; returns ``teacher``."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    check_same_shapes(teacher, student)
    for name, t in teacher.items():
        t.copy_(t * momentum + student[name] * (1.0 - momentum))
    return teacher


_MAGIC = b"ISUPCKPT"


def save_checkpoint(path, arrays: Mapping[str, torch.Tensor], header: dict) -> Path:
    """Write ``MAGIC | u64 header length | JSON header | little-endian float32 blobs``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, t in arrays.items():
        a = t.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(a).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "arrays": entries}, sort_keys=True, default=_json_default).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_spec: dict | None = None):
    """Return ``(header, arrays)``; raise CheckpointError when ``expect_spec`` disagrees with the file."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    if expect_spec is not None:
        stored = header.get("spec")
        want = json.loads(json.dumps(expect_spec, sort_keys=True, default=_json_default))
        if stored != want:
            raise CheckpointError(f"checkpoint spec mismatch in {path}: stored {stored}, expected {want}")
    base = 16 + hlen
    arrays = OrderedDict()
    for e in header.pop("arrays"):
        start = base + e["offset"]
        a = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=start).reshape(e["shape"])
        arrays[e["name"]] = torch.from_numpy(a.astype(np.float32))
    return header, arrays


def _json_default(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def spec_json(obj) -> dict:
    return json.loads(json.dumps(obj, sort_keys=True, default=_json_default))


@torch.no_grad()
def load_into(params: Mapping[str, torch.Tensor], arrays: Mapping[str, torch.Tensor], prefix: str = "") -> None:
    for name, p in params.items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {key!r}")
        if tuple(arrays[key].shape) != tuple(p.shape):
            raise CheckpointError(f"{key}: checkpoint shape {tuple(arrays[key].shape)} != {tuple(p.shape)}")
        p.copy_(arrays[key].to(p.dtype))


def pool_pixels(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsample of uint8 pixels (..., H, W, 3), rounded back to uint8."""
    if factor == 1:
        return np.asarray(pixels)
    p = np.asarray(pixels)
    h, w = p.shape[-3] // factor, p.shape[-2] // factor
    blocks = p.reshape(*p.shape[:-3], h, factor, w, factor, 3).astype(np.float32)
    return np.rint(blocks.mean(axis=(-4, -2))).astype(np.uint8)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
