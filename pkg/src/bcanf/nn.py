"""Tensor primitives: convolution and GDN layers, a parameter store with Adam,
and the little-endian ``BCNP`` checkpoint format.

Tensors are ``torch.Tensor`` objects of shape (batch, channels, height, width).
Autograd supplies reverse-mode gradients; the optimizer state and checkpoint
layout live here so the rest of the package never touches ``torch.optim``.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ContractError",
    "ConvLayer",
    "GdnLayer",
    "ParamStore",
    "conv2d",
    "gdn",
    "backward",
    "adam_step",
    "check_finite",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"BCNP"
CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    """Raised when an operation receives inputs violating its preconditions."""


def check_finite(x: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"{name} contains NaN or Inf")
    return x


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class ConvLayer(nn.Module):
    """A 2-D (optionally transposed) convolution with stored stride/padding.

    Transposed layers use ``output_padding = stride - 1`` so that a stride-s
    layer exactly undoes the spatial reduction of a matching forward layer.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1,
                 padding: int | None = None, transposed: bool = False):
        super().__init__()
        if stride < 1:
            raise ContractError("stride must be positive")
        if padding is None:
            padding = kernel_size // 2
        if padding < 0:
            raise ContractError("padding must be non-negative")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.transposed = transposed
        # weight is always stored (out_ch, in_ch, kH, kW)
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        fan_in = self.in_ch * self.kernel_size ** 2
        if self.transposed:
            fan_in = max(1, fan_in // (self.stride ** 2))
        bound = math.sqrt(3.0 / fan_in)
        with torch.no_grad():
            self.weight.uniform_(-bound, bound)
            self.bias.zero_()

    def zero_(self) -> "ConvLayer":
        with torch.no_grad():
            self.weight.zero_()
            self.bias.zero_()
        return self

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        if self.transposed:
            op = s - 1
            return (h - 1) * s - 2 * p + k + op, (w - 1) * s - 2 * p + k + op
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self)

    def extra_repr(self) -> str:
        kind = "T" if self.transposed else ""
        return f"{kind}conv {self.in_ch}->{self.out_ch}, k={self.kernel_size}, s={self.stride}, p={self.padding}"


def conv2d(x: torch.Tensor, layer: ConvLayer) -> torch.Tensor:
    if x.dim() != 4:
        raise ContractError(f"expected a 4-D tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != layer.in_ch:
        raise ContractError(f"input has {x.shape[1]} channels, layer expects {layer.in_ch}")
    if layer.transposed:
        # conv_transpose2d wants (in_ch, out_ch, kH, kW)
        return F.conv_transpose2d(x, layer.weight.transpose(0, 1), layer.bias, stride=layer.stride,
                                  padding=layer.padding, output_padding=layer.stride - 1)
    h, w = x.shape[-2:]
    if h + 2 * layer.padding < layer.kernel_size or w + 2 * layer.padding < layer.kernel_size:
        raise ContractError(f"spatial dims {(h, w)} smaller than kernel {layer.kernel_size}")
    return F.conv2d(x, layer.weight, layer.bias, stride=layer.stride, padding=layer.padding)


class GdnLayer(nn.Module):
    """Generalized divisive normalization, ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)``.

    beta is stored through a softplus and gamma through a square, which keeps
    beta > 0 and gamma >= 0 for any raw parameter values. ``inverse=True``
    multiplies by the same factor instead of dividing.
    """

    def __init__(self, channels: int, inverse: bool = False, gamma_init: float = 0.1):
        super().__init__()
        self.channels = channels
        self.inverse = inverse
        self.beta_raw = nn.Parameter(torch.full((channels,), _softplus_inverse(1.0)))
        self.gamma_raw = nn.Parameter(math.sqrt(gamma_init) * torch.eye(channels))

    @property
    def beta(self) -> torch.Tensor:
        return F.softplus(self.beta_raw) + 1e-6

    @property
    def gamma(self) -> torch.Tensor:
        return self.gamma_raw ** 2

    def set_parameters(self, beta: torch.Tensor, gamma: torch.Tensor) -> "GdnLayer":
        beta = torch.as_tensor(beta, dtype=self.beta_raw.dtype)
        gamma = torch.as_tensor(gamma, dtype=self.gamma_raw.dtype)
        with torch.no_grad():
            self.beta_raw.copy_(torch.log(torch.expm1(beta - 1e-6)))
            self.gamma_raw.copy_(gamma.clamp_min(0).sqrt())
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gdn(x, self)


def gdn(x: torch.Tensor, layer: GdnLayer) -> torch.Tensor:
    if x.shape[1] != layer.channels:
        raise ContractError(f"input has {x.shape[1]} channels, GDN expects {layer.channels}")
    gamma = layer.gamma.view(layer.channels, layer.channels, 1, 1)
    norm = torch.sqrt(F.conv2d(x * x, gamma, layer.beta))
    return x * norm if layer.inverse else x / norm


def backward(loss: torch.Tensor) -> None:
    """Accumulate gradients of a scalar loss into the leaf parameters."""
    if loss.numel() != 1:
        raise ContractError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


class ParamStore:
    """Named trainable parameters plus Adam moment state.

    Parameters are shared with the modules they came from, so an update here
    is immediately visible to the networks.
    """

    def __init__(self, params: "OrderedDict[str, torch.Tensor] | None" = None):
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.step = 0
        for name, p in (params or {}).items():
            self.add(name, p)

    @classmethod
    def from_modules(cls, **modules: nn.Module) -> "ParamStore":
        store = cls()
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                store.add(f"{prefix}.{name}", p)
        return store

    def add(self, name: str, p: torch.Tensor) -> None:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if any(q is p for q in self.params.values()):
            raise ContractError(f"parameter {name!r} already registered under another name")
        self.params[name] = p

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def num_values(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def grads(self) -> dict[str, torch.Tensor]:
        return {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in self}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update; clears gradients afterwards."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for name, p in store:
            g = p.grad
            if g is None:
                g = torch.zeros_like(p)
            m = store.m.get(name)
            if m is None:
                m = store.m[name] = torch.zeros_like(p)
                store.v[name] = torch.zeros_like(p)
            v = store.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    store.zero_grad()
    return store


def save_checkpoint(path: str | Path, params: "ParamStore | dict[str, torch.Tensor]") -> None:
    items = list(params.params.items() if isinstance(params, ParamStore) else params.items())
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<BI", CHECKPOINT_VERSION, len(items))
    for name, t in items:
        raw = name.encode("utf-8")
        shape = tuple(t.shape)
        if len(shape) > 4:
            raise ContractError(f"parameter {name!r} has more than 4 dims")
        shape = (1,) * (4 - len(shape)) + shape
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<4I", *shape)
        out += t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> "OrderedDict[str, torch.Tensor]":
    """Read a checkpoint; shapes come back padded to 4-D."""
    import numpy as np

    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a BCNP checkpoint (bad magic)")
    if len(data) < 9:
        raise ValueError("truncated checkpoint header")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 9
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            shape = struct.unpack_from("<4I", data, pos)
            pos += 16
            size = math.prod(shape)
            if pos + 4 * size > len(data):
                raise ValueError("truncated checkpoint payload")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except struct.error as exc:
        raise ValueError("truncated checkpoint") from exc
    return out


def load_into(module: nn.Module, tensors: "dict[str, torch.Tensor]", prefix: str = "") -> None:
    """Copy checkpoint tensors into a module's parameters, matching by name."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = f"{prefix}{name}"
            if key not in tensors:
                raise KeyError(f"checkpoint is missing parameter {key!r}")
            src = tensors[key]
            if src.numel() != p.numel():
                raise ContractError(f"shape mismatch for {key!r}: {tuple(src.shape)} vs {tuple(p.shape)}")
            p.copy_(src.reshape(p.shape).to(p.dtype))
