"""Parameter containers and the small layer set the architecture is built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, layer_norm


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class StateDictError(ShapeError):
    """Raised when a state dict does not fit a module; names the offending tensor."""

    def __init__(self, message: str, name: str):
        super().__init__(message)
        self.tensor_name = name


class Module:
    """Base class; parameters, buffers and children are discovered from attributes.

    Buffers are non-trainable arrays named in ``_buffers`` (e.g. running
    statistics) that still belong in a checkpoint.
    """

    _buffers: tuple[str, ...] = ()
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self.children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def buffers(self) -> list[np.ndarray]:
        """Buffer arrays (updated in place by their modules) in traversal order."""
        return [getattr(m, key) for _, m in self.named_modules() for key in m._buffers]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters and buffers in traversal order."""
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        self._collect_state("", out)
        return out

    def _collect_state(self, prefix, out):
        for key, value in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                out[name] = value.data
            elif isinstance(value, Module):
                value._collect_state(name, out)
        for key in self._buffers:
            out[f"{prefix}.{key}" if prefix else key] = getattr(self, key)

    def load_state_dict(self, state) -> None:
        own = self.state_dict()
        for name, target in own.items():
            if name not in state:
                raise StateDictError(f"missing tensor {name!r}", name)
            src = np.asarray(state[name])
            if src.shape != target.shape:
                raise StateDictError(
                    f"tensor {name!r} has shape {src.shape}, model expects {target.shape}", name
                )
        extra = [n for n in state if n not in own]
        if extra:
            raise StateDictError(f"unexpected tensor {extra[0]!r}", extra[0])
        for name, target in own.items():
            target[...] = np.asarray(state[name], dtype=target.dtype)

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (used for float64 gradient checks)."""
        for _, m in self.named_modules():
            for key, value in vars(m).items():
                if isinstance(value, Parameter):
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for key in m._buffers:
                setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# ---------------------------------------------------------------------------
# initializers


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(np.float32)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


# ---------------------------------------------------------------------------
# layers


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (out_dim, in_dim)))
        self.bias = Parameter(np.zeros(out_dim, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim, np.float32))
        self.bias = Parameter(np.zeros(dim, np.float32))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = True,
        zero_init: bool = False,
    ):
        if in_ch % groups or out_ch % groups:
            raise ShapeError(f"channels {in_ch}->{out_ch} not divisible by groups={groups}")
        shape = (out_ch, in_ch // groups, kernel, kernel)
        fan_in = (in_ch // groups) * kernel * kernel
        w = np.zeros(shape, np.float32) if zero_init else he_normal(rng, shape, fan_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, np.float32)) if bias else None
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(
            x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups
        )


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum = momentum
        self.eps = eps

    def state(self) -> ops.BatchNormState:
        return ops.BatchNormState(
            self.weight, self.bias, self.running_mean, self.running_var,
            self.momentum, self.eps, self.training,
        )

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.state())


class ConvBnAct(Module):
    """Convolution, batch norm, LeakyReLU."""

    def __init__(self, conv: Conv2d, slope: float = 0.01):
        self.conv = conv
        self.bn = BatchNorm2d(conv.weight.shape[0])
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(self.bn(self.conv(x)), self.slope)
