"""Parameter containers and the basic layers assembled into models."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor owned by a :class:`Module`."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Tree of named parameters, buffers and child modules.

    Attribute assignment registers parameters and submodules in order, which
    fixes the dotted names used by weight archives.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", False)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value)

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    # -- traversal --------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules():
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules():
            for name, b in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), b

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters then buffers of each module, in registration order."""
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for mod_name, mod in self.named_modules():
            for name, p in mod._params.items():
                state[f"{mod_name}.{name}" if mod_name else name] = p.data
            for name, b in mod._buffers.items():
                state[f"{mod_name}.{name}" if mod_name else name] = b
        return state

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy arrays into same-named parameters/buffers (shapes must match)."""
        for mod_name, mod in self.named_modules():
            for store in (mod._params, mod._buffers):
                for name in list(store):
                    full = f"{mod_name}.{name}" if mod_name else name
                    if full not in arrays:
                        continue
                    value = np.asarray(arrays[full])
                    current = store[name].data if isinstance(store[name], Tensor) else store[name]
                    if value.shape != current.shape:
                        raise DimensionError(f"{full}: shape {value.shape} != {current.shape}")
                    current[...] = value

    # -- mode -------------------------------------------------------------
    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def train(self, flag: bool = True) -> Module:
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", flag)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def astype(self, dtype) -> Module:
        """Cast every parameter and buffer in place (used for float64 gradient checks)."""
        for _, mod in self.named_modules():
            for p in mod._params.values():
                p.data = p.data.astype(dtype)
            for name in list(mod._buffers):
                mod._buffers[name] = mod._buffers[name].astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *children: Module):
        super().__init__()
        for i, child in enumerate(children):
            setattr(self, str(i), child)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i: int) -> Module:
        return list(self._modules.values())[i]

    def forward(self, x, **kwargs):
        for child in self._modules.values():
            x = child(x, **kwargs)
        return x


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------
def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def kaiming_fan_out(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    cout, _, kh, kw = shape
    fan_out = cout * kh * kw // groups
    return rng.normal(0.0, math.sqrt(2.0 / fan_out), size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------
class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int, stride: int = 1, padding: int | None = None,
                 groups: int = 1, bias: bool = False):
        super().__init__()
        if cin % groups or cout % groups:
            raise ConfigError(f"groups={groups} must divide {cin} and {cout}")
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        self.weight = Parameter(kaiming_fan_out(rng, (cout, cin // groups, kernel, kernel), groups))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x, **_):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))
        self.frozen = False

    def forward(self, x, **_):
        mode = "eval" if self.frozen else self.mode
        return ops.batch_norm2d(
            x, self.weight, self.bias, self._buffers["running_mean"], self._buffers["running_var"], mode=mode
        )


class ConvBNAct(Module):
    """Convolution, batch norm, then an optional SiLU/ReLU."""

    def __init__(self, rng, cin, cout, kernel, stride=1, groups=1, act: str | None = "silu"):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, kernel, stride=stride, groups=groups)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x, **_):
        x = self.bn(self.conv(x))
        return activation(x, self.act)


def activation(x: Tensor, name: str | None) -> Tensor:
    if name is None:
        return x
    if name == "silu":
        return ops.silu(x)
    if name == "relu":
        return ops.relu(x)
    raise ConfigError(f"unknown activation {name!r}")


class Linear(Module):
    """Dense layer with weight stored [in, out]."""

    def __init__(self, rng, fin: int, fout: int, bias: bool = True, std: float = 0.02):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (fin, fout), std))
        self.bias = Parameter(np.zeros(fout, np.float32)) if bias else None

    def forward(self, x, **_):
        return ops.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, num_groups: int = 1, channels_last: bool = False):
        super().__init__()
        self.num_groups = num_groups
        self.channels_last = channels_last
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))

    def forward(self, x, **_):
        return ops.group_norm(x, self.num_groups, self.weight, self.bias, channels_last=self.channels_last)


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, rng=None, **_):
        return ops.dropout(x, self.p, self.mode, rng)
