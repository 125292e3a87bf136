"""Parameter containers and the small set of layers the networks use.

Modules register parameters, buffers and child modules by attribute
assignment; checkpoint paths are the dotted attribute chains, so child
naming here defines the on-disk parameter namespace.
"""

from __future__ import annotations

import math
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Buffer:
    """A non-trainable array that still belongs in checkpoints (e.g. anchors)."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)


class Module:
    def __init__(self):
        d = self.__dict__
        d["_parameters"] = {}
        d["_modules"] = {}
        d["_buffers"] = {}

    def __setattr__(self, name, value):
        if "_parameters" in self.__dict__:
            for reg in (self._parameters, self._modules, self._buffers):
                reg.pop(name, None)
            if isinstance(value, Parameter):
                self._parameters[name] = value
            elif isinstance(value, Module):
                self._modules[name] = value
            elif isinstance(value, Buffer):
                self._buffers[name] = value
        self.__dict__[name] = value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {path: p.data for path, p in self.named_parameters(prefix)}
        state.update({path: b.data for path, b in self.named_buffers(prefix)})
        return state

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = ""):
        own = dict(self.named_parameters(prefix))
        bufs = dict(self.named_buffers(prefix))
        for path, target in list(own.items()) + list(bufs.items()):
            if path not in arrays:
                raise DimensionError(f"checkpoint is missing parameter '{path}'")
            arr = np.asarray(arrays[path], dtype=np.float64)
            if arr.shape != target.data.shape:
                raise DimensionError(
                    f"parameter '{path}' shape {arr.shape} != expected {target.data.shape}"
                )
            target.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules: Iterable[Module] = ()):
        super().__init__()
        self._order: list[str] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        name = str(len(self._order))
        setattr(self, name, module)
        self._order.append(name)

    def __iter__(self):
        return (self._modules[n] for n in self._order)

    def __len__(self):
        return len(self._order)

    def __getitem__(self, i: int) -> Module:
        return self._modules[self._order[i]]


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(fan_in_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def zero_init(self) -> "Linear":
        self.weight.data[:] = 0.0
        if self.bias is not None:
            self.bias.data[:] = 0.0
        return self

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class MLP(Module):
    """Linear stack with ReLU between layers (and optionally after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, final_activation: bool = False):
        super().__init__()
        self.layers = ModuleList(
            Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])
        )
        self.final_activation = final_activation

    def __call__(self, x) -> Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1 or self.final_activation:
                x = T.relu(x)
        return x


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"conv kernel size must be odd, got {kernel_size}")
        self.weight = Parameter(
            fan_in_uniform(rng, (kernel_size, in_channels, out_channels), kernel_size * in_channels)
        )
        self.bias = Parameter(np.zeros(out_channels))

    def __call__(self, x) -> Tensor:
        return T.conv1d(x, self.weight, self.bias)


class LSTM(Module):
    """Stacked LSTM; forward returns (outputs, last)."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int, rng: np.random.Generator):
        super().__init__()
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        for li in range(num_layers):
            in_sz = input_size if li == 0 else hidden_size
            setattr(self, f"wx{li}", Parameter(fan_in_uniform(rng, (in_sz, 4 * hidden_size), in_sz)))
            setattr(self, f"wh{li}", Parameter(fan_in_uniform(rng, (hidden_size, 4 * hidden_size), hidden_size)))
            setattr(self, f"b{li}", Parameter(np.zeros(4 * hidden_size)))

    def layer_weights(self):
        return [
            (getattr(self, f"wx{li}"), getattr(self, f"wh{li}"), getattr(self, f"b{li}"))
            for li in range(self.num_layers)
        ]

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        return T.lstm_forward(x, self.layer_weights())


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiheadAttention(Module):
    """Projections + multi-head attention; keeps the last weight matrix around
    so tests can assert sparsity patterns."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, query, key, value, mask=None, pe_q=None, pe_k=None) -> Tensor:
        q_in = T.add(query, pe_q) if pe_q is not None else query
        k_in = T.add(key, pe_k) if pe_k is not None else key
        out, w = T.scaled_dot_attention(
            self.q(q_in),
            self.k(k_in),
            self.v(value),
            mask=mask,
            heads=self.heads,
            out_weight=self.out.weight,
            out_bias=self.out.bias,
            return_weights=True,
        )
        self.last_weights = w
        return out
