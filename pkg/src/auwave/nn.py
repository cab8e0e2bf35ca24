"""Parameter containers and the generic layers used by both networks."""
from __future__ import annotations

from typing import Callable, Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor.

    Storage is materialised on first access from a seeded initialiser, so a
    very wide configuration can be built and introspected without
    allocating its weights.
    """

    def __init__(self, shape: tuple, init: Callable[[], np.ndarray]):
        self._shape = tuple(int(s) for s in shape)
        self._init = init
        self._data: Optional[np.ndarray] = None
        self.requires_grad = True
        self.grad: Optional[np.ndarray] = None
        self._parents = ()
        self._backward = None
        self._op = "param"
        self._consumed = False

    @property
    def data(self) -> np.ndarray:
        if self._data is None:
            arr = self._init()
            assert arr.shape == self._shape
            self._data = arr
        return self._data

    @data.setter
    def data(self, value):
        value = np.asarray(value)
        if value.shape != self._shape:
            raise ValueError(f"parameter shape {self._shape} cannot take {value.shape}")
        self._data = value

    @property
    def shape(self) -> tuple:
        return self._shape

    @property
    def size(self) -> int:
        return int(np.prod(self._shape))

    @property
    def materialized(self) -> bool:
        return self._data is not None


class ParamFactory:
    """Creates parameters whose initial values depend only on (seed, creation index)."""

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.count = 0

    def _rng(self) -> Callable[[], np.random.Generator]:
        idx = self.count
        self.count += 1
        return lambda: np.random.default_rng([self.seed, idx])

    def he_uniform(self, shape, fan_in: int, gain: float = 1.0) -> Parameter:
        make_rng = self._rng()
        bound = gain * np.sqrt(6.0 / fan_in)
        dtype = self.dtype

        def init():
            return make_rng().uniform(-bound, bound, size=shape).astype(dtype)

        return Parameter(shape, init)

    def constant(self, shape, value: float) -> Parameter:
        self._rng()
        dtype = self.dtype
        return Parameter(shape, lambda: np.full(shape, value, dtype=dtype))


class Module:
    """Minimal module tree: parameters, buffers and a train/eval flag."""

    training = True
    _buffer_names: tuple = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for b in self._buffer_names:
            yield f"{prefix}{b}", getattr(self, b)
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by dotted name."""
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        state.update({n: b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for n, p in params.items():
            p.data = np.array(state[n], dtype=state[n].dtype, copy=True)
        for n, b in buffers.items():
            b[...] = state[n]


class Linear(Module):
    def __init__(self, factory: ParamFactory, n_in: int, n_out: int, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = factory.he_uniform((n_out, n_in), fan_in=n_in)
        self.bias = factory.constant((n_out,), 0.0) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, factory: ParamFactory, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True,
                 gain: float = 1.0):
        if kernel not in (1, 3):
            raise ConfigError(f"kernel size {kernel} not supported")
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = factory.he_uniform((c_out, c_in, kernel, kernel),
                                          fan_in=c_in * kernel * kernel, gain=gain)
        self.bias = factory.constant((c_out,), 0.0) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, factory: ParamFactory, channels: int, groups: int = 32, eps: float = 1e-5):
        if channels % groups:
            raise ConfigError(f"{channels} channels not divisible by {groups} groups")
        self.channels, self.groups, self.eps = channels, groups, eps
        self.scale = factory.constant((channels,), 1.0)
        self.shift = factory.constant((channels,), 0.0)

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.scale, self.shift, self.eps)


class BatchNorm1d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, factory: ParamFactory, features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.features, self.momentum, self.eps = features, momentum, eps
        self.scale = factory.constant((features,), 1.0)
        self.shift = factory.constant((features,), 0.0)
        self.running_mean = np.zeros(features, dtype=factory.dtype)
        self.running_var = np.ones(features, dtype=factory.dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm_1d(x, self.scale, self.shift, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)
