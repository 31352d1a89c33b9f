"""Parameter containers built on the autodiff primitives."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor, default_dtype, ops
from .autodiff.ops import BatchNormStats


class Module:
    """Attribute-discovered parameter tree, in the spirit of torch.nn.Module."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormStats]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, BatchNormStats):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data: np.ndarray, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, dtype=default_dtype(), name=name)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> None:
        self.weight = param(_uniform(rng, (d_in, d_out), d_in))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.bias_add(y, self.bias) if self.bias is not None else y

    def zero_(self) -> None:
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0


class LayerNorm(Module):
    def __init__(self, d: int) -> None:
        self.gain = param(np.ones(d))
        self.shift = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.shift)


class BatchNorm(Module):
    def __init__(self, d: int, momentum: float = 0.1) -> None:
        self.gain = param(np.ones(d))
        self.shift = param(np.zeros(d))
        self.stats = BatchNormStats(d, momentum, dtype=default_dtype())

    def __call__(self, x: Tensor, train: bool, mask=None) -> Tensor:
        return ops.batch_norm(x, self.gain, self.shift, self.stats, train, mask)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator) -> None:
        self.weight = param(_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.bias = param(np.zeros(c_out))
        self.stride = (stride, stride)
        self.padding = (kernel // 2, kernel // 2)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LSTMLayer(Module):
    """Single LSTM layer; gates packed as [input, forget, cell, output]."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator) -> None:
        self.hidden = hidden
        self.w_in = param(_uniform(rng, (d_in, 4 * hidden), hidden))
        self.w_rec = param(_uniform(rng, (hidden, 4 * hidden), hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.bias = param(b)

    def step(self, x: Tensor, state: Optional[tuple[Tensor, Tensor]]) -> tuple[Tensor, Tensor]:
        gates = ops.bias_add(ops.matmul(x, self.w_in), self.bias)
        if state is not None:
            gates = gates + ops.matmul(state[0], self.w_rec)
        h = self.hidden
        i = ops.sigmoid(gates[:, :h])
        f = ops.sigmoid(gates[:, h:2 * h])
        g = ops.tanh(gates[:, 2 * h:3 * h])
        o = ops.sigmoid(gates[:, 3 * h:])
        c = i * g if state is None else f * state[1] + i * g
        return o * ops.tanh(c), c


class LSTM(Module):
    def __init__(self, d_in: int, hidden: int, layers: int, rng: np.random.Generator) -> None:
        self.layers = [LSTMLayer(d_in if k == 0 else hidden, hidden, rng) for k in range(layers)]

    def step(self, x: Tensor, states):
        """One time step through every layer; ``states`` is a per-layer list or None."""
        new_states = []
        for k, layer in enumerate(self.layers):
            h, c = layer.step(x, None if states is None else states[k])
            new_states.append((h, c))
            x = h
        return x, new_states

    def __call__(self, x: Tensor) -> Tensor:
        """Run over (B, U, d_in) and return (B, U, hidden)."""
        states = None
        outs = []
        for u in range(x.shape[1]):
            h, states = self.step(x[:, u], states)
            outs.append(h)
        return ops.stack(outs, axis=1)
