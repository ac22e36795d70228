"""Parameter containers shared by layers, assignment networks and heads."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


class Module:
    """Minimal parameter tree: tensors and sub-modules found in ``__dict__``."""

    training = True

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{k}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def modules(self):
        yield self
        for val in self.__dict__.values():
            items = val.values() if isinstance(val, dict) else val if isinstance(val, (list, tuple)) else [val]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, m in self._named_modules():
            for key, arr in getattr(m, "_buffers", {}).items():
                out[f"{name}{key}"] = getattr(m, key)
        return out

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for key, val in self.__dict__.items():
            if isinstance(val, Module):
                yield from val._named_modules(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{key}.{i}.")
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{key}.{k}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())
        for k, arr in self.buffers().items():
            out[k] = np.array(arr, copy=True)
        return out

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        for k, p in params.items():
            p.data[...] = state[k]
        for name, m in self._named_modules():
            for key in getattr(m, "_buffers", {}):
                setattr(m, key, np.array(state[f"{name}{key}"], dtype=np.float64))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = glorot(rng, d_in, d_out)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class BatchNorm(Module):
    """Batch normalisation over the node axis with running statistics.

    Running estimates follow ``r <- momentum * r + (1 - momentum) * batch``.
    """

    _buffers = {"running_mean": None, "running_var": None}

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x) -> Tensor:
        if self.training:
            out, mu, var = ad.batch_norm(x, self.gamma, self.beta, self.eps)
            if ad.grad_enabled():
                m = self.momentum
                self.running_mean = m * self.running_mean + (1 - m) * mu
                self.running_var = m * self.running_var + (1 - m) * var
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return (x - self.running_mean) * inv * self.gamma + self.beta
