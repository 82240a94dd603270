"""Minimal neural-network primitives on numpy arrays with explicit backward passes.

Every layer follows the same protocol: ``forward`` returns ``(output, cache)``
and ``backward(cache, d_output)`` returns the gradient w.r.t. the input while
accumulating parameter gradients into ``self.grads``. Nothing here depends on
an autodiff framework; the training stack drives these passes directly and the
gradient test harness checks them against finite differences.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from scipy.special import erf, expit

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def sigmoid(x: Array) -> Array:
    return expit(x)


def softmax(x: Array, axis: int = -1) -> Array:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: Array, axis: int = -1) -> Array:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def gelu(x: Array) -> Array:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: Array) -> Array:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


class Module:
    """Base class holding named parameters, their gradients, and child modules."""

    def __init__(self) -> None:
        self.params: dict[str, Array] = {}
        self.grads: dict[str, Array] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name: str, value: Array) -> Array:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def drop_param(self, name: str) -> None:
        del self.params[name]
        del self.grads[name]

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Array]:
        out: dict[str, Array] = {}
        for name, value in self.params.items():
            out[prefix + name if prefix else name] = value
        for child_name, child in self._children.items():
            child_prefix = f"{prefix}{child_name}." if prefix else f"{child_name}."
            out.update(child.named_parameters(child_prefix))
        return out

    def named_grads(self, prefix: str = "") -> dict[str, Array]:
        out: dict[str, Array] = {}
        for name, value in self.grads.items():
            out[prefix + name if prefix else name] = value
        for child_name, child in self._children.items():
            child_prefix = f"{prefix}{child_name}." if prefix else f"{child_name}."
            out.update(child.named_grads(child_prefix))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def zero_grad(self) -> None:
        for module in self.modules():
            for g in module.grads.values():
                g.fill(0.0)

    def load_state(self, state: dict[str, Array], prefix: str = "") -> None:
        """Copy values into existing parameter arrays (shapes must match)."""
        own = self.named_parameters(prefix)
        for name, param in own.items():
            if name not in state:
                raise KeyError(f"missing parameter in state: {name}")
            value = state[name]
            if value.shape != param.shape:
                raise ValueError(
                    f"shape mismatch for {name}: have {param.shape}, got {value.shape}"
                )
            param[...] = value.astype(param.dtype)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], bound: float, dtype) -> Array:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def normal_init(rng: np.random.Generator, shape: tuple[int, ...], std: float, dtype) -> Array:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    """Affine map ``y = x @ W + b`` with an optional low-rank adapter.

    When an adapter of rank r is attached the map becomes
    ``y = x @ W + b + scale * (x @ A) @ B`` with B initialised to zeros, so a
    fresh adapter leaves outputs unchanged. ``merge_adapter`` folds the adapter
    into W and removes it.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        dtype=np.float64,
        bias: bool = True,
        init: str = "uniform",
        init_std: float = 0.02,
    ) -> None:
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.has_bias = bias
        if init == "uniform":
            bound = 1.0 / math.sqrt(d_in)
            self.add_param("W", uniform_init(rng, (d_in, d_out), bound, dtype))
        elif init == "normal":
            self.add_param("W", normal_init(rng, (d_in, d_out), init_std, dtype))
        elif init == "identity":
            if d_in != d_out:
                raise ValueError("identity init requires d_in == d_out")
            self.add_param("W", np.eye(d_in, dtype=dtype))
        else:
            raise ValueError(f"unknown init: {init}")
        if bias:
            self.add_param("b", np.zeros(d_out, dtype=dtype))
        self.adapter_rank = 0
        self.adapter_scale = 1.0

    @property
    def has_adapter(self) -> bool:
        return self.adapter_rank > 0

    def attach_adapter(self, rank: int, rng: np.random.Generator, scale: float | None = None) -> None:
        if self.has_adapter:
            raise ValueError("adapter already attached")
        if rank < 1:
            raise ValueError("adapter rank must be >= 1")
        dtype = self.params["W"].dtype
        bound = 1.0 / math.sqrt(self.d_in)
        self.add_param("lora_A", uniform_init(rng, (self.d_in, rank), bound, dtype))
        self.add_param("lora_B", np.zeros((rank, self.d_out), dtype=dtype))
        self.adapter_rank = rank
        # scale alpha/r with alpha = r unless overridden
        self.adapter_scale = 1.0 if scale is None else float(scale)

    def detach_adapter(self) -> None:
        if not self.has_adapter:
            raise ValueError("no adapter attached")
        self.drop_param("lora_A")
        self.drop_param("lora_B")
        self.adapter_rank = 0

    def merge_adapter(self) -> None:
        if not self.has_adapter:
            raise ValueError("no adapter attached")
        delta = self.adapter_scale * (self.params["lora_A"] @ self.params["lora_B"])
        self.params["W"] += delta.astype(self.params["W"].dtype)
        self.detach_adapter()

    def forward(self, x: Array):
        y = x @ self.params["W"]
        cache_xa = None
        if self.has_adapter:
            xa = x @ self.params["lora_A"]
            y = y + self.adapter_scale * (xa @ self.params["lora_B"])
            cache_xa = xa
        if self.has_bias:
            y = y + self.params["b"]
        return y, (x, cache_xa)

    def backward(self, cache, dy: Array) -> Array:
        x, xa = cache
        x2d = x.reshape(-1, self.d_in)
        dy2d = dy.reshape(-1, self.d_out)
        self.grads["W"] += x2d.T @ dy2d
        if self.has_bias:
            self.grads["b"] += dy2d.sum(axis=0)
        dx2d = dy2d @ self.params["W"].T
        if self.has_adapter:
            xa2d = xa.reshape(-1, self.adapter_rank)
            self.grads["lora_B"] += self.adapter_scale * (xa2d.T @ dy2d)
            d_xa = self.adapter_scale * (dy2d @ self.params["lora_B"].T)
            self.grads["lora_A"] += x2d.T @ d_xa
            dx2d = dx2d + d_xa @ self.params["lora_A"].T
        return dx2d.reshape(x.shape)


class Embedding(Module):
    """Row-lookup table with scatter-add backward."""

    def __init__(self, num: int, dim: int, rng: np.random.Generator, dtype=np.float64, std: float = 0.02) -> None:
        super().__init__()
        self.num = num
        self.dim = dim
        self.add_param("table", normal_init(rng, (num, dim), std, dtype))

    def forward(self, ids: Array):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num):
            raise IndexError(f"token id out of range [0, {self.num})")
        return self.params["table"][ids], ids

    def backward(self, cache, dy: Array) -> None:
        ids = cache
        np.add.at(self.grads["table"], ids.reshape(-1), dy.reshape(-1, self.dim))


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5) -> None:
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.add_param("g", np.ones(dim, dtype=dtype))
        self.add_param("b", np.zeros(dim, dtype=dtype))

    def forward(self, x: Array):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        y = xhat * self.params["g"] + self.params["b"]
        return y, (xhat, inv)

    def backward(self, cache, dy: Array) -> Array:
        xhat, inv = cache
        flat_dy = dy.reshape(-1, self.dim)
        flat_xhat = xhat.reshape(-1, self.dim)
        self.grads["g"] += (flat_dy * flat_xhat).sum(axis=0)
        self.grads["b"] += flat_dy.sum(axis=0)
        dxhat = dy * self.params["g"]
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (dxhat - m1 - xhat * m2) * inv
