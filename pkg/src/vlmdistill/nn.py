"""Minimal numpy layers with explicit backward passes.

Every layer registers its weights in a shared :class:`ParameterStore` under a
dotted name, caches what it needs during ``forward`` and accumulates weight
gradients into the store during ``backward``. A layer is called at most once
per forward pass.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigurationError, StateError

QUERY_INIT_STD = 0.02


class ParameterStore:
    """Named parameters with gradient buffers of the same shape."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def get_or_create(self, name: str, shape: tuple[int, ...], init: Callable[[], np.ndarray]) -> np.ndarray:
        if name in self.params:
            if self.params[name].shape != tuple(shape):
                raise ConfigurationError(
                    f"{name}: stored shape {self.params[name].shape} does not match {tuple(shape)}"
                )
            return self.params[name]
        value = np.asarray(init(), dtype=float)
        assert value.shape == tuple(shape), (name, value.shape, shape)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def flatten(self) -> tuple[np.ndarray, np.ndarray]:
        """Move every parameter and gradient into one contiguous buffer each.

        Entries become views into the buffers, so optimizers can update the
        whole store with a handful of vector operations.
        """
        total = self.num_parameters()
        flat_p, flat_g = np.empty(total), np.zeros(total)
        offset = 0
        for name, value in self.params.items():
            n = value.size
            flat_p[offset : offset + n] = value.ravel()
            flat_g[offset : offset + n] = self.grads[name].ravel()
            self.params[name] = flat_p[offset : offset + n].reshape(value.shape)
            self.grads[name] = flat_g[offset : offset + n].reshape(value.shape)
            offset += n
        return flat_p, flat_g

    def copy(self) -> ParameterStore:
        out = ParameterStore()
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.grads = {k: v.copy() for k, v in self.grads.items()}
        return out

    def save(self, path: str | Path, header: dict) -> None:
        """Write a flat ``.npz`` checkpoint with a JSON config header.

        Zip entries carry a fixed timestamp so identical stores give
        identical bytes.
        """
        entries = {"__header__": np.array(json.dumps(header, sort_keys=True))}
        entries.update({f"param/{k}": v for k, v in self.params.items()})
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for key, arr in entries.items():
                info = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
                zf.writestr(info, buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> tuple[ParameterStore, dict]:
        store = cls()
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            for key in data.files:
                if key.startswith("param/"):
                    name = key[len("param/") :]
                    store.params[name] = data[key].astype(float)
                    store.grads[name] = np.zeros_like(store.params[name])
        return store, header


def fan_in_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Callable[[], np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    return lambda: rng.uniform(-bound, bound, size=shape)


def init_query(rng: np.random.Generator, dim: int) -> np.ndarray:
    return rng.normal(0.0, QUERY_INIT_STD, size=dim)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_backward(p: np.ndarray, grad_p: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (grad_p - np.sum(grad_p * p, axis=axis, keepdims=True))


class Layer:
    _cache: tuple | None = None

    def _take_cache(self) -> tuple:
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a recorded forward pass")
        cache, self._cache = self._cache, None
        return cache


class Linear(Layer):
    def __init__(self, store: ParameterStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.store, self.name = store, name
        self.w_name, self.b_name = f"{name}.weight", f"{name}.bias"
        store.get_or_create(self.w_name, (fan_in, fan_out), fan_in_uniform(rng, fan_in, (fan_in, fan_out)))
        store.get_or_create(self.b_name, (fan_out,), lambda: np.zeros(fan_out))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = (x,)
        return x @ self.store[self.w_name] + self.store[self.b_name]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        (x,) = self._take_cache()
        x2 = x.reshape(-1, x.shape[-1])
        g2 = grad.reshape(-1, grad.shape[-1])
        self.store.grads[self.w_name] += x2.T @ g2
        self.store.grads[self.b_name] += g2.sum(axis=0)
        return grad @ self.store[self.w_name].T


class Softplus(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = (x,)
        return softplus(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        (x,) = self._take_cache()
        return grad * sigmoid(x)


class MLP(Layer):
    """Linear layers with a softplus between consecutive ones."""

    def __init__(self, store: ParameterStore, name: str, dims: list[int], rng: np.random.Generator):
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ConfigurationError(f"bad MLP dims {dims}")
        self.layers: list[Layer] = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if i:
                self.layers.append(Softplus())
            self.layers.append(Linear(store, f"{name}.{i}", a, b, rng))

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class LayerNorm(Layer):
    def __init__(self, store: ParameterStore, name: str, dim: int, eps: float = 1e-5):
        self.store, self.eps = store, eps
        self.g_name, self.b_name = f"{name}.gain", f"{name}.bias"
        store.get_or_create(self.g_name, (dim,), lambda: np.ones(dim))
        store.get_or_create(self.b_name, (dim,), lambda: np.zeros(dim))

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return xhat * self.store[self.g_name] + self.store[self.b_name]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        xhat, inv = self._take_cache()
        self.store.grads[self.g_name] += (grad * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        self.store.grads[self.b_name] += grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        gx = grad * self.store[self.g_name]
        return inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))


class CrossAttention(Layer):
    """One multi-head cross-attention layer: a single query row per sample
    attends over ``L`` key/value tokens.

    Shapes: query ``(B, D)``, tokens ``(B, L, D)``, output ``(B, D)``.
    """

    def __init__(self, store: ParameterStore, name: str, dim: int, num_heads: int, rng: np.random.Generator):
        if dim % num_heads:
            raise ConfigurationError(f"model dim {dim} is not divisible by {num_heads} heads")
        self.dim, self.num_heads, self.head_dim = dim, num_heads, dim // num_heads
        self.q = Linear(store, f"{name}.q", dim, dim, rng)
        self.k = Linear(store, f"{name}.k", dim, dim, rng)
        self.v = Linear(store, f"{name}.v", dim, dim, rng)
        self.o = Linear(store, f"{name}.out", dim, dim, rng)
        self.last_attention: np.ndarray | None = None

    def forward(self, x: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or tokens.ndim != 3 or x.shape[-1] != self.dim or tokens.shape[-1] != self.dim:
            raise ConfigurationError(f"expected query (B, {self.dim}) and tokens (B, L, {self.dim})")
        if x.shape[0] != tokens.shape[0]:
            raise ConfigurationError("query and tokens disagree on batch size")
        B, L, _ = tokens.shape
        H, dh = self.num_heads, self.head_dim
        q = self.q.forward(x).reshape(B, H, dh)
        k = self.k.forward(tokens).reshape(B, L, H, dh)
        v = self.v.forward(tokens).reshape(B, L, H, dh)
        scale = 1.0 / np.sqrt(dh)
        scores = np.einsum("bhd,blhd->bhl", q, k) * scale
        attn = softmax(scores, axis=-1)
        mixed = np.einsum("bhl,blhd->bhd", attn, v).reshape(B, self.dim)
        self._cache = (q, k, v, attn, scale)
        self.last_attention = attn
        return self.o.forward(mixed)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q, k, v, attn, scale = self._take_cache()
        B, L, H, dh = k.shape
        g_mixed = self.o.backward(grad).reshape(B, H, dh)
        g_attn = np.einsum("bhd,blhd->bhl", g_mixed, v)
        g_v = np.einsum("bhl,bhd->blhd", attn, g_mixed)
        g_scores = softmax_backward(attn, g_attn) * scale
        g_q = np.einsum("bhl,blhd->bhd", g_scores, k)
        g_k = np.einsum("bhl,bhd->blhd", g_scores, q)
        g_x = self.q.backward(g_q.reshape(B, self.dim))
        g_tokens = self.k.backward(g_k.reshape(B, L, self.dim)) + self.v.backward(g_v.reshape(B, L, self.dim))
        return g_x, g_tokens


class CrossAttentionStack(Layer):
    """``num_layers`` cross-attention layers; each layer's output is the next
    layer's query. With ``prenorm`` every layer becomes
    ``x + attn(norm(x), tokens)``.
    """

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        dim: int,
        num_heads: int,
        num_layers: int,
        rng: np.random.Generator,
        prenorm: bool = False,
    ):
        if num_layers < 1:
            raise ConfigurationError("need at least one attention layer")
        self.prenorm = prenorm
        self.layers = [CrossAttention(store, f"{name}.layer{i}", dim, num_heads, rng) for i in range(num_layers)]
        self.norms = [LayerNorm(store, f"{name}.norm{i}", dim) for i in range(num_layers)] if prenorm else []

    def forward(self, query: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        x = query
        for i, layer in enumerate(self.layers):
            if self.prenorm:
                x = x + layer.forward(self.norms[i].forward(x), tokens)
            else:
                x = layer.forward(x, tokens)
        self._cache = ()
        return x

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self._take_cache()
        g_tokens = 0.0
        for i in reversed(range(len(self.layers))):
            g_in, g_tok = self.layers[i].backward(grad)
            g_tokens = g_tokens + g_tok
            grad = grad + self.norms[i].backward(g_in) if self.prenorm else g_in
        return grad, g_tokens

    @property
    def attention_maps(self) -> list[np.ndarray | None]:
        return [layer.last_attention for layer in self.layers]
