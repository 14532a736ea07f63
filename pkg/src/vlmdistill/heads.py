"""Feature-alignment and action-classification heads over the ego feature.

Each head owns three learnable queries. Every query has its own
cross-attention stack over the ego tokens and its own MLP, so the six
query pathways share no parameters. The MLP input is the updated query
concatenated with the ego feature mean-pooled over tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, StateError
from .nn import MLP, CrossAttentionStack, ParameterStore, init_query, softmax, softmax_backward

TEXT_TERMS = ("c", "f", "r")
ACTION_TERMS = ("control", "turn", "lane")


@dataclass(frozen=True)
class AuxiliaryHeadConfig:
    model_dim: int = 32
    num_heads: int = 8
    num_layers: int = 3
    text_out_dim: int = 16
    mlp_hidden_dims: tuple[int, ...] | None = None  # None -> (2 * model_dim,)
    action_sizes: tuple[int, int, int] = (4, 4, 5)
    prenorm: bool = False

    def __post_init__(self) -> None:
        dims = [self.model_dim, self.num_heads, self.num_layers, self.text_out_dim, *self.action_sizes]
        if any(int(d) <= 0 for d in dims) or any(int(d) <= 0 for d in self.hidden_dims):
            raise ConfigurationError("head dimensions must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigurationError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if len(self.action_sizes) != 3:
            raise ConfigurationError("exactly three action families are supported")

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(self.mlp_hidden_dims) if self.mlp_hidden_dims is not None else (2 * self.model_dim,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden_dims"] = list(self.hidden_dims)
        d["action_sizes"] = list(self.action_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AuxiliaryHeadConfig:
        d = dict(d)
        if d.get("mlp_hidden_dims") is not None:
            d["mlp_hidden_dims"] = tuple(d["mlp_hidden_dims"])
        if "action_sizes" in d:
            d["action_sizes"] = tuple(d["action_sizes"])
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class AuxiliaryOutputs:
    f_hat: list[np.ndarray]  # three (B, C) alignment features: current, future, reasoning
    probs: list[np.ndarray]  # (B, 4), (B, 4), (B, 5)
    logits: list[np.ndarray] = field(default_factory=list)

    @property
    def f_hat_c(self) -> np.ndarray:
        return self.f_hat[0]

    @property
    def f_hat_f(self) -> np.ndarray:
        return self.f_hat[1]

    @property
    def f_hat_r(self) -> np.ndarray:
        return self.f_hat[2]

    @property
    def p_control(self) -> np.ndarray:
        return self.probs[0]

    @property
    def p_turn(self) -> np.ndarray:
        return self.probs[1]

    @property
    def p_lane(self) -> np.ndarray:
        return self.probs[2]


@dataclass
class OutputGrads:
    """Loss gradients with respect to every head output (same shapes)."""

    f_hat: list[np.ndarray]
    probs: list[np.ndarray]


class _QueryPathway:
    def __init__(self, store, name, cfg: AuxiliaryHeadConfig, out_dim: int, rng):
        self.query_name = f"{name}.query"
        self.store = store
        store.get_or_create(self.query_name, (cfg.model_dim,), lambda: init_query(rng, cfg.model_dim))
        self.attn = CrossAttentionStack(
            store, f"{name}.attn", cfg.model_dim, cfg.num_heads, cfg.num_layers, rng, prenorm=cfg.prenorm
        )
        self.mlp = MLP(store, f"{name}.mlp", [2 * cfg.model_dim, *cfg.hidden_dims, out_dim], rng)

    def forward(self, tokens: np.ndarray, pooled: np.ndarray) -> np.ndarray:
        B = tokens.shape[0]
        query = np.broadcast_to(self.store[self.query_name], (B, tokens.shape[-1]))
        updated = self.attn.forward(query, tokens)
        return self.mlp.forward(np.concatenate([updated, pooled], axis=-1))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (grad wrt tokens through attention, grad wrt pooled feature)."""
        g_cat = self.mlp.backward(grad)
        D = g_cat.shape[-1] // 2
        g_query, g_tokens = self.attn.backward(g_cat[:, :D])
        self.store.grads[self.query_name] += g_query.sum(axis=0)
        return g_tokens, g_cat[:, D:]


class AuxiliaryHeads:
    """Both heads over a shared ParameterStore.

    ``forward`` accepts ego tokens shaped ``(L, D)`` or ``(B, L, D)``; outputs
    always carry a leading batch axis.
    """

    def __init__(self, config: AuxiliaryHeadConfig, store: ParameterStore | None = None, seed: int = 0):
        self.config = config
        self.store = store if store is not None else ParameterStore()
        rng = np.random.default_rng(seed)
        C = config.text_out_dim
        self.text_paths = [_QueryPathway(self.store, f"align.{t}", config, C, rng) for t in TEXT_TERMS]
        self.action_paths = [
            _QueryPathway(self.store, f"action.{t}", config, n, rng)
            for t, n in zip(ACTION_TERMS, config.action_sizes)
        ]
        self._cache: tuple | None = None

    def forward(self, f_ego: np.ndarray) -> AuxiliaryOutputs:
        tokens = np.asarray(f_ego, dtype=float)
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens[None]
        if tokens.ndim != 3 or tokens.shape[-1] != self.config.model_dim or tokens.shape[1] < 1:
            raise ConfigurationError(f"ego feature must be (B, L, {self.config.model_dim}) with L >= 1")
        pooled = tokens.mean(axis=1)
        f_hat = [p.forward(tokens, pooled) for p in self.text_paths]
        logits = [p.forward(tokens, pooled) for p in self.action_paths]
        probs = [softmax(z) for z in logits]
        self._cache = (tokens.shape, squeeze, probs)
        return AuxiliaryOutputs(f_hat=f_hat, probs=probs, logits=logits)

    def backward(self, grads: OutputGrads) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient wrt the ego feature."""
        if self._cache is None:
            raise StateError("backward called without a recorded forward pass")
        shape, squeeze, probs = self._cache
        self._cache = None
        L = shape[1]
        g_tokens = np.zeros(shape)
        g_pooled = np.zeros((shape[0], shape[2]))
        for path, g in zip(self.text_paths, grads.f_hat):
            gt, gp = path.backward(np.asarray(g, dtype=float))
            g_tokens += gt
            g_pooled += gp
        for path, p, g in zip(self.action_paths, probs, grads.probs):
            gt, gp = path.backward(softmax_backward(p, np.asarray(g, dtype=float)))
            g_tokens += gt
            g_pooled += gp
        g_tokens += g_pooled[:, None, :] / L
        return g_tokens[0] if squeeze else g_tokens

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def save(self, path: str | Path, seed: int | None = None) -> None:
        self.store.save(path, {"heads": self.config.to_dict(), "seed": seed})

    @classmethod
    def load(cls, path: str | Path) -> AuxiliaryHeads:
        store, header = ParameterStore.load(path)
        return cls(AuxiliaryHeadConfig.from_dict(header["heads"]), store=store)


def init_parameters(config: AuxiliaryHeadConfig, seed: int) -> ParameterStore:
    return AuxiliaryHeads(config, seed=seed).store
