"""Small pre-norm decoder-only transformer (RoPE attention, SiLU MLP, RMSNorm, no biases).

The same :class:`BaseWeights` serve both branches: called with
``adapters=None`` the forward pass is the frozen model, with an
:class:`~imsm.adapters.AdapterSet` attached it is the tuned model.
Linear weights are stored input-major, so a projection is ``x @ W``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .archive import load_archive, save_archive
from .numerics import DimensionError, Tensor

ATTN_SITES = ("q", "k", "v", "o")
MLP_SITES = ("up", "down")


class CapacityError(RuntimeError):
    """Sequence would exceed ``max_seq_len``."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.vocab_size < 1 or self.max_seq_len < 1 or self.rope_base <= 0:
            raise ValueError("invalid model config")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def site_name(layer: int, site: str) -> str:
    group = "attn" if site in ATTN_SITES else "mlp"
    return f"layers.{layer}.{group}.{site}"


def site_shape(config: ModelConfig, site: str) -> tuple[int, int]:
    d, f = config.d_model, config.d_ff
    return {"up": (d, f), "down": (f, d)}.get(site, (d, d))


class BaseWeights:
    """Named parameter tensors of the backbone, in a fixed order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self._frozen = False
        expected = list(_weight_shapes(config))
        if list(tensors) != [n for n, _ in expected]:
            raise ValueError("weight names do not match the config layout")
        for name, shape in expected:
            if tensors[name].shape != shape:
                raise DimensionError(f"{name}: shape {tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def freeze(self) -> "BaseWeights":
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        self._frozen = True
        return self

    def unfreeze(self) -> "BaseWeights":
        for t in self.tensors.values():
            t.requires_grad = True
        self._frozen = False
        return self

    @property
    def frozen(self) -> bool:
        # the flag is explicit: fresh tensors also start without gradients
        return self._frozen and not any(t.requires_grad for t in self.tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "BaseWeights":
        return BaseWeights(self.config, {n: Tensor(t.data.copy(), name=n) for n, t in self.tensors.items()})

    def save(self, path, meta: dict | None = None) -> None:
        save_archive(path, "base", {n: t.data for n, t in self.tensors.items()},
                     {"config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["BaseWeights", dict]:
        _, meta, arrays = load_archive(path, expect_kind="base")
        config = ModelConfig(**meta["config"])
        return cls(config, {n: Tensor(a, name=n) for n, a in arrays.items()}), meta


def _weight_shapes(config: ModelConfig):
    d, v = config.d_model, config.vocab_size
    yield "embed", (v, d)
    for i in range(config.n_layers):
        yield f"layers.{i}.attn_norm", (1, d)
        for s in ATTN_SITES:
            yield site_name(i, s), site_shape(config, s)
        yield f"layers.{i}.mlp_norm", (1, d)
        for s in MLP_SITES:
            yield site_name(i, s), site_shape(config, s)
    yield "final_norm", (1, d)
    yield "head", (d, v)


def init_weights(config: ModelConfig, seed: int = 0, std: float = 0.02) -> BaseWeights:
    rng = np.random.default_rng(seed)
    resid_std = std / math.sqrt(2 * config.n_layers)
    tensors = {}
    for name, shape in _weight_shapes(config):
        if name.endswith("norm"):
            arr = np.ones(shape)
        elif name.endswith((".o", ".down")):
            arr = rng.normal(0.0, resid_std, shape)
        else:
            arr = rng.normal(0.0, std, shape)
        tensors[name] = Tensor(arr, name=name)
    return BaseWeights(config, tensors)


@dataclass
class AttnCache:
    """Rotated keys and values of every processed position, per layer ``[1, H, L, hd]``."""

    n_layers: int
    keys: list[np.ndarray | None] = field(default_factory=list)
    values: list[np.ndarray | None] = field(default_factory=list)
    length: int = 0

    def __post_init__(self):
        if not self.keys:
            self.keys = [None] * self.n_layers
            self.values = [None] * self.n_layers

    @classmethod
    def for_model(cls, config: ModelConfig) -> "AttnCache":
        return cls(config.n_layers)

    def _extend(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k.copy(), v.copy()
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=2)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=2)


def _rope_tables(config: ModelConfig, start: int, count: int):
    half = config.head_dim // 2
    inv_freq = config.rope_base ** (-np.arange(half) / half)
    angles = np.arange(start, start + count)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _project(x: Tensor, weights: BaseWeights, adapters, name: str) -> Tensor:
    if adapters is None:
        return nx.matmul(x, weights[name])
    return adapters.project(name, x, weights[name])


def forward_tokens(tokens: np.ndarray, weights: BaseWeights, adapters=None,
                   cache: AttnCache | None = None, key_valid: np.ndarray | None = None) -> Tensor:
    """Last-layer, final-normed hidden states for a ``[B, T]`` token matrix, as ``[B*T, d]``.

    ``key_valid[b, j]`` false hides position ``j`` from every query of row ``b``
    (padding). A cache is only supported for ``B == 1`` and is extended in place.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be [B, T], got {tokens.shape}")
    cfg = weights.config
    b, t = tokens.shape
    start = cache.length if cache is not None else 0
    if cache is not None and b != 1:
        raise DimensionError("attention cache needs a single sequence")
    if start + t > cfg.max_seq_len:
        raise CapacityError(f"{start + t} positions exceed max_seq_len={cfg.max_seq_len}")
    if t == 0:
        raise ValueError("forward over zero new tokens")
    h_, hd = cfg.n_heads, cfg.head_dim
    total = start + t

    allowed = np.arange(total)[None, :] <= (start + np.arange(t))[:, None]   # [T, S]
    where = allowed[None, None]
    if key_valid is not None:
        where = where & np.asarray(key_valid, dtype=bool)[:, None, None, :total]
    cos, sin = _rope_tables(cfg, start, t)
    scale = 1.0 / math.sqrt(hd)

    def heads(z: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(z, (b, t, h_, hd)), (0, 2, 1, 3))

    x = nx.take_rows(weights["embed"], tokens.reshape(-1))
    for i in range(cfg.n_layers):
        hn = nx.rmsnorm(x, weights[f"layers.{i}.attn_norm"], cfg.norm_eps)
        q = nx.rope(heads(_project(hn, weights, adapters, site_name(i, "q"))), cos, sin)
        k = nx.rope(heads(_project(hn, weights, adapters, site_name(i, "k"))), cos, sin)
        v = heads(_project(hn, weights, adapters, site_name(i, "v")))
        if cache is not None:
            if cache.keys[i] is not None:
                k_all = nx.concat([Tensor(cache.keys[i]), k], axis=2)
                v_all = nx.concat([Tensor(cache.values[i]), v], axis=2)
            else:
                k_all, v_all = k, v
            cache._extend(i, k.data, v.data)
            k, v = k_all, v_all
        scores = nx.mul_scalar(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), scale)
        attn = nx.matmul(nx.softmax_lastdim(scores, where), v)
        attn = nx.reshape(nx.transpose(attn, (0, 2, 1, 3)), (b * t, cfg.d_model))
        x = x + _project(attn, weights, adapters, site_name(i, "o"))
        hn = nx.rmsnorm(x, weights[f"layers.{i}.mlp_norm"], cfg.norm_eps)
        up = nx.silu(_project(hn, weights, adapters, site_name(i, "up")))
        x = x + _project(up, weights, adapters, site_name(i, "down"))
    if cache is not None:
        cache.length = total
    return nx.rmsnorm(x, weights["final_norm"], cfg.norm_eps)


def forward_hidden(tokens: Sequence[int], weights: BaseWeights, adapters=None,
                   cache: AttnCache | None = None) -> Tensor:
    """Hidden states ``[T, d]`` of the new positions of one sequence."""
    return forward_tokens(np.asarray(tokens, dtype=np.int64)[None, :], weights, adapters, cache)


def lm_head(h: Tensor, w_out: Tensor) -> Tensor:
    """Vocabulary logits ``h @ W_out`` (no bias)."""
    if h.shape[-1] != w_out.shape[0]:
        raise DimensionError(f"hidden dim {h.shape[-1]} does not match head {w_out.shape}")
    return nx.matmul(h, w_out)
