"""LoRA and (IA)^3 adapters attached to named projection sites of the backbone."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from . import numerics as nx
from .archive import load_archive, save_archive
from .model import ModelConfig, site_name, site_shape
from .numerics import DimensionError, Tensor

DEFAULT_LORA_SITES = ("q", "v")
DEFAULT_IA3_SITES = ("k", "v", "down")


@dataclass
class LoraAdapter:
    """Low-rank update ``delta W = (alpha / rank) * B @ A`` for a ``[d, k]`` weight."""

    site: str
    A: Tensor  # [rank, k]
    B: Tensor  # [d, rank]
    rank: int
    alpha: float

    def __post_init__(self):
        d, k = self.B.shape[0], self.A.shape[1]
        if self.A.shape != (self.rank, k) or self.B.shape != (d, self.rank):
            raise DimensionError(f"{self.site}: A {self.A.shape} / B {self.B.shape} do not fit rank {self.rank}")
        if not 0 < self.rank < min(d, k):
            raise ValueError(f"{self.site}: LoRA rank {self.rank} must be below min({d}, {k})")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]


@dataclass
class Ia3Adapter:
    """Learned per-channel rescaling of a site's output, initialised to ones."""

    site: str
    scale: Tensor  # [1, d_out]

    def parameters(self) -> list[Tensor]:
        return [self.scale]


Adapter = Union[LoraAdapter, Ia3Adapter]


def lora_apply(x: Tensor, w0: Tensor, adapter: LoraAdapter) -> Tensor:
    """``x @ W0 + s * (x @ B) @ A`` without forming ``B @ A``."""
    if w0.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise DimensionError(f"{adapter.site}: base weight {w0.shape} does not fit adapter")
    delta = nx.matmul(nx.matmul(x, adapter.B), adapter.A)
    if adapter.scaling != 1.0:
        delta = nx.mul_scalar(delta, adapter.scaling)
    return nx.matmul(x, w0) + delta


def lora_merge(w0: Tensor | np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    w0 = w0.data if isinstance(w0, Tensor) else np.asarray(w0, dtype=np.float64)
    if w0.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise DimensionError(f"{adapter.site}: base weight {w0.shape} does not fit adapter")
    return w0 + adapter.scaling * (adapter.B.data @ adapter.A.data)


def ia3_apply(site_output: Tensor, adapter: Ia3Adapter) -> Tensor:
    return nx.scale_lastdim(site_output, adapter.scale)


class AdapterSet:
    """At most one adapter per site, all of one kind (``"lora"`` or ``"ia3"``)."""

    def __init__(self, kind: str, adapters: Iterable[Adapter] = ()):
        if kind not in ("lora", "ia3"):
            raise ValueError(f"unknown adapter kind {kind!r}")
        self.kind = kind
        self.adapters: dict[str, Adapter] = {}
        for a in adapters:
            self.add(a)

    def add(self, adapter: Adapter) -> None:
        expected = LoraAdapter if self.kind == "lora" else Ia3Adapter
        if not isinstance(adapter, expected):
            raise TypeError(f"{type(adapter).__name__} in a {self.kind} adapter set")
        if adapter.site in self.adapters:
            raise ValueError(f"site {adapter.site!r} already has an adapter")
        self.adapters[adapter.site] = adapter

    def __len__(self) -> int:
        return len(self.adapters)

    def __contains__(self, site: str) -> bool:
        return site in self.adapters

    def project(self, site: str, x: Tensor, w0: Tensor) -> Tensor:
        adapter = self.adapters.get(site)
        if adapter is None:
            return nx.matmul(x, w0)
        if self.kind == "lora":
            return lora_apply(x, w0, adapter)
        return ia3_apply(nx.matmul(x, w0), adapter)

    def parameters(self) -> list[Tensor]:
        return [p for a in self.adapters.values() for p in a.parameters()]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for site, a in self.adapters.items():
            if isinstance(a, LoraAdapter):
                out[f"{site}.A"], out[f"{site}.B"] = a.A.data, a.B.data
            else:
                out[f"{site}.scale"] = a.scale.data
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "AdapterSet":
        if self.kind == "lora":
            return AdapterSet("lora", [
                LoraAdapter(a.site, Tensor(a.A.data.copy(), True), Tensor(a.B.data.copy(), True), a.rank, a.alpha)
                for a in self.adapters.values()])
        return AdapterSet("ia3", [Ia3Adapter(a.site, Tensor(a.scale.data.copy(), True))
                                  for a in self.adapters.values()])

    def save(self, path) -> None:
        meta = {"sites": list(self.adapters)}
        if self.kind == "lora":
            meta["ranks"] = [a.rank for a in self.adapters.values()]
            meta["alphas"] = [a.alpha for a in self.adapters.values()]
        save_archive(path, self.kind, self.named_arrays(), meta)

    @classmethod
    def load(cls, path) -> "AdapterSet":
        kind, meta, arrays = load_archive(path, expect_kind=("lora", "ia3"))
        out = cls(kind)
        for i, site in enumerate(meta["sites"]):
            if kind == "lora":
                out.add(LoraAdapter(site, Tensor(arrays[f"{site}.A"], True), Tensor(arrays[f"{site}.B"], True),
                                    int(meta["ranks"][i]), float(meta["alphas"][i])))
            else:
                out.add(Ia3Adapter(site, Tensor(arrays[f"{site}.scale"], True)))
        return out


def _layer_sites(config: ModelConfig, targets, layers) -> list[tuple[str, str]]:
    layers = range(config.n_layers) if layers is None else layers
    return [(site_name(i, s), s) for i in layers for s in targets]


def make_lora(config: ModelConfig, targets=DEFAULT_LORA_SITES, rank: int = 4, alpha: float | None = None,
              seed: int = 0, init_std: float = 0.02, layers=None) -> AdapterSet:
    """Fresh LoRA set: ``A ~ N(0, init_std)``, ``B = 0``; ``alpha`` defaults to ``rank``."""
    rng = np.random.default_rng(seed)
    alpha = float(rank if alpha is None else alpha)
    out = AdapterSet("lora")
    for name, s in _layer_sites(config, targets, layers):
        d, k = site_shape(config, s)
        out.add(LoraAdapter(name, Tensor(rng.normal(0.0, init_std, (rank, k)), True),
                            Tensor(np.zeros((d, rank)), True), rank, alpha))
    return out


def make_ia3(config: ModelConfig, targets=DEFAULT_IA3_SITES, layers=None) -> AdapterSet:
    out = AdapterSet("ia3")
    for name, s in _layer_sites(config, targets, layers):
        out.add(Ia3Adapter(name, Tensor(np.ones((1, site_shape(config, s)[1])), True)))
    return out


def gate_param_count(d: int, rank: int, with_query: bool = True) -> int:
    """Scalars in the low-rank gate: ``(4d or 2d) * r + r * d``."""
    width = 4 * d if with_query else 2 * d
    return width * rank + rank * d


def trainable_param_count(adapters: AdapterSet | None, gate=None) -> int:
    n = sum(p.size for p in adapters.parameters()) if adapters is not None else 0
    if gate is not None:
        n += sum(p.size for p in gate.parameters())
    return n
