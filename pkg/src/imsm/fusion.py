"""Query-aware low-rank gate that interweaves frozen and tuned final hidden states.

For each position the gate reads the frozen-branch query mean, both
branches' current states and the tuned-branch query mean (in that order),
projects through ``W_A @ W_B`` and squashes with a sigmoid. The fused state
is ``g * h_frozen + (1 - g) * h_tuned`` and feeds the shared output head.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .archive import load_archive, save_archive
from .model import lm_head
from .numerics import DimensionError, Tensor, UsageError


class FusionMode(str, enum.Enum):
    QUERY_GATE = "query"
    NO_QUERY_GATE = "noquery"
    FIXED_HALF = "half"

    @property
    def uses_query(self) -> bool:
        return self is FusionMode.QUERY_GATE


@dataclass
class GateParams:
    W_A: Tensor  # [4d, r], or [2d, r] without the query means
    W_B: Tensor  # [r, d]
    rank: int

    def __post_init__(self):
        d = self.W_B.shape[1]
        if self.W_B.shape != (self.rank, d) or self.W_A.shape[1] != self.rank:
            raise DimensionError(f"gate factors {self.W_A.shape} / {self.W_B.shape} do not match rank {self.rank}")
        if self.W_A.shape[0] not in (2 * d, 4 * d):
            raise DimensionError(f"W_A has {self.W_A.shape[0]} rows; expected {2 * d} or {4 * d}")
        if not 0 < self.rank < d:
            raise ValueError(f"gate rank {self.rank} must satisfy 0 < r < d={d}")

    @property
    def d_model(self) -> int:
        return self.W_B.shape[1]

    @property
    def with_query(self) -> bool:
        return self.W_A.shape[0] == 4 * self.d_model

    def parameters(self) -> list[Tensor]:
        return [self.W_A, self.W_B]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t in self.parameters():
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "GateParams":
        return GateParams(Tensor(self.W_A.data.copy(), True), Tensor(self.W_B.data.copy(), True), self.rank)

    def save(self, path) -> None:
        save_archive(path, "imsm_gate", {"W_A": self.W_A.data, "W_B": self.W_B.data}, {"rank": self.rank})

    @classmethod
    def load(cls, path) -> "GateParams":
        _, meta, arrays = load_archive(path, expect_kind="imsm_gate")
        return cls(Tensor(arrays["W_A"], True), Tensor(arrays["W_B"], True), int(meta["rank"]))


def make_gate(d: int, rank: int = 8, mode: FusionMode | str = FusionMode.QUERY_GATE,
              seed: int = 0, init_std: float = 0.02) -> GateParams | None:
    """Gaussian ``W_A``, zero ``W_B`` (so the initial gate is exactly 0.5); ``None`` for fixed_half."""
    mode = FusionMode(mode)
    if mode is FusionMode.FIXED_HALF:
        return None
    if not 0 < rank < d:
        raise ValueError(f"gate rank {rank} must satisfy 0 < r < d={d}")
    width = 4 * d if mode.uses_query else 2 * d
    rng = np.random.default_rng(seed)
    return GateParams(Tensor(rng.normal(0.0, init_std, (width, rank)), True),
                      Tensor(np.zeros((rank, d)), True), rank)


@dataclass(frozen=True)
class QueryMemory:
    hbar_M: Tensor   # [1, d]
    hbar_Mp: Tensor  # [1, d]
    t_in: int


def query_means(hM_prompt: Tensor, hMp_prompt: Tensor) -> QueryMemory:
    if hM_prompt.shape != hMp_prompt.shape:
        raise DimensionError(f"branch prompt states differ in shape: {hM_prompt.shape} vs {hMp_prompt.shape}")
    if hM_prompt.shape[0] == 0:
        raise UsageError("query means over an empty prompt")
    return QueryMemory(nx.mean_rows(hM_prompt), nx.mean_rows(hMp_prompt), hM_prompt.shape[0])


def gate_values(hbar_M: Tensor, hM: Tensor, hMp: Tensor, hbar_Mp: Tensor,
                gp: GateParams, mode: FusionMode | str = FusionMode.QUERY_GATE) -> Tensor:
    """Row-wise gate for ``[n, d]`` operands (query means already repeated per row)."""
    mode = FusionMode(mode)
    if mode is FusionMode.FIXED_HALF:
        raise UsageError("fixed_half has no learned gate")
    if gp.with_query != mode.uses_query:
        raise DimensionError(f"gate params (with_query={gp.with_query}) do not fit mode {mode.value}")
    if hM.shape[-1] != gp.d_model:
        raise DimensionError(f"hidden dim {hM.shape[-1]} vs gate dim {gp.d_model}")
    parts = [hbar_M, hM, hMp, hbar_Mp] if mode.uses_query else [hM, hMp]
    v = nx.concat_lastdim(parts)
    return nx.sigmoid(nx.matmul(nx.matmul(v, gp.W_A), gp.W_B))


def _repeat_rows(t: Tensor, n: int) -> Tensor:
    return t if t.shape[0] == n else nx.matmul(Tensor(np.ones((n, 1))), t)


def gate(qm: QueryMemory, hM_t: Tensor, hMp_t: Tensor, gp: GateParams,
         mode: FusionMode | str = FusionMode.QUERY_GATE) -> Tensor:
    """Gate for the current position(s) given the cached query memory."""
    if hM_t.shape != hMp_t.shape:
        raise DimensionError(f"branch states differ in shape: {hM_t.shape} vs {hMp_t.shape}")
    n = hM_t.shape[0]
    return gate_values(_repeat_rows(qm.hbar_M, n), hM_t, hMp_t, _repeat_rows(qm.hbar_Mp, n), gp, mode)


def fuse(gate_t: Tensor, hM_t: Tensor, hMp_t: Tensor) -> Tensor:
    """``gate * h_frozen + (1 - gate) * h_tuned``."""
    if not (gate_t.shape == hM_t.shape == hMp_t.shape):
        raise DimensionError(f"fuse shapes differ: {gate_t.shape}, {hM_t.shape}, {hMp_t.shape}")
    g = gate_t.data
    if g.min() < 0.0 or g.max() > 1.0:
        raise ValueError("gate values must lie in [0, 1]")
    return gate_t * hM_t + (1.0 - gate_t) * hMp_t


def constant_gate(value: float, like: Tensor) -> Tensor:
    return Tensor(np.full(like.shape, float(value)))


def interweave(qm: QueryMemory, hM_t: Tensor, hMp_t: Tensor, gp: GateParams | None,
               mode: FusionMode | str = FusionMode.QUERY_GATE) -> tuple[Tensor, Tensor]:
    """Return ``(h_N, gate)`` for the given mode."""
    mode = FusionMode(mode)
    if mode is FusionMode.FIXED_HALF:
        g = constant_gate(0.5, hM_t)
    else:
        if gp is None:
            raise UsageError(f"mode {mode.value} needs gate parameters")
        g = gate(qm, hM_t, hMp_t, gp, mode)
    return fuse(g, hM_t, hMp_t), g


def fused_logits(h_N: Tensor, w_out: Tensor) -> Tensor:
    return lm_head(h_N, w_out)


def next_token_probs(logits: Tensor) -> Tensor:
    return nx.softmax_lastdim(logits)


def batch_query_means(h: Tensor, t_in: np.ndarray, width: int) -> Tensor:
    """Per-row prompt means of a flattened ``[B*T, d]`` batch, as ``[B, d]``.

    Implemented as a product with a constant averaging matrix so gradients
    reach every prompt position.
    """
    t_in = np.asarray(t_in, dtype=np.int64)
    b = t_in.shape[0]
    if h.shape[0] != b * width:
        raise DimensionError(f"{h.shape[0]} rows do not form a [{b}, {width}] batch")
    if (t_in < 1).any() or (t_in > width).any():
        raise UsageError("query length must be in [1, width]")
    avg = np.zeros((b, b * width))
    for i, n in enumerate(t_in):
        avg[i, i * width:i * width + n] = 1.0 / n
    return nx.matmul(Tensor(avg), h)
