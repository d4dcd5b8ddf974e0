"""Greedy generation for the siamese model and for a single tuned branch.

The query means are computed once from the prompt and cached; every later
step feeds only the newest token to each branch's attention cache, gates
the two fresh hidden states and takes the argmax of the fused logits
(lowest id wins ties).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fusion
from . import numerics as nx
from .adapters import AdapterSet
from .fusion import FusionMode, GateParams, QueryMemory
from .model import AttnCache, BaseWeights, CapacityError, forward_hidden, lm_head
from .numerics import Tensor, UsageError
from .tokendata import EOS


@dataclass(frozen=True)
class DecodeConfig:
    max_new_tokens: int = 32
    eos_id: int = EOS

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class DecodeState:
    cache_M: AttnCache | None
    cache_Mp: AttnCache
    query: QueryMemory | None
    next_logits: np.ndarray
    prompt_len: int
    generated: list[int] = field(default_factory=list)
    last_gate: np.ndarray | None = None
    done: bool = False
    truncated: bool = False
    trace: list[dict] = field(default_factory=list)


def _fused_row(qm, hM, hMp, gate, mode, gate_override):
    if gate_override is not None:
        g = fusion.constant_gate(gate_override, hM)
        return fusion.fuse(g, hM, hMp), g
    return fusion.interweave(qm, hM, hMp, gate, mode)


def prefill(prompt: Sequence[int], weights: BaseWeights, adapters: AdapterSet | None,
            gate: GateParams | None, mode: FusionMode | str = FusionMode.QUERY_GATE,
            gate_override: float | None = None) -> tuple[DecodeState, Tensor]:
    """Run both branches over the prompt; return the state and the first-token distribution."""
    if len(prompt) < 1:
        raise UsageError("empty prompt")
    cfg = weights.config
    with nx.no_grad():
        cache_M, cache_Mp = AttnCache.for_model(cfg), AttnCache.for_model(cfg)
        hM = forward_hidden(prompt, weights, None, cache_M)
        hMp = forward_hidden(prompt, weights, adapters, cache_Mp)
        qm = fusion.query_means(hM, hMp)
        last = [hM.shape[0] - 1]
        h_N, g = _fused_row(qm, nx.take_rows(hM, last), nx.take_rows(hMp, last), gate, mode, gate_override)
        logits = fusion.fused_logits(h_N, weights["head"])
        probs = fusion.next_token_probs(logits)
    state = DecodeState(cache_M, cache_Mp, qm, logits.data[0].copy(), len(prompt), last_gate=g.data[0])
    return state, probs


def _record(state: DecodeState, token: int) -> None:
    entry = {"step": len(state.generated) - 1, "token": token}
    if state.last_gate is not None:
        g = state.last_gate
        entry.update(gate_mean=float(g.mean()), gate_min=float(g.min()), gate_max=float(g.max()))
    state.trace.append(entry)


def _pick(state: DecodeState, config: DecodeConfig) -> int:
    if state.done:
        raise UsageError("decode state already terminated")
    token = int(np.argmax(state.next_logits))   # first maximal index on ties
    state.generated.append(token)
    _record(state, token)
    if token == config.eos_id or len(state.generated) >= config.max_new_tokens:
        state.done = True
    return token


def step(state: DecodeState, weights: BaseWeights, adapters: AdapterSet | None, gate: GateParams | None,
         config: DecodeConfig, mode: FusionMode | str = FusionMode.QUERY_GATE,
         gate_override: float | None = None) -> int:
    """Emit one greedy token and, unless finished, advance both caches by it."""
    token = _pick(state, config)
    if state.done:
        return token
    try:
        with nx.no_grad():
            hM = forward_hidden([token], weights, None, state.cache_M)
            hMp = forward_hidden([token], weights, adapters, state.cache_Mp)
            h_N, g = _fused_row(state.query, hM, hMp, gate, mode, gate_override)
            state.next_logits = fusion.fused_logits(h_N, weights["head"]).data[0].copy()
            state.last_gate = g.data[0]
    except CapacityError:
        state.done = state.truncated = True
    return token


def _strip(tokens: list[int], eos: int) -> list[int]:
    return tokens[:-1] if tokens and tokens[-1] == eos else tokens


def _full_recompute_logits(seq, t_in, weights, adapters, gate, mode, gate_override) -> np.ndarray:
    with nx.no_grad():
        hM = forward_hidden(seq, weights, None)
        hMp = forward_hidden(seq, weights, adapters)
        prompt_rows = list(range(t_in))
        qm = fusion.query_means(nx.take_rows(hM, prompt_rows), nx.take_rows(hMp, prompt_rows))
        last = [len(seq) - 1]
        h_N, _ = _fused_row(qm, nx.take_rows(hM, last), nx.take_rows(hMp, last), gate, mode, gate_override)
        return fusion.fused_logits(h_N, weights["head"]).data[0]


def generate(prompt: Sequence[int], config: DecodeConfig, weights: BaseWeights, adapters: AdapterSet | None,
             gate: GateParams | None, mode: FusionMode | str = FusionMode.QUERY_GATE, *,
             gate_override: float | None = None, use_cache: bool = True,
             trace: list | None = None, keep_eos: bool = False) -> list[int]:
    """Greedy completion (prompt excluded, EOS dropped unless ``keep_eos``)."""
    if not use_cache:
        seq, out = list(prompt), []
        cap = weights.config.max_seq_len
        for _ in range(config.max_new_tokens):
            if len(seq) > cap:
                break
            token = int(np.argmax(_full_recompute_logits(seq, len(prompt), weights, adapters, gate,
                                                         mode, gate_override)))
            out.append(token)
            if token == config.eos_id:
                break
            seq.append(token)
        return out if keep_eos else _strip(out, config.eos_id)
    state, _ = prefill(prompt, weights, adapters, gate, mode, gate_override)
    while not state.done:
        step(state, weights, adapters, gate, config, mode, gate_override)
    if trace is not None:
        trace.extend(state.trace)
    return state.generated if keep_eos else _strip(state.generated, config.eos_id)


def generate_vanilla(prompt: Sequence[int], config: DecodeConfig, weights: BaseWeights,
                     adapters: AdapterSet | None = None, *, keep_eos: bool = False) -> list[int]:
    """Greedy decode of the tuned branch alone (the plain PEFT baseline)."""
    if len(prompt) < 1:
        raise UsageError("empty prompt")
    out: list[int] = []
    with nx.no_grad():
        cache = AttnCache.for_model(weights.config)
        h = forward_hidden(prompt, weights, adapters, cache)
        logits = lm_head(nx.take_rows(h, [h.shape[0] - 1]), weights["head"]).data[0]
        while True:
            token = int(np.argmax(logits))
            out.append(token)
            if token == config.eos_id or len(out) >= config.max_new_tokens:
                break
            try:
                h = forward_hidden([token], weights, adapters, cache)
            except CapacityError:
                break
            logits = lm_head(h, weights["head"]).data[0]
    return out if keep_eos else _strip(out, config.eos_id)


@dataclass
class ThroughputReport:
    mode: str
    tokens: int
    seconds: float
    tokens_per_sec: float
    flagged: bool

    def as_row(self) -> dict:
        return {"mode": self.mode, "tokens": self.tokens, "seconds": round(self.seconds, 6),
                "tokens_per_sec": round(self.tokens_per_sec, 3), "flagged": self.flagged}


def measure_throughput(prompts: Sequence[Sequence[int]], mode: str, config: DecodeConfig,
                       weights: BaseWeights, adapters: AdapterSet | None, gate: GateParams | None = None,
                       fusion_mode: FusionMode | str = FusionMode.QUERY_GATE) -> ThroughputReport:
    """Generated tokens per wall-clock second over ``prompts`` (``mode``: vanilla | imsm)."""
    if not prompts:
        raise UsageError("throughput needs at least one prompt")
    if mode not in ("vanilla", "imsm"):
        raise ValueError(f"unknown mode {mode!r}")
    tokens = 0
    t0 = time.perf_counter()
    for p in prompts:
        if mode == "vanilla":
            out = generate_vanilla(p, config, weights, adapters, keep_eos=True)
        else:
            out = generate(p, config, weights, adapters, gate, fusion_mode, keep_eos=True)
        tokens += len(out)
    seconds = time.perf_counter() - t0
    if tokens == 0:
        return ThroughputReport(mode, 0, seconds, 0.0, True)
    return ThroughputReport(mode, tokens, seconds, tokens / seconds if seconds > 0 else float("inf"), False)
