"""Masked next-token cross-entropy training with decoupled-weight-decay Adam."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .adapters import AdapterSet
from .fusion import FusionMode, GateParams, batch_query_means, constant_gate, fuse, gate_values
from .model import BaseWeights, forward_tokens, lm_head
from .numerics import NumericError, Tape, Tensor
from .tokendata import Batch, Example, batchify

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0
    mode: str = "vanilla"          # vanilla | imsm
    fusion: str = "query"          # query | noquery | half
    max_steps: int | None = None   # optional cap across epochs

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("vanilla", "imsm"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        FusionMode(self.fusion)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptState,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)


def _shifted(batch: Batch):
    inputs = batch.tokens[:, :-1]
    targets = batch.tokens[:, 1:]
    mask = batch.loss_mask[:, 1:]
    width = inputs.shape[1]
    key_valid = np.arange(width)[None, :] < batch.lengths[:, None]
    return inputs, targets, mask, key_valid


def loss_batch(batch: Batch, weights: BaseWeights, adapters: AdapterSet | None = None,
               gate: GateParams | None = None, mode: str = "vanilla",
               fusion: FusionMode | str = FusionMode.QUERY_GATE) -> Tensor:
    """Mean cross-entropy over completion tokens.

    ``vanilla`` scores the tuned branch (or the bare backbone when
    ``adapters`` is None); ``imsm`` scores the interwoven memory.
    """
    inputs, targets, mask, key_valid = _shifted(batch)
    width = inputs.shape[1]
    rows = np.flatnonzero(mask.reshape(-1))
    tgt = targets.reshape(-1)[rows]
    head = weights["head"]
    if mode == "vanilla":
        h = forward_tokens(inputs, weights, adapters, key_valid=key_valid)
        logits = lm_head(nx.take_rows(h, rows), head)
    elif mode == "imsm":
        fusion = FusionMode(fusion)
        with nx.no_grad():
            hM = forward_tokens(inputs, weights, None, key_valid=key_valid)
        hMp = forward_tokens(inputs, weights, adapters, key_valid=key_valid)
        hM_r, hMp_r = nx.take_rows(hM, rows), nx.take_rows(hMp, rows)
        if fusion is FusionMode.FIXED_HALF:
            g = constant_gate(0.5, hM_r)
        else:
            owner = rows // width
            qM = nx.take_rows(batch_query_means(hM, batch.t_in, width), owner)
            qMp = nx.take_rows(batch_query_means(hMp, batch.t_in, width), owner)
            g = gate_values(qM, hM_r, hMp_r, qMp, gate, fusion)
        logits = lm_head(fuse(g, hM_r, hMp_r), head)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return nx.cross_entropy_masked(logits, tgt, np.ones(len(rows), dtype=bool))


@dataclass
class TrainResult:
    adapters: AdapterSet | None
    gate: GateParams | None
    records: list[tuple[int, int, float]] = field(default_factory=list)
    grad_seen: list[bool] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.records[-1][2] if self.records else float("nan")


def _fit(params: list[Tensor], loss_fn: Callable[[Batch], Tensor], examples: Sequence[Example],
         config: TrainConfig, lr: float | None = None) -> tuple[list, list[bool]]:
    if config.epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not examples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    state = OptState.for_params(params)
    records: list[tuple[int, int, float]] = []
    seen = [False] * len(params)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for batch in batchify([examples[i] for i in order], config.batch_size):
            for p in params:
                p.grad = None
            try:
                with Tape() as tape:
                    loss = loss_fn(batch)
                nx.backward(loss, tape)
            except NumericError as exc:
                raise TrainingError(f"non-finite value at step {step} (epoch {epoch}): {exc}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})")
            grads = [p.grad for p in params]
            for i, g in enumerate(grads):
                if g is not None and np.any(g != 0):
                    seen[i] = True
            adamw_step(params, grads, state, lr or config.lr, config.betas, config.eps, config.weight_decay)
            records.append((step, epoch, value))
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                return records, seen
    return records, seen


def train(config: TrainConfig, examples: Sequence[Example], weights: BaseWeights,
          adapters: AdapterSet, gate: GateParams | None = None) -> TrainResult:
    """Optimise the adapters (and, in imsm mode, the gate) against frozen weights."""
    if not weights.frozen:
        raise TrainingError("base weights must be frozen before PEFT training")
    fusion = FusionMode(config.fusion)
    if config.mode == "imsm" and fusion is not FusionMode.FIXED_HALF and gate is None:
        raise TrainingError(f"fusion mode {fusion.value} needs gate parameters")
    params = adapters.parameters()
    if config.mode == "imsm" and gate is not None:
        params += gate.parameters()
    for p in params:
        p.requires_grad = True
    before = weights.checksum()
    t0 = time.perf_counter()
    records, seen = _fit(
        params,
        lambda b: loss_batch(b, weights, adapters, gate, config.mode, fusion),
        examples,
        config,
    )
    if weights.checksum() != before:
        raise TrainingError("frozen base weights changed during training")
    log.info("trained %d steps, final loss %.4f", len(records), records[-1][2])
    return TrainResult(adapters, gate if config.mode == "imsm" else None, records, seen, time.perf_counter() - t0)


def train_full(config: TrainConfig, examples: Sequence[Example], weights: BaseWeights) -> TrainResult:
    """Full-weight training of the backbone (used only to build the base model)."""
    weights.unfreeze()
    try:
        t0 = time.perf_counter()
        records, seen = _fit(weights.parameters(), lambda b: loss_batch(b, weights), examples, config)
    finally:
        weights.freeze()
    return TrainResult(None, None, records, seen, time.perf_counter() - t0)


def write_loss_csv(path, records: Sequence[tuple[int, int, float]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss"])
        for step, epoch, loss in records:
            w.writerow([step, epoch, repr(loss)])


def write_config_json(path, config: TrainConfig, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**config.to_dict(), **extra}, indent=2, sort_keys=True) + "\n")
