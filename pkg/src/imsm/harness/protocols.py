"""Experiment protocols over the synthetic tasks.

A base model is pretrained with all weights on a mixture of copy, reverse
and digit-sort prompts (task A). Adapters are then fine-tuned on modular
addition (task B), either alone ("vanilla") or interwoven with the frozen
branch ("imsm"), and each run is scored by greedy exact match on B and on
held-out A prompts. Every result is a ``MetricsRow``; CSV is the boundary.
"""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

from .. import numerics as nx
from ..adapters import AdapterSet, make_ia3, make_lora, trainable_param_count
from ..decoder import DecodeConfig, ThroughputReport, generate, generate_vanilla, measure_throughput
from ..fusion import FusionMode, GateParams, make_gate
from ..model import BaseWeights, ModelConfig, init_weights
from ..numerics import UsageError
from ..tokendata import Example, Vocab, batchify, decode, make_example
from ..trainer import TrainConfig, TrainResult, loss_batch, train, train_full
from .tasks import TaskSpec, generate_task, task_vocab

log = logging.getLogger(__name__)

COLUMNS = ("run_id", "mode", "task", "split", "accuracy", "loss", "tokens_per_sec",
           "trainable_params", "gate_rank", "seed")
A_TASKS = ("copy", "reverse", "sort_digits")
TASK_A = "A"
TASK_B = "mod_add"


@dataclass
class MetricsRow:
    run_id: str
    mode: str
    task: str
    split: str
    accuracy: float
    loss: float
    tokens_per_sec: float
    trainable_params: int
    gate_rank: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    @property
    def peft(self) -> str:
        # run ids look like "<protocol>/<peft>/<mode>/s<seed>"
        parts = self.run_id.split("/")
        return parts[1] if len(parts) > 1 else ""

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in COLUMNS}


def write_metrics(path, rows: Iterable[MetricsRow], append: bool = False) -> None:
    """Write rows with the fixed column order; ``append`` keeps existing rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        if fresh:
            w.writeheader()
        for row in rows:
            w.writerow(row.as_dict())


def read_metrics(path) -> list[MetricsRow]:
    casts = {f.name: f.type for f in fields(MetricsRow)}
    conv = {"str": str, "float": float, "int": int}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [MetricsRow(**{k: conv[casts[k]](v) for k, v in r.items()}) for r in reader]


# --------------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    accuracy: float
    loss: float
    tokens: int
    seconds: float

    @property
    def tokens_per_sec(self) -> float:
        return self.tokens / self.seconds if self.seconds > 0 else 0.0


def _decode_fn(mode: str, weights, adapters, gate, fusion):
    if mode == "base":
        return lambda p, cfg: generate_vanilla(p, cfg, weights, None, keep_eos=True)
    if mode == "vanilla":
        return lambda p, cfg: generate_vanilla(p, cfg, weights, adapters, keep_eos=True)
    if mode == "imsm":
        return lambda p, cfg: generate(p, cfg, weights, adapters, gate, fusion, keep_eos=True)
    raise ValueError(f"unknown eval mode {mode!r}")


def _strip_eos(ids: list[int], eos: int) -> list[int]:
    return ids[:-1] if ids and ids[-1] == eos else ids


def _exact_match(examples, vocab, decode_fn) -> tuple[float, int, float]:
    hits = tokens = 0
    t0 = time.perf_counter()
    for ex in examples:
        # one token past the reference is enough to tell "stopped" from "kept going"
        out = decode_fn(list(ex.prompt_tokens), DecodeConfig(max_new_tokens=len(ex.completion_tokens)))
        tokens += len(out)
        hits += decode(_strip_eos(out, vocab.eos), vocab) == ex.completion
    return hits / len(examples), tokens, time.perf_counter() - t0


def _to_examples(dataset, vocab: Vocab) -> list[Example]:
    out = [r if isinstance(r, Example) else make_example(r["prompt"], r["completion"], vocab) for r in dataset]
    if not out:
        raise UsageError("evaluation dataset is empty")
    return out


def eval_exact_match(dataset, vocab: Vocab, weights: BaseWeights, adapters: AdapterSet | None = None,
                     gate: GateParams | None = None, mode: str = "vanilla",
                     fusion: FusionMode | str = FusionMode.QUERY_GATE) -> float:
    """Fraction of prompts whose greedy completion equals the reference (EOS stripped).

    ``mode`` is ``base`` (frozen model alone), ``vanilla`` (tuned branch) or ``imsm``.
    """
    examples = _to_examples(dataset, vocab)
    return _exact_match(examples, vocab, _decode_fn(mode, weights, adapters, gate, fusion))[0]


def _mean_loss(examples, weights, adapters, gate, mode, fusion, batch_size=32) -> float:
    total = count = 0.0
    with nx.no_grad():
        for batch in batchify(examples, batch_size):
            n = int(batch.loss_mask[:, 1:].sum())
            if mode == "imsm":
                value = loss_batch(batch, weights, adapters, gate, "imsm", fusion).item()
            else:
                value = loss_batch(batch, weights, adapters if mode == "vanilla" else None).item()
            total += value * n
            count += n
    return total / count


def evaluate(dataset, vocab: Vocab, weights: BaseWeights, adapters: AdapterSet | None = None,
             gate: GateParams | None = None, mode: str = "vanilla",
             fusion: FusionMode | str = FusionMode.QUERY_GATE) -> EvalResult:
    """Exact match plus teacher-forced loss and decode throughput on ``dataset``."""
    examples = _to_examples(dataset, vocab)
    acc, tokens, seconds = _exact_match(examples, vocab, _decode_fn(mode, weights, adapters, gate, fusion))
    return EvalResult(acc, _mean_loss(examples, weights, adapters, gate, mode, fusion), tokens, seconds)


# --------------------------------------------------------------------- pretraining

@dataclass
class PretrainConfig:
    """Task-A mixture and the full-weight schedule that turns it into the base model."""

    tasks: tuple[str, ...] = A_TASKS
    size: int = 4000               # examples per task, before the 80/10/10 split
    min_len: int = 2
    max_len: int = 5
    data_seed: int = 1
    steps: int = 3500
    lr: float = 2e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    model: dict = field(default_factory=dict)   # ModelConfig overrides

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        for kind in self.tasks:
            if kind == TASK_B:
                raise ValueError("the pretraining mixture must not contain the fine-tuning task")
            TaskSpec(kind, self.size, self.min_len, self.max_len, self.data_seed)

    def to_dict(self) -> dict:
        return asdict(self)


def task_a_splits(cfg: PretrainConfig) -> dict[str, dict[str, list[dict]]]:
    """``{kind: {split: rows}}`` for every task in the A mixture."""
    return {k: generate_task(TaskSpec(k, cfg.size, cfg.min_len, cfg.max_len, cfg.data_seed)) for k in cfg.tasks}


def pretrain_base(cfg: PretrainConfig, vocab: Vocab | None = None) -> tuple[BaseWeights, TrainResult]:
    """Full-weight training on the A mixture; the result comes back frozen."""
    vocab = vocab or task_vocab()
    rows = [r for splits in task_a_splits(cfg).values() for r in splits["train"]]
    examples = _to_examples(rows, vocab)
    model_cfg = ModelConfig(vocab_size=len(vocab), **cfg.model)
    weights = init_weights(model_cfg, seed=cfg.seed)
    tc = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=10 ** 6, max_steps=cfg.steps,
                     weight_decay=cfg.weight_decay, seed=cfg.seed)
    result = train_full(tc, examples, weights)
    log.info("pretrained %d steps in %.1fs, final loss %.4f", len(result.records), result.seconds,
             result.final_loss)
    return weights, result


def save_base(path, weights: BaseWeights, cfg: PretrainConfig) -> None:
    weights.save(path, {"pretrain": cfg.to_dict()})


def load_base(path) -> tuple[BaseWeights, PretrainConfig]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"base checkpoint {path} not found; run `pretrain` first")
    weights, meta = BaseWeights.load(path)
    pre = meta.get("pretrain")
    if pre is None:
        raise UsageError(f"{path} carries no pretraining record")
    return weights.freeze(), PretrainConfig(**pre)


# --------------------------------------------------------------------- fine-tuning

DEFAULT_LR = {"lora": 3e-4, "ia3": 3e-3}


@dataclass
class RunConfig:
    """One adapter fine-tuning run."""

    peft: str = "lora"
    mode: str = "vanilla"
    fusion: str = "query"
    gate_rank: int = 8
    seed: int = 0
    lora_targets: tuple[str, ...] = ("q", "v")
    lora_rank: int = 4
    ia3_targets: tuple[str, ...] = ("k", "v", "down")
    lr: float | None = None          # None picks the per-method default
    epochs: int = 3
    batch_size: int = 16
    weight_decay: float = 0.01
    max_steps: int | None = None

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        self.ia3_targets = tuple(self.ia3_targets)
        if self.peft not in ("lora", "ia3"):
            raise ValueError(f"unknown peft {self.peft!r}")
        if self.mode not in ("vanilla", "imsm"):
            raise ValueError(f"unknown mode {self.mode!r}")
        FusionMode(self.fusion)

    @property
    def learning_rate(self) -> float:
        return DEFAULT_LR[self.peft] if self.lr is None else self.lr

    @property
    def label(self) -> str:
        if self.mode == "vanilla":
            return "vanilla"
        return "imsm" if self.fusion == "query" else f"imsm-{self.fusion}"

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
                           weight_decay=self.weight_decay, seed=self.seed, mode=self.mode,
                           fusion=self.fusion, max_steps=self.max_steps)

    def to_dict(self) -> dict:
        return asdict(self)


def fresh_parameters(run: RunConfig, config: ModelConfig) -> tuple[AdapterSet, GateParams | None]:
    if run.peft == "lora":
        adapters = make_lora(config, run.lora_targets, rank=run.lora_rank, seed=run.seed)
    else:
        adapters = make_ia3(config, run.ia3_targets)
    gate = None
    if run.mode == "imsm":
        gate = make_gate(config.d_model, run.gate_rank, run.fusion, seed=run.seed + 1000)
    return adapters, gate


def finetune(run: RunConfig, weights: BaseWeights, examples: Sequence[Example]) -> TrainResult:
    adapters, gate = fresh_parameters(run, weights.config)
    return train(run.train_config(), examples, weights, adapters, gate)


# --------------------------------------------------------------------- protocols

@dataclass
class ProtocolConfig:
    base_path: str
    task_b: dict = field(default_factory=lambda: {"size": 8000, "min_len": 2, "max_len": 2, "seed": 2})
    n_eval_a: int = 40               # held-out A prompts per task
    n_eval_b: int = 100              # held-out B prompts
    seeds: tuple[int, ...] = (0, 1, 2)
    pefts: tuple[str, ...] = ("lora", "ia3")
    run: dict = field(default_factory=dict)            # RunConfig overrides shared by every run
    peft_overrides: dict = field(default_factory=dict)  # {"lora": {...}, "ia3": {...}}
    out_dir: str | None = None       # checkpoints and loss curves, when set

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        self.pefts = tuple(self.pefts)
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.n_eval_a < 1 or self.n_eval_b < 1:
            raise ValueError("evaluation sets must be nonempty")

    def run_config(self, peft: str, **extra) -> RunConfig:
        return RunConfig(**{**self.run, **self.peft_overrides.get(peft, {}), "peft": peft, **extra})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Workspace:
    """Everything a protocol reads: the frozen base and the two evaluation pools."""

    vocab: Vocab
    weights: BaseWeights
    train_b: list[Example]
    eval_b: list[Example]
    eval_a: list[Example]


def prepare(cfg: ProtocolConfig) -> Workspace:
    vocab = task_vocab()
    weights, pre = load_base(cfg.base_path)
    if weights.config.vocab_size != len(vocab):
        raise UsageError("base checkpoint vocabulary does not match the task vocabulary")
    b = generate_task(TaskSpec(TASK_B, **cfg.task_b))
    a_rows = [r for splits in task_a_splits(pre).values() for r in splits["test"][:cfg.n_eval_a]]
    return Workspace(vocab, weights, _to_examples(b["train"], vocab),
                     _to_examples(b["test"][:cfg.n_eval_b], vocab), _to_examples(a_rows, vocab))


def base_row(ws: Workspace, protocol: str) -> MetricsRow:
    res = evaluate(ws.eval_a, ws.vocab, ws.weights, mode="base")
    return MetricsRow(f"{protocol}/base/base/s0", "base", TASK_A, "test", res.accuracy, res.loss,
                      res.tokens_per_sec, 0, 0, 0)


def _save_run(out_dir, run_id: str, run: RunConfig, result: TrainResult) -> None:
    from ..trainer import write_config_json, write_loss_csv
    d = Path(out_dir) / run_id.replace("/", "_")
    d.mkdir(parents=True, exist_ok=True)
    result.adapters.save(d / "adapters.imsm")
    if result.gate is not None:
        result.gate.save(d / "gate.imsm")
    write_loss_csv(d / "loss.csv", result.records)
    write_config_json(d / "config.json", run.train_config(), **run.to_dict())


def execute_run(ws: Workspace, run: RunConfig, protocol: str,
                out_dir=None) -> tuple[list[MetricsRow], TrainResult]:
    """Fine-tune one configuration on B; score B and A retention."""
    run_id = f"{protocol}/{run.peft}/{run.label}/s{run.seed}"
    result = finetune(run, ws.weights, ws.train_b)
    gate_rank = result.gate.rank if result.gate is not None else 0
    params = trainable_param_count(result.adapters, result.gate)
    rows = []
    for task, pool in ((TASK_B, ws.eval_b), (TASK_A, ws.eval_a)):
        res = evaluate(pool, ws.vocab, ws.weights, result.adapters, result.gate, run.mode, run.fusion)
        rows.append(MetricsRow(run_id, run.label, task, "test", res.accuracy, res.loss, res.tokens_per_sec,
                               params, gate_rank, run.seed))
    log.info("%s: B %.3f, A %.3f (%.1fs train)", run_id, rows[0].accuracy, rows[1].accuracy, result.seconds)
    if out_dir is not None:
        _save_run(out_dir, run_id, run, result)
    return rows, result


def run_forgetting_protocol(cfg: ProtocolConfig) -> list[MetricsRow]:
    """{vanilla, imsm} x each PEFT x each seed, plus the untouched base's A accuracy."""
    ws = prepare(cfg)
    rows = [base_row(ws, "forget")]
    for peft in cfg.pefts:
        for mode in ("vanilla", "imsm"):
            for seed in cfg.seeds:
                run = cfg.run_config(peft, mode=mode, seed=seed, fusion="query")
                rows += execute_run(ws, run, "forget", cfg.out_dir)[0]
    return rows


ABLATION_VARIANTS = ("query", "noquery", "half")


def run_ablation(cfg: ProtocolConfig, variants: Sequence[str] = ABLATION_VARIANTS,
                 peft: str = "lora") -> tuple[list[MetricsRow], dict[str, str]]:
    """Train each fusion variant on the same data and seeds; also return checkpoint digests."""
    for v in variants:
        FusionMode(v)
    ws = prepare(cfg)
    rows, digests = [], {}
    for v in variants:
        for seed in cfg.seeds:
            run = cfg.run_config(peft, mode="imsm", fusion=v, seed=seed)
            r, result = execute_run(ws, run, "ablate", cfg.out_dir)
            rows += r
            digests[r[0].run_id] = result.adapters.checksum() + (result.gate.checksum() if result.gate else "")
    return rows, digests


def run_rank_sweep(cfg: ProtocolConfig, ranks: Sequence[int] = (4, 8, 16), peft: str = "lora") -> list[MetricsRow]:
    """IMSM with each gate rank, one seed (the first), fixed data."""
    if not ranks:
        raise UsageError("rank sweep needs at least one rank")
    ws = prepare(cfg)
    d = ws.weights.config.d_model
    bad = [r for r in ranks if not 0 < r < d]
    if bad:
        raise UsageError(f"gate ranks {bad} must lie in (0, d={d})")
    rows = []
    for r in ranks:
        run = cfg.run_config(peft, mode="imsm", fusion="query", gate_rank=r, seed=cfg.seeds[0])
        rows += execute_run(ws, run, "sweep", cfg.out_dir)[0]
    return rows


def throughput_report(prompts: Sequence[Sequence[int]], weights: BaseWeights, adapters: AdapterSet | None,
                      gate: GateParams | None, max_new_tokens: int = 16, repeats: int = 3,
                      fusion: FusionMode | str = FusionMode.QUERY_GATE) -> dict[str, ThroughputReport]:
    """Best-of-``repeats`` tokens/sec for both decode paths on identical prompts.

    The two modes alternate within each repeat so slow drifts in machine
    load hit both equally.
    """
    cfg = DecodeConfig(max_new_tokens)
    best: dict[str, ThroughputReport] = {}
    for _ in range(repeats):
        for mode in ("vanilla", "imsm"):
            rep = measure_throughput(prompts, mode, cfg, weights, adapters, gate, fusion)
            if mode not in best or rep.tokens_per_sec > best[mode].tokens_per_sec:
                best[mode] = rep
    return best


# --------------------------------------------------------------------- summaries

def median_accuracy(rows: Iterable[MetricsRow], peft: str, mode: str, task: str) -> float:
    vals = [r.accuracy for r in rows if r.peft == peft and r.mode == mode and r.task == task]
    if not vals:
        raise KeyError(f"no rows for {peft}/{mode}/{task}")
    return statistics.median(vals)


def by_seed(rows: Iterable[MetricsRow], peft: str, mode: str, task: str) -> dict[int, float]:
    return {r.seed: r.accuracy for r in rows if r.peft == peft and r.mode == mode and r.task == task}


def comparison_table(rows: Sequence[MetricsRow]) -> str:
    """Median accuracy per (peft, mode) on B and A, with trainable parameter counts."""
    groups: dict[tuple[str, str], list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.peft, r.mode), []).append(r)
    lines = [f"{'peft':<6} {'mode':<13} {'B (median)':>10} {'A (median)':>10} {'params':>8} {'seeds':>5}"]
    for (peft, mode), rs in groups.items():
        med = {t: statistics.median([r.accuracy for r in rs if r.task == t]) if any(r.task == t for r in rs)
               else float("nan") for t in (TASK_B, TASK_A)}
        lines.append(f"{peft:<6} {mode:<13} {med[TASK_B]:>10.3f} {med[TASK_A]:>10.3f} "
                     f"{rs[0].trainable_params:>8d} {len({r.seed for r in rs}):>5d}")
    return "\n".join(lines)


def with_overrides(cfg: ProtocolConfig, **changes) -> ProtocolConfig:
    return replace(cfg, **changes)
