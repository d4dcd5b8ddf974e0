"""Command-line entry point: ``imsm <subcommand> ...``.

Configs are JSON, metrics are CSV with the fixed ``MetricsRow`` columns and
every checkpoint uses the shared archive format.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..adapters import AdapterSet, gate_param_count, trainable_param_count
from ..decoder import DecodeConfig, generate, generate_vanilla
from ..fusion import GateParams
from ..model import BaseWeights
from ..numerics import UsageError
from ..tokendata import BOS, decode, encode, load_jsonl, read_jsonl
from ..trainer import write_config_json, write_loss_csv
from . import protocols as P
from .tasks import TASK_KINDS, TaskSpec, synth, task_vocab


def _json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _load_model(args) -> tuple[BaseWeights, AdapterSet | None, GateParams | None]:
    weights, _ = BaseWeights.load(args.base)
    adapters = AdapterSet.load(args.adapters) if getattr(args, "adapters", None) else None
    gate = GateParams.load(args.gate) if getattr(args, "gate", None) else None
    return weights.freeze(), adapters, gate


def cmd_synth(args) -> None:
    spec = TaskSpec(args.task, args.size, args.min_len, args.max_len, args.seed)
    for split, path in synth(spec, args.out).items():
        print(f"{split}: {path}")


def cmd_pretrain(args) -> None:
    cfg = P.PretrainConfig(**{**_json(args.config), **({"steps": args.steps} if args.steps else {})})
    weights, result = P.pretrain_base(cfg)
    P.save_base(args.out, weights, cfg)
    if args.loss_csv:
        write_loss_csv(args.loss_csv, result.records)
    print(f"saved {args.out} after {len(result.records)} steps (final loss {result.final_loss:.4f})")


def cmd_finetune(args) -> None:
    overrides = _json(args.config)
    for key in ("peft", "mode", "fusion", "gate_rank", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    run = P.RunConfig(**overrides)
    weights, _ = P.load_base(args.base)
    vocab = task_vocab()
    result = P.finetune(run, weights, load_jsonl(args.train, vocab))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.adapters.save(out / "adapters.imsm")
    if result.gate is not None:
        result.gate.save(out / "gate.imsm")
    write_loss_csv(out / "loss.csv", result.records)
    write_config_json(out / "config.json", run.train_config(), **run.to_dict())
    print(f"trained {len(result.records)} steps, final loss {result.final_loss:.4f}, "
          f"{trainable_param_count(result.adapters, result.gate)} trainable params -> {out}")


def cmd_eval(args) -> None:
    weights, adapters, gate = _load_model(args)
    vocab = task_vocab()
    res = P.evaluate(read_jsonl(args.data), vocab, weights, adapters, gate, args.mode, args.fusion)
    print(f"accuracy {res.accuracy:.4f}  loss {res.loss:.4f}  tokens/sec {res.tokens_per_sec:.1f}")
    if args.metrics:
        row = P.MetricsRow(args.run_id, args.mode, args.task, args.split, res.accuracy, res.loss,
                           res.tokens_per_sec, trainable_param_count(adapters, gate),
                           gate.rank if gate is not None else 0, args.seed)
        P.write_metrics(args.metrics, [row], append=True)


def cmd_generate(args) -> None:
    weights, adapters, gate = _load_model(args)
    vocab = task_vocab()
    prompt = [BOS] + encode(args.prompt, vocab)
    cfg = DecodeConfig(args.max_new_tokens)
    trace: list[dict] = []
    if args.mode == "imsm":
        out = generate(prompt, cfg, weights, adapters, gate, args.fusion, trace=trace)
    else:
        out = generate_vanilla(prompt, cfg, weights, adapters if args.mode == "vanilla" else None)
    print(decode(out, vocab))
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for entry in trace:
                fh.write(json.dumps(entry) + "\n")


def _protocol_config(args) -> P.ProtocolConfig:
    data = _json(args.config)
    if args.base:
        data["base_path"] = args.base
    if "base_path" not in data:
        raise UsageError("a base checkpoint is required (--base or base_path in the config)")
    return P.ProtocolConfig(**data)


def cmd_forgetting(args) -> None:
    rows = P.run_forgetting_protocol(_protocol_config(args))
    P.write_metrics(args.out, rows)
    print(P.comparison_table(rows))


def cmd_ablate(args) -> None:
    rows, _ = P.run_ablation(_protocol_config(args), args.variants)
    P.write_metrics(args.out, rows)
    print(P.comparison_table(rows))


def cmd_sweep(args) -> None:
    rows = P.run_rank_sweep(_protocol_config(args), args.ranks)
    P.write_metrics(args.out, rows)
    for r in rows:
        print(f"rank {r.gate_rank:>3}  {r.task:<8} acc {r.accuracy:.3f}  params {r.trainable_params}")


def cmd_report(args) -> None:
    if args.metrics:
        print(P.comparison_table(P.read_metrics(args.metrics)))
    if args.params:
        print(f"{'d':>6} {'rank':>5} {'gate params':>12}")
        for r in args.ranks:
            print(f"{args.d:>6} {r:>5} {gate_param_count(args.d, r):>12}")
    if args.throughput:
        if not args.base:
            raise UsageError("--throughput needs --base (and usually --adapters/--gate)")
        weights, adapters, gate = _load_model(args)
        vocab = task_vocab()
        prompts = [list(e.prompt_tokens) for e in load_jsonl(args.throughput, vocab)]
        reports = P.throughput_report(prompts, weights, adapters, gate, args.max_new_tokens)
        for rep in reports.values():
            print(json.dumps(rep.as_row()))
        ratio = reports["imsm"].tokens_per_sec / max(reports["vanilla"].tokens_per_sec, 1e-12)
        print(f"imsm / vanilla = {ratio:.3f}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imsm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write train/dev/test JSONL for one task")
    p.add_argument("--task", choices=TASK_KINDS, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="full-weight training of the base on the task-A mixture")
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train adapters (and the gate in imsm mode)")
    p.add_argument("--base", required=True)
    p.add_argument("--train", required=True, help="JSONL with prompt/completion")
    p.add_argument("--peft", choices=("lora", "ia3"))
    p.add_argument("--mode", choices=("vanilla", "imsm"))
    p.add_argument("--fusion", choices=("query", "noquery", "half"))
    p.add_argument("--gate-rank", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    def model_args(p):
        p.add_argument("--base", required=True)
        p.add_argument("--adapters")
        p.add_argument("--gate")
        p.add_argument("--mode", choices=("base", "vanilla", "imsm"), default="imsm")
        p.add_argument("--fusion", choices=("query", "noquery", "half"), default="query")

    p = sub.add_parser("eval", help="exact match on a JSONL dataset")
    model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", help="append a MetricsRow to this CSV")
    p.add_argument("--run-id", default="eval")
    p.add_argument("--task", default="")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="greedy completion of one prompt")
    model_args(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--trace", help="write a per-step JSONL trace (imsm mode)")
    p.set_defaults(func=cmd_generate)

    for name, func, helptext in (("forgetting", cmd_forgetting, "fine-tune on B, measure A retention"),
                                 ("ablate", cmd_ablate, "query / noquery / half gate variants"),
                                 ("sweep", cmd_sweep, "gate-rank sweep")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--base")
        p.add_argument("--out", required=True, help="metrics CSV")
        if name == "ablate":
            p.add_argument("--variants", nargs="+", default=list(P.ABLATION_VARIANTS),
                           choices=P.ABLATION_VARIANTS)
        if name == "sweep":
            p.add_argument("--ranks", nargs="+", type=int, default=[4, 8, 16])
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="summaries: metrics table, gate params, throughput")
    p.add_argument("--metrics")
    p.add_argument("--params", action="store_true")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--ranks", nargs="+", type=int, default=[4, 8, 16])
    p.add_argument("--throughput", metavar="JSONL", help="prompts to decode with both paths")
    p.add_argument("--base")
    p.add_argument("--adapters")
    p.add_argument("--gate")
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
