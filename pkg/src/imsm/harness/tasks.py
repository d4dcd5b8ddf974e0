"""Deterministic synthetic prompt/completion tasks with exact-match answers."""

from __future__ import annotations

import itertools
import math
import string
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..tokendata import Vocab, build_vocab, write_jsonl

LETTERS = string.ascii_lowercase
DIGITS = string.digits
ARROW = "→"
TASK_KINDS = ("copy", "reverse", "sort_digits", "mod_add")
PREFIX = {"copy": "copy:", "reverse": "reverse:", "sort_digits": "sort:"}


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    size: int
    min_len: int = 3
    max_len: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.size < 3:
            raise ValueError("size must be >= 3 so every split is nonempty")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length bounds ({self.min_len}, {self.max_len})")

    def to_dict(self) -> dict:
        return asdict(self)


def task_vocab() -> Vocab:
    """One vocabulary covering every task kind, shared by base and adapters."""
    return build_vocab(["".join(PREFIX.values()), LETTERS, DIGITS, "+=" + ARROW])


def _residue(total: int, digits: int) -> str:
    # fixed width answer: the sum modulo 10**digits, zero-padded
    return str(total % 10 ** digits).zfill(digits)


def _capacity(spec: TaskSpec) -> float:
    if spec.kind == "mod_add":
        lo = 0 if spec.min_len == 1 else 10 ** (spec.min_len - 1)
        return float((10 ** spec.max_len - lo) ** 2)
    alphabet = DIGITS if spec.kind == "sort_digits" else LETTERS
    return float(sum(len(alphabet) ** n for n in range(spec.min_len, spec.max_len + 1)))


def _sample(spec: TaskSpec, rng: np.random.Generator) -> tuple[str, str]:
    if spec.kind == "mod_add":
        lo = 0 if spec.min_len == 1 else 10 ** (spec.min_len - 1)
        hi = 10 ** spec.max_len
        a, b = (int(x) for x in rng.integers(lo, hi, size=2))
        return f"{a}+{b}=", _residue(a + b, spec.max_len)
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    alphabet = DIGITS if spec.kind == "sort_digits" else LETTERS
    s = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=n))
    prompt = f"{PREFIX[spec.kind]}{s}{ARROW}"
    if spec.kind == "copy":
        return prompt, s
    if spec.kind == "reverse":
        return prompt, s[::-1]
    return prompt, "".join(sorted(s))


def generate_task(spec: TaskSpec) -> dict[str, list[dict]]:
    """Unique-prompt examples split 80/10/10 into train/dev/test."""
    if spec.size > _capacity(spec):
        raise ValueError(f"{spec.kind} with bounds ({spec.min_len}, {spec.max_len}) has fewer than "
                         f"{spec.size} distinct prompts")
    if spec.size > 0.5 * _capacity(spec) and _capacity(spec) <= 1e6:
        pool = list(_enumerate(spec))
        rng = np.random.default_rng(spec.seed)
        rows = [pool[i] for i in rng.permutation(len(pool))[:spec.size]]
    else:
        rng = np.random.default_rng(spec.seed)
        seen: dict[str, str] = {}
        while len(seen) < spec.size:
            p, c = _sample(spec, rng)
            seen.setdefault(p, c)
        rows = list(seen.items())
    records = [{"prompt": p, "completion": c} for p, c in rows]
    n_train = math.floor(0.8 * spec.size)
    n_dev = max(1, math.floor(0.1 * spec.size))
    n_train = min(n_train, spec.size - n_dev - 1)
    return {
        "train": records[:n_train],
        "dev": records[n_train:n_train + n_dev],
        "test": records[n_train + n_dev:],
    }


def _enumerate(spec: TaskSpec):
    if spec.kind == "mod_add":
        lo = 0 if spec.min_len == 1 else 10 ** (spec.min_len - 1)
        hi = 10 ** spec.max_len
        for a, b in itertools.product(range(lo, hi), repeat=2):
            yield f"{a}+{b}=", _residue(a + b, spec.max_len)
        return
    alphabet = DIGITS if spec.kind == "sort_digits" else LETTERS
    for n in range(spec.min_len, spec.max_len + 1):
        for chars in itertools.product(alphabet, repeat=n):
            s = "".join(chars)
            out = {"copy": s, "reverse": s[::-1], "sort_digits": "".join(sorted(s))}[spec.kind]
            yield f"{PREFIX[spec.kind]}{s}{ARROW}", out


def synth(spec: TaskSpec, out_dir) -> dict[str, Path]:
    """Write ``train/dev/test.jsonl`` for ``spec`` under ``out_dir``; return the paths."""
    out_dir = Path(out_dir)
    paths = {}
    for split, rows in generate_task(spec).items():
        paths[split] = out_dir / f"{split}.jsonl"
        write_jsonl(paths[split], rows)
    return paths
