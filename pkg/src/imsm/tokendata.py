"""Character vocabulary, JSONL prompt/completion datasets and padded batches."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")


class EncodingError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    symbols: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_ids", {s: i for i, s in enumerate(self.symbols)})

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def eos(self) -> int:
        return EOS

    def id_of(self, ch: str) -> int:
        try:
            return self._ids[ch]
        except KeyError:
            raise EncodingError(f"character {ch!r} is not in the vocabulary") from None

    def chars(self) -> str:
        return "".join(self.symbols[len(SPECIALS):])

    @classmethod
    def from_chars(cls, chars: str) -> "Vocab":
        return cls(SPECIALS + tuple(chars))


def build_vocab(corpus: Iterable[str]) -> Vocab:
    """Specials first, then every distinct character in code-point order."""
    lines = list(corpus)
    if not lines or not any(lines):
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocab(SPECIALS + tuple(sorted(set("".join(lines)))))


def encode(text: str, vocab: Vocab) -> list[int]:
    return [vocab.id_of(ch) for ch in text]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    n = len(SPECIALS)
    return "".join(vocab.symbols[i] for i in ids if i >= n)


@dataclass(frozen=True)
class Example:
    prompt_tokens: tuple[int, ...]
    completion_tokens: tuple[int, ...]
    prompt: str = ""
    completion: str = ""

    @property
    def t_in(self) -> int:
        return len(self.prompt_tokens)

    @property
    def t_out(self) -> int:
        return len(self.completion_tokens)

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt_tokens + self.completion_tokens


def make_example(prompt: str, completion: str, vocab: Vocab) -> Example:
    return Example(
        (BOS, *encode(prompt, vocab)),
        (*encode(completion, vocab), EOS),
        prompt,
        completion,
    )


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}:{lineno}: expected an object")
            for key in ("prompt", "completion"):
                if not isinstance(obj.get(key), str):
                    raise DatasetError(f"{path}:{lineno}: missing string field {key!r}")
            rows.append(obj)
    return rows


def write_jsonl(path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_jsonl(path, vocab: Vocab) -> list[Example]:
    return [make_example(r["prompt"], r["completion"], vocab) for r in read_jsonl(path)]


@dataclass
class Batch:
    tokens: np.ndarray      # [B, T] int, right-padded with PAD
    loss_mask: np.ndarray   # [B, T] bool, true on completion tokens (EOS included)
    t_in: np.ndarray        # [B] prompt lengths
    lengths: np.ndarray     # [B] unpadded lengths

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


def collate(examples: Sequence[Example]) -> Batch:
    width = max(len(ex.tokens) for ex in examples)
    tokens = np.full((len(examples), width), PAD, dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=bool)
    for i, ex in enumerate(examples):
        seq = ex.tokens
        tokens[i, :len(seq)] = seq
        mask[i, ex.t_in:len(seq)] = True
    return Batch(
        tokens,
        mask,
        np.array([ex.t_in for ex in examples], dtype=np.int64),
        np.array([len(ex.tokens) for ex in examples], dtype=np.int64),
    )


def batchify(examples: Sequence[Example], batch_size: int, vocab: Vocab | None = None) -> list[Batch]:
    """Consecutive groups of ``batch_size`` examples, each right-padded to its longest row."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [collate(examples[i:i + batch_size]) for i in range(0, len(examples), batch_size)]
