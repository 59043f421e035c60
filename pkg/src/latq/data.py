"""Synthetic needle-span task and JSON-lines dataset IO.

Each sequence hides a fixed 2-token cue pattern; the answer is the run of
reserved-vocabulary tokens immediately after the cue. Background tokens never
collide with the cue or answer ranges, so the task is unambiguous, and a
2-layer model can learn it in minutes while still needing actual attention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, FormatError
from .rng import spawn_rngs

PAD_ID = 0
CLS_ID = 1
CUE = (2, 3)
ANSWER_BASE = 4  # answer sub-vocabulary occupies [4, 4 + answer_vocab)


@dataclass(frozen=True)
class DatasetRecord:
    tokens: tuple[int, ...]
    answer_start: int
    answer_end: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not 0 <= self.answer_start <= self.answer_end < len(self.tokens):
            raise ConfigError(
                f"span ({self.answer_start}, {self.answer_end}) out of bounds for {len(self.tokens)} tokens"
            )
        if any(t < 0 for t in self.tokens):
            raise ConfigError("negative token id")


@dataclass(frozen=True)
class GenSettings:
    vocab_size: int = 64
    seq_len: int = 48
    n_train: int = 1024
    n_dev: int = 64
    n_test: int = 64
    answer_vocab: int = 8
    max_answer_len: int = 4

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ConfigError("vocab_size must be >= 8")
        if self.seq_len < 8:
            raise ConfigError("seq_len must be >= 8")
        if self.answer_vocab < 1 or self.max_answer_len < 1:
            raise ConfigError("answer_vocab and max_answer_len must be >= 1")
        if ANSWER_BASE + self.answer_vocab >= self.vocab_size:
            raise ConfigError("vocab too small for the reserved answer range")
        if 1 + len(CUE) + self.max_answer_len + 1 > self.seq_len:
            raise ConfigError("seq_len too small for cue plus answer span")
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def background_base(self) -> int:
        return ANSWER_BASE + self.answer_vocab


def _gen_record(gs: GenSettings, rng) -> DatasetRecord:
    tokens = rng.integers(gs.background_base, gs.vocab_size, size=gs.seq_len)
    tokens[0] = CLS_ID
    span_len = int(rng.integers(1, gs.max_answer_len + 1))
    # cue occupies [pos, pos+1], answer [pos+2, pos+2+span_len-1]
    pos = int(rng.integers(1, gs.seq_len - len(CUE) - span_len + 1))
    tokens[pos], tokens[pos + 1] = CUE
    start = pos + len(CUE)
    answer = rng.integers(ANSWER_BASE, ANSWER_BASE + gs.answer_vocab, size=span_len)
    tokens[start : start + span_len] = answer
    return DatasetRecord(tuple(int(t) for t in tokens), start, start + span_len - 1)


def gen_dataset(gs: GenSettings, seed: int):
    """(train, dev, test) record lists; each split drawn from its own substream."""
    streams = spawn_rngs(seed, 3)
    sizes = (gs.n_train, gs.n_dev, gs.n_test)
    return tuple([_gen_record(gs, rng) for _ in range(size)] for rng, size in zip(streams, sizes))


def save_dataset(records, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps({"tokens": list(r.tokens), "answer_start": r.answer_start,
                                 "answer_end": r.answer_end}) + "\n")


def load_dataset(path):
    path = Path(path)
    records = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(DatasetRecord(tuple(obj["tokens"]), obj["answer_start"], obj["answer_end"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{line_no}: bad dataset record: {exc}") from exc
    return records
