"""Character-level corpora, batching and metrics files.

Corpus formats
--------------
``causal_lm``: UTF-8 text, one sample per non-empty line. Lines longer than
``max_seq_len`` characters are cut into consecutive chunks.

``classification``: UTF-8, one ``label<TAB>text`` record per non-empty line.

Metrics formats
---------------
CSV with a header row, or JSON lines with one object per step. Both carry the
columns listed by :func:`metrics_columns`; floats are written with ``repr`` so
re-parsing is exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import ContractError

METRICS_SCHEMA_VERSION = 1

PAD, START, UNK = "<pad>", "<s>", "<unk>"


class CorpusError(ValueError):
    """Malformed or empty corpus."""


@dataclass
class Vocab:
    symbols: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")

    @classmethod
    def build(cls, texts: Iterable[str]) -> Vocab:
        chars = sorted(set("".join(texts)))
        return cls([PAD, START, UNK] + chars)

    pad_id = property(lambda self: self.index[PAD])
    start_id = property(lambda self: self.index[START])
    unk_id = property(lambda self: self.index[UNK])

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(ch, unk) for ch in text]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in ids if i >= 3)


@dataclass
class Sample:
    """One training example.

    ``token_ids`` is the model input (start symbol first). For language modelling
    ``target`` is the sequence of next characters, so input ``[<s>, a, b]`` pairs
    with target ``[a, b, c]``; for classification it is the class index.
    """

    sample_id: int
    token_ids: list[int]
    target: list[int] | int
    text: str = ""

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class Corpus:
    samples: list[Sample]
    vocab: Vocab
    labels: list[str] | None = None


def _read_lines(path) -> list[tuple[int, str]]:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    return [(n, line) for n, line in enumerate(raw.splitlines(), 1) if line.strip()]


def load_corpus(
    path,
    task: str = "causal_lm",
    max_seq_len: int = 64,
    vocab: Vocab | None = None,
    labels: Sequence[str] | None = None,
) -> Corpus:
    """Read a corpus file into samples numbered in file order.

    Pass the training split's ``vocab`` (and ``labels``) when loading a held-out
    split; otherwise both are built from this file.
    """
    lines = _read_lines(path)
    if not lines:
        raise CorpusError(f"empty corpus: {path}")
    if task == "causal_lm":
        chunks = [line[i:i + max_seq_len] for _, line in lines for i in range(0, len(line), max_seq_len)]
        vocab = vocab or Vocab.build(chunks)
        samples = []
        for sid, text in enumerate(chunks):
            ids = vocab.encode(text)
            samples.append(Sample(sid, [vocab.start_id] + ids[:-1], ids, text))
        return Corpus(samples, vocab)
    if task == "classification":
        records = []
        for lineno, line in lines:
            label, sep, text = line.partition("\t")
            if not sep or not label or not text:
                raise CorpusError(f"{path}:{lineno}: expected 'label<TAB>text'")
            records.append((label, text[: max_seq_len - 1]))
        vocab = vocab or Vocab.build(t for _, t in records)
        labels = list(labels) if labels is not None else sorted({lab for lab, _ in records})
        lookup = {lab: i for i, lab in enumerate(labels)}
        samples = []
        for sid, (label, text) in enumerate(records):
            if label not in lookup:
                raise CorpusError(f"{path}: label {label!r} not seen in training labels")
            samples.append(Sample(sid, [vocab.start_id] + vocab.encode(text), lookup[label], text))
        return Corpus(samples, vocab, labels)
    raise ValueError(f"unknown task {task!r}")


@dataclass
class Batch:
    sample_ids: np.ndarray
    tokens: np.ndarray  # (B, S) int, pad-filled
    mask: np.ndarray  # (B, S) bool, True on real tokens
    targets: np.ndarray  # (B, S) for LM, (B,) for classification

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def make_batches(samples: Sequence[Sample], order: Sequence[int], batch_size: int, pad_id: int = 0) -> list[Batch]:
    """Slice ``samples`` (looked up by ``sample_id`` through ``order``) into padded batches."""
    by_id = {s.sample_id: s for s in samples}
    order = list(order)
    if sorted(order) != sorted(by_id):
        raise ContractError("order is not a permutation of the sample ids")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batches = []
    for start in range(0, len(order), batch_size):
        group = [by_id[i] for i in order[start:start + batch_size]]
        width = max(len(s) for s in group)
        tokens = np.full((len(group), width), pad_id, dtype=np.intp)
        mask = np.zeros((len(group), width), dtype=bool)
        lm = isinstance(group[0].target, list)
        targets = np.full((len(group), width), pad_id, dtype=np.intp) if lm else np.zeros(len(group), dtype=np.intp)
        for row, s in enumerate(group):
            n = len(s)
            tokens[row, :n] = s.token_ids
            mask[row, :n] = True
            if lm:
                targets[row, :n] = s.target
            else:
                targets[row] = s.target
        batches.append(Batch(np.array([s.sample_id for s in group]), tokens, mask, targets))
    return batches


# -- metrics -----------------------------------------------------------------

def metrics_columns(num_layers: int) -> list[str]:
    return (
        ["step", "epoch", "loss", "task_loss", "aux_loss"]
        + [f"top2_ratio_{i}" for i in range(num_layers)]
        + ["frac_top1", "norm_compute", "modeled_step_time", "batch_expert_flops"]
    )


_INT_COLUMNS = {"step", "epoch"}


def export_metrics(records: Sequence[dict], path, fmt: str = "csv", num_layers: int | None = None) -> None:
    """Write one record per step; an empty stream yields a header-only CSV."""
    path = Path(path)
    if num_layers is None:
        num_layers = sum(1 for k in records[0] if k.startswith("top2_ratio_")) if records else 0
    columns = metrics_columns(num_layers)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if fmt == "csv":
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(columns)
                for rec in records:
                    writer.writerow([repr(rec[c]) for c in columns])
            elif fmt == "jsonl":
                for rec in records:
                    fh.write(json.dumps({c: rec[c] for c in columns}) + "\n")
            else:
                raise ValueError(f"unknown metrics format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".jsonl":
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    with open(path, encoding="utf-8", newline="") as fh:
        return [
            {k: int(v) if k in _INT_COLUMNS else float(v) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
