"""Deterministic toy corpora with a mix of plain and convoluted sentences.

No downloads: text is produced from a small grammar. Short declarative
sentences sit next to ones with relative clauses, reported speech and
concessive openers, so samples differ in how hard they are to model.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

NOUNS = ["cat", "dog", "farmer", "river", "teacher", "child", "storm", "city", "king", "garden",
         "bird", "sailor", "door", "letter", "mountain", "village", "doctor", "horse", "book", "road"]
ADJS = ["old", "small", "quiet", "bright", "tired", "green", "strange", "happy", "cold", "brave"]
VERBS_I = ["sleeps", "runs", "waits", "sings", "falls", "laughs", "works", "returns"]
VERBS_T = ["sees", "finds", "carries", "follows", "paints", "opens", "visits", "watches"]
VERBS_SAY = ["said", "believed", "knew", "heard", "feared"]
ADVS = ["slowly", "today", "again", "at night", "in the morning", "near the road"]
OPENERS = ["although", "because", "while", "when", "before"]
POS_WORDS = ["good", "lovely", "wonderful", "great", "charming"]
NEG_WORDS = ["bad", "dull", "awful", "boring", "clumsy"]


def _np(rng) -> str:
    det = rng.choice(["the", "a", "every", "that"])
    if rng.random() < 0.4:
        return f"{det} {rng.choice(ADJS)} {rng.choice(NOUNS)}"
    return f"{det} {rng.choice(NOUNS)}"


def _clause(rng, depth: int = 0) -> str:
    subj = _np(rng)
    if depth < 2 and rng.random() < 0.25:
        subj += f" who {rng.choice(VERBS_T)} {_np(rng)}"
    if rng.random() < 0.5:
        core = f"{subj} {rng.choice(VERBS_I)}"
    else:
        core = f"{subj} {rng.choice(VERBS_T)} {_np(rng)}"
    if rng.random() < 0.3:
        core += f" {rng.choice(ADVS)}"
    if depth < 2 and rng.random() < 0.2:
        core += f" and {rng.choice(VERBS_SAY)} that {_clause(rng, depth + 1)}"
    return core


def sentence(rng: np.random.Generator) -> str:
    if rng.random() < 0.45:
        text = _clause(rng, depth=2)
    else:
        text = _clause(rng)
        if rng.random() < 0.5:
            text = f"{rng.choice(OPENERS)} {_clause(rng, 1)}, {text}"
    return text + rng.choice([".", ".", ".", "!", "?"])


def lm_corpus(n_lines: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    return [sentence(rng) for _ in range(n_lines)]


def classification_corpus(n_lines: int, seed: int = 0) -> list[tuple[str, str]]:
    """``(label, text)`` pairs; negation flips the polarity word's label."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_lines):
        positive = rng.random() < 0.5
        negate = rng.random() < 0.3
        word = rng.choice(POS_WORDS if positive != negate else NEG_WORDS)
        subject = _np(rng)
        text = f"{subject} was {'not ' if negate else ''}{word}"
        if rng.random() < 0.4:
            text = f"{_clause(rng, 2)}, but {text}"
        rows.append(("pos" if positive else "neg", text))
    return rows


def write_corpora(directory, n_train: int = 3000, n_val: int = 300, seed: int = 0) -> dict[str, Path]:
    """Write ``train.txt``/``val.txt`` and ``train.tsv``/``val.tsv`` under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": d / "train.txt", "val": d / "val.txt",
        "train_tsv": d / "train.tsv", "val_tsv": d / "val.tsv",
    }
    paths["train"].write_text("\n".join(lm_corpus(n_train, seed)) + "\n", encoding="utf-8")
    paths["val"].write_text("\n".join(lm_corpus(n_val, seed + 1)) + "\n", encoding="utf-8")
    for key, n, s in (("train_tsv", n_train, seed), ("val_tsv", n_val, seed + 1)):
        rows = classification_corpus(n, s)
        paths[key].write_text("".join(f"{lab}\t{txt}\n" for lab, txt in rows), encoding="utf-8")
    return paths
