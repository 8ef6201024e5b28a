"""Deterministic synthetic corpora and tasks for tests and the selftest command.

The planted corpus gives every "signal" word a private pair of context words
that co-occur with it in every sentence. Masking any of the three still
leaves the other two visible, so episodes built from these words are solvable
from the sentence content alone; filler words stay below any sensible
frequency threshold and never become classes.
"""

from __future__ import annotations

import json

import numpy as np


def make_fixture_corpus(n_lines: int = 1000, vocab_size: int = 120, seed: int = 0) -> str:
    """Random word sentences, one per line; a few lines are left empty."""
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(vocab_size)]
    # zipf-ish frequencies so some words clear min_freq thresholds and some don't
    weights = 1.0 / np.arange(1, vocab_size + 1)
    weights /= weights.sum()
    lines = []
    for i in range(n_lines):
        if i % 97 == 13:
            lines.append("")
            continue
        length = int(rng.integers(3, 12))
        picks = rng.choice(vocab_size, size=length, p=weights)
        lines.append(" ".join(words[j] for j in picks))
    return "\n".join(lines) + "\n"


def planted_words(n_families: int) -> list[list[str]]:
    return [[f"sig{f}", f"ctx{f}a", f"ctx{f}b"] for f in range(n_families)]


def make_planted_corpus(
    n_families: int = 4,
    sentences_per_family: int = 50,
    n_fillers: int = 200,
    seed: int = 0,
) -> str:
    """Line-mode corpus where each sentence carries one family's three marker
    words plus low-frequency fillers."""
    rng = np.random.default_rng(seed)
    fams = planted_words(n_families)
    fillers = [f"fill{i}" for i in range(n_fillers)]
    lines = []
    for f in range(n_families):
        for _ in range(sentences_per_family):
            toks = list(fams[f]) + [
                fillers[int(i)] for i in rng.choice(n_fillers, size=3, replace=False)
            ]
            rng.shuffle(toks)
            lines.append(" ".join(toks))
    order = rng.permutation(len(lines))
    return "\n".join(lines[i] for i in order) + "\n"


def make_separable_task_jsonl(
    pool_per_class: int = 64,
    test_per_class: int = 200,
    n_fillers: int = 200,
    seed: int = 1,
) -> str:
    """Two-class target task over planted-family marker words, split pool/test.

    Class A sentences carry family-0 markers, class B family-1 markers, so a
    bag-of-words linear model separates them perfectly.
    """
    rng = np.random.default_rng(seed)
    fams = planted_words(2)
    fillers = [f"fill{i}" for i in range(n_fillers)]
    lines = []
    for cls, markers in (("A", fams[0]), ("B", fams[1])):
        for j in range(pool_per_class + test_per_class):
            n_mark = int(rng.integers(2, 4))
            toks = [markers[int(i)] for i in rng.choice(3, size=n_mark, replace=False)]
            toks += [fillers[int(i)] for i in rng.choice(n_fillers, size=3, replace=False)]
            rng.shuffle(toks)
            split = "pool" if j < pool_per_class else "test"
            lines.append(
                json.dumps(
                    {"text": " ".join(toks), "label": cls, "split": split},
                    separators=(",", ":"),
                )
            )
    return "\n".join(lines) + "\n"


def make_supervised_jsonl(
    classes: list[str], n_per_class: int, vocab_size: int = 60, seed: int = 2
) -> str:
    """Generic labeled JSONL where each class has its own marker word."""
    rng = np.random.default_rng(seed)
    lines = []
    for ci, cls in enumerate(classes):
        for _ in range(n_per_class):
            length = int(rng.integers(3, 8))
            toks = [f"w{int(i)}" for i in rng.integers(0, vocab_size, size=length)]
            toks.append(f"marker{ci}")
            rng.shuffle(toks)
            lines.append(
                json.dumps({"text": " ".join(toks), "label": cls}, separators=(",", ":"))
            )
    return "\n".join(lines) + "\n"
