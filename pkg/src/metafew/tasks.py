"""Episode sampling: masked-subset tasks from the corpus, supervised tasks
from labeled JSONL files, and the Bernoulli mixture of the two.

An episode is one N-way classification task. For a masked-subset episode the
N classes are N distinct eligible words; every sentence sampled for a word
has all occurrences of that word replaced by the mask token, and sentences
containing any of the other chosen words are excluded so no class word ever
appears unmasked anywhere in the episode. Class-to-label assignment is a
fresh uniform permutation per episode, so labels carry no word identity.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import MASK_ID, SentenceStore, VocabIndex

log = logging.getLogger(__name__)

DEFAULT_SUPPORT_BUDGET = 80
DEFAULT_Q_QUERY = 10
DEFAULT_LAMBDA = 0.5


class TaskSamplingError(Exception):
    """Episode could not be sampled from the available data."""


class TaskConfigError(Exception):
    """Sampler configuration inconsistent with the available task sources."""


@dataclass
class SamplerConfig:
    n_way_choices: tuple[int, ...] = (2, 3, 4)
    k_support: int | None = None  # None -> floor(support_budget / N)
    q_query: int = DEFAULT_Q_QUERY
    q_per_task: bool = False  # True -> q_query is a total budget, split over N
    support_budget: int = DEFAULT_SUPPORT_BUDGET
    lambda_mix: float | None = None  # None -> pure masked-subset sampling
    retries: int = 10

    def __post_init__(self):
        if not self.n_way_choices or any(n < 2 for n in self.n_way_choices):
            raise ValueError(f"n_way_choices must all be >= 2, got {self.n_way_choices}")
        if self.q_query < 1:
            raise ValueError("q_query must be positive")
        if self.k_support is not None and self.k_support < 1:
            raise ValueError("k_support must be positive")
        if self.lambda_mix is not None and not (0.0 < self.lambda_mix < 1.0):
            raise ValueError(f"lambda_mix must lie in (0, 1), got {self.lambda_mix}")

    def shots(self, n_way: int) -> tuple[int, int]:
        k = self.k_support if self.k_support is not None else self.support_budget // n_way
        q = max(1, self.q_query // n_way) if self.q_per_task else self.q_query
        return k, q


@dataclass
class Episode:
    n_way: int
    k_support: int
    q_query: int
    provenance: str
    support_tokens: list[np.ndarray]
    support_labels: np.ndarray
    query_tokens: list[np.ndarray]
    query_labels: np.ndarray
    secret_words: np.ndarray | None = None  # masked word id per label; never model input

    def to_json(self, debug_secrets: bool = False) -> str:
        rec = {
            "n_way": self.n_way,
            "k": self.k_support,
            "q": self.q_query,
            "provenance": self.provenance,
            "support": [
                {"tokens": [int(t) for t in toks], "label": int(lab)}
                for toks, lab in zip(self.support_tokens, self.support_labels)
            ],
            "query": [
                {"tokens": [int(t) for t in toks], "label": int(lab)}
                for toks, lab in zip(self.query_tokens, self.query_labels)
            ],
        }
        if debug_secrets and self.secret_words is not None:
            rec["secret_words"] = [int(w) for w in self.secret_words]
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Episode":
        rec = json.loads(line)
        return cls(
            n_way=rec["n_way"],
            k_support=rec["k"],
            q_query=rec["q"],
            provenance=rec["provenance"],
            support_tokens=[np.asarray(e["tokens"], dtype=np.int64) for e in rec["support"]],
            support_labels=np.asarray([e["label"] for e in rec["support"]], dtype=np.int64),
            query_tokens=[np.asarray(e["tokens"], dtype=np.int64) for e in rec["query"]],
            query_labels=np.asarray([e["label"] for e in rec["query"]], dtype=np.int64),
            secret_words=(
                np.asarray(rec["secret_words"], dtype=np.int64)
                if "secret_words" in rec
                else None
            ),
        )

    def tokens_by_class(self) -> tuple[list[list[np.ndarray]], list[list[np.ndarray]]]:
        sup = [[] for _ in range(self.n_way)]
        qry = [[] for _ in range(self.n_way)]
        for toks, lab in zip(self.support_tokens, self.support_labels):
            sup[int(lab)].append(toks)
        for toks, lab in zip(self.query_tokens, self.query_labels):
            qry[int(lab)].append(toks)
        return sup, qry


def mask_sentence(sentence: np.ndarray, target: int, mask_id: int = MASK_ID) -> np.ndarray:
    """Replace every occurrence of target with the mask id; length preserved."""
    hits = sentence == target
    if not hits.any():
        raise ValueError(f"target word id {target} does not occur in sentence")
    out = sentence.copy()
    out[hits] = mask_id
    return out


@dataclass
class SupervisedTaskSet:
    name: str
    examples_by_class: dict[str, list[np.ndarray]]
    sample_weight: float = 0.0
    n_examples: int = 0

    @property
    def class_names(self) -> list[str]:
        return sorted(self.examples_by_class)


def load_supervised(path, store: SentenceStore, min_per_class: int) -> SupervisedTaskSet:
    """Load a {"text","label"} JSONL file, tokenized with the corpus table.

    Classes with fewer than min_per_class examples are dropped with a warning;
    a file with no usable class raises TaskConfigError.
    """
    by_class: dict[str, list[np.ndarray]] = {}
    p = Path(path)
    for ln, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            text, label = rec["text"], rec["label"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise TaskConfigError(f"{path}:{ln}: malformed supervised example") from e
        by_class.setdefault(str(label), []).append(store.encode_text(text))
    usable = {c: xs for c, xs in by_class.items() if len(xs) >= min_per_class}
    for c in sorted(set(by_class) - set(usable)):
        log.warning(
            "%s: dropping class %r with %d < %d examples", path, c, len(by_class[c]), min_per_class
        )
    if not usable:
        raise TaskConfigError(f"{path}: no class has >= {min_per_class} examples")
    n = sum(len(xs) for xs in usable.values())
    return SupervisedTaskSet(p.stem, usable, sample_weight=math.sqrt(n), n_examples=n)


def normalize_weights(tasks: list[SupervisedTaskSet]) -> None:
    """Square-root-of-size weights, renormalized to sum to one."""
    total = sum(math.sqrt(t.n_examples) for t in tasks)
    for t in tasks:
        t.sample_weight = math.sqrt(t.n_examples) / total


def episode_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Deterministic per-(episode, stream) generator; workers over disjoint
    index ranges reproduce exactly the serial sequence."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index, stream)))


class EpisodeSampler:
    """Samples episodes from an immutable (store, index, supervised) context."""

    def __init__(
        self,
        store: SentenceStore,
        index: VocabIndex,
        cfg: SamplerConfig,
        supervised: list[SupervisedTaskSet] | None = None,
    ):
        self.store = store
        self.index = index
        self.cfg = cfg
        self.supervised = list(supervised) if supervised else []
        if self.supervised:
            normalize_weights(self.supervised)
            if cfg.lambda_mix is None:
                raise TaskConfigError("supervised tasks loaded but lambda_mix not set")
        elif cfg.lambda_mix is not None:
            raise TaskConfigError(
                f"lambda_mix={cfg.lambda_mix} < 1 requires supervised tasks, none loaded"
            )
        self._word_set_cache: dict[int, set] = {}

    # -------------------------------------------------------------- internals

    def _sentence_words(self, sidx: int) -> set:
        ws = self._word_set_cache.get(sidx)
        if ws is None:
            ws = set(self.store.sentences[sidx].tolist())
            self._word_set_cache[sidx] = ws
        return ws

    def _usable_postings(self, word: int, others: set) -> np.ndarray:
        post = self.index.postings[int(word)]
        keep = [s for s in post.tolist() if not (self._sentence_words(s) & others)]
        return np.asarray(keep, dtype=np.int64)

    # --------------------------------------------------------------- sampling

    def sample_smlmt(self, rng: np.random.Generator) -> Episode:
        eligible = self.index.eligible_words
        last_err = None
        for _ in range(self.cfg.retries + 1):
            choices = [n for n in self.cfg.n_way_choices if n <= len(eligible)]
            if not choices:
                raise TaskSamplingError(
                    f"only {len(eligible)} eligible words, need >= {min(self.cfg.n_way_choices)}"
                )
            n_way = int(rng.choice(choices))
            k, q = self.cfg.shots(n_way)
            need = k + q
            words = rng.choice(eligible, size=n_way, replace=False)
            word_set = set(int(w) for w in words)
            pools = []
            for w in words:
                usable = self._usable_postings(int(w), word_set - {int(w)})
                if len(usable) < need:
                    last_err = TaskSamplingError(
                        f"word id {int(w)} has {len(usable)} usable sentences, need {need}"
                    )
                    pools = None
                    break
                pools.append(usable)
            if pools is None:
                continue
            perm = rng.permutation(n_way)
            sup_toks: list[np.ndarray | None] = [None] * (n_way * k)
            sup_labs = np.empty(n_way * k, dtype=np.int64)
            qry_toks: list[np.ndarray | None] = [None] * (n_way * q)
            qry_labs = np.empty(n_way * q, dtype=np.int64)
            secret = np.empty(n_way, dtype=np.int64)
            for ci, (w, pool) in enumerate(zip(words, pools)):
                label = int(perm[ci])
                secret[label] = int(w)
                picked = rng.choice(pool, size=need, replace=False)
                masked = [mask_sentence(self.store.sentences[int(s)], int(w)) for s in picked]
                for j in range(k):
                    sup_toks[label * k + j] = masked[j]
                    sup_labs[label * k + j] = label
                for j in range(q):
                    qry_toks[label * q + j] = masked[k + j]
                    qry_labs[label * q + j] = label
            return Episode(
                n_way, k, q, "smlmt", sup_toks, sup_labs, qry_toks, qry_labs, secret
            )
        raise TaskSamplingError(
            f"no feasible word subset after {self.cfg.retries + 1} attempts: {last_err}"
        )

    def sample_supervised(self, rng: np.random.Generator) -> Episode:
        if not self.supervised:
            raise TaskConfigError("no supervised task sets loaded")
        weights = np.asarray([t.sample_weight for t in self.supervised])
        task = self.supervised[int(rng.choice(len(self.supervised), p=weights))]
        n_request = int(rng.choice(self.cfg.n_way_choices))
        names = task.class_names
        n_way = min(len(names), n_request)
        k, q = self.cfg.shots(n_way)
        need = k + q
        usable = [c for c in names if len(task.examples_by_class[c]) >= need]
        if len(usable) < n_way:
            raise TaskSamplingError(
                f"task {task.name}: {len(usable)} classes with >= {need} examples, need {n_way}"
            )
        classes = [usable[i] for i in rng.choice(len(usable), size=n_way, replace=False)]
        perm = rng.permutation(n_way)
        sup_toks: list[np.ndarray | None] = [None] * (n_way * k)
        sup_labs = np.empty(n_way * k, dtype=np.int64)
        qry_toks: list[np.ndarray | None] = [None] * (n_way * q)
        qry_labs = np.empty(n_way * q, dtype=np.int64)
        for ci, cname in enumerate(classes):
            label = int(perm[ci])
            pool = task.examples_by_class[cname]
            picked = rng.choice(len(pool), size=need, replace=False)
            for j in range(k):
                sup_toks[label * k + j] = pool[int(picked[j])]
                sup_labs[label * k + j] = label
            for j in range(q):
                qry_toks[label * q + j] = pool[int(picked[k + j])]
                qry_labs[label * q + j] = label
        return Episode(
            n_way, k, q, f"supervised:{task.name}", sup_toks, sup_labs, qry_toks, qry_labs
        )

    def sample_hybrid(self, rng: np.random.Generator) -> Episode:
        if self.cfg.lambda_mix is None:
            return self.sample_smlmt(rng)
        if rng.random() < self.cfg.lambda_mix:
            return self.sample_smlmt(rng)
        return self.sample_supervised(rng)


def write_episodes_jsonl(path, episodes, debug_secrets: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ep in episodes:
            f.write(ep.to_json(debug_secrets=debug_secrets) + "\n")


def read_episodes_jsonl(path) -> list[Episode]:
    return [
        Episode.from_json(line)
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
