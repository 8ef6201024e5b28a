"""Corpus ingestion: sentence splitting, word tokenization, inverted index.

Tokens are whole words (split on whitespace and punctuation boundaries, case
preserved); ids 0..3 are reserved for [PAD], [CLS], [MASK], [UNK] and can
never collide with corpus words because the tokenizer splits brackets off.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID, CLS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3
RESERVED_WORDS = ("[PAD]", "[CLS]", "[MASK]", "[UNK]")
N_RESERVED = len(RESERVED_WORDS)

STORE_MAGIC = "MFSTORE1"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_SENT_BOUNDARY_RE = re.compile(r"(?<=[.!?])\s+(?=[A-Z])")


class CorpusError(Exception):
    """Data-level problem with corpus input or serialized artifacts."""


class EmptyCorpusError(CorpusError):
    pass


class EmptyVocabularyError(CorpusError):
    pass


@dataclass
class PipelineConfig:
    max_seq_len: int = 32
    line_mode: bool = False

    def __post_init__(self):
        if self.max_seq_len < 4:
            raise ValueError(f"max_seq_len must be >= 4, got {self.max_seq_len}")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def split_sentences(text: str, line_mode: bool) -> list[str]:
    if line_mode:
        return text.splitlines()
    parts = []
    for chunk in text.splitlines():
        parts.extend(_SENT_BOUNDARY_RE.split(chunk))
    return parts


@dataclass
class SentenceStore:
    """Tokenized corpus plus the bidirectional word table.

    sentences hold int64 token-id arrays (length >= 1, <= max_seq_len);
    id_to_word starts with the four reserved rows.
    """

    sentences: list[np.ndarray]
    id_to_word: list[str]
    max_seq_len: int
    word_to_id: dict[str, int] = field(repr=False, default=None)  # type: ignore[assignment]

    pad_id = PAD_ID
    cls_id = CLS_ID
    mask_id = MASK_ID
    unk_id = UNK_ID

    def __post_init__(self):
        if self.word_to_id is None:
            self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_word)

    def encode_words(self, words: list[str]) -> np.ndarray:
        """Map words to ids, unknowns to unk_id; truncates to max_seq_len."""
        ids = [self.word_to_id.get(w, UNK_ID) for w in words[: self.max_seq_len]]
        return np.asarray(ids, dtype=np.int64)

    def encode_text(self, text: str) -> np.ndarray:
        return self.encode_words(tokenize(text))

    def save(self, path) -> None:
        lines = [
            f"{STORE_MAGIC}\tmax_seq_len={self.max_seq_len}"
            f"\tn_words={len(self.id_to_word)}\tn_sentences={len(self.sentences)}"
        ]
        for i, w in enumerate(self.id_to_word):
            lines.append(f"{i}\t{w}")
        for sent in self.sentences:
            lines.append(" ".join(str(t) for t in sent))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SentenceStore":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.splitlines()
        if not lines or not lines[0].startswith(STORE_MAGIC):
            raise CorpusError(f"{path}: missing {STORE_MAGIC} header")
        header = dict(kv.split("=", 1) for kv in lines[0].split("\t")[1:])
        n_words = int(header["n_words"])
        n_sentences = int(header["n_sentences"])
        id_to_word = []
        for i in range(n_words):
            wid, word = lines[1 + i].split("\t", 1)
            if int(wid) != i:
                raise CorpusError(f"{path}: token table out of order at row {i}")
            id_to_word.append(word)
        sentences = [
            np.asarray([int(t) for t in line.split()], dtype=np.int64)
            for line in lines[1 + n_words : 1 + n_words + n_sentences]
        ]
        if len(sentences) != n_sentences:
            raise CorpusError(f"{path}: expected {n_sentences} sentences")
        return cls(sentences, id_to_word, int(header["max_seq_len"]))


def ingest_corpus(source, config: PipelineConfig) -> SentenceStore:
    """Tokenize a UTF-8 text source into a SentenceStore.

    source: path, bytes, str, or a binary/text file object. Invalid UTF-8
    raises CorpusError naming the byte offset; an input with no non-empty
    sentences raises EmptyCorpusError.
    """
    def _is_path(s):
        if "\n" in s or len(s) > 1024:
            return False
        try:
            return Path(s).exists()
        except OSError:
            return False

    if isinstance(source, Path) or (isinstance(source, str) and _is_path(source)):
        data = Path(source).read_bytes()
    elif isinstance(source, bytes):
        data = source
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        data = source.read()
    else:
        data = source
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorpusError(f"invalid UTF-8 at byte offset {e.start}") from e
    else:
        text = data

    id_to_word = list(RESERVED_WORDS)
    word_to_id = {w: i for i, w in enumerate(id_to_word)}
    sentences = []
    for raw in split_sentences(text, config.line_mode):
        words = tokenize(raw)[: config.max_seq_len]
        if not words:
            continue
        ids = np.empty(len(words), dtype=np.int64)
        for j, w in enumerate(words):
            wid = word_to_id.get(w)
            if wid is None:
                wid = len(id_to_word)
                word_to_id[w] = wid
                id_to_word.append(w)
            ids[j] = wid
        sentences.append(ids)
    if not sentences:
        raise EmptyCorpusError("no non-empty sentences after tokenization")
    return SentenceStore(sentences, id_to_word, config.max_seq_len, word_to_id)


@dataclass
class VocabIndex:
    """Task-creation vocabulary: words frequent enough, with their postings.

    postings[w] is the strictly increasing array of sentence indices that
    contain word w; eligible_words holds the ids with len(postings) >= the
    min_freq used to build the index.
    """

    eligible_words: np.ndarray
    postings: dict[int, np.ndarray]

    def save(self, path) -> None:
        lines = []
        for wid in self.eligible_words:
            ids = self.postings[int(wid)]
            lines.append(f"{int(wid)}\t{len(ids)}\t{','.join(str(s) for s in ids)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "VocabIndex":
        eligible = []
        postings = {}
        for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            try:
                wid_s, freq_s, ids_s = line.split("\t")
                wid = int(wid_s)
                ids = np.asarray([int(x) for x in ids_s.split(",")], dtype=np.int64)
            except ValueError as e:
                raise CorpusError(f"{path}:{ln}: malformed index line") from e
            if len(ids) != int(freq_s):
                raise CorpusError(f"{path}:{ln}: frequency does not match postings")
            eligible.append(wid)
            postings[wid] = ids
        return cls(np.asarray(eligible, dtype=np.int64), postings)


def build_index(store: SentenceStore, min_freq: int) -> VocabIndex:
    """Inverted word -> sentence index restricted to words in >= min_freq sentences."""
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    seen: dict[int, list[int]] = {}
    for sidx, sent in enumerate(store.sentences):
        for wid in np.unique(sent):
            if wid < N_RESERVED:
                continue
            seen.setdefault(int(wid), []).append(sidx)
    eligible = sorted(w for w, s in seen.items() if len(s) >= min_freq)
    if not eligible:
        max_freq = max((len(s) for s in seen.values()), default=0)
        raise EmptyVocabularyError(
            f"no word reaches min_freq={min_freq} (max observed frequency {max_freq})"
        )
    postings = {w: np.asarray(seen[w], dtype=np.int64) for w in eligible}
    return VocabIndex(np.asarray(eligible, dtype=np.int64), postings)
