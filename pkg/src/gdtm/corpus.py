"""Ingestion of time-stamped text into sparse bag-of-words corpora.

Filtering runs in a fixed order: stop words, minimum corpus frequency,
tf-idf score threshold, then minimum effective document length.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorpusFormatError, DomainError, PipelineError, SplitError
from .kernels import TimeTransform

logger = logging.getLogger(__name__)

CORPUS_MAGIC = b"GDTMCORP"
CORPUS_VERSION = 1

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass(frozen=True)
class RawDocument:
    id: str
    timestamp: float
    text: str


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric characters and drop 1-character tokens."""
    return [tok for tok in _TOKEN_RE.findall(text.lower()) if len(tok) >= 2]


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    """Read a stop word list (one per line, ``#`` comments); defaults to the bundled English list."""
    if path is None:
        text = resources.files("gdtm").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line.lower())
    return frozenset(words)


def read_documents(path: str | Path, fmt: str | None = None) -> list[RawDocument]:
    """Read newline-delimited JSON records or ``timestamp<TAB>text`` lines.

    The format is inferred from the suffix when ``fmt`` is None (``.tsv`` and
    ``.txt`` are tab-separated, everything else is JSON lines).
    """
    path = Path(path)
    if fmt is None:
        fmt = "tsv" if path.suffix.lower() in (".tsv", ".txt") else "jsonl"
    docs: list[RawDocument] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if fmt == "jsonl":
                try:
                    rec = json.loads(line)
                    doc = RawDocument(str(rec["id"]), float(rec["timestamp"]), str(rec["text"]))
                except (ValueError, KeyError, TypeError) as exc:
                    raise CorpusFormatError(f"{path}:{lineno}: bad record ({exc})") from exc
            elif fmt == "tsv":
                stamp, sep, text = line.rstrip("\n").partition("\t")
                if not sep:
                    raise CorpusFormatError(f"{path}:{lineno}: expected timestamp<TAB>text")
                try:
                    doc = RawDocument(str(lineno), float(stamp), text)
                except ValueError as exc:
                    raise CorpusFormatError(f"{path}:{lineno}: bad timestamp {stamp!r}") from exc
            else:
                raise ValueError(f"unknown input format {fmt!r}")
            if not math.isfinite(doc.timestamp):
                raise CorpusFormatError(f"{path}:{lineno}: non-finite timestamp")
            if doc.id in seen:
                raise CorpusFormatError(f"{path}:{lineno}: duplicate document id {doc.id!r}")
            seen.add(doc.id)
            docs.append(doc)
    return docs


def tfidf_score(n_w: int, M: int, D: int, df_w: int) -> float:
    """Corpus-level tf-idf: ``(n_w / M) * ln(D / df_w)``."""
    if M <= 0 or df_w <= 0 or D <= 0 or n_w < 0:
        raise DomainError(f"tf-idf needs positive counts (n_w={n_w}, M={M}, D={D}, df_w={df_w})")
    if df_w > D:
        raise DomainError(f"document frequency {df_w} exceeds document count {D}")
    return (n_w / M) * math.log(D / df_w)


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]
    index: dict[str, int]
    total_tokens: int
    doc_count: int
    term_freq: np.ndarray
    doc_freq: np.ndarray
    stats: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.terms)


def _filtered_tokens(docs: Sequence[RawDocument], stopwords: frozenset[str]) -> list[list[str]]:
    return [[t for t in tokenize(d.text) if t not in stopwords] for d in docs]


def build_vocabulary(
    docs: Sequence[RawDocument],
    stopwords: Iterable[str] = (),
    min_count: int = 25,
    score_threshold: float | None = None,
    max_terms: int = 20000,
) -> Vocabulary:
    """Collect term statistics and apply the stop-word, frequency and score filters.

    With ``score_threshold=None`` the ``max_terms`` highest-scoring terms are
    kept instead of thresholding. Surviving terms are sorted lexicographically.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    stop = frozenset(w.lower() for w in stopwords)
    D = len(docs)
    token_lists = _filtered_tokens(docs, stop)
    term_freq: Counter[str] = Counter()
    doc_freq: Counter[str] = Counter()
    for toks in token_lists:
        term_freq.update(toks)
        doc_freq.update(set(toks))
    M = sum(term_freq.values())
    stats = {
        "documents": D,
        "tokens_after_stopwords": M,
        "terms_after_stopwords": len(term_freq),
    }
    frequent = [w for w, c in term_freq.items() if c >= min_count]
    stats["terms_after_min_count"] = len(frequent)
    if not frequent:
        raise PipelineError("vocabulary", f"no term occurs at least {min_count} times")
    scores = {w: tfidf_score(term_freq[w], M, D, doc_freq[w]) for w in frequent}
    if score_threshold is None:
        ranked = sorted(frequent, key=lambda w: (-scores[w], w))
        kept = ranked[:max_terms]
    else:
        kept = [w for w in frequent if scores[w] >= score_threshold]
    stats["terms_after_score"] = len(kept)
    if not kept:
        raise PipelineError("vocabulary", "no term passes the tf-idf score filter")
    terms = tuple(sorted(kept))
    return Vocabulary(
        terms=terms,
        index={w: i for i, w in enumerate(terms)},
        total_tokens=M,
        doc_count=D,
        term_freq=np.array([term_freq[w] for w in terms], dtype=np.int64),
        doc_freq=np.array([doc_freq[w] for w in terms], dtype=np.int64),
        stats=stats,
    )


@dataclass(frozen=True, eq=False)
class Document:
    id: str
    time_index: int
    words: np.ndarray
    counts: np.ndarray

    @property
    def length(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True, eq=False)
class EncodedCorpus:
    """Sparse documents aligned to sorted unique raw timestamps.

    ``times`` gives the normalized (kernel) time of each unique timestamp.
    """

    terms: tuple[str, ...]
    unique_times: np.ndarray
    transform: TimeTransform
    docs: tuple[Document, ...]
    stats: dict = field(default_factory=dict, compare=False)

    @property
    def V(self) -> int:
        return len(self.terms)

    @property
    def D(self) -> int:
        return len(self.docs)

    @property
    def T(self) -> int:
        return self.unique_times.size

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.transform(self.unique_times), dtype=np.float64).reshape(-1)

    @property
    def fingerprint(self) -> str:
        """Identity of the vocabulary and time normalization (shared by all splits)."""
        h = hashlib.sha256()
        h.update(struct.pack("<I", self.V))
        for t in self.terms:
            h.update(t.encode("utf-8") + b"\0")
        h.update(struct.pack("<dd", self.transform.offset, self.transform.scale))
        return h.hexdigest()[:32]

    def docs_by_time(self) -> list[list[int]]:
        groups: list[list[int]] = [[] for _ in range(self.T)]
        for i, d in enumerate(self.docs):
            groups[d.time_index].append(i)
        return groups

    def subset_by_times(self, time_indices) -> EncodedCorpus:
        """Documents at the given time indices, re-indexed against their own unique times."""
        keep = sorted(set(int(t) for t in time_indices))
        remap = {old: new for new, old in enumerate(keep)}
        docs = tuple(
            Document(d.id, remap[d.time_index], d.words, d.counts)
            for d in self.docs
            if d.time_index in remap
        )
        return EncodedCorpus(self.terms, self.unique_times[keep].copy(), self.transform, docs)


def encode(
    docs: Sequence[RawDocument],
    vocab: Vocabulary,
    min_doc_tokens: int = 10,
    transform: TimeTransform | None = None,
) -> EncodedCorpus:
    """Convert raw documents into sparse counts over ``vocab``.

    Documents with fewer than ``min_doc_tokens`` in-vocabulary tokens are
    dropped; terms left without any occurrence are then pruned from the
    vocabulary (which cannot shorten any surviving document).
    """
    if len(vocab) == 0:
        raise PipelineError("encode", "empty vocabulary")
    counted = []
    dropped = 0
    for d in docs:
        c = Counter(vocab.index[t] for t in tokenize(d.text) if t in vocab.index)
        if sum(c.values()) < min_doc_tokens:
            dropped += 1
            continue
        counted.append((d, c))
    if not counted:
        raise PipelineError("encode", f"no document has at least {min_doc_tokens} vocabulary tokens")
    used = sorted(set().union(*(c.keys() for _, c in counted)))
    remap = {old: new for new, old in enumerate(used)}
    terms = tuple(vocab.terms[i] for i in used)
    unique_times = np.unique(np.array([d.timestamp for d, _ in counted], dtype=np.float64))
    time_pos = {float(t): i for i, t in enumerate(unique_times)}
    out_docs = []
    for d, c in counted:
        words = np.array(sorted(remap[w] for w in c), dtype=np.int64)
        inv = {remap[w]: n for w, n in c.items()}
        counts = np.array([inv[w] for w in words], dtype=np.int64)
        out_docs.append(Document(d.id, time_pos[float(d.timestamp)], words, counts))
    stats = {
        "documents_in": len(docs),
        "documents_dropped_short": dropped,
        "documents_out": len(out_docs),
        "terms_in": len(vocab),
        "terms_pruned_unused": len(vocab) - len(terms),
        "terms_out": len(terms),
        "unique_times": int(unique_times.size),
    }
    return EncodedCorpus(
        terms=terms,
        unique_times=unique_times,
        transform=transform or TimeTransform.fit(unique_times),
        docs=tuple(out_docs),
        stats=stats,
    )


def decode_counts(corpus: EncodedCorpus, doc: Document) -> Counter[str]:
    return Counter({corpus.terms[w]: int(n) for w, n in zip(doc.words, doc.counts)})


def split_by_timestamps(
    corpus: EncodedCorpus, train_fraction: float = 0.85, seed: int = 0
) -> tuple[EncodedCorpus, EncodedCorpus]:
    """Randomly assign ``ceil(train_fraction * T)`` unique timestamps to the training side."""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError("train_fraction must lie strictly between 0 and 1")
    T = corpus.T
    if T < 2:
        raise SplitError("need at least two unique timestamps to split")
    # guard against 0.85 * 20 = 17.000000000000004 style roundoff
    n_train = math.ceil(train_fraction * T - 1e-9)
    if n_train >= T or n_train < 1:
        raise SplitError(f"split of T={T} at fraction {train_fraction} leaves one side empty")
    rng = np.random.default_rng(seed)
    train_idx = np.sort(rng.choice(T, size=n_train, replace=False))
    test_idx = np.setdiff1d(np.arange(T), train_idx)
    return corpus.subset_by_times(train_idx), corpus.subset_by_times(test_idx)


def sample_minibatch(corpus: EncodedCorpus | int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``size`` distinct document indices."""
    D = corpus if isinstance(corpus, int) else corpus.D
    if not 1 <= size <= D:
        raise ValueError(f"minibatch size must be in [1, {D}], got {size}")
    return rng.choice(D, size=size, replace=False)


# -- binary corpus file -----------------------------------------------------
#
# All integers little-endian.
#   magic "GDTMCORP" | u32 version | u32 V | u32 T | u32 D | f64 offset | f64 scale
#   V x (u32 nbytes, utf-8 term)
#   T x f64 raw unique timestamp
#   D x (u32 nbytes, utf-8 id, u32 time_index, u32 nnz, nnz x u32 word, nnz x u32 count)


def save_corpus(corpus: EncodedCorpus, path: str | Path) -> None:
    parts = [
        CORPUS_MAGIC,
        struct.pack("<IIII", CORPUS_VERSION, corpus.V, corpus.T, corpus.D),
        struct.pack("<dd", corpus.transform.offset, corpus.transform.scale),
    ]
    for t in corpus.terms:
        b = t.encode("utf-8")
        parts.append(struct.pack("<I", len(b)) + b)
    parts.append(np.asarray(corpus.unique_times, dtype="<f8").tobytes())
    for d in corpus.docs:
        b = d.id.encode("utf-8")
        parts.append(struct.pack("<I", len(b)) + b)
        parts.append(struct.pack("<II", d.time_index, d.words.size))
        parts.append(d.words.astype("<u4").tobytes())
        parts.append(d.counts.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorpusFormatError(f"{self.path}: truncated corpus file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, n: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * n), dtype=dtype)


def load_corpus(path: str | Path) -> EncodedCorpus:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(CORPUS_MAGIC)) != CORPUS_MAGIC:
        raise CorpusFormatError(f"{path}: not a gdtm corpus file")
    version, V, T, D = r.unpack("<IIII")
    if version != CORPUS_VERSION:
        raise CorpusFormatError(f"{path}: unsupported corpus version {version}")
    offset, scale = r.unpack("<dd")
    terms = []
    for _ in range(V):
        (n,) = r.unpack("<I")
        terms.append(r.take(n).decode("utf-8"))
    unique_times = r.array("<f8", T).astype(np.float64)
    docs = []
    for _ in range(D):
        (n,) = r.unpack("<I")
        doc_id = r.take(n).decode("utf-8")
        t, nnz = r.unpack("<II")
        words = r.array("<u4", nnz).astype(np.int64)
        counts = r.array("<u4", nnz).astype(np.int64)
        if t >= T or (nnz and words.max() >= V):
            raise CorpusFormatError(f"{path}: document {doc_id!r} references out-of-range indices")
        docs.append(Document(doc_id, int(t), words, counts))
    if r.pos != len(r.data):
        raise CorpusFormatError(f"{path}: trailing bytes after corpus payload")
    return EncodedCorpus(tuple(terms), unique_times, TimeTransform(offset, scale), tuple(docs))
