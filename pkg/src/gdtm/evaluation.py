"""Predictive topics, word trajectories and held-out perplexity."""

from __future__ import annotations

import csv
import difflib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import softmax

from .corpus import EncodedCorpus
from .errors import UnknownWordError
from .inference import _fit_local, project_moments_at
from .kernels import InducingKernel, cross_row
from .state import GlobalState, ModelConfig


@dataclass(frozen=True, eq=False)
class TopicSnapshot:
    time: float
    probs: np.ndarray


def _predictive_probs(state: GlobalState, a: np.ndarray) -> np.ndarray:
    probs = softmax(state.mean @ a, axis=1)
    return probs / probs.sum(axis=1, keepdims=True)


def topics_at_time(state: GlobalState, inducing: InducingKernel, tau_star: float) -> TopicSnapshot:
    """Softmax of the predictive mean trajectory at raw time ``tau_star``."""
    a, _ = cross_row(inducing, inducing.transform(float(tau_star)))
    return TopicSnapshot(time=float(tau_star), probs=_predictive_probs(state, a))


def _resolve_words(terms: Sequence[str], words: Sequence[str]) -> list[int]:
    index = {t: i for i, t in enumerate(terms)}
    out = []
    for w in words:
        if w not in index:
            raise UnknownWordError(w, difflib.get_close_matches(w, list(terms), n=3))
        out.append(index[w])
    return out


def word_trajectory(
    state: GlobalState,
    inducing: InducingKernel,
    terms: Sequence[str],
    topic: int,
    words: Sequence[str],
    time_grid: Sequence[float],
) -> list[tuple[float, str, float]]:
    """Rows ``(time, word, probability)`` ordered by time, then by the order of ``words``."""
    if not 0 <= topic < state.K:
        raise IndexError(f"topic {topic} out of range [0, {state.K})")
    idx = _resolve_words(terms, words)
    rows = []
    for tau in sorted(float(t) for t in time_grid):
        probs = topics_at_time(state, inducing, tau).probs[topic]
        rows.extend((tau, terms[i], float(probs[i])) for i in idx)
    return rows


def top_words(snapshot: TopicSnapshot, topic: int, n: int, terms: Sequence[str]) -> list[tuple[str, float]]:
    """The ``n`` most probable words of a topic; ties broken lexicographically."""
    probs = snapshot.probs[topic]
    if not 1 <= n <= probs.size:
        raise ValueError(f"n must be in [1, {probs.size}]")
    order = sorted(range(probs.size), key=lambda i: (-probs[i], terms[i]))
    return [(terms[i], float(probs[i])) for i in order[:n]]


@dataclass(frozen=True)
class PerplexityReport:
    perplexity: float
    log_likelihood: float
    num_eval_tokens: int
    num_docs: int
    num_skipped: int

    def to_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "log_likelihood": self.log_likelihood,
            "num_eval_tokens": self.num_eval_tokens,
            "num_docs": self.num_docs,
            "num_skipped": self.num_skipped,
        }


def split_tokens(words: np.ndarray, counts: np.ndarray, rng: np.random.Generator):
    """Shuffle a document's tokens and deal them alternately into observed and held-out halves."""
    tokens = np.repeat(words, counts)
    tokens = tokens[rng.permutation(tokens.size)]
    return tokens[0::2], tokens[1::2]


def heldout_perplexity(
    test: EncodedCorpus,
    state: GlobalState,
    inducing: InducingKernel,
    config: ModelConfig,
    seed: int = 0,
) -> PerplexityReport:
    """Document-completion perplexity on documents at held-out timestamps.

    Each document's tokens are split in half; topic proportions are fitted
    on the first half against the predictive topics at the document's time,
    and the second half is scored under the resulting word mixture.
    """
    taus = test.times
    moments = project_moments_at(state, inducing, taus)
    a_rows, _ = cross_row(inducing, taus)
    alpha = config.alpha_vector()
    probs = {t: _predictive_probs(state, a_rows[t]) for t in {d.time_index for d in test.docs}}

    def score(item):
        d_index, doc = item
        rng = np.random.default_rng([seed, d_index])
        observed, held = split_tokens(doc.words, doc.counts, rng)
        if observed.size < 2 or held.size < 2:
            return None
        t = doc.time_index
        words, counts = np.unique(observed, return_counts=True)
        m_doc = moments.m[:, words, t].T
        # zeta at its optimum for the prediction time
        offset = -moments.log_norm[:, t]
        loc = _fit_local(words, counts, m_doc, offset, alpha, config.local_max_iters, config.local_tol)
        theta = loc.lam / loc.lam.sum()
        return float(np.sum(np.log(theta @ probs[t][:, held]))), held.size

    items = list(enumerate(test.docs))
    if config.threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(score, items))
    else:
        results = [score(item) for item in items]
    total_ll = 0.0
    n_tokens = used = skipped = 0
    # ascending document order keeps the sum reproducible
    for res in results:
        if res is None:
            skipped += 1
            continue
        total_ll += res[0]
        n_tokens += res[1]
        used += 1
    if n_tokens == 0:
        raise ValueError("no test document has at least two tokens in both halves")
    return PerplexityReport(
        perplexity=math.exp(-total_ll / n_tokens),
        log_likelihood=total_ll,
        num_eval_tokens=n_tokens,
        num_docs=used,
        num_skipped=skipped,
    )


# -- exports ---------------------------------------------------------------------------


def rows_to_csv(rows, header=("time", "word", "probability")) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def rows_to_json(rows, header=("time", "word", "probability")) -> str:
    return json.dumps([dict(zip(header, row)) for row in rows], indent=2)
