"""Sample corpora from the generative model, for experiments with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .corpus import Document, EncodedCorpus
from .kernels import KernelSpec, TimeTransform, gram_matrix


@dataclass(frozen=True, eq=False)
class SyntheticCorpus:
    corpus: EncodedCorpus
    topics: np.ndarray  # (K, T, V) true topic-word distributions
    proportions: np.ndarray  # (D, K) true document proportions


def sample_corpus(
    kernel: KernelSpec,
    num_topics: int,
    vocab_size: int,
    num_times: int,
    docs_per_time: int,
    doc_length: int,
    alpha: float = 0.1,
    seed: int = 0,
) -> SyntheticCorpus:
    """Draw GP word trajectories, softmax them into topics, then sample LDA documents.

    Raw timestamps are ``0, 1, ..., T-1``; the trajectories are drawn at the
    normalized times of the returned corpus.
    """
    rng = np.random.default_rng(seed)
    raw_times = np.arange(num_times, dtype=np.float64)
    transform = TimeTransform.fit(raw_times)
    times = transform(raw_times)
    cov = gram_matrix(kernel, times)
    chol = np.linalg.cholesky(cov + 1e-9 * np.mean(np.diag(cov)) * np.eye(num_times))
    beta = rng.standard_normal((num_topics, vocab_size, num_times)) @ chol.T
    topics = softmax(beta, axis=1).transpose(0, 2, 1)
    terms = tuple(f"w{i:03d}" for i in range(vocab_size))
    docs = []
    props = []
    for t in range(num_times):
        for j in range(docs_per_time):
            theta = rng.dirichlet(np.full(num_topics, alpha))
            z_counts = rng.multinomial(doc_length, theta)
            counts = np.zeros(vocab_size, dtype=np.int64)
            for k, n in enumerate(z_counts):
                if n:
                    counts += rng.multinomial(n, topics[k, t])
            words = np.flatnonzero(counts)
            docs.append(Document(f"t{t}-d{j}", t, words, counts[words]))
            props.append(theta)
    corpus = EncodedCorpus(terms, raw_times, transform, tuple(docs))
    return SyntheticCorpus(corpus, topics, np.array(props))


def matched_cosine(learned: np.ndarray, true: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Greedy one-to-one topic matching on time-averaged cosine similarity.

    Both inputs are (K, T, V). Returns the mean similarity of the matched
    pairs and the ``(learned, true)`` pairs.
    """
    a = learned / np.linalg.norm(learned, axis=2, keepdims=True)
    b = true / np.linalg.norm(true, axis=2, keepdims=True)
    sim = np.einsum("ktv,jtv->kj", a, b) / learned.shape[1]
    sim = sim.copy()
    pairs = []
    scores = []
    for _ in range(min(sim.shape)):
        k, j = np.unravel_index(np.argmax(sim), sim.shape)
        pairs.append((int(k), int(j)))
        scores.append(float(sim[k, j]))
        sim[k, :] = -np.inf
        sim[:, j] = -np.inf
    return float(np.mean(scores)), pairs
