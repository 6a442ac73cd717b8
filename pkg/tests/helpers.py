"""Builders for small random models shared by the test modules."""

import numpy as np

from gdtm.corpus import Document, EncodedCorpus
from gdtm.kernels import KernelSpec, TimeTransform

LEAF_KERNELS = {
    "wiener": KernelSpec("wiener", sigma2=1.3),
    "ou": KernelSpec("ornstein_uhlenbeck", sigma2=0.8, length_scale=0.4),
    "se": KernelSpec("squared_exponential", sigma2=1.1, length_scale=0.5),
    "cauchy": KernelSpec("cauchy", sigma2=0.9, length_scale=0.3),
}


def random_corpus(rng, V, T, D, min_len=3, max_len=12, terms=None):
    """Small random encoded corpus with every time index populated."""
    docs = []
    for i in range(D):
        t = i % T
        n = int(rng.integers(min_len, max_len + 1))
        tokens = rng.integers(0, V, size=n)
        words, counts = np.unique(tokens, return_counts=True)
        docs.append(Document(f"d{i}", t, words, counts))
    raw = np.arange(T, dtype=np.float64)
    terms = terms or tuple(f"t{i}" for i in range(V))
    return EncodedCorpus(terms, raw, TimeTransform.fit(raw), tuple(docs))


def random_spd(rng, shape, M, scale=0.3):
    A = rng.standard_normal(shape + (M, M)) * scale
    return A @ np.swapaxes(A, -1, -2) + 0.2 * np.eye(M)


def random_model(rng, kernel, K=2, V=5, T=4, M=3, D=8, jitter=None, inducing_times=None):
    """Random corpus, inducing kernel, global state and local states (not fitted)."""
    from gdtm.kernels import build_inducing
    from gdtm.state import GlobalState, LocalState

    corpus = random_corpus(rng, V=V, T=T, D=D)
    times = corpus.times
    if inducing_times is None:
        inducing_times = np.linspace(times[0], times[-1], M)
    ind = build_inducing(kernel, times, inducing_times, jitter, corpus.transform)
    mean = rng.standard_normal((K, V, ind.num_inducing)) * 0.5
    cov = random_spd(rng, (K, V), ind.num_inducing, scale=0.25)
    state = GlobalState.from_mean_cov(mean, cov, rng.standard_normal((K, T)) * 0.3 + 1.5)
    locals_ = []
    for d in corpus.docs:
        phi = rng.dirichlet(np.ones(K), size=d.words.size)
        locals_.append(LocalState(lam=rng.uniform(0.5, 3.0, K), words=d.words, phi=phi))
    return corpus, ind, state, locals_
