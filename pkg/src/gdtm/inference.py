"""Variational engine: local updates, the evidence lower bound, gradients and SVI.

Per-document quantities use the collapsed representation: one assignment
distribution per distinct word, weighted by its count. Every document term
of the bound is multiplied by ``scale`` (``D / |batch|`` for minibatch
estimates); the ``q(u)`` to prior KL never is.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .corpus import Document, EncodedCorpus, sample_minibatch
from .errors import NumericError
from .kernels import InducingKernel, cross_row
from .state import GlobalState, LocalState, ModelConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ProjectedMoments:
    """Mean ``m`` and variance ``lam`` of the projected trajectories at a set of times.

    ``times`` indexes the inducing kernel's training times (``None`` for
    arbitrary prediction times). Arrays are (K, V, B) with B = len(times);
    ``log_norm[k, b]`` is ``log sum_w exp(m + (lam + ktilde) / 2)``, the
    closed-form optimal ``log zeta``.
    """

    times: np.ndarray | None
    proj: np.ndarray
    ktilde: np.ndarray
    m: np.ndarray
    lam: np.ndarray
    log_norm: np.ndarray

    def column(self, time_index: int) -> int:
        pos = int(np.searchsorted(self.times, time_index))
        if pos >= self.times.size or self.times[pos] != time_index:
            raise KeyError(f"time index {time_index} not among the projected times")
        return pos


def _moments_from_rows(state: GlobalState, proj: np.ndarray, ktilde: np.ndarray, times):
    mean, cov = state.mean, state.cov
    m = mean @ proj.T
    cov_a = cov @ proj.T
    lam = np.maximum(np.sum(proj.T * cov_a, axis=-2), 0.0)
    expo = m + 0.5 * (lam + ktilde)
    if not np.all(np.isfinite(expo)):
        raise NumericError("non-finite projected moments")
    log_norm = logsumexp(expo, axis=1)
    return ProjectedMoments(times, proj, ktilde, m, lam, log_norm)


def project_moments(state: GlobalState, inducing: InducingKernel, times=None) -> ProjectedMoments:
    """Moments at the given training-time indices (all training times when None)."""
    if state.M != inducing.num_inducing:
        raise ValueError("state and inducing kernel disagree on the number of inducing points")
    if times is None:
        idx = np.arange(inducing.num_times)
    else:
        idx = np.unique(np.asarray(times, dtype=np.int64))
    return _moments_from_rows(state, inducing.proj[idx], inducing.ktilde[idx], idx)


def project_moments_at(state: GlobalState, inducing: InducingKernel, taus) -> ProjectedMoments:
    """Moments at arbitrary normalized times (used for held-out prediction)."""
    proj, kt = cross_row(inducing, np.atleast_1d(np.asarray(taus, dtype=np.float64)))
    return _moments_from_rows(state, proj, kt, None)


def update_zeta(state: GlobalState, moments: ProjectedMoments) -> GlobalState:
    """Set ``log zeta`` to its optimum at the projected times; other entries are kept."""
    log_zeta = state.log_zeta.copy()
    log_zeta[:, moments.times] = moments.log_norm
    return state.replace(log_zeta=log_zeta)


# -- local step -----------------------------------------------------------------


def _doc_view(doc: Document, state: GlobalState, moments: ProjectedMoments):
    """(n, K) word scores and the (K,) word-independent part of the per-token bound."""
    b = moments.column(doc.time_index)
    log_zeta = state.log_zeta[:, doc.time_index]
    m_doc = moments.m[:, doc.words, b].T
    offset = 1.0 - log_zeta - np.exp(moments.log_norm[:, b] - log_zeta)
    return m_doc, offset


def _expected_log_theta(lam: np.ndarray) -> np.ndarray:
    return digamma(lam) - digamma(lam.sum())


def _phi_update(m_doc, offset, lam):
    s = m_doc + offset + _expected_log_theta(lam)
    s -= s.max(axis=1, keepdims=True)
    phi = np.exp(s)
    phi /= phi.sum(axis=1, keepdims=True)
    return phi


def update_phi(doc: Document, state: GlobalState, moments: ProjectedMoments, lam) -> np.ndarray:
    """Exact coordinate maximizer of the bound in the assignment distributions.

    With ``zeta`` at its optimum the ``exp(log_norm - log_zeta)`` part of the
    offset is 1 for every topic and drops out of the normalization.
    """
    m_doc, offset = _doc_view(doc, state, moments)
    return _phi_update(m_doc, offset, np.asarray(lam, dtype=np.float64))


def update_lambda(doc: Document, phi, alpha) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim == 1:
        phi = phi[None, :]
    return np.asarray(alpha, dtype=np.float64) + doc.counts @ phi


def _fit_local(words, counts, m_doc, offset, alpha, max_iters, tol) -> LocalState:
    K = alpha.size
    lam = alpha + counts.sum() / K
    phi = np.full((words.size, K), 1.0 / K)
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        phi = _phi_update(m_doc, offset, lam)
        new_lam = alpha + counts @ phi
        change = float(np.mean(np.abs(new_lam - lam)))
        lam = new_lam
        if change < tol:
            converged = True
            break
    return LocalState(lam=lam, words=words, phi=phi, iterations=it, converged=converged)


def local_step(doc: Document, state: GlobalState, moments: ProjectedMoments, config: ModelConfig) -> LocalState:
    """Alternate phi and lambda updates from ``lambda = alpha + N_d / K``."""
    m_doc, offset = _doc_view(doc, state, moments)
    return _fit_local(
        doc.words,
        doc.counts,
        m_doc,
        offset,
        config.alpha_vector(),
        config.local_max_iters,
        config.local_tol,
    )


# -- bound ------------------------------------------------------------------------


def _log_dirichlet_norm(a: np.ndarray) -> float:
    return float(gammaln(a.sum()) - gammaln(a).sum())


def kl_u(state: GlobalState, inducing: InducingKernel) -> np.ndarray:
    """(K, V) array of ``KL(q(u_kw) || p(u_kw))`` via Cholesky log-determinants."""
    kinv = np.asarray(inducing.kinv)
    mean, cov = state.mean, state.cov
    trace = np.einsum("ij,kwji->kw", kinv, cov)
    maha = np.einsum("kwi,ij,kwj->kw", mean, kinv, mean)
    return 0.5 * (trace + maha - state.M + inducing.logdet_kuu - state.logdet_cov)


def elbo_terms(
    docs: Sequence[Document],
    state: GlobalState,
    locals_: Sequence[LocalState],
    inducing: InducingKernel,
    alpha,
    scale: float = 1.0,
    moments: ProjectedMoments | None = None,
) -> dict[str, float]:
    """The bound split into its named parts (document parts already scaled)."""
    if len(docs) != len(locals_):
        raise ValueError("need one local state per document")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (state.K,))
    if moments is None and docs:
        moments = project_moments(state, inducing, [d.time_index for d in docs])
    likelihood = assignment = entropy = dirichlet = 0.0
    log_norm_alpha = _log_dirichlet_norm(alpha)
    for doc, loc in zip(docs, locals_):
        m_doc, offset = _doc_view(doc, state, moments)
        weighted = doc.counts[:, None] * loc.phi
        elog = _expected_log_theta(loc.lam)
        likelihood += float(np.sum(weighted * (m_doc + offset)))
        assignment += float(np.sum(weighted * elog))
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(loc.phi > 0, loc.phi * np.log(loc.phi), 0.0)
        entropy -= float(np.sum(doc.counts[:, None] * plogp))
        dirichlet += (
            log_norm_alpha
            - _log_dirichlet_norm(loc.lam)
            + float(np.sum((alpha - loc.lam) * elog))
        )
    return {
        "likelihood": scale * likelihood,
        "assignment": scale * assignment,
        "entropy": scale * entropy,
        "dirichlet": scale * dirichlet,
        "kl_u": -float(np.sum(kl_u(state, inducing))),
    }


def elbo(docs, state, locals_, inducing, alpha, scale: float = 1.0, moments=None) -> float:
    return float(sum(elbo_terms(docs, state, locals_, inducing, alpha, scale, moments).values()))


# -- global gradients ---------------------------------------------------------------


def _batch_statistics(docs, state, locals_, moments, scale):
    """Scaled word-topic counts X (K, V, B) and expected-exponential weights R (K, V, B)."""
    K, V = state.K, state.V
    B = moments.times.size
    X = np.zeros((K, V, B))
    topic_counts = np.zeros((K, B))
    for doc, loc in zip(docs, locals_):
        b = moments.column(doc.time_index)
        weighted = doc.counts[:, None] * loc.phi
        X[:, doc.words, b] += weighted.T
        topic_counts[:, b] += weighted.sum(axis=0)
    X *= scale
    topic_counts *= scale
    log_zeta = state.log_zeta[:, moments.times]
    expo = moments.m + 0.5 * (moments.lam + moments.ktilde) - log_zeta[:, None, :]
    R = topic_counts[:, None, :] * np.exp(expo)
    return X, R


def _c_matrix(R: np.ndarray, proj: np.ndarray) -> np.ndarray:
    C = (proj.T * R[..., None, :]) @ proj
    return 0.5 * (C + np.swapaxes(C, -1, -2))


@dataclass(frozen=True, eq=False)
class NaturalGradient:
    """Natural gradient of the bound in ``(eta1, eta2)``.

    ``target1``/``target2`` are the natural parameters the batch points to,
    so ``g = target - eta``; an SVI step of size rho lands on the convex
    combination ``(1 - rho) * eta + rho * target``.
    """

    target1: np.ndarray
    target2: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray

    @property
    def g1(self) -> np.ndarray:
        return self.target1 - self.eta1

    @property
    def g2(self) -> np.ndarray:
        return self.target2 - self.eta2


def euclidean_gradients(docs, state, locals_, inducing, scale: float = 1.0, moments=None):
    """Gradients of the bound in the mean and covariance of every ``q(u_kw)``.

    Returns ``(dmu, dSigma)`` of shapes (K, V, M) and (K, V, M, M).
    """
    kinv = np.asarray(inducing.kinv)
    if moments is None:
        moments = project_moments(state, inducing, [d.time_index for d in docs])
    X, R = _batch_statistics(docs, state, locals_, moments, scale)
    proj = moments.proj
    xi = X @ proj
    b_vec = R @ proj
    C = _c_matrix(R, proj)
    dmu = xi - b_vec - state.mean @ kinv
    dsigma = -0.5 * C + 0.5 * state.precision - 0.5 * kinv
    return dmu, dsigma


def natural_gradients(docs, state, locals_, inducing, scale: float = 1.0, moments=None) -> NaturalGradient:
    """Closed-form natural gradients from the batch statistics Xi, B and C."""
    kinv = np.asarray(inducing.kinv)
    if moments is None:
        moments = project_moments(state, inducing, [d.time_index for d in docs])
    X, R = _batch_statistics(docs, state, locals_, moments, scale)
    proj = moments.proj
    xi = X @ proj
    # sum over t of the t-th B summand times (m_kwt - 1)
    target1 = xi + (R * (moments.m - 1.0)) @ proj
    target2 = -0.5 * (kinv + _c_matrix(R, proj))
    return NaturalGradient(target1, target2, state.eta1, state.eta2)


def natural_from_euclidean(state: GlobalState, dmu: np.ndarray, dsigma: np.ndarray):
    """Natural gradient of a Gaussian in natural parameters from Euclidean gradients."""
    g1 = dmu - 2.0 * np.einsum("kwij,kwj->kwi", dsigma, state.mean)
    return g1, dsigma


def svi_step(state: GlobalState, grad: NaturalGradient, step: float) -> GlobalState:
    if not 0.0 <= step <= 1.0:
        raise ValueError(f"step size must lie in [0, 1], got {step}")
    eta1 = (1.0 - step) * state.eta1 + step * grad.target1
    eta2 = (1.0 - step) * state.eta2 + step * grad.target2
    try:
        np.linalg.cholesky(-2.0 * eta2)
    except np.linalg.LinAlgError as exc:
        worst = np.linalg.eigvalsh(-2.0 * eta2).min()
        raise NumericError(
            f"svi step {state.step_count + 1} (rho={step:g}) left eta2 without negative "
            f"definiteness (min eigenvalue of -2*eta2: {worst:.3e})"
        ) from exc
    return GlobalState(eta1=eta1, eta2=eta2, log_zeta=state.log_zeta, step_count=state.step_count + 1)


# -- training loop -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainRecord:
    step: int
    rho: float
    elbo_estimate: float | None
    seconds: float


def fit_locals(docs, state, moments, config: ModelConfig) -> list[LocalState]:
    """Local steps for every document, in document order (threaded when configured)."""
    if config.threads > 1 and len(docs) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(lambda d: local_step(d, state, moments, config), docs))
    return [local_step(d, state, moments, config) for d in docs]


def train(
    corpus: EncodedCorpus,
    config: ModelConfig,
    inducing: InducingKernel,
    state: GlobalState,
    num_steps: int | None = None,
    callbacks: Iterable[Callable[[TrainRecord, GlobalState], None]] = (),
) -> tuple[GlobalState, list[TrainRecord]]:
    """Run SVI from ``state`` for ``num_steps`` (default ``config.num_steps``) steps.

    The minibatch of step ``s`` is drawn from a generator seeded with
    ``(config.seed, s)``, so a resumed run reproduces an uninterrupted one.
    """
    num_steps = config.num_steps if num_steps is None else num_steps
    callbacks = list(callbacks)
    alpha = config.alpha_vector()
    batch_size = min(config.batch_size, corpus.D)
    scale = corpus.D / batch_size
    history: list[TrainRecord] = []
    start = time.perf_counter()
    for _ in range(num_steps):
        s = state.step_count + 1
        rng = np.random.default_rng([config.seed, s])
        batch = np.sort(sample_minibatch(corpus, batch_size, rng))
        docs = [corpus.docs[i] for i in batch]
        moments = project_moments(state, inducing, [d.time_index for d in docs])
        state = update_zeta(state, moments)
        locals_ = fit_locals(docs, state, moments, config)
        grad = natural_gradients(docs, state, locals_, inducing, scale, moments)
        estimate = None
        if config.elbo_every and s % config.elbo_every == 0:
            estimate = elbo(docs, state, locals_, inducing, alpha, scale, moments)
        rho = config.step_size(s)
        state = svi_step(state, grad, rho)
        record = TrainRecord(s, rho, estimate, time.perf_counter() - start)
        history.append(record)
        if estimate is not None:
            logger.info("step %d rho=%.4g elbo~%.6g", s, rho, estimate)
        for cb in callbacks:
            cb(record, state)
    return state, history


def corpus_elbo(corpus: EncodedCorpus, state: GlobalState, inducing: InducingKernel, config: ModelConfig) -> float:
    """Full-corpus bound with tight zeta and locally fitted documents (state left untouched)."""
    moments = project_moments(state, inducing)
    tight = update_zeta(state, moments)
    locals_ = fit_locals(list(corpus.docs), tight, moments, config)
    return elbo(list(corpus.docs), tight, locals_, inducing, config.alpha_vector(), 1.0, moments)
