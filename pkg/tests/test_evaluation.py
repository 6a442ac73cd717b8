import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from gdtm.corpus import Document, EncodedCorpus
from gdtm.errors import DomainError, UnknownWordError
from gdtm.evaluation import (
    heldout_perplexity,
    rows_to_csv,
    rows_to_json,
    split_tokens,
    top_words,
    topics_at_time,
    word_trajectory,
)
from gdtm.kernels import TimeTransform, build_inducing, cross_row
from gdtm.state import GlobalState, ModelConfig
from helpers import LEAF_KERNELS, random_corpus, random_model

OU = LEAF_KERNELS["ou"]


def _model(rng, kernel=OU, **kw):
    corpus, ind, state, _ = random_model(rng, kernel, **kw)
    return corpus, ind, state


def _with_mean(state, mean):
    return GlobalState.from_mean_cov(mean, state.cov, state.log_zeta)


class TestTopicsAtTime:
    def test_zero_mean_uniform(self, rng):
        corpus, ind, state = _model(rng)
        snap = topics_at_time(_with_mean(state, np.zeros_like(state.mean)), ind, 2.5)
        np.testing.assert_allclose(snap.probs, 1 / state.V, rtol=1e-14)
        assert snap.time == 2.5

    def test_training_time_with_unit_rows(self, rng):
        corpus = random_corpus(rng, V=4, T=3, D=6)
        ind = build_inducing(OU, corpus.times, corpus.times, jitter=0.0, transform=corpus.transform)
        mean = rng.standard_normal((2, 4, 3))
        st_ = GlobalState.from_mean_cov(mean, np.broadcast_to(np.eye(3), (2, 4, 3, 3)), np.zeros((2, 3)))
        snap = topics_at_time(st_, ind, corpus.unique_times[1])
        np.testing.assert_allclose(snap.probs, softmax(mean[:, :, 1], axis=1), rtol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), tau=st.floats(-2.0, 6.0))
    def test_rows_are_simplices(self, seed, tau):
        r = np.random.default_rng(seed)
        _, ind, state = _model(r)
        probs = topics_at_time(state, ind, tau).probs
        assert np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-10)

    def test_wiener_domain(self, rng):
        _, ind, state = _model(rng, kernel=LEAF_KERNELS["wiener"])
        # raw time -5 maps below zero under the corpus normalization
        with pytest.raises(DomainError):
            topics_at_time(state, ind, -5.0)


class TestWordTrajectory:
    def test_agrees_with_snapshot(self, rng):
        corpus, ind, state = _model(rng)
        t = corpus.unique_times[2]
        rows = word_trajectory(state, ind, corpus.terms, 1, ["t3", "t0"], [t])
        probs = topics_at_time(state, ind, t).probs[1]
        assert rows == [(float(t), "t3", float(probs[3])), (float(t), "t0", float(probs[0]))]

    def test_sorted_by_time_and_full_softmax(self, rng):
        corpus, ind, state = _model(rng)
        grid = [3.0, 0.0, 1.5]
        rows = word_trajectory(state, ind, corpus.terms, 0, list(corpus.terms), grid)
        times = [r[0] for r in rows]
        assert times == sorted(times)
        for tau in grid:
            vals = np.array([r[2] for r in rows if r[0] == tau])
            assert np.all((vals > 0) & (vals < 1))
            # independent recomputation of the full softmax at this grid point
            a, _ = cross_row(ind, ind.transform(tau))
            np.testing.assert_allclose(vals, softmax(state.mean[0] @ a), rtol=1e-12)
            assert vals.sum() == pytest.approx(1.0, abs=1e-12)

    def test_flat_for_constant_mean(self, rng):
        corpus = random_corpus(rng, V=3, T=4, D=8)
        ind = build_inducing(OU, corpus.times, corpus.times, jitter=0.0, transform=corpus.transform)
        # with inducing == train times the rows are unit vectors, so a constant mean is a flat trajectory
        mean = np.zeros((2, 3, 4))
        mean[0, 1, :] = 2.0
        st_ = GlobalState.from_mean_cov(mean, np.broadcast_to(np.eye(4), (2, 3, 4, 4)), np.zeros((2, 4)))
        rows = word_trajectory(st_, ind, corpus.terms, 0, ["t1"], corpus.unique_times)
        vals = [r[2] for r in rows]
        np.testing.assert_allclose(vals, vals[0], rtol=1e-10)

    def test_unknown_word(self, rng):
        corpus, ind, state = _model(rng)
        with pytest.raises(UnknownWordError) as err:
            word_trajectory(state, ind, corpus.terms, 0, ["t1", "tt1"], [1.0])
        assert "t1" in str(err.value)

    def test_bad_topic(self, rng):
        corpus, ind, state = _model(rng)
        with pytest.raises(IndexError):
            word_trajectory(state, ind, corpus.terms, 5, ["t1"], [1.0])


class TestTopWords:
    def test_uniform_ties_lexicographic(self, rng):
        corpus, ind, state = _model(rng)
        snap = topics_at_time(_with_mean(state, np.zeros_like(state.mean)), ind, 1.0)
        terms = ("pear", "apple", "fig", "kiwi", "date")
        out = top_words(snap, 0, 3, terms)
        assert [w for w, _ in out] == ["apple", "date", "fig"]
        assert all(p == pytest.approx(1 / 5) for _, p in out)

    def test_permutation(self, rng):
        corpus, ind, state = _model(rng)
        snap = topics_at_time(state, ind, 1.0)
        out = top_words(snap, 1, state.V, corpus.terms)
        assert sorted(w for w, _ in out) == sorted(corpus.terms)
        probs = [p for _, p in out]
        assert probs == sorted(probs, reverse=True)

    def test_spike_first(self, rng):
        corpus, ind, state = _model(rng)
        a, _ = cross_row(ind, ind.transform(1.0))
        mean = state.mean.copy()
        # raise word 3's projected mean at this time by 30
        mean[1, 3] += 30.0 * a / (a @ a)
        snap = topics_at_time(_with_mean(state, mean), ind, 1.0)
        probs = snap.probs[1]
        assert int(np.argmax(probs)) == 3  # scan oracle
        assert top_words(snap, 1, 1, corpus.terms)[0][0] == corpus.terms[3]

    def test_n_range(self, rng):
        corpus, ind, state = _model(rng)
        snap = topics_at_time(state, ind, 1.0)
        for n in (0, state.V + 1):
            with pytest.raises(ValueError):
                top_words(snap, 0, n, corpus.terms)


class TestPerplexity:
    def _test_corpus(self, rng, V, T=2, D=6):
        return random_corpus(rng, V=V, T=T, D=D, min_len=8, max_len=16)

    def test_uniform_topics_give_V(self, rng):
        _, ind, state = _model(rng)
        test = self._test_corpus(rng, V=state.V)
        uniform = _with_mean(state, np.zeros_like(state.mean))
        rep = heldout_perplexity(test, uniform, ind, ModelConfig(num_topics=2))
        assert rep.perplexity == pytest.approx(state.V, rel=1e-12)
        assert rep.num_docs == test.D and rep.num_skipped == 0

    def test_single_word_vocabulary(self, rng):
        _, ind, state = _model(rng, V=1)
        test = self._test_corpus(rng, V=1)
        rep = heldout_perplexity(test, state, ind, ModelConfig(num_topics=2))
        assert rep.perplexity == pytest.approx(1.0, abs=1e-12)

    def test_at_least_one_and_deterministic(self, rng):
        _, ind, state = _model(rng)
        test = self._test_corpus(rng, V=state.V)
        cfg = ModelConfig(num_topics=2)
        a = heldout_perplexity(test, state, ind, cfg, seed=3)
        b = heldout_perplexity(test, state, ind, cfg, seed=3)
        c = heldout_perplexity(test, state, ind, ModelConfig(num_topics=2, threads=3), seed=3)
        assert a == b == c and a.perplexity >= 1.0
        assert a.num_eval_tokens == sum(d.length // 2 for d in test.docs)

    def test_short_documents_skipped(self, rng):
        _, ind, state = _model(rng)
        docs = (
            Document("short", 0, np.array([1]), np.array([3])),
            Document("long", 0, np.array([0, 2]), np.array([4, 4])),
        )
        test = EncodedCorpus(tuple(f"t{i}" for i in range(5)), np.array([7.0]), TimeTransform.fit([0.0, 3.0]), docs)
        rep = heldout_perplexity(test, state, ind, ModelConfig(num_topics=2))
        assert rep.num_skipped == 1 and rep.num_docs == 1 and rep.num_eval_tokens == 4

    def test_all_skipped(self, rng):
        _, ind, state = _model(rng)
        docs = (Document("short", 0, np.array([1]), np.array([3])),)
        test = EncodedCorpus(tuple(f"t{i}" for i in range(5)), np.array([1.0]), TimeTransform(), docs)
        with pytest.raises(ValueError):
            heldout_perplexity(test, state, ind, ModelConfig(num_topics=2))

    def test_split_tokens(self):
        obs, held = split_tokens(np.array([0, 3]), np.array([3, 2]), np.random.default_rng(0))
        assert obs.size == 3 and held.size == 2
        assert sorted(np.concatenate([obs, held]).tolist()) == [0, 0, 0, 3, 3]

    def test_report_dict(self, rng):
        _, ind, state = _model(rng)
        rep = heldout_perplexity(self._test_corpus(rng, V=5), state, ind, ModelConfig(num_topics=2))
        assert set(rep.to_dict()) == {"perplexity", "log_likelihood", "num_eval_tokens", "num_docs", "num_skipped"}


class TestExports:
    def test_csv(self):
        text = rows_to_csv([(2000.0, "cat", 0.1), (2001.5, "dog", 1 / 3)])
        assert text == "time,word,probability\n2000.0,cat,0.1\n2001.5,dog,0.3333333333333333\n"

    def test_json(self):
        data = json.loads(rows_to_json([(1.0, "a", 0.5)]))
        assert data == [{"time": 1.0, "word": "a", "probability": 0.5}]
