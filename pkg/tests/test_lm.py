import itertools
import math
from collections import Counter

import numpy as np
import pytest

from semisup_lfmmi.automata import (
    TROPICAL, compose, enumerate_paths, linear_acceptor, shortest_path,
)
from semisup_lfmmi.errors import ConfigurationError
from semisup_lfmmi.lm import (
    BOS, EOS, NgramModel, compile_grammar, perplexity, read_arpa, read_corpus,
    train_ngram, write_arpa,
)

# Every order of the 1-, 2- and 3-gram models has both singleton and
# doubleton counts, so no order falls back to add-k.
CORPUS5 = [
    "d a d d a".split(),
    "d d".split(),
    "a a".split(),
    "d d".split(),
    "c b a c a".split(),
]


def reference_kn(corpus, order):
    """Independent interpolated-KN evaluator written straight from the
    textbook definitions (no shared code with the library)."""
    padded = [[BOS] + s + [EOS] for s in corpus]
    raw = {n: Counter() for n in range(1, order + 1)}
    for toks in padded:
        for n in range(1, order + 1):
            for i in range(len(toks) - n + 1):
                g = tuple(toks[i:i + n])
                if g == (BOS,):
                    continue
                raw[n][g] += 1
    vocab = sorted({t for s in corpus for t in s} | {EOS, "<unk>"})
    V = len(vocab)

    def count(n, g):
        if n == order or g[0] == BOS:
            return raw[n][g]
        return len({v for v in {x[0] for x in raw[n + 1]} if raw[n + 1][(v,) + g] > 0})

    def discount(n):
        values = [count(n, g) for g in raw[n]]
        n1 = values.count(1)
        n2 = values.count(2)
        return n1 / (n1 + 2 * n2)

    D = {n: discount(n) for n in range(1, order + 1)}

    def p(n, h, w):
        if n == 0:
            return 1.0 / V
        conts = {g[-1]: count(n, g) for g in raw[n] if g[:-1] == h}
        if n == 1:
            for x in vocab:
                conts.setdefault(x, 0)
        if not conts:
            return p(n - 1, h[1:], w)
        denom = sum(conts.values())
        types = sum(1 for c in conts.values() if c > 0)
        return (max(conts.get(w, 0) - D[n], 0) / denom
                + D[n] * types / denom * p(n - 1, h[1:], w))

    def prob(w, history):
        h = tuple(history)[-(order - 1):] if order > 1 else ()
        return p(len(h) + 1, h, w)

    return prob, vocab


@pytest.mark.parametrize("order", [1, 2, 3])
def test_kn_matches_reference_oracle(order):
    model = train_ngram(CORPUS5, order)
    ref, vocab = reference_kn(CORPUS5, order)
    histories = [()]
    toks = [BOS, "a", "b", "c", "d"]
    for n in range(1, order):
        histories += [h for h in itertools.product(toks, repeat=n)
                      if BOS not in h[1:]]
    for h in histories:
        for w in vocab:
            assert model.prob(w, h) == pytest.approx(ref(w, h), abs=1e-9), (h, w)


def test_add_k_zero_is_mle():
    model = train_ngram([["a", "a", "b"]], 1, smoothing="add-k", k=0.0)
    pa, pb = model.prob("a"), model.prob("b")
    assert pa / (pa + pb) == pytest.approx(2 / 3)
    assert pb / (pa + pb) == pytest.approx(1 / 3)


def _random_corpus(rng, n_sent=30, vocab=("a", "b", "c", "d", "e")):
    return [list(rng.choice(vocab, size=int(rng.integers(1, 7)))) for _ in range(n_sent)]


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_normalization_random_contexts(order):
    rng = np.random.default_rng(order)
    model = train_ngram(_random_corpus(rng), order)
    tokens = [BOS, "a", "b", "c", "d", "e", "zz"]
    for _ in range(100):
        h = tuple(rng.choice(tokens, size=order - 1)) if order > 1 else ()
        total = sum(model.prob(w, h) for w in model.outcomes)
        assert total == pytest.approx(1.0, abs=1e-6)


def test_probabilities_and_backoffs_in_range():
    model = train_ngram(CORPUS5, 3)
    for g, lp in model.probs.items():
        if g == (BOS,):
            continue
        assert 0 < 10 ** lp <= 1
    for h, bw in model.bows.items():
        assert 10 ** bw > 0


def test_empty_corpus_rejected():
    with pytest.raises(ConfigurationError):
        train_ngram([], 2)


def test_add_k_fallback_when_no_count_diversity():
    # every bigram occurs exactly once -> n2 = 0 at order 2
    model = train_ngram([["a", "b"], ["c", "d"]], 2)
    for h in [(BOS,), ("a",), ("zz",)]:
        assert sum(model.prob(w, h) for w in model.outcomes) == pytest.approx(1.0)


# -- perplexity ---------------------------------------------------------------

def test_uniform_perplexity_is_vocab_size():
    model = NgramModel.uniform(["a", "b", "c", EOS])
    assert perplexity(model, ["a", "c", "c", "b"]) == pytest.approx(4.0)


def test_unigram_mle_perplexity_by_hand():
    sent = ["a", "a", "b"]
    model = train_ngram([sent], 1, smoothing="add-k", k=0.0)
    # p(a)=2/4, p(b)=1/4, p(</s>)=1/4
    expect = math.exp(-(2 * math.log(0.5) + math.log(0.25) + math.log(0.25)) / 4)
    assert perplexity(model, sent) == pytest.approx(expect)


def test_deterministic_model_perplexity_one():
    model = train_ngram([["a", "b"]], 2, smoothing="add-k", k=0.0)
    assert perplexity(model, ["a", "b"]) == pytest.approx(1.0)


def test_training_on_a_sentence_never_raises_its_perplexity():
    rng = np.random.default_rng(11)
    for _ in range(20):
        corpus = _random_corpus(rng, n_sent=20)
        extra = list(rng.choice(["a", "b", "c", "d", "e"], size=5))
        before = perplexity(train_ngram(corpus, 3, vocab=extra), extra)
        after = perplexity(train_ngram(corpus + [extra], 3), extra)
        assert after <= before


# -- ARPA -------------------------------------------------------------------------

def test_arpa_roundtrip():
    model = train_ngram(CORPUS5, 3)
    text = write_arpa(model)
    assert "\\3-grams:" in text
    again = read_arpa(text)
    for g, lp in model.probs.items():
        assert again.probs[g] == pytest.approx(lp, abs=1e-9)
    assert write_arpa(again) == text


def test_read_corpus_skips_blank_lines():
    assert read_corpus("a b\n\n c \n") == [["a", "b"], ["c"]]


# -- grammar compilation ------------------------------------------------------------

def _best_grammar_score(g, words):
    acc = linear_acceptor([g.isymbols.id(w) for w in words], g.isymbols)
    return shortest_path(compose(acc, g, TROPICAL)).weight


def test_unigram_grammar_topology():
    model = train_ngram(CORPUS5, 1)
    g = compile_grammar(model)
    assert g.num_states == 1
    assert all(a.src == 0 and a.dst == 0 for a in g.arcs)
    assert g.num_arcs == len(model.outcomes) - 1  # every outcome but </s>
    assert g.finals[0] == pytest.approx(model.logprob(EOS))


def test_grammar_matches_direct_scoring_on_explicit_trigrams():
    model = train_ngram(CORPUS5, 3)
    g = compile_grammar(model)
    for sent in CORPUS5:
        assert _best_grammar_score(g, sent) == pytest.approx(
            model.sentence_logprob(sent), abs=1e-9)


def test_grammar_backoff_constructed_case():
    model = train_ngram([["a", "b", "c"], ["a", "b"], ["b", "c"], ["c", "a", "b"]], 3)
    g = compile_grammar(model)
    sent = ["c", "b", "a"]  # needs back-off
    direct = model.sentence_logprob(sent)
    # the exact path exists; spurious back-off paths may only score higher
    best = _best_grammar_score(g, sent)
    assert best >= direct - 1e-9
    assert best == pytest.approx(direct, abs=1e-9)


def test_grammar_exhaustive_explicit_sentences():
    corpus = [["a", "b"], ["b", "a"], ["a", "a", "b"], ["b", "b", "a"], ["a", "b", "a", "b"],
              ["c", "a"], ["a", "c", "b"]]
    model = train_ngram(corpus, 2)
    g = compile_grammar(model)
    words = ["a", "b", "c"]
    checked = 0
    for n in range(1, 6):
        for sent in itertools.product(words, repeat=n):
            hist = (BOS,) + sent + (EOS,)
            if not all(hist[i:i + 2] in model.probs for i in range(len(hist) - 1)):
                continue
            checked += 1
            assert _best_grammar_score(g, sent) == pytest.approx(
                model.sentence_logprob(sent), abs=1e-9), sent
    assert checked > 10
