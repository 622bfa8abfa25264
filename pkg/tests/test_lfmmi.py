import itertools
import math

import numpy as np
import pytest

from semisup_lfmmi.automata import Arc, SymbolTable, WeightedFst, enumerate_paths, write_fst
from semisup_lfmmi.am import LayerConfig, ModelConfig, backward, forward, init_model
from semisup_lfmmi.decoder import Lattice
from semisup_lfmmi.errors import (
    ConfigurationError, DegenerateGraphError, EmptySupervisionError,
    InconsistentSupervisionError, MalformedAlignmentError, SupervisionTooLargeError,
)
from semisup_lfmmi.lexicon import load_lexicon
from semisup_lfmmi.lfmmi import (
    LATTICE_MODE, TRANSCRIPT_MODE, DenominatorGraph, NumeratorChunk, build_denominator, den_forward_backward,
    lattice_path_alignment, lfmmi_objective, num_forward_backward, numerator_from_lattice,
    numerator_from_transcript, one_best_alignment, read_supervision, split_chunks,
    write_supervision,
)
from semisup_lfmmi.lm import EOS, NgramModel, train_ngram

PHONES = SymbolTable(["sil", "a", "b", "c"])
LEX = load_lexicon("x a b\ny c a\nz b\nz b c\nw a b c\n", PHONES)


def phone_lm(order=3, seed=0):
    rng = np.random.default_rng(seed)
    corpus = [list(rng.choice(PHONES.symbols[1:], size=int(rng.integers(2, 8)))) for _ in range(30)]
    return train_ngram(corpus, order)


def uniform_den(phones=PHONES):
    return build_denominator(NgramModel.uniform(phones.symbols[1:]), phones)


def sup(alignment, tau, transcript=None):
    return numerator_from_transcript(transcript, LEX, alignment, tau)


def labelings(s):
    return {tuple(PHONES.symbol(l) for l in p.ilabels) for p in enumerate_paths(s.fst, 10**6)}


def widened_labelings(alignment, tau):
    """Brute force: every labeling whose run boundaries lie within tau of
    the nominal starts."""
    T = alignment[-1][2]
    N = len(alignment)
    starts = [s for _, s, _ in alignment]
    out = set()
    for bounds in itertools.combinations(range(1, T), N - 1):
        if all(abs(b - s) <= tau for b, s in zip(bounds, starts[1:])):
            edges = (0,) + bounds + (T,)
            out.add(tuple(p for k, (p, _, _) in enumerate(alignment)
                          for _ in range(edges[k + 1] - edges[k])))
    return out


# -- denominator ----------------------------------------------------------------------------

def test_uniform_unigram_denominator_is_one_state():
    den = uniform_den()
    assert den.fst.num_states == 1
    assert len(den.fst.arcs) == len(PHONES) - 1
    assert all(a.src == a.dst == 0 for a in den.fst.arcs)
    assert den.initial.tolist() == [1.0]


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_denominator_sequence_mass_matches_lm(order):
    phones = SymbolTable(["a", "b", "c"])
    rng = np.random.default_rng(order)
    corpus = [list(rng.choice(["a", "b", "c"], size=int(rng.integers(1, 6)))) for _ in range(12)]
    lm = train_ngram(corpus, order)
    den = build_denominator(lm, phones)
    fst = den.fst
    for T in range(1, 5):
        for seq in itertools.product(["a", "b", "c"], repeat=T):
            q, w = fst.start, 0.0
            for p in seq:
                (a,) = [fst.arcs[i] for i in fst.out_arcs[q] if fst.arcs[i].ilabel == phones.id(p)]
                w += a.weight
                q = a.dst
            hist = ["<s>"]
            expect = 0.0
            for p in seq:
                expect += lm.logprob(p, hist)
                hist.append(p)
            assert w == pytest.approx(expect, abs=1e-9)


def test_denominator_is_deterministic_and_epsilon_free():
    a, b = build_denominator(phone_lm(4), PHONES), build_denominator(phone_lm(4), PHONES)
    assert write_fst(a.fst) == write_fst(b.fst)
    assert np.array_equal(a.initial, b.initial)
    assert all(x.ilabel != 0 for x in a.fst.arcs)
    assert {x.ilabel for x in a.fst.arcs} == set(range(1, len(PHONES)))
    assert a.initial.sum() == pytest.approx(1.0)


def test_denominator_rejects_unusable_models():
    with pytest.raises(DegenerateGraphError):
        build_denominator(NgramModel.uniform(["a"]), SymbolTable(["a", "b"]))


# -- numerator from transcripts --------------------------------------------------------------

def test_zero_tolerance_keeps_single_alignment():
    ali = [("a", 0, 2), ("b", 2, 5)]
    s = sup(ali, 0, ["x"])
    assert s.mode == TRANSCRIPT_MODE
    assert labelings(s) == {("a", "a", "b", "b", "b")}


def test_tolerance_one_gives_three_boundaries():
    s = sup([("a", 0, 3), ("b", 3, 6)], 1)
    assert len(labelings(s)) == 3


def test_wide_tolerance_gives_all_compositions():
    s = sup([("a", 0, 2), ("b", 2, 5)], 5)
    assert len(labelings(s)) == math.comb(4, 1)


@pytest.mark.parametrize("seed", range(10))
def test_tolerance_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    lens = rng.integers(1, 4, size=n)
    edges = np.concatenate([[0], np.cumsum(lens)])
    ali = [(str(rng.choice(PHONES.symbols[1:])), int(edges[k]), int(edges[k + 1])) for k in range(n)]
    tau = int(rng.integers(0, 3))
    s = sup(ali, tau)
    assert labelings(s) == widened_labelings(ali, tau)
    # deterministic: no state has two arcs with the same label
    for q in range(s.fst.num_states):
        labs = [s.fst.arcs[i].ilabel for i in s.fst.out_arcs[q]]
        assert len(labs) == len(set(labs))
    # arc tags are frame indices
    for p in enumerate_paths(s.fst):
        assert [s.fst.arcs[i].tag for i in p.arcs] == list(range(s.num_frames))


def test_malformed_alignments_rejected():
    for bad in ([("a", 0, 2), ("b", 3, 5)], [("a", 0, 3), ("b", 2, 5)], [("a", 1, 3)], [],
                [("a", 0, 0)]):
        with pytest.raises(MalformedAlignmentError):
            sup(bad, 1)
    with pytest.raises(MalformedAlignmentError):
        sup([("a", 0, 2), ("c", 2, 4)], 1, ["x"])
    with pytest.raises(ConfigurationError):
        sup([("a", 0, 2)], -1)


def test_transcript_check_allows_silence_and_alternate_prons():
    ali = [("sil", 0, 2), ("b", 2, 3), ("c", 3, 5), ("a", 5, 7), ("b", 7, 9)]
    assert sup(ali, 1, ["z", "x"]).num_frames == 9


def test_supervision_roundtrip():
    s = sup([("a", 0, 3), ("b", 3, 6)], 1)
    back = read_supervision(write_supervision(s), PHONES)
    assert write_supervision(back) == write_supervision(s)
    assert (back.utt_id, back.num_frames, back.tolerance, back.mode) == \
        (s.utt_id, s.num_frames, s.tolerance, s.mode)


# -- numerator from lattices -------------------------------------------------------------------

WORDS = SymbolTable(["w", "x", "y", "z", "<unk>"])


def lattice(arcs, n_states, T):
    fst_arcs = [Arc(s, d, WORDS.id(w) if w else 0, WORDS.id(w) if w else 0, -(ac + lm),
                    (ac, lm, t0, t1)) for s, d, w, ac, lm, t0, t1 in arcs]
    return Lattice(WeightedFst(n_states, 0, fst_arcs, {n_states - 1: 0.0}, WORDS, WORDS), T,
                   utt_id="u1")


def flat_lm():
    return NgramModel.uniform(["w", "x", "y", "z", EOS])


def test_single_path_lattice_matches_transcript_mode():
    lat = lattice([(0, 1, None, 1.0, 0.0, 0, 2), (1, 2, "x", 2.0, 1.0, 2, 6),
                   (2, 3, "z", 1.0, 1.0, 6, 9)], 4, 9)
    words, ali = one_best_alignment(lat, flat_lm(), LEX)
    assert words == ("x", "z")
    assert ali == [("sil", 0, 2), ("a", 2, 4), ("b", 4, 6), ("b", 6, 9)]
    for tau in (0, 1, 3):
        a = numerator_from_lattice(lat, flat_lm(), LEX, 5.0, tau)
        b = numerator_from_transcript(words, LEX, ali, tau, utt_id="u1")
        assert a.mode == LATTICE_MODE
        assert write_fst(a.fst) == write_fst(b.fst)


def test_two_path_lattice_is_union_of_expansions():
    lat = lattice([(0, 1, "x", 1.0, 1.0, 0, 3), (0, 1, "y", 1.5, 1.0, 0, 3),
                   (1, 2, "z", 1.0, 1.0, 3, 6)], 3, 6)
    tau = 1
    s = numerator_from_lattice(lat, flat_lm(), LEX, 10.0, tau)
    p1 = [("a", 0, 1), ("b", 1, 3), ("b", 3, 6)]
    p2 = [("c", 0, 1), ("a", 1, 3), ("b", 3, 6)]
    expect = widened_labelings(p1, tau) | widened_labelings(p2, tau)
    assert labelings(s) == expect
    assert len(expect) == len(widened_labelings(p1, tau)) + len(widened_labelings(p2, tau))


def test_state_budget_bounds_lattice_supervision():
    lat = lattice([(0, 1, "x", 1.0, 1.0, 0, 3), (0, 1, "y", 1.5, 1.0, 0, 3),
                   (1, 2, "z", 1.0, 1.0, 3, 6)], 3, 6)
    n = numerator_from_lattice(lat, flat_lm(), LEX, 10.0, 1, max_states=None).fst.num_states
    assert numerator_from_lattice(lat, flat_lm(), LEX, 10.0, 1, max_states=n).fst.num_states == n
    with pytest.raises(SupervisionTooLargeError):
        numerator_from_lattice(lat, flat_lm(), LEX, 10.0, 1, max_states=n - 1)


def test_zero_prune_beam_degenerates_to_one_best():
    lat = lattice([(0, 1, "x", 1.0, 1.0, 0, 3), (0, 1, "y", 1.5, 1.0, 0, 3),
                   (1, 2, "z", 1.0, 1.0, 3, 6)], 3, 6)
    full = numerator_from_lattice(lat, flat_lm(), LEX, 0.0, 2)
    words, ali = one_best_alignment(lat, flat_lm(), LEX)
    assert write_fst(full.fst) == write_fst(numerator_from_transcript(words, LEX, ali, 2).fst)


def test_zero_prune_beam_breaks_exact_ties_like_one_best():
    # same words and score, word boundary at frame 3 or 4
    lat = lattice([(0, 1, "x", 1.0, 1.0, 0, 3), (1, 3, "z", 1.0, 1.0, 3, 7),
                   (0, 2, "x", 1.0, 1.0, 0, 4), (2, 3, "z", 1.0, 1.0, 4, 7)], 4, 7)
    full = numerator_from_lattice(lat, flat_lm(), LEX, 0.0, 1)
    words, ali = one_best_alignment(lat, flat_lm(), LEX)
    assert write_fst(full.fst) == write_fst(numerator_from_transcript(words, LEX, ali, 1).fst)
    assert labelings(numerator_from_lattice(lat, flat_lm(), LEX, 1e-6, 1)) > labelings(full)


def test_best_fitting_pronunciation_is_used():
    # z: "b" and "b c" tie, so the first listed wins; w ("a b c") needs 3 frames
    assert lattice_path_alignment(lattice([(0, 1, "z", 0, 0, 0, 4)], 2, 4), [0], LEX) == \
        [("b", 0, 4)]
    lat = lattice([(0, 1, "z", 0.0, 0.0, 0, 1), (1, 2, "w", 0.0, 0.0, 1, 3)], 3, 3)
    with pytest.raises(EmptySupervisionError):
        one_best_alignment(lat, flat_lm(), LEX)
    with pytest.raises(EmptySupervisionError):
        numerator_from_lattice(lat, flat_lm(), LEX, 5.0, 1)


# -- chunks ------------------------------------------------------------------------------------

def chunk_labelings(c):
    return {tuple(PHONES.symbol(l) for l in p.ilabels) for p in enumerate_paths(c.fst)}


def test_whole_utterance_chunk_equals_supervision():
    s = sup([("a", 0, 3), ("b", 3, 6)], 1)
    (c,) = split_chunks(s, 6)
    assert (c.length, c.offset) == (6, 0)
    assert chunk_labelings(c) == labelings(s)


def test_single_path_chunks_are_subpaths():
    s = sup([("a", 0, 2), ("b", 2, 5), ("c", 5, 6)], 0)
    ((full,),) = [labelings(s)]
    chunks = split_chunks(s, 2)
    assert [c.offset for c in chunks] == [0, 2, 4]
    assert [chunk_labelings(c) for c in chunks] == [{full[0:2]}, {full[2:4]}, {full[4:6]}]


def test_multi_path_chunks_cover_every_slice():
    s = sup([("a", 0, 2), ("b", 2, 4), ("c", 4, 6)], 1)
    chunks = split_chunks(s, 3)
    full = labelings(s)
    assert [chunk_labelings(c) for c in chunks] == [{l[0:3] for l in full}, {l[3:6] for l in full}]
    # every full labeling is a concatenation of accepted slices
    pairs = {a + b for a in chunk_labelings(chunks[0]) for b in chunk_labelings(chunks[1])}
    assert full <= pairs


def test_short_utterance_and_partial_chunk():
    s = sup([("a", 0, 3), ("b", 3, 7)], 1)
    assert split_chunks(s, 8) == []
    assert len(split_chunks(s, 3)) == 2
    with pytest.raises(ConfigurationError):
        split_chunks(s, 0)


# -- objective ---------------------------------------------------------------------------------

def full_chunk(L, phones=PHONES):
    """Chunk accepting every labeling of length L."""
    arcs = [Arc(t, t + 1, p, p, 0.0, t) for t in range(L) for p in range(1, len(phones))]
    return NumeratorChunk(WeightedFst(L + 1, 0, arcs, {L: 0.0}, phones), L, "all", 0)


def test_numerator_equal_to_denominator_gives_zero():
    den = build_denominator(phone_lm(3), PHONES)
    y = np.random.default_rng(0).normal(size=(5, 4))
    obj = lfmmi_objective(y, [full_chunk(5)], den)
    assert obj.value == pytest.approx(0.0, abs=1e-10)
    assert np.abs(obj.gradient).max() < 1e-10


def test_one_frame_closed_form():
    phones = SymbolTable(["p0", "p1"])
    den = build_denominator(NgramModel.uniform(["p0", "p1"]), phones)
    lex = load_lexicon("u p0\n", phones, silence_phone="p1")
    ch = split_chunks(numerator_from_transcript(None, lex, [("p0", 0, 1)], 0), 1)
    y = np.array([[0.3, 1.1]])
    obj = lfmmi_objective(y, ch, den)
    q = math.exp(0.3) / (math.exp(0.3) + math.exp(1.1))
    assert obj.value == pytest.approx(math.log(q), abs=1e-12)
    assert obj.gradient[0] == pytest.approx([1 - q, q - 1], abs=1e-12)


def _random_chunks(rng, L, n_chunks=1):
    out = []
    for k in range(n_chunks):
        n = int(rng.integers(1, 4))
        cuts = sorted(rng.choice(np.arange(1, L), size=n - 1, replace=False)) if n > 1 else []
        edges = [0] + [int(c) for c in cuts] + [L]
        ali = [(str(rng.choice(PHONES.symbols[1:])), edges[i], edges[i + 1]) for i in range(n)]
        (c,) = split_chunks(numerator_from_transcript(None, LEX, ali, int(rng.integers(0, 3))), L)
        out.append(NumeratorChunk(c.fst, L, f"r{k}", k * L))
    return out


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    den = build_denominator(phone_lm(3, seed), PHONES)
    chunks = _random_chunks(rng, 5, 2)
    y = rng.normal(size=(10, 4))
    obj = lfmmi_objective(y, chunks, den)
    h = 1e-5
    num = np.zeros_like(y)
    for idx in np.ndindex(y.shape):
        yp, ym = y.copy(), y.copy()
        yp[idx] += h
        ym[idx] -= h
        num[idx] = (lfmmi_objective(yp, chunks, den).value -
                    lfmmi_objective(ym, chunks, den).value) / (2 * h)
    assert np.linalg.norm(obj.gradient - num) <= 1e-4 * np.linalg.norm(num)


def test_per_chunk_outputs_match_matrix_outputs():
    rng = np.random.default_rng(3)
    den = build_denominator(phone_lm(2), PHONES)
    chunks = _random_chunks(rng, 4, 3)
    y = rng.normal(size=(12, 4))
    a = lfmmi_objective(y, chunks, den)
    b = lfmmi_objective([y[c.offset:c.offset + 4] for c in chunks], chunks, den)
    assert a.value == pytest.approx(b.value, abs=1e-12)
    assert np.allclose(a.gradient, np.concatenate(b.gradient))


@pytest.mark.parametrize("seed", range(5))
def test_posteriors_normalized_and_objective_bounded(seed):
    rng = np.random.default_rng(seed)
    den = build_denominator(phone_lm(4, seed), PHONES)
    (ch,) = _random_chunks(rng, 8)
    y = 3 * rng.normal(size=(8, 4))
    ln, pn = num_forward_backward(ch, den, y)
    ld, pd = den_forward_backward(den, y)
    assert np.abs(pn.sum(axis=1) - 1).max() < 1e-8
    assert np.abs(pd.sum(axis=1) - 1).max() < 1e-8
    assert ln <= ld + 1e-9
    assert np.abs(lfmmi_objective(y, [ch], den).gradient.sum(axis=1)).max() < 1e-8


def test_wider_tolerance_never_lowers_objective():
    rng = np.random.default_rng(1)
    den = build_denominator(phone_lm(3), PHONES)
    ali = [("a", 0, 3), ("b", 3, 5), ("c", 5, 8)]
    y = rng.normal(size=(8, 4))
    vals = [lfmmi_objective(y, split_chunks(sup(ali, tau), 8), den).value for tau in range(5)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_inconsistent_supervision_detected():
    # state 1 ("after a") only continues with a, so "a c" has no denominator path
    phones = SymbolTable(["a", "c"])
    fst = WeightedFst(3, 0, [Arc(0, 1, 1, 1, math.log(0.5)), Arc(0, 2, 2, 2, math.log(0.5)),
                             Arc(1, 1, 1, 1, 0.0), Arc(2, 2, 2, 2, 0.0)],
                      {0: 0.0, 1: 0.0, 2: 0.0}, phones)
    den = DenominatorGraph(fst, np.array([1.0, 0.0, 0.0]), phones)
    lex = load_lexicon("u a c\n", phones, silence_phone="c")
    ch = split_chunks(numerator_from_transcript(None, lex, [("a", 0, 1), ("c", 1, 2)], 0), 2)
    with pytest.raises(InconsistentSupervisionError):
        lfmmi_objective(np.zeros((2, 2)), ch, den)


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient_through_model(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(input_dim=6, layers=(LayerConfig((-1, 0, 1), 8, 4),
                                           LayerConfig((-3, 0, 3), 8, 4)),
                      output_dim=4, subsampling=3)
    model = init_model(cfg, seed)
    den = build_denominator(phone_lm(3, seed), PHONES)
    (ch,) = _random_chunks(rng, 5)
    T = cfg.left_context + cfg.right_context + 3 * 5 - 2
    x = rng.normal(size=(T, 6))
    out = forward(model, x)
    assert out.scores.shape == (5, 4)
    obj = lfmmi_objective(out.scores, [ch], den)
    grads = backward(model, x, obj.gradient)
    h = 1e-6
    for name in ("layer1.B", "layer2.A", "output.W"):
        p = model.params[name]
        idx = tuple(int(rng.integers(0, n)) for n in p.shape)
        old = p[idx]
        p[idx] = old + h
        up = lfmmi_objective(forward(model, x).scores, [ch], den).value
        p[idx] = old - h
        dn = lfmmi_objective(forward(model, x).scores, [ch], den).value
        p[idx] = old
        fd = (up - dn) / (2 * h)
        assert abs(grads[name][idx] - fd) <= 1e-3 * max(abs(fd), 1e-6)
