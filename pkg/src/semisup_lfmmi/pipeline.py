"""Semi-supervised training: seed model, decode, select, supervise, retrain.

The stage order is: synthetic corpus, language models, decoding graph,
denominator, seed model on the supervised subset, then per round: decode
the unsupervised pool, select confident utterances, build numerator
supervision (1-best or full lattice), retrain from the current model and
evaluate on held-out data.
"""
import hashlib
import json
import logging
import math
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import am
from .automata import linear_acceptor, write_fst
from .config import ExperimentConfig, config_hash
from .corpus import HELDOUT, SUPERVISED, UNSUPERVISED, generate_synthetic_corpus
from .decoder import (
    INPUT_FRAME_SECONDS, decode, measure_rtf, viterbi_alignment, write_lattice,
)
from .errors import (
    ContractError, DecodeFailureError, EmptySupervisionError, InconsistentSupervisionError,
    MalformedAlignmentError, RescoringFailureError, StageError, SupervisionTooLargeError,
    ToolkitError, TrainingDivergenceError, ConfigurationError,
)
from .lexicon import build_decoding_graph, compile_L
from .lfmmi import (
    build_denominator, lfmmi_objective, numerator_from_lattice, numerator_from_transcript,
    one_best_alignment, split_chunks,
)
from .lm import BOS, EOS, compile_grammar, train_ngram, write_arpa
from .scoring import CHANNELS, channel_report, normalize, wer

log = logging.getLogger(__name__)

REJECT_REASONS = ("confidence", "perplexity", "silence-margin")


def _digest(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode())
    return h.hexdigest()[:16]


# -- selection ----------------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionPolicy:
    min_confidence: float = 0.9
    max_perplexity: float = 150.0
    min_lead_silence: float = 0.0
    min_trail_silence: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ConfigurationError("min_confidence must lie in [0, 1]")
        if not self.max_perplexity > 1.0:
            raise ConfigurationError("max_perplexity must exceed 1")
        if self.min_lead_silence < 0 or self.min_trail_silence < 0:
            raise ConfigurationError("silence thresholds must be >= 0")


def transcript_perplexity(lm, words):
    """Per-token perplexity including the end-of-sentence event."""
    hist, total = [BOS], 0.0
    for w in list(words) + [EOS]:
        total += lm.logprob(w, hist)
        hist.append(w)
    return math.exp(-total / (len(words) + 1))


def select_utterances(decodes, lm, policy, records):
    """Split decodes into (selected, [(decode, reason)]); the reason is the
    first failing check in the order confidence, perplexity, margins."""
    by_id = records if isinstance(records, dict) else {r.utt_id: r for r in records}
    selected, rejected = [], []
    for d in decodes:
        rec = by_id.get(d.utt_id)
        if rec is None:
            raise ContractError(f"no record for decoded utterance {d.utt_id!r}")
        if d.confidence < policy.min_confidence:
            rejected.append((d, "confidence"))
        elif transcript_perplexity(lm, d.transcript) > policy.max_perplexity:
            rejected.append((d, "perplexity"))
        elif (rec.lead_silence < policy.min_lead_silence
              or rec.trail_silence < policy.min_trail_silence):
            rejected.append((d, "silence-margin"))
        else:
            selected.append(d)
    return selected, rejected


# -- training -----------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainingExample:
    utt_id: str
    inputs: np.ndarray  # padded model input
    chunks: tuple


def model_config(settings, num_pdfs, input_dim):
    try:
        offsets = [tuple(int(x) for x in grp.split(",")) for grp in settings.layers.split()]
    except ValueError:
        raise ConfigurationError(f"bad layer offsets {settings.layers!r}") from None
    layers = tuple(am.LayerConfig(o, settings.hidden, settings.bottleneck) for o in offsets)
    return am.ModelConfig(input_dim=input_dim, layers=layers, output_dim=num_pdfs,
                          dropout=settings.dropout, subsampling=settings.subsampling)


def train_lfmmi(model, examples, den, settings, epochs, seed, learning_rate=None):
    """Minibatch ascent of the frame-weighted LF-MMI objective.

    Steps are Adam-style (bias-corrected first and second moments), which
    copes with the small gradients of the 1/sqrt(fan-in) initialization far
    better than plain momentum.  Returns the new model and the per-epoch mean
    objective.
    """
    if not examples:
        raise EmptySupervisionError("no training examples")
    rng = np.random.default_rng(seed)
    mode = "train" if model.config.dropout > 0 else "eval"
    first = {k: np.zeros_like(v) for k, v in model.params.items()}
    second = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2 = settings.momentum, settings.second_moment
    lr = settings.learning_rate if learning_rate is None else learning_rate
    curve = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(examples))
        total, frames = 0.0, 0
        for start in range(0, len(order), settings.batch):
            batch = [examples[i] for i in order[start:start + settings.batch]]
            batch_frames = sum(c.length for ex in batch for c in ex.chunks)
            grads = {k: np.zeros_like(v) for k, v in model.params.items()}
            for ex in batch:
                out = am.forward(model, ex.inputs, mode, seed=step)
                obj = lfmmi_objective(out.scores, list(ex.chunks), den)
                if not math.isfinite(obj.value):
                    raise TrainingDivergenceError(f"objective diverged on {ex.utt_id}")
                g = am.backward(model, ex.inputs, obj.gradient * (obj.frames / batch_frames),
                                mode, seed=step)
                for k in grads:
                    grads[k] += g[k]
                total += obj.value * obj.frames
                frames += obj.frames
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if not math.isfinite(norm):
                raise TrainingDivergenceError("non-finite gradient")
            scale = min(1.0, settings.max_grad_norm / norm) if norm > 0 else 1.0
            step += 1
            update = {}
            for k, g in grads.items():
                g = scale * g
                first[k] = b1 * first[k] + (1 - b1) * g
                second[k] = b2 * second[k] + (1 - b2) * g * g
                m_hat = first[k] / (1 - b1 ** step)
                v_hat = second[k] / (1 - b2 ** step)
                update[k] = -m_hat / (np.sqrt(v_hat) + 1e-8)  # negative: ascend
            model = am.sgd_step(model, update, lr)
        curve.append(total / frames)
    return model, curve


def flat_alignment(phones, num_frames):
    """Uniform segmentation of a phone sequence over ``num_frames``."""
    n = len(phones)
    if n == 0 or n > num_frames:
        raise MalformedAlignmentError(f"cannot fit {n} phones into {num_frames} frames")
    edges = [round(k * num_frames / n) for k in range(n + 1)]
    return [(p, edges[k], edges[k + 1]) for k, p in enumerate(phones)]


def reference_alignment(alignment, subsampling):
    """Input-frame segments -> output-frame segments: output frame k sits at
    input frame k*subsampling, so a phone over [s, e) keeps [ceil(s/k), ceil(e/k))."""
    out = []
    for p, s, e in alignment:
        lo, hi = -(-s // subsampling), -(-e // subsampling)
        if hi > lo:
            out.append((p, lo, hi))
    return out


def transcript_graph(lexicon, words, l_fst=None):
    """Decoding graph accepting only ``words`` (optional silences allowed)."""
    syms = lexicon.word_symbols(["<unk>"])
    l_fst = l_fst or compile_L(lexicon, syms)
    return build_decoding_graph(l_fst, linear_acceptor([syms.id(w) for w in words], syms))


def forced_alignment(model, graph, inputs):
    """Phone alignment ``[(phone, start, end)]`` in output frames."""
    scores = am.forward(model, inputs).scores
    fst = graph.fst
    return [(fst.isymbols.symbol(fst.arcs[a].ilabel), s, e)
            for a, s, e in viterbi_alignment(scores, graph)]


# -- reporting ----------------------------------------------------------------------------------

@dataclass
class IterationReport:
    name: str
    model_params: int
    wer: object = None  # WerReport on held-out data
    rtf: float = float("nan")
    objective: tuple = ()
    decoded: int = 0
    decode_failures: int = 0
    selected: int = 0
    rejected: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)  # supervision errors by class
    supervised_utterances: int = 0

    def record(self, timing=True):
        rows = {}
        if self.wer is not None:
            for ch in CHANNELS + ("combined",):
                c = self.wer.rows[ch]
                rows[ch] = {"N": c.ref_tokens, "S": c.substitutions, "I": c.insertions,
                            "D": c.deletions, "wer": self.wer.percent(ch)}
        return {"iteration": self.name, "params": self.model_params, "wer": rows,
                "rtf": round(self.rtf, 4), "objective": [round(v, 6) for v in self.objective],
                "decoded": self.decoded, "decode_failures": self.decode_failures,
                "selected": self.selected, "rejected": self.rejected, "excluded": self.excluded,
                "supervised_utterances": self.supervised_utterances} | (
                    {} if timing else {"rtf": None})


@dataclass
class ExperimentReport:
    config_hash: str
    mode: str
    stage_hashes: dict = field(default_factory=dict)
    iterations: list = field(default_factory=list)
    graph_stages: tuple = ()
    failure: str = None
    model: object = field(default=None, repr=False)  # final acoustic model

    def wer(self, iteration, channel="combined"):
        return self.iterations[iteration].wer.percent(channel)

    def records(self, timing=True):
        """Line-delimited JSON: one header, one line per iteration.  With
        ``timing=False`` the wall-clock RTF is blanked, leaving only values
        that are a function of the configuration."""
        head = {"config_hash": self.config_hash, "mode": self.mode,
                "stage_hashes": self.stage_hashes,
                "graph_stages": [list(s) for s in self.graph_stages], "failure": self.failure}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(it.record(timing), sort_keys=True) for it in self.iterations]
        return "\n".join(lines) + "\n"

    def format(self):
        out = [f"config {self.config_hash}  supervision {self.mode}"]
        out.append(f"{'model':<8} {'agent':>7} {'caller':>7} {'combined':>9} {'RTF':>7} "
                   f"{'params':>8} {'selected':>9}")
        for it in self.iterations:
            w = [it.wer.percent(c) if it.wer else None for c in CHANNELS + ("combined",)]
            cells = [f"{x:.1f}" if x is not None else "-" for x in w]
            sel = f"{it.selected}/{it.decoded}" if it.decoded else "-"
            out.append(f"{it.name:<8} {cells[0]:>7} {cells[1]:>7} {cells[2]:>9} "
                       f"{it.rtf:>7.3f} {it.model_params:>8} {sel:>9}")
        if self.failure:
            out.append(f"FAILED: {self.failure}")
        return "\n".join(out) + "\n"


@contextmanager
def _stage(report, name):
    try:
        yield
    except ToolkitError as e:
        if isinstance(e, StageError):
            raise
        report.failure = f"{name}: {e}"
        err = StageError(name, e)
        err.report = report
        raise err from e


# -- stages -------------------------------------------------------------------------------------

def language_models(corpus, settings):
    """(decoding LM on supervised transcripts, strong LM adding the extra text)."""
    sup = [r.words for r in corpus.subset(SUPERVISED)]
    vocab = corpus.lexicon.words
    dec_lm = train_ngram(sup, settings.lm_order, vocab=vocab)
    strong_lm = train_ngram(sup + list(corpus.lm_text), settings.strong_lm_order, vocab=vocab)
    return dec_lm, strong_lm


def decoding_graph(lexicon, lm):
    """(L transducer, decoding graph for ``lm``)."""
    syms = lexicon.word_symbols(["<unk>"])
    l_fst = compile_L(lexicon, syms)
    return l_fst, build_decoding_graph(l_fst, compile_grammar(lm, syms))


def denominator_graph(corpus, order):
    """Phone LM over supervised transcripts (best pronunciations, silence at
    both ends) compiled into the denominator."""
    lex = corpus.lexicon
    sil = lex.silence_phone
    phone_corpus = [[sil] + [p for w in r.words for p in lex.best_pronunciation(w)] + [sil]
                    for r in corpus.subset(SUPERVISED)]
    phone_lm = train_ngram(phone_corpus, order, vocab=corpus.phones.symbols[1:])
    return build_denominator(phone_lm, corpus.phones)


class _Run:
    """State shared by the stages of one experiment."""

    def __init__(self, cfg, cache):
        self.cfg = cfg
        self.cache = cache if cache is not None else {}
        # everything before supervision construction is mode independent
        self.upstream_key = config_hash(cfg.replace(**{"supervision.mode": "1best",
                                                       "supervision.prune_beam": 0,
                                                       "run.iterations": 0}))

    def cached(self, name, build):
        key = (self.upstream_key, name)
        if key not in self.cache:
            self.cache[key] = build()
        return self.cache[key]

    # corpus, models of language, graphs
    def setup(self, corpus=None):
        cfg = self.cfg
        corpus = corpus or generate_synthetic_corpus(cfg.corpus, cfg.run.seed)
        dec_lm, strong_lm = language_models(corpus, cfg.decode)
        l_fst, graph = decoding_graph(corpus.lexicon, dec_lm)
        den = denominator_graph(corpus, cfg.training.phone_lm_order)
        return dict(corpus=corpus, dec_lm=dec_lm, strong_lm=strong_lm, l_fst=l_fst,
                    graph=graph, den=den)

    def inputs(self, model, utt):
        return am.pad_features(model, self.env["corpus"].model_input(utt))

    def num_outputs(self, model, utt):
        n = len(self.env["corpus"].features[utt])
        return model.config.num_outputs(n + model.config.left_context + model.config.right_context)

    def train_seed(self):
        cfg, env = self.cfg, self.env
        corpus, lex, den = env["corpus"], env["corpus"].lexicon, env["den"]
        tcfg = cfg.training
        mcfg = model_config(cfg.model, len(corpus.phones) - 1,
                            cfg.corpus.feature_dim + cfg.corpus.speaker_dim)
        model = am.init_model(mcfg, cfg.run.seed + 1)
        sup = corpus.subset(SUPERVISED)
        inputs = {r.utt_id: self.inputs(model, r.utt_id) for r in sup}
        sil = lex.silence_phone
        alignments = {}
        for r in sup:
            if tcfg.seed_alignment == "reference":
                alignments[r.utt_id] = reference_alignment(corpus.alignments[r.utt_id],
                                                           mcfg.subsampling)
                continue
            phones = [sil] + [p for w in r.words for p in lex.best_pronunciation(w)] + [sil]
            try:
                alignments[r.utt_id] = flat_alignment(phones, self.num_outputs(model, r.utt_id))
            except MalformedAlignmentError:
                continue
        graphs = {}
        curve = []
        examples = None
        for rnd in range(tcfg.realign_rounds + 1):
            flat = rnd == 0 and tcfg.seed_alignment == "flat"
            tau = tcfg.flat_start_tolerance if flat else tcfg.tolerance
            if rnd:
                for r in sup:
                    if r.utt_id not in graphs:
                        graphs[r.utt_id] = transcript_graph(lex, r.words, env["l_fst"])
                    alignments[r.utt_id] = forced_alignment(model, graphs[r.utt_id],
                                                            inputs[r.utt_id])
            examples = self.examples(
                {u: numerator_from_transcript(corpus.record(u).words, lex, a, tau, u)
                 for u, a in alignments.items()}, inputs)
            model, c = train_lfmmi(model, examples, den, tcfg, tcfg.seed_epochs,
                                   cfg.run.seed + 100 + rnd, tcfg.seed_learning_rate)
            curve += c
        return model, tuple(curve), self.supervised_examples(model, alignments), alignments

    def supervised_examples(self, model, alignments):
        """Transcript supervision for the supervised subset at the training tolerance."""
        corpus = self.env["corpus"]
        tau = self.cfg.training.tolerance
        sups = {u: numerator_from_transcript(corpus.record(u).words, corpus.lexicon, a, tau, u)
                for u, a in alignments.items()}
        return self.examples(sups, {u: self.inputs(model, u) for u in sups})

    def examples(self, sups, inputs):
        out = []
        for u in sorted(sups):
            chunks = split_chunks(sups[u], self.cfg.training.chunk)
            if chunks:
                out.append(TrainingExample(u, inputs[u], tuple(chunks)))
        return out

    def decode_all(self, model, records):
        d = self.cfg.decode
        graph = self.env["graph"]
        results, failures = [], 0
        for r in records:
            try:
                results.append(decode(model, graph, self.inputs(model, r.utt_id), d.beam,
                                      d.lattice_beam, d.acoustic_scale, r.utt_id,
                                      r.audio_seconds, d.confidence_rule))
            except DecodeFailureError:
                failures += 1
        return results, failures

    def evaluate(self, model):
        """(WerReport, aggregate RTF, hypothesis digest) on held-out data."""
        corpus = self.env["corpus"]
        results, failures = self.decode_all(model, corpus.subset(HELDOUT))
        hyps = {r.utt_id: r.transcript for r in results}
        counts, channels = {}, {}
        for rec in corpus.subset(HELDOUT):
            counts[rec.utt_id] = wer(normalize(rec.words), normalize(hyps.get(rec.utt_id, ())))
            channels[rec.utt_id] = rec.channel
        rtf = measure_rtf(results).aggregate if results else float("nan")
        digest = _digest(*(f"{u}:{' '.join(hyps.get(u, ('<fail>',)))}" for u in sorted(counts)))
        return channel_report(counts, channels), rtf, digest

    def supervise(self, selected):
        cfg, env = self.cfg, self.env
        lex = env["corpus"].lexicon
        tau = cfg.training.tolerance
        sups, excluded = {}, Counter()
        for d in selected:
            try:
                if cfg.supervision.mode == "1best":
                    words, ali = one_best_alignment(d.lattice, env["strong_lm"], lex,
                                                    env["dec_lm"], cfg.decode.lm_scale)
                    sups[d.utt_id] = numerator_from_transcript(words, lex, ali, tau, d.utt_id)
                else:
                    sups[d.utt_id] = numerator_from_lattice(
                        d.lattice, env["strong_lm"], lex, cfg.supervision.prune_beam, tau,
                        env["dec_lm"], cfg.decode.lm_scale, d.utt_id,
                        cfg.supervision.max_states)
            except (EmptySupervisionError, MalformedAlignmentError,
                    RescoringFailureError, SupervisionTooLargeError) as e:
                excluded[type(e).__name__] += 1
        return sups, excluded


def run_experiment(config=None, cache=None):
    """Run every stage and return the report.

    ``cache`` (a dict) lets runs that differ only in supervision settings
    share the corpus, seed model and first decoding pass.
    """
    cfg = config or ExperimentConfig()
    run = _Run(cfg, cache)
    report = ExperimentReport(config_hash(cfg), cfg.supervision.mode)
    h = report.stage_hashes

    with _stage(report, "setup"):
        run.env = env = run.cached("setup", run.setup)
        corpus = env["corpus"]
        h["corpus"] = corpus.digest()
        h["lm"] = _digest(write_arpa(env["dec_lm"]), write_arpa(env["strong_lm"]))
        h["graph"] = _digest(env["graph"].text)
        h["denominator"] = _digest(env["den"].fst.arcs, env["den"].initial.tobytes())
        report.graph_stages = env["graph"].stages

    with _stage(report, "seed-training"):
        model, curve, sup_examples, _ = run.cached("seed", run.train_seed)
        h["seed-model"] = _digest(am.save_model(model))
    seed_it = IterationReport("seed", am.num_params(model), objective=curve,
                              supervised_utterances=len(sup_examples))
    report.iterations.append(seed_it)
    with _stage(report, "seed-evaluation"):
        seed_it.wer, seed_it.rtf, h["seed-eval"] = run.cached("seed-eval",
                                                             lambda: run.evaluate(model))

    pool = corpus.subset(UNSUPERVISED)
    policy = SelectionPolicy(cfg.selection.min_confidence, cfg.selection.max_perplexity,
                             cfg.selection.min_lead_silence, cfg.selection.min_trail_silence)
    for k in range(1, cfg.run.iterations + 1):
        it = IterationReport(f"iter{k}", am.num_params(model))
        report.iterations.append(it)
        with _stage(report, f"decode-{k}"):
            if k == 1:
                results, failures = run.cached("decode-1", lambda: run.decode_all(model, pool))
            else:
                results, failures = run.decode_all(model, pool)
            it.decoded, it.decode_failures = len(results), failures
            h[f"decode-{k}"] = _digest(*(write_lattice(r.lattice) for r in results))
        with _stage(report, f"select-{k}"):
            selected, rejected = select_utterances(results, env["strong_lm"], policy, pool)
            it.selected = len(selected)
            it.rejected = {r: n for r, n in sorted(Counter(x for _, x in rejected).items())}
            h[f"select-{k}"] = _digest(*(d.utt_id for d in selected))
        with _stage(report, f"supervision-{k}"):
            sups, excluded = run.supervise(selected)
            it.excluded = dict(sorted(excluded.items()))
            # the mode label is provenance only; the hash covers the graphs
            h[f"supervision-{k}"] = _digest(*(
                f"{u} {sups[u].num_frames} {sups[u].tolerance}\n{write_fst(sups[u].fst)}"
                for u in sorted(sups)))
            inputs = {u: run.inputs(model, u) for u in sups}
            examples = sup_examples + run.examples(sups, inputs)
            it.supervised_utterances = len(examples)
        with _stage(report, f"training-{k}"):
            model, curve = train_lfmmi(model, examples, env["den"], cfg.training,
                                       cfg.training.epochs, cfg.run.seed + 1000 * k)
            it.objective = tuple(curve)
            h[f"model-{k}"] = _digest(am.save_model(model))
        with _stage(report, f"evaluation-{k}"):
            it.wer, it.rtf, h[f"eval-{k}"] = run.evaluate(model)
    report.model = model
    return report
