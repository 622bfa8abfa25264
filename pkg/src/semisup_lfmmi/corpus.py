"""Synthetic two-channel corpus with known phone alignments.

Transcripts come from a sparse random bigram over the vocabulary.  Every
input frame of phone p is ``mean[p] + noise * N(0, I)`` in 40 dimensions;
the caller channel is noisier than the agent channel.  A constant
per-speaker vector is appended at model-input time.
"""
import hashlib
import itertools
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .automata import SymbolTable, read_symbols, write_symbols
from .config import CorpusSettings
from .decoder import INPUT_FRAME_SECONDS
from .errors import ConfigurationError, ParseError
from .lexicon import DEFAULT_SILENCE, load_lexicon, write_lexicon

SUPERVISED, UNSUPERVISED, HELDOUT = "supervised", "unsupervised", "heldout"


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    channel: str
    speaker: str
    audio_seconds: float
    lead_silence: float
    trail_silence: float
    status: str  # supervised / unsupervised / heldout
    words: tuple  # hidden truth for unsupervised and held-out utterances

    def __post_init__(self):
        if self.audio_seconds <= 0:
            raise ConfigurationError(f"{self.utt_id}: audio must be non-empty")
        if self.lead_silence < 0 or self.trail_silence < 0:
            raise ConfigurationError(f"{self.utt_id}: negative silence margin")


@dataclass(frozen=True, eq=False)
class SyntheticCorpus:
    phones: SymbolTable
    lexicon: object
    records: tuple
    features: dict  # utt -> float32 (T_in, feature_dim)
    speaker_vectors: dict  # speaker -> float32 (speaker_dim,)
    alignments: dict  # utt -> [(phone, start, end)] in input frames
    phone_means: np.ndarray  # (num phones incl. silence, feature_dim)
    lm_text: tuple  # extra sentences from the generator

    def subset(self, status):
        return [r for r in self.records if r.status == status]

    def model_input(self, utt_id, record=None):
        rec = record or self.record(utt_id)
        x = self.features[utt_id]
        spk = self.speaker_vectors[rec.speaker]
        return np.concatenate([x, np.broadcast_to(spk, (len(x), len(spk)))], axis=1).astype(float)

    def record(self, utt_id):
        return self._by_id[utt_id]

    @cached_property
    def _by_id(self):
        return {r.utt_id: r for r in self.records}

    def digest(self):
        h = hashlib.sha256()
        for r in self.records:
            h.update(repr(r).encode())
            h.update(np.ascontiguousarray(self.features[r.utt_id]).tobytes())
        for s in sorted(self.speaker_vectors):
            h.update(self.speaker_vectors[s].tobytes())
        return h.hexdigest()[:16]


def _prons(rng, s, phone_names):
    capacity = sum(s.phones ** n for n in range(s.min_pron, s.max_pron + 1))
    if s.vocab > capacity:
        raise ConfigurationError(
            f"{s.vocab} words cannot have distinct pronunciations of {s.min_pron}-{s.max_pron} "
            f"phones over {s.phones} phones")
    seen, out = set(), []
    while len(out) < s.vocab:
        n = int(rng.integers(s.min_pron, s.max_pron + 1))
        pr = tuple(phone_names[int(i)] for i in rng.integers(0, s.phones, size=n))
        if pr not in seen:
            seen.add(pr)
            out.append(pr)
    return out


def _duration(rng, s):
    extra = s.mean_phone_frames - s.min_phone_frames
    if extra <= 0:
        return s.min_phone_frames
    return s.min_phone_frames + int(rng.geometric(1.0 / (1.0 + extra))) - 1


def generate_synthetic_corpus(settings=None, seed=0):
    s = settings or CorpusSettings()
    if s.min_pron < 1 or s.max_pron < s.min_pron or s.min_words < 1 or s.max_words < s.min_words:
        raise ConfigurationError("bad pronunciation or sentence length bounds")
    if s.min_phone_frames < 1 or s.successors < 1:
        raise ConfigurationError("bad duration or bigram settings")
    rng = np.random.default_rng(seed)
    phone_names = [f"p{i}" for i in range(s.phones)]
    phones = SymbolTable([DEFAULT_SILENCE] + phone_names)
    words = [f"w{i:02d}" for i in range(s.vocab)]
    prons = _prons(rng, s, phone_names)
    lexicon = load_lexicon("".join(f"{w} {' '.join(p)}\n" for w, p in zip(words, prons)),
                           phones, sil_prob=0.5)
    # sparse generator bigram
    succ = np.stack([rng.permutation(s.vocab)[:s.successors] for _ in range(s.vocab)])
    succ_p = rng.dirichlet(np.ones(s.successors), size=s.vocab)
    first_p = rng.dirichlet(np.ones(s.vocab))

    def sentence():
        n = int(rng.integers(s.min_words, s.max_words + 1))
        w = int(rng.choice(s.vocab, p=first_p))
        out = [w]
        for _ in range(n - 1):
            w = int(succ[w][rng.choice(s.successors, p=succ_p[w])])
            out.append(w)
        return tuple(words[i] for i in out)

    means = rng.normal(0.0, s.mean_spread, size=(len(phones) - 1, s.feature_dim))
    speakers = {}
    for ch in ("agent", "caller"):
        for k in range(s.speakers):
            speakers[f"{ch}{k:02d}"] = rng.normal(size=s.speaker_dim).astype(np.float32)
    noise = {"agent": s.agent_noise, "caller": s.caller_noise}

    records, feats, aligns = [], {}, {}
    plan = [(SUPERVISED, "sup", s.supervised), (UNSUPERVISED, "uns", s.unsupervised),
            (HELDOUT, "dev", s.heldout)]
    for status, prefix, count in plan:
        for i in range(count):
            utt = f"{prefix}{i:05d}"
            channel = "caller" if rng.random() < s.caller_fraction else "agent"
            speaker = f"{channel}{int(rng.integers(s.speakers)):02d}"
            text = sentence()
            segs = []  # (phone, frames)

            def margin():
                n = int(rng.integers(0, s.max_margin_frames + 1))
                return 0 if n == 0 else max(n, s.min_phone_frames)

            lead, trail = margin(), margin()
            if lead:
                segs.append((DEFAULT_SILENCE, lead))
            for k, w in enumerate(text):
                if k and rng.random() < s.inter_word_silence:
                    segs.append((DEFAULT_SILENCE, _duration(rng, s)))
                for p in lexicon.entries[w][0][0]:
                    segs.append((p, _duration(rng, s)))
            if trail:
                segs.append((DEFAULT_SILENCE, trail))
            ali, t = [], 0
            for p, n in segs:
                ali.append((p, t, t + n))
                t += n
            labels = np.concatenate([np.full(n, phones.id(p) - 1) for p, n in segs])
            x = means[labels] + noise[channel] * rng.normal(size=(t, s.feature_dim))
            feats[utt] = x.astype(np.float32)
            aligns[utt] = ali
            records.append(UtteranceRecord(utt, channel, speaker, t * INPUT_FRAME_SECONDS,
                                           lead * INPUT_FRAME_SECONDS,
                                           trail * INPUT_FRAME_SECONDS, status, text))
    lm_text = tuple(sentence() for _ in range(s.lm_text_sentences))
    return SyntheticCorpus(phones, lexicon, tuple(records), feats, speakers, aligns,
                           means, lm_text)


def frame_labels(alignment):
    """Per-input-frame phone names from ``[(phone, start, end)]``."""
    return list(itertools.chain.from_iterable([p] * (e - s) for p, s, e in alignment))


def oracle_frame_accuracy(corpus, utt_ids):
    """Fraction of frames whose nearest phone mean (the maximum-likelihood
    label under equal-variance Gaussians) is the true phone."""
    names = corpus.phones.symbols[1:]
    hit = total = 0
    for u in utt_ids:
        x = corpus.features[u].astype(float)
        d = ((x[:, None, :] - corpus.phone_means[None]) ** 2).sum(axis=2)
        guess = d.argmin(axis=1)
        truth = np.array([names.index(p) for p in frame_labels(corpus.alignments[u])])
        hit += int((guess == truth).sum())
        total += len(truth)
    return hit / total


# -- on disk --------------------------------------------------------------------------------------

CORPUS_FILES = ("phones.txt", "lexicon.txt", "utterances.tsv", "alignments.txt", "features.npz",
                "speakers.npz", "phone_means.npy", "lm_text.txt")


def save_corpus(corpus, directory):
    """Write the corpus as plain files; returns the written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "phones.txt").write_text(write_symbols(corpus.phones))
    (d / "lexicon.txt").write_text(write_lexicon(corpus.lexicon))
    rows = [f"{r.utt_id}\t{r.status}\t{r.channel}\t{r.speaker}\t{r.audio_seconds!r}\t"
            f"{r.lead_silence!r}\t{r.trail_silence!r}\t{' '.join(r.words)}\n"
            for r in corpus.records]
    (d / "utterances.tsv").write_text("".join(rows))
    (d / "alignments.txt").write_text("".join(
        r.utt_id + " " + " ".join(f"{p}:{s}:{e}" for p, s, e in corpus.alignments[r.utt_id])
        + "\n" for r in corpus.records))
    with open(d / "features.npz", "wb") as f:
        np.savez(f, **corpus.features)
    with open(d / "speakers.npz", "wb") as f:
        np.savez(f, **corpus.speaker_vectors)
    np.save(d / "phone_means.npy", corpus.phone_means)
    (d / "lm_text.txt").write_text("".join(" ".join(s) + "\n" for s in corpus.lm_text))
    return [d / name for name in CORPUS_FILES]


def load_corpus(directory):
    d = Path(directory)
    phones = read_symbols((d / "phones.txt").read_text())
    lexicon = load_lexicon((d / "lexicon.txt").read_text(), phones, sil_prob=0.5)
    records = []
    for n, line in enumerate((d / "utterances.tsv").read_text().splitlines(), 1):
        f = line.split("\t")
        if len(f) != 8:
            raise ParseError(f"utterances.tsv line {n}: expected 8 tab-separated fields")
        try:
            records.append(UtteranceRecord(f[0], f[2], f[3], float(f[4]), float(f[5]),
                                           float(f[6]), f[1], tuple(f[7].split())))
        except ValueError as e:
            raise ParseError(f"utterances.tsv line {n}: {e}") from None
    alignments = {}
    for n, line in enumerate((d / "alignments.txt").read_text().splitlines(), 1):
        utt, *segs = line.split()
        try:
            alignments[utt] = [(p, int(s), int(e)) for p, s, e in (x.split(":") for x in segs)]
        except ValueError:
            raise ParseError(f"alignments.txt line {n}: expected phone:start:end items") from None
    with np.load(d / "features.npz") as z:
        features = {k: z[k] for k in z.files}
    with np.load(d / "speakers.npz") as z:
        speakers = {k: z[k] for k in z.files}
    means = np.load(d / "phone_means.npy")
    lm_text = tuple(tuple(line.split()) for line in (d / "lm_text.txt").read_text().splitlines())
    missing = [r.utt_id for r in records if r.utt_id not in features or r.utt_id not in alignments]
    if missing:
        raise ParseError(f"no features or alignment for {missing[:3]}")
    return SyntheticCorpus(phones, lexicon, tuple(records), features, speakers, alignments,
                           means, lm_text)
