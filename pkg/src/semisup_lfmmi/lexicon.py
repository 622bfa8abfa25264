"""Pronunciation lexicon, lexicon transducer and decoding graph."""
import hashlib
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .automata import (
    TROPICAL, Arc, SymbolTable, WeightedFst, compose, connect, merge_duplicate_arcs,
    relabel, remove_epsilon, write_fst,
)
from .errors import DegenerateGraphError, ParseError

log = logging.getLogger(__name__)

DEFAULT_SILENCE = "sil"


@dataclass(frozen=True, eq=False)
class Lexicon:
    """word -> ((phones, prob), ...), with word-boundary silence probabilities."""

    entries: dict
    phones: SymbolTable
    silence_phone: str = DEFAULT_SILENCE
    sil_prob: float = 0.5
    word_sil_probs: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.sil_prob < 1.0:
            raise ParseError(f"silence probability {self.sil_prob} not in [0, 1)")
        if self.silence_phone not in self.phones:
            raise ParseError(f"silence phone {self.silence_phone!r} not in phone table")
        for word, prons in self.entries.items():
            total = sum(p for _, p in prons)
            if abs(total - 1.0) > 1e-6:
                raise ParseError(f"pronunciation probabilities of {word!r} sum to {total}")
            for phones, _ in prons:
                for ph in phones:
                    if ph not in self.phones:
                        raise ParseError(f"unknown phone {ph!r} in {word!r}")

    @property
    def words(self):
        return tuple(self.entries)

    def silence_prob(self, word):
        return self.word_sil_probs.get(word, self.sil_prob)

    def best_pronunciation(self, word):
        """Highest-probability pronunciation (first listed wins ties)."""
        return max(self.entries[word], key=lambda e: e[1])[0]

    def word_symbols(self, extra=()):
        return SymbolTable(list(self.entries) + [w for w in extra if w not in self.entries])


def load_lexicon(text, phones, silence_phone=DEFAULT_SILENCE, sil_prob=0.5):
    """Parse ``word [prob] phone1 phone2 ...`` lines.

    Missing probabilities default to uniform over the word's pronunciations;
    explicit probabilities that do not sum to one are renormalized.
    """
    if not isinstance(phones, SymbolTable):
        phones = SymbolTable(phones)
    raw = defaultdict(list)
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        word, rest = fields[0], fields[1:]
        prob = None
        if rest:
            try:
                prob = float(rest[0])
                rest = rest[1:]
            except ValueError:
                pass
        if not rest:
            raise ParseError(f"line {lineno}: no phones for {word!r}")
        for ph in rest:
            if ph not in phones:
                raise ParseError(f"line {lineno}: unknown phone {ph!r}")
        pron = tuple(rest)
        if any(p == pron for p, _ in raw[word]):
            raise ParseError(f"line {lineno}: duplicate pronunciation for {word!r}")
        raw[word].append((pron, prob))
    if not raw:
        raise ParseError("lexicon has no entries")

    entries = {}
    for word, prons in raw.items():
        given = [p for _, p in prons]
        if all(p is None for p in given):
            entries[word] = tuple((ph, 1.0 / len(prons)) for ph, _ in prons)
            continue
        if any(p is None for p in given):
            raise ParseError(f"{word!r}: probabilities given for only some pronunciations")
        total = sum(given)
        if total <= 0:
            raise ParseError(f"{word!r}: probabilities sum to {total}")
        if abs(total - 1.0) > 1e-6:
            log.warning("renormalizing pronunciation probabilities of %r (sum %g)", word, total)
        entries[word] = tuple((ph, p / total) for ph, p in prons)
    return Lexicon(entries, phones, silence_phone, sil_prob)


def write_lexicon(lexicon):
    lines = []
    for word, prons in lexicon.entries.items():
        for phones, p in prons:
            lines.append(f"{word} {p:.9g} {' '.join(phones)}")
    return "\n".join(lines) + "\n"


def estimate_pron_probs(lexicon, alignments):
    """Re-estimate pronunciation and silence probabilities from alignments.

    Each alignment is a sequence of ``(word, phones)`` items, with
    ``word=None`` marking a silence segment.  Pronunciation probability is
    (count + 1) / (total + #prons); the silence probability of a word is
    (followed-by-silence + 1) / (occurrences + 2).  Words never aligned keep
    their prior probabilities.
    """
    pron_counts = defaultdict(Counter)
    occurrences = Counter()
    sil_after = Counter()
    for utt in alignments:
        items = list(utt)
        for i, (word, phones) in enumerate(items):
            if word is None:
                continue
            if word not in lexicon.entries:
                raise ParseError(f"aligned word {word!r} not in lexicon")
            pron_counts[word][tuple(phones)] += 1
            occurrences[word] += 1
            if i + 1 < len(items) and items[i + 1][0] is None:
                sil_after[word] += 1

    entries = dict(lexicon.entries)
    word_sil = dict(lexicon.word_sil_probs)
    for word, counts in pron_counts.items():
        prons = lexicon.entries[word]
        if len(prons) > 1:
            total = sum(counts.values())
            entries[word] = tuple((ph, (counts[ph] + 1.0) / (total + len(prons)))
                                  for ph, _ in prons)
        word_sil[word] = (sil_after[word] + 1.0) / (occurrences[word] + 2.0)
    return Lexicon(entries, lexicon.phones, lexicon.silence_phone,
                   lexicon.sil_prob, word_sil)


def _ln(p):
    return math.log(p)


def compile_L(lexicon, word_symbols=None):
    """Lexicon transducer mapping phones to words.

    Optional silence sits at word boundaries: before the first word with
    probability ``sil_prob`` and after each word with that word's silence
    probability.  Homophones get auxiliary ``#n`` input symbols; the decoding
    graph compiler strips them after composition.
    """
    words = word_symbols or lexicon.word_symbols()
    by_phones = defaultdict(list)
    for word, prons in lexicon.entries.items():
        for phones, _ in prons:
            by_phones[phones].append(word)
    aux_for = {}
    n_aux = 0
    for phones, ws in by_phones.items():
        if len(ws) > 1:
            for i, w in enumerate(ws):
                aux_for[(w, phones)] = i + 1
            n_aux = max(n_aux, len(ws))
    isyms = lexicon.phones.extended(*[f"#{i}" for i in range(1, n_aux + 1)])
    sil = isyms.id(lexicon.silence_phone)

    START, LOOP, SIL = 0, 1, 2
    arcs = []
    n_states = 3
    p0 = lexicon.sil_prob
    arcs.append(Arc(START, LOOP, 0, 0, _ln(1.0 - p0)))
    if p0 > 0:
        arcs.append(Arc(START, LOOP, sil, 0, _ln(p0)))
    arcs.append(Arc(SIL, LOOP, sil, 0, 0.0))

    for word, prons in lexicon.entries.items():
        wid = words.get(word)
        if wid is None:
            continue
        s_w = lexicon.silence_prob(word)
        for phones, prob in prons:
            if prob <= 0:
                continue
            src = LOOP
            labels = [isyms.id(ph) for ph in phones]
            aux = aux_for.get((word, phones))
            if aux is not None:
                labels.append(isyms.id(f"#{aux}"))
            for i, lab in enumerate(labels):
                dst = n_states
                n_states += 1
                arcs.append(Arc(src, dst, lab, wid if i == 0 else 0,
                                _ln(prob) if i == 0 else 0.0))
                src = dst
            arcs.append(Arc(src, LOOP, 0, 0, _ln(1.0 - s_w)))
            if s_w > 0:
                arcs.append(Arc(src, SIL, 0, 0, _ln(s_w)))
    return WeightedFst(n_states, START, arcs, {LOOP: 0.0}, isyms, words)


def fst_hash(fst):
    return hashlib.sha256(write_fst(fst).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class DecodingGraph:
    fst: WeightedFst
    stages: tuple  # (name, num_states, num_arcs) after each compilation step
    lexicon_hash: str
    lm_hash: str

    @property
    def state_count(self):
        return self.fst.num_states

    @property
    def arc_count(self):
        return self.fst.num_arcs

    @property
    def text(self):
        return write_fst(self.fst)

    @property
    def byte_size(self):
        return len(self.text.encode())

    def metadata(self):
        return {"state_count": self.state_count, "arc_count": self.arc_count,
                "bytes": self.byte_size, "lexicon_hash": self.lexicon_hash,
                "lm_hash": self.lm_hash}

    def sidecar(self):
        return "".join(f"{k}={v}\n" for k, v in self.metadata().items())


def build_decoding_graph(l, g):
    """compose(L, G), strip auxiliary symbols, remove epsilons, trim and
    merge duplicate arcs.

    Everything runs in the tropical semiring: summing an explicit n-gram arc
    with the parallel back-off path would overstate the LM score, while the
    max keeps the exact one (and matches Viterbi decoding).
    """
    stages = []
    lg = compose(l, g, TROPICAL)
    stages.append(("composed", lg.num_states, lg.num_arcs))
    if lg.is_empty:
        raise DegenerateGraphError("lexicon and grammar have no common word sequence")
    aux = {l.isymbols.id(s): 0 for s in l.isymbols.symbols if s.startswith("#")}
    lg = relabel(lg, ilabel_map=aux)
    lg = remove_epsilon(lg, TROPICAL)
    stages.append(("epsilon-removed", lg.num_states, lg.num_arcs))
    lg = connect(lg)
    stages.append(("trimmed", lg.num_states, lg.num_arcs))
    lg = merge_duplicate_arcs(lg, TROPICAL)
    stages.append(("merged", lg.num_states, lg.num_arcs))
    if lg.is_empty or not any(a.olabel for a in lg.arcs):
        raise DegenerateGraphError("decoding graph accepts no word sequence")
    # Input symbols without the auxiliary labels.
    phones = SymbolTable([s for s in l.isymbols.symbols if not s.startswith("#")])
    lg = lg.replace(isymbols=phones)
    return DecodingGraph(lg, tuple(stages), fst_hash(l), fst_hash(g))
