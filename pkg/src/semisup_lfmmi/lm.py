"""Back-off n-gram language models.

Interpolated Kneser-Ney with one discount per order, perplexity scoring,
ARPA I/O and compilation to a back-off grammar acceptor.
"""
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .automata import Arc, SymbolTable, WeightedFst
from .errors import ConfigurationError, ParseError

log = logging.getLogger(__name__)

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
LOG10 = math.log(10.0)
ARPA_ZERO = -99.0


def read_corpus(text):
    """One sentence per line, whitespace tokenized; blank lines skipped."""
    return [line.split() for line in text.splitlines() if line.split()]


@dataclass(frozen=True, eq=False)
class NgramModel:
    order: int
    vocab: tuple
    # ngram tuple -> log10 probability; context tuple -> log10 back-off weight
    probs: dict
    bows: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.order <= 4:
            raise ConfigurationError(f"order must be 1..4, got {self.order}")
        object.__setattr__(self, "_vocab_set", frozenset(self.vocab))

    @classmethod
    def uniform(cls, tokens):
        """Order-1 model with equal probability on every token in ``tokens``
        (include ``</s>`` among them to make it a sentence model)."""
        tokens = list(tokens)
        lp = -math.log10(len(tokens))
        vocab = (BOS,) + tuple(tokens)
        return cls(1, vocab, {(t,): lp for t in tokens})

    @property
    def outcomes(self):
        """Tokens that can be predicted (vocabulary minus ``<s>``)."""
        return tuple(w for w in self.vocab if w != BOS)

    def map_token(self, token):
        return token if token in self._vocab_set else UNK

    def log10prob(self, word, context=()):
        word = self.map_token(word)
        ctx = tuple(self.map_token(t) for t in context)[-(self.order - 1):] if self.order > 1 else ()
        acc = 0.0
        while True:
            lp = self.probs.get(ctx + (word,))
            if lp is not None:
                return acc + lp
            if not ctx:
                return float("-inf")
            acc += self.bows.get(ctx, 0.0)
            ctx = ctx[1:]

    def logprob(self, word, context=()):
        """Natural-log conditional probability."""
        return self.log10prob(word, context) * LOG10

    def prob(self, word, context=()):
        return 10.0 ** self.log10prob(word, context)

    def sentence_logprob(self, tokens):
        """Natural-log probability of a sentence including the end event."""
        hist = [BOS]
        total = 0.0
        for w in list(tokens) + [EOS]:
            total += self.logprob(w, hist)
            hist.append(w)
        return total

    def contexts(self):
        """Histories that have explicit continuations (the grammar states)."""
        ctxs = {()}
        ctxs.update(g[:-1] for g in self.probs if len(g) > 1)
        return ctxs


def perplexity(model, sentence):
    """exp of the mean negative log-probability, counting ``</s>``."""
    sentence = list(sentence)
    if not sentence:
        raise ConfigurationError("perplexity of an empty sentence")
    return math.exp(-model.sentence_logprob(sentence) / (len(sentence) + 1))


def _padded(sentence):
    return [BOS] + list(sentence) + [EOS]


def _raw_counts(corpus, order):
    counts = [None] + [Counter() for _ in range(order)]
    for sent in corpus:
        toks = _padded(sent)
        for i in range(1, len(toks)):
            for n in range(1, min(order, i + 1) + 1):
                counts[n][tuple(toks[i - n + 1:i + 1])] += 1
    return counts


def _kn_counts(raw, order):
    """Counts used at each order: raw at the top order and for n-grams that
    begin with ``<s>``; continuation (distinct left-extension) counts else."""
    used = [None] * (order + 1)
    used[order] = Counter(raw[order])
    for n in range(order - 1, 0, -1):
        cont = Counter()
        for g in raw[n + 1]:
            cont[g[1:]] += 1
        c = Counter()
        for g, rc in raw[n].items():
            c[g] = rc if g[0] == BOS else cont[g]
        used[n] = c
    return used


def _discount(counts):
    n1 = sum(1 for c in counts.values() if c == 1)
    n2 = sum(1 for c in counts.values() if c == 2)
    if n1 == 0 or n2 == 0:
        return None
    return n1 / (n1 + 2.0 * n2)


def train_ngram(corpus, order, smoothing="kneser-ney", k=0.5, vocab=None):
    """Estimate a back-off model.

    ``smoothing`` is ``"kneser-ney"`` (interpolated, discount
    n1/(n1+2*n2) per order, add-k at orders lacking count diversity) or
    ``"add-k"`` at every order.
    """
    corpus = [list(s) for s in corpus if len(s)]
    if not corpus:
        raise ConfigurationError("empty corpus")
    if not 1 <= order <= 4:
        raise ConfigurationError(f"order must be 1..4, got {order}")
    if smoothing not in ("kneser-ney", "add-k"):
        raise ConfigurationError(f"unknown smoothing {smoothing!r}")

    words = set(vocab or ())
    for s in corpus:
        words.update(s)
    words -= {BOS, EOS, UNK}
    full_vocab = (BOS, EOS, UNK) + tuple(sorted(words))
    outcomes = full_vocab[1:]
    V = len(outcomes)

    raw = _raw_counts(corpus, order)
    used = _kn_counts(raw, order) if smoothing == "kneser-ney" else raw

    probs_lin = {}
    bows_lin = {}
    # Explicit n-gram (h, w) implies (h[1:], w) is explicit one order down,
    # so the interpolation target is always a direct table lookup.
    lower = {(): {w: 1.0 / V for w in outcomes}}
    for n in range(1, order + 1):
        counts = used[n]
        by_ctx = defaultdict(dict)
        for g, c in counts.items():
            by_ctx[g[:-1]][g[-1]] = c
        if n == 1:
            # every outcome has an explicit unigram, observed or not
            for w in outcomes:
                by_ctx[()].setdefault(w, 0)
        D = _discount(counts) if smoothing == "kneser-ney" else None
        if smoothing == "kneser-ney" and D is None:
            log.warning("order %d lacks count diversity; using add-%g", n, k)
        cur = {}
        for h, cont in by_ctx.items():
            denom = float(sum(cont.values()))
            lower_ctx = h[1:]
            if D is None:
                dist = {w: (cont.get(w, 0) + k) / (denom + k * V) for w in outcomes}
                cur[h] = dist
                bows_lin[h] = 0.0
            else:
                gamma = D * sum(1 for c in cont.values() if c > 0) / denom
                low = lower[lower_ctx]
                dist = {w: max(c - D, 0.0) / denom + gamma * low[w] for w, c in cont.items()}
                cur[h] = dist
                bows_lin[h] = gamma
        for h, dist in cur.items():
            for w, p in dist.items():
                probs_lin[h + (w,)] = p
        lower = cur

    probs = {g: (math.log10(p) if p > 0 else float("-inf")) for g, p in probs_lin.items()}
    if order > 1 and (BOS,) not in probs:
        probs[(BOS,)] = float("-inf")
    bows = {}
    for h, g in bows_lin.items():
        if h == () or g == 1.0:
            continue
        bows[h] = math.log10(g) if g > 0 else float("-inf")
    return NgramModel(order, full_vocab, probs, bows)


# -- ARPA ------------------------------------------------------------------------


def _fmt(x):
    if x == float("-inf"):
        return f"{ARPA_ZERO:.1f}"
    return f"{x:.10g}"


def write_arpa(model):
    by_order = defaultdict(list)
    for g in model.probs:
        by_order[len(g)].append(g)
    lines = ["", "\\data\\"]
    for n in range(1, model.order + 1):
        lines.append(f"ngram {n}={len(by_order[n])}")
    for n in range(1, model.order + 1):
        lines += ["", f"\\{n}-grams:"]
        for g in sorted(by_order[n]):
            row = [_fmt(model.probs[g]), " ".join(g)]
            if g in model.bows:
                row.append(_fmt(model.bows[g]))
            lines.append("\t".join(row))
    lines += ["", "\\end\\", ""]
    return "\n".join(lines)


def read_arpa(text):
    probs, bows = {}, {}
    order = 0
    section = None
    vocab = []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s == "\\data\\":
            section = "data"
            continue
        if s == "\\end\\":
            break
        if s.startswith("\\") and s.endswith("-grams:"):
            section = int(s[1:s.index("-")])
            order = max(order, section)
            continue
        if section == "data":
            if s.startswith("ngram"):
                continue
            raise ParseError(f"line {lineno}: unexpected {s!r} in data section")
        if not isinstance(section, int):
            raise ParseError(f"line {lineno}: n-gram outside a section")
        parts = s.split()
        n = section
        if len(parts) not in (n + 1, n + 2):
            raise ParseError(f"line {lineno}: expected {n} tokens")
        try:
            lp = float(parts[0])
            g = tuple(parts[1:n + 1])
            probs[g] = float("-inf") if lp <= ARPA_ZERO else lp
            if len(parts) == n + 2:
                bw = float(parts[-1])
                bows[g] = float("-inf") if bw <= ARPA_ZERO else bw
        except ValueError as e:
            raise ParseError(f"line {lineno}: {e}") from None
        if n == 1:
            vocab.append(g[0])
    if order == 0:
        raise ParseError("no n-gram sections")
    specials = [t for t in (BOS, EOS, UNK)]
    rest = sorted(set(vocab) - set(specials))
    return NgramModel(order, tuple(specials) + tuple(rest), probs, bows)


# -- grammar compilation ---------------------------------------------------------------


def grammar_symbols(model):
    return SymbolTable([w for w in model.vocab if w not in (BOS, EOS)])


def compile_grammar(model, symbols=None):
    """Back-off grammar acceptor over the model's words.

    One state per context, word arcs with weight ln p, epsilon back-off arcs
    with weight ln(bow).  Sentence boundaries are implicit: the start state
    is the ``<s>`` context and final weights carry ln p(</s> | context).
    Words absent from ``symbols`` are dropped.
    """
    symbols = symbols or grammar_symbols(model)
    ctxs = model.contexts()
    if (BOS,) in ctxs:
        start_ctx = (BOS,)
    else:
        start_ctx = ()
    ordered = sorted(ctxs, key=lambda c: (len(c), c))
    sid = {c: i for i, c in enumerate(ordered)}

    def state_for(seq):
        seq = tuple(seq)[-(model.order - 1):] if model.order > 1 else ()
        while seq not in sid:
            seq = seq[1:]
        return sid[seq]

    arcs, finals = [], {}
    for g in sorted(model.probs, key=lambda g: (len(g), g)):
        lp = model.probs[g]
        if lp == float("-inf"):
            continue
        h, w = g[:-1], g[-1]
        if h not in sid or w == BOS:
            continue
        if w == EOS:
            finals[sid[h]] = lp * LOG10
            continue
        lab = symbols.get(w)
        if lab is None:
            continue
        arcs.append(Arc(sid[h], state_for(h + (w,)), lab, lab, lp * LOG10))
    for h in ordered:
        if not h:
            continue
        bw = model.bows.get(h, 0.0)
        if bw == float("-inf"):
            continue
        arcs.append(Arc(sid[h], state_for(h[1:]), 0, 0, bw * LOG10))
    arcs.sort(key=lambda a: (a.src, a.ilabel == 0, a.ilabel, a.dst))
    return WeightedFst(len(ordered), sid[start_ctx], arcs, finals, symbols)
