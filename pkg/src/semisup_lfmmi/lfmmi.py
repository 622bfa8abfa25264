"""Lattice-free MMI supervision, objective and gradient.

Pdfs are phones: pdf index = phone id - 1.  A numerator is a layered
acceptor over output frames (arc tag = frame index) listing the allowed
phone labelings of an utterance; a denominator is a phone n-gram
acceptor shared by all utterances.  Both are expanded against the network
outputs with phone self-loops, so a phone may span any number of frames.

Numerator paths are weighted with the denominator's own transition
weights, which keeps every numerator labeling's score at most its
denominator score and the objective at most zero.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from .automata import (
    Arc, SymbolTable, WeightedFst, connect, prune, read_fst, shortest_path, write_fst,
)
from .automata.io import format_cost, parse_cost
from .decoder import Lattice, rescore
from .errors import (
    ConfigurationError, ContractError, DegenerateGraphError, EmptySupervisionError,
    InconsistentSupervisionError, MalformedAlignmentError, ParseError, SupervisionTooLargeError,
)
from .lm import BOS, EOS, UNK

log = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 5
DEFAULT_CHUNK = 150
MAX_NUMERATOR_STATES = 50000
TRANSCRIPT_MODE = "transcript-1best"
LATTICE_MODE = "full-lattice"


# -- denominator ------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DenominatorGraph:
    fst: WeightedFst
    initial: np.ndarray  # occupancy over fst states
    phones: SymbolTable

    @cached_property
    def expansion(self):
        return _FrameExpansion(self)

    @property
    def num_pdfs(self):
        return len(self.phones) - 1


class _FrameExpansion:
    """Pair states (arrival state, phone) with self-loops, in probability
    space: ``init`` (N,), ``trans`` (N x N, csr) and ``pdf`` (N,)."""

    def __init__(self, den):
        fst = den.fst
        pairs = sorted({(a.dst, a.ilabel) for a in fst.arcs})
        pid = {p: i for i, p in enumerate(pairs)}
        self.n = len(pairs)
        self.pdf = np.array([lab - 1 for _, lab in pairs], dtype=np.int64)
        init = np.zeros(self.n)
        rows, cols, vals = [], [], []
        by_src = {}
        for a in fst.arcs:
            by_src.setdefault(a.src, []).append(a)
            init[pid[(a.dst, a.ilabel)]] += den.initial[a.src] * math.exp(a.weight)
        for (d, lab), i in pid.items():
            rows.append(i)
            cols.append(i)
            vals.append(1.0)
            for a in by_src.get(d, ()):
                rows.append(i)
                cols.append(pid[(a.dst, a.ilabel)])
                vals.append(math.exp(a.weight))
        self.init = init
        self.trans = sparse.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))
        self.trans.sum_duplicates()
        self.trans_t = self.trans.T.tocsr()


def build_denominator(phone_lm, phones):
    """Deterministic phone acceptor computing the model's probabilities exactly.

    Back-off is resolved with failure semantics: a phone without an explicit
    n-gram in a context is reached through back-off, and only then.  Every
    state is final.  Initial occupancy is 100 power-iteration steps of the
    row-normalized transition matrix from the start state.
    """
    if not isinstance(phones, SymbolTable):
        phones = SymbolTable(phones)
    if phone_lm.order > 4:
        raise ConfigurationError("phone LM order must be <= 4")
    labels = [p for p in phones.symbols[1:] if p not in (BOS, EOS, UNK)]
    if not labels:
        raise DegenerateGraphError("no phones")
    n = phone_lm.order - 1
    ctxs = phone_lm.contexts()
    start = (BOS,) if (BOS,) in ctxs else ()

    def state_for(seq):
        seq = tuple(seq)[-n:] if n else ()
        while seq not in ctxs:
            seq = seq[1:]
        return seq

    sid = {start: 0}
    queue = deque([start])
    arcs = []
    while queue:
        ctx = queue.popleft()
        for p in labels:
            lp = phone_lm.logprob(p, ctx)
            if lp == -math.inf:
                continue
            nxt = state_for(ctx + (p,))
            if nxt not in sid:
                sid[nxt] = len(sid)
                queue.append(nxt)
            arcs.append(Arc(sid[ctx], sid[nxt], phones.id(p), phones.id(p), lp))
    if not arcs:
        raise DegenerateGraphError("phone LM assigns zero probability to every phone")
    fst = WeightedFst(len(sid), 0, arcs, {q: 0.0 for q in range(len(sid))}, phones)
    fst = connect(fst)
    missing = set(range(1, len(phones))) - {a.ilabel for a in fst.arcs}
    if missing:
        raise DegenerateGraphError(f"phones unreachable in denominator: {sorted(missing)}")
    S = fst.num_states
    P = np.zeros((S, S))
    for a in fst.arcs:
        P[a.src, a.dst] += math.exp(a.weight)
    P /= P.sum(axis=1, keepdims=True)
    pi = np.zeros(S)
    pi[fst.start] = 1.0
    for _ in range(100):
        pi = pi @ P
    return DenominatorGraph(fst, pi, phones)


# -- numerator construction ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NumeratorSupervision:
    utt_id: str
    fst: WeightedFst  # layered acceptor; arc tag = frame index
    num_frames: int
    tolerance: int
    mode: str

    def labelings(self, limit=100000):
        from .automata import enumerate_paths
        return [tuple(l - 1 for l in p.ilabels) for p in enumerate_paths(self.fst, limit)]


@dataclass(frozen=True, eq=False)
class NumeratorChunk:
    fst: WeightedFst
    length: int
    utt_id: str
    offset: int

    @cached_property
    def layers(self):
        """Per frame: (src local index, dst local index, pdf) arrays and the
        number of states in every layer."""
        layer_of = {self.fst.start: 0}
        for a in sorted(self.fst.arcs, key=lambda a: a.tag):
            layer_of.setdefault(a.dst, a.tag + 1)
        local, counts = {}, [0] * (self.length + 1)
        for q in sorted(layer_of):
            t = layer_of[q]
            local[q] = counts[t]
            counts[t] += 1
        per = [([], [], []) for _ in range(self.length)]
        for a in self.fst.arcs:
            s, d, p = per[a.tag]
            s.append(local[a.src])
            d.append(local[a.dst])
            p.append(a.ilabel - 1)
        frames = [tuple(np.array(x, dtype=np.int64) for x in f) for f in per]
        finals = np.zeros(counts[-1], dtype=bool)
        for q in self.fst.finals:
            if layer_of.get(q) == self.length:
                finals[local[q]] = True
        return frames, counts, finals


def _check_alignment(alignment):
    alignment = [(p, int(s), int(e)) for p, s, e in alignment]
    if not alignment:
        raise MalformedAlignmentError("empty alignment")
    if alignment[0][1] != 0:
        raise MalformedAlignmentError("alignment must start at frame 0")
    for (p, s, e), nxt in zip(alignment, alignment[1:] + [None]):
        if e <= s:
            raise MalformedAlignmentError(f"empty or reversed span for {p!r}: [{s},{e})")
        if nxt is not None and nxt[1] != e:
            kind = "gap" if nxt[1] > e else "overlap"
            raise MalformedAlignmentError(f"{kind} between frames {e} and {nxt[1]}")
    return alignment


def _matches_transcript(phones, words, lexicon):
    """Can the non-silence phones be split into pronunciations of words?"""
    seq = tuple(p for p in phones if p != lexicon.silence_phone)
    reach = {0}
    for w in words:
        if w not in lexicon.entries:
            return False
        reach = {i + len(pr) for i in reach for pr, _ in lexicon.entries[w]
                 if seq[i:i + len(pr)] == pr}
        if not reach:
            return False
    return len(seq) in reach


class _PhoneGraph:
    """DAG of phone occurrences with nominal start frames."""

    def __init__(self):
        self.arcs = []  # (src node, dst node, phone, nominal start)
        self.start = 0
        self.finals = set()


def _chain_graph(alignment):
    g = _PhoneGraph()
    for k, (p, s, _) in enumerate(alignment):
        g.arcs.append((k, k + 1, p, s))
    g.finals.add(len(alignment))
    return g


def _tolerance_nfa(graph, T, tau, phones):
    """Frame-layered NFA: state (t, phone occurrence), one label per frame.

    A boundary into occurrence e may fall at frame t iff t lies within
    ``tau`` of e's nominal start and inside [1, T-1].
    """
    out = {}
    for i, (u, _, _, _) in enumerate(graph.arcs):
        out.setdefault(u, []).append(i)
    # fwd[t]: occurrences active during frame t; trans[t-1]: moves into frame t
    fwd = [set(out.get(graph.start, ()))]
    trans = []
    for t in range(1, T):
        edges = []
        for e in sorted(fwd[-1]):
            edges.append((e, e))
            for e2 in out.get(graph.arcs[e][1], ()):
                if abs(t - graph.arcs[e2][3]) <= tau:
                    edges.append((e, e2))
        trans.append(edges)
        fwd.append({d for _, d in edges})
    alive = [None] * T
    alive[T - 1] = {e for e in fwd[T - 1] if graph.arcs[e][1] in graph.finals}
    for t in range(T - 2, -1, -1):
        alive[t] = {s for s, d in trans[t] if d in alive[t + 1]}
    nfa_states = {}

    def sid(t, e):
        key = (t, e)
        if key not in nfa_states:
            nfa_states[key] = len(nfa_states)
        return nfa_states[key]

    start = sid(-1, -1)
    arcs = []
    for e in sorted(alive[0]):
        arcs.append((start, sid(0, e), phones.id(graph.arcs[e][2]), 0))
    for t in range(1, T):
        for s, d in trans[t - 1]:
            if s in alive[t - 1] and d in alive[t]:
                arcs.append((sid(t - 1, s), sid(t, d), phones.id(graph.arcs[d][2]), t))
    finals = {sid(T - 1, e) for e in alive[T - 1]}
    return start, arcs, finals


def _determinize(start_set, arcs, finals, frame_offset=0, last_frame=None, max_states=None):
    """Subset construction over a layered acceptor; BFS numbering with
    labels in ascending order.  ``arcs`` are (src, dst, label, frame)."""
    out = {}
    for s, d, lab, t in arcs:
        if last_frame is not None and t >= last_frame:
            continue
        out.setdefault(s, []).append((lab, d, t))
    start = frozenset(start_set)
    sid = {start: 0}
    queue = deque([start])
    dfa_arcs, dfa_finals = [], {}
    while queue:
        subset = queue.popleft()
        q = sid[subset]
        if last_frame is None and subset & finals:
            dfa_finals[q] = 0.0
        moves = {}
        for s in subset:
            for lab, d, t in out.get(s, ()):
                moves.setdefault((lab, t), set()).add(d)
        if last_frame is not None and not moves:
            dfa_finals[q] = 0.0
        for (lab, t), targets in sorted(moves.items()):
            nxt = frozenset(targets)
            if nxt not in sid:
                if max_states is not None and len(sid) >= max_states:
                    raise SupervisionTooLargeError(
                        f"numerator needs more than {max_states} states")
                sid[nxt] = len(sid)
                queue.append(nxt)
            dfa_arcs.append((q, sid[nxt], lab, t - frame_offset))
    return len(sid), dfa_arcs, dfa_finals


def _supervision(graph, T, tau, phones, utt_id, mode, max_states=None):
    if T < 1:
        raise EmptySupervisionError("utterance has no frames")
    start, arcs, finals = _tolerance_nfa(graph, T, tau, phones)
    if not finals:
        raise EmptySupervisionError("no labeling satisfies the phone sequence in T frames")
    n, dfa_arcs, dfa_finals = _determinize({start}, arcs, finals, max_states=max_states)
    fst = WeightedFst(n, 0, [Arc(s, d, l, l, 0.0, t) for s, d, l, t in dfa_arcs],
                      dfa_finals, phones)
    return NumeratorSupervision(utt_id, connect(fst), T, tau, mode)


def numerator_from_transcript(transcript, lexicon, alignment, tau=DEFAULT_TOLERANCE,
                              utt_id=""):
    """Supervision from a phone alignment ``[(phone, start, end), ...]``.

    Each boundary may move up to ``tau`` frames either way, clipped to the
    utterance and keeping every phone at least one frame long.
    """
    if tau < 0:
        raise ConfigurationError("tolerance must be >= 0")
    alignment = _check_alignment(alignment)
    phones = [p for p, _, _ in alignment]
    for p in phones:
        if p not in lexicon.phones:
            raise MalformedAlignmentError(f"unknown phone {p!r}")
    if transcript is not None and not _matches_transcript(phones, transcript, lexicon):
        raise MalformedAlignmentError("alignment phones do not spell the transcript")
    T = alignment[-1][2]
    return _supervision(_chain_graph(alignment), T, tau, lexicon.phones, utt_id,
                        TRANSCRIPT_MODE)


def word_phones(lexicon, word, frames):
    """Most probable pronunciation that fits in ``frames`` (first listed
    wins ties); None if none fits."""
    fits = [(pr, p) for pr, p in lexicon.entries.get(word, ()) if len(pr) <= frames]
    if not fits:
        return None
    return max(fits, key=lambda e: e[1])[0]


def _arc_phone_spans(lexicon, lattice, arc):
    c_ac, c_lm, s, e = arc.tag
    if arc.olabel == 0:
        phones = (lexicon.silence_phone,)
    else:
        phones = word_phones(lexicon, lattice.words.symbol(arc.olabel), e - s)
        if phones is None:
            return None
    n = len(phones)
    return [(p, s + (j * (e - s)) // n, s + ((j + 1) * (e - s)) // n)
            for j, p in enumerate(phones)]


def lattice_path_alignment(lattice, arc_indices, lexicon):
    """Phone alignment of one lattice path by proportional subdivision."""
    out = []
    for i in arc_indices:
        spans = _arc_phone_spans(lexicon, lattice, lattice.fst.arcs[i])
        if spans is None:
            raise EmptySupervisionError("word arc too short for any pronunciation")
        out += spans
    return out


def _lattice_phone_graph(lattice, lexicon):
    fst = lattice.fst
    g = _PhoneGraph()
    g.start = ("s", fst.start)
    g.finals = {("s", q) for q in fst.finals}
    for i, a in enumerate(fst.arcs):
        spans = _arc_phone_spans(lexicon, lattice, a)
        if spans is None:
            continue
        nodes = [("s", a.src)] + [("a", i, j) for j in range(1, len(spans))] + [("s", a.dst)]
        for j, (p, s, _) in enumerate(spans):
            g.arcs.append((nodes[j], nodes[j + 1], p, s))
    return g


def _prune_or_best(fst, beam):
    """Beam pruning; beam 0 keeps exactly the path ``shortest_path`` picks,
    so exact score ties cannot let a second path through."""
    if beam != 0 or fst.is_empty:
        return prune(fst, beam)
    path = shortest_path(fst)
    keep = set(path.arcs)
    return connect(fst.replace(arcs=[a for i, a in enumerate(fst.arcs) if i in keep],
                               finals={path.final_state: fst.finals[path.final_state]}))


def numerator_from_lattice(lattice, strong_lm, lexicon, prune_beam, tau=DEFAULT_TOLERANCE,
                           old_lm=None, lm_scale=1.0, utt_id=None,
                           max_states=MAX_NUMERATOR_STATES):
    """Supervision accepting the tolerance-widened labelings of every lattice
    path that survives rescoring with ``strong_lm`` and pruning.

    Bushy lattices from a weak model can make the union explode; past
    ``max_states`` (None: no limit) SupervisionTooLargeError is raised.
    """
    if tau < 0:
        raise ConfigurationError("tolerance must be >= 0")
    lat = rescore(lattice, strong_lm, lm_scale, old_lm)
    lat = Lattice(_prune_or_best(lat.fst, prune_beam), lat.num_frames, lat.utt_id,
                  lat.frame_rate)
    if lat.fst.is_empty:
        raise EmptySupervisionError("pruning removed every lattice path")
    graph = _lattice_phone_graph(lat, lexicon)
    uid = lattice.utt_id if utt_id is None else utt_id
    return _supervision(graph, lattice.num_frames, tau, lexicon.phones, uid, LATTICE_MODE,
                        max_states)


def one_best_alignment(lattice, strong_lm, lexicon, old_lm=None, lm_scale=1.0):
    """(words, phone alignment) of the best path after rescoring."""
    lat = rescore(lattice, strong_lm, lm_scale, old_lm)
    path = shortest_path(lat.fst)
    return path.output_string(lat.words), lattice_path_alignment(lat, path.arcs, lexicon)


def split_chunks(sup, L=DEFAULT_CHUNK):
    """Fixed-length chunks of the supervision; a trailing partial chunk is
    dropped and an utterance shorter than ``L`` yields no chunks."""
    if L < 1:
        raise ConfigurationError("chunk length must be >= 1")
    T = sup.num_frames
    if T < L:
        log.info("utterance %s shorter than chunk length (%d < %d)", sup.utt_id, T, L)
        return []
    fst = sup.fst
    layer = {fst.start: 0}
    for a in sorted(fst.arcs, key=lambda a: a.tag):
        layer.setdefault(a.dst, a.tag + 1)
    arcs = [(a.src, a.dst, a.ilabel, a.tag) for a in fst.arcs]
    chunks = []
    for k in range(T // L):
        lo, hi = k * L, (k + 1) * L
        starts = {q for q, t in layer.items() if t == lo}
        sub = [x for x in arcs if lo <= x[3] < hi]
        n, dfa_arcs, dfa_finals = _determinize(starts, sub, set(), frame_offset=lo, last_frame=hi)
        cf = WeightedFst(n, 0, [Arc(s, d, l, l, 0.0, t) for s, d, l, t in dfa_arcs],
                         dfa_finals, fst.isymbols)
        chunks.append(NumeratorChunk(connect(cf), L, sup.utt_id, lo))
    return chunks


# -- forward-backward ---------------------------------------------------------------------------

def _emissions(y):
    m = y.max(axis=1, keepdims=True)
    return np.exp(y - m), m[:, 0]


def den_forward_backward(den, y):
    """(log total, T x pdf posteriors) of the frame-expanded denominator."""
    ex = den.expansion
    e, shift = _emissions(y)
    T = y.shape[0]
    E = e[:, ex.pdf]
    alpha = np.empty((T, ex.n))
    logz = 0.0
    a = ex.init * E[0]
    for t in range(T):
        if t:
            a = ex.trans_t @ alpha[t - 1] * E[t]
        c = a.sum()
        if c <= 0:
            raise DegenerateGraphError("denominator total is zero")
        alpha[t] = a / c
        logz += math.log(c) + shift[t]
    beta = np.empty_like(alpha)
    beta[-1] = 1.0
    for t in range(T - 2, -1, -1):
        b = ex.trans @ (E[t + 1] * beta[t + 1])
        beta[t] = b / b.sum()
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    post = np.zeros_like(y)
    for t in range(T):
        post[t] = np.bincount(ex.pdf, weights=gamma[t], minlength=y.shape[1])
    return logz, post


def num_forward_backward(chunk, den, y):
    """(log total, posteriors) of the numerator chunk weighted by the
    denominator's transitions."""
    ex = den.expansion
    frames, counts, finals = chunk.layers
    e, shift = _emissions(y)
    L, npdf = y.shape
    E = e[:, ex.pdf]
    onehot = (ex.pdf[None, :] == np.arange(npdf)[:, None]).astype(float)
    alphas = []
    logz = 0.0
    for t in range(L):
        src, dst, pdf = frames[t]
        if t == 0:
            moved = np.broadcast_to(ex.init, (len(src), ex.n))
        else:
            moved = (ex.trans_t @ alphas[-1][src].T).T
        cur = np.zeros((counts[t + 1], ex.n))
        np.add.at(cur, dst, moved * onehot[pdf])
        cur *= E[t]
        c = cur.sum()
        if not c > 0:
            raise InconsistentSupervisionError(
                f"numerator of {chunk.utt_id!r} has zero total at frame {chunk.offset + t}")
        alphas.append(cur / c)
        logz += math.log(c) + shift[t]
    final_mass = alphas[-1][finals].sum()
    if not final_mass > 0:
        raise InconsistentSupervisionError(f"numerator of {chunk.utt_id!r} has no final mass")
    logz += math.log(final_mass)
    beta = np.zeros((counts[L], ex.n))
    beta[finals] = 1.0
    post = np.zeros_like(y)
    for t in range(L - 1, -1, -1):
        g = (alphas[t] * beta).sum(axis=0)
        post[t] = np.bincount(ex.pdf, weights=g, minlength=npdf) / g.sum()
        if t == 0:
            break
        src, dst, pdf = frames[t]
        back = (ex.trans @ (beta[dst] * E[t] * onehot[pdf]).T).T
        nb = np.zeros((counts[t], ex.n))
        np.add.at(nb, src, back)
        beta = nb / nb.sum()
    return logz, post


@dataclass(frozen=True, eq=False)
class LfMmiObjective:
    value: float  # (log p_num - log p_den) summed over chunks, per frame
    gradient: object  # same layout as the outputs passed in
    num_logprob: float
    den_logprob: float
    frames: int


def lfmmi_objective(outputs, chunks, den):
    """Frame-normalized objective and its gradient w.r.t. the outputs.

    ``outputs`` is either one utterance's output matrix (or FrameOutputs),
    indexed by each chunk's offset, or a list of per-chunk matrices.
    """
    if not chunks:
        raise EmptySupervisionError("no chunks")
    per_chunk = isinstance(outputs, (list, tuple))
    if per_chunk:
        mats = [np.asarray(o, dtype=float) for o in outputs]
        if len(mats) != len(chunks):
            raise ContractError("one output matrix per chunk required")
        grads = [np.zeros_like(m) for m in mats]
    else:
        y_all = np.asarray(getattr(outputs, "scores", outputs), dtype=float)
        grad_all = np.zeros_like(y_all)
    num_total = den_total = 0.0
    frames = 0
    for k, ch in enumerate(chunks):
        if per_chunk:
            y = mats[k]
        else:
            y = y_all[ch.offset:ch.offset + ch.length]
        if y.shape != (ch.length, den.num_pdfs):
            raise ContractError(f"chunk {k}: outputs {y.shape} != ({ch.length}, {den.num_pdfs})")
        ln, pn = num_forward_backward(ch, den, y)
        ld, pd = den_forward_backward(den, y)
        num_total += ln
        den_total += ld
        frames += ch.length
        if per_chunk:
            grads[k] += pn - pd
        else:
            grad_all[ch.offset:ch.offset + ch.length] += pn - pd
    if per_chunk:
        gradient = [g / frames for g in grads]
    else:
        gradient = grad_all / frames
    return LfMmiObjective((num_total - den_total) / frames, gradient, num_total, den_total, frames)


# -- serialization ------------------------------------------------------------------------------

def _sup_field(arc):
    return f"{format_cost(arc.weight)},{arc.tag}"


def _parse_sup_field(token):
    try:
        cost, frame = token.split(",")
        return parse_cost(cost), int(frame)
    except ValueError:
        raise ParseError(f"bad supervision arc field {token!r}") from None


def write_supervision(sup):
    header = f"# utt={sup.utt_id} frames={sup.num_frames} tolerance={sup.tolerance} mode={sup.mode}\n"
    return header + write_fst(sup.fst, arc_field=_sup_field)


def read_supervision(text, phones):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ParseError("missing supervision header")
    kv = dict(f.split("=", 1) for f in lines[0][2:].split())
    fst = read_fst("\n".join(lines[1:]), phones, arc_parser=_parse_sup_field)
    return NumeratorSupervision(kv.get("utt", ""), fst, int(kv["frames"]),
                                int(kv["tolerance"]), kv["mode"])
