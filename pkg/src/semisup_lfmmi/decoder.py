"""Frame-synchronous beam search over a phone-to-word graph.

Every graph arc is one HMM state: a token sitting on an arc either stays
(self-loop, no graph cost) or moves to an arc leaving the arc's
destination state (paying that arc's graph weight).  The acoustic score of
arc ``a`` at frame ``t`` is ``acoustic_scale * scores[t, ilabel(a) - 1]``.

The search keeps the whole pruned trellis, prunes it again with the
lattice beam using exact forward/backward Viterbi scores, and collapses it
to a word lattice whose nodes are (frame, graph state) pairs at word and
silence boundaries.  Lattice arcs carry ``(acoustic cost, lm cost, start
frame, end frame)`` tags; the lm cost is the graph cost.
"""
import math
import time
import weakref
from dataclasses import dataclass

import numpy as np

from . import am
from .automata import (
    Arc, WeightedFst, connect, forward_backward, prune, read_fst, shortest_path, write_fst,
)
from .automata.io import format_cost
from .errors import (
    ConfigurationError, ContractError, DecodeFailureError, DegenerateGraphError, ParseError,
    RescoringFailureError,
)
from .lexicon import DEFAULT_SILENCE, DecodingGraph
from .lm import BOS, EOS

NEG_INF = -math.inf
INPUT_FRAME_SECONDS = 0.01


@dataclass(frozen=True, eq=False)
class Lattice:
    fst: WeightedFst
    num_frames: int
    utt_id: str = ""
    frame_rate: float = 0.03  # seconds per output frame

    @property
    def words(self):
        return self.fst.osymbols


@dataclass(frozen=True, eq=False)
class DecodeResult:
    utt_id: str
    lattice: Lattice
    transcript: tuple
    cost: float
    confidence: float
    audio_seconds: float
    wall_seconds: float

    @property
    def rtf(self):
        return self.wall_seconds / self.audio_seconds


# -- graph indexing ---------------------------------------------------------------------------

class _GraphIndex:
    """Numpy views of a decoding graph for vectorized token passing."""

    def __init__(self, fst, silence_label):
        n = fst.num_arcs
        self.fst = fst
        self.n = n
        self.src = np.fromiter((a.src for a in fst.arcs), np.int64, n)
        self.dst = np.fromiter((a.dst for a in fst.arcs), np.int64, n)
        self.ilabel = np.fromiter((a.ilabel for a in fst.arcs), np.int64, n)
        self.olabel = np.fromiter((a.olabel for a in fst.arcs), np.int64, n)
        self.weight = np.fromiter((a.weight for a in fst.arcs), np.float64, n)
        if np.any(self.ilabel == 0):
            raise ContractError("decoding graph has input epsilons")
        self.pdf = self.ilabel - 1
        self.final = np.full(fst.num_states, NEG_INF)
        for q, w in fst.finals.items():
            self.final[q] = w
        self.arc_final = self.final[self.dst]
        self.start_mask = self.src == fst.start
        self.boundary = (self.olabel != 0) | (self.ilabel == silence_label)
        self.num_states = fst.num_states
        self.by_dst = self._grouping(self.dst)
        self.by_src = self._grouping(self.src)
        self.out = [np.asarray(ix, dtype=np.int64) for ix in fst.out_arcs]

    def _grouping(self, key):
        order = np.argsort(key, kind="stable")
        keys = key[order]
        starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]]) if len(keys) else np.zeros(0, np.int64)
        return order, starts, keys[starts] if len(keys) else np.zeros(0, np.int64)

    def state_max(self, values, grouping):
        order, starts, states = grouping
        out = np.full(self.num_states, NEG_INF)
        if len(starts):
            out[states] = np.maximum.reduceat(values[order], starts)
        return out


_INDEX_CACHE = weakref.WeakKeyDictionary()


def _index(fst, silence_label):
    ix = _INDEX_CACHE.get(fst)
    if ix is None or ix[0] != silence_label:
        ix = (silence_label, _GraphIndex(fst, silence_label))
        _INDEX_CACHE[fst] = ix
    return ix[1]


def _graph_fst(graph):
    return graph.fst if isinstance(graph, DecodingGraph) else graph


def _silence_label(fst, silence_phone):
    return fst.isymbols.get(silence_phone, -1)


# -- search -----------------------------------------------------------------------------------

def _forward_pass(ix, ac, beam):
    T = ac.shape[0]
    alpha = np.full((T, ix.n), NEG_INF)
    cur = np.where(ix.start_mask, ix.weight + ac[0], NEG_INF)
    for t in range(T):
        if t > 0:
            into = ix.state_max(alpha[t - 1], ix.by_dst)
            cur = np.maximum(alpha[t - 1], into[ix.src] + ix.weight) + ac[t]
        best = cur.max() if ix.n else NEG_INF
        if best == NEG_INF:
            raise DecodeFailureError(f"no surviving token at frame {t}")
        cur[cur < best - beam] = NEG_INF
        alpha[t] = cur
    if not np.any(np.isfinite(alpha[-1] + ix.arc_final)):
        raise DecodeFailureError("no token reaches a final state")
    return alpha


def _backward_pass(ix, ac, alpha):
    T = ac.shape[0]
    beta = np.full((T, ix.n), NEG_INF)
    beta[-1] = np.where(np.isfinite(alpha[-1]), ix.arc_final, NEG_INF)
    for t in range(T - 2, -1, -1):
        nxt = np.where(np.isfinite(alpha[t + 1]), beta[t + 1] + ac[t + 1], NEG_INF)
        via = ix.state_max(nxt + ix.weight, ix.by_src)
        b = np.maximum(nxt, via[ix.dst])
        beta[t] = np.where(np.isfinite(alpha[t]), b, NEG_INF)
    return beta


def _tie_tol(x):
    return 1e-9 * (1.0 + abs(x))


def _build_lattice(ix, ac, kept, utt_id, frame_rate):
    T = ac.shape[0]
    fst = ix.fst
    # boundary entries: (t, graph state, label) -> arcs entered there
    groups = {}
    for t in range(T):
        cand = kept[t] & ix.boundary
        if t == 0:
            cand &= ix.start_mask
        else:
            has_pred = ix.state_max(np.where(kept[t - 1], 0.0, NEG_INF), ix.by_dst) == 0.0
            cand &= has_pred[ix.src]
        for a in np.flatnonzero(cand):
            groups.setdefault((t, int(ix.src[a]), int(ix.olabel[a])), []).append(int(a))

    FINAL = ("final",)
    edges = {}  # (src node, dst node, label) -> (ac cost, lm cost)

    def record(key, cost):
        old = edges.get(key)
        if old is None or sum(cost) < sum(old) - _tie_tol(sum(old)):
            edges[key] = cost

    for (t1, s1, label), arcs in sorted(groups.items()):
        frontier = {}
        for a in arcs:
            c = (-ac[t1, a], -ix.weight[a])
            if a not in frontier or sum(c) < sum(frontier[a]):
                frontier[a] = c
        node = (t1, s1)
        t = t1
        while frontier:
            if t == T - 1:
                for a, (c_ac, c_lm) in frontier.items():
                    fw = ix.arc_final[a]
                    if fw > NEG_INF:
                        record((node, FINAL, label), (c_ac, c_lm - fw))
                break
            t += 1
            new = {}
            row = kept[t]
            for a, (c_ac, c_lm) in frontier.items():
                if row[a]:
                    c = (c_ac - ac[t, a], c_lm)
                    if a not in new or sum(c) < sum(new[a]):
                        new[a] = c
                nxt = ix.out[ix.dst[a]]
                nxt = nxt[row[nxt]]
                for b in nxt:
                    if ix.boundary[b]:
                        record((node, (t, int(ix.dst[a])), label), (c_ac, c_lm))
                    else:
                        c = (c_ac - ac[t, b], c_lm - ix.weight[b])
                        if b not in new or sum(c) < sum(new[b]):
                            new[int(b)] = c
            frontier = new

    start_node = (0, fst.start)
    nodes = {start_node}
    for (u, v, _) in edges:
        nodes.add(u)
        nodes.add(v)
    nodes.discard(FINAL)
    order = sorted(nodes, key=lambda n: (n != start_node, n))
    nid = {n: i for i, n in enumerate(order)}
    nid[FINAL] = len(order)
    lat_arcs = []
    for (u, v, label), (c_ac, c_lm) in edges.items():
        t_end = T if v is FINAL else v[0]
        lat_arcs.append(Arc(nid[u], nid[v], label, label, -(c_ac + c_lm),
                            (float(c_ac), float(c_lm), u[0], t_end)))
    lat_arcs.sort(key=lambda a: (a.src, a.dst, a.ilabel))
    lat = WeightedFst(len(order) + 1, 0, lat_arcs, {nid[FINAL]: 0.0},
                      fst.osymbols, fst.osymbols)
    return Lattice(connect(lat), T, utt_id, frame_rate)


def decode_scores(scores, graph, beam=16.0, lattice_beam=8.0, acoustic_scale=1.0,
                  utt_id="", frame_rate=0.03, silence_phone=DEFAULT_SILENCE):
    """Word lattice from a matrix of per-frame pdf log-scores."""
    if not (beam >= lattice_beam > 0):
        raise ConfigurationError("need beam >= lattice_beam > 0")
    fst = _graph_fst(graph)
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ContractError("scores must be a non-empty T x pdf matrix")
    ix = _index(fst, _silence_label(fst, silence_phone))
    if ix.n and ix.pdf.max() >= scores.shape[1]:
        raise ContractError("graph has more phones than the score matrix has pdfs")
    ac = acoustic_scale * scores[:, ix.pdf]
    alpha = _forward_pass(ix, ac, beam)
    beta = _backward_pass(ix, ac, alpha)
    best = float(np.max(alpha[-1] + ix.arc_final))
    kept = alpha + beta >= best - lattice_beam - _tie_tol(best)
    lattice = _build_lattice(ix, ac, kept, utt_id, frame_rate)
    lattice = Lattice(prune(lattice.fst, lattice_beam), lattice.num_frames, utt_id, frame_rate)
    if lattice.fst.is_empty:
        raise DecodeFailureError("lattice is empty")
    return lattice


def decode(model, graph, features, beam=16.0, lattice_beam=8.0, acoustic_scale=1.0,
           utt_id="", audio_seconds=None, confidence_rule="min",
           silence_phone=DEFAULT_SILENCE):
    """Run the acoustic model and beam search; time the whole thing."""
    t0 = time.perf_counter()
    out = am.forward(model, features, "eval")
    frame_rate = INPUT_FRAME_SECONDS * model.config.subsampling
    lat = decode_scores(out.scores, graph, beam, lattice_beam, acoustic_scale,
                        utt_id, frame_rate, silence_phone)
    words, cost = best_path(lat)
    conf = confidence(lat, confidence_rule)
    wall = time.perf_counter() - t0
    if audio_seconds is None:
        audio_seconds = len(features) * INPUT_FRAME_SECONDS
    return DecodeResult(utt_id, lat, words, cost, conf, float(audio_seconds), max(wall, 1e-9))


def viterbi_alignment(scores, graph, acoustic_scale=1.0):
    """Best frame-level arc sequence through ``graph`` (no pruning).

    Returns a list of ``(arc index, start frame, end frame)`` segments, one
    per arc visit, covering every frame.
    """
    fst = _graph_fst(graph)
    ix = _index(fst, -1)
    scores = np.asarray(scores, dtype=float)
    ac = acoustic_scale * scores[:, ix.pdf]
    T = ac.shape[0]
    back = np.full((T, ix.n), -1, dtype=np.int64)  # -1 = start, -2 = self-loop
    prev = np.where(ix.start_mask, ix.weight + ac[0], NEG_INF)
    order, starts, states = ix.by_dst
    for t in range(1, T):
        # best incoming arc per state, lowest arc index on ties
        vals = prev[order]
        best_val = np.full(ix.num_states, NEG_INF)
        best_arc = np.full(ix.num_states, -1, dtype=np.int64)
        if len(starts):
            seg_max = np.maximum.reduceat(vals, starts)
            best_val[states] = seg_max
            owner = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(vals)]))
            hit = vals >= seg_max[owner]
            first = np.full(len(starts), -1, dtype=np.int64)
            idx = np.flatnonzero(hit)[::-1]
            first[owner[idx]] = order[idx]
            best_arc[states] = first
        enter = best_val[ix.src] + ix.weight
        stay = prev
        use_enter = enter > stay
        back[t] = np.where(use_enter, best_arc[ix.src], -2)
        prev = np.where(use_enter, enter, stay) + ac[t]
    end = prev + ix.arc_final
    if not np.any(np.isfinite(end)):
        raise DecodeFailureError("no complete alignment")
    a = int(np.argmax(end))
    segments = []
    seg_end = T
    for t in range(T - 1, -1, -1):
        b = back[t, a]
        if b == -2:
            continue
        segments.append((a, t, seg_end))
        seg_end = t
        a = int(b)
    segments.reverse()
    return segments


# -- lattice operations -----------------------------------------------------------------------

def best_path(lattice):
    """Best word sequence and its combined cost."""
    if lattice.fst.is_empty:
        raise DegenerateGraphError("empty lattice")
    p = shortest_path(lattice.fst)
    return p.output_string(lattice.words), -p.weight


def arc_posteriors(lattice):
    return forward_backward(lattice.fst).arc_posteriors


def word_posteriors(lattice):
    """Per best-path word arc: (arc index, posterior) with the posterior
    summed over same-word arcs whose time spans overlap."""
    fst = lattice.fst
    post = arc_posteriors(lattice)
    best = shortest_path(fst)
    out = []
    for i in best.arcs:
        a = fst.arcs[i]
        if a.olabel == 0:
            continue
        s, e = a.tag[2], a.tag[3]
        total = 0.0
        for j, b in enumerate(fst.arcs):
            if b.olabel == a.olabel and b.tag[2] < e and s < b.tag[3]:
                total += post[j]
        out.append((i, min(1.0, total)))
    return out


def confidence(lattice, rule="min"):
    """Minimum (or mean) word posterior along the best path; 1.0 if the
    best path has no words."""
    if rule not in ("min", "mean"):
        raise ConfigurationError(f"unknown confidence rule {rule!r}")
    if lattice.fst.is_empty:
        raise DegenerateGraphError("empty lattice")
    posts = [p for _, p in word_posteriors(lattice)]
    if not posts:
        return 1.0
    return float(min(posts) if rule == "min" else sum(posts) / len(posts))


def rescore(lattice, strong_lm, scale=1.0, old_lm=None):
    """Replace the LM part of every arc's lm cost using ``strong_lm``.

    The lattice is expanded over (state, word history) so each arc sees its
    exact n-gram context.  With ``old_lm`` the old LM cost is subtracted and
    the rest of the graph cost (pronunciation and silence) is kept;
    without it the lm cost becomes the scaled strong-LM cost alone.  The
    end-of-sentence cost is folded into arcs entering final states.
    """
    fst = lattice.fst
    if fst.is_empty:
        raise RescoringFailureError("empty lattice")
    n = max(strong_lm.order, old_lm.order if old_lm else 1) - 1
    syms = fst.osymbols

    def trim(ctx):
        return ctx[-n:] if n else ()

    def final_adjust(ctx):
        c = scale * -strong_lm.logprob(EOS, ctx)
        if old_lm is not None:
            c -= -old_lm.logprob(EOS, ctx)
        return c

    start = (fst.start, trim((BOS,)))
    sid = {start: 0}
    queue = [start]
    arcs, finals = [], {}
    while queue:
        key = queue.pop(0)
        q, ctx = key
        if q in fst.finals:
            finals[sid[key]] = 0.0
        for i in fst.out_arcs[q]:
            a = fst.arcs[i]
            c_ac, c_lm, t0, t1 = a.tag
            if a.olabel:
                w = syms.symbol(a.olabel)
                lp = strong_lm.logprob(w, ctx)
                lm = scale * -lp
                if old_lm is not None:
                    lm += c_lm + old_lm.logprob(w, ctx)
                nctx = trim(ctx + (w,))
            else:
                lm = c_lm if old_lm is not None else 0.0
                nctx = ctx
            if a.dst in fst.finals:
                lm += final_adjust(nctx)
            if not math.isfinite(lm):
                continue
            nkey = (a.dst, nctx)
            if nkey not in sid:
                sid[nkey] = len(sid)
                queue.append(nkey)
            arcs.append(Arc(sid[key], sid[nkey], a.ilabel, a.olabel, -(c_ac + lm),
                            (c_ac, lm, t0, t1)))
    out = connect(WeightedFst(len(sid), 0, arcs, finals, fst.isymbols, fst.osymbols))
    if out.is_empty:
        raise RescoringFailureError("no lattice path survives rescoring")
    return Lattice(out, lattice.num_frames, lattice.utt_id, lattice.frame_rate)


def prune_lattice(lattice, beam):
    return Lattice(prune(lattice.fst, beam), lattice.num_frames, lattice.utt_id,
                   lattice.frame_rate)


# -- serialization ----------------------------------------------------------------------------

def _tag_field(arc):
    c_ac, c_lm, s, e = arc.tag
    return f"{format_cost(-c_ac)},{format_cost(-c_lm)},{s},{e}"


def write_lattice(lattice):
    return write_fst(lattice.fst, arc_field=_tag_field)


def _parse_tag(token):
    try:
        ac, lm, s, e = token.split(",")
        ac, lm = float(ac) + 0.0, float(lm) + 0.0
        return -(ac + lm), (ac, lm, int(s), int(e))
    except ValueError:
        raise ParseError(f"bad lattice arc field {token!r}") from None


def read_lattice(text, words, num_frames=None, utt_id="", frame_rate=0.03):
    fst = read_fst(text, words, words, arc_parser=_parse_tag)
    if num_frames is None:
        num_frames = max((a.tag[3] for a in fst.arcs), default=0)
    return Lattice(fst, num_frames, utt_id, frame_rate)


# -- real-time factor -------------------------------------------------------------------------

@dataclass(frozen=True)
class RtfReport:
    per_utterance: tuple  # (utt_id, audio seconds, wall seconds, rtf)
    total_audio: float
    total_wall: float

    @property
    def aggregate(self):
        return self.total_wall / self.total_audio


def measure_rtf(results):
    """Per-utterance and aggregate real-time factors (utterance-id order)."""
    results = sorted(results, key=lambda r: r.utt_id)
    if not results:
        raise ContractError("need at least one decode result")
    rows = tuple((r.utt_id, r.audio_seconds, r.wall_seconds, r.rtf) for r in results)
    return RtfReport(rows, sum(r[1] for r in rows), sum(r[2] for r in rows))
