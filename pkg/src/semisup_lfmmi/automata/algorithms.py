"""Algorithms over WeightedFst.

All functions are pure: they never mutate their inputs and always return
new machines.
"""
import heapq
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, DegenerateGraphError, UnsupportedInputError
from .fst import EPSILON, Arc, PathList, WeightedFst, make_path
from .semiring import LOG, NEG_INF, TROPICAL


def _tie_tol(x):
    return 1e-9 * (1.0 + abs(x))


def accessible_states(fst):
    if fst.is_empty:
        return set()
    seen = {fst.start}
    stack = [fst.start]
    out, arcs = fst.out_arcs, fst.arcs
    while stack:
        q = stack.pop()
        for i in out[q]:
            d = arcs[i].dst
            if d not in seen:
                seen.add(d)
                stack.append(d)
    return seen


def coaccessible_states(fst):
    seen = set(fst.finals)
    stack = list(seen)
    inn, arcs = fst.in_arcs, fst.arcs
    while stack:
        q = stack.pop()
        for i in inn[q]:
            s = arcs[i].src
            if s not in seen:
                seen.add(s)
                stack.append(s)
    return seen


def connect(fst):
    """Keep only states that are both accessible and co-accessible."""
    if fst.is_empty:
        return fst
    keep = accessible_states(fst) & coaccessible_states(fst)
    if fst.start not in keep:
        return WeightedFst.empty(fst.isymbols, fst.osymbols)
    if len(keep) == fst.num_states:
        return fst
    order = sorted(keep)
    remap = {q: i for i, q in enumerate(order)}
    arcs = [a._replace(src=remap[a.src], dst=remap[a.dst])
            for a in fst.arcs if a.src in remap and a.dst in remap]
    finals = {remap[q]: w for q, w in fst.finals.items() if q in remap}
    return WeightedFst(len(order), remap[fst.start], arcs, finals,
                       fst.isymbols, fst.osymbols)


def topological_order(fst, arc_filter=None):
    """Kahn ordering of states (lowest id first among ready states).

    ``arc_filter`` restricts the graph to the arcs it accepts.  Raises
    UnsupportedInputError if the (restricted) graph has a cycle.
    """
    n = fst.num_states
    indeg = [0] * n
    succ = [[] for _ in range(n)]
    for a in fst.arcs:
        if arc_filter is None or arc_filter(a):
            indeg[a.dst] += 1
            succ[a.src].append(a.dst)
    ready = [q for q in range(n) if indeg[q] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        q = heapq.heappop(ready)
        order.append(q)
        for d in succ[q]:
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(ready, d)
    if len(order) != n:
        raise UnsupportedInputError("machine contains a cycle")
    return order


def is_acyclic(fst):
    try:
        topological_order(fst)
    except UnsupportedInputError:
        return False
    return True


def compose(a, b, ring=LOG):
    """Weighted composition with the three-state epsilon filter.

    The filter guarantees each pair of component paths yields exactly one
    composed path, so the log semiring never double-counts.  Result arcs
    inherit the tag of the ``a`` arc that produced them.
    """
    if a.osymbols != b.isymbols:
        raise ConfigurationError("output symbols of left machine differ from "
                                 "input symbols of right machine")
    if a.is_empty or b.is_empty:
        return WeightedFst.empty(a.isymbols, b.osymbols)

    b_index = []
    for q in range(b.num_states):
        by_label = {}
        for i in b.out_arcs[q]:
            by_label.setdefault(b.arcs[i].ilabel, []).append(b.arcs[i])
        b_index.append(by_label)

    ids = {}
    queue = deque()

    def state_id(triple):
        s = ids.get(triple)
        if s is None:
            s = ids[triple] = len(ids)
            queue.append(triple)
        return s

    state_id((a.start, b.start, 0))
    arcs, finals = [], {}
    times = ring.times
    while queue:
        triple = queue.popleft()
        q1, q2, f = triple
        src = ids[triple]
        fa, fb = a.finals.get(q1), b.finals.get(q2)
        if fa is not None and fb is not None:
            finals[src] = times(fa, fb)
        b_eps = b_index[q2].get(EPSILON, ())
        for i in a.out_arcs[q1]:
            x = a.arcs[i]
            if x.olabel != EPSILON:
                for y in b_index[q2].get(x.olabel, ()):
                    d = state_id((x.dst, y.dst, 0))
                    arcs.append(Arc(src, d, x.ilabel, y.olabel, times(x.weight, y.weight), x.tag))
            else:
                if f != 1:
                    d = state_id((x.dst, q2, 2))
                    arcs.append(Arc(src, d, x.ilabel, EPSILON, x.weight, x.tag))
                if f == 0:
                    for y in b_eps:
                        d = state_id((x.dst, y.dst, 0))
                        arcs.append(Arc(src, d, x.ilabel, y.olabel,
                                        times(x.weight, y.weight), x.tag))
        if f != 2:
            for y in b_eps:
                d = state_id((q1, y.dst, 1))
                arcs.append(Arc(src, d, EPSILON, y.olabel, y.weight, None))
    out = WeightedFst(len(ids), 0, arcs, finals, a.isymbols, b.osymbols)
    return connect(out)


def _is_eps_arc(arc):
    return arc.ilabel == EPSILON and arc.olabel == EPSILON


def remove_epsilon(fst, ring=LOG, removable=None):
    """Remove epsilon:epsilon arcs, preserving the weighted language.

    ``removable`` overrides which arcs count as epsilons.  The epsilon
    subgraph must be acyclic.
    """
    if fst.is_empty:
        return fst
    is_eps = removable or _is_eps_arc
    if not any(is_eps(a) for a in fst.arcs):
        return fst
    try:
        order = topological_order(fst, is_eps)
    except UnsupportedInputError:
        raise UnsupportedInputError("epsilon cycle detected") from None

    closure = [None] * fst.num_states
    for q in reversed(order):
        dist = {q: ring.one}
        for i in fst.out_arcs[q]:
            e = fst.arcs[i]
            if not is_eps(e):
                continue
            for r, d in closure[e.dst].items():
                w = ring.times(e.weight, d)
                dist[r] = ring.plus(dist[r], w) if r in dist else w
        closure[q] = dist

    arcs, finals = [], {}
    for q in range(fst.num_states):
        fw = ring.zero
        for p in sorted(closure[q]):
            d = closure[q][p]
            for i in fst.out_arcs[p]:
                x = fst.arcs[i]
                if not is_eps(x):
                    arcs.append(x._replace(src=q, weight=ring.times(d, x.weight)))
            if p in fst.finals:
                fw = ring.plus(fw, ring.times(d, fst.finals[p]))
        if fw != ring.zero:
            finals[q] = fw
    out = WeightedFst(fst.num_states, fst.start, arcs, finals, fst.isymbols, fst.osymbols)
    return connect(out)


def merge_duplicate_arcs(fst, ring=LOG):
    """Sum arcs that share (src, dst, ilabel, olabel) into one arc."""
    merged = {}
    for a in fst.arcs:
        key = (a.src, a.dst, a.ilabel, a.olabel)
        prev = merged.get(key)
        merged[key] = a if prev is None else prev._replace(
            weight=ring.plus(prev.weight, a.weight))
    if len(merged) == fst.num_arcs:
        return fst
    return fst.replace(arcs=tuple(merged.values()))


def relabel(fst, ilabel_map=None, olabel_map=None):
    """Map labels through dicts (missing keys are kept)."""
    im = ilabel_map or {}
    om = olabel_map or {}
    arcs = [a._replace(ilabel=im.get(a.ilabel, a.ilabel), olabel=om.get(a.olabel, a.olabel))
            for a in fst.arcs]
    return fst.replace(arcs=arcs)


def _forward(fst, order, ring):
    alpha = [ring.zero] * fst.num_states
    alpha[fst.start] = ring.one
    for q in order:
        aq = alpha[q]
        if aq == NEG_INF:
            continue
        for i in fst.out_arcs[q]:
            x = fst.arcs[i]
            alpha[x.dst] = ring.plus(alpha[x.dst], ring.times(aq, x.weight))
    return alpha


def _backward(fst, order, ring):
    beta = [ring.zero] * fst.num_states
    for q in reversed(order):
        b = fst.finals.get(q, ring.zero)
        for i in fst.out_arcs[q]:
            x = fst.arcs[i]
            b = ring.plus(b, ring.times(x.weight, beta[x.dst]))
        beta[q] = b
    return beta


def total_weight(fst, ring=LOG):
    """Semiring sum over complete paths (acyclic machines only)."""
    if fst.is_empty:
        return ring.zero
    order = topological_order(fst)
    return _backward(fst, order, ring)[fst.start]


@dataclass(frozen=True)
class ForwardBackward:
    alpha: np.ndarray
    beta: np.ndarray
    total: float
    arc_posteriors: np.ndarray
    state_occupancy: np.ndarray


def forward_backward(fst):
    """Log-semiring arc posteriors and state occupancies."""
    if fst.is_empty:
        raise DegenerateGraphError("empty machine has no complete path")
    order = topological_order(fst)
    alpha = np.array(_forward(fst, order, LOG))
    beta = np.array(_backward(fst, order, LOG))
    total = float(beta[fst.start])
    if total == NEG_INF:
        raise DegenerateGraphError("total weight is semiring zero")
    if fst.num_arcs:
        src = np.fromiter((a.src for a in fst.arcs), dtype=np.int64, count=fst.num_arcs)
        dst = np.fromiter((a.dst for a in fst.arcs), dtype=np.int64, count=fst.num_arcs)
        w = np.fromiter((a.weight for a in fst.arcs), dtype=np.float64, count=fst.num_arcs)
        with np.errstate(invalid="ignore"):
            post = np.exp(alpha[src] + w + beta[dst] - total)
        post = np.nan_to_num(post, nan=0.0)
    else:
        post = np.zeros(0)
    with np.errstate(invalid="ignore"):
        occ = np.nan_to_num(np.exp(alpha + beta - total), nan=0.0)
    return ForwardBackward(alpha, beta, total, post, occ)


def _best_completion(fst):
    """Best (max log-weight) completion from every state; handles cycles
    without positive-weight loops by Bellman-Ford relaxation."""
    try:
        order = topological_order(fst)
    except UnsupportedInputError:
        order = None
    if order is not None:
        return _backward(fst, order, TROPICAL), False
    beta = [fst.finals.get(q, NEG_INF) for q in range(fst.num_states)]
    for _ in range(fst.num_states + 1):
        changed = False
        for x in fst.arcs:
            if beta[x.dst] == NEG_INF:
                continue
            cand = x.weight + beta[x.dst]
            if cand > beta[x.src] + _tie_tol(cand) * 1e-3:
                beta[x.src] = cand
                changed = True
        if not changed:
            return beta, True
    raise UnsupportedInputError("positive-weight cycle: no best path exists")


def shortest_path(fst):
    """Best complete path (maximum log-weight, i.e. minimum cost).

    Ties are broken in favour of the lexicographically smallest sequence
    of arc indices.
    """
    if fst.is_empty:
        raise DegenerateGraphError("empty machine has no complete path")
    beta, cyclic = _best_completion(fst)
    if beta[fst.start] == NEG_INF:
        raise DegenerateGraphError("no complete path")
    q = fst.start
    chosen = []
    visited = {q}
    while True:
        target = beta[q]
        tol = _tie_tol(target)
        fw = fst.finals.get(q)
        if fw is not None and fw >= target - tol:
            break
        nxt = None
        for i in fst.out_arcs[q]:
            x = fst.arcs[i]
            if cyclic and x.dst in visited:
                continue
            if x.weight + beta[x.dst] >= target - tol:
                nxt = i
                break
        if nxt is None:
            raise DegenerateGraphError("best path walk failed")
        chosen.append(nxt)
        q = fst.arcs[nxt].dst
        visited.add(q)
    return make_path(fst, chosen, q)


def prune(fst, beam):
    """Keep arcs (and final weights) lying on a complete path whose
    weight is within ``beam`` of the best path."""
    if beam < 0:
        raise ConfigurationError("beam must be non-negative")
    if fst.is_empty or math.isinf(beam):
        return fst
    order = topological_order(fst)
    alpha = _forward(fst, order, TROPICAL)
    beta = _backward(fst, order, TROPICAL)
    best = beta[fst.start]
    if best == NEG_INF:
        return WeightedFst.empty(fst.isymbols, fst.osymbols)
    thresh = best - beam - _tie_tol(best)
    arcs = [x for x in fst.arcs
            if alpha[x.src] + x.weight + beta[x.dst] >= thresh]
    finals = {q: w for q, w in fst.finals.items() if alpha[q] + w >= thresh}
    return connect(fst.replace(arcs=arcs, finals=finals))


def enumerate_paths(fst, limit=100000, max_length=None):
    """All complete paths in deterministic depth-first order.

    At each state, stopping (if final) comes before following arcs, and
    arcs are followed in index order.  If more than ``limit`` paths exist
    the result is truncated and ``.truncated`` is set.
    """
    if fst.is_empty:
        return PathList()
    if max_length is None and not is_acyclic(fst):
        raise UnsupportedInputError("cyclic machine needs max_length")
    paths = []
    stack = [(fst.start, ())]
    while stack:
        q, prefix = stack.pop()
        if q in fst.finals:
            if len(paths) == limit:
                return PathList(paths, truncated=True)
            paths.append(make_path(fst, prefix, q))
        if max_length is not None and len(prefix) >= max_length:
            continue
        for i in reversed(fst.out_arcs[q]):
            stack.append((fst.arcs[i].dst, prefix + (i,)))
    return PathList(paths)
