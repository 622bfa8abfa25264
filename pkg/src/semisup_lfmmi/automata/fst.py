"""Core weighted automaton types."""
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, NamedTuple, Optional

from ..errors import ConfigurationError, ContractError

EPSILON = 0
EPS_SYMBOL = "<eps>"


class SymbolTable:
    """Bidirectional symbol <-> id map with epsilon fixed at id 0."""

    def __init__(self, symbols=()):
        syms = list(symbols)
        if not syms or syms[0] != EPS_SYMBOL:
            syms.insert(0, EPS_SYMBOL)
        self._symbols = tuple(syms)
        self._ids = {s: i for i, s in enumerate(self._symbols)}
        if len(self._ids) != len(self._symbols):
            raise ConfigurationError("duplicate symbol in symbol table")

    def id(self, symbol):
        try:
            return self._ids[symbol]
        except KeyError:
            raise ConfigurationError(f"symbol {symbol!r} not in table") from None

    def get(self, symbol, default=None):
        return self._ids.get(symbol, default)

    def symbol(self, i):
        return self._symbols[i]

    def extended(self, *symbols):
        """A new table with ``symbols`` appended (existing ones are skipped)."""
        extra = [s for s in symbols if s not in self._ids]
        return SymbolTable(self._symbols + tuple(extra))

    @property
    def symbols(self):
        return self._symbols

    def __contains__(self, symbol):
        return symbol in self._ids

    def __len__(self):
        return len(self._symbols)

    def __iter__(self):
        return iter(self._symbols)

    def __eq__(self, other):
        return isinstance(other, SymbolTable) and self._symbols == other._symbols

    def __hash__(self):
        return hash(self._symbols)

    def __repr__(self):
        return f"SymbolTable({len(self)} symbols)"


class Arc(NamedTuple):
    src: int
    dst: int
    ilabel: int
    olabel: int
    weight: float
    # Opaque per-arc payload (e.g. lattice timing); preserved by algorithms
    # that keep arcs and by arcs derived from a single source arc.
    tag: Any = None


@dataclass(frozen=True, eq=False)
class WeightedFst:
    num_states: int
    start: Optional[int]
    arcs: tuple
    finals: dict
    isymbols: SymbolTable
    osymbols: SymbolTable = None

    def __post_init__(self):
        if self.osymbols is None:
            object.__setattr__(self, "osymbols", self.isymbols)
        object.__setattr__(self, "arcs", tuple(Arc(*a) for a in self.arcs))
        object.__setattr__(self, "finals", dict(self.finals))
        n = self.num_states
        if n == 0:
            if self.start is not None or self.arcs or self.finals:
                raise ContractError("empty machine must have no start, arcs or finals")
            return
        if self.start is None or not 0 <= self.start < n:
            raise ContractError(f"start state {self.start} out of range")
        for a in self.arcs:
            if not (0 <= a.src < n and 0 <= a.dst < n):
                raise ContractError(f"arc {a} references a missing state")
        for q in self.finals:
            if not 0 <= q < n:
                raise ContractError(f"final state {q} out of range")

    @classmethod
    def empty(cls, isymbols, osymbols=None):
        return cls(0, None, (), {}, isymbols, osymbols)

    @cached_property
    def out_arcs(self):
        """Per-state tuple of outgoing arc indices, in arc order."""
        buckets = [[] for _ in range(self.num_states)]
        for i, a in enumerate(self.arcs):
            buckets[a.src].append(i)
        return tuple(tuple(b) for b in buckets)

    @cached_property
    def in_arcs(self):
        buckets = [[] for _ in range(self.num_states)]
        for i, a in enumerate(self.arcs):
            buckets[a.dst].append(i)
        return tuple(tuple(b) for b in buckets)

    @property
    def num_arcs(self):
        return len(self.arcs)

    @property
    def is_empty(self):
        return self.num_states == 0

    @property
    def is_acceptor(self):
        return all(a.ilabel == a.olabel for a in self.arcs)

    def final_weight(self, q, zero=float("-inf")):
        return self.finals.get(q, zero)

    def replace(self, **changes):
        fields = dict(num_states=self.num_states, start=self.start, arcs=self.arcs,
                      finals=self.finals, isymbols=self.isymbols, osymbols=self.osymbols)
        fields.update(changes)
        return WeightedFst(**fields)

    def __repr__(self):
        return (f"WeightedFst(states={self.num_states}, arcs={self.num_arcs}, "
                f"finals={len(self.finals)})")


@dataclass(frozen=True)
class Path:
    arcs: tuple  # arc indices into the owning machine
    weight: float
    ilabels: tuple
    olabels: tuple
    final_state: int = -1

    def input_string(self, table=None, keep_epsilon=False):
        return _labels_to_string(self.ilabels, table, keep_epsilon)

    def output_string(self, table=None, keep_epsilon=False):
        return _labels_to_string(self.olabels, table, keep_epsilon)


def _labels_to_string(labels, table, keep_epsilon):
    labs = [l for l in labels if keep_epsilon or l != EPSILON]
    if table is None:
        return tuple(labs)
    return tuple(table.symbol(l) for l in labs)


class PathList(list):
    """List of paths that records whether enumeration hit its limit."""

    def __init__(self, paths=(), truncated=False):
        super().__init__(paths)
        self.truncated = truncated


def make_path(fst, arc_indices, final_state):
    """Build a Path from arc indices (log weights accumulate by addition)."""
    w = 0.0
    ilabels, olabels = [], []
    for i in arc_indices:
        a = fst.arcs[i]
        w += a.weight
        ilabels.append(a.ilabel)
        olabels.append(a.olabel)
    w += fst.finals[final_state]
    return Path(tuple(arc_indices), w, tuple(ilabels), tuple(olabels), final_state)


def linear_acceptor(labels, symbols, weights=None):
    """Single-path acceptor over ``labels`` (ids)."""
    labels = list(labels)
    ws = list(weights) if weights is not None else [0.0] * len(labels)
    arcs = [Arc(i, i + 1, l, l, ws[i]) for i, l in enumerate(labels)]
    return WeightedFst(len(labels) + 1, 0, arcs, {len(labels): 0.0}, symbols)
