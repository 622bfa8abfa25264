"""Text serialization for machines and symbol tables.

Arc lines are ``src dst ilabel olabel cost`` and final lines ``state cost``;
the source state of the first line is the start state.  Costs are negated
log-weights printed with 9 significant digits, so a file written here
re-reads and re-prints byte-identically.
"""
import math

from ..errors import ParseError
from .fst import Arc, SymbolTable, WeightedFst


def format_cost(weight):
    """Cost string for a log-weight."""
    cost = -weight + 0.0
    if math.isinf(cost):
        return "Infinity" if cost > 0 else "-Infinity"
    return f"{cost:.9g}"


def parse_cost(token):
    try:
        return -float(token) + 0.0
    except ValueError:
        raise ParseError(f"bad cost field {token!r}") from None


def _default_arc_field(arc):
    return format_cost(arc.weight)


def _default_arc_parser(token):
    return parse_cost(token), None


def write_fst(fst, arc_field=None):
    """Serialize to text.  ``arc_field`` formats the last column of arcs."""
    if fst.is_empty:
        return ""
    fmt = arc_field or _default_arc_field
    start_arcs = [a for a in fst.arcs if a.src == fst.start]
    rest = [a for a in fst.arcs if a.src != fst.start]
    lines = [f"{a.src} {a.dst} {a.ilabel} {a.olabel} {fmt(a)}" for a in start_arcs + rest]
    finals = sorted(fst.finals.items())
    if not start_arcs and fst.start in fst.finals:
        # The start state must lead the file even without outgoing arcs.
        finals.sort(key=lambda kv: kv[0] != fst.start)
    lines += [f"{q} {format_cost(w)}" for q, w in finals]
    return "\n".join(lines) + "\n"


def read_fst(text, isymbols, osymbols=None, arc_parser=None):
    parse_field = arc_parser or _default_arc_parser
    arcs, finals = [], {}
    start = None
    max_state = -1
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        try:
            if len(fields) in (4, 5):
                src, dst, il, ol = (int(f) for f in fields[:4])
                w, tag = parse_field(fields[4]) if len(fields) == 5 else (0.0, None)
                arcs.append(Arc(src, dst, il, ol, w, tag))
                q = max(src, dst)
                first = src
            elif len(fields) in (1, 2):
                q = first = int(fields[0])
                finals[q] = parse_cost(fields[1]) if len(fields) == 2 else 0.0
            else:
                raise ParseError(f"line {lineno}: expected 1, 2, 4 or 5 fields")
        except ValueError as e:
            raise ParseError(f"line {lineno}: {e}") from None
        if start is None:
            start = first
        max_state = max(max_state, q)
    if start is None:
        return WeightedFst.empty(isymbols, osymbols)
    return WeightedFst(max_state + 1, start, arcs, finals, isymbols, osymbols)


def write_symbols(table):
    return "".join(f"{s}\t{i}\n" for i, s in enumerate(table.symbols))


def read_symbols(text):
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise ParseError(f"line {lineno}: expected 'symbol<TAB>id'")
        try:
            entries.append((int(parts[1]), parts[0]))
        except ValueError:
            raise ParseError(f"line {lineno}: bad id {parts[1]!r}") from None
    entries.sort()
    if [i for i, _ in entries] != list(range(len(entries))):
        raise ParseError("symbol ids must be contiguous from 0")
    if not entries or entries[0][1] != "<eps>":
        raise ParseError("id 0 must be <eps>")
    return SymbolTable([s for _, s in entries])
