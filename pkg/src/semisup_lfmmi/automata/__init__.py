"""Semiring-generic weighted automata."""
from .algorithms import (
    ForwardBackward,
    compose,
    connect,
    enumerate_paths,
    forward_backward,
    is_acyclic,
    merge_duplicate_arcs,
    prune,
    relabel,
    remove_epsilon,
    shortest_path,
    topological_order,
    total_weight,
)
from .fst import EPSILON, Arc, Path, PathList, SymbolTable, WeightedFst, linear_acceptor
from .io import format_cost, parse_cost, read_fst, read_symbols, write_fst, write_symbols
from .semiring import LOG, NEG_INF, TROPICAL, Semiring, log_add, log_sum

__all__ = [
    "Arc", "EPSILON", "ForwardBackward", "LOG", "NEG_INF", "Path", "PathList",
    "Semiring", "SymbolTable", "TROPICAL", "WeightedFst", "compose", "connect",
    "enumerate_paths", "format_cost", "forward_backward", "is_acyclic",
    "linear_acceptor", "log_add", "log_sum", "merge_duplicate_arcs", "parse_cost",
    "prune", "read_fst", "read_symbols", "relabel", "remove_epsilon",
    "shortest_path", "topological_order", "total_weight", "write_fst",
    "write_symbols",
]
