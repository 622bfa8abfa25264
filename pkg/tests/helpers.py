"""Random machine generators and brute-force oracles shared by tests."""
import math
from collections import defaultdict

import numpy as np

from semisup_lfmmi.automata import Arc, SymbolTable, WeightedFst, enumerate_paths

ABC = SymbolTable(["a", "b", "c"])
XYZ = SymbolTable(["x", "y", "z"])


def random_acyclic(rng, n_states=None, n_labels=3, eps_prob=0.0, transducer=False,
                   isymbols=ABC, osymbols=None, arc_prob=0.35, max_paths=1000):
    """Random acyclic machine; arcs only go from lower to higher state ids."""
    while True:
        n = n_states or int(rng.integers(2, 11))
        arcs = []
        for s in range(n):
            for d in range(s + 1, n):
                for _ in range(int(rng.integers(1, 3))):
                    if rng.random() < arc_prob:
                        il = 0 if rng.random() < eps_prob else int(rng.integers(1, n_labels + 1))
                        if transducer:
                            ol = 0 if rng.random() < eps_prob else int(rng.integers(1, n_labels + 1))
                        else:
                            ol = il
                        arcs.append(Arc(s, d, il, ol, float(rng.normal(-1.0, 1.0))))
        finals = {q: float(rng.normal(-0.5, 0.5)) for q in range(n)
                  if q == n - 1 or rng.random() < 0.2}
        fst = WeightedFst(n, 0, arcs, finals, isymbols,
                          osymbols if osymbols is not None else isymbols)
        paths = enumerate_paths(fst, limit=max_paths)
        if 0 < len(paths) and not paths.truncated:
            return fst


def logsumexp(ws):
    m = max(ws)
    return m + math.log(sum(math.exp(w - m) for w in ws))


def weighted_language(fst, limit=100000):
    """{(input string, output string): log-sum weight} by enumeration."""
    acc = defaultdict(list)
    for p in enumerate_paths(fst, limit=limit):
        acc[(p.input_string(), p.output_string())].append(p.weight)
    return {k: logsumexp(v) for k, v in acc.items()}


def assert_same_language(l1, l2, tol=1e-9):
    assert set(l1) == set(l2)
    for k in l1:
        assert abs(l1[k] - l2[k]) <= tol * (1 + abs(l1[k])), (k, l1[k], l2[k])


def path_arc_sets(fst):
    return {tuple(p.arcs) for p in enumerate_paths(fst)}


def rng_for(seed):
    return np.random.default_rng(seed)
