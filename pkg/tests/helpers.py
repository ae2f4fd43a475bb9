"""Independent oracles and small lattice builders shared by the tests.

Nothing here calls into the DP, closure or position code under test.
"""

import numpy as np

from latticerank.lattice import BOS_TOKEN, Lattice, Node


def make_lattice(edges, tokens=None, logprobs=None, root=0):
    ids = sorted({root} | {x for e in edges for x in e})
    tokens = tokens or {}
    logprobs = logprobs or {}
    nodes = [Node(i, BOS_TOKEN if i == root else tokens.get(i, 100 + i), 0.0 if i == root else logprobs.get(i, -0.5))
             for i in ids]
    srcs = {s for s, _ in edges}
    ends = [i for i in ids if i not in srcs and i != root]
    return Lattice(nodes, edges, root, ends)


def diamond():
    # root -> a(1) , b(2) -> c(3)
    return make_lattice([(0, 1), (0, 2), (1, 3), (2, 3)],
                        tokens={1: 11, 2: 12, 3: 13}, logprobs={1: -0.1, 2: -0.9, 3: -0.3})


def chain(n=3):
    return make_lattice([(i, i + 1) for i in range(n)])


def random_dag(rng, n_nodes, max_parents=3, vocab=1024):
    """Random valid lattice with ``n_nodes`` total nodes (root included).

    Node j > 0 takes 1..max_parents parents among earlier nodes; sinks are ends.
    """
    edges = set()
    for j in range(1, n_nodes):
        k = int(rng.integers(1, min(max_parents, j) + 1))
        for p in rng.choice(j, size=k, replace=False):
            edges.add((int(p), j))
    tokens = {j: int(rng.integers(1, vocab)) for j in range(1, n_nodes)}
    logprobs = {j: float(-rng.exponential(1.0)) for j in range(1, n_nodes)}
    return make_lattice(sorted(edges), tokens, logprobs)


def power_series_mask(lattice, order):
    """Reachability by literal boolean matrix powers: min(I + sum (A^T)^i, 1)."""
    n = len(order)
    slot = {v: i for i, v in enumerate(order)}
    A = np.zeros((n, n), dtype=np.int64)
    for s, d in lattice.edges:
        A[slot[s], slot[d]] = 1
    longest = max(len(p) for p in all_paths(lattice))
    total = np.eye(n, dtype=np.int64)
    power = np.eye(n, dtype=np.int64)
    for _ in range(longest):
        power = np.minimum(power @ A.T, 1)
        total = total + power
    return np.minimum(total, 1).astype(bool)


def all_paths(lattice):
    """Recursive enumeration of root-to-end paths (root excluded)."""
    ends = set(lattice.ends)
    kids = {}
    for s, d in lattice.edges:
        kids.setdefault(s, []).append(d)
    out = []

    def walk(v, acc):
        if v in ends:
            out.append(tuple(acc))
        for c in kids.get(v, []):
            walk(c, acc + [c])

    walk(lattice.root, [])
    return out


def dfs_count(lattice):
    return len(all_paths(lattice))


def copath_mask(lattice, order):
    """Slots that share at least one root-to-end path."""
    slot = {v: i for i, v in enumerate(order)}
    n = len(order)
    M = np.eye(n, dtype=bool)
    for p in all_paths(lattice):
        on = [slot[lattice.root]] + [slot[v] for v in p]
        M[np.ix_(on, on)] = True
    return M


def brute_best(lattice, scores, normalize=True):
    """Exhaustive argmax; returns (path, objective)."""
    best = None
    for p in all_paths(lattice):
        raw = sum(scores[v] for v in p)
        val = raw / len(p) if normalize else raw
        if best is None or val > best[1]:
            best = (p, val)
    return best


def unique_ngrams(token_seqs, n=4):
    grams = set()
    for seq in token_seqs:
        grams.update(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))
    return len(grams)
