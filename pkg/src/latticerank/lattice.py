"""Token lattices: construction, validation, traversal and file I/O.

A lattice is a DAG of token nodes hanging off a single virtual root (the
begin-of-sequence slot). Every root-to-end path is one hypothesis.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path as FilePath
from typing import Iterable, Mapping, Sequence

import numpy as np

BOS_TOKEN = 0


class LatticeError(ValueError):
    """Raised for malformed lattices or bad construction arguments."""


class CycleError(LatticeError):
    def __init__(self, edge: tuple[int, int]):
        self.edge = edge
        super().__init__(f"cycle detected: back edge {edge[0]} -> {edge[1]}")


class PathLimitExceeded(RuntimeError):
    """More root-to-end paths than the caller is willing to enumerate."""

    def __init__(self, limit: int):
        self.limit = limit
        super().__init__(f"lattice encodes more than {limit} paths")


@dataclass(frozen=True)
class Node:
    id: int
    token: int
    logprob: float = 0.0


@dataclass(frozen=True)
class Path:
    """A root-to-end path; ``node_ids`` excludes the root."""

    node_ids: tuple[int, ...]
    raw_score: float
    norm_score: float
    # penalized objective of a diverse sample, None elsewhere
    objective: float | None = None

    def __len__(self) -> int:
        return len(self.node_ids)


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str
    nodes: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class Lattice:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[int, int], ...]
    root: int
    ends: tuple[int, ...]
    vocab: Mapping[int, str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((int(s), int(d)) for s, d in self.edges))
        object.__setattr__(self, "ends", tuple(sorted(int(e) for e in self.ends)))

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def node_map(self) -> dict[int, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.node_map))

    @cached_property
    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(self.edges)

    @cached_property
    def children(self) -> dict[int, list[int]]:
        out: dict[int, set[int]] = defaultdict(set)
        for s, d in self.edges:
            out[s].add(d)
        return defaultdict(list, {k: sorted(v) for k, v in out.items()})

    @cached_property
    def parents(self) -> dict[int, list[int]]:
        out: dict[int, set[int]] = defaultdict(set)
        for s, d in self.edges:
            out[d].add(s)
        return defaultdict(list, {k: sorted(v) for k, v in out.items()})

    def token(self, node_id: int) -> int:
        return self.node_map[node_id].token

    def tokens(self, node_ids: Iterable[int]) -> tuple[int, ...]:
        return tuple(self.node_map[i].token for i in node_ids)

    @property
    def has_reentrancy(self) -> bool:
        return any(len(p) > 1 for p in self.parents.values())

    def to_dict(self) -> dict:
        out = {
            "nodes": [{"id": n.id, "token": n.token, "logprob": n.logprob} for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "root": self.root,
            "ends": list(self.ends),
        }
        if self.vocab:
            out["vocab"] = {str(k): v for k, v in self.vocab.items()}
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> Lattice:
        try:
            nodes = [Node(int(n["id"]), int(n["token"]), float(n.get("logprob", 0.0)))
                     for n in data["nodes"]]
            edges = [(int(s), int(d)) for s, d in data["edges"]]
            vocab = data.get("vocab")
            if vocab is not None:
                vocab = {int(k): str(v) for k, v in vocab.items()}
            return cls(nodes, edges, int(data["root"]), [int(e) for e in data["ends"]], vocab)
        except (KeyError, TypeError, ValueError) as exc:
            raise LatticeError(f"malformed lattice record: {exc}") from exc


def save(lattice: Lattice, path: str | FilePath) -> None:
    FilePath(path).write_text(json.dumps(lattice.to_dict()) + "\n")


def load(path: str | FilePath, *, check_valid: bool = True) -> Lattice:
    try:
        data = json.loads(FilePath(path).read_text())
    except json.JSONDecodeError as exc:
        raise LatticeError(f"{path}: not valid JSON ({exc})") from exc
    lattice = Lattice.from_dict(data)
    if check_valid:
        check(lattice)
    return lattice


# ---------------------------------------------------------------- construction


def pack_candidates(
    candidates: Sequence[Sequence[int]],
    logprobs: Sequence[Sequence[float]] | None = None,
) -> Lattice:
    """Pack candidate token sequences into a prefix trie.

    Shared prefixes become shared nodes; suffixes are never merged, so the
    result has no reentrancies. A candidate that is a strict prefix of
    another ends in its own leaf so that ends never have children.
    Duplicate candidates collapse to one path.
    """
    if not candidates:
        raise LatticeError("no candidates to pack")
    if logprobs is None:
        logprobs = [[0.0] * len(c) for c in candidates]
    if len(logprobs) != len(candidates):
        raise LatticeError("candidates and logprobs differ in length")

    root = 0
    nodes = [Node(root, BOS_TOKEN, 0.0)]
    edges: list[tuple[int, int]] = []
    ends: set[int] = set()
    # (parent, token, is_last) -> node id
    trie: dict[tuple[int, int, bool], int] = {}
    for i, (cand, lps) in enumerate(zip(candidates, logprobs)):
        if len(cand) == 0:
            raise LatticeError(f"candidate {i} is empty")
        if len(cand) != len(lps):
            raise LatticeError(
                f"candidate {i}: {len(cand)} tokens but {len(lps)} logprobs")
        parent = root
        for j, (tok, lp) in enumerate(zip(cand, lps)):
            last = j == len(cand) - 1
            key = (parent, int(tok), last)
            node = trie.get(key)
            if node is None:
                node = len(nodes)
                nodes.append(Node(node, int(tok), float(lp)))
                edges.append((parent, node))
                trie[key] = node
            parent = node
        ends.add(parent)
    return Lattice(nodes, edges, root, sorted(ends))


def generate_synthetic(
    seed: int,
    n_chains: int,
    chain_len: int,
    merge_prob: float,
    vocab: int,
) -> Lattice:
    """Seeded lattice of parallel chains with cross-chain reentrancies.

    Each chain hangs off the root. For every chain node at depth d >= 2, with
    probability ``merge_prob`` the chain's node at depth d - 1 gains an extra
    edge into the depth-d node of another, randomly chosen chain. Merges only
    add edges, so every chain stays a path and depths stay consistent.
    """
    if n_chains < 1 or chain_len < 1 or vocab < 2:
        raise LatticeError("need n_chains >= 1, chain_len >= 1, vocab >= 2")
    if not 0.0 <= merge_prob <= 1.0:
        raise LatticeError("merge_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)

    def nid(chain: int, depth: int) -> int:
        return 1 + chain * chain_len + (depth - 1)

    nodes = [Node(0, BOS_TOKEN, 0.0)]
    edges: list[tuple[int, int]] = []
    for c in range(n_chains):
        toks = rng.integers(1, vocab, size=chain_len)
        lps = -rng.exponential(1.0, size=chain_len)
        for d in range(1, chain_len + 1):
            nodes.append(Node(nid(c, d), int(toks[d - 1]), float(lps[d - 1])))
            edges.append((0 if d == 1 else nid(c, d - 1), nid(c, d)))
    seen = set(edges)
    for c in range(n_chains):
        for d in range(2, chain_len + 1):
            draw = rng.random()
            pick = int(rng.integers(max(n_chains - 1, 1)))
            if n_chains == 1 or draw >= merge_prob:
                continue
            other = pick + 1 if pick >= c else pick
            edge = (nid(c, d - 1), nid(other, d))
            if edge not in seen:
                seen.add(edge)
                edges.append(edge)
    ends = [nid(c, chain_len) for c in range(n_chains)]
    return Lattice(nodes, edges, 0, ends)


# ------------------------------------------------------------------- traversal


def topo_order(lattice: Lattice) -> list[int]:
    """Kahn's algorithm, smallest id first among ready nodes."""
    ids = set(lattice.node_map)
    indeg = {i: 0 for i in ids}
    for s, d in lattice.edge_set:
        if s in ids and d in ids:
            indeg[d] += 1
    ready = [i for i, k in indeg.items() if k == 0]
    if lattice.root in indeg and indeg[lattice.root] == 0:
        # root goes first even if other sources (invalid input) have smaller ids
        ready.remove(lattice.root)
        order = [lattice.root]
        for c in lattice.children[lattice.root]:
            if c in ids:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
    else:
        order = []
    heapq.heapify(ready)
    while ready:
        v = heapq.heappop(ready)
        order.append(v)
        for c in lattice.children[v]:
            if c not in ids:
                continue
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(ids):
        left = ids.difference(order)
        raise CycleError(_back_edge(lattice, left))
    return order


def _back_edge(lattice: Lattice, within: set[int]) -> tuple[int, int]:
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    for start in sorted(within):
        if start in state:
            continue
        stack = [(start, iter(lattice.children[start]))]
        state[start] = 1
        while stack:
            v, it = stack[-1]
            for c in it:
                if c not in within:
                    continue
                if state.get(c) == 1:
                    return (v, c)
                if c not in state:
                    state[c] = 1
                    stack.append((c, iter(lattice.children[c])))
                    break
            else:
                state[v] = 2
                stack.pop()
    raise AssertionError("no back edge among leftover nodes")


def explode(lattice: Lattice, max_paths: int = 10_000) -> list[tuple[int, ...]]:
    """All root-to-end node sequences (root excluded), depth-first by id."""
    paths: list[tuple[int, ...]] = []
    ends = set(lattice.ends)
    stack: list[tuple[int, int]] = [(lattice.root, 0)]
    prefix: list[int] = []
    while stack:
        v, depth = stack.pop()
        del prefix[depth:]
        if v != lattice.root:
            prefix.append(v)
        if v in ends:
            if len(paths) >= max_paths:
                raise PathLimitExceeded(max_paths)
            paths.append(tuple(prefix))
        nxt = depth + (v != lattice.root)
        for c in reversed(lattice.children[v]):
            stack.append((c, nxt))
    return paths


def count_paths(lattice: Lattice, cap: int | None = None) -> tuple[int, bool]:
    """Number of root-to-end paths by a forward DP over the topological order.

    With ``cap`` set, counts saturate there and the flag reports saturation.
    """
    ways: dict[int, int] = {lattice.root: 1}
    capped = False
    for v in topo_order(lattice):
        if v == lattice.root:
            continue
        total = sum(ways.get(p, 0) for p in lattice.parents[v])
        if cap is not None and total > cap:
            total, capped = cap, True
        ways[v] = total
    total = sum(ways.get(e, 0) for e in lattice.ends)
    if cap is not None and total > cap:
        total, capped = cap, True
    return total, capped


def suffix_counts(lattice: Lattice) -> dict[int, int]:
    """Number of paths from each node down to an end."""
    ends = set(lattice.ends)
    out: dict[int, int] = {}
    for v in reversed(topo_order(lattice)):
        out[v] = (v in ends) + sum(out[c] for c in lattice.children[v])
    return out


# ------------------------------------------------------------------ validation


def validate(lattice: Lattice) -> list[Diagnostic]:
    """Check every structural invariant; returns all violations found."""
    diags: list[Diagnostic] = []
    ids: set[int] = set()
    for n in lattice.nodes:
        if n.id in ids:
            diags.append(Diagnostic("duplicate node", f"node id {n.id} appears twice", (n.id,)))
        ids.add(n.id)
        if not math.isfinite(n.logprob):
            diags.append(Diagnostic("bad logprob", f"node {n.id} logprob {n.logprob} is not finite", (n.id,)))
        elif n.logprob > 0:
            diags.append(Diagnostic("bad logprob", f"node {n.id} logprob {n.logprob} > 0", (n.id,)))

    root = lattice.root
    if root not in ids:
        diags.append(Diagnostic("missing root", f"root {root} is not a node", (root,)))
    elif lattice.node_map[root].logprob != 0:
        diags.append(Diagnostic("bad logprob", f"root {root} must carry logprob 0", (root,)))

    seen_edges: set[tuple[int, int]] = set()
    good: list[tuple[int, int]] = []
    for s, d in lattice.edges:
        if (s, d) in seen_edges:
            diags.append(Diagnostic("duplicate edge", f"edge {s} -> {d} repeated", (s, d)))
            continue
        seen_edges.add((s, d))
        missing = [x for x in (s, d) if x not in ids]
        if missing:
            diags.append(Diagnostic("dangling edge",
                                    f"edge {s} -> {d} references missing node(s) {missing}", (s, d)))
            continue
        if s == d:
            diags.append(Diagnostic("self loop", f"edge {s} -> {s}", (s,)))
            continue
        good.append((s, d))

    children: dict[int, list[int]] = defaultdict(list)
    parents: dict[int, list[int]] = defaultdict(list)
    for s, d in good:
        children[s].append(d)
        parents[d].append(s)

    if root in ids and parents[root]:
        diags.append(Diagnostic("root has parents", f"root {root} has incoming edges from {sorted(parents[root])}", (root,)))

    if not lattice.ends:
        diags.append(Diagnostic("no ends", "ends is empty"))
    for e in lattice.ends:
        if e not in ids:
            diags.append(Diagnostic("missing end", f"end {e} is not a node", (e,)))
        elif children[e]:
            diags.append(Diagnostic("end has children", f"end {e} has outgoing edges to {sorted(children[e])}", (e,)))

    for comp in _cyclic_components(ids, children):
        names = ", ".join(map(str, comp))
        diags.append(Diagnostic("cycle", f"nodes {names} form a cycle", tuple(comp)))

    if root in ids:
        reach = _reach(root, children)
        lost = sorted(ids - reach)
        if lost:
            diags.append(Diagnostic("unreachable", f"nodes {lost} are unreachable from root", tuple(lost)))
    ends = [e for e in lattice.ends if e in ids]
    if ends:
        co = set()
        for e in ends:
            co |= _reach(e, parents)
        dead = sorted(ids - co)
        if dead:
            diags.append(Diagnostic("dead end", f"nodes {dead} reach no end", tuple(dead)))
    return diags


def check(lattice: Lattice) -> Lattice:
    """Raise LatticeError listing all violations; returns the lattice if valid."""
    diags = validate(lattice)
    if diags:
        raise LatticeError("; ".join(d.message for d in diags))
    return lattice


def _reach(start: int, adj: Mapping[int, list[int]]) -> set[int]:
    seen = {start}
    todo = [start]
    while todo:
        v = todo.pop()
        for c in adj.get(v, ()):
            if c not in seen:
                seen.add(c)
                todo.append(c)
    return seen


def _cyclic_components(ids: set[int], children: Mapping[int, list[int]]) -> list[list[int]]:
    # peel acyclic sources/sinks first; only the cyclic core needs pairwise reachability
    indeg = {i: 0 for i in ids}
    for v in ids:
        for c in children.get(v, ()):
            indeg[c] += 1
    todo = [i for i in ids if indeg[i] == 0]
    alive = set(ids)
    while todo:
        v = todo.pop()
        alive.discard(v)
        for c in children.get(v, ()):
            indeg[c] -= 1
            if indeg[c] == 0:
                todo.append(c)
    core = {v: [c for c in children.get(v, ()) if c in alive] for v in alive}
    reach = {v: _reach(v, core) for v in alive}
    comps, done = [], set()
    for v in sorted(alive):
        if v in done:
            continue
        comp = sorted(u for u in reach[v] if v in reach[u])
        done.update(comp)
        if len(comp) > 1:
            comps.append(comp)
    return comps
