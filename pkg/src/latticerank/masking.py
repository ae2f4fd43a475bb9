"""Lay a lattice out on a single token canvas with position ids and a mask.

Mask rows follow canvas slots: ``mask[i, j]`` is True when slot ``i`` may
attend to slot ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .lattice import Lattice, LatticeError, check, topo_order

MASK_MODES = ("full-causal", "bidirectional", "single-context")
POSITION_SCHEMES = ("canonical", "default")


class CanvasOverflow(RuntimeError):
    """The lattice does not fit the scorer's canvas."""


@dataclass(frozen=True)
class MaskConfig:
    mode: str = "single-context"
    m: int = 1
    seed: int = 0
    max_position: int = 511
    position_scheme: str = "canonical"
    # single-context only: re-derive positions on the sampled subgraph
    subgraph_positions: bool = True
    # single-context only: sample parents proportionally to exp(logprob)
    weighted: bool = False

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.position_scheme not in POSITION_SCHEMES:
            raise ValueError(f"unknown position scheme {self.position_scheme!r}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.m != 1 and self.mode != "single-context":
            raise ValueError("m > 1 requires single-context masks")
        if self.max_position < 0:
            raise ValueError("max_position must be non-negative")


@dataclass(frozen=True, eq=False)
class Canvas:
    node_order: tuple[int, ...]
    tokens: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    mode: str = "full-causal"
    subgraph_edges: frozenset[tuple[int, int]] | None = None

    def __len__(self) -> int:
        return len(self.node_order)

    @cached_property
    def slot(self) -> dict[int, int]:
        return {v: i for i, v in enumerate(self.node_order)}

    def permuted(self, perm: Sequence[int]) -> Canvas:
        """Reorder slots; ``perm[k]`` is the old slot placed at new slot k."""
        perm = np.asarray(perm)
        return replace(
            self,
            node_order=tuple(self.node_order[i] for i in perm),
            tokens=self.tokens[perm],
            positions=self.positions[perm],
            mask=self.mask[np.ix_(perm, perm)],
        )

    def dump(self) -> str:
        lines = [
            f"mode: {self.mode}",
            "node_order: " + " ".join(map(str, self.node_order)),
            "tokens: " + " ".join(map(str, self.tokens.tolist())),
            "positions: " + " ".join(map(str, self.positions.tolist())),
        ]
        if self.subgraph_edges is not None:
            lines.append("subgraph_edges: " + " ".join(f"{s}->{d}" for s, d in sorted(self.subgraph_edges)))
        lines.append("mask:")
        lines.extend("".join("1" if x else "0" for x in row) for row in self.mask)
        return "\n".join(lines) + "\n"


def assign_positions(lattice: Lattice) -> dict[int, int]:
    """Canonical position ids.

    Depth-first from the root, visiting children by descending logprob (ties:
    smaller id). The first traversal edge into a node fixes its position at
    one past its predecessor's; the root sits at 0.
    """
    nodes = lattice.node_map

    def ordered(v: int) -> list[int]:
        return sorted(lattice.children[v], key=lambda c: (-nodes[c].logprob, c))

    pos = {lattice.root: 0}
    stack = [(lattice.root, iter(ordered(lattice.root)))]
    while stack:
        v, it = stack[-1]
        for c in it:
            if c not in pos:
                pos[c] = pos[v] + 1
                stack.append((c, iter(ordered(c))))
                break
        else:
            stack.pop()
    return pos


def default_positions(order: Sequence[int]) -> dict[int, int]:
    """Naive sequential ids: a node's position is its canvas slot index."""
    return {v: i for i, v in enumerate(order)}


def _parent_map(lattice: Lattice, edges: Iterable[tuple[int, int]] | None) -> Mapping[int, list[int]]:
    if edges is None:
        return lattice.parents
    out: dict[int, list[int]] = {}
    for s, d in sorted(edges):
        out.setdefault(d, []).append(s)
    return out


def causal_reachability(
    lattice: Lattice,
    canvas_order: Sequence[int],
    edges: Iterable[tuple[int, int]] | None = None,
) -> np.ndarray:
    """Ancestor-or-self mask by forward transitive closure.

    Row i is the union of its parents' rows plus itself, which is the same
    matrix as the identity plus all powers of the transposed adjacency,
    clipped to one. ``edges`` restricts the graph (e.g. to a sampled subgraph).
    """
    slot = {v: i for i, v in enumerate(canvas_order)}
    n = len(canvas_order)
    parents = _parent_map(lattice, edges)
    mask = np.zeros((n, n), dtype=bool)
    for i, v in enumerate(canvas_order):
        mask[i, i] = True
        for p in parents.get(v, ()):
            j = slot.get(p)
            if j is None:
                raise LatticeError(f"parent {p} of {v} is not on the canvas")
            if j >= i:
                raise LatticeError(f"canvas order is not topological: {p} -> {v}")
            mask[i] |= mask[j]
    return mask


def bidirectional_reachability(lattice: Lattice, canvas_order: Sequence[int]) -> np.ndarray:
    """Slots may attend to each other iff they lie on a common root-to-end path.

    In a valid lattice that is exactly ancestor-or-descendant, so the mask is
    the causal mask OR its transpose.
    """
    causal = causal_reachability(lattice, canvas_order)
    return causal | causal.T


def sample_parents(lattice: Lattice, seed: int, weighted: bool = False) -> dict[int, int]:
    """Keep one incoming edge per non-root node, chosen with a seeded RNG."""
    rng = np.random.default_rng(seed)
    nodes = lattice.node_map
    keep: dict[int, int] = {}
    for v in lattice.node_ids:
        ps = lattice.parents[v]
        if v == lattice.root or not ps:
            continue
        if len(ps) == 1:
            keep[v] = ps[0]
            continue
        if weighted:
            w = np.exp(np.array([nodes[p].logprob for p in ps], dtype=np.float64))
            keep[v] = ps[int(rng.choice(len(ps), p=w / w.sum()))]
        else:
            keep[v] = ps[int(rng.integers(len(ps)))]
    return keep


def tree_positions(root: int, parent_of: Mapping[int, int], order: Sequence[int]) -> dict[int, int]:
    pos = {root: 0}
    for v in order:
        if v != root:
            pos[v] = pos[parent_of[v]] + 1
    return pos


def linearize(
    lattice: Lattice,
    mask_mode: str,
    positions: Mapping[int, int],
    mask: np.ndarray,
    *,
    order: Sequence[int] | None = None,
    max_position: int | None = None,
    max_nodes: int | None = None,
    subgraph_edges: frozenset[tuple[int, int]] | None = None,
) -> Canvas:
    """Build the canvas: topological slots, parallel tokens/positions, mask.

    ``mask`` must be indexed by ``order`` (the topological order by default).
    Raises CanvasOverflow when the lattice exceeds the canvas limits.
    """
    order = tuple(topo_order(lattice) if order is None else order)
    n = len(order)
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match {n} canvas slots")
    if max_nodes is not None and n > max_nodes:
        raise CanvasOverflow(f"{n} nodes exceed the canvas length {max_nodes}")
    pos = np.array([positions[v] for v in order], dtype=np.int64)
    if max_position is not None and n and pos.max() > max_position:
        raise CanvasOverflow(f"position {int(pos.max())} exceeds max_position {max_position}")
    nodes = lattice.node_map
    toks = np.array([nodes[v].token for v in order], dtype=np.int64)
    return Canvas(order, toks, pos, mask.copy(), mask_mode, subgraph_edges)


def full_causal(lattice: Lattice, *, position_scheme: str = "canonical",
                max_position: int | None = None) -> Canvas:
    order = topo_order(lattice)
    pos = assign_positions(lattice) if position_scheme == "canonical" else default_positions(order)
    return linearize(lattice, "full-causal", pos, causal_reachability(lattice, order),
                     order=order, max_position=max_position)


def bidirectional(lattice: Lattice, *, position_scheme: str = "canonical",
                  max_position: int | None = None) -> Canvas:
    order = topo_order(lattice)
    pos = assign_positions(lattice) if position_scheme == "canonical" else default_positions(order)
    return linearize(lattice, "bidirectional", pos, bidirectional_reachability(lattice, order),
                     order=order, max_position=max_position)


def single_context(
    lattice: Lattice,
    canvas_order: Sequence[int] | None = None,
    seed: int = 0,
    *,
    max_position: int | None = None,
    weighted: bool = False,
    subgraph_positions: bool = True,
    position_scheme: str = "canonical",
) -> Canvas:
    """One-parent-per-node canvas.

    Each non-root node keeps a single sampled incoming edge; the kept edges
    form a tree under the root, so every token sees one linear history. By
    default positions are re-derived on that tree (depth), so each kept edge
    advances the position by exactly one.
    """
    order = list(topo_order(lattice) if canvas_order is None else canvas_order)
    keep = sample_parents(lattice, seed, weighted)
    sub = frozenset((p, c) for c, p in keep.items())
    mask = causal_reachability(lattice, order, sub)
    if position_scheme == "default":
        pos = default_positions(order)
    elif subgraph_positions:
        pos = tree_positions(lattice.root, keep, order)
    else:
        pos = assign_positions(lattice)
    return linearize(lattice, "single-context", pos, mask, order=order,
                     max_position=max_position, subgraph_edges=sub)


def few_masks(lattice: Lattice, config: MaskConfig) -> list[Canvas]:
    """``config.m`` single-context canvases with seeds seed, seed+1, ..."""
    if config.mode != "single-context":
        raise ValueError("few-mask canvases need mode 'single-context'")
    if config.m < 1:
        raise ValueError("m must be >= 1")
    order = topo_order(lattice)
    return [
        single_context(lattice, order, config.seed + i, max_position=config.max_position,
                       weighted=config.weighted, subgraph_positions=config.subgraph_positions,
                       position_scheme=config.position_scheme)
        for i in range(config.m)
    ]


def build_canvases(lattice: Lattice, config: MaskConfig) -> list[Canvas]:
    if config.mode == "full-causal":
        return [full_causal(lattice, position_scheme=config.position_scheme,
                            max_position=config.max_position)]
    if config.mode == "bidirectional":
        return [bidirectional(lattice, position_scheme=config.position_scheme,
                              max_position=config.max_position)]
    return few_masks(lattice, config)


def path_canvas(lattice: Lattice, node_ids: Sequence[int], *, include_root: bool = True) -> Canvas:
    """Canvas for one hypothesis: sequential positions and a plain causal mask.

    Without the root slot, positions start at 1 (the caller supplies the
    begin-of-sequence context as a cached prefix).
    """
    order = ([lattice.root] if include_root else []) + list(node_ids)
    start = 0 if include_root else 1
    n = len(order)
    nodes = lattice.node_map
    return Canvas(
        tuple(order),
        np.array([nodes[v].token for v in order], dtype=np.int64),
        np.arange(start, start + n, dtype=np.int64),
        np.tril(np.ones((n, n), dtype=bool)),
        "path",
    )


def prune_to_fit(lattice: Lattice, max_position: int, max_nodes: int | None = None) -> Lattice:
    """Drop low-probability material until the canvas limits are met.

    Nodes whose canonical position exceeds ``max_position`` are removed (the
    DFS puts likely continuations first, so these sit on unlikely paths),
    then the lowest-logprob non-root nodes go one at a time while the node
    budget is exceeded. After each removal every node that no longer reaches
    an end, or is no longer reachable from the root, is dropped too.
    """
    current = lattice
    while True:
        pos = assign_positions(current)
        over = {v for v, p in pos.items() if p > max_position}
        if not over and (max_nodes is None or len(current) <= max_nodes):
            return check(current)
        if not over:
            cands = [n for n in current.nodes if n.id != current.root]
            over = {min(cands, key=lambda n: (n.logprob, -n.id)).id}
        keep = set(current.node_map) - over
        edges = [(s, d) for s, d in current.edges if s in keep and d in keep]
        ends = [e for e in current.ends if e in keep]
        if not ends:
            raise CanvasOverflow("pruning removed every hypothesis")
        fwd = _closure(current.root, edges, forward=True)
        back = set()
        for e in ends:
            back |= _closure(e, edges, forward=False)
        keep &= fwd & back
        current = Lattice(
            [n for n in current.nodes if n.id in keep],
            [(s, d) for s, d in edges if s in keep and d in keep],
            current.root,
            [e for e in ends if e in keep],
            current.vocab,
        )
        if not current.ends:
            raise CanvasOverflow("pruning removed every hypothesis")


def _closure(start: int, edges: list[tuple[int, int]], forward: bool) -> set[int]:
    adj: dict[int, list[int]] = {}
    for s, d in edges:
        a, b = (s, d) if forward else (d, s)
        adj.setdefault(a, []).append(b)
    seen, todo = {start}, [start]
    while todo:
        v = todo.pop()
        for c in adj.get(v, ()):
            if c not in seen:
                seen.add(c)
                todo.append(c)
    return seen
