"""Best-path extraction over scored lattices."""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .lattice import Lattice, Path, topo_order
from .masking import Canvas
from .scoring import TokenScores, aggregate


@dataclass(frozen=True)
class ExtractionConfig:
    k: int = 1
    w: float = 0.0
    normalize: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.w < 0:
            raise ValueError("w must be >= 0")


@dataclass(frozen=True)
class FewMaskResult:
    path: Path
    index: int
    per_mask: tuple[Path, ...]


def _table(scores: TokenScores | Mapping[int, float]) -> Mapping[int, float]:
    return scores.per_node if isinstance(scores, TokenScores) else scores


def best_path(
    lattice: Lattice,
    scores: TokenScores | Mapping[int, float],
    normalize: bool = True,
    *,
    edges: Iterable[tuple[int, int]] | None = None,
    penalty: Mapping[int, float] | None = None,
) -> Path:
    """Highest-scoring root-to-end path by a forward DP over the topological order.

    Unnormalized, this is the plain Viterbi recursion: each node keeps the
    best-scoring parent prefix. Normalized, each node keeps the best prefix
    per prefix length, so dividing by length at the ends is exact even when
    prefixes into a node differ in length. Ties go to the smaller parent id,
    then the smaller end id, then the shorter path.

    ``edges`` restricts the search to a subgraph; ``penalty`` is subtracted
    from node scores (the reported raw/norm scores stay unpenalized).
    """
    table = _table(scores)
    if not lattice.ends:
        raise ValueError("lattice has no ends")
    if edges is None:
        parents = lattice.parents
    else:
        parents = {}
        for s, d in sorted(edges):
            parents.setdefault(d, []).append(s)

    root = lattice.root
    # node -> {key: (score, length, backpointer)}; key is the length when normalizing
    best: dict[int, dict[int, tuple[float, int, tuple[int, int] | None]]] = {root: {0: (0.0, 0, None)}}
    for c in topo_order(lattice):
        if c == root:
            continue
        try:
            s = table[c]
        except KeyError:
            raise ValueError(f"node {c} has no score") from None
        if penalty:
            s -= penalty.get(c, 0.0)
        cell: dict[int, tuple[float, int, tuple[int, int] | None]] = {}
        for p in parents.get(c, ()):
            for key, (acc, length, _) in best.get(p, {}).items():
                cand = acc + s
                nkey = length + 1 if normalize else 0
                cur = cell.get(nkey)
                if cur is None or cand > cur[0]:
                    cell[nkey] = (cand, length + 1, (p, key))
        if cell:
            best[c] = cell

    choice = None
    for e in lattice.ends:
        for key in sorted(best.get(e, {})):
            acc, length, _ = best[e][key]
            if length == 0:
                continue
            val = acc / length if normalize else acc
            if choice is None or val > choice[0]:
                choice = (val, e, key)
    if choice is None:
        raise ValueError("no end is reachable in the searched graph")

    objective, node, key = choice
    ids = []
    while node != root:
        ids.append(node)
        node, key = best[node][key][2]
    ids.reverse()
    raw, norm = aggregate(ids, table)
    return Path(tuple(ids), raw, norm, objective if penalty else None)


def best_path_in_subgraph(
    lattice: Lattice,
    canvas: Canvas,
    scores: TokenScores | Mapping[int, float],
    normalize: bool = True,
) -> Path:
    """Best path using only the edges a single-context canvas kept."""
    if canvas.subgraph_edges is None:
        raise ValueError("canvas carries no sampled subgraph")
    return best_path(lattice, scores, normalize, edges=canvas.subgraph_edges)


def _objective(path: Path, normalize: bool) -> float:
    return path.norm_score if normalize else path.raw_score


def few_mask_select(
    lattice: Lattice,
    canvases: Sequence[Canvas],
    scorer,
    normalize: bool = True,
    *,
    workers: int | None = None,
) -> FewMaskResult:
    """Score every canvas, extract each one's best path, keep the best of those.

    ``scorer`` is a TokenScorer or any callable mapping a canvas to scores.
    Canvases without a subgraph are searched over the full lattice. Ties go
    to the earliest canvas.
    """
    if not canvases:
        raise ValueError("no canvases to select from")
    score: Callable[[Canvas], TokenScores] = scorer.encode if hasattr(scorer, "encode") else scorer

    def one(canvas: Canvas) -> Path:
        return best_path(lattice, score(canvas), normalize, edges=canvas.subgraph_edges)

    if workers and workers > 1 and len(canvases) > 1:
        with ThreadPoolExecutor(workers) as pool:
            paths = list(pool.map(one, canvases))
    else:
        paths = [one(c) for c in canvases]
    idx = 0
    for i, p in enumerate(paths):
        if _objective(p, normalize) > _objective(paths[idx], normalize):
            idx = i
    return FewMaskResult(paths[idx], idx, tuple(paths))


def diverse_paths(
    lattice: Lattice,
    scores: TokenScores | Mapping[int, float],
    config: ExtractionConfig = ExtractionConfig(),
    *,
    edges: Iterable[tuple[int, int]] | None = None,
) -> list[Path]:
    """``config.k`` rounds of best-path search with token-reuse penalties.

    Before each round every node loses ``w`` times the number of times its
    token id occurs across all previously returned paths. Each returned Path
    carries its unpenalized scores and, in ``objective``, the penalized value
    it was selected with.
    """
    table = _table(scores)
    nodes = lattice.node_map
    seen: Counter[int] = Counter()
    edge_list = None if edges is None else list(edges)
    out: list[Path] = []
    for _ in range(config.k):
        penalty = {v: config.w * seen[n.token] for v, n in nodes.items() if seen[n.token]}
        p = best_path(lattice, table, config.normalize, edges=edge_list, penalty=penalty)
        if p.objective is None:
            p = Path(p.node_ids, p.raw_score, p.norm_score, _objective(p, config.normalize))
        out.append(p)
        seen.update(nodes[v].token for v in p.node_ids)
    return out
