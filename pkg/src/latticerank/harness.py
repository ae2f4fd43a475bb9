"""End-to-end reranking runs, degradation against the exhaustive oracle,
and candidates-per-node accounting."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .extraction import ExtractionConfig, best_path, diverse_paths, few_mask_select
from .lattice import Lattice, Path, count_paths, explode, suffix_counts
from .masking import CanvasOverflow, MaskConfig, build_canvases, prune_to_fit
from .scoring import TokenScorer, TokenScores, aggregate, ensemble, model_score

log = logging.getLogger(__name__)

DEFAULT_MAX_PATHS = 10_000
CANDIDATE_CAP = 10**12


@dataclass
class RerankReport:
    method: str
    selected: tuple[int, ...]
    tokens: tuple[int, ...]
    raw_score: float
    norm_score: float
    candidates: int
    nodes: int
    nodes_scored: int
    candidates_capped: bool = False
    m: int = 1
    # selection rescored by encoding it alone; what degradation is measured on
    true_score: float | None = None
    oracle_score: float | None = None
    degradation: float | None = None
    objective: float | None = None
    lattice: str | None = None
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def cn_ratio(self) -> float:
        return self.candidates / self.nodes_scored if self.nodes_scored else float("inf")

    def to_record(self, *, timings: bool = False) -> dict:
        rec = {
            "method": self.method,
            "lattice": self.lattice,
            "selected": list(self.selected),
            "tokens": list(self.tokens),
            "raw_score": self.raw_score,
            "norm_score": self.norm_score,
            "true_score": self.true_score,
            "oracle_score": self.oracle_score,
            "degradation": self.degradation,
            "candidates": self.candidates,
            "candidates_capped": self.candidates_capped,
            "nodes": self.nodes,
            "nodes_scored": self.nodes_scored,
            "cn_ratio": self.cn_ratio,
            "m": self.m,
        }
        if self.objective is not None:
            rec["objective"] = self.objective
        if timings:
            rec["timings"] = dict(self.timings)
        return rec

    def to_json(self, *, timings: bool = False) -> str:
        return json.dumps(self.to_record(timings=timings), sort_keys=True)


@dataclass
class Oracle:
    """Exhaustive per-hypothesis scores: path -> (raw, norm)."""

    scores: dict[tuple[int, ...], tuple[float, float]]
    normalize: bool = True

    @property
    def best(self) -> tuple[tuple[int, ...], float]:
        k = 1 if self.normalize else 0
        path = max(self.scores, key=lambda p: self.scores[p][k])
        return path, self.scores[path][k]

    def value(self, path: Sequence[int]) -> float:
        return self.scores[tuple(path)][1 if self.normalize else 0]


class Scoring:
    """A scorer plus optional ensembling with base-model log-probabilities.

    ``scorer=None`` means pure model score (no encoder at all).
    """

    def __init__(self, scorer: TokenScorer | None, lam: float | None = None):
        if scorer is None and lam is not None:
            raise ValueError("lambda needs a token scorer to ensemble with")
        self.scorer = scorer
        self.lam = lam

    @property
    def label(self) -> str:
        if self.scorer is None:
            return "model"
        return "tfr" if self.lam is None else "ensemble"

    def _mix(self, lattice: Lattice, tfr: TokenScores) -> TokenScores:
        if self.lam is None:
            return tfr
        return ensemble(tfr, model_score(lattice, tfr.per_node), self.lam)

    def canvas(self, lattice, canvas) -> TokenScores:
        if self.scorer is None:
            return model_score(lattice, canvas.node_order)
        return self._mix(lattice, self.scorer.encode(canvas))

    def path(self, lattice, node_ids) -> TokenScores:
        if self.scorer is None:
            return model_score(lattice, node_ids)
        return self._mix(lattice, self.scorer.encode_path(lattice, node_ids))

    @property
    def max_lattice_position(self) -> int | None:
        return None if self.scorer is None else self.scorer.max_lattice_position


def _as_scoring(scorer) -> Scoring:
    return scorer if isinstance(scorer, Scoring) else Scoring(scorer)


def _report(method, lattice, path: Path, nodes_scored, *, m=1, timings=None, objective=None) -> RerankReport:
    cands, capped = count_paths(lattice, cap=CANDIDATE_CAP)
    return RerankReport(
        method=method, selected=path.node_ids, tokens=lattice.tokens(path.node_ids),
        raw_score=path.raw_score, norm_score=path.norm_score,
        candidates=cands, candidates_capped=capped, nodes=len(lattice),
        nodes_scored=nodes_scored, m=m, timings=timings or {}, objective=objective,
    )


def exhaustive_scores(lattice: Lattice, scorer, max_paths: int = DEFAULT_MAX_PATHS,
                      normalize: bool = True) -> tuple[Oracle, int]:
    """Encode every path on its own. Returns the oracle and tokens encoded."""
    scoring = _as_scoring(scorer)
    out, used = {}, 0
    for p in explode(lattice, max_paths):
        out[p] = aggregate(p, scoring.path(lattice, p))
        used += len(p)
    return Oracle(out, normalize), used


def run_exhaustive(lattice: Lattice, scorer, max_paths: int = DEFAULT_MAX_PATHS,
                   normalize: bool = True) -> tuple[RerankReport, Oracle]:
    t0 = time.perf_counter()
    oracle, used = exhaustive_scores(lattice, scorer, max_paths, normalize)
    t1 = time.perf_counter()
    # explode order is deterministic; the first maximum wins ties
    k = 1 if normalize else 0
    best = None
    for p, sc in oracle.scores.items():
        if best is None or sc[k] > oracle.scores[best][k]:
            best = p
    raw, norm = oracle.scores[best]
    rep = _report("exhaustive", lattice, Path(best, raw, norm), used,
                  timings={"prepare": 0.0, "encode": t1 - t0, "extract": time.perf_counter() - t1})
    rep.candidates, rep.candidates_capped = len(oracle.scores), False
    attach_oracle(rep, oracle)
    return rep, oracle


def sample_paths(lattice: Lattice, n: int, seed: int, *, uniform_paths: bool = True,
                 max_paths: int = DEFAULT_MAX_PATHS) -> list[tuple[int, ...]]:
    """Draw n distinct root-to-end paths (all of them if n >= the path count).

    Paths are drawn uniformly over candidates by weighting each step by the
    number of completions below the child; ``uniform_paths=False`` walks
    outgoing edges uniformly instead.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    total, _ = count_paths(lattice, cap=CANDIDATE_CAP)
    if n >= total:
        return explode(lattice, max_paths)
    if uniform_paths and 2 * n > total and total <= max_paths:
        allp = explode(lattice, max_paths)
        idx = sorted(rng.choice(len(allp), size=n, replace=False).tolist())
        return [allp[i] for i in idx]
    below = suffix_counts(lattice)
    ends = set(lattice.ends)
    chosen: dict[tuple[int, ...], None] = {}
    while len(chosen) < n:
        v, path = lattice.root, []
        while True:
            if v in ends:
                break
            kids = lattice.children[v]
            if uniform_paths:
                w = np.array([float(below[c]) for c in kids])
            else:
                w = np.ones(len(kids))
            v = kids[int(rng.choice(len(kids), p=w / w.sum()))]
            path.append(v)
        chosen.setdefault(tuple(path), None)
    return list(chosen)


def run_sampled(lattice: Lattice, scorer, n: int, seed: int = 0, *, normalize: bool = True,
                uniform_paths: bool = True, max_paths: int = DEFAULT_MAX_PATHS) -> RerankReport:
    """Encode n sampled paths individually and keep the best; n = 1 is RAND."""
    scoring = _as_scoring(scorer)
    t0 = time.perf_counter()
    paths = sample_paths(lattice, n, seed, uniform_paths=uniform_paths, max_paths=max_paths)
    t1 = time.perf_counter()
    scored = [(p, aggregate(p, scoring.path(lattice, p))) for p in paths]
    t2 = time.perf_counter()
    k = 1 if normalize else 0
    best_p, best_s = scored[0]
    for p, s in scored[1:]:
        if s[k] > best_s[k]:
            best_p, best_s = p, s
    method = "rand" if n == 1 else f"tfr-{n}-samp"
    rep = _report(method, lattice, Path(best_p, *best_s), sum(len(p) for p in paths),
                  timings={"prepare": t1 - t0, "encode": t2 - t1, "extract": time.perf_counter() - t2})
    rep.candidates, rep.candidates_capped = len(paths), False
    rep.true_score = best_s[k]
    return rep


def eel_method_name(config: MaskConfig) -> str:
    if config.position_scheme == "default":
        return "eel-default-pos" if config.mode == "full-causal" else f"eel-default-pos-{config.mode}"
    if config.mode == "full-causal":
        return "eel-full"
    if config.mode == "bidirectional":
        return "eel-bidirectional"
    return f"eel-{config.m}-mask"


def _fit(lattice: Lattice, config: MaskConfig, scoring: Scoring, prune: bool) -> tuple[Lattice, MaskConfig]:
    limit = scoring.max_lattice_position
    if limit is not None and limit < config.max_position:
        config = replace(config, max_position=limit)
    if prune:
        try:
            build_canvases(lattice, replace(config, m=1))
        except CanvasOverflow:
            log.info("pruning lattice to fit max_position=%d", config.max_position)
            lattice = prune_to_fit(lattice, config.max_position)
    return lattice, config


def run_eel(
    lattice: Lattice,
    scorer,
    mask_config: MaskConfig = MaskConfig(),
    extraction: ExtractionConfig = ExtractionConfig(),
    *,
    prune: bool = False,
    workers: int | None = None,
) -> RerankReport:
    """Canvases -> one encoder pass per canvas -> DP extraction.

    Full-causal and bidirectional canvases are searched over the whole
    lattice; single-context canvases each over their own subgraph, keeping
    the best normalized result across the m masks.
    """
    scoring = _as_scoring(scorer)
    t0 = time.perf_counter()
    lattice, config = _fit(lattice, mask_config, scoring, prune)
    canvases = build_canvases(lattice, config)
    t1 = time.perf_counter()
    scored = []

    def score(canvas):
        s = scoring.canvas(lattice, canvas)
        scored.append(len(canvas))
        return s

    if config.mode == "single-context":
        # per-mask encode and extract are interleaved; timed together as encode
        path = few_mask_select(lattice, canvases, score, extraction.normalize, workers=workers).path
        t2 = t3 = time.perf_counter()
    else:
        s = score(canvases[0])
        t2 = time.perf_counter()
        path = best_path(lattice, s, extraction.normalize)
        t3 = time.perf_counter()
    nodes_scored = sum(scored) if scoring.scorer is not None else len(lattice) * config.m
    return _report(eel_method_name(config), lattice, path, nodes_scored, m=config.m,
                   timings={"prepare": t1 - t0, "encode": t2 - t1, "extract": t3 - t2})


def run_model_score(lattice: Lattice, normalize: bool = True) -> RerankReport:
    t0 = time.perf_counter()
    path = best_path(lattice, model_score(lattice), normalize)
    return _report("model-score", lattice, path, len(lattice),
                   timings={"prepare": 0.0, "encode": 0.0, "extract": time.perf_counter() - t0})


def run_diverse(
    lattice: Lattice,
    scorer,
    extraction: ExtractionConfig,
    mask_config: MaskConfig = MaskConfig(mode="full-causal"),
) -> list[RerankReport]:
    """k diverse samples from one canvas pass (the first canvas of the config)."""
    scoring = _as_scoring(scorer)
    lattice, config = _fit(lattice, mask_config, scoring, False)
    canvas = build_canvases(lattice, replace(config, m=1))[0]
    scores = scoring.canvas(lattice, canvas)
    paths = diverse_paths(lattice, scores, extraction, edges=canvas.subgraph_edges)
    return [
        _report(f"eel-diverse-{t + 1}", lattice, p, len(canvas), objective=p.objective)
        for t, p in enumerate(paths)
    ]


def attach_oracle(report: RerankReport, oracle: Oracle, scorer=None, lattice: Lattice | None = None) -> RerankReport:
    """Fill true score, oracle score and degradation from exhaustive scores."""
    sel = tuple(report.selected)
    if sel in oracle.scores:
        true = oracle.value(sel)
    elif scorer is not None and lattice is not None:
        raw, norm = aggregate(sel, _as_scoring(scorer).path(lattice, sel))
        true = norm if oracle.normalize else raw
    else:
        raise ValueError("selected path missing from the oracle table")
    report.true_score = true
    report.oracle_score = oracle.best[1]
    report.degradation = report.oracle_score - true
    return report


def run_ablation(
    lattice: Lattice,
    scorer,
    *,
    seed: int = 0,
    normalize: bool = True,
    max_paths: int = DEFAULT_MAX_PATHS,
    prune: bool = False,
) -> list[RerankReport]:
    """Full-context, single-context m in {1, 8, 16}, default positions,
    bidirectional, RAND and exhaustive rows on one lattice and scorer."""
    ext = ExtractionConfig(normalize=normalize)
    rows = [run_eel(lattice, scorer, MaskConfig(mode="full-causal"), ext, prune=prune)]
    rows += [run_eel(lattice, scorer, MaskConfig(mode="single-context", m=m, seed=seed), ext, prune=prune)
             for m in (1, 8, 16)]
    rows.append(run_eel(lattice, scorer, MaskConfig(mode="full-causal", position_scheme="default"), ext, prune=prune))
    rows.append(run_eel(lattice, scorer, MaskConfig(mode="bidirectional"), ext, prune=prune))
    rows.append(run_sampled(lattice, scorer, 1, seed, normalize=normalize, max_paths=max_paths))
    ex, oracle = run_exhaustive(lattice, scorer, max_paths, normalize)
    for r in rows:
        attach_oracle(r, oracle, scorer, lattice)
    rows.append(ex)
    return rows


def run_batch(items: Sequence, fn: Callable, workers: int | None = None) -> list:
    """Apply fn to each item; results come back in input order."""
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def summarize(reports: Sequence[RerankReport]) -> dict[str, dict[str, float]]:
    """Per-method means of the numeric report fields."""
    keys = ("norm_score", "true_score", "oracle_score", "degradation", "cn_ratio",
            "nodes_scored", "candidates", "nodes")
    groups: dict[str, list[RerankReport]] = {}
    for r in reports:
        groups.setdefault(r.method, []).append(r)
    out = {}
    for method, rs in groups.items():
        row = {"count": len(rs)}
        for k in keys:
            vals = [getattr(r, k) for r in rs if getattr(r, k) is not None]
            if vals:
                row[f"mean_{k}"] = float(np.mean(vals))
        out[method] = row
    return out
