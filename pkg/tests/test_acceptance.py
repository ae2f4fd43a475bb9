"""Acceptance checks. Each prints one PASS/FAIL line and then asserts.

Run under pytest, or directly with ``python tests/test_acceptance.py``.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from latticerank.cli import main as cli_main  # noqa: E402
from latticerank.extraction import ExtractionConfig, best_path  # noqa: E402
from latticerank.harness import (Scoring, attach_oracle, run_diverse, run_eel, run_exhaustive,  # noqa: E402
                                 run_model_score)
from latticerank.lattice import (BOS_TOKEN, Lattice, Node, count_paths, explode, generate_synthetic,  # noqa: E402
                                 pack_candidates, save, topo_order)
from latticerank.masking import MaskConfig, causal_reachability, full_causal  # noqa: E402
from latticerank.scoring import CausalScorer, ScorerSpec  # noqa: E402

from helpers import all_paths, brute_best, power_series_mask, random_dag, unique_ngrams  # noqa: E402

NEAR_OPTIMAL = 0.1


def _line(name, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} {name}: {detail}"


def check_lossless():
    t0 = time.perf_counter()
    scorer = CausalScorer(ScorerSpec(seed=0))
    worst, agree = 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        cands = [rng.integers(1, 1024, size=int(rng.integers(5, 21))).tolist() for _ in range(12)]
        lat = pack_candidates(cands, [(-rng.exponential(1.0, len(c))).tolist() for c in cands])
        hidden = scorer.encode(full_causal(lat), keep_hidden=True).hidden
        for p in explode(lat):
            _, h = scorer.encode_sequence([BOS_TOKEN] + list(lat.tokens(p)))
            worst = max(worst, float(np.abs(np.stack([hidden[v] for v in p]) - h[1:]).max()))
        eel = run_eel(lat, scorer, MaskConfig(mode="full-causal"))
        ex, _ = run_exhaustive(lat, scorer)
        agree += eel.selected == ex.selected
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and agree == 100 and dt < 30
    return ok, f"max |dh| = {worst:.2e} (tol 1e-4), argmax agreement {agree}/100, {dt:.1f}s (< 30s)"


def check_closure():
    bad = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        lat = random_dag(rng, int(rng.integers(2, 16)))
        order = topo_order(lat)
        bad += not np.array_equal(causal_reachability(lat, order), power_series_mask(lat, order))
    return bad == 0, f"{200 - bad}/200 closure masks equal the matrix-power formula"


def check_best_path():
    bad = 0
    for seed in range(200):
        rng = np.random.default_rng(10_000 + seed)
        lat = random_dag(rng, int(rng.integers(2, 13)))
        scores = {v: float(rng.normal()) for v in lat.node_map if v != lat.root}
        for normalize in (True, False):
            p = best_path(lat, scores, normalize)
            want, _ = brute_best(lat, scores, normalize)
            bad += p.node_ids != want
    return bad == 0, f"{bad} mismatches over 200 DAGs x 2 normalization modes"


def reentrant_lattices(count, chains=4, length=8, merge_prob=0.3):
    out, seed = [], 0
    while len(out) < count:
        lat = generate_synthetic(seed, chains, length, merge_prob, 1024)
        if lat.has_reentrancy:
            out.append(lat)
        seed += 1
    return out


def check_few_mask():
    scorer = CausalScorer(ScorerSpec(seed=0))
    ms = (1, 2, 4, 8, 16)
    monotone, better, strict = 0, 0, 0
    lats = reentrant_lattices(50)
    for i, lat in enumerate(lats):
        _, oracle = run_exhaustive(lat, scorer)
        reps = [attach_oracle(run_eel(lat, scorer, MaskConfig(m=m, seed=i)), oracle, scorer, lat) for m in ms]
        vals = [r.norm_score for r in reps]
        monotone += all(b >= a for a, b in zip(vals, vals[1:]))
        better += reps[-1].degradation <= reps[0].degradation
        strict += vals[-1] > vals[0]
    ok = monotone == 50 and better >= 45
    return ok, (f"monotone in m for {monotone}/50 lattices; "
                f"m=16 degradation <= m=1 in {better}/50 (need >= 45), strictly better in {strict}")


def check_efficiency():
    lat = generate_synthetic(0, 2, 10, 1.0, 1024)
    n_paths, _ = count_paths(lat)
    sigma = sum(len(p) for p in all_paths(lat))
    eel_scorer, ex_scorer = CausalScorer(), CausalScorer()
    eel = run_eel(lat, eel_scorer, MaskConfig(m=1))
    ex, _ = run_exhaustive(lat, ex_scorer)
    factor = ex_scorer.tokens_encoded / eel_scorer.tokens_encoded
    ok = (n_paths >= 1000 and len(lat) <= 100
          and eel.nodes_scored == eel_scorer.tokens_encoded == len(lat)
          and ex.nodes_scored == ex_scorer.tokens_encoded == sigma and factor >= 100)
    return ok, (f"{n_paths} paths in {len(lat)} nodes; EEL scored {eel_scorer.tokens_encoded} (|V| = {len(lat)}), "
                f"exhaustive {ex_scorer.tokens_encoded} (sum of lengths = {sigma}); factor {factor:.0f}x")


def disjoint_chain_lattice(seed, n=5, length=8, merges=4):
    """n chains with globally distinct tokens plus a few equal-depth cross edges."""
    rng = np.random.default_rng(seed)
    toks = rng.choice(np.arange(1, 1024), size=n * length, replace=False)

    def nid(c, d):
        return 1 + c * length + d

    nodes, edges = [Node(0, BOS_TOKEN, 0.0)], []
    for c in range(n):
        for d in range(length):
            nodes.append(Node(nid(c, d), int(toks[c * length + d]), float(-rng.exponential())))
            edges.append((0 if d == 0 else nid(c, d - 1), nid(c, d)))
    for _ in range(merges):
        c, o = rng.choice(n, 2, replace=False)
        d = int(rng.integers(1, length))
        if (nid(c, d - 1), nid(o, d)) not in edges:
            edges.append((nid(c, d - 1), nid(o, d)))
    chains = [tuple(nid(c, d) for d in range(length)) for c in range(n)]
    return Lattice(nodes, edges, 0, [ch[-1] for ch in chains]), chains


def check_diversity():
    lat, chains = disjoint_chain_lattice(2)
    scorer = CausalScorer(ScorerSpec(seed=0))
    _, oracle = run_exhaustive(lat, scorer)
    near = [ch for ch in chains if oracle.best[1] - oracle.value(ch) <= NEAR_OPTIMAL]
    reps = run_diverse(lat, scorer, ExtractionConfig(k=5, w=0.2), MaskConfig(mode="full-causal"))
    grams = [unique_ngrams([r.tokens for r in reps[:i + 1]], 4) for i in range(5)]
    objs = [r.objective for r in reps]
    ok = (len(near) >= 3 and grams[0] < grams[1] < grams[2]
          and all(b <= a for a, b in zip(objs, objs[1:])))
    return ok, (f"{len(near)} token-disjoint paths within {NEAR_OPTIMAL} of optimum; cumulative unique 4-grams "
                f"{grams}; objective {[round(o, 4) for o in objs]}")


def check_ensemble():
    zero = CausalScorer(ScorerSpec(seed=0), zero_head=True)
    real = CausalScorer(ScorerSpec(seed=0))
    full = MaskConfig(mode="full-causal")
    same_model, same_tfr = 0, 0
    for seed in range(50):
        lat = generate_synthetic(seed, 4, 8, 0.3, 1024)
        ens = run_eel(lat, Scoring(zero, 0.75), full)
        same_model += ens.selected == run_model_score(lat).selected
        lam0 = run_eel(lat, Scoring(real, 0.0), full)
        same_tfr += lam0.selected == run_eel(lat, Scoring(real), full).selected
    ok = same_model == 50 and same_tfr == 50
    return ok, f"zero head, lambda=0.75 vs model score: {same_model}/50; lambda=0 vs TFR: {same_tfr}/50"


def check_determinism(workdir):
    workdir = Path(workdir)
    files = []
    for i, lat in enumerate(reentrant_lattices(3, chains=3, length=6)):
        f = workdir / f"lat{i}.json"
        save(lat, f)
        files.append(str(f))
    streams = []
    for run in range(2):
        blob = b""
        for cmd in (["ablate", *files, "--seed", "3"],
                    ["rerank", *files, "--mask", "few", "--m", "4", "--oracle", "--summary"],
                    ["rerank", *files, "--method", "samp-n", "--n", "5", "--seed", "7"],
                    ["diverse", files[0], "--k", "5", "--w", "0.3"]):
            out = workdir / f"run{run}.jsonl"
            if cli_main(cmd + ["-o", str(out)]) != 0:
                return False, f"command failed: {cmd[0]}"
            blob += out.read_bytes()
        streams.append(blob)
    ok = streams[0] == streams[1] and len(streams[0]) > 0
    return ok, f"two runs, {len(streams[0])} bytes each, identical = {streams[0] == streams[1]}"


CHECKS = [
    ("lossless trie equivalence", check_lossless),
    ("closure vs matrix powers", check_closure),
    ("best path vs brute force", check_best_path),
    ("few-mask dominance", check_few_mask),
    ("candidates-per-node accounting", check_efficiency),
    ("diversity trade-off", check_diversity),
    ("ensemble sanity", check_ensemble),
    ("determinism", check_determinism),
]


@pytest.mark.parametrize("name,check", CHECKS, ids=[n.replace(" ", "-") for n, _ in CHECKS])
def test_acceptance(name, check, capsys, tmp_path):
    ok, detail = check(tmp_path) if check is check_determinism else check()
    with capsys.disabled():
        print("\n" + _line(name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    failed = 0
    for name, check in CHECKS:
        with tempfile.TemporaryDirectory() as tmp:
            ok, detail = check(tmp) if check is check_determinism else check()
        print(_line(name, ok, detail), flush=True)
        failed += not ok
    sys.exit(1 if failed else 0)
