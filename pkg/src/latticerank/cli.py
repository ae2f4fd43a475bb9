"""Command-line harness.

Exit codes: 0 success, 1 invalid input or validation failure, 2 resource limit (path cap or
canvas overflow).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path as FilePath

from . import harness
from .extraction import ExtractionConfig
from .lattice import (Lattice, LatticeError, PathLimitExceeded, explode, generate_synthetic, load,
                      pack_candidates, save, validate)
from .masking import CanvasOverflow, MaskConfig, build_canvases
from .scoring import CausalScorer, LookupScorer, ScorerSpec

EXIT_OK, EXIT_INVALID, EXIT_LIMIT = 0, 1, 2

MASK_CHOICES = {"full": "full-causal", "single": "single-context", "few": "single-context",
                "bidirectional": "bidirectional"}


def _read_rows(path: str, cast) -> list[list]:
    rows = []
    for i, line in enumerate(FilePath(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([cast(x) for x in line.split()])
        except ValueError as exc:
            raise LatticeError(f"{path}:{i}: {exc}") from None
    return rows


def _emit(lines, out: str | None) -> None:
    text = "".join(line + "\n" for line in lines)
    if out:
        FilePath(out).write_text(text)
    else:
        sys.stdout.write(text)


def _scorer(args):
    if args.scorer == "model":
        return harness.Scoring(None, args.lam)
    if args.scorer == "lookup":
        base = LookupScorer(args.vocab_size, args.scorer_seed)
    else:
        if args.scorer_spec:
            spec = ScorerSpec.from_text(FilePath(args.scorer_spec).read_text())
        else:
            spec = ScorerSpec(vocab_size=args.vocab_size, seed=args.scorer_seed)
        base = CausalScorer(spec)
        if args.weights:
            base.load_weights(args.weights)
    return harness.Scoring(base, args.lam)


def _mask_config(args) -> MaskConfig:
    mode = MASK_CHOICES[args.mask]
    m = args.m if args.mask == "few" else 1
    return MaskConfig(mode=mode, m=m, seed=args.seed, max_position=args.max_position,
                      position_scheme=args.positions)


def _lattices(paths):
    return [(p, load(p)) for p in paths]


def _records(reports, label, timings):
    for r in reports:
        r.lattice = label
        yield r.to_json(timings=timings)


def _summary_line(reports) -> str:
    return json.dumps({"summary": harness.summarize(reports)}, sort_keys=True)


# ---------------------------------------------------------------- commands


def cmd_pack(args) -> int:
    cands = _read_rows(args.candidates, int)
    lps = _read_rows(args.logprobs, float) if args.logprobs else None
    lattice = pack_candidates(cands, lps)
    save(lattice, args.output)
    print(f"packed {len(cands)} candidates into {len(lattice)} nodes -> {args.output}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    lattice = generate_synthetic(args.seed, args.chains, args.length, args.merge_prob, args.vocab)
    save(lattice, args.output)
    return EXIT_OK


def cmd_validate(args) -> int:
    status = EXIT_OK
    for path in args.lattices:
        try:
            data = json.loads(FilePath(path).read_text())
            diags = validate(Lattice.from_dict(data))
        except (LatticeError, json.JSONDecodeError) as exc:
            print(f"{path}: {exc}")
            status = EXIT_INVALID
            continue
        if diags:
            status = EXIT_INVALID
            for d in diags:
                print(f"{path}: {d.kind}: {d.message}")
        else:
            print(f"{path}: ok")
    return status


def cmd_explode(args) -> int:
    lattice = load(args.lattice)
    paths = explode(lattice, args.max_paths)
    if args.ids:
        _emit((" ".join(map(str, p)) for p in paths), args.output)
    else:
        _emit((" ".join(map(str, lattice.tokens(p))) for p in paths), args.output)
    return EXIT_OK


def _rerank_one(args, scoring, label, lattice):
    ext = ExtractionConfig(normalize=args.normalize)
    if args.method == "eel":
        rep = harness.run_eel(lattice, scoring, _mask_config(args), ext, prune=args.prune,
                              workers=args.mask_workers)
    elif args.method == "exhaustive":
        rep, _ = harness.run_exhaustive(lattice, scoring, args.max_paths, args.normalize)
    elif args.method == "rand":
        rep = harness.run_sampled(lattice, scoring, 1, args.seed, normalize=args.normalize,
                                  max_paths=args.max_paths)
    elif args.method == "samp-n":
        rep = harness.run_sampled(lattice, scoring, args.n, args.seed, normalize=args.normalize,
                                  max_paths=args.max_paths)
    else:
        rep = harness.run_model_score(lattice, args.normalize)
    if args.oracle and rep.oracle_score is None:
        _, oracle = harness.run_exhaustive(lattice, scoring, args.max_paths, args.normalize)
        harness.attach_oracle(rep, oracle, scoring, lattice)
    rep.lattice = label
    return rep


def cmd_rerank(args) -> int:
    scoring = _scorer(args)
    items = _lattices(args.lattices)
    reports = harness.run_batch(items, lambda it: _rerank_one(args, scoring, *it), args.workers)
    lines = [r.to_json(timings=args.timings) for r in reports]
    if args.summary:
        lines.append(_summary_line(reports))
    _emit(lines, args.output)
    return EXIT_OK


def cmd_diverse(args) -> int:
    scoring = _scorer(args)
    lattice = load(args.lattice)
    reps = harness.run_diverse(lattice, scoring, ExtractionConfig(args.k, args.w, args.normalize),
                               _mask_config(args))
    _emit(_records(reps, args.lattice, args.timings), args.output)
    return EXIT_OK


def cmd_ablate(args) -> int:
    scoring = _scorer(args)
    items = _lattices(args.lattices)

    def one(item):
        label, lattice = item
        rows = harness.run_ablation(lattice, scoring, seed=args.seed, normalize=args.normalize,
                                    max_paths=args.max_paths, prune=args.prune)
        for r in rows:
            r.lattice = label
        return rows

    groups = harness.run_batch(items, one, args.workers)
    reports = [r for g in groups for r in g]
    lines = [r.to_json(timings=args.timings) for r in reports]
    lines.append(_summary_line(reports))
    _emit(lines, args.output)
    return EXIT_OK


def cmd_bench(args) -> int:
    scoring = _scorer(args)
    reports = []
    for i in range(args.count):
        lattice = generate_synthetic(args.seed + i, args.chains, args.length, args.merge_prob, args.vocab_size)
        label = f"synth-{args.seed + i}"
        rows = [
            harness.run_eel(lattice, scoring, MaskConfig(mode="single-context", m=1, seed=args.seed)),
            harness.run_eel(lattice, scoring, MaskConfig(mode="single-context", m=args.m, seed=args.seed)),
        ]
        ex, oracle = harness.run_exhaustive(lattice, scoring, args.max_paths)
        for r in rows:
            harness.attach_oracle(r, oracle, scoring, lattice)
        rows.append(ex)
        for r in rows:
            r.lattice = label
        reports.extend(rows)
    lines = [r.to_json(timings=True) for r in reports]
    lines.append(_summary_line(reports))
    _emit(lines, args.output)
    return EXIT_OK


def cmd_canvas(args) -> int:
    lattice = load(args.lattice)
    config = _mask_config(args)
    _emit([c.dump() for c in build_canvases(lattice, config)], args.output)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_scorer_opts(p):
    g = p.add_argument_group("scorer")
    g.add_argument("--scorer", choices=["tfr", "lookup", "model"], default="tfr")
    g.add_argument("--scorer-spec", help="key=value scorer spec file")
    g.add_argument("--weights", help="weight dump (.npz) to load into the encoder")
    g.add_argument("--scorer-seed", type=int, default=0)
    g.add_argument("--vocab-size", type=int, default=1024)
    g.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="ensemble with model log-probs at this weight (e.g. 0.75)")


def _add_mask_opts(p, default="single"):
    p.add_argument("--mask", choices=sorted(MASK_CHOICES), default=default)
    p.add_argument("--m", type=int, default=8, help="number of masks for --mask few")
    p.add_argument("--positions", choices=["canonical", "default"], default="canonical")
    p.add_argument("--max-position", type=int, default=511)


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--max-paths", type=int, default=harness.DEFAULT_MAX_PATHS)
    p.add_argument("--timings", action="store_true", help="include wall-clock timings in records")
    p.add_argument("--prune", action="store_true", help="prune lattices that overflow the canvas")
    p.add_argument("-o", "--output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latticerank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", help="candidates file -> lattice file")
    p.add_argument("candidates", help="one whitespace-separated token-id sequence per line")
    p.add_argument("--logprobs", help="parallel file of per-token log-probabilities")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("synth", help="seeded synthetic lattice")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--length", type=int, default=10)
    p.add_argument("--merge-prob", type=float, default=0.3)
    p.add_argument("--vocab", type=int, default=1024)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check lattice invariants")
    p.add_argument("lattices", nargs="+")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("explode", help="list every hypothesis")
    p.add_argument("lattice")
    p.add_argument("--max-paths", type=int, default=harness.DEFAULT_MAX_PATHS)
    p.add_argument("--ids", action="store_true", help="print node ids instead of tokens")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_explode)

    p = sub.add_parser("rerank", help="select the best hypothesis")
    p.add_argument("lattices", nargs="+")
    p.add_argument("--method", choices=["rand", "samp-n", "eel", "exhaustive", "model"], default="eel")
    p.add_argument("--n", type=int, default=8, help="sample count for samp-n")
    p.add_argument("--oracle", action="store_true", help="also score exhaustively and report degradation")
    p.add_argument("--summary", action="store_true", help="append per-method means")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--mask-workers", type=int, default=None)
    _add_mask_opts(p)
    _add_common(p)
    _add_scorer_opts(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("diverse", help="k diverse high-scoring hypotheses")
    p.add_argument("lattice")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--w", type=float, default=0.1)
    _add_mask_opts(p, default="full")
    _add_common(p)
    _add_scorer_opts(p)
    p.set_defaults(func=cmd_diverse)

    p = sub.add_parser("ablate", help="ablation rows on each lattice")
    p.add_argument("lattices", nargs="+")
    p.add_argument("--workers", type=int, default=None)
    _add_common(p)
    _add_scorer_opts(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="EEL vs exhaustive on synthetic lattices, with timings")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--length", type=int, default=10)
    p.add_argument("--merge-prob", type=float, default=0.3)
    p.add_argument("--m", type=int, default=8)
    _add_common(p)
    _add_scorer_opts(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("canvas", help="debug dump of the canvas(es) for a lattice")
    p.add_argument("lattice")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    _add_mask_opts(p, default="full")
    p.set_defaults(func=cmd_canvas)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PathLimitExceeded, CanvasOverflow) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LIMIT
    except (LatticeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
