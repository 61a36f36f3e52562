"""``csattn`` command line: synth / build / decode / inspect / sweep.

Exit codes: 0 ok, 1 usage, 2 data error, 3 property-assertion failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .clustering import ClusterConfig
from .core import DimensionError, KvStore, ParameterError, SubspaceLayout
from .index import FLAG_SCORES_F16, IndexFormatError, build_index, load_index, payload_bytes, save_index
from .retrieval import RetrievalConfig
from .sim import DumpFormatError, Session, Workload, read_dump, run_decode, synthetic_workload, write_dump

log = logging.getLogger("csattn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROPERTY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ inputs


def _add_inputs(p, with_v=True):
    p.add_argument("--q", type=Path, help="query dump (CSQK, role 0)")
    p.add_argument("--k", type=Path, help="key dump (CSQK, role 1)")
    if with_v:
        p.add_argument("--v", type=Path, help="value dump (CSQK, role 2)")
    p.add_argument("--synthetic", nargs=3, type=int, metavar=("N", "D", "CLUSTERS"),
                   help="generate a planted workload with N prefill tokens instead of reading dumps")
    p.add_argument("--seed", type=int, default=0)


def _load_rows(args, need_v: bool, decode_len: int = 0):
    """Return (q, k, v, prefill_len or None) as full-sequence arrays."""
    if args.synthetic:
        n, d, clusters = args.synthetic
        w = synthetic_workload(n, d, clusters, decode_len, seed=args.seed)
        q, k, v = w.all_rows()
        return q, k, v, n
    if args.q is None or args.k is None or (need_v and args.v is None):
        raise UsageError("give --q/--k" + ("/--v" if need_v else "") + " dumps or --synthetic N D CLUSTERS")
    q = read_dump(args.q, "q")
    k = read_dump(args.k, "k")
    v = read_dump(args.v, "v") if need_v else None
    if q.shape[1] != k.shape[1] or (v is not None and v.shape[1] != k.shape[1]):
        raise DataError(f"head dimension mismatch: q d={q.shape[1]}, k d={k.shape[1]}" +
                        (f", v d={v.shape[1]}" if v is not None else ""))
    if v is not None and v.shape[0] != k.shape[0]:
        raise DataError(f"{k.shape[0]} keys but {v.shape[0]} values")
    return q, k, v, None


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    n, d, clusters = args.synthetic
    w = synthetic_workload(n, d, clusters, args.steps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for role, rows in zip("qkv", w.all_rows()):
        write_dump(out / f"{role}.csqk", role, rows)
    print(f"wrote {out}/{{q,k,v}}.csqk: {n} prefill + {args.steps} decode rows, d={d}")
    return EXIT_OK


def cmd_build(args) -> int:
    q, k, _, synth_n = _load_rows(args, need_v=False)
    P = args.prefill_len or synth_n or k.shape[0]
    if P > k.shape[0] or P > q.shape[0]:
        raise DataError(f"prefill length {P} exceeds dump rows (q={q.shape[0]}, k={k.shape[0]})")
    layout = SubspaceLayout.uniform(k.shape[1], args.m)
    kv = KvStore(k[:P], np.zeros_like(k[:P]))
    ccfg = ClusterConfig(args.centroids, args.iterations, args.batch_size, args.seed)
    index = build_index(q[:P], kv, layout, ccfg, args.alpha, list_size=args.list_size, normalize_keys=args.normalize_keys)
    size = save_index(index, args.out, args.score_bits)
    bps = args.score_bits // 8
    model = harness.table_bytes(index.m, index.C, index.capacity, index.d, bps)
    actual = payload_bytes(index, args.score_bits)
    print(f"index: m={index.m} C={index.C} L={index.capacity} alpha={args.alpha} prefill_len={P} d={index.d}")
    print(f"table_bytes model={model} actual_payload={actual['payload']} file={size} (header {actual['header_bytes']})")
    return EXIT_OK


def _retrieval_config(args) -> RetrievalConfig:
    extra = dict(
        recent_window=args.window,
        backoff_tau=args.tau,
        backoff_threshold=args.backoff_threshold,
        recent_passthrough=not args.no_passthrough,
    )
    if args.schedule:
        return RetrievalConfig.from_schedule(args.schedule, **extra)
    return RetrievalConfig(keep_ratio=args.rho, search_period=args.period, **extra)


def _fmt(x) -> str:
    return repr(round(float(x), 10)) if isinstance(x, (float, np.floating)) else str(x)


def cmd_decode(args) -> int:
    index = load_index(args.index)
    P = index.prefill_len
    q, k, v, synth_n = _load_rows(args, need_v=True, decode_len=args.steps or 0)
    if synth_n is not None and synth_n != P:
        raise DataError(f"synthetic prefill length {synth_n} != index prefill length {P}")
    if k.shape[1] != index.d:
        raise DataError(f"dump head dimension {k.shape[1]} != index d={index.d}")
    if k.shape[0] < P or q.shape[0] < P:
        raise DataError(f"dumps hold {k.shape[0]} rows, index prefill length is {P}")
    available = min(q.shape[0], k.shape[0]) - P
    steps = available if args.steps is None else args.steps
    if steps > available:
        raise DataError(f"{steps} decode steps requested, dumps provide {available}")
    cfg = _retrieval_config(args)
    session = Session(KvStore(k[:P], v[:P]), index, cfg, seed=args.seed)
    reports = run_decode(session, q[P:], k[P:], v[P:], steps, compare_dense=args.oracle)

    cols = ["step", "n_context", "K", "searched", "centroid_dot_ops", "gathered_entries", "reduce_ops",
            "attention_key_ops", "h2d_bytes_model", "inserts_applied"]
    if args.oracle:
        cols += ["recall_at_k", "output_error"]
    header = [
        "# csattn decode",
        f"# rho={cfg.keep_ratio} period={cfg.search_period} window={cfg.recent_window} tau={cfg.backoff_tau} "
        f"backoff_threshold={cfg.backoff_threshold} passthrough={int(cfg.recent_passthrough)}",
        f"# m={index.m} C={index.C} L={index.capacity} prefill_len={P} d={index.d} steps={steps}",
    ]
    lines = header + ["\t".join(cols)]
    failures = []
    bound = index.m * cfg.backoff_tau * index.capacity
    for r in reports:
        c = r.counters
        row = [r.step, r.n_context, r.K, int(r.searched), c.centroid_dot_ops, c.gathered_entries, c.reduce_ops,
               c.attention_key_ops, c.h2d_bytes_model, c.inserts_applied]
        if args.oracle:
            row += [r.recall_at_k, r.output_error]
            if not 0.0 <= r.recall_at_k <= 1.0:
                failures.append(f"step {r.step}: recall {r.recall_at_k} outside [0, 1]")
        if r.selected.shape[0] != cfg.keep_count(r.n_context):
            failures.append(f"step {r.step}: selected {r.selected.shape[0]} != K")
        if c.gathered_entries > bound:
            failures.append(f"step {r.step}: gathered {c.gathered_entries} > m*tau*L = {bound}")
        lines.append("\t".join(_fmt(x) for x in row))
    Path(args.out).write_text("\n".join(lines) + "\n")

    searches = sum(r.counters.searches for r in reports)
    summary = f"decoded {steps} steps, {searches} searches"
    if args.oracle and reports:
        summary += f", mean recall@K {np.mean([r.recall_at_k for r in reports]):.4f}, " \
                   f"max output error {max(r.output_error for r in reports):.3g}"
    print(summary)
    for f in failures:
        print(f"property failure: {f}", file=sys.stderr)
    return EXIT_PROPERTY if failures else EXIT_OK


def cmd_inspect(args) -> int:
    index = load_index(args.index)
    with open(args.index, "rb") as f:
        raw = f.read()
    score_bits = 16 if int.from_bytes(raw[6:8], "little") & FLAG_SCORES_F16 else 32
    fills = index.fill_levels()
    scores = [t.scores for row in index.tables for t in row if len(t)]
    lo = min(float(s.min()) for s in scores) if scores else float("nan")
    hi = max(float(s.max()) for s in scores) if scores else float("nan")
    breakdown = payload_bytes(index, score_bits)
    model = harness.table_bytes(index.m, index.C, index.capacity, index.d, score_bits // 8)
    print(f"file: {args.index} ({len(raw)} bytes, {score_bits}-bit scores)")
    print(f"m={index.m} C={index.C} L={index.capacity} alpha={index.alpha:.6g} prefill_len={index.prefill_len} "
          f"d={index.d} sizes={list(index.layout.sizes)} normalize_keys={index.normalize_keys}")
    print(f"tables={index.n_tables()} fill min={fills.min()} mean={fills.mean():.2f} max={fills.max()}")
    print(f"scores min={lo:.6g} max={hi:.6g}")
    for b in range(index.m):
        print(f"  subspace {b}: width={index.layout.sizes[b]} fill={fills[b].tolist()}")
    print(f"bytes: indices={breakdown['list_index_bytes']} scores={breakdown['list_score_bytes']} "
          f"centroids={breakdown['centroid_bytes']} header={breakdown['header_bytes']}")
    print(f"payload={breakdown['payload']} model={model} (full lists) total={breakdown['total']}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        grid = json.loads(Path(args.grid).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{args.grid}: not valid JSON ({e})") from None
    base = {"steps": args.steps}
    cells = harness.expand_grid(grid, base)
    max_steps = max((c["steps"] for c in cells), default=0)
    q, k, v, synth_n = _load_rows(args, need_v=True, decode_len=max_steps)
    P = synth_n or args.prefill_len or (k.shape[0] - max_steps)
    if P < 1:
        raise DataError("no rows left for the prefill")
    workload = Workload(q[:P], k[:P], v[:P], q[P:], k[P:], v[P:])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    skipped = []
    results = harness.sweep(cells, workload, seeds, jobs=args.jobs, skipped=skipped)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_results(out / "results.tsv", results)
    if results:
        harness.write_series(out, results, args.x_param)
    for cid, reason in skipped:
        print(f"skipped {cid}: {reason}")
    print(f"{len(results)} result rows -> {out / 'results.tsv'}")
    failures = [r.config_id for r in results if not r.percentiles_ordered()]
    if args.assert_monotone:
        ordered = sorted(results, key=lambda r: r.params[args.assert_monotone])
        if not harness.non_decreasing([r.mean_recall for r in ordered]):
            failures.append(f"recall not non-decreasing in {args.assert_monotone}")
    for f in failures:
        print(f"property failure: {f}", file=sys.stderr)
    return EXIT_PROPERTY if failures else EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="csattn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic workload as q/k/v dumps")
    s.add_argument("--synthetic", nargs=3, type=int, metavar=("N", "D", "CLUSTERS"), required=True)
    s.add_argument("--steps", type=int, default=64, help="decode rows to append after the prefill")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("build", help="cluster prefill queries and write an index file")
    _add_inputs(b, with_v=False)
    b.add_argument("--prefill-len", type=int, help="rows of the dumps that form the prefill (default: all)")
    b.add_argument("--m", type=int, default=8)
    b.add_argument("--centroids", type=int, default=64)
    b.add_argument("--alpha", type=float, default=0.2)
    b.add_argument("--list-size", type=int, help="absolute Top-L capacity overriding alpha")
    b.add_argument("--iterations", type=int, default=10)
    b.add_argument("--batch-size", type=int)
    b.add_argument("--normalize-keys", action="store_true")
    b.add_argument("--score-bits", type=int, choices=(16, 32), default=32)
    b.add_argument("-o", "--out", required=True)
    b.set_defaults(func=cmd_build)

    def retrieval_flags(x):
        x.add_argument("--schedule", help="named schedule, e.g. 0.05-step-1 (overrides --rho/--period)")
        x.add_argument("--rho", type=float, default=0.05)
        x.add_argument("--period", type=int, default=1)
        x.add_argument("--window", type=int, default=32)
        x.add_argument("--tau", type=int, default=1)
        x.add_argument("--backoff-threshold", type=float, default=float("-inf"))
        x.add_argument("--no-passthrough", action="store_true", help="window keys compete instead of being kept")

    d = sub.add_parser("decode", help="run sparse decode against an index")
    d.add_argument("--index", required=True, type=Path)
    _add_inputs(d)
    retrieval_flags(d)
    d.add_argument("--steps", type=int)
    d.add_argument("--oracle", action="store_true", help="compare every step with dense attention")
    d.add_argument("-o", "--out", required=True)
    d.set_defaults(func=cmd_decode)

    i = sub.add_parser("inspect", help="describe an index file")
    i.add_argument("index", type=Path)
    i.set_defaults(func=cmd_inspect)

    w = sub.add_parser("sweep", help="run a parameter grid with the dense oracle")
    w.add_argument("--grid", required=True, type=Path, help="JSON grid: lists per parameter, or {'cells': [...]}")
    _add_inputs(w)
    w.add_argument("--prefill-len", type=int)
    w.add_argument("--steps", type=int, default=32)
    w.add_argument("--seeds", help="comma-separated clustering seeds (default: --seed)")
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--x-param", help="grid parameter used as x in series files")
    w.add_argument("--assert-monotone", metavar="PARAM", help="fail (exit 3) unless recall is non-decreasing in PARAM")
    w.add_argument("-o", "--out", required=True, help="output directory")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    level = os.environ.get("CSATTN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"csattn: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IndexFormatError, DumpFormatError, DimensionError, ParameterError, OSError) as e:
        print(f"csattn: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
