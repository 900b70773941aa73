"""Command-line driver.

Subcommands:
  compile   sources -> interface files, decision dumps, program archive
  run       archive + entry + literal args -> outputs and heap statistics
  bench     suite directory x configurations -> comparison table and CSV

Exit codes: 0 ok, 1 compile error, 2 runtime error, 3 bench ran but some
rows failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time

from .aliases import alias_set_to_text, ds_to_text
from .dataflow import EXIT_POINT
from .interfaces import iterate_modules
from .ir import CompileError
from .pipeline import (
    CompiledModule, CtgcConfig, build_program, compile_and_write,
    dependency_order, read_archive, write_archive,
)
from .reuse import decision_dump
from .runtime import RuntimeFault, refcount_oracle, run, value_to_text


def _config_from_args(args) -> CtgcConfig:
    return CtgcConfig.from_flags(
        constraint=args.constraint, strategy=args.strategy,
        widen=args.widen, seed=args.seed,
        ctgc_enabled=not args.no_ctgc,
        record_all_states="alias" in (args.dump or ""))


def _alias_dump(cm: CompiledModule) -> str:
    lines = []
    for key in sorted(cm.analysis.procs):
        pa = cm.analysis.procs[key]
        lines.append(f"== alias {pa.proc.decl.id}")
        for pt in sorted(p for p in pa.states if p != EXIT_POINT):
            lines.append(f"p{pt}: {alias_set_to_text(pa.states[pt])}")
        lines.append(f"exit: {alias_set_to_text(pa.states[EXIT_POINT])}")
    return "\n".join(lines) + "\n"


def _dead_dump(cm: CompiledModule) -> str:
    lines = []
    for key in sorted(cm.analysis.procs):
        pa = cm.analysis.procs[key]
        lines.append(f"== dead {pa.proc.decl.id}")
        for d in pa.dead_cells:
            cond = " ".join(sorted(ds_to_text(c) for c in d.condition))
            lines.append(f"dead p{d.decon_point} {d.var} "
                         f"{d.functor}/{d.size} size={d.size} "
                         f"cond={{{cond}}}")
    return "\n".join(lines) + "\n"


def cmd_compile(args) -> int:
    config = _config_from_args(args)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.abspath(p) for p in args.paths]
    if not args.keep_order:
        paths = dependency_order(paths)
    compiled: dict[str, CompiledModule] = {}

    def compile_one(path: str):
        cm = compile_and_write(path, config, out_dir)
        compiled[path] = cm
        return cm.interface

    if args.iterate is not None:
        rounds = args.iterate or config.max_iterate_rounds
        report = iterate_modules(paths, compile_one, rounds)
        print(f"iteration: {report.rounds} round(s), "
              f"{'converged' if report.converged else 'NOT converged'}")
    else:
        for p in paths:
            compile_one(p)

    ordered = [compiled[p] for p in paths]
    dumps = (args.dump or "").split(",") if args.dump else []
    for cm in ordered:
        if "alias" in dumps:
            sys.stdout.write(_alias_dump(cm))
        if "dead" in dumps:
            sys.stdout.write(_dead_dump(cm))
        if "reuse" in dumps and cm.reuse is not None:
            sys.stdout.write(decision_dump(cm.reuse))

    archive = args.archive
    if archive is None:
        archive = os.path.join(out_dir, f"{ordered[0].module.name}.ctgcar")
    write_archive(ordered, archive, config)
    print(f"wrote {archive}")
    return 0


def cmd_run(args) -> int:
    program, _meta = read_archive(args.archive)
    if args.oracle:
        result, interp = refcount_oracle(program, args.entry, args.args)
        for (proc, point), flag in sorted(result.oracle.read_after.items()):
            name = f"{proc[1]}/{proc[2]}"
            print(f"decon {name} p{point}: "
                  f"{'read-after' if flag else 'never-read-after'}")
    else:
        result, interp = run(program, args.entry, args.args,
                             cache=args.cache, debug=args.debug,
                             plain=args.plain)
    if result.failed:
        print("fail")
    else:
        for v, t in zip(result.outputs, result.output_types):
            print(value_to_text(interp, v, t))
    print(result.stats.to_text())
    return 0


# ---------------------------------------------------------------------------
# Benchmarks


def parse_bench_config(text: str) -> tuple[str, CtgcConfig]:
    """A '+'-joined configuration label, e.g. 'match+lifo',
    'within:1+random+cc', or 'no-ctgc'."""
    label = text.strip()
    constraint, strategy, cache, seed, ctgc = "match", "lifo", False, 0, True
    for token in label.split("+"):
        token = token.strip()
        if token == "no-ctgc":
            ctgc = False
        elif token in ("match", "same-cons") or token.startswith("within:"):
            constraint = token
        elif token in ("lifo", "random"):
            strategy = token
        elif token == "cc":
            cache = True
        elif token.startswith("seed:"):
            seed = int(token.split(":", 1)[1])
        else:
            raise CompileError(f"unknown bench config token {token!r}")
    cfg = CtgcConfig.from_flags(constraint=constraint, strategy=strategy,
                                seed=seed, ctgc_enabled=ctgc, cache=cache)
    return label, cfg


def _bench_row(entry_file: str, entry: str, arg_texts: list[str],
               label: str, cfg: CtgcConfig, workdir: str) -> dict:
    out = os.path.join(workdir, label.replace(":", "_"))
    os.makedirs(out, exist_ok=True)
    cm = compile_and_write(entry_file, cfg, out)
    program = build_program([cm], ctgc_enabled=cfg.ctgc_enabled)
    t0 = time.perf_counter()
    result, _interp = run(program, entry, arg_texts, cache=cfg.cache)
    seconds = time.perf_counter() - t0
    if result.failed:
        raise RuntimeFault(f"{entry} failed")
    s = result.stats
    return {"words": s.words_allocated, "reused": s.cells_reused_inplace,
            "cache_hits": s.cache_hits, "leaked": s.within_k_leaked_words,
            "seconds": seconds}


def cmd_bench(args) -> int:
    suite_path = os.path.join(args.suite, "suite.json")
    try:
        with open(suite_path, encoding="utf-8") as fh:
            suite = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CompileError(f"cannot read bench suite {suite_path}: {e}")
    configs = [parse_bench_config(c) for c in args.configs.split(",")]
    labels = [label for label, _ in configs]
    if "no-ctgc" not in labels:
        configs.insert(0, parse_bench_config("no-ctgc"))

    rows: list[dict] = []
    failures = 0
    with tempfile.TemporaryDirectory(prefix="ctgc-bench-") as workdir:
        for prog in suite:
            path = os.path.join(args.suite, prog["file"])
            baseline: int | None = None
            for label, cfg in configs:
                row = {"program": prog["name"], "config": label}
                try:
                    row.update(_bench_row(path, prog["entry"],
                                          prog.get("args", []), label, cfg,
                                          workdir))
                    if label == "no-ctgc":
                        baseline = row["words"]
                    if baseline:
                        pct = 100.0 * (row["words"] - baseline) / baseline
                        row["pct_vs_baseline"] = (
                            "-" if label == "no-ctgc" else f"{pct:.1f}")
                    else:
                        row["pct_vs_baseline"] = "-"
                except (CompileError, RuntimeFault, Exception) as e:  # noqa: BLE001
                    row["error"] = str(e)
                    failures += 1
                rows.append(row)

    cols = ["program", "config", "words", "pct_vs_baseline", "reused",
            "cache_hits", "leaked", "seconds"]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(cols)
    for row in rows:
        if "error" in row:
            writer.writerow([row["program"], row["config"], "error",
                             row["error"], "", "", "", ""])
        else:
            writer.writerow([row["program"], row["config"], row["words"],
                             row["pct_vs_baseline"], row["reused"],
                             row["cache_hits"], row["leaked"],
                             f"{row['seconds']:.3f}"])
    csv_text = buf.getvalue()
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(csv_text)

    widths = [max(len(r) for r in col_values)
              for col_values in zip(*(line.split(",")
                                      for line in csv_text.splitlines()))]
    for line in csv_text.splitlines():
        cells = line.split(",")
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return 3 if failures else 0


# ---------------------------------------------------------------------------


def build_arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctgc")
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="analyse modules and build an archive")
    c.add_argument("paths", nargs="+", help=".m0 source files")
    c.add_argument("-o", "--out", default=".",
                   help="directory for .ctgc interfaces and the archive")
    c.add_argument("--constraint", default="match",
                   choices=None, help="match | within:K | same-cons")
    c.add_argument("--strategy", default="lifo", help="lifo | random")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--widen", default="200",
                   help="widening threshold (pair count) or 'off'")
    c.add_argument("--no-ctgc", action="store_true",
                   help="skip the reuse pass (plain versions only)")
    c.add_argument("--iterate", nargs="?", type=int, const=0, default=None,
                   help="recompile all modules until interface hashes "
                        "stabilize (optionally: max rounds)")
    c.add_argument("--keep-order", action="store_true",
                   help="compile in the given order instead of dependency "
                        "order")
    c.add_argument("--dump", default=None,
                   help="comma list of dumps: alias,dead,reuse")
    c.add_argument("--archive", default=None, help="archive output path")
    c.set_defaults(func=cmd_compile)

    r = sub.add_parser("run", help="run an entry point of an archive")
    r.add_argument("archive")
    r.add_argument("entry", help="procedure name")
    r.add_argument("args", nargs="*", help="ground terms for the inputs")
    r.add_argument("--cache", action="store_true",
                   help="enable the run-time cell cache")
    r.add_argument("--plain", action="store_true",
                   help="force the no-reuse version of every procedure")
    r.add_argument("--debug", action="store_true",
                   help="abort on reads through stale references")
    r.add_argument("--oracle", action="store_true",
                   help="run the exact reference oracle (plain semantics)")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run the benchmark suite")
    b.add_argument("suite", help="directory containing suite.json")
    b.add_argument("--configs", default="no-ctgc,match+lifo",
                   help="comma list, e.g. no-ctgc,match+lifo,within:1+cc")
    b.add_argument("--csv", default=None, help="write the CSV here")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        return args.func(args)
    except CompileError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RuntimeFault as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
