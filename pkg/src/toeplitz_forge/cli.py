"""Command-line entry point.

Exit codes: 0 all checks passed, 1 some check failed, 2 usage or input
format error, 3 search-space exhaustion.  Output files are written
atomically (temp file + rename) and are byte-identical for identical
arguments and seed, independent of TOEPLITZ_FORGE_THREADS.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from fractions import Fraction
from pathlib import Path

from .condition_core import (
    parse_condition,
    pos,
    pos_star,
    prefix_oracle,
    fuse_deciding,
    serialize_condition,
)
from .errors import FamilyFormatError, ForgeError, FormatError, SearchSpaceError
from .sequence_model import parse_family
from .synthesis import (
    SynthesisSchedule,
    amalgamate,
    err,
    parse_matrix,
    serialize_matrix,
    synthesize_matrix,
)
from .verification import (
    alim_trace,
    borel_cantelli_report,
    check_regular,
    factorial_tail,
    mc_measure_bound,
    serialize_reports,
    VerificationReport,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_EXHAUSTED = 3


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."),
                               prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toeplitz-forge",
        description="Synthesize and verify convergence-forcing summation matrices.")
    sub = parser.add_subparsers(dest="command", required=True)

    syn = sub.add_parser("synthesize", help="build a matrix for a family")
    syn.add_argument("--family", required=True)
    syn.add_argument("--k-star", type=int, default=0)
    syn.add_argument("--k-max", type=int, default=4)
    syn.add_argument("--horizon", type=int, default=2000)
    syn.add_argument("--budget", type=int, default=64)
    syn.add_argument("--rows", type=int, default=0)
    syn.add_argument("--samples", type=int, default=2048)
    syn.add_argument("--seed", type=int, default=1)
    syn.add_argument("--thin-depth", type=int, default=None,
                     help="require factorial thinning to reach this stage")
    syn.add_argument("--out", required=True)

    ver = sub.add_parser("verify", help="check a matrix against a family")
    ver.add_argument("--matrix", required=True)
    ver.add_argument("--family", required=True)
    ver.add_argument("--check", action="append", default=None,
                     choices=["regular", "convergence", "measure", "borel-cantelli"])
    ver.add_argument("--rows", type=int, default=200)
    ver.add_argument("--level", type=int, default=3)
    ver.add_argument("--samples", type=int, default=2000)
    ver.add_argument("--seed", type=int, default=1)
    ver.add_argument("--report", required=True)

    est = sub.add_parser("estimate", help="estimate an error functional")
    est.add_argument("--matrix", required=True)
    est.add_argument("--family", required=True)
    est.add_argument("--member", required=True)
    est.add_argument("--row", type=int, default=0)
    est.add_argument("--k", type=int, default=1)
    est.add_argument("--i", type=int, default=1)
    est.add_argument("--samples", type=int, default=2000)
    est.add_argument("--seed", type=int, default=1)
    est.add_argument("--report", required=True)

    ama = sub.add_parser("amalgamate", help="amalgamate a chain of conditions")
    ama.add_argument("--chain", nargs="+", required=True)
    ama.add_argument("--truncate", type=int, default=None)
    ama.add_argument("--out", required=True)

    fus = sub.add_parser("fuse", help="toy continuous-reading fusion")
    fus.add_argument("--condition", required=True)
    fus.add_argument("--oracles", required=True,
                     help="semicolon list: m=<int>,depth=<int> entries")
    fus.add_argument("--stages", type=int, default=2)
    fus.add_argument("--universe-bound", type=int, default=2000)
    fus.add_argument("--out", required=True)

    cnt = sub.add_parser("pos-count", help="count extension spaces of a condition")
    cnt.add_argument("--condition", required=True)
    cnt.add_argument("--take", type=int, default=2)
    cnt.add_argument("--grid-cap", type=int, default=64)
    cnt.add_argument("--report", required=True)
    return parser


def _cmd_synthesize(args) -> int:
    family = parse_family(Path(args.family).read_text(encoding="utf-8"))
    schedule = SynthesisSchedule(
        k_star=args.k_star, k_max=args.k_max, seed=args.seed,
        horizon=args.horizon, budget=args.budget, rows=args.rows,
        bank_samples=args.samples)
    if args.thin_depth is not None:
        # fail fast when the declared horizon cannot reach the demanded depth
        from .synthesis import thin_factorial, trivial_condition  # noqa: F401
        from .errors import HorizonExhausted
        need = (2 ** (2 * args.k_max + 2)) * _factorial(args.thin_depth)
        if need > max(schedule.final_rows(), schedule.thin_budget):
            raise HorizonExhausted(
                f"thinning to stage {args.thin_depth} at level {args.k_max} needs "
                f"{need} rows; the declared horizon supplies {schedule.final_rows()}")
    result = synthesize_matrix(family, schedule)
    atomic_write(args.out, serialize_matrix(result.matrix))
    print(f"wrote {args.out}: {len(result.matrix.rows)} rows, "
          f"{result.breaches} band breaches")
    return EXIT_OK


def _factorial(n: int) -> int:
    import math
    return math.factorial(n)


def _cmd_verify(args) -> int:
    matrix = parse_matrix(Path(args.matrix).read_text(encoding="utf-8"))
    family = parse_family(Path(args.family).read_text(encoding="utf-8"))
    checks = args.check or ["regular", "convergence"]
    rows = min(args.rows, len(matrix.rows))
    reports: list[VerificationReport] = []
    for check in checks:
        if check == "regular":
            reports.append(check_regular(matrix, rows))
        elif check == "convergence":
            for member in family:
                trace = alim_trace(matrix, member, rows,
                                   seed=None if not member.is_random else args.seed,
                                   k_max=args.level)
                n = trace.settle.get(args.level)
                reports.append(VerificationReport(
                    "convergence", "pass" if n is not None else "fail",
                    value="-" if n is None else str(n),
                    params={"member": member.name, "k": str(args.level),
                            "rows": str(rows)}))
        elif check == "measure":
            for member in family:
                if not member.is_random:
                    continue
                for ell in range(2, min(8, rows - 1)):
                    c0, c1 = matrix.rows[ell], matrix.rows[ell + 1]
                    reports.append(mc_measure_bound(
                        c0, c1, member, args.level,
                        Fraction(1, _factorial(ell)), args.samples,
                        args.seed + ell))
        elif check == "borel-cantelli":
            for member in family:
                if not member.is_random:
                    continue
                reports.append(borel_cantelli_report(
                    matrix, member, args.level, args.samples, args.seed, rows))
    atomic_write(args.report, serialize_reports(reports))
    for r in reports:
        print(r.to_line())
    if any(r.outcome == "fail" for r in reports):
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _cmd_estimate(args) -> int:
    matrix = parse_matrix(Path(args.matrix).read_text(encoding="utf-8"))
    family = parse_family(Path(args.family).read_text(encoding="utf-8"))
    member = family.by_name(args.member)
    if not 0 <= args.row < len(matrix.rows):
        raise FormatError(f"row {args.row} outside matrix")
    entry = err(member, args.k, args.i, matrix.rows[args.row],
                samples=args.samples, seed=args.seed)
    report = VerificationReport(
        "err-estimate", "pass", value=f"{float(entry.value):.9g}",
        ci="-" if entry.provenance != "estimated" else
           f"{__import__('toeplitz_forge.verification', fromlist=['v']).hoeffding_halfwidth(args.samples):.6g}",
        params={"member": args.member, "row": str(args.row), "k": str(args.k),
                "i": str(args.i), "mode": entry.provenance,
                "tail-sum-1": f"{float(factorial_tail(1)):.12g}"})
    atomic_write(args.report, serialize_reports([report]))
    print(report.to_line())
    return EXIT_OK


def _cmd_amalgamate(args) -> int:
    chain = [parse_condition(Path(p).read_text(encoding="utf-8"))
             for p in args.chain]
    result = amalgamate(chain, truncate=args.truncate)
    if not all(result.checks):
        bad = next(c for c in result.checks if not c)
        print(f"certification failed: {bad.reason}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    atomic_write(args.out, serialize_condition(result.condition))
    print(f"wrote {args.out}: {result.condition.explicit_len} rows, "
          f"{len(result.certificates)} certificates")
    return EXIT_OK


def _parse_oracles(text: str):
    oracles = []
    for part in text.split(";"):
        fields = dict(kv.partition("=")[::2] for kv in part.split(","))
        m = int(fields["m"])
        depth = int(fields.get("depth", "1"))
        oracles.append(prefix_oracle(
            m, depth, lambda rows: rows[-1].support[0] % 2))
    return oracles


def _cmd_fuse(args) -> int:
    cond = parse_condition(Path(args.condition).read_text(encoding="utf-8"))
    oracles = _parse_oracles(args.oracles)
    fused = fuse_deciding(cond, oracles, stages=args.stages,
                          universe_bound=args.universe_bound)
    atomic_write(args.out, serialize_condition(fused))
    print(f"wrote {args.out}: {fused.explicit_len} rows")
    return EXIT_OK


def _cmd_pos_count(args) -> int:
    cond = parse_condition(Path(args.condition).read_text(encoding="utf-8"))
    head = cond.rows(cond.trunk_len, cond.trunk_len + args.take)
    star = pos_star((), head, grid_cap=args.grid_cap)
    full = pos((), head, grid_cap=args.grid_cap)
    report = VerificationReport(
        "pos-count", "pass", value=f"{len(star)}/{len(full)}",
        params={"take": str(args.take), "grid-cap": str(args.grid_cap)})
    atomic_write(args.report, serialize_reports([report]))
    print(report.to_line())
    return EXIT_OK


_COMMANDS = {
    "synthesize": _cmd_synthesize,
    "verify": _cmd_verify,
    "estimate": _cmd_estimate,
    "amalgamate": _cmd_amalgamate,
    "fuse": _cmd_fuse,
    "pos-count": _cmd_pos_count,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except SearchSpaceError as exc:
        print(f"search space exhausted: {exc}", file=sys.stderr)
        return EXIT_EXHAUSTED
    except (FamilyFormatError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
