"""Checks on synthesized matrices: regularity, convergence traces, the
convexity inequality, and sampled measure bounds with honest confidence
intervals (inconclusive is a first-class outcome)."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .bits import derive, sample_seeds
from .creature_core import Creature, aver, compose
from .errors import FormatError, GridError
from .sequence_model import (
    SequenceSource,
    dependency_window_over,
    sample_name_matrix,
)
from .synthesis import ToeplitzMatrix, err


def hoeffding_halfwidth(samples: int, confidence: float = 0.99) -> float:
    """Two-sided Hoeffding bound half-width for a [0,1]-valued mean."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    return math.sqrt(math.log(2.0 / (1.0 - confidence)) / (2.0 * samples))


def _worker_count() -> int:
    raw = os.environ.get("TOEPLITZ_FORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TOEPLITZ_FORGE_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError("TOEPLITZ_FORGE_THREADS must be >= 1")
    return n


@dataclass
class VerificationReport:
    check: str
    outcome: str                          # pass | fail | inconclusive
    value: str = ""
    ci: str = ""
    params: dict[str, str] = field(default_factory=dict)
    counterexample: str = ""

    def to_line(self) -> str:
        params = ";".join(f"{k}={v}" for k, v in self.params.items())
        parts = [f"check={self.check}", f"outcome={self.outcome}",
                 f"value={self.value or '-'}", f"ci={self.ci or '-'}",
                 f"params={params or '-'}"]
        if self.counterexample:
            parts.append(f"counterexample={self.counterexample}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "VerificationReport":
        fields = {}
        for tok in line.split():
            key, _, value = tok.partition("=")
            if not _:
                raise FormatError(f"malformed report token {tok!r}")
            fields[key] = value
        try:
            params = {}
            if fields.get("params", "-") != "-":
                for kv in fields["params"].split(";"):
                    pk, _, pv = kv.partition("=")
                    params[pk] = pv
            return cls(check=fields["check"], outcome=fields["outcome"],
                       value="" if fields.get("value", "-") == "-" else fields["value"],
                       ci="" if fields.get("ci", "-") == "-" else fields["ci"],
                       params=params,
                       counterexample=fields.get("counterexample", ""))
        except KeyError as exc:
            raise FormatError(f"report line missing field {exc}") from exc


# --------------------------------------------------------------------------
# regularity

def check_regular(matrix: ToeplitzMatrix, horizon: int | None = None) -> VerificationReport:
    """Exact regularity over the first `horizon` rows.

    (1) absolute row sums uniformly bounded (they equal 1, so 2 is a bound),
    (2) row sums exactly 1, (3) every touched column is eventually zero,
    witnessed by strictly increasing row starts; the last row touching the
    highest column is reported.
    """
    rows = matrix.rows[:horizon] if horizon is not None else matrix.rows
    if not rows:
        return VerificationReport("regular", "fail", counterexample="no rows")
    for idx, row in enumerate(rows):
        total = sum(v for _, v in row.entries)
        if total != 1:
            return VerificationReport(
                "regular", "fail", value=str(total),
                params={"rows": str(len(rows))},
                counterexample=f"row {idx} sums to {total}")
    last_mdn = None
    for idx, row in enumerate(rows):
        if last_mdn is not None and row.mdn <= last_mdn:
            return VerificationReport(
                "regular", "fail", params={"rows": str(len(rows))},
                counterexample=f"row {idx} starts at {row.mdn}, not after {last_mdn}")
        last_mdn = row.mdn
    # strictly increasing mdn makes every column eventually zero: column j is
    # untouched once mdn > j.  Report the last row touching the widest column.
    top = max(r.support[-1] for r in rows)
    last_touch = max(i for i, r in enumerate(rows) if r.support[-1] == top)
    return VerificationReport(
        "regular", "pass", value="1",
        params={"rows": str(len(rows)), "bound": "2",
                "last-column": str(top), "last-touch-row": str(last_touch)})


# --------------------------------------------------------------------------
# traces

@dataclass
class TraceResult:
    values: list[float]
    settle: dict[int, int | None]        # level -> least row with osc <= 3/2^k
    exact: list[Fraction] | None = None


def alim_trace(matrix: ToeplitzMatrix, source: SequenceSource, rows: int,
               seed: int | None = None, k_max: int = 8) -> TraceResult:
    """Transformed sequence under the matrix plus oscillation statistics.

    Deterministic sources are evaluated exactly; random names need a seed
    and are evaluated along one sampled bitstream.
    """
    take = matrix.rows[:rows]
    if len(take) < rows:
        raise ValueError(f"matrix has {len(matrix.rows)} rows, need {rows}")
    exact = None
    if source.is_random:
        if seed is None:
            raise ValueError("random names need a seed for a trace")
        seeds = sample_seeds(derive(seed, 0xA1), 1)
        cache: dict[int, np.ndarray] = {}
        vals = []
        for row in take:
            pos = np.array(row.support, dtype=np.int64)
            cols = sample_name_matrix(source, seeds, pos, raw_cache=cache)
            w = np.array([float(v) for _, v in row.entries])
            vals.append(float(cols[0].astype(np.float64) @ w))
    else:
        exact = [aver(source.eval, row) for row in take]
        vals = [float(v) for v in exact]
    arr = np.array(vals)
    suffix_max = np.maximum.accumulate(arr[::-1])[::-1]
    suffix_min = np.minimum.accumulate(arr[::-1])[::-1]
    osc = suffix_max - suffix_min
    settle: dict[int, int | None] = {}
    for k in range(0, k_max + 1):
        eps = 3.0 / (2 ** k)
        hits = np.nonzero(osc <= eps + 1e-12)[0]
        settle[k] = int(hits[0]) if hits.size else None
    return TraceResult(values=vals, settle=settle, exact=exact)


# --------------------------------------------------------------------------
# convexity

def check_convexity(source: SequenceSource, k: int, i: int,
                    parts: Sequence[Creature], weights: Sequence[Fraction],
                    mode: str = "auto", samples: int = 4096, seed: int = 1,
                    enum_bit_bound: int = 16) -> VerificationReport:
    """err of a combination never exceeds the weighted sum of part errs."""
    try:
        combo = compose(list(parts), tuple(range(len(parts))), weights)
    except GridError as exc:
        raise GridError(f"inadmissible composition: {exc}") from exc
    lhs = err(source, k, i, combo, mode=mode, samples=samples, seed=seed,
              enum_bit_bound=enum_bit_bound)
    rhs_parts = [err(source, k, i, c, mode=mode, samples=samples,
                     seed=derive(seed, 7, t), enum_bit_bound=enum_bit_bound)
                 for t, c in enumerate(parts)]
    params = {"k": str(k), "i": str(i), "parts": str(len(parts)),
              "mode": lhs.provenance}
    if lhs.provenance in ("exact", "enumerated"):
        rhs = sum(w * e.value for w, e in zip(weights, rhs_parts))
        ok = lhs.value <= rhs
        return VerificationReport(
            "convexity", "pass" if ok else "fail",
            value=f"{lhs.value}<= {rhs}" if ok else f"{lhs.value}>{rhs}",
            params=params)
    hw = hoeffding_halfwidth(samples)
    rhs = sum(float(w) * float(e.value) for w, e in zip(weights, rhs_parts))
    slack = hw * (1 + len(parts))
    if float(lhs.value) <= rhs + slack:
        outcome = "pass" if float(lhs.value) <= rhs else "inconclusive"
    else:
        outcome = "fail"
    return VerificationReport("convexity", outcome,
                              value=f"{float(lhs.value):.6g}vs{rhs:.6g}",
                              ci=f"{slack:.3g}", params=params)


# --------------------------------------------------------------------------
# measure bounds

def _pair_avers(c0: Creature, c1: Creature, source: SequenceSource,
                seeds: np.ndarray, cache: dict | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    threads = _worker_count()
    pos0 = np.array(c0.support, dtype=np.int64)
    pos1 = np.array(c1.support, dtype=np.int64)
    w0 = np.array([float(v) for _, v in c0.entries])
    w1 = np.array([float(v) for _, v in c1.entries])

    def chunk_vals(chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        local_cache: dict = {}
        m0 = sample_name_matrix(source, chunk, pos0, raw_cache=local_cache)
        m1 = sample_name_matrix(source, chunk, pos1, raw_cache=local_cache)
        return m0.astype(np.float64) @ w0, m1.astype(np.float64) @ w1

    if threads == 1 or len(seeds) < 4096:
        return chunk_vals(seeds)
    chunks = np.array_split(seeds, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(chunk_vals, chunks))
    a0 = np.concatenate([r[0] for r in results])
    a1 = np.concatenate([r[1] for r in results])
    return a0, a1


def mc_measure_bound(c0: Creature, c1: Creature, source: SequenceSource,
                     k: int, bound: Fraction, samples: int, seed: int,
                     enum_bit_bound: int = 16,
                     precomputed: tuple[np.ndarray, np.ndarray] | None = None
                     ) -> VerificationReport:
    """Measure of {r : |aver(f(r), c1) - aver(f(r), c0)| >= 3/2^k} vs bound.

    Small joint dependency windows are enumerated exactly; otherwise the
    measure is estimated and compared through a 99% Hoeffding interval:
    pass needs estimate + halfwidth <= bound, fail needs estimate -
    halfwidth > bound, anything else is inconclusive.
    """
    threshold = Fraction(3, 2 ** k)
    params = {"k": str(k), "bound": str(bound), "samples": str(samples),
              "seed": str(seed)}
    window = dependency_window_over(source, set(c0.support) | set(c1.support))
    if len(window) <= enum_bit_bound and precomputed is None:
        import itertools as _it
        hits = 0
        for assignment in _it.product((0, 1), repeat=len(window)):
            env = dict(zip(window, assignment))
            a0 = sum(v for pos, v in c0.entries
                     if source.adapter.eval_at(pos, lambda p: env[p]))
            a1 = sum(v for pos, v in c1.entries
                     if source.adapter.eval_at(pos, lambda p: env[p]))
            if abs(a1 - a0) >= threshold:
                hits += 1
        measure = Fraction(hits, 2 ** len(window))
        params["mode"] = "enumerated"
        outcome = "pass" if measure <= bound else "fail"
        return VerificationReport("measure-bound", outcome, value=str(measure),
                                  params=params)
    if precomputed is None:
        seeds = sample_seeds(derive(seed, 0x3C), samples)
        a0, a1 = _pair_avers(c0, c1, source, seeds)
    else:
        a0, a1 = precomputed
        samples = len(a0)
        params["samples"] = str(samples)
    estimate = float((np.abs(a1 - a0) >= float(threshold) - 1e-12).mean())
    hw = hoeffding_halfwidth(samples)
    params["mode"] = "estimated"
    if estimate + hw <= float(bound):
        outcome = "pass"
    elif estimate - hw > float(bound):
        outcome = "fail"
    else:
        outcome = "inconclusive"
    return VerificationReport("measure-bound", outcome,
                              value=f"{estimate:.6g}", ci=f"{hw:.6g}",
                              params=params)


# --------------------------------------------------------------------------
# almost-sure convergence report

def factorial_tail(start: int, terms: int = 40) -> Fraction:
    """Exact partial sum of 1/ell! for ell >= start (terms of them)."""
    total = Fraction(0)
    for ell in range(max(start, 0), max(start, 0) + terms):
        total += Fraction(1, math.factorial(ell))
    return total


def borel_cantelli_report(matrix: ToeplitzMatrix, source: SequenceSource,
                          k: int, samples: int, seed: int, rows: int,
                          batch: int = 512) -> VerificationReport:
    """Distribution of the convergence-modulus index K over sampled streams.

    For each sampled bitstream the least K is found with every later
    consecutive pair of transformed values within 3/2^k; K is finite when
    the last pair already satisfies the bound.  Reports the finite fraction,
    K quantiles, and the exact factorial tail used as the theoretical budget.
    """
    take = matrix.rows[:rows]
    if len(take) < 2:
        raise ValueError("need at least two rows for pairwise differences")
    threshold = 3.0 / (2 ** k)
    positions = sorted({pos for row in take for pos in row.support})
    pos_index = {p: t for t, p in enumerate(positions)}
    pos_arr = np.array(positions, dtype=np.int64)
    # sparse row matrix over the touched positions
    data, cols, indptr = [], [], [0]
    for row in take:
        for pos, v in row.entries:
            data.append(float(v))
            cols.append(pos_index[pos])
        indptr.append(len(data))
    from scipy.sparse import csr_matrix
    rows_mat = csr_matrix((data, cols, indptr),
                          shape=(len(take), len(positions)))

    seeds = sample_seeds(derive(seed, 0xBC), samples)
    threads = _worker_count()

    def run_chunk(chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cache: dict = {}
        vals = sample_name_matrix(source, chunk, pos_arr, raw_cache=cache)
        traces = rows_mat @ vals.astype(np.float64).T   # rows x chunk
        diffs = np.abs(np.diff(traces, axis=0))
        bad = diffs > threshold + 1e-12
        n_pairs = bad.shape[0]
        last_bad = np.where(bad.any(axis=0),
                            n_pairs - 1 - np.argmax(bad[::-1, :], axis=0), -1)
        k_index = last_bad + 1
        finite = k_index < n_pairs
        return k_index, finite

    chunks = [seeds[i:i + batch] for i in range(0, len(seeds), batch)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(c) for c in chunks]
    k_idx = np.concatenate([r[0] for r in results])
    finite = np.concatenate([r[1] for r in results])
    frac = float(finite.mean())
    k_fin = k_idx[finite]
    q = (np.percentile(k_fin, [50, 90, 99]).tolist() if k_fin.size else [-1] * 3)
    k0 = int(np.median(k_fin)) if k_fin.size else 0
    tail = factorial_tail(max(k0, 1))
    params = {"k": str(k), "rows": str(rows), "samples": str(samples),
              "seed": str(seed), "k-median": str(q[0]), "k-p90": str(q[1]),
              "k-p99": str(q[2]), "tail-start": str(max(k0, 1)),
              "tail-sum": f"{float(tail):.12g}"}
    outcome = "pass" if frac >= 0.99 else "fail"
    return VerificationReport("borel-cantelli", outcome,
                              value=f"{frac:.6g}", params=params)


def serialize_reports(reports: Iterable[VerificationReport]) -> str:
    return "\n".join(r.to_line() for r in reports) + "\n"


def parse_reports(text: str) -> list[VerificationReport]:
    return [VerificationReport.from_line(ln)
            for ln in text.splitlines() if ln.strip()]
