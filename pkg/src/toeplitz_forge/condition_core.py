"""Conditions (trunk + row list + canonical tail), their orderings, and
the finite extension spaces built from row composition.

A condition is a finitely presented infinite object: after its explicit
rows it continues with point masses at consecutive positions, so every
row index has a well-defined row and all order checks reduce to finite
recomputation plus a tail-alignment check.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Sequence

from .creature_core import (
    Creature,
    ONE,
    compose,
    format_row,
    parse_row,
    part_grid_gcd,
    point_mass,
    snap_uniform,
    snap_weights,
)
from .errors import FormatError, GridError, SearchSpaceError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Condition:
    """(trunk_len, explicit rows, point-mass tail).

    Consecutive explicit rows tile: mup of one is mdn of the next.  Row n
    beyond the explicit list is the point mass at tail_start + (n - len).
    """

    trunk_len: int
    creatures: tuple[Creature, ...]
    origin: int = 0

    def __post_init__(self):
        if self.trunk_len < 0:
            raise ValueError("trunk_len must be >= 0")
        if self.trunk_len > len(self.creatures):
            raise ValueError("trunk_len exceeds explicit row count")
        for a, b in zip(self.creatures, self.creatures[1:]):
            if a.mup != b.mdn:
                raise ValueError(
                    f"rows not consecutive: [{a.mdn},{a.mup}) then [{b.mdn},{b.mup})")

    @property
    def explicit_len(self) -> int:
        return len(self.creatures)

    @property
    def tail_start(self) -> int:
        return self.creatures[-1].mup if self.creatures else self.origin

    @property
    def start_position(self) -> int:
        return self.creatures[0].mdn if self.creatures else self.origin

    def row(self, n: int) -> Creature:
        if n < 0:
            raise IndexError("row index must be >= 0")
        if n < len(self.creatures):
            return self.creatures[n]
        return point_mass(self.tail_start + (n - len(self.creatures)))

    def rows(self, lo: int, hi: int) -> list[Creature]:
        return [self.row(n) for n in range(lo, hi)]

    def pure(self) -> "Condition":
        return Condition(0, self.creatures, self.origin)


def trivial_condition(origin: int = 0) -> Condition:
    """The identity method: every row a point mass at its own index."""
    return Condition(trunk_len=0, creatures=(), origin=origin)


# --------------------------------------------------------------------------
# order witnesses and checks

@dataclass(frozen=True, slots=True)
class RowWitness:
    """One output row as a combination of input rows [k_lo, k_hi).

    u holds the absolute input-row indices carrying weight; the rest of the
    block is zero padding.
    """

    k_lo: int
    k_hi: int
    u: tuple[int, ...]
    weights: tuple[Fraction, ...]


@dataclass(frozen=True)
class LeqWitness:
    """Certifies rows start, start+1, ... of the stronger condition; rows
    before `start` must match the weaker condition, rows past the witness
    continue block-by-block with identity."""

    start: int
    rows: tuple[RowWitness, ...]


@dataclass(frozen=True)
class StarWitness:
    """Finite-mistake certificate: drop the first `drop` rows of the stronger
    condition and graft `trunk` in front of the remainder."""

    drop: int
    trunk: tuple[Creature, ...]
    inner: LeqWitness


@dataclass(frozen=True)
class CheckResult:
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def identity_witness(start: int) -> LeqWitness:
    return LeqWitness(start=start, rows=())


def _recompute_row(p: Condition, rw: RowWitness) -> Creature:
    parts = p.rows(rw.k_lo, rw.k_hi)
    rel = tuple(i - rw.k_lo for i in rw.u)
    return compose(parts, rel, rw.weights)


def check_leq(p: Condition, q: Condition, wit: LeqWitness) -> CheckResult:
    """Exact recomputation check that q refines p along the witness."""
    try:
        if q.trunk_len < p.trunk_len:
            return CheckResult(False, f"trunk shrank: {p.trunk_len} -> {q.trunk_len}")
        if wit.start < p.trunk_len:
            return CheckResult(False, f"witness starts at {wit.start} inside required trunk {p.trunk_len}")
        for j in range(wit.start):
            if p.row(j) != q.row(j):
                return CheckResult(False, f"row {j} differs inside the preserved prefix")
        cursor = wit.start
        for idx, rw in enumerate(wit.rows):
            n = wit.start + idx
            if rw.k_lo != cursor:
                return CheckResult(False, f"block for row {n} starts at {rw.k_lo}, expected {cursor}")
            if rw.k_hi <= rw.k_lo:
                return CheckResult(False, f"empty block for row {n}")
            expected = _recompute_row(p, rw)
            if expected != q.row(n):
                return CheckResult(False, f"row {n} is not the claimed combination")
            cursor = rw.k_hi
        n = wit.start + len(wit.rows)
        k = cursor
        while n < q.explicit_len or k < p.explicit_len:
            if q.row(n) != p.row(k):
                return CheckResult(False, f"tail row {n} (input row {k}) differs")
            n += 1
            k += 1
        if q.row(n) != p.row(k):
            return CheckResult(False, "tail point masses misaligned")
        return CheckResult(True)
    except (GridError, ValueError, IndexError) as exc:
        return CheckResult(False, f"malformed witness: {exc}")


def leq(p: Condition, q: Condition, wit: LeqWitness) -> CheckResult:
    return check_leq(p, q, wit)


def leq_i(p: Condition, q: Condition, i: int, wit: LeqWitness) -> CheckResult:
    """Like leq, plus equal trunk lengths and equal first trunk_len + i rows."""
    if q.trunk_len != p.trunk_len:
        return CheckResult(False, f"trunk lengths differ: {p.trunk_len} vs {q.trunk_len}")
    need = p.trunk_len + i
    if wit.start < need:
        return CheckResult(False, f"witness starts at {wit.start}, before preserved prefix {need}")
    for j in range(need):
        if p.row(j) != q.row(j):
            return CheckResult(False, f"row {j} differs inside preserved prefix of length {need}")
    return check_leq(p, q, wit)


def leq_star(p: Condition, q: Condition, wit: StarWitness) -> CheckResult:
    """Finite-mistake refinement: p <= (trunk, q.row(drop), q.row(drop+1), ...)."""
    try:
        for a, b in zip(wit.trunk, wit.trunk[1:]):
            if a.mup != b.mdn:
                return CheckResult(False, "replacement trunk does not tile")
        rest = tuple(q.row(j) for j in range(wit.drop, max(wit.drop, q.explicit_len)))
        if wit.trunk:
            first = rest[0] if rest else q.row(wit.drop)
            if wit.trunk[-1].mup != first.mdn:
                return CheckResult(False, "replacement trunk does not meet the kept rows")
        creatures = wit.trunk + rest
        origin = creatures[0].mdn if creatures else q.row(wit.drop).mdn
        shifted = Condition(trunk_len=len(wit.trunk), creatures=creatures, origin=origin)
    except (ValueError, GridError) as exc:
        return CheckResult(False, f"malformed star witness: {exc}")
    res = check_leq(p, shifted, wit.inner)
    if not res.ok:
        return CheckResult(False, f"after mistake {wit.drop}: {res.reason}")
    return res


# --------------------------------------------------------------------------
# witness construction

def solve_row_witness(p: Condition, cursor: int, target: Creature) -> RowWitness | None:
    """Recover the unique (block, u, weights) expressing target over p's rows.

    The block is forced by the target's domain; per-part weights are forced
    by proportionality on each part's support.  Returns None when the target
    is not a combination of p's rows starting at row `cursor`.
    """
    if p.row(cursor).mdn != target.mdn:
        return None
    k_hi = cursor
    pos = target.mdn
    while pos < target.mup:
        r = p.row(k_hi)
        if r.mdn != pos:
            return None
        pos = r.mup
        k_hi += 1
        if pos > target.mup:
            return None
    u: list[int] = []
    weights: list[Fraction] = []
    for t in range(cursor, k_hi):
        part = p.row(t)
        vals = [target.value(k) / v for k, v in part.entries]
        d = vals[0]
        if any(x != d for x in vals[1:]):
            return None
        if d < 0:
            return None
        if d > 0:
            u.append(t)
            weights.append(d)
    if not u or sum(weights) != 1:
        return None
    for k, _ in target.entries:
        covered = any(p.row(t).value(k) != 0 for t in u)
        if not covered:
            return None
    return RowWitness(cursor, k_hi, tuple(u), tuple(weights))


def find_leq_witness(p: Condition, q: Condition, start: int | None = None) -> LeqWitness | None:
    """Reconstruct a leq witness by solving row by row (blocks are forced)."""
    start = p.trunk_len if start is None else start
    for j in range(start):
        if p.row(j) != q.row(j):
            return None
    rows: list[RowWitness] = []
    cursor = start
    n = start
    limit = max(q.explicit_len, 1)
    while n < limit:
        rw = solve_row_witness(p, cursor, q.row(n))
        if rw is None:
            return None
        rows.append(rw)
        cursor = rw.k_hi
        n += 1
    wit = LeqWitness(start=start, rows=tuple(rows))
    return wit if check_leq(p, q, wit) else None


def find_leq_star_witness(p: Condition, q: Condition, max_drop: int = 8) -> StarWitness | None:
    """Toy exhaustive search over mistake bounds and trunk graft lengths."""
    for drop in range(0, max_drop + 1):
        anchor = q.row(drop).mdn
        # graft p's own rows in front until they meet the kept part of q
        trunk: list[Creature] = []
        m = 0
        pos = p.start_position
        feasible = pos <= anchor
        while pos < anchor:
            r = p.row(m)
            trunk.append(r)
            pos = r.mup
            m += 1
            if m > q.explicit_len + max_drop + p.explicit_len + 4:
                feasible = False
                break
        if not feasible or pos != anchor:
            continue
        if len(trunk) < p.trunk_len:
            continue
        rest = tuple(q.row(j) for j in range(drop, max(drop, q.explicit_len)))
        try:
            shifted = Condition(len(trunk), tuple(trunk) + rest,
                                origin=trunk[0].mdn if trunk else anchor)
        except ValueError:
            continue
        inner = find_leq_witness(p, shifted)
        if inner is not None:
            wit = StarWitness(drop=drop, trunk=tuple(trunk), inner=inner)
            if leq_star(p, q, wit):
                return wit
    return None


def compose_witness(w1: LeqWitness, w2: LeqWitness) -> LeqWitness:
    """Witness for p <= r given witnesses for p <= q and q <= r.

    Blocks expand and weights multiply; the result certifies r's rows over
    p directly, which is the transitivity check used throughout.
    """
    def sub_witness(t: int) -> RowWitness:
        if t < w1.start:
            return RowWitness(t, t + 1, (t,), (ONE,))
        idx = t - w1.start
        if idx < len(w1.rows):
            return w1.rows[idx]
        base = w1.rows[-1].k_hi if w1.rows else w1.start
        j = base + (idx - len(w1.rows))
        return RowWitness(j, j + 1, (j,), (ONE,))

    start = min(w1.start, w2.start)
    rows: list[RowWitness] = []
    for n in range(start, w2.start):
        rows.append(sub_witness(n))
    for rw2 in w2.rows:
        k_lo = sub_witness(rw2.k_lo).k_lo
        k_hi = sub_witness(rw2.k_hi - 1).k_hi
        u: list[int] = []
        weights: list[Fraction] = []
        for t, d in zip(rw2.u, rw2.weights):
            sub = sub_witness(t)
            for s, e in zip(sub.u, sub.weights):
                u.append(s)
                weights.append(d * e)
        rows.append(RowWitness(k_lo, k_hi, tuple(u), tuple(weights)))
    # past w2's explicit rows the outer condition continues identically, so
    # the inner witness keeps acting until its own rows are exhausted
    cursor = w2.rows[-1].k_hi if w2.rows else w2.start
    w1_end = w1.start + len(w1.rows)
    t = cursor
    while t < w1_end:
        rows.append(sub_witness(t))
        t += 1
    return LeqWitness(start=start, rows=tuple(rows))


# --------------------------------------------------------------------------
# composition spaces

def weight_vectors(parts: Sequence[Creature], grid_cap: int = 64) -> list[tuple[Fraction, ...]]:
    """Every admissible positive weight vector over `parts` summing to 1,
    in ascending lexicographic order.  Raises when the grid exceeds grid_cap."""
    gs = [part_grid_gcd(p) for p in parts]
    out: list[tuple[Fraction, ...]] = []

    def rec(idx: int, prefix: list[Fraction], remaining: Fraction):
        if idx == len(parts) - 1:
            d = remaining
            if 0 < d <= 1 and (d * gs[idx]).denominator == 1:
                out.append(tuple(prefix + [d]))
                if len(out) > grid_cap:
                    raise SearchSpaceError(
                        f"weight grid exceeds cap {grid_cap} for this block")
            return
        g = gs[idx]
        min_rest = sum(Fraction(1, h) for h in gs[idx + 1:])
        j = 1
        while True:
            d = Fraction(j, g)
            if d > remaining - min_rest or d > 1:
                break
            rec(idx + 1, prefix + [d], remaining - d)
            j += 1

    rec(0, [], ONE)
    return out


def _subsets_lex(n: int) -> list[tuple[int, ...]]:
    """Non-empty subsets of range(n) ordered lexicographically as index tuples."""
    subs = []
    for size in range(1, n + 1):
        subs.extend(itertools.combinations(range(n), size))
    subs.sort()
    return subs


def sigma_enum(parts: Sequence[Creature], grid_cap: int = 64,
               max_results: int | None = None) -> list[Creature]:
    """All combinations over the full block: every non-empty u, every
    admissible weight vector, in (u, weights) lexicographic order."""
    out: list[Creature] = []
    for u in _subsets_lex(len(parts)):
        chosen = [parts[i] for i in u]
        for vec in weight_vectors(chosen, grid_cap=grid_cap):
            out.append(compose(list(parts), u, vec))
            if max_results is not None and len(out) > max_results:
                raise SearchSpaceError(f"composition space exceeds {max_results}")
    return out


def pos_star(w: tuple[Creature, ...], parts: Sequence[Creature],
             grid_cap: int = 64, cap: int | None = None) -> list[tuple[Creature, ...]]:
    """One-step extensions of the trunk w by a combination of the whole block."""
    if not parts:
        raise SearchSpaceError("pos* needs a non-empty block")
    return [w + (c,) for c in sigma_enum(parts, grid_cap=grid_cap, max_results=cap)]


def pos(w: tuple[Creature, ...], parts: Sequence[Creature],
        grid_cap: int = 64, cap: int = 10_000) -> list[tuple[Creature, ...]]:
    """Multi-step extensions: split the block into consecutive sub-blocks and
    chain one-step extensions.  Monotone in the sense that extending `parts`
    extends every chain."""
    if not parts:
        raise SearchSpaceError("pos needs a non-empty block")
    results: list[tuple[Creature, ...]] = []

    def rec(at: int, chain: tuple[Creature, ...]):
        if at == len(parts):
            results.append(chain)
            if len(results) > cap:
                raise SearchSpaceError(f"pos space exceeds {cap}")
            return
        for end in range(at + 1, len(parts) + 1):
            block = parts[at:end]
            for c in sigma_enum(block, grid_cap=grid_cap, max_results=cap):
                rec(end, chain + (c,))

    rec(0, w)
    return results


def may(p: Condition, k: int, horizon: int, budget: int,
        max_block: int = 3, grid_cap: int = 64) -> list[Creature]:
    """Deterministic enumeration of rows reachable at stage k.

    Blocks [a, b) of p's rows with a >= trunk_len + k and b <= horizon are
    visited in (start, length) order; within a block, combinations follow
    the (u, weights) order of sigma_enum.  Distinct results are collected up
    to `budget`.  Returns [] when the horizon admits no block.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    lo = p.trunk_len + k
    out: list[Creature] = []
    seen: set[Creature] = set()
    for a in range(lo, horizon):
        for length in range(1, max_block + 1):
            if a + length > horizon:
                break
            block = p.rows(a, a + length)
            try:
                combos = sigma_enum(block, grid_cap=grid_cap)
            except SearchSpaceError:
                combos = _proposal_combos(block)
            for c in combos:
                if c not in seen:
                    seen.add(c)
                    out.append(c)
                    if len(out) >= budget:
                        return out
    return out


def _proposal_combos(block: Sequence[Creature]) -> list[Creature]:
    """Fallback when the full weight grid is too large: singleton selections
    plus a near-uniform combination over the whole block."""
    out = []
    for i in range(len(block)):
        out.append(compose(list(block), (i,), (ONE,)))
    vec = snap_uniform(block, 10080)
    if vec is None:
        try:
            uniform = [Fraction(1, len(block))] * len(block)
            vec = snap_weights(uniform, block)
        except (GridError, SearchSpaceError):
            vec = None
    if vec is not None:
        try:
            out.append(compose(list(block), tuple(range(len(block))), vec))
        except GridError:
            pass
    return out


# --------------------------------------------------------------------------
# restriction and continuous reading

def restrict(r: Condition, q: Condition, n: int) -> Condition:
    """First n rows from r, then q's rows from the matching boundary on.

    Requires q <= r so that r's row boundaries are q's boundaries; raises
    otherwise.  When n cuts inside r's trunk the graft is noted in the log.
    """
    if n == 0:
        return q
    if n < r.trunk_len:
        log.debug("restrict: cut %d lies inside the trunk (%d)", n, r.trunk_len)
    boundary = r.row(n - 1).mup
    j = 0
    while True:
        row = q.row(j)
        if row.mdn >= boundary:
            break
        j += 1
        if j > q.explicit_len + (boundary - q.start_position) + 2:
            raise GridError("restriction boundary never reached in q")
    if q.row(j).mdn != boundary:
        raise GridError(
            f"boundary {boundary} is not a row boundary of the weaker condition")
    head = tuple(r.row(t) for t in range(n))
    rest = tuple(q.row(t) for t in range(j, max(j, q.explicit_len)))
    return Condition(trunk_len=max(q.trunk_len, n), creatures=head + rest,
                     origin=head[0].mdn)


class NameOracle:
    """Decides a named value from an initial segment of committed rows.

    decide(rows) must be monotone under appending rows: once a value is
    returned for a prefix, every longer prefix returns the same value.
    """

    def __init__(self, m: int, fn: Callable[[tuple[Creature, ...]], int | None],
                 description: str = ""):
        self.m = m
        self._fn = fn
        self.description = description

    def decide(self, rows: tuple[Creature, ...]) -> int | None:
        return self._fn(rows)


def prefix_oracle(m: int, depth: int, fn: Callable[[tuple[Creature, ...]], int]) -> NameOracle:
    """Oracle that decides fn(rows[:depth]) once `depth` rows are committed."""
    def decide(rows: tuple[Creature, ...]) -> int | None:
        if len(rows) < depth:
            return None
        return fn(rows[:depth])
    return NameOracle(m, decide, description=f"prefix depth {depth}")


def decided_value(cond: Condition, oracle: NameOracle, depth: int) -> int | None:
    """First decision reached along the condition's own row prefix."""
    rows: tuple[Creature, ...] = ()
    v = oracle.decide(rows)
    if v is not None:
        return v
    for n in range(depth):
        rows = rows + (cond.row(n),)
        v = oracle.decide(rows)
        if v is not None:
            return v
    return None


def extension_universe(q: Condition, chain_depth: int, cap: int = 4000,
                       grid_cap: int = 64) -> list[Condition]:
    """Bounded universe of refinements of q: chains over its first rows
    followed by the untouched remainder."""
    out: list[Condition] = [q]
    for cut in range(1, chain_depth + 1):
        head = q.rows(0, cut)
        for chain in pos((), head, grid_cap=grid_cap, cap=cap):
            rest = tuple(q.row(t) for t in range(cut, max(cut, q.explicit_len)))
            creatures = chain + rest
            cond = Condition(trunk_len=min(q.trunk_len, len(chain)),
                             creatures=creatures, origin=creatures[0].mdn)
            out.append(cond)
            if len(out) > cap:
                raise SearchSpaceError(f"extension universe exceeds {cap}")
    return out


def approximates(q: Condition, oracle: NameOracle, n: int, *,
                 chain_depth: int, scan_depth: int, cap: int = 4000) -> CheckResult:
    """Brute-force check that values decided by refinements of q survive
    restriction to q after row n."""
    for r in extension_universe(q, chain_depth, cap=cap):
        v = decided_value(r, oracle, scan_depth)
        if v is None:
            continue
        try:
            cut = restrict(r, q, n)
        except GridError as exc:
            return CheckResult(False, f"restriction failed: {exc}")
        v2 = decided_value(cut, oracle, scan_depth + q.explicit_len + 2)
        if v2 != v:
            return CheckResult(False,
                               f"refinement decided {v} but the restriction decided {v2}")
    return CheckResult(True)


def fuse_deciding(p: Condition, names: Sequence[NameOracle], *,
                  stages: int, universe_bound: int = 4000,
                  grid_cap: int = 64) -> Condition:
    """Commit rows one by one so that every bounded-universe refinement's
    decisions are already forced by finite parts of the result.

    At stage n, every (chain over the committed rows, named index) pair is
    visited in enumeration order; whenever some refinement of the current
    tail decides a name, the tail is replaced by the deciding refinement.
    """
    trunk = tuple(p.row(j) for j in range(p.trunk_len))
    committed: list[Creature] = []
    tail: list[Creature] = [p.row(j) for j in range(p.trunk_len, p.explicit_len)]
    next_input = p.explicit_len

    def tail_row(idx: int) -> Creature:
        nonlocal next_input
        while idx >= len(tail):
            tail.append(p.row(next_input))
            next_input += 1
        return tail[idx]

    for n in range(stages):
        if n == 0:
            chains = [trunk]
            bound = (trunk[-1].mup if trunk else p.start_position)
        else:
            chains = pos(trunk, tuple(committed), grid_cap=grid_cap, cap=universe_bound)
            bound = committed[-1].mup
        if len(chains) * (bound + 1) > universe_bound * 4:
            raise SearchSpaceError(
                f"stage {n}: {len(chains)} chains x {bound + 1} names exceeds the universe bound")
        for w_i in chains:
            for m_i in range(bound + 1):
                relevant = [o for o in names if o.m == m_i]
                for oracle in relevant:
                    _refine_tail_for(w_i, oracle, tail, tail_row, universe_bound, grid_cap)
        tail_row(0)
        committed.append(tail.pop(0))
    creatures = trunk + tuple(committed) + tuple(tail)
    return Condition(trunk_len=p.trunk_len, creatures=creatures,
                     origin=creatures[0].mdn if creatures else p.origin)


def _refine_tail_for(w_i: tuple[Creature, ...], oracle: NameOracle,
                     tail: list[Creature], tail_row, universe_bound: int,
                     grid_cap: int) -> None:
    """If some chain over the tail decides the oracle after w_i, splice the
    first deciding chain into the tail."""
    if oracle.decide(w_i) is not None:
        return
    # already decided by the tail as committed?
    rows = w_i
    for idx in range(min(len(tail) + 2, 8)):
        rows = rows + (tail_row(idx),)
        if oracle.decide(rows) is not None:
            return
    for cut in range(1, 5):
        head = tuple(tail_row(i) for i in range(cut))
        try:
            chains = pos((), head, grid_cap=grid_cap, cap=universe_bound)
        except SearchSpaceError:
            return
        for chain in chains:
            probe = w_i
            decided_at = None
            for idx, c in enumerate(chain):
                probe = probe + (c,)
                if oracle.decide(probe) is not None:
                    decided_at = idx + 1
                    break
            if decided_at is not None:
                del tail[:cut]
                tail[:0] = list(chain)
                return


# --------------------------------------------------------------------------
# condition serialization

CONDITION_HEADER = "condition"


def serialize_condition(cond: Condition) -> str:
    lines = [f"condition trunk={cond.trunk_len} origin={cond.origin}"]
    for i, c in enumerate(cond.creatures):
        lines.append(format_row(i, c))
    lines.append("tail point-mass")
    return "\n".join(lines) + "\n"


def parse_condition(text: str) -> Condition:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("condition trunk="):
        raise FormatError("expected 'condition trunk=<n> ...' header")
    head = lines[0].split()
    trunk = None
    origin = 0
    for tok in head[1:]:
        key, _, value = tok.partition("=")
        if key == "trunk":
            trunk = int(value)
        elif key == "origin":
            origin = int(value)
        else:
            raise FormatError(f"unknown condition header field {key!r}")
    if trunk is None:
        raise FormatError("condition header missing trunk=")
    if lines[-1].strip() != "tail point-mass":
        raise FormatError("condition must end with 'tail point-mass'")
    rows = []
    for ln in lines[1:-1]:
        idx, c = parse_row(ln)
        if idx != len(rows):
            raise FormatError(f"row index {idx} out of order")
        rows.append(c)
    try:
        return Condition(trunk_len=trunk, creatures=tuple(rows), origin=origin)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
