"""Exact-rational matrix rows on the factorial value grid.

A row ("creature") is a finitely supported probability vector on positions
[mdn, mup) whose entry at position k is a multiple of 1/k!.  All algebra
here is exact; floats never enter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

from .errors import GridError, SearchSpaceError

ZERO = Fraction(0)
ONE = Fraction(1)

_EXACT_FACTORIAL_LIMIT = 3000


@lru_cache(maxsize=None)
def _factorial(k: int) -> int:
    return math.factorial(k)


def divides_factorial(den: int, k: int) -> bool:
    """Whether den divides k!, without materializing huge factorials."""
    if den <= 0:
        raise ValueError("denominator must be positive")
    if den == 1:
        return True
    if k <= 1:
        return False
    if k <= _EXACT_FACTORIAL_LIMIT:
        return _factorial(k) % den == 0
    d = den
    p = 2
    while p * p <= d:
        if d % p == 0:
            need = 0
            while d % p == 0:
                need += 1
                d //= p
            have, q = 0, p
            while q <= k:
                have += k // q
                q *= p
            if have < need:
                return False
        p += 1 if p == 2 else 2
    return d == 1 or d <= k


def on_grid(value: Fraction, position: int) -> bool:
    """value * position! is an integer."""
    return divides_factorial(value.denominator, position)


@dataclass(frozen=True, slots=True)
class Creature:
    """One matrix row: domain [mdn, mup), sorted nonzero entries, sum 1."""

    mdn: int
    mup: int
    entries: tuple[tuple[int, Fraction], ...]
    _hash: int = field(init=False, repr=False, compare=False)
    _vmap: dict = field(init=False, repr=False, compare=False)

    def __hash__(self):
        try:
            return self._hash
        except AttributeError:
            h = hash((self.mdn, self.mup, self.entries))
            object.__setattr__(self, "_hash", h)
            return h

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(k for k, _ in self.entries)

    @property
    def norm(self) -> int:
        return self.mdn

    @property
    def support_size(self) -> int:
        return len(self.entries)

    def value(self, k: int) -> Fraction:
        if len(self.entries) > 8:
            try:
                cached = self._vmap
            except AttributeError:
                cached = dict(self.entries)
                object.__setattr__(self, "_vmap", cached)
            return cached.get(k, ZERO)
        for pos, v in self.entries:
            if pos == k:
                return v
        return ZERO

    def describe(self) -> str:
        body = " ".join(f"{k}:{v.numerator}/{v.denominator}" for k, v in self.entries)
        return f"mdn={self.mdn} mup={self.mup} {body}"


def make_creature(mdn: int, mup: int, entries: Mapping[int, Fraction] | Iterable[tuple[int, Fraction]]) -> Creature:
    """Validate and canonicalize a row; zero entries are dropped from support."""
    if mdn >= mup:
        raise GridError(f"empty domain [{mdn}, {mup})")
    items = entries.items() if isinstance(entries, Mapping) else entries
    kept: list[tuple[int, Fraction]] = []
    total = ZERO
    for k, v in items:
        v = Fraction(v)
        if not (mdn <= k < mup):
            raise GridError(f"entry position {k} outside [{mdn}, {mup})")
        if v < 0 or v > 1:
            raise GridError(f"entry at {k} outside [0, 1]: {v}")
        if not on_grid(v, k):
            raise GridError(f"grid violation at {k}: {v} * {k}! is not an integer")
        if v != 0:
            kept.append((k, v))
            total += v
    if not kept:
        raise GridError("empty support")
    if total != 1:
        raise GridError(f"entries sum to {total}, expected exactly 1")
    kept.sort()
    if len(set(k for k, _ in kept)) != len(kept):
        raise GridError("duplicate entry positions")
    return Creature(mdn=mdn, mup=mup, entries=tuple(kept))


def point_mass(position: int, mdn: int | None = None, mup: int | None = None) -> Creature:
    """The row with all mass at one position; always grid-admissible."""
    lo = position if mdn is None else mdn
    hi = position + 1 if mup is None else mup
    if not lo <= position < hi:
        raise GridError(f"position {position} outside [{lo}, {hi})")
    return Creature(mdn=lo, mup=hi, entries=((position, ONE),))


def support(c: Creature) -> tuple[int, ...]:
    """Positions with nonzero entries (explicit zeroes are excluded)."""
    return c.support


def aver(eta: Sequence[int] | Callable[[int], int], c: Creature) -> Fraction:
    """Weighted average of eta under the row: one entry of the matrix product."""
    total = ZERO
    for k, v in c.entries:
        if callable(eta):
            bit = eta(k)
        else:
            if k >= len(eta):
                raise ValueError(f"eta too short: needs index {k}, has {len(eta)}")
            bit = eta[k]
        if bit not in (0, 1):
            raise ValueError(f"eta value at {k} is {bit}, expected 0 or 1")
        if bit:
            total += v
    return total


def compose(parts: Sequence[Creature], u: Sequence[int] | None = None,
            weights: Sequence[Fraction] | None = None) -> Creature:
    """Convex combination of consecutive rows over a block.

    The result spans the whole block [mdn(parts[0]), mup(parts[-1])); parts
    outside `u` contribute zero entries.  Weights must keep every scaled
    entry on the factorial grid; snap_weights repairs vectors that do not.
    """
    if not parts:
        raise GridError("compose needs at least one part")
    for left, right in zip(parts, parts[1:]):
        if left.mup != right.mdn:
            raise GridError(f"parts not consecutive: [{left.mdn},{left.mup}) then [{right.mdn},{right.mup})")
    if u is None:
        u = tuple(range(len(parts)))
    u = tuple(u)
    if not u:
        raise GridError("u must be non-empty")
    if sorted(set(u)) != sorted(u) or any(not 0 <= i < len(parts) for i in u):
        raise GridError("u must be distinct indices into parts")
    if weights is None:
        if len(u) != 1:
            raise GridError("weights required when |u| > 1")
        weights = (ONE,)
    weights = tuple(Fraction(w) for w in weights)
    if len(weights) != len(u):
        raise GridError("weights must align with u")
    if any(w <= 0 for w in weights):
        raise GridError("weights must be positive")
    if sum(weights) != 1:
        raise GridError(f"weights sum to {sum(weights)}, expected exactly 1")
    if len(parts) == 1 and weights == (ONE,):
        return parts[0]

    entries: list[tuple[int, Fraction]] = []
    for i, d in zip(u, weights):
        for k, v in parts[i].entries:
            scaled = d * v
            if not on_grid(scaled, k):
                raise GridError(
                    f"grid inadmissibility at {k}: weight {d} * {v} leaves the grid; snap the weights")
            entries.append((k, scaled))
    entries.sort()
    return Creature(mdn=parts[0].mdn, mup=parts[-1].mup, entries=tuple(entries))


def pad_with_zeroes(c: Creature, new_mup: int) -> Creature:
    """Stretch the domain rightward; support and entries are unchanged."""
    if new_mup < c.mup:
        raise GridError(f"new_mup {new_mup} < mup {c.mup}")
    if new_mup == c.mup:
        return c
    return Creature(mdn=c.mdn, mup=new_mup, entries=c.entries)


# --------------------------------------------------------------------------
# weight snapping

def part_grid_gcd(part: Creature) -> int:
    """g such that d is admissible for this part iff denominator(d) divides g."""
    if max(part.support) > _EXACT_FACTORIAL_LIMIT:
        raise SearchSpaceError(
            "exact weight grid needs support positions <= "
            f"{_EXACT_FACTORIAL_LIMIT}; use a resolution grid instead")
    g = 0
    for k, v in part.entries:
        m = v.numerator * (_factorial(k) // v.denominator)
        g = math.gcd(g, m)
    return g


def admissible_weight(d: Fraction, part: Creature) -> bool:
    return all(on_grid(d * v, k) for k, v in part.entries)


def _lex_min_vector(grids: list[list[Fraction]], prefix: list[Fraction],
                    remaining: Fraction) -> list[Fraction] | None:
    """First (lexicographically) choice with one value per grid summing to `remaining`."""
    if not grids:
        return list(prefix) if remaining == 0 else None
    head, rest = grids[0], grids[1:]
    min_rest = sum(g[0] for g in rest) if rest else ZERO
    max_rest = sum(g[-1] for g in rest) if rest else ZERO
    for d in head:
        left = remaining - d
        if left < min_rest or left > max_rest:
            continue
        found = _lex_min_vector(rest, prefix + [d], left)
        if found is not None:
            return found
    return None


def _ceil_frac(x: Fraction) -> int:
    return -((-x.numerator) // x.denominator)


def _floor_frac(x: Fraction) -> int:
    return x.numerator // x.denominator


_GRID_LIST_CAP = 100_000


def snap_weights(weights: Sequence[Fraction], parts: Sequence[Creature]) -> tuple[Fraction, ...]:
    """Nearest admissible weight vector in max-norm, ties broken lexicographically.

    Admissible means every scaled entry stays on the factorial grid and the
    vector sums to exactly 1.  Raises when no admissible vector exists,
    which can only happen when all supports sit at very small positions.
    """
    weights = [Fraction(w) for w in weights]
    if len(weights) != len(parts) or not parts:
        raise GridError("weights and parts must align and be non-empty")
    if any(w <= 0 for w in weights):
        raise GridError("weights must be positive")
    if sum(weights) != 1:
        raise GridError("weights must sum to exactly 1")
    if all(admissible_weight(w, p) for w, p in zip(weights, parts)):
        return tuple(weights)

    gs = [part_grid_gcd(p) for p in parts]
    if any(g == 0 for g in gs):
        raise GridError("degenerate part grid")
    if sum(Fraction(1, g) for g in gs) > 1:
        raise GridError("no admissible weight vector exists for these parts")

    def grid_choices(r: Fraction) -> list[list[Fraction]] | None:
        grids = []
        for w, g in zip(weights, gs):
            lo_j = max(1, _ceil_frac((w - r) * g))
            hi_j = min(g, _floor_frac((w + r) * g))
            if lo_j > hi_j:
                return None
            if hi_j - lo_j > _GRID_LIST_CAP:
                raise SearchSpaceError("weight grid too fine for exact snapping")
            grids.append([Fraction(j, g) for j in range(lo_j, hi_j + 1)])
        return grids

    base_slack = len(parts) + 2
    for attempt in range(8):
        slack = base_slack * (4 ** attempt)
        radii: set[Fraction] = set()
        exhaustive = True
        for w, g in zip(weights, gs):
            center = _floor_frac(w * g)
            lo = max(1, center - slack)
            hi = min(g, center + slack + 1)
            if lo > 1 or hi < g:
                exhaustive = False
            for j in range(lo, hi + 1):
                if 1 <= j <= g:
                    radii.add(abs(Fraction(j, g) - w))
        for r in sorted(radii):
            grids = grid_choices(r)
            if grids is None:
                continue
            found = _lex_min_vector(grids, [], ONE)
            if found is not None:
                return tuple(found)
        if exhaustive:
            raise GridError("no admissible weight vector exists for these parts")
    raise SearchSpaceError("weight snapping exceeded its search bounds")


def snap_uniform(parts: Sequence[Creature], resolution: int) -> tuple[Fraction, ...] | None:
    """Near-uniform admissible vector on the 1/resolution grid, or None.

    Fast path used by wide compositions: m parts get floor/ceil multiples of
    1/resolution that sum to exactly 1, the larger shares placed last.
    """
    m = len(parts)
    if m == 0 or m > resolution:
        return None
    base, extra = divmod(resolution, m)
    out = []
    for idx in range(m):
        a = base + (1 if idx >= m - extra else 0)
        out.append(Fraction(a, resolution))
    if sum(out) != 1:
        return None
    for d, p in zip(out, parts):
        if not admissible_weight(d, p):
            return None
    return tuple(out)


# --------------------------------------------------------------------------
# row serialization (one row per line)

def format_row(index: int, c: Creature) -> str:
    return f"row {index}: {c.describe()}"


def parse_row(line: str) -> tuple[int, Creature]:
    try:
        head, _, body = line.partition(":")
        tag, idx = head.split()
        if tag != "row":
            raise ValueError("not a row line")
        fields = body.split()
        mdn = int(fields[0].removeprefix("mdn="))
        mup = int(fields[1].removeprefix("mup="))
        entries = {}
        for tok in fields[2:]:
            pos, _, frac = tok.partition(":")
            num, _, den = frac.partition("/")
            entries[int(pos)] = Fraction(int(num), int(den))
        return int(idx), make_creature(mdn, mup, entries)
    except (ValueError, IndexError) as exc:
        raise GridError(f"malformed row line {line!r}: {exc}") from exc
