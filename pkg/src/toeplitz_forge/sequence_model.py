"""Bounded 0/1 sequences the summation matrices act on.

Two flavours: deterministic streams (total functions of the index) and
random names (a finite-window boolean adapter evaluated over a seeded,
position-addressable bitstream).  A family file collects named sources.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .bits import bit_at, bits_matrix, derive, sample_seeds
from .errors import AdapterError, FamilyFormatError

DETERMINISTIC_KINDS = ("periodic", "literal-prefix", "doubling-block", "thue-morse")
KINDS = DETERMINISTIC_KINDS + ("random-name",)

FAMILY_HEADER = "family v1"


# --------------------------------------------------------------------------
# adapter expressions

_COMBINATORS = ("not", "xor", "and", "or")


def _tokenize(text: str) -> list[str]:
    out = []
    cur = ""
    for ch in text:
        if ch in "()":
            if cur:
                out.append(cur)
                cur = ""
            out.append(ch)
        elif ch.isspace():
            if cur:
                out.append(cur)
                cur = ""
        else:
            cur += ch
    if cur:
        out.append(cur)
    return out


def _parse_expr(tokens: list[str], at: int) -> tuple[tuple, int]:
    if at >= len(tokens):
        raise AdapterError("unexpected end of adapter expression")
    if tokens[at] != "(":
        raise AdapterError(f"expected '(' at token {at}, got {tokens[at]!r}")
    at += 1
    if at >= len(tokens):
        raise AdapterError("bare '(' at end of expression")
    op = tokens[at]
    at += 1
    if op == "bit":
        if at >= len(tokens) or not tokens[at].lstrip("-").isdigit():
            raise AdapterError("bit needs an integer offset")
        off = int(tokens[at])
        if off < 0:
            raise AdapterError("bit offset must be >= 0")
        at += 1
        node = ("bit", off)
    elif op == "maj":
        if at >= len(tokens) or not tokens[at].isdigit():
            raise AdapterError("maj needs a window width")
        w = int(tokens[at])
        if w < 1:
            raise AdapterError("maj window must be >= 1")
        at += 1
        node = ("maj", w)
    elif op in _COMBINATORS:
        args = []
        while at < len(tokens) and tokens[at] == "(":
            sub, at = _parse_expr(tokens, at)
            args.append(sub)
        if op == "not" and len(args) != 1:
            raise AdapterError("not takes exactly one argument")
        if op != "not" and len(args) < 2:
            raise AdapterError(f"{op} takes at least two arguments")
        node = (op, *args)
    else:
        raise AdapterError(f"unknown adapter primitive {op!r}")
    if at >= len(tokens) or tokens[at] != ")":
        raise AdapterError(f"missing ')' after {op}")
    return node, at + 1


def _expr_offsets(expr: tuple) -> set[int]:
    op = expr[0]
    if op == "bit":
        return {expr[1]}
    if op == "maj":
        return set(range(expr[1]))
    out: set[int] = set()
    for sub in expr[1:]:
        out |= _expr_offsets(sub)
    return out


def _expr_text(expr: tuple) -> str:
    op = expr[0]
    if op in ("bit", "maj"):
        return f"({op} {expr[1]})"
    return "(" + " ".join([op] + [_expr_text(s) for s in expr[1:]]) + ")"


@dataclass(frozen=True)
class BorelAdapter:
    """Boolean function of finitely many bitstream offsets, one value per index.

    The value at index j reads only bits j+o for o in `offsets`; that window
    is exact, which is what makes expectations enumerable.
    """

    expr: tuple
    offsets: tuple[int, ...]

    def window_at(self, j: int) -> tuple[int, ...]:
        return tuple(j + o for o in self.offsets)

    def eval_at(self, j: int, bit: Callable[[int], int]) -> int:
        return _eval_expr(self.expr, j, bit)

    def eval_matrix(self, positions: np.ndarray, raw: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Vectorized evaluation: raw(pos_array) -> uint8[samples, len(pos_array)]."""
        return _eval_expr_np(self.expr, np.asarray(positions, dtype=np.int64), raw)

    def to_text(self) -> str:
        return _expr_text(self.expr)


def _eval_expr(expr: tuple, j: int, bit: Callable[[int], int]) -> int:
    op = expr[0]
    if op == "bit":
        return bit(j + expr[1])
    if op == "maj":
        w = expr[1]
        s = sum(bit(j + t) for t in range(w))
        return 1 if 2 * s > w else 0
    if op == "not":
        return 1 - _eval_expr(expr[1], j, bit)
    vals = [_eval_expr(sub, j, bit) for sub in expr[1:]]
    if op == "xor":
        acc = 0
        for v in vals:
            acc ^= v
        return acc
    if op == "and":
        return 1 if all(vals) else 0
    return 1 if any(vals) else 0  # or


def _eval_expr_np(expr: tuple, pos: np.ndarray, raw) -> np.ndarray:
    op = expr[0]
    if op == "bit":
        return raw(pos + expr[1])
    if op == "maj":
        w = expr[1]
        s = raw(pos).astype(np.int16)
        for t in range(1, w):
            s += raw(pos + t)
        return (2 * s > w).astype(np.uint8)
    if op == "not":
        return np.uint8(1) - _eval_expr_np(expr[1], pos, raw)
    vals = [_eval_expr_np(sub, pos, raw) for sub in expr[1:]]
    acc = vals[0]
    for v in vals[1:]:
        if op == "xor":
            acc = acc ^ v
        elif op == "and":
            acc = acc & v
        else:
            acc = acc | v
    return acc


def parse_adapter(text: str) -> BorelAdapter:
    """Parse a prefix-notation adapter expression, e.g. ``(xor (bit 0) (bit 1))``."""
    tokens = _tokenize(text)
    if not tokens:
        raise AdapterError("empty adapter expression")
    expr, at = _parse_expr(tokens, 0)
    if at != len(tokens):
        raise AdapterError("trailing tokens after adapter expression")
    return BorelAdapter(expr=expr, offsets=tuple(sorted(_expr_offsets(expr))))


# --------------------------------------------------------------------------
# sources

def _check_bits(value: str, what: str, allow_empty: bool = False) -> str:
    if not value and not allow_empty:
        raise FamilyFormatError(f"{what} must be a non-empty 0/1 string")
    if any(c not in "01" for c in value):
        raise FamilyFormatError(f"{what} must contain only 0 and 1")
    return value


@dataclass(frozen=True)
class SequenceSource:
    """One named bounded sequence; deterministic kinds are total in the index."""

    name: str
    kind: str
    prefix: str = ""
    period: str = ""
    bits: str = ""
    tail: int = 0
    start: int = 0
    adapter: BorelAdapter | None = None

    @property
    def is_random(self) -> bool:
        return self.kind == "random-name"

    def eval(self, j: int) -> int:
        return eval_sequence(self, j)


def eval_sequence(source: SequenceSource, j: int) -> int:
    """The j-th bit of a deterministic source.

    Random-name sources have no value without a bitstream; use sample_name.
    """
    if j < 0:
        raise ValueError("sequence index must be >= 0")
    kind = source.kind
    if kind == "periodic":
        if j < len(source.prefix):
            return int(source.prefix[j])
        return int(source.period[(j - len(source.prefix)) % len(source.period)])
    if kind == "literal-prefix":
        if j < len(source.bits):
            return int(source.bits[j])
        return source.tail
    if kind == "doubling-block":
        # block b covers [2^b - 1, 2^(b+1) - 1), alternating values
        b = (j + 1).bit_length() - 1
        return source.start ^ (b & 1)
    if kind == "thue-morse":
        return bin(j).count("1") & 1
    raise ValueError(f"source {source.name!r} is a random name; use sample_name")


def eval_block(source: SequenceSource, positions: np.ndarray) -> np.ndarray:
    """Vectorized eval_sequence over an int64 position array (deterministic only)."""
    pos = np.asarray(positions, dtype=np.int64)
    kind = source.kind
    if kind == "periodic":
        plen = len(source.prefix)
        per = np.frombuffer(source.period.encode(), dtype=np.uint8) - ord("0")
        out = per[np.maximum(pos - plen, 0) % len(per)]
        if plen:
            pre = np.frombuffer(source.prefix.encode(), dtype=np.uint8) - ord("0")
            mask = pos < plen
            out = np.where(mask, pre[np.minimum(pos, plen - 1)], out)
        return out.astype(np.uint8)
    if kind == "literal-prefix":
        blen = len(source.bits)
        out = np.full(pos.shape, source.tail, dtype=np.uint8)
        if blen:
            lit = np.frombuffer(source.bits.encode(), dtype=np.uint8) - ord("0")
            mask = pos < blen
            out = np.where(mask, lit[np.minimum(pos, blen - 1)], out).astype(np.uint8)
        return out
    if kind == "doubling-block":
        b = np.frexp((pos + 1).astype(np.float64))[1] - 1
        return (source.start ^ (b & 1)).astype(np.uint8)
    if kind == "thue-morse":
        v = pos.astype(np.uint64)
        for shift in (32, 16, 8, 4, 2, 1):
            v = v ^ (v >> np.uint64(shift))
        return (v & np.uint64(1)).astype(np.uint8)
    raise ValueError(f"source {source.name!r} is a random name; use sample_name")


def sample_name(source: SequenceSource, seed: int, horizon: int) -> list[int]:
    """Evaluate a random-name source over its seeded bitstream up to horizon.

    Deterministic in (source, seed, horizon); longer horizons extend shorter
    ones as a prefix because the bitstream is position-addressable.
    """
    if not source.is_random:
        raise ValueError(f"source {source.name!r} is deterministic; use eval_sequence")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    bit = lambda p: bit_at(seed, p)
    return [source.adapter.eval_at(j, bit) for j in range(horizon)]


def sample_name_matrix(source: SequenceSource, seeds: np.ndarray, positions: np.ndarray,
                       raw_cache: dict | None = None) -> np.ndarray:
    """Adapter values as uint8[len(seeds), len(positions)] over many streams.

    `raw_cache` maps position -> uint8 column and lets several adapters share
    one set of generated raw bits.
    """
    if not source.is_random:
        raise ValueError("deterministic sources have no sampled values")
    seeds = np.asarray(seeds, dtype=np.uint64)

    if raw_cache is None:
        raw = lambda p: bits_matrix(seeds, p)
    else:
        def raw(p):
            p = np.asarray(p, dtype=np.int64)
            missing = [int(x) for x in np.unique(p) if int(x) not in raw_cache]
            if missing:
                fresh = bits_matrix(seeds, np.array(missing, dtype=np.int64))
                for i, x in enumerate(missing):
                    raw_cache[x] = fresh[:, i]
            return np.stack([raw_cache[int(x)] for x in p], axis=1)

    return source.adapter.eval_matrix(np.asarray(positions, dtype=np.int64), raw)


def dependency_window(source: SequenceSource, lo: int, hi: int) -> tuple[int, ...]:
    """Exact set of bitstream positions the values over [lo, hi) depend on."""
    if not source.is_random:
        raise ValueError("deterministic sources have no dependency window")
    out: set[int] = set()
    for j in range(lo, hi):
        out.update(source.adapter.window_at(j))
    return tuple(sorted(out))


def dependency_window_over(source: SequenceSource, indices: Iterable[int]) -> tuple[int, ...]:
    """Dependency window of an arbitrary index set (e.g. a row's support)."""
    out: set[int] = set()
    for j in indices:
        out.update(source.adapter.window_at(j))
    return tuple(sorted(out))


# --------------------------------------------------------------------------
# families

@dataclass(frozen=True)
class SequenceFamily:
    sources: tuple[SequenceSource, ...]
    version: str = "v1"

    def __iter__(self):
        return iter(self.sources)

    def __len__(self):
        return len(self.sources)

    def by_name(self, name: str) -> SequenceSource:
        for s in self.sources:
            if s.name == name:
                return s
        raise KeyError(name)


def _parse_source_line(line: str, lineno: int) -> SequenceSource:
    parts = line.split(None, 2)
    if len(parts) < 3 or parts[0] != "seq":
        raise FamilyFormatError("expected 'seq <kind> <name> ...'", lineno)
    kind = parts[1]
    if kind not in KINDS:
        raise FamilyFormatError(f"unknown kind {kind!r}", lineno)
    rest = parts[2].split(None, 1)
    name = rest[0]
    argtext = rest[1] if len(rest) > 1 else ""

    kv: dict[str, str] = {}
    while argtext:
        argtext = argtext.lstrip()
        if not argtext:
            break
        if argtext.startswith("expr="):
            kv["expr"] = argtext[len("expr="):].strip()
            argtext = ""
            break
        tok, _, argtext = argtext.partition(" ")
        if "=" not in tok:
            raise FamilyFormatError(f"expected key=value, got {tok!r}", lineno)
        key, _, value = tok.partition("=")
        kv[key] = value

    try:
        if kind == "periodic":
            allowed = {"prefix", "period"}
            if set(kv) - allowed:
                raise FamilyFormatError(f"unknown keys {sorted(set(kv) - allowed)}", lineno)
            prefix = _check_bits(kv.get("prefix", ""), "prefix", allow_empty=True)
            period = _check_bits(kv.get("period", ""), "period")
            return SequenceSource(name=name, kind=kind, prefix=prefix, period=period)
        if kind == "literal-prefix":
            bits = _check_bits(kv.get("bits", ""), "bits")
            tail = kv.get("tail", "0")
            if tail not in ("0", "1"):
                raise FamilyFormatError("tail must be 0 or 1", lineno)
            return SequenceSource(name=name, kind=kind, bits=bits, tail=int(tail))
        if kind == "doubling-block":
            start = kv.get("start", "0")
            if start not in ("0", "1"):
                raise FamilyFormatError("start must be 0 or 1", lineno)
            return SequenceSource(name=name, kind=kind, start=int(start))
        if kind == "thue-morse":
            if kv:
                raise FamilyFormatError("thue-morse takes no parameters", lineno)
            return SequenceSource(name=name, kind=kind)
        # random-name
        if "expr" not in kv:
            raise FamilyFormatError("random-name needs expr=<adapter>", lineno)
        adapter = parse_adapter(kv["expr"])
        return SequenceSource(name=name, kind=kind, adapter=adapter)
    except AdapterError as exc:
        raise FamilyFormatError(f"malformed adapter expression: {exc}", lineno) from exc
    except FamilyFormatError as exc:
        if exc.line is None:
            raise FamilyFormatError(str(exc), lineno) from exc
        raise


def parse_family(text: str) -> SequenceFamily:
    """Parse a family file; the serializer round-trips its output exactly."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != FAMILY_HEADER:
        raise FamilyFormatError(f"first line must be {FAMILY_HEADER!r}", 1)
    sources: list[SequenceSource] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        src = _parse_source_line(line, lineno)
        if src.name in seen:
            raise FamilyFormatError(f"duplicate name {src.name!r}", lineno)
        seen.add(src.name)
        sources.append(src)
    if not sources:
        raise FamilyFormatError("family has no sources")
    return SequenceFamily(sources=tuple(sources))


def serialize_family(family: SequenceFamily) -> str:
    out = [FAMILY_HEADER]
    for s in family.sources:
        if s.kind == "periodic":
            out.append(f"seq periodic {s.name} prefix={s.prefix} period={s.period}")
        elif s.kind == "literal-prefix":
            out.append(f"seq literal-prefix {s.name} bits={s.bits} tail={s.tail}")
        elif s.kind == "doubling-block":
            out.append(f"seq doubling-block {s.name} start={s.start}")
        elif s.kind == "thue-morse":
            out.append(f"seq thue-morse {s.name}")
        else:
            out.append(f"seq random-name {s.name} expr={s.adapter.to_text()}")
    return "\n".join(out) + "\n"


def member_sample_seeds(seed: int, count: int) -> np.ndarray:
    """Fresh per-sample stream seeds for verification runs."""
    return sample_seeds(seed, count)


def derive_seed(seed: int, *tags: int) -> int:
    return derive(seed, *tags)
