"""Possible-structure-sharing domain.

A *datastructure* is a program variable plus a selector path naming a
subterm position; an alias set is either ``top`` (everything may share)
or a set of unordered datastructure pairs that may denote the same heap
cell.  Paths are kept finite by truncating at the first revisited type:
the truncated suffix is replaced by a *type selector* ``T(t)`` denoting
every position of type ``t`` at or below the remaining prefix.  Type
widening replaces whole paths by single type selectors, trading
precision for much smaller sets.

A pair covers all simultaneous extensions of both sides, so sharing of
subterms below an aliased position needs no extra pairs.  Pairs whose
either side selects a primitive or enum-like position are never created
by the analysis (such values occupy no heap cell), but the operations
here do not silently drop them: filtering is the caller's business.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .ir import CheckError, Type, TypeTable

# A selector is ("f", functor, index) or ("t", Type).
Selector = tuple
SelectorPath = tuple


@dataclass(frozen=True)
class Datastructure:
    var: str
    path: SelectorPath = ()

    def __str__(self) -> str:
        return ds_to_text(self)


Pair = tuple[Datastructure, Datastructure]


def _ds_key(d: Datastructure) -> tuple:
    return (d.var, tuple(selector_text(s) for s in d.path))


def _fp(path: SelectorPath) -> SelectorPath:
    """Field-selector prefix (everything before the first type selector)."""
    for i, s in enumerate(path):
        if s[0] == "t":
            return path[:i]
    return path


def _ts(path: SelectorPath):
    """Trailing type selector, or None for a pure field path."""
    return path[-1] if path and path[-1][0] == "t" else None


def make_pair(d1: Datastructure, d2: Datastructure) -> Pair | None:
    """Canonical unordered pair; None for trivial self-pairs.

    A pair of identical datastructures is only meaningful when the path
    contains a type selector (two possibly-distinct positions of that
    type); a pure field path names a single position and sharing with
    itself is implicit.
    """
    if d1 == d2 and _ts(d1.path) is None:
        return None
    return (d1, d2) if _ds_key(d1) <= _ds_key(d2) else (d2, d1)


@dataclass(frozen=True)
class AliasSet:
    """Either top or a set of canonical datastructure pairs."""

    top: bool
    pairs: frozenset[Pair]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Datastructure, Datastructure]]
                   ) -> "AliasSet":
        out = set()
        for d1, d2 in pairs:
            p = make_pair(d1, d2)
            if p is not None:
                out.add(p)
        return cls(False, frozenset(out))

    def __len__(self) -> int:
        return len(self.pairs)

    def __str__(self) -> str:
        return alias_set_to_text(self)


TOP = AliasSet(True, frozenset())
EMPTY = AliasSet(False, frozenset())


class AliasContext:
    """Typing context for selector paths: a type table plus the root
    types of the variables in scope."""

    def __init__(self, table: TypeTable, var_types: Mapping[str, Type]):
        self.table = table
        self.var_types = var_types

    def root(self, var: str) -> Type:
        try:
            return self.var_types[var]
        except KeyError:
            raise CheckError(f"no type for variable {var}")

    def step(self, ty: Type, sel: Selector) -> Type:
        if sel[0] == "f":
            return self.table.field_type(ty, sel[1], sel[2])
        return sel[1]

    def selected_type(self, d: Datastructure) -> Type:
        ty = self.root(d.var)
        for sel in d.path:
            ty = self.step(ty, sel)
        return ty

    def atomic(self, d: Datastructure) -> bool:
        """True when the selected position holds a one-word value with no
        heap cell (primitive or enum-like); such positions never share."""
        return self.table.is_atomic(self.selected_type(d))

    def normalize(self, d: Datastructure) -> Datastructure:
        return Datastructure(d.var, self.normalize_path_of(d.var, d.path))

    def normalize_path_of(self, var: str, path: SelectorPath) -> SelectorPath:
        ty = self.root(var)
        visited: list[Type] = []
        out: list[Selector] = []
        for sel in path:
            ty = self.step(ty, sel)
            if ty in visited:
                # Recursive type: collapse the suffix from the first
                # revisit onward into one type selector.
                out.append(("t", ty))
                return self._flatten(out, ty)
            visited.append(ty)
            out.append(sel)
        return self._flatten(out, ty)

    @staticmethod
    def _flatten(sels: list[Selector], final: Type) -> SelectorPath:
        # Enforce the normal form "no field selector after a type
        # selector": anything following the first type selector is
        # over-approximated by one selector for the final type.
        for i, s in enumerate(sels):
            if s[0] == "t":
                if i == len(sels) - 1:
                    return tuple(sels)
                return tuple(sels[:i]) + (("t", final),)
        return tuple(sels)

    def extend(self, d: Datastructure, suffix: SelectorPath) -> Datastructure:
        return self.normalize(Datastructure(d.var, d.path + tuple(suffix)))


def normalize_path(d: Datastructure, ctx: AliasContext) -> Datastructure:
    """Normal form of a datastructure's path (see AliasContext.normalize)."""
    return ctx.normalize(d)


# ---------------------------------------------------------------------------
# Lattice operations


def widen_alias(a: AliasSet, ctx: AliasContext) -> AliasSet:
    """Replace every non-empty path by a single type selector for its
    selected type.  The result concretizes to a superset and never has
    more pairs than the input."""
    if a.top:
        raise ValueError("widen_alias is undefined on top")
    out = set()
    for d1, d2 in a.pairs:
        p = make_pair(_widen_ds(d1, ctx), _widen_ds(d2, ctx))
        if p is not None:
            out.add(p)
    return AliasSet(False, frozenset(out))


def _widen_ds(d: Datastructure, ctx: AliasContext) -> Datastructure:
    if not d.path:
        return d
    return Datastructure(d.var, (("t", ctx.selected_type(d)),))


def maybe_widen(a: AliasSet, threshold: int | None,
                ctx: AliasContext) -> AliasSet:
    """Widen only when the pair count exceeds `threshold`; None disables
    widening entirely."""
    if threshold is None or a.top or len(a.pairs) <= threshold:
        return a
    return widen_alias(a, ctx)


def path_covers(outer: SelectorPath, inner: SelectorPath, var: str,
                ctx: AliasContext) -> bool:
    """True when every position named by (var, inner) is named by
    (var, outer) as well."""
    if outer == inner:
        return True
    ts = _ts(outer)
    if ts is None:
        return False
    fp = _fp(outer)
    if inner[:len(fp)] != fp:
        return False
    return ctx.selected_type(Datastructure(var, inner)) == ts[1]


def _pair_covers(big: Pair, small: Pair, ctx: AliasContext) -> bool:
    (b1, b2), (s1, s2) = big, small

    def c(b: Datastructure, s: Datastructure) -> bool:
        return b.var == s.var and path_covers(b.path, s.path, s.var, ctx)

    return (c(b1, s1) and c(b2, s2)) or (c(b1, s2) and c(b2, s1))


def alias_leq(a: AliasSet, b: AliasSet, ctx: AliasContext) -> bool:
    """Concretization-order comparison: top is greatest; a field path is
    below a type-selector path covering the same position."""
    if b.top:
        return True
    if a.top:
        return False
    for p in a.pairs:
        if p in b.pairs:
            continue
        if not any(_pair_covers(q, p, ctx) for q in b.pairs):
            return False
    return True


def alias_join(a: AliasSet, b: AliasSet) -> AliasSet:
    if a.top or b.top:
        return TOP
    return AliasSet(False, a.pairs | b.pairs)


def project(a: AliasSet, vars: Iterable[str]) -> AliasSet:
    if a.top:
        return a
    keep = set(vars)
    return AliasSet(False, frozenset(
        p for p in a.pairs if p[0].var in keep and p[1].var in keep))


def rename(a: AliasSet, mapping: Mapping[str, str]) -> AliasSet:
    """Variable-wise substitution; paths are unchanged.  Raises on a
    variable missing from the mapping."""
    if a.top:
        return a
    out = set()
    for d1, d2 in a.pairs:
        for d in (d1, d2):
            if d.var not in mapping:
                raise CheckError(f"rename: unmapped variable {d.var}")
        p = make_pair(Datastructure(mapping[d1.var], d1.path),
                      Datastructure(mapping[d2.var], d2.path))
        if p is not None:
            out.add(p)
    return AliasSet(False, frozenset(out))


# ---------------------------------------------------------------------------
# Transitive combination (closure under common variables)


class PairStore:
    """Mutable alias-pair store with var-indexed buckets and semi-naive
    closure.  The data-flow analysis keeps one of these per procedure
    walk and freezes snapshots at the points it needs to remember."""

    def __init__(self, ctx: AliasContext):
        self.ctx = ctx
        self.pairs: set[Pair] = set()
        self.by_var: dict[str, list[Pair]] = {}
        self._frontier: list[Pair] = []
        # Provenance: an instantiated callee summary is a join over the
        # callee's executions, closed among itself before projection.
        # Two pairs descending from the same instantiation never need to
        # be combined with each other (their co-occurring consequences
        # were derived inside the callee), and combining them would
        # manufacture sharing no single run exhibits.  Every pair carries
        # the set of instantiation tags it descends from.
        self._groups: dict[Pair, frozenset[int]] = {}
        self._next_group = 0

    @classmethod
    def of(cls, a: AliasSet, ctx: AliasContext) -> "PairStore":
        st = cls(ctx)
        for p in a.pairs:
            st._insert(p)
        # Treat the seed pairs as underived so the first close() call
        # combines them with each other.
        st._frontier = list(st.pairs)
        return st

    @classmethod
    def of_closed(cls, a: AliasSet, ctx: AliasContext) -> "PairStore":
        """Wrap an already-closed set; nothing scheduled for derivation."""
        st = cls(ctx)
        for p in a.pairs:
            st._insert(p)
        return st

    def copy(self) -> "PairStore":
        st = PairStore(self.ctx)
        st.pairs = set(self.pairs)
        st.by_var = {k: list(v) for k, v in self.by_var.items()}
        st._groups = dict(self._groups)
        return st

    @classmethod
    def union(cls, stores: list["PairStore"], ctx: AliasContext) -> "PairStore":
        """Join of branch results: plain union, no re-closing (each
        branch is closed for its own executions).  A pair present in
        several branches keeps only the provenance common to all of
        them."""
        st = cls(ctx)
        seen_in: dict[Pair, frozenset[int]] = {}
        for other in stores:
            for p in other.pairs:
                g = other._groups.get(p, frozenset())
                if p in st.pairs:
                    seen_in[p] = seen_in[p] & g
                else:
                    st.pairs.add(p)
                    seen_in[p] = g
                    for d in (p[0], p[1]):
                        st.by_var.setdefault(d.var, []).append(p)
        st._groups = {p: g for p, g in seen_in.items() if g}
        return st

    def new_group(self) -> frozenset[int]:
        self._next_group += 1
        return frozenset((self._next_group,))

    def _insert(self, p: Pair, groups: frozenset[int] = frozenset()) -> bool:
        if p in self.pairs:
            # Re-derived through fewer instantiations: weaken the
            # provenance (the pair becomes combinable more widely) and
            # let it recombine.
            old = self._groups.get(p, frozenset())
            if old and not old <= groups:
                merged = old & groups
                if merged:
                    self._groups[p] = merged
                else:
                    self._groups.pop(p, None)
                self._frontier.append(p)
            return False
        self.pairs.add(p)
        if groups:
            self._groups[p] = groups
        for d in (p[0], p[1]):
            self.by_var.setdefault(d.var, []).append(p)
        return True

    def add(self, d1: Datastructure, d2: Datastructure,
            groups: frozenset[int] = frozenset()) -> None:
        p = make_pair(self.ctx.normalize(d1), self.ctx.normalize(d2))
        if p is not None and self._insert(p, groups):
            self._frontier.append(p)

    def close(self) -> None:
        """Close under: if x~y and u~v with u at-or-below x, then the
        matching extension of y aliases v."""
        empty = frozenset()
        while self._frontier:
            p = self._frontier.pop()
            gp = self._groups.get(p, empty)
            for d in {p[0].var, p[1].var}:
                bucket = self.by_var.get(d)
                if not bucket:
                    continue
                # The bucket grows while deriving; iterate a snapshot.
                for q in list(bucket):
                    if q == p:
                        continue
                    gq = self._groups.get(q, empty)
                    if gp & gq:
                        continue  # same instantiation: already combined
                    gd = gp | gq
                    # The new pair may play either role in a derivation,
                    # since old pairs will not re-enter the frontier.
                    for a, b in ((p, q), (q, p)):
                        for x, y in (a, (a[1], a[0])):
                            for u, v in (b, (b[1], b[0])):
                                if u.var != x.var:
                                    continue
                                der = self._derive(x, y, u, v)
                                if der is not None:
                                    np = make_pair(der[0], der[1])
                                    if np is not None and \
                                            self._insert(np, gd):
                                        self._frontier.append(np)

    def _derive(self, x: Datastructure, y: Datastructure,
                u: Datastructure, v: Datastructure):
        """x~y holds and u~v holds with u.var == x.var.  When u may name
        a position at or below x, the corresponding extension of y may
        alias v."""
        ctx = self.ctx
        x_ts, u_ts = _ts(x.path), _ts(u.path)
        if x_ts is None and u_ts is None:
            if u.path[:len(x.path)] != x.path:
                return None
            suffix = u.path[len(x.path):]
            return ctx.extend(y, suffix), v
        x_fp, u_fp = _fp(x.path), _fp(u.path)
        if x_fp[:len(u_fp)] != u_fp and u_fp[:len(x_fp)] != x_fp:
            return None
        if x_ts is None and len(u_fp) >= len(x.path):
            # Exact suffix available: u = x.path + rest (+ its selector).
            suffix = u.path[len(x.path):]
            return ctx.extend(y, suffix), v
        # Positions of u's selected type may occur below x's positions.
        return ctx.extend(y, (("t", ctx.selected_type(u)),)), v

    def freeze(self) -> AliasSet:
        return AliasSet(False, frozenset(self.pairs))


def altclosure(a: AliasSet, ctx: AliasContext) -> AliasSet:
    """Least superset of `a` closed under combining pairs through common
    variables, with all derived paths normalized.  Terminates because
    normalized paths over a finite type graph are finitely many."""
    if a.top:
        raise ValueError("altclosure is undefined on top")
    st = PairStore.of(a, ctx)
    st.close()
    return st.freeze()


def add_and_close(a: AliasSet, new: Iterable[tuple[Datastructure, Datastructure]],
                  ctx: AliasContext, new_preclosed: bool = False) -> AliasSet:
    """`a` (assumed closed) extended with `new` pairs and re-closed.

    With `new_preclosed` the new pairs are taken to be closed among
    themselves already (the case for an instantiated callee summary) and
    are only combined against the existing pairs."""
    if a.top:
        return a
    st = PairStore(ctx)
    for p in a.pairs:
        st._insert(p)
    gid = st.new_group() if new_preclosed else frozenset()
    for d1, d2 in new:
        st.add(d1, d2, groups=gid)
    st.close()
    return st.freeze()


# ---------------------------------------------------------------------------
# Canonical text form


def selector_text(sel: Selector) -> str:
    if sel[0] == "f":
        return f"{sel[1]},{sel[2]}"
    return f"T({sel[1]})"


def ds_to_text(d: Datastructure) -> str:
    if not d.path:
        return d.var
    return f"{d.var}^{'.'.join(selector_text(s) for s in d.path)}"


def pair_to_text(p: Pair) -> str:
    return f"alias( {ds_to_text(p[0])} , {ds_to_text(p[1])} )"


def alias_set_to_text(a: AliasSet) -> str:
    if a.top:
        return "top"
    if not a.pairs:
        return "{}"
    return "; ".join(sorted(pair_to_text(p) for p in a.pairs))


def ds_from_text(text: str) -> Datastructure:
    text = text.strip()
    if "^" not in text:
        return Datastructure(text, ())
    var, _, rest = text.partition("^")
    sels: list[Selector] = []
    i = 0
    while i < len(rest):
        if rest.startswith("T(", i):
            j, depth = i + 2, 1
            while j < len(rest) and depth:
                if rest[j] == "(":
                    depth += 1
                elif rest[j] == ")":
                    depth -= 1
                j += 1
            sels.append(("t", type_from_text(rest[i + 2:j - 1])))
            i = j
        else:
            j = rest.index(",", i)
            functor = rest[i:j]
            k = j + 1
            while k < len(rest) and rest[k].isdigit():
                k += 1
            sels.append(("f", functor, int(rest[j + 1:k])))
            i = k
        if i < len(rest):
            if rest[i] != ".":
                raise CheckError(f"bad selector path {text!r}")
            i += 1
    return Datastructure(var, tuple(sels))


def alias_set_from_text(text: str) -> AliasSet:
    text = text.strip()
    if text == "top":
        return TOP
    if text == "{}":
        return EMPTY
    pairs = []
    for entry in text.split(";"):
        entry = entry.strip()
        if not entry.startswith("alias(") or not entry.endswith(")"):
            raise CheckError(f"bad alias entry {entry!r}")
        body = entry[len("alias("):-1]
        left, sep, right = body.partition(" , ")
        if not sep:
            raise CheckError(f"bad alias entry {entry!r}")
        pairs.append((ds_from_text(left), ds_from_text(right)))
    return AliasSet.from_pairs(pairs)


def type_from_text(text: str) -> Type:
    text = text.strip()
    if "(" not in text:
        return Type(text)
    name, _, rest = text.partition("(")
    if not rest.endswith(")"):
        raise CheckError(f"bad type text {text!r}")
    inner = rest[:-1]
    args, depth, start = [], 0, 0
    for i, c in enumerate(inner):
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
        elif c == "," and depth == 0:
            args.append(type_from_text(inner[start:i]))
            start = i + 1
    args.append(type_from_text(inner[start:]))
    return Type(name, tuple(args))
