"""Interface files: per-module analysis results on disk (``.ctgc``).

A module's interface carries, per procedure, its exit-sharing summary
and its exported versions with reuse conditions, both expressed over the
positional head variables A1..An so any caller can instantiate them.
Serialization is canonical (sorted, line oriented) and ends in a content
hash, so a driver can iterate mutually dependent modules and detect the
fixpoint as hash stability across one full round.

Files are written atomically (temp file, then rename).
"""

from __future__ import annotations

import hashlib
import os
import warnings
from dataclasses import dataclass, field

from .aliases import (
    AliasSet, Datastructure, alias_set_from_text, alias_set_to_text,
    ds_from_text, ds_to_text,
)
from .ir import CheckError

FORMAT_LINE = "ctgc-interface v1"


@dataclass
class InterfaceFile:
    module: str
    # name/arity -> positional exit-alias summary
    summaries: dict[tuple[str, int], AliasSet] = field(default_factory=dict)
    # name/arity -> (has separate reuse version, positional conditions)
    versions: dict[tuple[str, int], tuple[bool, frozenset[Datastructure]]] = \
        field(default_factory=dict)
    # foreign procedures with their manual annotations, echoed verbatim
    foreign: dict[tuple[str, int], AliasSet] = field(default_factory=dict)

    def body_text(self) -> str:
        lines = [f"module {self.module}"]
        for name, arity in sorted(self.summaries):
            lines.append(f"proc {name}/{arity}")
            lines.append(f"summary {alias_set_to_text(self.summaries[(name, arity)])}")
            two, conds = self.versions.get((name, arity), (False, frozenset()))
            lines.append(f"versions {2 if two else 1}")
            if two:
                cond = " ".join(sorted(ds_to_text(c) for c in conds))
                lines.append(f"cond {{{cond}}}")
        for name, arity in sorted(self.foreign):
            lines.append(f"foreign {name}/{arity}")
            lines.append(
                f"annotation {alias_set_to_text(self.foreign[(name, arity)])}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.body_text().encode()).hexdigest()

    def to_text(self) -> str:
        return (f"{FORMAT_LINE}\nhash {self.content_hash()}\n"
                + self.body_text())


def write_interface(iface: InterfaceFile, path: str) -> str:
    """Serialize canonically; unchanged results produce byte-identical
    files."""
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(iface.to_text())
        os.replace(tmp, path)
    except OSError as e:
        raise CheckError(f"cannot write interface {path}: {e}")
    return path


def read_interface(path: str) -> InterfaceFile:
    """Parse an interface file.  A content-hash mismatch only warns; the
    information is used anyway (it is sound, merely possibly stale)."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise CheckError(f"cannot read interface {path}: {e}")
    if not lines or lines[0] != FORMAT_LINE:
        raise CheckError(f"{path}:1: not a ctgc interface file")
    if not lines[1].startswith("hash "):
        raise CheckError(f"{path}:2: missing hash line")
    stored_hash = lines[1][5:]

    iface = InterfaceFile(module="")
    current: tuple[str, int] | None = None
    for no, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        word, _, rest = line.partition(" ")
        try:
            if word == "module":
                iface.module = rest.strip()
            elif word == "proc":
                name, _, ar = rest.partition("/")
                current = (name, int(ar))
                iface.summaries[current] = AliasSet.from_pairs([])
            elif word == "summary":
                iface.summaries[current] = alias_set_from_text(rest)
            elif word == "versions":
                two = rest.strip() == "2"
                old = iface.versions.get(current, (False, frozenset()))
                iface.versions[current] = (two, old[1])
            elif word == "cond":
                body = rest.strip()
                if not (body.startswith("{") and body.endswith("}")):
                    raise CheckError("malformed cond")
                ds = frozenset(ds_from_text(t)
                               for t in body[1:-1].split() if t)
                two, _ = iface.versions.get(current, (True, frozenset()))
                iface.versions[current] = (two, ds)
            elif word == "foreign":
                name, _, ar = rest.partition("/")
                current = (name, int(ar))
            elif word == "annotation":
                iface.foreign[current] = alias_set_from_text(rest)
            else:
                raise CheckError(f"unknown entry {word!r}")
        except (CheckError, ValueError, TypeError) as e:
            raise CheckError(f"{path}:{no}: {e}")
    if not iface.module:
        raise CheckError(f"{path}: missing module line")
    if iface.content_hash() != stored_hash:
        warnings.warn(f"{path}: content hash mismatch (stale or edited "
                      "interface); using it anyway", stacklevel=2)
    return iface


@dataclass
class IterationReport:
    rounds: int
    converged: bool
    hashes: list[dict[str, str]] = field(default_factory=list)


def iterate_modules(names: list[str], compile_one, max_rounds: int,
                    imports: dict[str, list[str]] | None = None
                    ) -> IterationReport:
    """Repeatedly compile `names` (in the given order) until every
    module's interface hash is unchanged across a full round.

    `compile_one(name)` must recompile the module against the current
    interface files and return the new InterfaceFile.  When the import
    graph (`imports`, restricted to the compiled set) is supplied, a
    module is only recompiled while the interfaces it reads have changed
    since it was last compiled, and convergence is declared as soon as
    nothing needs recompiling.  Summaries only ever refine top entries,
    so hash stability means the inter-module analysis reached its
    fixpoint.  Non-convergence within `max_rounds` is reported with a
    warning; the last results are kept (they are sound, just weaker)."""
    if max_rounds < 1:
        raise CheckError("max_rounds must be at least 1")
    imports = imports or {}
    report = IterationReport(rounds=0, converged=False)
    current: dict[str, str | None] = {n: None for n in names}
    # What each module saw of its imports when it was last compiled.
    seen: dict[str, dict[str, str | None]] = {}

    def stale(name: str) -> bool:
        if name not in seen:
            return True
        deps = [d for d in imports.get(name, []) if d in current]
        return any(seen[name].get(d) != current[d] for d in deps)

    for _round in range(max_rounds):
        compiled_any = False
        for name in names:
            if not stale(name):
                continue
            seen[name] = {d: current[d]
                          for d in imports.get(name, []) if d in current}
            iface = compile_one(name)
            current[name] = iface.content_hash()
            compiled_any = True
        if not compiled_any:
            report.converged = True
            break
        report.rounds += 1
        report.hashes.append({n: h for n, h in current.items()
                              if h is not None})
    else:
        # Ran out of rounds while still working; the fixpoint may
        # nevertheless have been reached by the final round.
        report.converged = not any(stale(n) for n in names)
    if not report.converged:
        warnings.warn(f"module iteration did not converge within "
                      f"{max_rounds} rounds; keeping the last results",
                      stacklevel=2)
    return report
