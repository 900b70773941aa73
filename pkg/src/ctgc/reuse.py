"""Reuse decisions: matching dead cells to constructions, substituting
calls by reuse versions, and splitting procedures into versions.

Direct reuse is local and *simple*: a dead cell serves at most one new
cell, chosen while traversing the body in program-point order under a
configurable admissibility constraint (matching arities, almost-matching
within k words, or label-preserving) and selection strategy (lifo or
seeded random).  Indirect reuse replaces a call by the callee's reuse
version whenever every one of the callee's reuse conditions, renamed to
the actual arguments, holds at the call site; the conditions that now
fall on the caller's own head variables are accrued into its condition
set.  At most two versions are emitted per procedure: a plain one with
only the unconditional reuses, and a full one carrying all of them.

No reuse is committed while the procedure can still fail: a construct
(or substituted call) followed by a possibly-failing goal is left
alone, so a failing procedure has clobbered nothing and its caller's
fallback code still sees intact data.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from .aliases import Datastructure, ds_to_text
from .dataflow import (
    DeadCellInfo, ModuleAnalysis, ProcAnalysis, ProcId, _local_sccs,
    datastructure_deadness, positional_vars,
)
from .ir import (
    Call, CheckError, Conj, Construct, Deconstruct, Disj, Goal, Module,
    Procedure, goal_nodes, resolve_callee,
)


# ---------------------------------------------------------------------------
# Constraints and strategies


@dataclass(frozen=True)
class MatchingArities:
    def __str__(self) -> str:
        return "match"


@dataclass(frozen=True)
class WithinK:
    k: int

    def __post_init__(self) -> None:
        if not 1 <= self.k <= 8:
            raise CheckError(f"within:{self.k}: k must be between 1 and 8")

    def __str__(self) -> str:
        return f"within:{self.k}"


@dataclass(frozen=True)
class LabelPreserving:
    def __str__(self) -> str:
        return "same-cons"


ReuseConstraint = MatchingArities | WithinK | LabelPreserving


def parse_constraint(text: str) -> ReuseConstraint:
    if text == "match":
        return MatchingArities()
    if text == "same-cons":
        return LabelPreserving()
    if text.startswith("within:"):
        return WithinK(int(text.split(":", 1)[1]))
    raise CheckError(f"unknown reuse constraint {text!r}")


@dataclass(frozen=True)
class Lifo:
    def __str__(self) -> str:
        return "lifo"


@dataclass(frozen=True)
class RandomChoice:
    seed: int

    def __str__(self) -> str:
        return "random"


SelectionStrategy = Lifo | RandomChoice


def parse_strategy(text: str, seed: int = 0) -> SelectionStrategy:
    if text == "lifo":
        return Lifo()
    if text == "random":
        return RandomChoice(seed)
    raise CheckError(f"unknown selection strategy {text!r}")


def constraint_admits(dead: DeadCellInfo, functor: str, arity: int,
                      size: int, constraint: ReuseConstraint) -> bool:
    """May the dead cell be overwritten by a construction of
    functor/arity needing `size` words?  A dead cell is never allowed to
    be smaller than the new cell."""
    if isinstance(constraint, MatchingArities):
        return dead.size == size
    if isinstance(constraint, WithinK):
        return 0 <= dead.size - size <= constraint.k
    if isinstance(constraint, LabelPreserving):
        return dead.functor == functor and dead.size == size
    raise TypeError(f"unknown constraint {constraint!r}")


# ---------------------------------------------------------------------------
# Decisions


@dataclass
class ReuseAssignment:
    """Direct-reuse matching for one procedure."""

    pairs: list[tuple[int, DeadCellInfo]] = field(default_factory=list)
    conditions: set[Datastructure] = field(default_factory=set)
    residual: list[DeadCellInfo] = field(default_factory=list)


@dataclass
class ProcVersion:
    kind: str                                # "plain" or "reuse"
    conditions: frozenset[Datastructure]     # empty for plain
    body: Goal                               # annotated copy


@dataclass
class ProcReuse:
    proc: Procedure
    assignment: ReuseAssignment
    substitutions: dict[int, frozenset[Datastructure]]  # call point -> accrued
    conditions: frozenset[Datastructure]
    versions: list[ProcVersion] = field(default_factory=list)

    @property
    def has_distinct_reuse_version(self) -> bool:
        return len(self.versions) == 2


@dataclass
class CalleeVersions:
    """What a caller needs to know about a callee: whether a separate
    reuse version exists and under which (positional) conditions."""

    two_versions: bool
    conditions: frozenset[Datastructure]


def decide_direct(proc: Procedure, dead: list[DeadCellInfo],
                  constraint: ReuseConstraint, strategy: SelectionStrategy,
                  analysis: ProcAnalysis, module: Module) -> ReuseAssignment:
    """Traverse the body in program-point order and match each heap
    construction with an admissible dead cell that has already deceased
    on the same execution path."""
    info = analysis.info
    rng = None
    if isinstance(strategy, RandomChoice):
        rng = random.Random(f"{strategy.seed}:{module.name}:{proc.decl.id}")
    by_point = {d.decon_point: d for d in dead}
    assigned: set[int] = set()
    out = ReuseAssignment()

    for point in sorted(info.atom):
        g = info.atom[point]
        if not isinstance(g, Construct) or isinstance(g.functor, int):
            continue
        size = module.types.cell_size(g.functor, proc.var_types[g.x])
        if size is None:
            continue
        if info.after_may_fail[point]:
            continue  # committing here could precede a failure exit
        here = info.branch_path[point]
        candidates = []
        for d in dead:
            if d.decon_point in assigned or d.decon_point >= point:
                continue
            dpath = info.branch_path[d.decon_point]
            if here[:len(dpath)] != dpath:
                continue  # the deconstruct does not dominate this construct
            if constraint_admits(d, g.functor, len(g.args), size, constraint):
                candidates.append(d)
        if not candidates:
            continue
        candidates.sort(key=lambda d: d.decon_point)
        chosen = candidates[-1] if rng is None else rng.choice(candidates)
        assigned.add(chosen.decon_point)
        out.pairs.append((point, chosen))
        out.conditions.update(chosen.condition)
    out.residual = [d for d in dead if d.decon_point not in assigned]
    return out


def _callee_reuse_conditions(g: Call, module: Module,
                             scc_conds: dict[tuple[str, int], frozenset],
                             decided: dict[tuple[str, int], "ProcReuse"],
                             imported: dict[ProcId, CalleeVersions]
                             ) -> frozenset[Datastructure] | None:
    """Conditions of the callee's separate reuse version, renamed to the
    call's actual arguments; None when no such version exists (a callee
    whose only version already contains its reuses needs no
    substitution)."""
    mod_name, decl = resolve_callee(module, g.name, len(g.args))
    key = (g.name, decl.arity)
    if mod_name == module.name:
        if key in scc_conds:
            conds, formals = scc_conds[key], module.procs[key].head_vars
        elif key in decided and decided[key].has_distinct_reuse_version:
            conds = decided[key].conditions
            formals = module.procs[key].head_vars
        else:
            return None
    else:
        info = imported.get((mod_name, g.name, decl.arity))
        if info is None or not info.two_versions:
            return None
        conds, formals = info.conditions, positional_vars(decl.arity)
    mapping = dict(zip(formals, g.args))
    return frozenset(Datastructure(mapping[d.var], d.path) for d in conds)


def decide_indirect_scc(scc: list[tuple[str, int]], module: Module,
                        analysis: ModuleAnalysis,
                        direct: dict[tuple[str, int], ReuseAssignment],
                        imported: dict[ProcId, CalleeVersions],
                        decided: dict[tuple[str, int], "ProcReuse"],
                        max_rounds: int = 20) -> dict[tuple[str, int], ProcReuse]:
    """Joint substitution fixpoint for one call-graph component.

    Substituting a (possibly mutually) recursive call feeds the accrued
    conditions back into the very condition set being checked, so the
    decision is iterated until the substitution and condition sets stop
    changing.  Should they oscillate, recursive substitution is dropped
    (sound: fewer reuses)."""
    conds: dict[tuple[str, int], frozenset[Datastructure]] = {
        key: frozenset(direct[key].conditions) for key in scc}
    subs: dict[tuple[str, int], dict[int, frozenset[Datastructure]]] = {
        key: {} for key in scc}
    allow_scc_calls = True

    for round_no in range(max_rounds + 1):
        if round_no == max_rounds:
            allow_scc_calls = False  # give up on the feedback loop
        # Only procedures that will actually get a reuse version can be
        # substitution targets.
        live = {k: conds[k] for k in scc if direct[k].pairs or subs[k]}
        if not allow_scc_calls:
            live = {}
        new_conds: dict[tuple[str, int], frozenset[Datastructure]] = {}
        new_subs: dict[tuple[str, int], dict[int, frozenset[Datastructure]]] = {}
        for key in scc:
            proc = module.procs[key]
            pa = analysis.procs[key]
            acc: set[Datastructure] = set(direct[key].conditions)
            here: dict[int, frozenset[Datastructure]] = {}
            for point in sorted(pa.info.atom):
                g = pa.info.atom[point]
                if not isinstance(g, Call):
                    continue
                if pa.info.after_may_fail[point]:
                    continue  # no reuse before a possible failure exit
                callee_conds = _callee_reuse_conditions(g, module, live,
                                                        decided, imported)
                if callee_conds is None:
                    continue
                accrued: set[Datastructure] = set()
                ok = True
                args_read = frozenset(g.args)
                for ds in callee_conds:
                    r = datastructure_deadness(ds, point, proc, pa.states,
                                               pa.info, pa.ctx, args_read)
                    if r is None:
                        ok = False
                        break
                    accrued.update(r)
                if ok:
                    here[point] = frozenset(accrued)
                    acc.update(accrued)
            new_subs[key] = here
            new_conds[key] = frozenset(acc)
        if new_conds == conds and new_subs == subs:
            break
        conds, subs = new_conds, new_subs
    return {key: ProcReuse(module.procs[key], direct[key], subs[key],
                           conds[key])
            for key in scc}


# ---------------------------------------------------------------------------
# Version splitting and annotation


def split_versions(pr: ProcReuse) -> list[ProcVersion]:
    """The reuse version carries every decided reuse; the plain version
    keeps only the unconditional subset.  When they coincide a single
    version is emitted (and keeps the base name)."""
    plain_pairs = [(c, d) for c, d in pr.assignment.pairs if d.unconditional]
    plain_subs = {t: cs for t, cs in pr.substitutions.items() if not cs}
    full_pairs = pr.assignment.pairs
    coincide = (len(plain_pairs) == len(full_pairs)
                and len(plain_subs) == len(pr.substitutions))
    plain_body = annotate(pr, plain_pairs, plain_subs)
    if coincide:
        return [ProcVersion("plain", frozenset(), plain_body)]
    full_body = annotate(pr, full_pairs, pr.substitutions)
    return [ProcVersion("plain", frozenset(), plain_body),
            ProcVersion("reuse", pr.conditions, full_body)]


def annotate(pr: ProcReuse, pairs: list[tuple[int, DeadCellInfo]],
             subs: dict[int, frozenset[Datastructure]]) -> Goal:
    """Rebuild the body with reuse and cacheable annotations for one
    version.  A deconstruct is cacheable when its cell dies
    unconditionally and is not reused by this version."""
    reuse_at = {c: d.decon_point for c, d in pairs}
    used = {d.decon_point for _c, d in pairs}
    cacheable = {d.decon_point for d in
                 (list(pr.assignment.residual)
                  + [d for _c, d in pr.assignment.pairs])
                 if d.unconditional and d.decon_point not in used}

    def walk(g: Goal) -> Goal:
        if isinstance(g, Conj):
            return replace(g, goals=tuple(walk(c) for c in g.goals))
        if isinstance(g, Disj):
            return replace(g, branches=tuple(walk(b) for b in g.branches))
        if isinstance(g, Construct) and g.point in reuse_at:
            return replace(g, reuse_of=reuse_at[g.point])
        if isinstance(g, Deconstruct) and g.point in cacheable:
            return replace(g, cacheable=True)
        if isinstance(g, Call) and g.point in subs:
            return replace(g, version="reuse")
        return g

    return walk(pr.proc.body)


# ---------------------------------------------------------------------------
# Module driver and decision dump


@dataclass
class ModuleReuse:
    module: Module
    procs: dict[tuple[str, int], ProcReuse]


def reuse_module(module: Module, analysis: ModuleAnalysis,
                 imported: dict[ProcId, CalleeVersions],
                 constraint: ReuseConstraint,
                 strategy: SelectionStrategy) -> ModuleReuse:
    """Direct then indirect reuse decisions (callees first), version
    splitting, and annotation for every procedure of a module."""
    decided: dict[tuple[str, int], ProcReuse] = {}
    for scc in _local_sccs(module):
        direct = {}
        for key in scc:
            proc = module.procs[key]
            pa = analysis.procs[key]
            direct[key] = decide_direct(proc, pa.dead_cells, constraint,
                                        strategy, pa, module)
        for key, pr in decide_indirect_scc(scc, module, analysis, direct,
                                           imported, decided).items():
            pr.versions = split_versions(pr)
            decided[key] = pr
    return ModuleReuse(module, decided)


def _cond_text(conds) -> str:
    return "{%s}" % " ".join(sorted(ds_to_text(c) for c in conds))


def decision_dump(mr: ModuleReuse) -> str:
    """Golden-testable summary of the reuse decisions of a module."""
    lines: list[str] = []
    for key in sorted(mr.procs):
        pr = mr.procs[key]
        decl = pr.proc.decl
        lines.append(f"== reuse {decl.id}")
        for cpoint, d in sorted(pr.assignment.pairs):
            lines.append(f"reuse c@p{cpoint} <- d@p{d.decon_point} "
                         f"({d.functor}/{d.size}, cond={_cond_text(d.condition)})")
        for point in sorted(pr.substitutions):
            g = pr.proc.body
            call = next(a for a in goal_nodes(g)
                        if a.point == point)
            lines.append(f"call p{point} -> {call.name}/{len(call.args)} "
                         f"reuse cond={_cond_text(pr.substitutions[point])}")
        for v in pr.versions:
            if v.kind == "plain":
                lines.append(f"version {decl.id}: plain")
            else:
                lines.append(f"version {decl.id}: reuse "
                             f"cond={_cond_text(v.conditions)}")
    return "\n".join(lines) + "\n"
