"""Structure-sharing analysis over procedure bodies.

Each procedure is analysed under the *default call pattern*: its inputs
share nothing on entry and only its outputs are referenced after it
returns.  Abstract execution propagates possible-sharing pairs through
the body, summaries of callees are instantiated at call sites, and
mutually recursive procedures are iterated to a fixpoint (widening
bounds the pair sets, so termination is guaranteed).

On top of the sharing information the pass decides which deconstructed
heap cells *die*: a cell is available for reuse when, after the
deconstruction, it can only still be referenced through head variables.
The head-variable datastructures that may alias the cell become its
reuse condition; an empty condition means the death is unconditional.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .aliases import (
    EMPTY, TOP, AliasContext, AliasSet, Datastructure, PairStore,
    alias_join, alias_leq, maybe_widen, project, rename, widen_alias,
)
from .ir import (
    Assign, Call, CheckError, Conj, Construct, Deconstruct, Disj, Goal,
    Module, ProcDecl, Procedure, Test, Type, goal_nodes, goal_vars,
    resolve_callee, var_args,
)

ProcId = tuple[str, str, int]  # module, name, arity

EXIT_POINT = -1  # pseudo program point holding a procedure's exit state


def positional_vars(arity: int) -> tuple[str, ...]:
    return tuple(f"A{i + 1}" for i in range(arity))


@dataclass(frozen=True)
class CallPattern:
    """Assumptions a caller grants a procedure.  The default pattern has
    unaliased inputs and keeps only the outputs live after the call."""

    proc: ProcId
    in_aliases: AliasSet
    live_after: frozenset[Datastructure]

    @classmethod
    def default(cls, proc_id: ProcId, decl: ProcDecl,
                head_vars: tuple[str, ...]) -> "CallPattern":
        outs = frozenset(Datastructure(v)
                         for v, m in zip(head_vars, decl.arg_modes)
                         if m == "out")
        return cls(proc_id, EMPTY, outs)


@dataclass(frozen=True)
class ProcSummary:
    """Exit sharing of a procedure, expressed over the positional head
    variables A1..An so callers can instantiate it by renaming."""

    proc: ProcId
    exit_aliases: AliasSet
    no_alias_by_heuristic: bool = False


@dataclass(frozen=True)
class DeadCellInfo:
    decon_point: int
    var: str
    functor: str
    size: int
    condition: frozenset[Datastructure]

    @property
    def unconditional(self) -> bool:
        return not self.condition


def heuristic_no_alias(decl: ProcDecl, table) -> bool:
    """A call cannot create new aliasing when every output is of a type
    that cannot share (primitives and enum-like types); inputs are ground
    at the call, so no aliasing between them can be created either."""
    return all(table.is_atomic(t)
               for t, m in zip(decl.arg_types, decl.arg_modes) if m == "out")


# ---------------------------------------------------------------------------
# Syntactic body information: forward use, failure continuations, branches


@dataclass
class BodyInfo:
    after_vars: dict[int, frozenset[str]]
    after_may_fail: dict[int, bool]
    branch_path: dict[int, tuple[tuple[int, int], ...]]
    atom: dict[int, Goal]
    outputs: frozenset[str]


def _goal_may_fail(g: Goal, module: Module, proc: Procedure) -> bool:
    if isinstance(g, Test):
        return True
    if isinstance(g, Deconstruct):
        alts = module.types.alternatives(proc.var_types[g.x])
        return len(alts) > 1 or any(not isinstance(a, str) for a in g.args)
    if isinstance(g, Call):
        _m, decl = resolve_callee(module, g.name, len(g.args))
        return decl.determinism == "semidet"
    if isinstance(g, Conj):
        return any(_goal_may_fail(c, module, proc) for c in g.goals)
    if isinstance(g, Disj):
        return all(_goal_may_fail(b, module, proc) for b in g.branches)
    return False


def build_body_info(proc: Procedure, module: Module) -> BodyInfo:
    info = BodyInfo({}, {}, {}, {}, frozenset(proc.outputs()))

    def walk(g: Goal, cont_vars: frozenset[str], cont_fail: bool,
             branches: tuple[tuple[int, int], ...]) -> None:
        if isinstance(g, Conj):
            rest_vars: list[frozenset[str]] = [frozenset()]
            rest_fail: list[bool] = [False]
            for sub in reversed(g.goals):
                rest_vars.append(rest_vars[-1] | frozenset(goal_vars(sub)))
                rest_fail.append(rest_fail[-1]
                                 or _goal_may_fail(sub, module, proc))
            rest_vars.reverse()
            rest_fail.reverse()
            for i, sub in enumerate(g.goals):
                walk(sub, rest_vars[i + 1] | cont_vars,
                     rest_fail[i + 1] or cont_fail, branches)
        elif isinstance(g, Disj):
            for i, b in enumerate(g.branches):
                walk(b, cont_vars, cont_fail, branches + ((g.point, i),))
        else:
            info.after_vars[g.point] = cont_vars
            info.after_may_fail[g.point] = cont_fail
            info.branch_path[g.point] = branches
            info.atom[g.point] = g

    walk(proc.body, frozenset(), False, ())
    return info


def forward_use(proc: Procedure, point: int, module: Module
                ) -> frozenset[Datastructure]:
    """Datastructures referenced strictly after `point` on execution
    paths through it, plus the default pattern's live outputs."""
    info = build_body_info(proc, module)
    vars = info.after_vars[point] | info.outputs
    return frozenset(Datastructure(v) for v in vars)


# ---------------------------------------------------------------------------
# Abstract execution


class AnalysisEnv:
    """Everything abstract execution needs besides the goal itself."""

    def __init__(self, module: Module, proc: Procedure,
                 summaries: dict[ProcId, ProcSummary],
                 widening_threshold: int | None = 200,
                 states: dict[int, AliasSet] | None = None,
                 record_points: frozenset[int] | None = None):
        self.module = module
        self.proc = proc
        self.summaries = summaries
        self.threshold = widening_threshold
        self.ctx = AliasContext(module.types, proc.var_types)
        self.states = states
        self.record_points = record_points
        self._gid = 0

    def next_group(self) -> frozenset[int]:
        """Unique provenance tag for one summary instantiation; unique
        across disjunction branches of the same walk."""
        self._gid += 1
        return frozenset((self._gid,))

    def record(self, point: int, st: PairStore | None) -> None:
        if self.states is None:
            return
        if self.record_points is None or point in self.record_points:
            self.states[point] = TOP if st is None else st.freeze()

    def widen_store(self, st: PairStore) -> PairStore:
        """Type widening once the pair count exceeds the threshold; the
        widened set keeps no provenance (sound: it only allows more
        combinations)."""
        if self.threshold is None or len(st.pairs) <= self.threshold:
            return st
        widened = widen_alias(st.freeze(), self.ctx)
        return PairStore.of_closed(widened, self.ctx)

    def callee_summary(self, call: Call) -> AliasSet:
        """Callee exit aliases instantiated over the call's actuals.
        Order of fallbacks: a manual annotation on foreign code, a known
        summary, the no-alias heuristic, and finally top."""
        mod_name, decl = resolve_callee(self.module, call.name, len(call.args))
        positional = positional_vars(decl.arity)
        if decl.foreign and decl.foreign_alias is not None:
            summary = decl.foreign_alias
        else:
            known = self.summaries.get((mod_name, call.name, decl.arity))
            if known is not None:
                summary = known.exit_aliases
            elif heuristic_no_alias(decl, self.module.types):
                summary = EMPTY
            else:
                summary = TOP
        if summary.top:
            return TOP
        return rename(summary, dict(zip(positional, call.args)))


def _exec_store(goal: Goal, st: PairStore | None,
                env: AnalysisEnv) -> PairStore | None:
    """Walk one goal over a mutable pair store (None stands for top).
    The store persists across the whole body so that provenance tags
    from summary instantiations keep blocking spurious recombination."""
    if isinstance(goal, Conj):
        for g in goal.goals:
            st = _exec_store(g, st, env)
        return st
    if isinstance(goal, Disj):
        outs = []
        for b in goal.branches:
            outs.append(_exec_store(b, None if st is None else st.copy(),
                                    env))
        if any(o is None for o in outs):
            return None
        return env.widen_store(PairStore.union(outs, env.ctx))

    env.record(goal.point, st)
    if st is None:
        return None
    types = env.module.types

    if isinstance(goal, Test):
        return st
    if isinstance(goal, Assign):
        if types.is_atomic(env.proc.var_types[goal.x]):
            return st
        st.add(Datastructure(goal.x), Datastructure(goal.y))
        st.close()
        return env.widen_store(st)
    if isinstance(goal, (Construct, Deconstruct)):
        if isinstance(goal.functor, int):
            return st
        ty = env.proc.var_types[goal.x]
        if types.is_atomic(ty):
            return st
        changed = False
        for i, a in enumerate(goal.args, start=1):
            if not isinstance(a, str):
                continue
            if types.is_atomic(types.field_type(ty, goal.functor, i)):
                continue
            st.add(Datastructure(goal.x, (("f", goal.functor, i),)),
                   Datastructure(a))
            changed = True
        if changed:
            st.close()
            return env.widen_store(st)
        return st
    if isinstance(goal, Call):
        inst = env.callee_summary(goal)
        if inst.top:
            return None
        if not inst.pairs:
            return st
        # A summary is a join over the callee's executions: its pairs
        # are closed among themselves and are only combined against the
        # caller's existing pairs (one shared provenance tag).
        gid = env.next_group()
        for d1, d2 in inst.pairs:
            st.add(d1, d2, groups=gid)
        st.close()
        return env.widen_store(st)
    raise TypeError(f"unknown goal {goal!r}")


def abstract_exec(goal: Goal, inset: AliasSet, env: AnalysisEnv) -> AliasSet:
    """Propagate possible sharing through one goal."""
    if inset.top:
        st: PairStore | None = None
    else:
        st = PairStore.of_closed(inset, env.ctx)
    out = _exec_store(goal, st, env)
    return TOP if out is None else out.freeze()


# ---------------------------------------------------------------------------
# Deadness


def datastructure_deadness(ds: Datastructure, point: int, proc: Procedure,
                           states: dict[int, AliasSet], info: BodyInfo,
                           ctx: AliasContext,
                           live_now: frozenset[str] = frozenset()
                           ) -> frozenset[Datastructure] | None:
    """Decide whether the cell named by `ds` may still be referenced
    after `point` other than through head variables.

    Returns None when the cell must be treated as live (reachable from a
    variable in forward use, from a variable read at the point itself,
    or under top aliasing).  Otherwise returns the set of head-variable
    datastructures that may alias the cell: its reuse condition.
    """
    state = states.get(point)
    if state is None or state.top:
        return None
    in_use = info.after_vars[point] | info.outputs
    head = set(proc.head_vars)
    if ds.var in in_use:
        return None
    ds = ctx.normalize(ds)
    conditions: set[Datastructure] = set()
    if ds.var in head:
        conditions.add(ds)

    for pair in state.pairs:
        for e1, e2 in (pair, (pair[1], pair[0])):
            if e1.var != ds.var:
                continue
            partner = _aliased_partner(e1, e2, ds, ctx)
            if partner is None or partner == ds:
                continue
            if partner.var in in_use or partner.var in live_now:
                return None
            if partner.var in head:
                conditions.add(partner)
            # A dead local alias can never be dereferenced again.
    return frozenset(conditions)


def _aliased_partner(e1: Datastructure, e2: Datastructure, ds: Datastructure,
                     ctx: AliasContext) -> Datastructure | None:
    """If e1 may name a position of `ds` (or one above it), return the
    matching extension of e2: a datastructure that may be the same cell
    as `ds`.  When either side involves a type selector the extension is
    over-approximated by a type selector for ds's selected type."""
    p, q = e1.path, ds.path
    p_ts = p[-1] if p and p[-1][0] == "t" else None
    q_ts = q[-1] if q and q[-1][0] == "t" else None
    if q_ts is None:
        if p_ts is None:
            if q[:len(p)] != p:
                return None
            return ctx.extend(e2, q[len(p):])
        fp = p[:-1]
        if q[:len(fp)] != fp:
            return None
    else:
        q_fp = q[:-1]
        p_fp = p[:-1] if p_ts is not None else p
        if p_fp[:len(q_fp)] != q_fp and q_fp[:len(p_fp)] != p_fp:
            return None
    return ctx.extend(e2, (("t", ctx.selected_type(ds)),))


def detect_dead_cells(proc: Procedure, module: Module,
                      states: dict[int, AliasSet], info: BodyInfo,
                      ctx: AliasContext) -> list[DeadCellInfo]:
    """Deconstructions whose cell is available for reuse, with their
    reuse conditions.  Top sharing anywhere in the procedure disables
    every reuse (anything might be aliased downstream of it)."""
    if any(s.top for s in states.values()):
        return []
    out: list[DeadCellInfo] = []
    for point in sorted(info.atom):
        g = info.atom[point]
        if not isinstance(g, Deconstruct) or isinstance(g.functor, int):
            continue
        size = module.types.cell_size(g.functor, proc.var_types[g.x])
        if size is None:
            continue
        cond = datastructure_deadness(Datastructure(g.x), point, proc,
                                      states, info, ctx)
        if cond is None:
            continue
        out.append(DeadCellInfo(point, g.x, g.functor, size, cond))
    return out


# ---------------------------------------------------------------------------
# Module analysis (SCC fixpoint)


@dataclass
class ProcAnalysis:
    proc: Procedure
    states: dict[int, AliasSet]
    info: BodyInfo
    ctx: AliasContext
    exit_summary: ProcSummary
    dead_cells: list[DeadCellInfo] = field(default_factory=list)


@dataclass
class ModuleAnalysis:
    module: Module
    summaries: dict[ProcId, ProcSummary]
    procs: dict[tuple[str, int], ProcAnalysis]


def _local_sccs(module: Module) -> list[list[tuple[str, int]]]:
    """Strongly connected components of the local call graph, callees
    first (Tarjan)."""
    keys = list(module.procs)
    edges: dict[tuple[str, int], list[tuple[str, int]]] = {}
    for key, proc in module.procs.items():
        outs = []
        for g in goal_nodes(proc.body):
            if isinstance(g, Call) and (g.name, len(g.args)) in module.procs:
                outs.append((g.name, len(g.args)))
        edges[key] = outs

    index: dict[tuple[str, int], int] = {}
    low: dict[tuple[str, int], int] = {}
    on_stack: set[tuple[str, int]] = set()
    stack: list[tuple[str, int]] = []
    sccs: list[list[tuple[str, int]]] = []
    counter = [0]

    def strongconnect(v, path):
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        for w in edges[v]:
            if w not in index:
                strongconnect(w, path)
                low[v] = min(low[v], low[w])
            elif w in on_stack:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                comp.append(w)
                if w == v:
                    break
            sccs.append(sorted(comp))

    for key in keys:
        if key not in index:
            strongconnect(key, [])
    return sccs


def _exit_summary(proc: Procedure, exits: AliasSet) -> AliasSet:
    """Project onto the head variables and store positionally."""
    projected = project(exits, proc.head_vars)
    if projected.top:
        return TOP
    mapping = dict(zip(proc.head_vars, positional_vars(proc.arity)))
    return rename(projected, mapping)


def analyse_scc(procs: list[Procedure], module: Module,
                summaries: dict[ProcId, ProcSummary],
                widening_threshold: int | None) -> int:
    """Kleene iteration from empty summaries until the exit aliases of
    every procedure in the component stabilize.  Returns the number of
    iterations taken (including the final, confirming one)."""
    for p in procs:
        pid = (module.name, p.name, p.arity)
        summaries.setdefault(pid, ProcSummary(pid, EMPTY))
    for round_no in range(1, 1001):
        changed = False
        for p in procs:
            pid = (module.name, p.name, p.arity)
            env = AnalysisEnv(module, p, summaries, widening_threshold)
            out = abstract_exec(p.body, EMPTY, env)
            new = _exit_summary(p, out)
            pos_ctx = AliasContext(
                module.types,
                dict(zip(positional_vars(p.arity), p.decl.arg_types)))
            new = maybe_widen(new, widening_threshold, pos_ctx)
            old = summaries[pid].exit_aliases
            if not alias_leq(new, old, pos_ctx):
                summaries[pid] = ProcSummary(pid, alias_join(old, new))
                changed = True
        if not changed:
            return round_no
    raise CheckError(f"alias analysis did not converge in module "
                     f"{module.name}")


def analyse_module(module: Module,
                   imported_summaries: dict[ProcId, ProcSummary]
                   | None = None,
                   widening_threshold: int | None = 200,
                   record_all_states: bool = False) -> ModuleAnalysis:
    """Run the sharing analysis for every procedure of a module and
    derive its dead cells.  `imported_summaries` carries interface
    information for other modules; procedures without any summary are
    covered by the no-alias heuristic or top."""
    summaries: dict[ProcId, ProcSummary] = dict(imported_summaries or {})
    for scc in _local_sccs(module):
        analyse_scc([module.procs[k] for k in scc], module, summaries,
                    widening_threshold)

    result = ModuleAnalysis(module, summaries, {})
    for key, proc in module.procs.items():
        info = build_body_info(proc, module)
        if record_all_states:
            points = None
        else:
            points = frozenset(pt for pt, g in info.atom.items()
                               if isinstance(g, (Deconstruct, Call)))
        states: dict[int, AliasSet] = {}
        env = AnalysisEnv(module, proc, summaries, widening_threshold,
                          states=states, record_points=points)
        exits = abstract_exec(proc.body, EMPTY, env)
        states[EXIT_POINT] = exits
        pid = (module.name, proc.name, proc.arity)
        pa = ProcAnalysis(proc, states, info, env.ctx, summaries[pid])
        pa.dead_cells = detect_dead_cells(proc, module, states, info, env.ctx)
        result.procs[key] = pa
    return result
