"""Static checks run after parsing: local type inference and the
well-modedness discipline.

Local variables carry no declarations; their types are inferred from the
head declaration, functor ownership, and callee declarations by simple
propagation to a fixpoint.  Mode checking then verifies that along the
single left-to-right execution order every variable is ground before it
is used as an input and free before it is bound as an output, and that
the branches of a disjunction bind the same nonlocal variables.
"""

from __future__ import annotations

from .ir import (
    Assign, Call, CheckError, Conj, ConstArg, Construct, Deconstruct, Disj,
    Goal, Module, PRIMITIVE_TYPES, Procedure, Test, Type, goal_nodes,
    goal_vars, resolve_callee, var_args,
)

INT = Type("int")


def _unify(pattern: Type, concrete: Type, params: tuple[str, ...],
           binding: dict[str, Type]) -> bool:
    if pattern.name in params and not pattern.args:
        bound = binding.get(pattern.name)
        if bound is None:
            binding[pattern.name] = concrete
            return True
        return bound == concrete
    if pattern.name != concrete.name or len(pattern.args) != len(concrete.args):
        return False
    return all(_unify(p, c, params, binding)
               for p, c in zip(pattern.args, concrete.args))


def _subst(pattern: Type, binding: dict[str, Type]) -> Type | None:
    if not pattern.args:
        if pattern.name in binding:
            return binding[pattern.name]
        if pattern.name in PRIMITIVE_TYPES:
            return pattern
        return pattern
    args = tuple(_subst(a, binding) for a in pattern.args)
    if any(a is None for a in args):
        return None
    return Type(pattern.name, args)


class _Inference:
    def __init__(self, proc: Procedure, module: Module):
        self.proc = proc
        self.module = module
        self.table = module.types
        self.types: dict[str, Type] = {}
        for v, t in zip(proc.head_vars, proc.decl.arg_types):
            self._set(v, t, proc.body.point)

    def _set(self, var: str, ty: Type, point: int) -> None:
        old = self.types.get(var)
        if old is None:
            self.types[var] = ty
        elif old != ty:
            raise CheckError(
                f"{self.proc.decl.id}: variable {var} used at type {ty} "
                f"but already has type {old}", point=point, var=var)

    def run(self) -> dict[str, Type]:
        atoms = [g for g in goal_nodes(self.proc.body)
                 if not isinstance(g, (Conj, Disj))]
        changed = True
        while changed:
            before = dict(self.types)
            for g in atoms:
                self._visit(g)
            changed = self.types != before
        missing = sorted(goal_vars(self.proc.body) - set(self.types))
        if missing:
            raise CheckError(f"{self.proc.decl.id}: cannot infer type of "
                             f"{', '.join(missing)}", var=missing[0])
        self._validate(atoms)
        return self.types

    def _visit(self, g: Goal) -> None:
        if isinstance(g, (Test, Assign)):
            tx, ty = self.types.get(g.x), self.types.get(g.y)
            if tx is not None and ty is None:
                self._set(g.y, tx, g.point)
            elif ty is not None and tx is None:
                self._set(g.x, ty, g.point)
        elif isinstance(g, (Construct, Deconstruct)):
            self._visit_cons(g)
        elif isinstance(g, Call):
            _mod, decl = resolve_callee(self.module, g.name, len(g.args))
            for a, t in zip(g.args, decl.arg_types):
                self._set(a, t, g.point)

    def _visit_cons(self, g) -> None:
        if isinstance(g.functor, int):
            self._set(g.x, INT, g.point)
            return
        tx = self.types.get(g.x)
        if tx is None:
            tx = self._owner_type(g)
            if tx is None:
                return
            self._set(g.x, tx, g.point)
        args = self.table.functor_args(tx, g.functor)
        if len(args) != len(g.args):
            raise CheckError(
                f"{self.proc.decl.id}: {g.functor}/{len(g.args)} does not "
                f"match type {tx}", point=g.point, var=g.x)
        for a, t in zip(g.args, args):
            if isinstance(a, str):
                self._set(a, t, g.point)

    def _owner_type(self, g) -> Type | None:
        owners = self.table.owners(g.functor, len(g.args))
        if len(owners) != 1:
            if not owners:
                raise CheckError(f"{self.proc.decl.id}: unknown functor "
                                 f"{g.functor}/{len(g.args)}",
                                 point=g.point, var=g.x)
            return None  # ambiguous; wait for other constraints
        td = self.table.defs[owners[0]]
        if not td.params:
            return Type(td.name)
        # Bind the type parameters from already-known argument types.
        pattern_args = dict(td.alternatives)[g.functor]
        binding: dict[str, Type] = {}
        for a, pat in zip(g.args, pattern_args):
            if isinstance(a, str):
                known = self.types.get(a)
                if known is not None and not _unify(pat, known, td.params,
                                                    binding):
                    raise CheckError(
                        f"{self.proc.decl.id}: argument {a} of {g.functor} "
                        f"has type {known}, expected {pat}",
                        point=g.point, var=a)
        if all(p in binding for p in td.params):
            return Type(td.name, tuple(binding[p] for p in td.params))
        return None

    def _validate(self, atoms) -> None:
        for g in atoms:
            if isinstance(g, (Test, Assign)):
                if self.types[g.x] != self.types[g.y]:
                    raise CheckError(
                        f"{self.proc.decl.id}: {g.x} and {g.y} have "
                        "different types", point=g.point, var=g.x)
            elif isinstance(g, (Construct, Deconstruct)):
                if isinstance(g.functor, int):
                    if self.types[g.x] != INT:
                        raise CheckError(
                            f"{self.proc.decl.id}: integer literal bound to "
                            f"non-int {g.x}", point=g.point, var=g.x)
                    continue
                tx = self.types[g.x]
                args = self.table.functor_args(tx, g.functor)
                for a, t in zip(g.args, args):
                    if isinstance(a, ConstArg):
                        self._check_const(a, t, g.point)
                    elif self.types[a] != t:
                        raise CheckError(
                            f"{self.proc.decl.id}: argument {a} of "
                            f"{g.functor} has type {self.types[a]}, "
                            f"expected {t}", point=g.point, var=a)
            elif isinstance(g, Call):
                _mod, decl = resolve_callee(self.module, g.name, len(g.args))
                for a, t in zip(g.args, decl.arg_types):
                    if self.types[a] != t:
                        raise CheckError(
                            f"{self.proc.decl.id}: argument {a} of "
                            f"{g.name} has type {self.types[a]}, expected "
                            f"{t}", point=g.point, var=a)

    def _check_const(self, a: ConstArg, expected: Type, point: int) -> None:
        if isinstance(a.functor, int):
            if expected != INT:
                raise CheckError(f"integer constant where {expected} expected",
                                 point=point)
            return
        if not self.table.has_functor(expected, a.functor, 0):
            raise CheckError(
                f"constant {a.functor} is not a constructor of {expected}",
                point=point)


def infer_types(proc: Procedure, module: Module) -> None:
    """Fill proc.var_types from declarations and functor usage."""
    proc.var_types = _Inference(proc, module).run()


# ---------------------------------------------------------------------------
# Well-modedness


def check_well_modedness(proc: Procedure, module: Module) -> None:
    """Verify groundness along the left-to-right execution order.

    Raises CheckError (carrying the first offending program point and
    variable) when an input is used before it is ground, a bound
    variable is re-bound, or disjunction branches bind different
    nonlocal variables.
    """
    subtree_end: dict[int, int] = {}
    atom_vars: list[tuple[int, frozenset[str]]] = []
    for g in goal_nodes(proc.body):
        ps = [n.point for n in goal_nodes(g)]
        subtree_end[g.point] = max(ps)
        if not isinstance(g, (Conj, Disj)):
            atom_vars.append((g.point, frozenset(goal_vars(g))))
    head = set(proc.head_vars)

    def outside_vars(branch: Goal) -> set[str]:
        lo, hi = branch.point, subtree_end[branch.point]
        out = set(head)
        for p, vs in atom_vars:
            if not lo <= p <= hi:
                out |= vs
        return out

    def need_ground(v: str, ground: set[str], point: int) -> None:
        if v not in ground:
            raise CheckError(f"{proc.decl.id}: {v} is not ground here",
                             point=point, var=v)

    def need_free(v: str, ground: set[str], point: int) -> None:
        if v in ground:
            raise CheckError(f"{proc.decl.id}: {v} is already bound here",
                             point=point, var=v)

    def walk(g: Goal, ground: set[str]) -> set[str]:
        if isinstance(g, Conj):
            for c in g.goals:
                ground = walk(c, ground)
            return ground
        if isinstance(g, Disj):
            results = [walk(b, set(ground)) for b in g.branches]
            bound_sets = []
            for b, res in zip(g.branches, results):
                bound_sets.append((res - ground) & outside_vars(b))
            first = bound_sets[0]
            for b, bs in zip(g.branches[1:], bound_sets[1:]):
                if bs != first:
                    raise CheckError(
                        f"{proc.decl.id}: disjunction branches bind "
                        f"different outputs ({sorted(first ^ bs)})",
                        point=b.point,
                        var=next(iter(first ^ bs), None))
            return ground | first
        if isinstance(g, Test):
            need_ground(g.x, ground, g.point)
            need_ground(g.y, ground, g.point)
            return ground
        if isinstance(g, Assign):
            need_ground(g.y, ground, g.point)
            need_free(g.x, ground, g.point)
            return ground | {g.x}
        if isinstance(g, Construct):
            for a in var_args(g.args):
                need_ground(a, ground, g.point)
            need_free(g.x, ground, g.point)
            return ground | {g.x}
        if isinstance(g, Deconstruct):
            need_ground(g.x, ground, g.point)
            for a in var_args(g.args):
                need_free(a, ground, g.point)
            return ground | set(var_args(g.args))
        if isinstance(g, Call):
            _mod, decl = resolve_callee(module, g.name, len(g.args))
            for a, m in zip(g.args, decl.arg_modes):
                if m == "in":
                    need_ground(a, ground, g.point)
                else:
                    need_free(a, ground, g.point)
            return ground | {a for a, m in zip(g.args, decl.arg_modes)
                             if m == "out"}
        raise TypeError(f"unknown goal {g!r}")

    final = walk(proc.body, set(proc.inputs()))
    for v in proc.outputs():
        if v not in final:
            raise CheckError(f"{proc.decl.id}: output {v} not bound by body",
                             var=v)


def validate_module(module: Module) -> None:
    """Ground-check declarations, infer local types, and mode-check every
    procedure of the module."""
    decls = [p.decl for p in module.procs.values()]
    decls.extend(module.foreign.values())
    for decl in decls:
        for t in decl.arg_types:
            module.types.check_ground(t)
    for proc in module.procs.values():
        infer_types(proc, module)
        check_well_modedness(proc, module)
