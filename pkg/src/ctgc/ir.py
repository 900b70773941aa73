"""Core IR for the normalized logic language.

A module declares algebraic data types and procedures, where a procedure
is one predicate paired with one mode.  Clause bodies are in normal form:
every atom's arguments are distinct variables and every unification is
explicit as a test (``==``), assignment (``:=``), construction (``<=``)
or deconstruction (``=>``).  Goals are ordered so that the body is well
moded under a single left-to-right execution order, and every goal
carries a program point assigned by a pre-order traversal of the body.

Heap model conventions: a functor with arguments occupies arity-many
words (the functor tag lives in the tagged reference, not the cell);
zero-arity alternatives and primitive values occupy no heap cell at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, TYPE_CHECKING

if TYPE_CHECKING:
    from .aliases import AliasSet

PRIMITIVE_TYPES = ("int", "char", "string")


class CompileError(Exception):
    """User-facing front-end error, optionally carrying a source location."""

    def __init__(self, msg: str, line: int | None = None, col: int | None = None):
        super().__init__(msg)
        self.line = line
        self.col = col

    def __str__(self) -> str:
        base = super().__str__()
        if self.line is not None:
            return f"{self.line}:{self.col}: {base}"
        return base


class ParseError(CompileError):
    pass


class CheckError(CompileError):
    """Type or mode violation; carries the offending point and variable."""

    def __init__(self, msg: str, point: int | None = None, var: str | None = None):
        super().__init__(msg)
        self.point = point
        self.var = var


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class Type:
    """A type expression, e.g. ``int`` or ``list(list(int))``.

    Inside type definitions the arguments of alternatives may mention the
    definition's parameters; those appear as ``Type(param_name)`` leaves
    and are substituted away when the table resolves a concrete type.
    """

    name: str
    args: tuple["Type", ...] = ()

    def __str__(self) -> str:
        if not self.args:
            return self.name
        return f"{self.name}({','.join(str(a) for a in self.args)})"


INT = Type("int")


@dataclass(frozen=True)
class TypeDef:
    name: str
    params: tuple[str, ...]
    alternatives: tuple[tuple[str, tuple[Type, ...]], ...]

    @property
    def enum_like(self) -> bool:
        return all(len(args) == 0 for _f, args in self.alternatives)


class TypeTable:
    """All type definitions visible to a compilation, by constructor name."""

    def __init__(self) -> None:
        self.defs: dict[str, TypeDef] = {}

    def add(self, td: TypeDef) -> None:
        seen: set[str] = set()
        for f, _args in td.alternatives:
            if f in seen:
                raise CheckError(f"type {td.name}: duplicate functor {f}")
            seen.add(f)
        for _f, args in td.alternatives:
            for a in args:
                self._validate_ref(a, td)
        old = self.defs.get(td.name)
        if old is not None:
            if old != td:
                raise CheckError(f"conflicting definitions of type {td.name}")
            return
        self.defs[td.name] = td

    def _validate_ref(self, ty: Type, owner: TypeDef) -> None:
        if ty.name in owner.params and not ty.args:
            return
        if ty.name in PRIMITIVE_TYPES and not ty.args:
            return
        td = self.defs.get(ty.name) or (owner if ty.name == owner.name else None)
        if td is None:
            raise CheckError(f"type {owner.name}: unknown type {ty}")
        if len(ty.args) != len(td.params):
            raise CheckError(f"type {owner.name}: bad arity for {ty}")
        for a in ty.args:
            self._validate_ref(a, owner)

    def check_ground(self, ty: Type) -> None:
        """Reject type expressions that are not fully-applied known types."""
        if ty.name in PRIMITIVE_TYPES and not ty.args:
            return
        td = self.defs.get(ty.name)
        if td is None:
            raise CheckError(f"unknown type {ty}")
        if len(ty.args) != len(td.params):
            raise CheckError(f"bad arity for type {ty}")
        for a in ty.args:
            self.check_ground(a)

    def is_primitive(self, ty: Type) -> bool:
        return ty.name in PRIMITIVE_TYPES

    def is_enum_like(self, ty: Type) -> bool:
        td = self.defs.get(ty.name)
        return td is not None and td.enum_like

    def is_atomic(self, ty: Type) -> bool:
        """True for values stored in a single word with no heap cell:
        primitives and members of enum-like types.  Such positions can
        never share heap memory."""
        return self.is_primitive(ty) or self.is_enum_like(ty)

    def alternatives(self, ty: Type) -> list[tuple[str, tuple[Type, ...]]]:
        if self.is_primitive(ty):
            return []
        td = self.defs.get(ty.name)
        if td is None:
            raise CheckError(f"unknown type {ty}")
        sub = dict(zip(td.params, ty.args))
        out = []
        for f, args in td.alternatives:
            out.append((f, tuple(self._subst(a, sub) for a in args)))
        return out

    def _subst(self, ty: Type, sub: dict[str, Type]) -> Type:
        if ty.name in sub and not ty.args:
            return sub[ty.name]
        if not ty.args:
            return ty
        return Type(ty.name, tuple(self._subst(a, sub) for a in ty.args))

    def functor_args(self, ty: Type, functor: str) -> tuple[Type, ...]:
        for f, args in self.alternatives(ty):
            if f == functor:
                return args
        raise CheckError(f"type {ty} has no functor {functor}")

    def has_functor(self, ty: Type, functor: str, arity: int) -> bool:
        return any(f == functor and len(args) == arity
                   for f, args in self.alternatives(ty))

    def field_type(self, ty: Type, functor: str, index: int) -> Type:
        """Type of argument `index` (1-based) of `functor` within `ty`."""
        args = self.functor_args(ty, functor)
        if not 1 <= index <= len(args):
            raise CheckError(f"{functor} of {ty}: no argument {index}")
        return args[index - 1]

    def ordinal(self, ty: Type, functor: str) -> int:
        """Position of a zero-arity alternative; constants are represented
        as consecutive integers starting from zero."""
        for i, (f, _args) in enumerate(self.alternatives(ty)):
            if f == functor:
                return i
        raise CheckError(f"type {ty} has no functor {functor}")

    def owners(self, functor: str, arity: int) -> list[str]:
        """Names of type definitions declaring functor/arity."""
        out = []
        for name, td in self.defs.items():
            if any(f == functor and len(args) == arity
                   for f, args in td.alternatives):
                out.append(name)
        return sorted(out)

    def cell_size(self, functor: str | int, ty: Type) -> int | None:
        """Heap words occupied by a term built with `functor` at type `ty`;
        None when the value needs no cell (constants and primitives)."""
        if isinstance(functor, int):
            return None
        if self.is_primitive(ty):
            return None
        args = self.functor_args(ty, functor)
        if not args:
            return None
        return len(args)


def cell_size(functor: str | int, ty: Type, table: TypeTable) -> int | None:
    return table.cell_size(functor, ty)


# ---------------------------------------------------------------------------
# Goals

Functor = str | int  # int means an integer literal construction


@dataclass(frozen=True)
class ConstArg:
    """A constant in an argument position of a (de)construction: an
    integer literal or a zero-arity functor.  Constants occupy a single
    word, so they never participate in aliasing."""

    functor: str | int

    def __str__(self) -> str:
        return "[]" if self.functor == "[]" else str(self.functor)


Arg = str | ConstArg


@dataclass(frozen=True)
class Goal:
    point: int = field(default=0, kw_only=True)


@dataclass(frozen=True)
class Test(Goal):
    x: str
    y: str


@dataclass(frozen=True)
class Assign(Goal):
    x: str
    y: str


@dataclass(frozen=True)
class Construct(Goal):
    x: str
    functor: Functor
    args: tuple[Arg, ...]
    # Filled by the reuse pass: program point of the deconstruct whose
    # dead cell this construction overwrites.
    reuse_of: int | None = None


@dataclass(frozen=True)
class Deconstruct(Goal):
    x: str
    functor: Functor
    args: tuple[Arg, ...]
    # Filled by the reuse pass: cell may be pushed to the run-time cache.
    cacheable: bool = False


@dataclass(frozen=True)
class Call(Goal):
    name: str
    args: tuple[str, ...]
    module: str | None = None      # resolved by the front end
    version: str = "plain"         # "reuse" after call substitution


@dataclass(frozen=True)
class Conj(Goal):
    goals: tuple[Goal, ...]


@dataclass(frozen=True)
class Disj(Goal):
    branches: tuple[Goal, ...]


def assign_points(goal: Goal, start: int = 1) -> tuple[Goal, int]:
    """Rebuild `goal` with unique pre-order program points from `start`."""
    n = start

    def walk(g: Goal) -> Goal:
        nonlocal n
        p = n
        n += 1
        if isinstance(g, Conj):
            return Conj(tuple(walk(c) for c in g.goals), point=p)
        if isinstance(g, Disj):
            return Disj(tuple(walk(b) for b in g.branches), point=p)
        return replace(g, point=p)

    return walk(goal), n


def goal_nodes(goal: Goal) -> Iterator[Goal]:
    """All goal nodes in pre-order (program-point order)."""
    yield goal
    if isinstance(goal, Conj):
        for g in goal.goals:
            yield from goal_nodes(g)
    elif isinstance(goal, Disj):
        for b in goal.branches:
            yield from goal_nodes(b)


def atoms(goal: Goal) -> Iterator[Goal]:
    for g in goal_nodes(goal):
        if not isinstance(g, (Conj, Disj)):
            yield g


def var_args(args: tuple[Arg, ...]) -> tuple[str, ...]:
    return tuple(a for a in args if isinstance(a, str))


def goal_vars(goal: Goal) -> set[str]:
    out: set[str] = set()
    for g in atoms(goal):
        if isinstance(g, (Test, Assign)):
            out.add(g.x)
            out.add(g.y)
        elif isinstance(g, (Construct, Deconstruct)):
            out.add(g.x)
            out.update(var_args(g.args))
        elif isinstance(g, Call):
            out.update(g.args)
    return out


# ---------------------------------------------------------------------------
# Procedures and modules


@dataclass(frozen=True)
class ProcDecl:
    name: str
    arity: int
    arg_types: tuple[Type, ...]
    arg_modes: tuple[str, ...]          # "in" / "out"
    determinism: str                    # "det" / "semidet"
    foreign: bool = False
    foreign_alias: Optional["AliasSet"] = None

    def __post_init__(self) -> None:
        if len(self.arg_types) != self.arity or len(self.arg_modes) != self.arity:
            raise CheckError(f"{self.name}/{self.arity}: declaration arity mismatch")
        if self.foreign_alias is not None and not self.foreign:
            raise CheckError(f"{self.name}/{self.arity}: alias annotation on "
                             "a non-foreign procedure")

    @property
    def id(self) -> str:
        return f"{self.name}/{self.arity}"


@dataclass
class Procedure:
    decl: ProcDecl
    head_vars: tuple[str, ...]
    body: Goal
    var_types: dict[str, Type] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.decl.name

    @property
    def arity(self) -> int:
        return self.decl.arity

    def outputs(self) -> tuple[str, ...]:
        return tuple(v for v, m in zip(self.head_vars, self.decl.arg_modes)
                     if m == "out")

    def inputs(self) -> tuple[str, ...]:
        return tuple(v for v, m in zip(self.head_vars, self.decl.arg_modes)
                     if m == "in")


@dataclass
class Module:
    name: str
    types: TypeTable
    procs: dict[tuple[str, int], Procedure]
    foreign: dict[tuple[str, int], ProcDecl]
    imports: tuple[str, ...]
    # Names of the types declared by this module itself, in source order
    # (the table may also hold definitions merged in from imports).
    local_types: tuple[str, ...] = ()
    # Declarations of imported procedures, filled in by the driver once
    # the imported sources have been located.
    imported_decls: dict[tuple[str, int], tuple[str, ProcDecl]] = field(
        default_factory=dict)


# Native predicates available to every module.  They have no bodies; the
# interpreter implements them directly and the analysis knows they create
# no aliasing (their outputs, if any, are primitive).
_B = Type("int")
BUILTIN_DECLS: dict[tuple[str, int], ProcDecl] = {
    ("lt", 2): ProcDecl("lt", 2, (_B, _B), ("in", "in"), "semidet"),
    ("le", 2): ProcDecl("le", 2, (_B, _B), ("in", "in"), "semidet"),
    ("gt", 2): ProcDecl("gt", 2, (_B, _B), ("in", "in"), "semidet"),
    ("ge", 2): ProcDecl("ge", 2, (_B, _B), ("in", "in"), "semidet"),
    ("ne", 2): ProcDecl("ne", 2, (_B, _B), ("in", "in"), "semidet"),
    ("add", 3): ProcDecl("add", 3, (_B, _B, _B), ("in", "in", "out"), "det"),
    ("sub", 3): ProcDecl("sub", 3, (_B, _B, _B), ("in", "in", "out"), "det"),
    ("mul", 3): ProcDecl("mul", 3, (_B, _B, _B), ("in", "in", "out"), "det"),
}

BUILTIN_MODULE = "builtin"


def resolve_callee(module: Module, name: str, arity: int) -> tuple[str, ProcDecl]:
    """Find the declaration of a called procedure: local, foreign,
    imported, or builtin.  Raises CheckError when unknown."""
    key = (name, arity)
    if key in module.procs:
        return module.name, module.procs[key].decl
    if key in module.foreign:
        return module.name, module.foreign[key]
    if key in module.imported_decls:
        return module.imported_decls[key]
    if key in BUILTIN_DECLS:
        return BUILTIN_MODULE, BUILTIN_DECLS[key]
    raise CheckError(f"unknown predicate {name}/{arity}")


# ---------------------------------------------------------------------------
# Pretty printing (surface syntax; parse(module_to_text(m)) == m)


def _functor_text(functor: Functor, args: tuple[Arg, ...]) -> str:
    texts = [str(a) for a in args]
    if isinstance(functor, int):
        return str(functor)
    if functor == "[]":
        return "[]"
    if functor == "[|]":
        return f"[{texts[0]} | {texts[1]}]"
    if args:
        return f"{functor}({', '.join(texts)})"
    return functor


def _alt_text(functor: str, args: tuple[Type, ...]) -> str:
    if functor == "[]":
        return "[]"
    if functor == "[|]":
        return f"[{args[0]} | {args[1]}]"
    if args:
        return f"{functor}({', '.join(str(a) for a in args)})"
    return functor


def goal_to_text(goal: Goal, indent: int = 1) -> str:
    pad = "    " * indent
    if isinstance(goal, Conj):
        return (",\n").join(goal_to_text(g, indent) for g in goal.goals)
    if isinstance(goal, Disj):
        sep = f"\n{pad};\n"
        inner = sep.join(goal_to_text(b, indent + 1) for b in goal.branches)
        return f"{pad}(\n{inner}\n{pad})"
    if isinstance(goal, Test):
        return f"{pad}{goal.x} == {goal.y}"
    if isinstance(goal, Assign):
        return f"{pad}{goal.x} := {goal.y}"
    if isinstance(goal, Construct):
        return f"{pad}{goal.x} <= {_functor_text(goal.functor, goal.args)}"
    if isinstance(goal, Deconstruct):
        return f"{pad}{goal.x} => {_functor_text(goal.functor, goal.args)}"
    if isinstance(goal, Call):
        return f"{pad}{goal.name}({', '.join(goal.args)})"
    raise TypeError(f"unknown goal {goal!r}")


def module_to_text(m: Module) -> str:
    lines = [f":- module {m.name}."]
    for imp in m.imports:
        lines.append(f":- import_module {imp}.")
    for tname in m.local_types:
        td = m.types.defs[tname]
        params = f"({', '.join(td.params)})" if td.params else ""
        alts = " ; ".join(_alt_text(f, args) for f, args in td.alternatives)
        lines.append(f":- type {td.name}{params} ---> {alts}.")
    for (_name, _arity), decl in m.foreign.items():
        types = ", ".join(str(t) for t in decl.arg_types)
        lines.append(f":- foreign_pred {decl.name}({types}).")
        modes = ", ".join(decl.arg_modes)
        lines.append(f":- mode {decl.name}({modes}) is {decl.determinism}.")
        if decl.foreign_alias is not None:
            from .aliases import alias_set_to_text
            vs = ", ".join(f"A{i + 1}" for i in range(decl.arity))
            lines.append(f":- foreign_alias {decl.name}({vs}) "
                         f"[{alias_set_to_text(decl.foreign_alias)}].")
    for proc in m.procs.values():
        decl = proc.decl
        types = ", ".join(str(t) for t in decl.arg_types)
        lines.append(f":- pred {decl.name}({types}).")
        modes = ", ".join(decl.arg_modes)
        lines.append(f":- mode {decl.name}({modes}) is {decl.determinism}.")
        head = f"{decl.name}({', '.join(proc.head_vars)})"
        body = proc.body
        if isinstance(body, Conj) and not body.goals:
            lines.append(f"{head}.")
        else:
            lines.append(f"{head} :-\n{goal_to_text(body)}.")
    return "\n".join(lines) + "\n"
