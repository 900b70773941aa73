"""Instrumented reference interpreter for annotated programs.

Values are single machine words: Python ints stand for integers and for
the consecutive ordinals of constant constructors; heap terms are tagged
references ``("r", functor, address, generation)``.  A heap cell stores
only its argument words (the functor tag lives in the reference).  The
interpreter executes reuse annotations by overwriting dead cells in
place and cacheable annotations by pushing dead cells onto a
size-bucketed free list that every allocation consults first.

Generations catch unsound reuse: each in-place overwrite or cache push
bumps the cell's generation, so in debug mode any read through a stale
reference aborts with a diagnostic instead of returning garbage.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

from .aliases import Datastructure
from .ir import (
    Assign, Call, CheckError, Conj, ConstArg, Construct, Deconstruct, Disj,
    Goal, ProcDecl, Test, Type, TypeTable,
)

ProcKey = tuple[str, str, int, str]  # module, name, arity, version kind


class RuntimeFault(Exception):
    """Interpreter-level error (type violation, missing entry, stale
    reference in debug mode)."""


class _Fail(Exception):
    """Semidet failure; caught at disjunction guards and call sites."""


@dataclass
class HeapStats:
    words_allocated: int = 0
    cells_reused_inplace: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    within_k_leaked_words: int = 0
    # Word-level detail used by the conservation invariant.
    reused_words: int = 0
    cache_hit_words: int = 0

    def to_text(self) -> str:
        return (f"words_allocated={self.words_allocated} "
                f"reused={self.cells_reused_inplace} "
                f"cache_hits={self.cache_hits} "
                f"cache_misses={self.cache_misses} "
                f"leaked={self.within_k_leaked_words}")


@dataclass
class ExecProc:
    decl: ProcDecl
    head_vars: tuple[str, ...]
    code: tuple  # compiled goal tree
    kind: str


@dataclass
class Program:
    """Linked, executable form of one or more compiled modules."""

    types: TypeTable
    procs: dict[ProcKey, ExecProc]
    # Reuse-version conditions per procedure; used to decide whether the
    # entry point may run its reuse version under the default pattern.
    conditions: dict[tuple[str, str, int], frozenset[Datastructure]]
    ctgc_enabled: bool = True

    def find_entry(self, name: str, n_inputs: int) -> tuple[str, str, int]:
        matches = []
        for (mod, pname, arity, kind) in self.procs:
            if kind != "plain" or pname != name:
                continue
            decl = self.procs[(mod, pname, arity, kind)].decl
            if sum(1 for m in decl.arg_modes if m == "in") == n_inputs:
                matches.append((mod, pname, arity))
        if not matches:
            raise RuntimeFault(f"no procedure {name} taking {n_inputs} "
                               "input arguments")
        if len(set(matches)) > 1:
            raise RuntimeFault(f"ambiguous entry {name}")
        return matches[0]


# ---------------------------------------------------------------------------
# Goal compilation


_CMP = {"lt": int.__lt__, "le": int.__le__, "gt": int.__gt__,
        "ge": int.__ge__, "ne": int.__ne__}
_ARITH = {"add": int.__add__, "sub": int.__sub__, "mul": int.__mul__}


def compile_goal(goal: Goal, var_types: dict[str, Type], types: TypeTable,
                 module_of: dict[tuple[str, int], str],
                 have_reuse: set[tuple[str, str, int]],
                 foreign: set[tuple[str, int]]) -> tuple:
    """Lower one goal tree into tuples the interpreter dispatches on.
    Constant constructor arguments are resolved to ordinals here."""

    def const_word(c: ConstArg, ty: Type):
        if isinstance(c.functor, int):
            return c.functor
        return types.ordinal(ty, c.functor)

    def walk(g: Goal) -> tuple:
        if isinstance(g, Conj):
            return ("conj", tuple(walk(c) for c in g.goals))
        if isinstance(g, Disj):
            return ("disj", tuple(walk(b) for b in g.branches))
        if isinstance(g, Test):
            return ("test", g.x, g.y, var_types[g.x])
        if isinstance(g, Assign):
            return ("assign", g.x, g.y)
        if isinstance(g, Construct):
            if isinstance(g.functor, int):
                return ("mkword", g.x, g.functor)
            ty = var_types[g.x]
            size = types.cell_size(g.functor, ty)
            if size is None:
                return ("mkword", g.x, types.ordinal(ty, g.functor))
            fieldtys = types.functor_args(ty, g.functor)
            argspec = tuple(
                ("v", a) if isinstance(a, str)
                else ("c", const_word(a, t))
                for a, t in zip(g.args, fieldtys))
            return ("construct", g.x, g.functor, argspec, size, g.reuse_of)
        if isinstance(g, Deconstruct):
            ty = var_types[g.x]
            size = types.cell_size(g.functor, ty)
            if size is None:
                return ("testword", g.x, types.ordinal(ty, g.functor))
            fieldtys = types.functor_args(ty, g.functor)
            argspec = tuple(
                ("v", a) if isinstance(a, str)
                else ("c", const_word(a, t))
                for a, t in zip(g.args, fieldtys))
            return ("deconstruct", g.x, g.functor, argspec, size,
                    g.cacheable, g.point)
        if isinstance(g, Call):
            key2 = (g.name, len(g.args))
            if g.name in _CMP and len(g.args) == 2:
                return ("cmp", _CMP[g.name], g.args[0], g.args[1])
            if g.name in _ARITH and len(g.args) == 3:
                return ("arith", _ARITH[g.name], g.args[0], g.args[1],
                        g.args[2])
            if key2 in foreign:
                return ("foreign", g.name)
            mod = g.module or module_of.get(key2)
            if mod is None:
                raise CheckError(f"unresolved call {g.name}/{len(g.args)}")
            kind = g.version
            if kind == "reuse" and (mod, g.name, len(g.args)) not in have_reuse:
                kind = "plain"
            return ("call", (mod, g.name, len(g.args), kind), g.args)
        raise TypeError(f"unknown goal {g!r}")

    return walk(goal)


# ---------------------------------------------------------------------------
# The interpreter


@dataclass
class OracleEvent:
    proc: tuple[str, str, int]
    point: int
    addr: int
    step: int


@dataclass
class OracleReport:
    """Per-deconstruct record of whether the cell was ever read again
    later in the run (the exact-reference oracle for deadness)."""

    events: list[OracleEvent]
    read_after: dict[tuple[tuple[str, str, int], int], bool]

    def ever_read_after(self, proc: tuple[str, str, int], point: int) -> bool:
        return self.read_after.get((proc, point), False)


@dataclass
class RunResult:
    outputs: list | None            # None when the entry failed
    output_types: tuple[Type, ...]
    stats: HeapStats
    oracle: OracleReport | None = None

    @property
    def failed(self) -> bool:
        return self.outputs is None


class Interpreter:
    def __init__(self, program: Program, cache_on: bool = False,
                 debug: bool = False, oracle: bool = False,
                 force_plain: bool = False):
        self.program = program
        # A cache can only ever be fed by cacheable marks, which only a
        # reuse-analysed program carries.
        self.cache_on = cache_on and program.ctgc_enabled
        self.debug = debug
        self.oracle = oracle
        self.force_plain = force_plain
        self.heap: list[list] = []  # cell = [generation, fields]
        self.cache: dict[int, list[int]] = {}
        self.stats = HeapStats()
        self.counting = True
        # Oracle bookkeeping
        self.step = 0
        self.last_read: dict[int, int] = {}
        self.events: list[OracleEvent] = []
        self.current_proc: tuple[str, str, int] | None = None

    # -- heap ---------------------------------------------------------------

    def alloc(self, size: int) -> int:
        """Fresh cell, or an exact-size cache pop when the cache is on."""
        if self.cache_on and self.counting:
            bucket = self.cache.get(size)
            if bucket:
                self.stats.cache_hits += 1
                self.stats.cache_hit_words += size
                return bucket.pop()
            self.stats.cache_misses += 1
        if self.counting:
            self.stats.words_allocated += size
        self.heap.append([0, [None] * size])
        return len(self.heap) - 1

    def _read_cell(self, ref) -> list:
        cell = self.heap[ref[2]]
        if self.debug and ref[3] != cell[0]:
            raise RuntimeFault(
                f"stale reference read: {ref[1]} cell at {ref[2]} was "
                "reused or cached while still referenced")
        if self.oracle:
            self.step += 1
            self.last_read[ref[2]] = self.step
        return cell

    # -- values ---------------------------------------------------------------

    def equal(self, a, b, ty: Type) -> bool:
        if isinstance(a, int) or isinstance(b, int):
            return a == b
        if a[1] != b[1]:
            return False
        ca, cb = self._read_cell(a), self._read_cell(b)
        tys = self.program.types.functor_args(ty, a[1])
        return all(self.equal(fa, fb, t)
                   for fa, fb, t in zip(ca[1], cb[1], tys))

    # -- execution ------------------------------------------------------------

    def run(self, entry: tuple[str, str, int], inputs: list,
            plain: bool = False) -> RunResult:
        mod, name, arity = entry
        kind = self._entry_kind(entry, plain)
        proc = self.program.procs[(mod, name, arity, kind)]
        env: dict[str, object] = {}
        ins = iter(inputs)
        for v, m in zip(proc.head_vars, proc.decl.arg_modes):
            if m == "in":
                env[v] = next(ins)
        old_limit = sys.getrecursionlimit()
        sys.setrecursionlimit(1_000_000)
        try:
            self.current_proc = (mod, name, arity)
            self.exec_goal(proc.code, env, {})
            outs = [env[v] for v, m in zip(proc.head_vars,
                                           proc.decl.arg_modes) if m == "out"]
        except _Fail:
            outs = None
        finally:
            sys.setrecursionlimit(old_limit)
        out_types = tuple(t for t, m in zip(proc.decl.arg_types,
                                            proc.decl.arg_modes) if m == "out")
        report = None
        if self.oracle:
            if outs is not None:
                for v, t in zip(outs, out_types):
                    self._traverse(v, t)
            report = self._oracle_report()
        return RunResult(outs, out_types, self.stats, report)

    def _entry_kind(self, entry: tuple[str, str, int], plain: bool) -> str:
        if plain or self.force_plain:
            return "plain"
        mod, name, arity = entry
        if (mod, name, arity, "reuse") not in self.program.procs:
            return "plain"
        # The default pattern keeps only outputs live, so conditions on
        # input positions are satisfied; any condition touching an
        # output is not.
        decl = self.program.procs[(mod, name, arity, "plain")].decl
        head = self.program.procs[(mod, name, arity, "reuse")].head_vars
        in_vars = {v for v, m in zip(head, decl.arg_modes) if m == "in"}
        conds = self.program.conditions.get((mod, name, arity), frozenset())
        if all(c.var in in_vars for c in conds):
            return "reuse"
        return "plain"

    def exec_goal(self, code: tuple, env: dict, recorded: dict) -> None:
        op = code[0]
        if op == "conj":
            for sub in code[1]:
                self.exec_goal(sub, env, recorded)
        elif op == "deconstruct":
            self._deconstruct(code, env, recorded)
        elif op == "construct":
            self._construct(code, env, recorded)
        elif op == "call":
            self._call(code, env)
        elif op == "disj":
            branches = code[1]
            n = len(branches)
            for i, b in enumerate(branches):
                subs = b[1] if b[0] == "conj" else (b,)
                try:
                    self.exec_goal(subs[0], env, recorded)
                except _Fail:
                    if i + 1 < n:
                        continue
                    raise
                for sub in subs[1:]:
                    self.exec_goal(sub, env, recorded)
                return
            raise _Fail()
        elif op == "test":
            if not self.equal(env[code[1]], env[code[2]], code[3]):
                raise _Fail()
        elif op == "assign":
            env[code[1]] = env[code[2]]
        elif op == "mkword":
            env[code[1]] = code[2]
        elif op == "testword":
            if env[code[1]] != code[2]:
                raise _Fail()
        elif op == "cmp":
            if not code[1](env[code[2]], env[code[3]]):
                raise _Fail()
        elif op == "arith":
            env[code[4]] = code[1](env[code[2]], env[code[3]])
        elif op == "foreign":
            raise RuntimeFault(f"foreign procedure {code[1]} is "
                               "declaration-only and cannot be executed")
        else:
            raise RuntimeFault(f"bad opcode {op}")

    def _deconstruct(self, code, env, recorded) -> None:
        _op, x, functor, argspec, size, cacheable, point = code
        v = env[x]
        if not (type(v) is tuple and v[1] == functor):
            raise _Fail()
        cell = self._read_cell(v)
        fields = cell[1]
        if self.oracle:
            self.events.append(OracleEvent(self.current_proc, point,
                                           v[2], self.step))
        for spec, val in zip(argspec, fields):
            if spec[0] == "v":
                env[spec[1]] = val
            elif val != spec[1]:
                raise _Fail()
        recorded[point] = v[2]
        if cacheable and self.cache_on and not self.oracle:
            cell[0] += 1  # invalidate remaining references
            self.cache.setdefault(len(fields), []).append(v[2])

    def _construct(self, code, env, recorded) -> None:
        _op, x, functor, argspec, size, reuse_of = code
        if reuse_of is not None and not self.oracle:
            try:
                addr = recorded[reuse_of]
            except KeyError:
                raise RuntimeFault(
                    f"reuse annotation at {x} <= {functor} refers to a "
                    "deconstruct that did not execute") from None
            cell = self.heap[addr]
            cell[0] += 1
            fields = cell[1]
            for i, spec in enumerate(argspec):
                fields[i] = env[spec[1]] if spec[0] == "v" else spec[1]
            if self.counting:
                self.stats.cells_reused_inplace += 1
                self.stats.reused_words += size
                self.stats.within_k_leaked_words += len(fields) - size
            env[x] = ("r", functor, addr, cell[0])
            return
        addr = self.alloc(size)
        cell = self.heap[addr]
        fields = cell[1]
        for i, spec in enumerate(argspec):
            fields[i] = env[spec[1]] if spec[0] == "v" else spec[1]
        env[x] = ("r", functor, addr, cell[0])

    def _call(self, code, env) -> None:
        _op, key, args = code
        if self.force_plain and key[3] != "plain":
            key = (key[0], key[1], key[2], "plain")
        proc = self.program.procs[key]
        decl = proc.decl
        callee_env: dict[str, object] = {}
        for formal, actual, m in zip(proc.head_vars, args, decl.arg_modes):
            if m == "in":
                callee_env[formal] = env[actual]
        saved = self.current_proc
        self.current_proc = key[:3]
        try:
            self.exec_goal(proc.code, callee_env, {})
        finally:
            self.current_proc = saved
        for formal, actual, m in zip(proc.head_vars, args, decl.arg_modes):
            if m == "out":
                env[actual] = callee_env[formal]

    # -- oracle ----------------------------------------------------------------

    def _traverse(self, v, ty: Type) -> None:
        """Simulate the caller's use of an output under the default
        pattern: every cell of the result is read."""
        if isinstance(v, int):
            return
        cell = self._read_cell(v)
        for f, t in zip(cell[1], self.program.types.functor_args(ty, v[1])):
            self._traverse(f, t)

    def _oracle_report(self) -> OracleReport:
        flags: dict[tuple[tuple[str, str, int], int], bool] = {}
        for ev in self.events:
            key = (ev.proc, ev.point)
            again = self.last_read.get(ev.addr, 0) > ev.step
            flags[key] = flags.get(key, False) or again
        return OracleReport(self.events, flags)


# ---------------------------------------------------------------------------
# Literal terms


def parse_ground_term(text: str):
    """Ground term literal: integers, constants, f(args), [a, b, c] and
    the convenience range intlist(lo, hi)."""
    text = text.strip()
    pos = [0]

    def error(msg: str):
        raise CheckError(f"bad term {text!r} at offset {pos[0]}: {msg}")

    def skip_ws():
        while pos[0] < len(text) and text[pos[0]] in " \t\n":
            pos[0] += 1

    def term():
        skip_ws()
        if pos[0] >= len(text):
            error("unexpected end")
        c = text[pos[0]]
        if c.isdigit() or c == "-":
            j = pos[0] + 1
            while j < len(text) and text[j].isdigit():
                j += 1
            value = int(text[pos[0]:j])
            pos[0] = j
            return value
        if c == "[":
            pos[0] += 1
            skip_ws()
            items = []
            if text[pos[0]] != "]":
                items.append(term())
                skip_ws()
                while text[pos[0]] == ",":
                    pos[0] += 1
                    items.append(term())
                    skip_ws()
            if text[pos[0]] != "]":
                error("expected ]")
            pos[0] += 1
            return ("list", items)
        if not (c.isalpha() or c == "_"):
            error(f"unexpected {c!r}")
        j = pos[0]
        while j < len(text) and (text[j].isalnum() or text[j] == "_"):
            j += 1
        name = text[pos[0]:j]
        pos[0] = j
        skip_ws()
        if pos[0] < len(text) and text[pos[0]] == "(":
            pos[0] += 1
            args = [term()]
            skip_ws()
            while text[pos[0]] == ",":
                pos[0] += 1
                args.append(term())
                skip_ws()
            if text[pos[0]] != ")":
                error("expected )")
            pos[0] += 1
            return (name, args)
        return (name, [])

    out = term()
    skip_ws()
    if pos[0] != len(text):
        error("trailing input")
    return out


def build_value(interp: Interpreter, term, ty: Type):
    """Build a heap value for a parsed ground term of the given type.
    Construction happens before measurement starts, so it does not
    count toward words_allocated."""
    types = interp.program.types
    if isinstance(term, int):
        if ty != Type("int"):
            raise CheckError(f"integer literal where {ty} expected")
        return term
    name, args = term
    if name == "intlist" and len(args) == 2 and ty.name == "list":
        lo, hi = args
        step = 1 if hi >= lo else -1
        return build_value(interp, ("list", list(range(lo, hi + step, step))),
                           ty)
    if name == "list":
        if ty.name != "list":
            raise CheckError(f"list literal where {ty} expected")
        elem_ty = ty.args[0]
        out = build_value(interp, ("[]", []), ty)
        for item in reversed(args):
            v = build_value(interp, item, elem_ty)
            addr = interp.alloc(2)
            interp.heap[addr][1][0] = v
            interp.heap[addr][1][1] = out
            out = ("r", "[|]", addr, interp.heap[addr][0])
        return out
    argtys = types.functor_args(ty, name)
    if len(argtys) != len(args):
        raise CheckError(f"{name}/{len(args)} does not match type {ty}")
    if not args:
        return types.ordinal(ty, name)
    addr = interp.alloc(len(args))
    cell = interp.heap[addr]
    for i, (a, t) in enumerate(zip(args, argtys)):
        cell[1][i] = build_value(interp, a, t)
    return ("r", name, addr, cell[0])


def value_to_text(interp: Interpreter, v, ty: Type) -> str:
    types = interp.program.types
    if isinstance(v, int):
        if types.is_primitive(ty):
            return str(v)
        alts = types.alternatives(ty)
        return alts[v][0]
    if ty.name == "list":
        items = []
        cur = v
        while not isinstance(cur, int):
            cell = interp.heap[cur[2]]
            items.append(value_to_text(interp, cell[1][0], ty.args[0]))
            cur = cell[1][1]
        return "[" + ", ".join(items) + "]"
    cell = interp.heap[v[2]]
    argtys = types.functor_args(ty, v[1])
    inner = ", ".join(value_to_text(interp, f, t)
                      for f, t in zip(cell[1], argtys))
    return f"{v[1]}({inner})"


# ---------------------------------------------------------------------------
# Entry points


def run(program: Program, entry_name: str, arg_texts: list[str],
        cache: bool = False, debug: bool = False, plain: bool = False
        ) -> tuple[RunResult, Interpreter]:
    """Execute `entry_name` on literal arguments and return its outputs
    and heap statistics.  Argument terms are built before measurement
    begins."""
    interp = Interpreter(program, cache_on=cache, debug=debug)
    entry = program.find_entry(entry_name, len(arg_texts))
    decl = program.procs[entry + ("plain",)].decl
    in_types = [t for t, m in zip(decl.arg_types, decl.arg_modes)
                if m == "in"]
    interp.counting = False
    values = [build_value(interp, parse_ground_term(t), ty)
              for t, ty in zip(arg_texts, in_types)]
    interp.counting = True
    result = interp.run(entry, values, plain=plain)
    return result, interp


def refcount_oracle(program: Program, entry_name: str, arg_texts: list[str]
                    ) -> tuple[RunResult, Interpreter]:
    """Run the plain (no-reuse) program with exact read tracking and
    report, for every executed deconstruct, whether its cell was ever
    read afterwards."""
    interp = Interpreter(program, cache_on=False, oracle=True,
                         force_plain=True)
    entry = program.find_entry(entry_name, len(arg_texts))
    decl = program.procs[entry + ("plain",)].decl
    in_types = [t for t, m in zip(decl.arg_types, decl.arg_modes)
                if m == "in"]
    interp.counting = False
    values = [build_value(interp, parse_ground_term(t), ty)
              for t, ty in zip(arg_texts, in_types)]
    interp.counting = True
    result = interp.run(entry, values)
    return result, interp
