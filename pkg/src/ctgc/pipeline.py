"""Compilation driver: ties parsing, checking, analysis, reuse decisions,
interface files, and the executable-program archive together.

A compilation reads ``.m0`` sources, merges the type definitions and
declarations of their import closure, analyses each module against the
interface files present in the output directory, decides reuses, and
writes per-module ``.ctgc`` interfaces plus one ``.ctgcar`` archive (a
JSON serialization of every annotated procedure version) that the
interpreter can load without the sources.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

from . import interfaces as ifc
from .aliases import Datastructure, ds_from_text, ds_to_text, type_from_text
from .checks import validate_module
from .dataflow import (
    ModuleAnalysis, ProcId, ProcSummary, analyse_module, positional_vars,
)
from .ir import (
    Assign, Call, CheckError, Conj, ConstArg, Construct, Deconstruct, Disj,
    Goal, Module, ProcDecl, Procedure, Test, Type, TypeDef, TypeTable,
    goal_nodes, resolve_callee,
)
from .parser import parse_module
from .reuse import (
    CalleeVersions, Lifo, MatchingArities, ModuleReuse, ProcVersion,
    ReuseConstraint, SelectionStrategy, parse_constraint, parse_strategy,
    reuse_module,
)
from .runtime import ExecProc, Program, compile_goal

ARCHIVE_FORMAT = "ctgc-archive v1"


@dataclass
class CtgcConfig:
    constraint: ReuseConstraint = field(default_factory=MatchingArities)
    strategy: SelectionStrategy = field(default_factory=Lifo)
    widening_threshold: int | None = 200
    cache: bool = False
    ctgc_enabled: bool = True
    seed: int = 0
    max_iterate_rounds: int = 5
    record_all_states: bool = False

    @classmethod
    def from_flags(cls, constraint: str = "match", strategy: str = "lifo",
                   widen: str = "200", **kw) -> "CtgcConfig":
        threshold = None if widen == "off" else int(widen)
        seed = kw.get("seed", 0)
        return cls(constraint=parse_constraint(constraint),
                   strategy=parse_strategy(strategy, seed),
                   widening_threshold=threshold, **kw)


@dataclass
class CompiledModule:
    module: Module
    analysis: ModuleAnalysis
    reuse: ModuleReuse | None
    interface: ifc.InterfaceFile
    versions: dict[tuple[str, int], list[ProcVersion]]


# ---------------------------------------------------------------------------
# Source loading and import resolution


def load_module_source(path: str) -> Module:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise CheckError(f"cannot read {path}: {e}")
    return parse_module(text)


def _module_path(name: str, search_dirs: list[str]) -> str | None:
    for d in search_dirs:
        p = os.path.join(d, f"{name}.m0")
        if os.path.exists(p):
            return p
    return None


def resolve_imports(module: Module, search_dirs: list[str]) -> None:
    """Merge the declarations (types, pred/mode decls) of the import
    closure into `module`.  Only declarations travel this way; analysis
    results come from interface files."""
    seen: set[str] = {module.name}
    queue = list(module.imports)
    direct = set(module.imports)
    while queue:
        name = queue.pop(0)
        if name in seen:
            continue
        seen.add(name)
        path = _module_path(name, search_dirs)
        if path is None:
            raise CheckError(f"module {module.name}: cannot find imported "
                             f"module {name} (looked for {name}.m0)")
        imp = load_module_source(path)
        for tname in imp.local_types:
            module.types.add(imp.types.defs[tname])
        if name in direct:
            for key, proc in imp.procs.items():
                module.imported_decls[key] = (imp.name, proc.decl)
            for key, decl in imp.foreign.items():
                module.imported_decls[key] = (imp.name, decl)
        queue.extend(imp.imports)


def _resolve_call_targets(module: Module) -> None:
    """Fill in the defining module of every call."""
    for key, proc in module.procs.items():
        def walk(g: Goal) -> Goal:
            if isinstance(g, Conj):
                return replace(g, goals=tuple(walk(c) for c in g.goals))
            if isinstance(g, Disj):
                return replace(g, branches=tuple(walk(b) for b in g.branches))
            if isinstance(g, Call):
                mod, _decl = resolve_callee(module, g.name, len(g.args))
                return replace(g, module=mod)
            return g

        proc.body = walk(proc.body)


# ---------------------------------------------------------------------------
# Module compilation


def _imported_summaries(module: Module, iface_dir: str
                        ) -> tuple[dict[ProcId, ProcSummary],
                                   dict[ProcId, CalleeVersions]]:
    summaries: dict[ProcId, ProcSummary] = {}
    versions: dict[ProcId, CalleeVersions] = {}
    for imp in module.imports:
        path = os.path.join(iface_dir, f"{imp}.ctgc")
        if not os.path.exists(path):
            continue  # not analysed yet: callee summaries default to top
        iface = ifc.read_interface(path)
        for (name, arity), aset in iface.summaries.items():
            pid = (iface.module, name, arity)
            summaries[pid] = ProcSummary(pid, aset)
            two, conds = iface.versions.get((name, arity),
                                            (False, frozenset()))
            versions[pid] = CalleeVersions(two, conds)
    return summaries, versions


def build_interface(module: Module, analysis: ModuleAnalysis,
                    mreuse: ModuleReuse | None) -> ifc.InterfaceFile:
    iface = ifc.InterfaceFile(module=module.name)
    for (name, arity), proc in module.procs.items():
        pid = (module.name, name, arity)
        iface.summaries[(name, arity)] = analysis.summaries[pid].exit_aliases
        two, conds = False, frozenset()
        if mreuse is not None:
            pr = mreuse.procs[(name, arity)]
            two = pr.has_distinct_reuse_version
            if two:
                mapping = dict(zip(proc.head_vars,
                                   positional_vars(proc.arity)))
                conds = frozenset(Datastructure(mapping[d.var], d.path)
                                  for d in pr.conditions)
        iface.versions[(name, arity)] = (two, conds)
    for (name, arity), decl in module.foreign.items():
        if decl.foreign_alias is not None:
            iface.foreign[(name, arity)] = decl.foreign_alias
    return iface


def compile_module(path: str, config: CtgcConfig, iface_dir: str,
                   search_dirs: list[str] | None = None) -> CompiledModule:
    """Front end to reuse decisions for one module, using whatever
    interface files already exist in `iface_dir`."""
    module = load_module_source(path)
    dirs = [os.path.dirname(os.path.abspath(path))] + (search_dirs or [])
    resolve_imports(module, dirs)
    validate_module(module)
    _resolve_call_targets(module)
    summaries, versions = _imported_summaries(module, iface_dir)
    analysis = analyse_module(module, summaries, config.widening_threshold,
                              config.record_all_states)
    mreuse = None
    proc_versions: dict[tuple[str, int], list[ProcVersion]] = {}
    if config.ctgc_enabled:
        mreuse = reuse_module(module, analysis, versions, config.constraint,
                              config.strategy)
        for key, pr in mreuse.procs.items():
            proc_versions[key] = pr.versions
    else:
        for key, proc in module.procs.items():
            proc_versions[key] = [ProcVersion("plain", frozenset(),
                                              proc.body)]
    iface = build_interface(module, analysis, mreuse)
    return CompiledModule(module, analysis, mreuse, iface, proc_versions)


def compile_and_write(path: str, config: CtgcConfig, out_dir: str,
                      search_dirs: list[str] | None = None) -> CompiledModule:
    cm = compile_module(path, config, out_dir, search_dirs)
    ifc.write_interface(cm.interface, os.path.join(out_dir,
                                                   f"{cm.module.name}.ctgc"))
    return cm


def dependency_order(paths: list[str]) -> list[str]:
    """Imported modules first; cycles are broken by the given order."""
    mods = {}
    for p in paths:
        m = load_module_source(p)
        mods[m.name] = (p, m.imports)
    order: list[str] = []
    state: dict[str, int] = {}

    def visit(name: str) -> None:
        if state.get(name) is not None:
            return
        state[name] = 0
        for imp in mods.get(name, (None, ()))[1]:
            if imp in mods and state.get(imp) != 0:
                visit(imp)
        state[name] = 1
        if name in mods:
            order.append(mods[name][0])

    for name in mods:
        visit(name)
    return order


# ---------------------------------------------------------------------------
# Archive serialization


def _goal_to_json(g: Goal):
    if isinstance(g, Conj):
        return [g.point, "conj", [_goal_to_json(c) for c in g.goals]]
    if isinstance(g, Disj):
        return [g.point, "disj", [_goal_to_json(b) for b in g.branches]]
    if isinstance(g, Test):
        return [g.point, "test", g.x, g.y]
    if isinstance(g, Assign):
        return [g.point, "assign", g.x, g.y]
    if isinstance(g, Construct):
        return [g.point, "construct", g.x, g.functor,
                [a if isinstance(a, str) else ["c", a.functor]
                 for a in g.args], g.reuse_of]
    if isinstance(g, Deconstruct):
        return [g.point, "deconstruct", g.x, g.functor,
                [a if isinstance(a, str) else ["c", a.functor]
                 for a in g.args], g.cacheable]
    if isinstance(g, Call):
        return [g.point, "call", g.name, list(g.args), g.module, g.version]
    raise TypeError(f"unknown goal {g!r}")


def _goal_from_json(j) -> Goal:
    point, op = j[0], j[1]
    if op == "conj":
        return Conj(tuple(_goal_from_json(c) for c in j[2]), point=point)
    if op == "disj":
        return Disj(tuple(_goal_from_json(b) for b in j[2]), point=point)
    if op == "test":
        return Test(j[2], j[3], point=point)
    if op == "assign":
        return Assign(j[2], j[3], point=point)
    args_at = 4

    def args(raw):
        return tuple(a if isinstance(a, str) else ConstArg(a[1])
                     for a in raw)

    if op == "construct":
        return Construct(j[2], j[3], args(j[args_at]), j[5], point=point)
    if op == "deconstruct":
        return Deconstruct(j[2], j[3], args(j[args_at]), j[5], point=point)
    if op == "call":
        return Call(j[2], tuple(j[3]), j[4], j[5], point=point)
    raise CheckError(f"bad archive goal op {op!r}")


def write_archive(compiled: list[CompiledModule], path: str,
                  config: CtgcConfig) -> None:
    data = {
        "format": ARCHIVE_FORMAT,
        "ctgc": config.ctgc_enabled,
        "config": {
            "constraint": str(config.constraint),
            "strategy": str(config.strategy),
            "seed": config.seed,
            "widen": config.widening_threshold,
        },
        "modules": [],
    }
    for cm in compiled:
        m = cm.module
        jm = {"name": m.name, "types": [], "procs": [],
              "foreign": [[n, a] for n, a in sorted(m.foreign)]}
        for tname in m.local_types:
            td = m.types.defs[tname]
            jm["types"].append({
                "name": td.name,
                "params": list(td.params),
                "alts": [[f, [str(t) for t in args]]
                         for f, args in td.alternatives],
            })
        for key in sorted(m.procs):
            proc = m.procs[key]
            pr = cm.reuse.procs[key] if cm.reuse else None
            conds = sorted(ds_to_text(d) for d in pr.conditions) if pr else []
            jm["procs"].append({
                "name": proc.name,
                "arity": proc.arity,
                "arg_types": [str(t) for t in proc.decl.arg_types],
                "arg_modes": list(proc.decl.arg_modes),
                "det": proc.decl.determinism,
                "head_vars": list(proc.head_vars),
                "var_types": {v: str(t)
                              for v, t in sorted(proc.var_types.items())},
                "conditions": conds,
                "versions": [{"kind": v.kind,
                              "body": _goal_to_json(v.body)}
                             for v in cm.versions[key]],
            })
        data["modules"].append(jm)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_archive(path: str) -> tuple[Program, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckError(f"cannot read archive {path}: {e}")
    if data.get("format") != ARCHIVE_FORMAT:
        raise CheckError(f"{path}: not a ctgc archive")

    table = TypeTable()
    for jm in data["modules"]:
        for jt in jm["types"]:
            table.add(TypeDef(jt["name"], tuple(jt["params"]),
                              tuple((f, tuple(type_from_text(t)
                                              for t in args))
                                    for f, args in jt["alts"])))
    procs: dict[tuple[str, str, int, str], ExecProc] = {}
    conditions: dict[tuple[str, str, int], frozenset[Datastructure]] = {}
    have_reuse: set[tuple[str, str, int]] = set()
    foreign: set[tuple[str, int]] = set()
    raw: list[tuple[str, dict]] = []
    for jm in data["modules"]:
        foreign.update((n, a) for n, a in jm.get("foreign", []))
        for jp in jm["procs"]:
            raw.append((jm["name"], jp))
            if any(v["kind"] == "reuse" for v in jp["versions"]):
                have_reuse.add((jm["name"], jp["name"], jp["arity"]))
    for mod_name, jp in raw:
        decl = ProcDecl(jp["name"], jp["arity"],
                        tuple(type_from_text(t) for t in jp["arg_types"]),
                        tuple(jp["arg_modes"]), jp["det"])
        var_types = {v: type_from_text(t)
                     for v, t in jp["var_types"].items()}
        pid = (mod_name, jp["name"], jp["arity"])
        conditions[pid] = frozenset(ds_from_text(t)
                                    for t in jp["conditions"])
        for jv in jp["versions"]:
            body = _goal_from_json(jv["body"])
            code = compile_goal(body, var_types, table, {}, have_reuse,
                                foreign)
            procs[pid + (jv["kind"],)] = ExecProc(decl,
                                                  tuple(jp["head_vars"]),
                                                  code, jv["kind"])
    program = Program(table, procs, conditions,
                      ctgc_enabled=bool(data.get("ctgc", True)))
    return program, data.get("config", {})


def build_program(compiled: list[CompiledModule],
                  ctgc_enabled: bool = True) -> Program:
    """In-memory equivalent of write_archive + read_archive."""
    table = TypeTable()
    for cm in compiled:
        for td in cm.module.types.defs.values():
            table.add(td)
    have_reuse = {(cm.module.name, key[0], key[1])
                  for cm in compiled for key, vs in cm.versions.items()
                  if any(v.kind == "reuse" for v in vs)}
    foreign = {k for cm in compiled for k in cm.module.foreign}
    procs: dict[tuple[str, str, int, str], ExecProc] = {}
    conditions: dict[tuple[str, str, int], frozenset[Datastructure]] = {}
    for cm in compiled:
        for key, proc in cm.module.procs.items():
            pid = (cm.module.name,) + key
            pr = cm.reuse.procs[key] if cm.reuse else None
            conditions[pid] = pr.conditions if pr else frozenset()
            for v in cm.versions[key]:
                code = compile_goal(v.body, proc.var_types, table, {},
                                    have_reuse, foreign)
                procs[pid + (v.kind,)] = ExecProc(proc.decl, proc.head_vars,
                                                  code, v.kind)
    return Program(table, procs, conditions, ctgc_enabled=ctgc_enabled)
