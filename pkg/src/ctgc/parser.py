"""Parser for the core-language surface syntax (``.m0`` files).

The grammar deliberately mirrors small Mercury fragments so that worked
examples can be used as test inputs verbatim: ``:- type``, ``:- pred``,
``:- mode ... is det.``, and bodies built from ``==``, ``:=``, ``<=``,
``=>``, calls and parenthesized disjunctions.  Bodies must already be in
normal form; nested terms, if-then-else, higher-order syntax and
typeclasses are rejected.  ``%`` starts a comment running to end of line.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ir import (
    Assign, Call, CheckError, Conj, ConstArg, Construct, Deconstruct,
    Disj, Goal, Module, ParseError, ProcDecl, Procedure, Test, Type, TypeDef,
    TypeTable, assign_points,
)

_PUNCT = [":-", "--->", "=>", "<=", ":=", "==", "(", ")", "[", "]",
          "|", ";", ",", ".", "^"]


@dataclass
class Token:
    kind: str          # "name", "var", "int", punctuation, "eof"
    text: str
    line: int
    col: int


def _lex(src: str) -> list[Token]:
    toks: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(src)
    while i < n:
        c = src[i]
        if c == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c == "%":
            while i < n and src[i] != "\n":
                i += 1
            continue
        matched = False
        for p in _PUNCT:
            if src.startswith(p, i):
                toks.append(Token(p, p, line, col))
                i += len(p)
                col += len(p)
                matched = True
                break
        if matched:
            continue
        if c.isdigit():
            j = i
            while j < n and src[j].isdigit():
                j += 1
            toks.append(Token("int", src[i:j], line, col))
            col += j - i
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            word = src[i:j]
            kind = "var" if (c == "_" or c.isupper()) else "name"
            toks.append(Token(kind, word, line, col))
            col += j - i
            i = j
            continue
        raise ParseError(f"unexpected character {c!r}", line, col)
    toks.append(Token("eof", "", line, col))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.toks = _lex(src)
        self.pos = 0
        self.fresh = 0

    # -- token plumbing ----------------------------------------------------

    def peek(self) -> Token:
        return self.toks[self.pos]

    def next(self) -> Token:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def expect(self, kind: str) -> Token:
        t = self.next()
        if t.kind != kind:
            raise ParseError(f"expected {kind!r}, found {t.text!r}", t.line, t.col)
        return t

    def at(self, kind: str) -> bool:
        return self.peek().kind == kind

    def err(self, msg: str) -> ParseError:
        t = self.peek()
        return ParseError(msg, t.line, t.col)

    # -- module ------------------------------------------------------------

    def parse_module(self) -> Module:
        self.expect(":-")
        kw = self.expect("name")
        if kw.text != "module":
            raise ParseError("file must start with ':- module name.'",
                             kw.line, kw.col)
        name = self.expect("name").text
        self.expect(".")

        types = TypeTable()
        local_types: list[str] = []
        imports: list[str] = []
        pred_decls: dict[tuple[str, int], ProcDecl] = {}
        foreign_names: set[str] = set()
        modes_seen: dict[tuple[str, int], tuple] = {}
        procs: dict[tuple[str, int], Procedure] = {}
        foreign: dict[tuple[str, int], ProcDecl] = {}
        pending_alias: list[tuple[str, tuple[str, ...], list, Token]] = []

        while not self.at("eof"):
            if self.at(":-"):
                self.next()
                word = self.expect("name").text
                if word == "import_module":
                    imports.append(self.expect("name").text)
                    self.expect(".")
                elif word == "type":
                    td = self.parse_typedef()
                    try:
                        types.add(td)
                    except CheckError as e:
                        raise ParseError(str(e), self.peek().line, self.peek().col)
                    local_types.append(td.name)
                    self.expect(".")
                elif word in ("pred", "foreign_pred"):
                    pname = self.expect("name").text
                    self.expect("(")
                    tys = [self.parse_type()]
                    while self.at(","):
                        self.next()
                        tys.append(self.parse_type())
                    self.expect(")")
                    self.expect(".")
                    key = (pname, len(tys))
                    if key in pred_decls:
                        raise self.err(f"duplicate predicate {pname}/{len(tys)}")
                    pred_decls[key] = ProcDecl(
                        pname, len(tys), tuple(tys),
                        ("in",) * len(tys), "det",
                        foreign=(word == "foreign_pred"))
                    if word == "foreign_pred":
                        foreign_names.add(pname)
                elif word == "mode":
                    pname = self.expect("name").text
                    self.expect("(")
                    modes = [self.parse_mode()]
                    while self.at(","):
                        self.next()
                        modes.append(self.parse_mode())
                    self.expect(")")
                    t = self.expect("name")
                    if t.text != "is":
                        raise ParseError("expected 'is'", t.line, t.col)
                    det = self.expect("name").text
                    if det not in ("det", "semidet"):
                        raise self.err(f"unsupported determinism {det!r}")
                    self.expect(".")
                    key = (pname, len(modes))
                    if key not in pred_decls:
                        raise self.err(f"mode for undeclared predicate "
                                       f"{pname}/{len(modes)}")
                    if key in modes_seen:
                        raise self.err(f"duplicate mode for {pname}/{len(modes)}")
                    modes_seen[key] = (tuple(modes), det)
                elif word == "foreign_alias":
                    t = self.peek()
                    pname = self.expect("name").text
                    self.expect("(")
                    hvs = [self.expect("var").text]
                    while self.at(","):
                        self.next()
                        hvs.append(self.expect("var").text)
                    self.expect(")")
                    pairs = self.parse_alias_block()
                    self.expect(".")
                    pending_alias.append((pname, tuple(hvs), pairs, t))
                else:
                    raise self.err(f"unknown declaration {word!r}")
            elif self.at("name"):
                cname, cargs, body = self.parse_clause()
                key = (cname, len(cargs))
                if key in procs:
                    raise self.err(f"duplicate clause for {cname}/{len(cargs)}; "
                                   "use an explicit disjunction")
                if cname in foreign_names:
                    raise self.err(f"clause for foreign predicate {cname}")
                body, _ = assign_points(body)
                procs[key] = Procedure(
                    pred_decls.get(key) or self._missing_decl(cname, len(cargs)),
                    cargs, body)
            else:
                raise self.err(f"unexpected token {self.peek().text!r}")

        # Attach modes and split foreign declarations from defined ones.
        for key, decl in pred_decls.items():
            if key not in modes_seen:
                raise ParseError(f"predicate {decl.id} has no mode declaration")
            modes, det = modes_seen[key]
            decl = ProcDecl(decl.name, decl.arity, decl.arg_types, modes, det,
                            foreign=decl.foreign)
            if decl.foreign:
                foreign[key] = decl
            elif key in procs:
                procs[key].decl = decl
            else:
                raise ParseError(f"predicate {decl.id} declared but not defined")
        for key in procs:
            if key not in pred_decls:
                raise ParseError(f"clause for undeclared predicate "
                                 f"{key[0]}/{key[1]}")

        mod = Module(name, types, procs, foreign, tuple(imports),
                     tuple(local_types))
        for pname, hvs, pairs, tok in pending_alias:
            self._attach_alias(mod, pname, hvs, pairs, tok)
        return mod

    def _missing_decl(self, name: str, arity: int) -> ProcDecl:
        raise ParseError(f"clause for undeclared predicate {name}/{arity}")

    def _attach_alias(self, mod: Module, pname: str, hvs: tuple[str, ...],
                      pairs: list, tok: Token) -> None:
        from .aliases import AliasSet, rename

        key = (pname, len(hvs))
        decl = mod.foreign.get(key)
        if decl is None:
            raise ParseError(f"foreign_alias for unknown foreign predicate "
                             f"{pname}/{len(hvs)}", tok.line, tok.col)
        for d1, d2 in pairs:
            for d in (d1, d2):
                if d.var not in hvs:
                    raise ParseError(f"foreign_alias {pname}: unknown head "
                                     f"variable {d.var}", tok.line, tok.col)
        # Annotation variables are positional; store them as A1..An.
        ren = {v: f"A{i + 1}" for i, v in enumerate(hvs)}
        aset = rename(AliasSet.from_pairs(pairs), ren)
        mod.foreign[key] = ProcDecl(
            decl.name, decl.arity, decl.arg_types, decl.arg_modes,
            decl.determinism, foreign=True, foreign_alias=aset)

    # -- declarations --------------------------------------------------------

    def parse_typedef(self) -> TypeDef:
        name = self.expect("name").text
        params: list[str] = []
        if self.at("("):
            self.next()
            params.append(self.expect("var").text)
            while self.at(","):
                self.next()
                params.append(self.expect("var").text)
            self.expect(")")
        self.expect("--->")
        alts = [self.parse_alternative(params)]
        while self.at(";"):
            self.next()
            alts.append(self.parse_alternative(params))
        return TypeDef(name, tuple(params), tuple(alts))

    def parse_alternative(self, params: list[str]) -> tuple[str, tuple[Type, ...]]:
        if self.at("["):
            self.next()
            if self.at("]"):
                self.next()
                return "[]", ()
            head = self.parse_type(params)
            self.expect("|")
            tail = self.parse_type(params)
            self.expect("]")
            return "[|]", (head, tail)
        f = self.expect("name").text
        args: list[Type] = []
        if self.at("("):
            self.next()
            args.append(self.parse_type(params))
            while self.at(","):
                self.next()
                args.append(self.parse_type(params))
            self.expect(")")
        return f, tuple(args)

    def parse_type(self, params: list[str] | None = None) -> Type:
        if self.at("var"):
            t = self.next()
            if params is None or t.text not in params:
                raise ParseError(f"type variable {t.text} not allowed here",
                                 t.line, t.col)
            return Type(t.text)
        name = self.expect("name").text
        args: list[Type] = []
        if self.at("("):
            self.next()
            args.append(self.parse_type(params))
            while self.at(","):
                self.next()
                args.append(self.parse_type(params))
            self.expect(")")
        return Type(name, tuple(args))

    def parse_mode(self) -> str:
        t = self.expect("name")
        if t.text not in ("in", "out"):
            raise ParseError(f"unsupported mode {t.text!r}", t.line, t.col)
        return t.text

    def parse_alias_block(self) -> list:
        self.expect("[")
        pairs = []
        while not self.at("]"):
            t = self.expect("name")
            if t.text != "alias":
                raise ParseError("expected 'alias(...)'", t.line, t.col)
            self.expect("(")
            d1 = self.parse_alias_datastructure()
            self.expect(",")
            d2 = self.parse_alias_datastructure()
            self.expect(")")
            pairs.append((d1, d2))
            if self.at(","):
                self.next()
        self.expect("]")
        return pairs

    def parse_alias_datastructure(self):
        """One datastructure: ``Var`` or ``Var^sel.sel...`` where a selector
        is ``functor,index`` or ``T(type)``.  A comma inside a selector is
        always followed by an integer, so the pair-separating comma stays
        unambiguous."""
        from .aliases import Datastructure

        v = self.expect("var").text
        sels: list = []
        if self.at("^"):
            self.next()
            while True:
                sels.append(self.parse_selector())
                if self.at("."):
                    # A '.' also terminates declarations; only continue when
                    # a selector can actually follow.
                    nxt = self.toks[self.pos + 1]
                    if nxt.kind in ("name", "[", "var"):
                        self.next()
                        continue
                break
        return Datastructure(v, tuple(sels))

    def parse_selector(self):
        if self.at("var"):
            t = self.next()
            if t.text != "T":
                raise ParseError("expected type selector 'T(...)'",
                                 t.line, t.col)
            self.expect("(")
            ty = self.parse_type()
            self.expect(")")
            return ("t", ty)
        if self.at("["):
            self.next()
            if self.at("|"):
                self.next()
                self.expect("]")
                f = "[|]"
            else:
                self.expect("]")
                f = "[]"
        else:
            f = self.expect("name").text
        self.expect(",")
        idx = int(self.expect("int").text)
        return ("f", f, idx)

    # -- clauses -------------------------------------------------------------

    def parse_clause(self) -> tuple[str, tuple[str, ...], Goal]:
        name = self.expect("name").text
        self.expect("(")
        args = [self.expect("var").text]
        while self.at(","):
            self.next()
            args.append(self.expect("var").text)
        self.expect(")")
        if len(set(args)) != len(args):
            raise self.err(f"head arguments of {name} must be distinct "
                           "variables (normal form)")
        if self.at("."):
            self.next()
            return name, tuple(args), Conj(())
        self.expect(":-")
        body = self.parse_conj()
        self.expect(".")
        return name, tuple(args), body

    def parse_conj(self) -> Goal:
        goals = [self.parse_goal()]
        while self.at(","):
            self.next()
            goals.append(self.parse_goal())
        if len(goals) == 1 and isinstance(goals[0], (Conj, Disj)):
            return goals[0]
        return Conj(tuple(goals))

    def parse_goal(self) -> Goal:
        if self.at("("):
            self.next()
            branches = [self.parse_conj()]
            while self.at(";"):
                self.next()
                branches.append(self.parse_conj())
            self.expect(")")
            if len(branches) == 1:
                return branches[0]
            return Disj(tuple(branches))
        if self.at("var"):
            x = self._head_var()
            op = self.next()
            if op.kind == "==":
                return Test(x, self._head_var())
            if op.kind == ":=":
                return Assign(x, self._head_var())
            if op.kind == "<=":
                f, args = self.parse_cons(allow_wild=False)
                return Construct(x, f, args)
            if op.kind == "=>":
                f, args = self.parse_cons(allow_wild=True)
                if isinstance(f, int):
                    raise ParseError("integer literal cannot be deconstructed; "
                                     "use == against a bound variable",
                                     op.line, op.col)
                return Deconstruct(x, f, args)
            raise ParseError(f"expected unification operator, found {op.text!r}",
                             op.line, op.col)
        if self.at("name"):
            name = self.next().text
            self.expect("(")
            args = [self._call_arg()]
            while self.at(","):
                self.next()
                args.append(self._call_arg())
            self.expect(")")
            self._distinct(args, f"call to {name}")
            return Call(name, tuple(args))
        raise self.err(f"cannot parse goal at {self.peek().text!r}")

    def _head_var(self) -> str:
        t = self.expect("var")
        if t.text == "_":
            raise ParseError("wildcard not allowed here", t.line, t.col)
        return t.text

    def _call_arg(self) -> str:
        t = self.expect("var")
        if t.text == "_":
            raise ParseError("wildcard not allowed as call argument",
                             t.line, t.col)
        return t.text

    def _cons_arg(self, allow_wild: bool):
        """An argument of a (de)construction: a variable, a wildcard (in
        deconstructions), an integer literal, or a zero-arity constant."""
        if self.at("var"):
            t = self.next()
            if t.text == "_":
                if not allow_wild:
                    raise ParseError("wildcard not allowed in construction",
                                     t.line, t.col)
                self.fresh += 1
                return f"_G{self.fresh}"
            return t.text
        if self.at("int"):
            return ConstArg(int(self.next().text))
        if self.at("["):
            self.next()
            self.expect("]")
            return ConstArg("[]")
        t = self.expect("name")
        return ConstArg(t.text)

    def parse_cons(self, allow_wild: bool) -> tuple:
        if self.at("int"):
            return int(self.next().text), ()
        if self.at("["):
            self.next()
            if self.at("]"):
                self.next()
                return "[]", ()
            h = self._cons_arg(allow_wild)
            self.expect("|")
            t = self._cons_arg(allow_wild)
            self.expect("]")
            args = (h, t)
            self._distinct(args, "list cell")
            return "[|]", args
        f = self.expect("name").text
        args: list = []
        if self.at("("):
            self.next()
            args.append(self._cons_arg(allow_wild))
            while self.at(","):
                self.next()
                args.append(self._cons_arg(allow_wild))
            self.expect(")")
        self._distinct(args, f"arguments of {f}")
        return f, tuple(args)

    def _distinct(self, args, what: str) -> None:
        named = [a for a in args if isinstance(a, str)]
        if len(set(named)) != len(named):
            raise self.err(f"{what}: arguments must be distinct variables "
                           "(normal form)")


def parse_module(source_text: str) -> Module:
    """Parse one module of core-language text.

    Program points are assigned; bodies that are not in normal form are
    rejected.  Type inference and mode checking run separately (see
    `ctgc.checks`).
    """
    return _Parser(source_text).parse_module()
