"""Memory-model definition files: order-constraint rules and stage partitions.

An `.mcm` file holds one model:

    mcm "tso" {
      stages { {Fe Is Ex} {Re} }        # optional
      rule store_store {
        vars s0 s1: instr, k: proc;
        where kind(s0) = store, kind(s1) = store, proc(s0) = proc(s1), s0 != s1;
        when Fe(s0) < Fe(s1);
        then Re(s0, k) < Re(s1, k);
      }
    }

Rules are universally quantified Horn implications over the four lifecycle
operation kinds. `Re` carries a destination: a proc variable, `*` (all
destinations, conjunctive), or `proc(v)` (the process performing v). The
`when` section may be empty; `then` is required. Only strict `<` atoms are
allowed; negation exists solely in where-predicates (`!=` forms).
"""

from __future__ import annotations

from dataclasses import dataclass

from .parsing import ParseError, TokenStream

OP_KINDS = ("Fe", "Is", "Ex", "Re")
KIND_ORDER = {k: i for i, k in enumerate(OP_KINDS)}
INSTR_KINDS = frozenset({"move", "load", "store", "jump", "nop", "assert"})


# ---------------------------------------------------------------------------
# Rule AST


@dataclass(frozen=True)
class DestAll:
    pass


@dataclass(frozen=True)
class DestVar:
    name: str


@dataclass(frozen=True)
class DestProcOf:
    var: str


Dest = DestAll | DestVar | DestProcOf


@dataclass(frozen=True)
class OpRef:
    kind: str  # Fe Is Ex Re
    var: str
    dest: Dest | None = None  # Re only


@dataclass(frozen=True)
class OrderAtom:
    lhs: OpRef
    rhs: OpRef


@dataclass(frozen=True)
class KindIs:
    var: str
    kind: str


@dataclass(frozen=True)
class ProcEq:
    a: str
    b: str


@dataclass(frozen=True)
class ProcNe:
    a: str
    b: str


@dataclass(frozen=True)
class LocEq:
    a: str
    b: str


@dataclass(frozen=True)
class HasAttr:
    var: str
    attr: str


@dataclass(frozen=True)
class LabelIs:
    var: str
    label: str


@dataclass(frozen=True)
class Distinct:
    a: str
    b: str


WherePred = KindIs | ProcEq | ProcNe | LocEq | HasAttr | LabelIs | Distinct


@dataclass(frozen=True)
class ConstraintRule:
    name: str
    instr_vars: tuple[str, ...]
    proc_vars: tuple[str, ...]
    where: tuple[WherePred, ...]
    when: tuple[OrderAtom, ...]  # empty means unconditional
    then: tuple[OrderAtom, ...]


@dataclass(frozen=True)
class StageSpec:
    stages: tuple[frozenset[str], ...]


@dataclass(frozen=True)
class McmSpec:
    name: str
    rules: tuple[ConstraintRule, ...]
    stages: StageSpec | None = None


def validate_stages(spec: StageSpec) -> None:
    """Accept exactly the order-preserving partitions of {Fe, Is, Ex, Re}."""
    seen: dict[str, int] = {}
    for i, stage in enumerate(spec.stages):
        if not stage:
            raise ValueError("empty stage")
        for kind in stage:
            if kind not in KIND_ORDER:
                raise ValueError(f"unknown operation kind {kind!r}")
            if kind in seen:
                raise ValueError(f"stage overlap on {kind}")
            seen[kind] = i
    for kind in OP_KINDS:
        if kind not in seen:
            raise ValueError(f"stages omit {kind}")
    for a, b in zip(OP_KINDS, OP_KINDS[1:]):
        if seen[a] > seen[b]:
            raise ValueError(
                f"stage order violation: {a} is staged after {b}")


# ---------------------------------------------------------------------------
# Parsing


class _McmParser:
    def __init__(self, text: str):
        self.ts = TokenStream(text)

    def parse(self) -> McmSpec:
        ts = self.ts
        ts.expect_keyword("mcm")
        tok = ts.peek()
        if tok.kind != "string":
            raise ParseError("expected quoted model name", tok.line, tok.col)
        name = ts.next().text
        ts.expect_punct("{")
        stages = None
        rules: list[ConstraintRule] = []
        names: set[str] = set()
        while not ts.accept_punct("}"):
            if ts.at_ident("stages"):
                if stages is not None:
                    ts.error("duplicate stages block")
                stages = self._stages()
            elif ts.at_ident("rule"):
                rule = self._rule()
                if rule.name in names:
                    ts.error(f"duplicate rule name {rule.name!r}")
                names.add(rule.name)
                rules.append(rule)
            else:
                ts.error("expected 'stages' or 'rule'")
        ts.expect_eof()
        return McmSpec(name, tuple(rules), stages)

    def _stages(self) -> StageSpec:
        ts = self.ts
        opening = ts.expect_keyword("stages")
        ts.expect_punct("{")
        groups = []
        while not ts.accept_punct("}"):
            ts.expect_punct("{")
            kinds = set()
            while not ts.accept_punct("}"):
                kinds.add(ts.expect_ident("operation kind").text)
            groups.append(frozenset(kinds))
        spec = StageSpec(tuple(groups))
        try:
            validate_stages(spec)
        except ValueError as e:
            raise ParseError(str(e), opening.line, opening.col) from None
        return spec

    def _rule(self) -> ConstraintRule:
        ts = self.ts
        ts.expect_keyword("rule")
        name = ts.expect_ident("rule name").text
        ts.expect_punct("{")
        instr_vars: list[str] = []
        proc_vars: list[str] = []
        if ts.accept_ident("vars"):
            while True:
                group = [ts.expect_ident("variable").text]
                while ts.peek().kind == "ident" and not ts.at_punct(":"):
                    group.append(ts.next().text)
                ts.expect_punct(":")
                ty = ts.expect_ident("variable type").text
                if ty == "instr":
                    instr_vars.extend(group)
                elif ty == "proc":
                    proc_vars.extend(group)
                else:
                    ts.error(f"unknown variable type {ty!r}")
                if not ts.accept_punct(","):
                    break
            ts.expect_punct(";")
        declared = set(instr_vars) | set(proc_vars)
        if len(declared) != len(instr_vars) + len(proc_vars):
            ts.error("variable declared twice")
        self.instr_vars = set(instr_vars)
        self.proc_vars = set(proc_vars)
        where = []
        if ts.accept_ident("where"):
            where.append(self._where_pred())
            while ts.accept_punct(","):
                pred = self._where_pred()
                if pred is not None:
                    where.append(pred)
            ts.expect_punct(";")
        where = [p for p in where if p is not None]
        when = []
        if ts.accept_ident("when"):
            if not ts.at_punct(";"):
                when.append(self._atom())
                while ts.accept_punct(","):
                    when.append(self._atom())
            ts.expect_punct(";")
        ts.expect_keyword("then")
        then = [self._atom()]
        while ts.accept_punct(","):
            then.append(self._atom())
        ts.expect_punct(";")
        ts.expect_punct("}")
        return ConstraintRule(name, tuple(instr_vars), tuple(proc_vars),
                              tuple(where), tuple(when), tuple(then))

    def _instr_var(self) -> str:
        tok = self.ts.expect_ident("instruction variable")
        if tok.text not in self.instr_vars:
            raise ParseError(f"undeclared instruction variable {tok.text!r}",
                             tok.line, tok.col)
        return tok.text

    def _where_pred(self) -> WherePred | None:
        ts = self.ts
        tok = ts.peek()
        if ts.accept_ident("kind"):
            ts.expect_punct("(")
            v = self._instr_var()
            ts.expect_punct(")")
            ts.expect_punct("=")
            k = ts.expect_ident("instruction kind").text
            if k not in INSTR_KINDS:
                ts.error(f"unknown instruction kind {k!r}")
            return KindIs(v, k)
        if ts.accept_ident("proc"):
            ts.expect_punct("(")
            a = self._instr_var()
            ts.expect_punct(")")
            ne = not ts.accept_punct("=")
            if ne:
                ts.expect_punct("!=")
            ts.expect_keyword("proc")
            ts.expect_punct("(")
            b = self._instr_var()
            ts.expect_punct(")")
            return ProcNe(a, b) if ne else ProcEq(a, b)
        if ts.accept_ident("loc"):
            ts.expect_punct("(")
            a = self._instr_var()
            ts.expect_punct(")")
            ts.expect_punct("=")
            ts.expect_keyword("loc")
            ts.expect_punct("(")
            b = self._instr_var()
            ts.expect_punct(")")
            return LocEq(a, b)
        if ts.accept_ident("attr"):
            ts.expect_punct("(")
            v = self._instr_var()
            ts.expect_punct(")")
            ts.expect_keyword("has")
            return HasAttr(v, ts.expect_ident("attribute").text)
        if ts.accept_ident("label"):
            ts.expect_punct("(")
            v = self._instr_var()
            ts.expect_punct(")")
            ts.expect_punct("=")
            return LabelIs(v, ts.expect_ident("label").text)
        if ts.accept_ident("obs"):
            # observer-relative semantics collapse: obs(v) = proc(v) only
            ts.expect_punct("(")
            v = self._instr_var()
            ts.expect_punct(")")
            ts.expect_punct("=")
            ts.expect_keyword("proc")
            ts.expect_punct("(")
            w = self._instr_var()
            ts.expect_punct(")")
            if v != w:
                raise ParseError(
                    "observer must equal the performing process",
                    tok.line, tok.col)
            return None
        if tok.kind == "ident":
            a = ts.next().text
            if a not in self.instr_vars and a not in self.proc_vars:
                raise ParseError(f"undeclared variable {a!r}", tok.line, tok.col)
            ts.expect_punct("!=")
            btok = ts.peek()
            b = ts.expect_ident("variable").text
            both_instr = a in self.instr_vars and b in self.instr_vars
            both_proc = a in self.proc_vars and b in self.proc_vars
            if not (both_instr or both_proc):
                raise ParseError(f"{a!r} != {b!r} must compare variables of "
                                 "one type", btok.line, btok.col)
            return Distinct(a, b)
        ts.error("expected a where-predicate")

    def _atom(self) -> OrderAtom:
        ts = self.ts
        if ts.at_punct("!"):
            ts.error("negation appears only in where-predicates")
        lhs = self._opref()
        if ts.at_punct("<="):
            ts.error("only strict order '<' is supported")
        ts.expect_punct("<")
        return OrderAtom(lhs, self._opref())

    def _opref(self) -> OpRef:
        ts = self.ts
        tok = ts.expect_ident("operation kind")
        kind = tok.text
        if kind not in KIND_ORDER:
            raise ParseError(f"unknown operation kind {kind!r}",
                             tok.line, tok.col)
        ts.expect_punct("(")
        v = self._instr_var()
        dest = None
        if kind == "Re":
            ts.expect_punct(",")
            dtok = ts.peek()
            if ts.accept_punct("*"):
                dest = DestAll()
            elif ts.accept_ident("proc"):
                ts.expect_punct("(")
                dest = DestProcOf(self._instr_var())
                ts.expect_punct(")")
            else:
                name = ts.expect_ident("destination").text
                if name not in self.proc_vars:
                    raise ParseError(
                        f"undeclared process variable {name!r}",
                        dtok.line, dtok.col)
                dest = DestVar(name)
        elif ts.at_punct(","):
            ts.error(f"{kind} carries no destination")
        ts.expect_punct(")")
        return OpRef(kind, v, dest)


def parse_mcm(text: str) -> McmSpec:
    return _McmParser(text).parse()


def extract_defining_predicates(spec: McmSpec, instances, n: int):
    """Ground atoms of all rules after grounding and feasibility filtering."""
    from .constraints import defining_atoms
    return defining_atoms(spec, instances, n)
