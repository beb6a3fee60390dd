"""Modeling language: AST, parser, printer, macro expansion, instance unrolling.

A program is a sequence of `process <k> { ... }` blocks. Each block holds
labeled, optionally attributed instructions over per-process registers and
global shared variables. `atomic { ... }` groups a contiguous run of
instructions into an indivisible block. `#` starts a line comment.

Instruction forms:

    L: [attr, ...] move  r  <term>
                   load  r  x
                   store x  <term>
                   jump  L' <term>     # taken iff the term is nonzero
                   nop
                   assert <term>

Labels are optional; unlabeled instructions get generated `_L<i>` labels
(the `_L` prefix is reserved). Attributes carry no intrinsic semantics
except `choose` on a jump, which makes the condition nondeterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

from .parsing import ParseError, TokenStream, tokenize

RESERVED = frozenset({
    "process", "atomic", "move", "load", "store", "jump", "nop", "assert",
    "and", "or",
})

_INT_BITS = 64
_INT_MASK = (1 << _INT_BITS) - 1
_INT_SIGN = 1 << (_INT_BITS - 1)


def wrap_int(v: int) -> int:
    v &= _INT_MASK
    return v - (1 << _INT_BITS) if v & _INT_SIGN else v


# ---------------------------------------------------------------------------
# Terms


@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class Reg:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * == != < > and or
    left: "Term"
    right: "Term"


@dataclass(frozen=True)
class Not:
    arg: "Term"


Term = Const | Reg | BinOp | Not


def term_registers(term: Term) -> set[str]:
    if isinstance(term, Reg):
        return {term.name}
    if isinstance(term, BinOp):
        return term_registers(term.left) | term_registers(term.right)
    if isinstance(term, Not):
        return term_registers(term.arg)
    return set()


def eval_term(term: Term, regs) -> int:
    """Evaluate over wrapping 64-bit signed integers; regs maps name to value."""
    if isinstance(term, Const):
        return wrap_int(term.value)
    if isinstance(term, Reg):
        return regs.get(term.name, 0) if hasattr(regs, "get") else regs[term.name]
    if isinstance(term, Not):
        return 0 if eval_term(term.arg, regs) else 1
    a = eval_term(term.left, regs)
    b = eval_term(term.right, regs)
    op = term.op
    if op == "+":
        return wrap_int(a + b)
    if op == "-":
        return wrap_int(a - b)
    if op == "*":
        return wrap_int(a * b)
    if op == "==":
        return 1 if a == b else 0
    if op == "!=":
        return 1 if a != b else 0
    if op == "<":
        return 1 if a < b else 0
    if op == ">":
        return 1 if a > b else 0
    if op == "and":
        return 1 if a and b else 0
    if op == "or":
        return 1 if a or b else 0
    raise ValueError(f"unknown operator {op!r}")


def term_to_text(term: Term) -> str:
    if isinstance(term, Const):
        return str(term.value)
    if isinstance(term, Reg):
        return term.name
    if isinstance(term, Not):
        return "!" + term_to_text(term.arg)
    return f"({term_to_text(term.left)} {term.op} {term_to_text(term.right)})"


# ---------------------------------------------------------------------------
# Instructions and programs


@dataclass(frozen=True)
class Move:
    reg: str
    term: Term


@dataclass(frozen=True)
class Load:
    reg: str
    var: str


@dataclass(frozen=True)
class Store:
    var: str
    term: Term


@dataclass(frozen=True)
class Jump:
    target: str
    cond: Term


@dataclass(frozen=True)
class Nop:
    pass


@dataclass(frozen=True)
class Assert:
    cond: Term


Raw = Move | Load | Store | Jump | Nop | Assert


@dataclass(frozen=True)
class Instruction:
    label: str
    attrs: frozenset[str]
    raw: Raw
    block: str | None = None  # atomic block id, instructions in a block are contiguous
    line: int = field(default=0, compare=False)

    def is_choose_jump(self) -> bool:
        return isinstance(self.raw, Jump) and "choose" in self.attrs


@dataclass(frozen=True)
class Program:
    processes: tuple[tuple[Instruction, ...], ...]

    @property
    def n(self) -> int:
        return len(self.processes)

    @cached_property
    def shared_vars(self) -> tuple[str, ...]:
        """All shared variable names, sorted; position is the location index."""
        names = set()
        for body in self.processes:
            for ins in body:
                if isinstance(ins.raw, Load):
                    names.add(ins.raw.var)
                elif isinstance(ins.raw, Store):
                    names.add(ins.raw.var)
        return tuple(sorted(names))

    @cached_property
    def registers(self) -> tuple[tuple[str, ...], ...]:
        out = []
        for body in self.processes:
            names = set()
            for ins in body:
                r = ins.raw
                if isinstance(r, Move):
                    names.add(r.reg)
                    names |= term_registers(r.term)
                elif isinstance(r, Load):
                    names.add(r.reg)
                elif isinstance(r, Store):
                    names |= term_registers(r.term)
                elif isinstance(r, Jump):
                    names |= term_registers(r.cond)
                elif isinstance(r, Assert):
                    names |= term_registers(r.cond)
            out.append(tuple(sorted(names)))
        return tuple(out)

    @cached_property
    def label_index(self) -> tuple[dict[str, int], ...]:
        return tuple({ins.label: i for i, ins in enumerate(body)}
                     for body in self.processes)

    def instruction_at(self, p: int, label: str) -> Instruction:
        return self.processes[p][self.label_index[p][label]]


# ---------------------------------------------------------------------------
# Parsing


class _ProgramParser:
    def __init__(self, text: str):
        self.ts = TokenStream(text)
        self.block_counter = 0

    def parse(self) -> Program:
        processes = []
        while self.ts.at_ident("process"):
            processes.append(self._process(len(processes)))
        self.ts.expect_eof()
        if not processes:
            self.ts.error("expected at least one 'process' block")
        prog = Program(tuple(processes))
        _validate(prog)
        return prog

    def _process(self, expected_index: int) -> tuple[Instruction, ...]:
        self.ts.expect_keyword("process")
        tok = self.ts.peek()
        idx = self.ts.expect_int()
        if idx != expected_index:
            raise ParseError(
                f"process index {idx} out of order, expected {expected_index}",
                tok.line, tok.col)
        self.ts.expect_punct("{")
        body: list[Instruction] = []
        seen_labels: set[str] = set()
        while not self.ts.accept_punct("}"):
            if self.ts.at_ident("atomic"):
                self._atomic_block(body, seen_labels)
            else:
                body.append(self._instruction(len(body), seen_labels, None))
            while self.ts.accept_punct(";"):
                pass
        return tuple(body)

    def _atomic_block(self, body: list[Instruction], seen_labels: set[str]):
        self.ts.expect_keyword("atomic")
        opening = self.ts.expect_punct("{")
        block_id = f"b{self.block_counter}"
        self.block_counter += 1
        count = 0
        while not self.ts.accept_punct("}"):
            if self.ts.at_ident("atomic"):
                self.ts.error("atomic blocks do not nest")
            body.append(self._instruction(len(body), seen_labels, block_id))
            count += 1
            while self.ts.accept_punct(";"):
                pass
        if count == 0:
            raise ParseError("empty atomic block", opening.line, opening.col)

    def _instruction(self, idx: int, seen_labels: set[str],
                     block: str | None) -> Instruction:
        ts = self.ts
        start = ts.peek()
        label = None
        if ts.peek().kind == "ident" and ts.toks[ts.pos + 1].kind == "punct" \
                and ts.toks[ts.pos + 1].text == ":":
            label = self._name("label")
            ts.expect_punct(":")
        attrs = frozenset()
        if ts.accept_punct("["):
            names = [self._name("attribute")]
            while ts.accept_punct(",") or (ts.peek().kind == "ident"
                                           and not ts.at_punct("]")):
                names.append(self._name("attribute"))
            ts.expect_punct("]")
            attrs = frozenset(names)
        raw = self._raw()
        if label is None:
            label = f"_L{idx}"
        if label in seen_labels:
            raise ParseError(f"duplicate label {label!r}", start.line, start.col)
        seen_labels.add(label)
        return Instruction(label, attrs, raw, block, line=start.line)

    def _raw(self) -> Raw:
        ts = self.ts
        tok = ts.peek()
        if ts.accept_ident("move"):
            return Move(self._name("register"), self._term())
        if ts.accept_ident("load"):
            return Load(self._name("register"), self._name("shared variable"))
        if ts.accept_ident("store"):
            return Store(self._name("shared variable"), self._term())
        if ts.accept_ident("jump"):
            return Jump(self._name("label"), self._term())
        if ts.accept_ident("nop"):
            return Nop()
        if ts.accept_ident("assert"):
            return Assert(self._term())
        raise ParseError(f"expected an instruction, found {tok.text!r}",
                         tok.line, tok.col)

    def _name(self, what: str) -> str:
        tok = self.ts.expect_ident(what)
        if tok.text in RESERVED:
            raise ParseError(f"reserved word {tok.text!r} cannot name a {what}",
                             tok.line, tok.col)
        return tok.text

    # term grammar, loosest to tightest: or, and, comparisons, + -, *, unary
    def _term(self) -> Term:
        t = self._and_term()
        while self.ts.accept_ident("or"):
            t = BinOp("or", t, self._and_term())
        return t

    def _and_term(self) -> Term:
        t = self._cmp_term()
        while self.ts.accept_ident("and"):
            t = BinOp("and", t, self._cmp_term())
        return t

    def _cmp_term(self) -> Term:
        t = self._add_term()
        while True:
            for op in ("==", "!=", "<", ">"):
                if self.ts.accept_punct(op):
                    t = BinOp(op, t, self._add_term())
                    break
            else:
                return t

    def _add_term(self) -> Term:
        t = self._mul_term()
        while True:
            if self.ts.accept_punct("+"):
                t = BinOp("+", t, self._mul_term())
            elif self.ts.accept_punct("-"):
                t = BinOp("-", t, self._mul_term())
            else:
                return t

    def _mul_term(self) -> Term:
        t = self._unary_term()
        while self.ts.accept_punct("*"):
            t = BinOp("*", t, self._unary_term())
        return t

    def _unary_term(self) -> Term:
        ts = self.ts
        if ts.accept_punct("!"):
            return Not(self._unary_term())
        if ts.accept_punct("-"):
            if ts.peek().kind == "int":
                return Const(-ts.expect_int())
            return BinOp("-", Const(0), self._unary_term())
        return self._atom_term()

    def _atom_term(self) -> Term:
        ts = self.ts
        tok = ts.peek()
        if tok.kind == "int":
            return Const(ts.expect_int())
        if ts.accept_punct("("):
            t = self._term()
            ts.expect_punct(")")
            return t
        if tok.kind == "ident" and tok.text not in RESERVED:
            ts.next()
            return Reg(tok.text)
        raise ParseError(f"expected a term, found {tok.text!r}", tok.line, tok.col)


def _validate(prog: Program):
    shared = set(prog.shared_vars)

    def check_term(term: Term, line: int):
        for name in term_registers(term):
            if name in shared:
                raise ParseError(
                    f"shared variable {name!r} used inside a term", line, 1)

    for p, body in enumerate(prog.processes):
        labels = prog.label_index[p]
        for ins in body:
            r = ins.raw
            if isinstance(r, (Move, Load)) and r.reg in shared:
                raise ParseError(
                    f"register name {r.reg!r} conflicts with a shared variable",
                    ins.line, 1)
            if isinstance(r, (Move, Store)):
                check_term(r.term, ins.line)
            elif isinstance(r, (Jump, Assert)):
                check_term(r.cond, ins.line)
            if isinstance(r, Jump):
                if r.target not in labels:
                    raise ParseError(
                        f"unresolved jump target {r.target!r}", ins.line, 1)
                target = body[labels[r.target]]
                if ins.block is not None and target.block != ins.block:
                    raise ParseError(
                        f"jump from atomic block to {r.target!r} leaves the block",
                        ins.line, 1)
                if ins.block is None and target.block is not None:
                    raise ParseError(
                        f"jump target {r.target!r} is inside an atomic block",
                        ins.line, 1)


def parse_program(text: str) -> Program:
    """Parse program source (macro-free; run expand_macros first if needed)."""
    return _ProgramParser(text).parse()


# ---------------------------------------------------------------------------
# Printing


def _raw_to_text(raw: Raw) -> str:
    if isinstance(raw, Move):
        return f"move {raw.reg} {term_to_text(raw.term)}"
    if isinstance(raw, Load):
        return f"load {raw.reg} {raw.var}"
    if isinstance(raw, Store):
        return f"store {raw.var} {term_to_text(raw.term)}"
    if isinstance(raw, Jump):
        return f"jump {raw.target} {term_to_text(raw.cond)}"
    if isinstance(raw, Nop):
        return "nop"
    return f"assert {term_to_text(raw.cond)}"


def print_program(prog: Program) -> str:
    lines = []
    for p, body in enumerate(prog.processes):
        lines.append(f"process {p} {{")
        open_block = None
        for ins in body:
            if ins.block != open_block:
                if open_block is not None:
                    lines.append("  }")
                if ins.block is not None:
                    lines.append("  atomic {")
                open_block = ins.block
            indent = "    " if ins.block is not None else "  "
            attrs = f"[{', '.join(sorted(ins.attrs))}] " if ins.attrs else ""
            lines.append(f"{indent}{ins.label}: {attrs}{_raw_to_text(ins.raw)}")
        if open_block is not None:
            lines.append("  }")
        lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Macro expansion (purely textual, before parsing)

MACRO_ARITY = {"CAS": 4, "CAS_NORET": 3, "CAS2": 7, "CAS2_NORET": 6}


def _cas_body(k: int, args: list[str], ret: bool, pairs: int) -> str:
    t = [f"__cas{k}_t", f"__cas{k}_u"]
    fail = f"__cas{k}_fail" if ret else f"__cas{k}_done"
    done = f"__cas{k}_done"
    if pairs == 1:
        xs, olds, news = [args[0]], [args[1]], [args[2]]
    else:
        xs, olds, news = [args[0], args[1]], [args[2], args[3]], [args[4], args[5]]
    lines = ["atomic {"]
    first = True
    for i in range(pairs):
        head = f"__cas{k}_try: " if first else ""
        first = False
        lines.append(f"  {head}load {t[i]} {xs[i]}")
        lines.append(f"  jump {fail} ({t[i]} != ({olds[i]}))")
    for i in range(pairs):
        lines.append(f"  store {xs[i]} ({news[i]})")
    if ret:
        rv = args[-1]
        lines.append(f"  move {rv} 1")
        lines.append(f"  jump {done} 1")
        lines.append(f"  {fail}: move {rv} 0")
    lines.append(f"  {done}: nop")
    lines.append("}")
    return "\n".join(lines)


def _macro_text(name: str, k: int, args: list[str]) -> str:
    if name == "CAS":
        return _cas_body(k, args, ret=True, pairs=1)
    if name == "CAS_NORET":
        return _cas_body(k, args, ret=False, pairs=1)
    if name == "CAS2":
        return _cas_body(k, args, ret=True, pairs=2)
    return _cas_body(k, args, ret=False, pairs=2)


def _line_offsets(text: str) -> list[int]:
    offs = [0]
    for i, c in enumerate(text):
        if c == "\n":
            offs.append(i + 1)
    return offs


def _is_macro_name(s: str) -> bool:
    return s[0].isupper() and all(c.isupper() or c.isdigit() or c == "_" for c in s)


def expand_macros(text: str) -> str:
    """Expand CAS-family macro calls into atomic blocks with fresh labels.

    A macro call is an all-caps identifier followed by a parenthesized,
    comma-separated argument list, outside any atomic block and unlabeled.
    """
    counter = 0
    while True:
        toks = tokenize(text)
        offs = _line_offsets(text)

        def tok_start(t):
            return offs[t.line - 1] + t.col - 1

        depth = 0
        in_atomic = 0
        found = None
        for i, tok in enumerate(toks):
            if tok.kind == "punct" and tok.text == "{":
                depth += 1
            elif tok.kind == "punct" and tok.text == "}":
                if in_atomic == depth:
                    in_atomic = 0
                depth -= 1
            elif tok.kind == "ident" and tok.text == "atomic":
                in_atomic = depth + 1
            elif (tok.kind == "ident" and _is_macro_name(tok.text)
                  and toks[i + 1].kind == "punct"
                  and toks[i + 1].text == "("):
                found = i
                break
        if found is None:
            return text
        tok = toks[found]
        name = tok.text
        if name not in MACRO_ARITY:
            raise ParseError(f"unknown macro {name!r}", tok.line, tok.col)
        if in_atomic:
            raise ParseError(f"macro {name} called inside an atomic block",
                             tok.line, tok.col)
        if found >= 2 and toks[found - 1].text == ":" \
                and toks[found - 1].kind == "punct":
            raise ParseError(
                f"macro {name} cannot carry a label; label a nop before it",
                tok.line, tok.col)
        # collect argument token spans up to the matching ')'
        i = found + 2
        pdepth = 1
        args: list[list] = [[]]
        while True:
            t = toks[i]
            if t.kind == "eof":
                raise ParseError(f"unterminated macro call {name}",
                                 tok.line, tok.col)
            if t.kind == "punct" and t.text == "(":
                pdepth += 1
            elif t.kind == "punct" and t.text == ")":
                pdepth -= 1
                if pdepth == 0:
                    break
            elif t.kind == "punct" and t.text == "," and pdepth == 1:
                args.append([])
                i += 1
                continue
            args[-1].append(t)
            i += 1
        arg_texts = []
        for span in args:
            if not span:
                raise ParseError(f"empty argument in macro {name}",
                                 tok.line, tok.col)
            a = tok_start(span[0])
            b = tok_start(span[-1]) + len(span[-1].text)
            arg_texts.append(text[a:b].strip())
        if len(arg_texts) != MACRO_ARITY[name]:
            raise ParseError(
                f"macro {name} takes {MACRO_ARITY[name]} arguments, "
                f"got {len(arg_texts)}", tok.line, tok.col)
        start = tok_start(tok)
        end = tok_start(toks[i]) + 1
        text = text[:start] + _macro_text(name, counter, arg_texts) + text[end:]
        counter += 1


# ---------------------------------------------------------------------------
# Bounds and instances


@dataclass(frozen=True)
class BoundsConfig:
    """Per-process loop suprema plus branch-prediction switches."""

    suprema: tuple[int, ...]
    predict_default: bool = False
    predict_overrides: tuple[tuple[str, bool], ...] = ()

    def __post_init__(self):
        for p, k in enumerate(self.suprema):
            if k < 1:
                raise ValueError(f"supremum for process {p} must be >= 1, got {k}")

    @classmethod
    def for_program(cls, prog: Program, default: int = 1,
                    overrides: dict[int, int] | None = None,
                    predict_default: bool = False,
                    predict_labels: dict[str, bool] | None = None):
        sup = [default] * prog.n
        for p, k in (overrides or {}).items():
            if not 0 <= p < prog.n:
                raise ValueError(f"no process {p} in program")
            sup[p] = k
        return cls(tuple(sup), predict_default,
                   tuple(sorted((predict_labels or {}).items())))

    def supremum(self, p: int) -> int:
        return self.suprema[p]

    def predicts(self, label: str) -> bool:
        for name, flag in self.predict_overrides:
            if name == label:
                return flag
        return self.predict_default


@dataclass(frozen=True)
class InstructionInstance:
    """One bounded-unrolling copy of an instruction: fetch occurrence j of label."""

    p: int
    idx: int  # instruction index within the process
    label: str
    j: int
    instr: Instruction = field(compare=False, repr=False)


def enumerate_instances(prog: Program, bounds: BoundsConfig) -> tuple[InstructionInstance, ...]:
    if len(bounds.suprema) != prog.n:
        raise ValueError("bounds cover a different number of processes")
    out = []
    for p, body in enumerate(prog.processes):
        for idx, ins in enumerate(body):
            for j in range(bounds.supremum(p)):
                out.append(InstructionInstance(p, idx, ins.label, j, ins))
    return tuple(out)
