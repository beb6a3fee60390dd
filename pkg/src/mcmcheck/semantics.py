"""Operational semantics: ground operations, machine states, transitions.

Every instruction instance owns a fetch (Fe) and an issue (Is) operation;
loads and stores own an execute (Ex); stores own one reflect (Re) per
destination process. Loads read only their own process memory, so cross
process visibility happens exclusively through reflects and any further
ordering comes from MCM rules layered on top by the constraint engine.

PC rules: fetching a non-jump advances the PC; fetching a jump stalls the
process until the jump issues (taken iff its condition is nonzero). A jump
under branch prediction picks a direction at fetch instead (the choice is
part of the transition) and validates it at issue; a mismatch discards the
successor. A `[choose]` jump stalls like a normal jump and ignores its
condition at issue: both directions are explored as separate transitions.

Register reads wait for the defining write: at fetch, the instance records
the write operation (Is of a move, Ex of a load) of the most recently
fetched instance writing each register it reads; its issue is enabled only
once those are performed.
"""

from __future__ import annotations

from .lang import (
    Assert, BoundsConfig, Const, Jump, Load, Move, Program, Reg, Store,
    Term, enumerate_instances, term_registers, wrap_int,
)

KF, KI, KX, KR = 0, 1, 2, 3
KIND_NAMES = ("Fe", "Is", "Ex", "Re")


def _compile_term(term: Term, pos: dict[str, int]):
    """Compile a term to a closure over the register value tuple."""
    if isinstance(term, Const):
        v = wrap_int(term.value)
        return lambda regs: v
    if isinstance(term, Reg):
        i = pos[term.name]
        return lambda regs: regs[i]
    if hasattr(term, "arg"):  # Not
        f = _compile_term(term.arg, pos)
        return lambda regs: 0 if f(regs) else 1
    lf = _compile_term(term.left, pos)
    rf = _compile_term(term.right, pos)
    op = term.op
    if op == "+":
        return lambda regs: wrap_int(lf(regs) + rf(regs))
    if op == "-":
        return lambda regs: wrap_int(lf(regs) - rf(regs))
    if op == "*":
        return lambda regs: wrap_int(lf(regs) * rf(regs))
    if op == "==":
        return lambda regs: 1 if lf(regs) == rf(regs) else 0
    if op == "!=":
        return lambda regs: 1 if lf(regs) != rf(regs) else 0
    if op == "<":
        return lambda regs: 1 if lf(regs) < rf(regs) else 0
    if op == ">":
        return lambda regs: 1 if lf(regs) > rf(regs) else 0
    if op == "and":
        return lambda regs: 1 if lf(regs) and rf(regs) else 0
    return lambda regs: 1 if lf(regs) or rf(regs) else 0


class MachineState:
    """Immutable snapshot; identity excludes derivable bookkeeping fields."""

    __slots__ = ("pcs", "stalled", "counts", "regs", "mems", "storevals",
                 "end", "lastw", "deps", "preds", "ordvals", "stamps",
                 "live", "_key", "_hash")

    def __init__(self, pcs, stalled, counts, regs, mems, storevals, end,
                 lastw, deps, preds, ordvals, stamps, live):
        self.pcs = pcs
        self.stalled = stalled          # bitmask over processes
        self.counts = counts            # fetch occurrences per instruction
        self.regs = regs
        self.mems = mems
        self.storevals = storevals      # pending store values by store slot
        self.end = end                  # bitmask over ground operations
        self.lastw = lastw              # reg position -> defining write op, -1 none
        self.deps = deps                # fetched, unissued: (inst, dep ops)
        self.preds = preds              # outstanding predictions: (inst, taken)
        self.ordvals = ordvals          # order-predicate bits, predicate mode
        self.stamps = stamps            # per-op timestamps, clock mode
        self.live = live                # fetched, incomplete instances
        self._key = None
        self._hash = None

    def key(self):
        k = self._key
        if k is None:
            # counts and live are functions of end plus control flow state
            k = (self.pcs, self.stalled, self.regs, self.mems, self.storevals,
                 self.end, self.lastw, self.deps, self.preds, self.ordvals,
                 self.stamps)
            self._key = k
        return k

    def __eq__(self, other):
        if not isinstance(other, MachineState):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        h = self._hash
        if h is None:
            h = self._hash = hash(self.key())
        return h


class Machine:
    """Compiled transition context for one program under one bounds config.

    mode: "plain" keeps no order bookkeeping, "clock" stamps every
    operation with a dense timestamp, "ordbits" maintains the defining
    predicate bits supplied through order_hook (a per-operation list of
    (bit, lhs op) pairs from the constraint engine).
    """

    def __init__(self, program: Program, bounds: BoundsConfig,
                 mode: str = "clock", order_hook=None):
        if mode not in ("plain", "clock", "ordbits"):
            raise ValueError(f"unknown mode {mode!r}")
        self.program = program
        self.bounds = bounds
        self.n = program.n
        self.mode = mode
        self.order_hook = order_hook
        self.instances = enumerate_instances(program, bounds)
        self.inst_index = {(i.p, i.idx, i.j): t
                           for t, i in enumerate(self.instances)}

        reg_pos = [{r: i for i, r in enumerate(names)}
                   for names in program.registers]
        loc_pos = {v: i for i, v in enumerate(program.shared_vars)}
        self.reg_pos = reg_pos
        self.loc_pos = loc_pos

        # per-instruction compiled data, shared by that label's instances
        self._ins_eval = {}   # (p, idx) -> term closure
        self._ins_regs = {}   # (p, idx) -> positions read by the terms
        for p, body in enumerate(program.processes):
            for idx, ins in enumerate(body):
                raw = ins.raw
                term = None
                if isinstance(raw, (Move, Store)):
                    term = raw.term
                elif isinstance(raw, Jump):
                    term = raw.cond
                elif isinstance(raw, Assert):
                    term = raw.cond
                if term is not None:
                    self._ins_eval[(p, idx)] = _compile_term(term, reg_pos[p])
                    self._ins_regs[(p, idx)] = tuple(sorted(
                        reg_pos[p][r] for r in term_registers(term)))
                else:
                    self._ins_regs[(p, idx)] = ()

        # ground operations, canonical order per instance
        self.op_kind: list[int] = []
        self.op_inst: list[int] = []
        self.op_dest: list[int | None] = []
        self.fe_of: list[int] = []
        self.is_of: list[int] = []
        self.ex_of: list[int | None] = []
        self.re_of: list[tuple[int, ...] | None] = []
        self.inst_ops: list[tuple[int, ...]] = []
        store_slots: dict[int, int] = {}
        for t, inst in enumerate(self.instances):
            raw = inst.instr.raw
            ops = []

            def add(kind, dest=None):
                self.op_kind.append(kind)
                self.op_inst.append(t)
                self.op_dest.append(dest)
                ops.append(len(self.op_kind) - 1)
                return ops[-1]

            self.fe_of.append(add(KF))
            self.is_of.append(add(KI))
            self.ex_of.append(add(KX) if isinstance(raw, (Load, Store)) else None)
            if isinstance(raw, Store):
                self.re_of.append(tuple(add(KR, k) for k in range(self.n)))
                store_slots[t] = len(store_slots)
            else:
                self.re_of.append(None)
            self.inst_ops.append(tuple(ops))
        self.nops = len(self.op_kind)
        self.store_slot = store_slots
        self.nstores = len(store_slots)
        self.op_bit = [1 << o for o in range(self.nops)]
        self.inst_mask = []
        for ops in self.inst_ops:
            m = 0
            for o in ops:
                m |= self.op_bit[o]
            self.inst_mask.append(m)

        # atomic blocks: id -> contiguous index range per process
        self.blocks: dict[str, tuple[int, int, int]] = {}
        for p, body in enumerate(program.processes):
            for idx, ins in enumerate(body):
                if ins.block is not None:
                    lo, hi = idx, idx
                    if ins.block in self.blocks:
                        _, lo, hi = self.blocks[ins.block]
                        hi = idx
                    self.blocks[ins.block] = (p, min(lo, idx), hi)

    # -- identities ---------------------------------------------------------

    def op_key(self, o: int):
        """Stable external name: (kind, p, idx, j, dest)."""
        inst = self.instances[self.op_inst[o]]
        return (KIND_NAMES[self.op_kind[o]], inst.p, inst.idx, inst.j,
                self.op_dest[o])

    def op_key_index(self) -> dict:
        return {self.op_key(o): o for o in range(self.nops)}

    def op_text(self, o: int) -> str:
        inst = self.instances[self.op_inst[o]]
        dest = self.op_dest[o]
        tail = f",{dest}" if dest is not None else ""
        return f"{KIND_NAMES[self.op_kind[o]]}({inst.p},{inst.label},{inst.j}{tail})"

    # -- states -------------------------------------------------------------

    def initial_state(self) -> MachineState:
        prog = self.program
        return MachineState(
            pcs=tuple(0 for _ in range(self.n)),
            stalled=0,
            counts=tuple(tuple(0 for _ in body) for body in prog.processes),
            regs=tuple(tuple(0 for _ in names) for names in prog.registers),
            mems=tuple(tuple(0 for _ in prog.shared_vars) for _ in range(self.n)),
            storevals=(None,) * self.nstores,
            end=0,
            lastw=tuple(tuple(-1 for _ in names) for names in prog.registers),
            deps=(),
            preds=(),
            ordvals=0 if self.mode == "ordbits" else None,
            stamps=(-1,) * self.nops if self.mode == "clock" else None,
            live=(),
        )

    def fetch_candidate(self, state: MachineState, p: int) -> int | None:
        """Op id of the next fetch on p, None if stalled, done or truncated."""
        if state.stalled >> p & 1:
            return None
        pc = state.pcs[p]
        if pc >= len(self.program.processes[p]):
            return None
        j = state.counts[p][pc]
        if j >= self.bounds.supremum(p):
            return None
        return self.fe_of[self.inst_index[(p, pc, j)]]

    def fetch_truncated(self, state: MachineState, p: int) -> bool:
        """True when p's next fetch exists but its branch counter is exhausted."""
        if state.stalled >> p & 1:
            return False
        pc = state.pcs[p]
        return (pc < len(self.program.processes[p])
                and state.counts[p][pc] >= self.bounds.supremum(p))

    def any_truncated(self, state: MachineState) -> bool:
        return any(self.fetch_truncated(state, p) for p in range(self.n))

    def structurally_enabled(self, state: MachineState) -> list[int]:
        """Enabled ground operations in (process, idx, j, kind, dest) order."""
        out = []
        end = state.end
        for p in range(self.n):
            fe = self.fetch_candidate(state, p)
            if fe is not None and not end >> fe & 1:
                out.append(fe)
        for t, dep_ops in state.deps:
            ok = True
            for o in dep_ops:
                if not end >> o & 1:
                    ok = False
                    break
            if ok:
                out.append(self.is_of[t])
        for t in state.live:
            if not end >> self.is_of[t] & 1:
                continue
            ex = self.ex_of[t]
            if ex is not None and not end >> ex & 1:
                out.append(ex)
                continue
            res = self.re_of[t]
            if res is not None:
                for o in res:
                    if not end >> o & 1:
                        out.append(o)
        inst = self.instances
        out.sort(key=lambda o: (inst[self.op_inst[o]].p,
                                inst[self.op_inst[o]].idx,
                                inst[self.op_inst[o]].j,
                                self.op_kind[o], self.op_dest[o] or 0))
        return out

    def is_terminal(self, state: MachineState) -> bool:
        return not self.structurally_enabled(state)

    def op_structurally_enabled(self, state: MachineState, op: int) -> bool:
        if state.end >> op & 1:
            return False
        kind = self.op_kind[op]
        t = self.op_inst[op]
        if kind == KF:
            return self.fetch_candidate(state, self.instances[t].p) == op
        if kind == KI:
            for it, dep_ops in state.deps:
                if it == t:
                    return all(state.end >> o & 1 for o in dep_ops)
            return False
        if kind == KX:
            return bool(state.end >> self.is_of[t] & 1)
        ex = self.ex_of[t]
        return ex is not None and bool(state.end >> ex & 1)

    def op_choices(self, op: int, state: MachineState) -> tuple:
        """Choice values this op forks on: () none, else tuple of bools."""
        t = self.op_inst[op]
        ins = self.instances[t].instr
        if not isinstance(ins.raw, Jump):
            return ()
        kind = self.op_kind[op]
        if kind == KF:
            if not ins.is_choose_jump() and ins.block is None \
                    and self.bounds.predicts(ins.label):
                return (True, False)
        elif kind == KI:
            if ins.is_choose_jump():
                return (True, False)
        return ()

    # -- transition application ---------------------------------------------

    def apply(self, state: MachineState, op: int, choice: bool | None = None,
              predict: bool = True):
        """Successor of performing op, or None when a prediction fails.

        Returns (state, assert_failed). predict=False suppresses jump
        prediction at fetch, used when fetch and issue run fused so the
        jump resolves directly.
        """
        t = self.op_inst[op]
        inst = self.instances[t]
        kind = self.op_kind[op]
        p = inst.p
        raw = inst.instr.raw

        pcs = state.pcs
        stalled = state.stalled
        counts = state.counts
        regs = state.regs
        mems = state.mems
        storevals = state.storevals
        lastw = state.lastw
        deps = state.deps
        preds = state.preds
        live = state.live
        failed = False

        if kind == KF:
            row = list(counts[p])
            row[inst.idx] += 1
            counts = counts[:p] + (tuple(row),) + counts[p + 1:]
            dep_ops = tuple(sorted({lastw[p][i] for i in
                                    self._ins_regs[(p, inst.idx)]
                                    if lastw[p][i] >= 0}))
            deps = deps + ((t, dep_ops),)
            if isinstance(raw, (Move, Load)):
                wop = self.is_of[t] if isinstance(raw, Move) else self.ex_of[t]
                rp = self.reg_pos[p][raw.reg]
                row = list(lastw[p])
                row[rp] = wop
                lastw = lastw[:p] + (tuple(row),) + lastw[p + 1:]
            if isinstance(raw, Jump):
                if predict and not inst.instr.is_choose_jump() \
                        and inst.instr.block is None \
                        and self.bounds.predicts(inst.instr.label):
                    # predicted: choose a direction now, validate at issue
                    target = self.program.label_index[p][raw.target]
                    pc = target if choice else inst.idx + 1
                    pcs = pcs[:p] + (pc,) + pcs[p + 1:]
                    preds = preds + ((t, bool(choice)),)
                else:
                    stalled |= 1 << p
            else:
                pcs = pcs[:p] + (inst.idx + 1,) + pcs[p + 1:]
            live = tuple(sorted(live + (t,)))
        elif kind == KI:
            deps = tuple(e for e in deps if e[0] != t)
            if isinstance(raw, Move):
                v = self._ins_eval[(p, inst.idx)](regs[p])
                rp = self.reg_pos[p][raw.reg]
                row = list(regs[p])
                row[rp] = v
                regs = regs[:p] + (tuple(row),) + regs[p + 1:]
            elif isinstance(raw, Store):
                v = self._ins_eval[(p, inst.idx)](regs[p])
                slot = self.store_slot[t]
                storevals = storevals[:slot] + (v,) + storevals[slot + 1:]
            elif isinstance(raw, Jump):
                if inst.instr.is_choose_jump():
                    taken = bool(choice)
                else:
                    cond = self._ins_eval[(p, inst.idx)](regs[p])
                    taken = cond != 0
                if stalled >> p & 1:
                    target = self.program.label_index[p][raw.target]
                    pc = target if taken else inst.idx + 1
                    pcs = pcs[:p] + (pc,) + pcs[p + 1:]
                    stalled &= ~(1 << p)
                else:
                    # predicted at fetch; discard on mispredict
                    guess = None
                    for it, g in preds:
                        if it == t:
                            guess = g
                            break
                    if guess != taken:
                        return None
                    preds = tuple(e for e in preds if e[0] != t)
            elif isinstance(raw, Assert):
                failed = self._ins_eval[(p, inst.idx)](regs[p]) == 0
        elif kind == KX:
            if isinstance(raw, Load):
                rp = self.reg_pos[p][raw.reg]
                v = mems[p][self.loc_pos[raw.var]]
                row = list(regs[p])
                row[rp] = v
                regs = regs[:p] + (tuple(row),) + regs[p + 1:]
            # a store's execute only publishes its pending value to reflects
        else:
            k = self.op_dest[op]
            slot = self.store_slot[t]
            loc = self.loc_pos[raw.var]
            row = list(mems[k])
            row[loc] = storevals[slot]
            mems = mems[:k] + (tuple(row),) + mems[k + 1:]
            left = [o for o in self.re_of[t]
                    if o != op and not state.end >> o & 1]
            if not left:
                storevals = storevals[:slot] + (None,) + storevals[slot + 1:]

        end = state.end | self.op_bit[op]

        mask = self.inst_mask[t]
        if (end & mask) == mask:
            live = tuple(x for x in live if x != t)

        ordvals = state.ordvals
        stamps = state.stamps
        if self.mode == "clock":
            stamp = state.end.bit_count()
            stamps = stamps[:op] + (stamp,) + stamps[op + 1:]
        elif self.mode == "ordbits" and self.order_hook is not None:
            # lhs must have performed strictly before op, so test the pre-state
            for bit, lhs in self.order_hook[op]:
                if state.end >> lhs & 1:
                    ordvals |= bit

        return MachineState(pcs, stalled, counts, regs, mems, storevals, end,
                            lastw, deps, preds, ordvals, stamps, live), failed

    # -- composite transitions ----------------------------------------------

    def atomic_step(self, state: MachineState, block_id: str, guard_ok=None):
        """All successors of running the whole atomic block indivisibly.

        Returns (results, truncated) where results is a list of
        (state, failed, choices, ops) per feasible internal control path.
        Within the block every instruction performs Fe, Is, Ex and all
        reflects immediately, so block effects hit all memories at once.
        """
        p, lo, hi = self.blocks[block_id]
        results = []
        truncated = False
        # worklist of (state, idx, choices taken so far, failed flag, ops)
        work = [(state, lo, (), False, ())]
        while work:
            st, idx, choices, failed, done = work.pop()
            if idx > hi or idx >= len(self.program.processes[p]):
                results.append((st, failed, choices, done))
                continue
            j = st.counts[p][idx]
            if j >= self.bounds.supremum(p):
                truncated = True
                continue
            t = self.inst_index[(p, idx, j)]
            ins = self.instances[t].instr
            raw = ins.raw
            forks = ((True,), (False,)) if isinstance(raw, Jump) \
                and ins.is_choose_jump() else ((None,),)
            for (choice,) in forks:
                cur = st
                ok = True
                fail_here = failed
                for op in self.inst_ops[t]:
                    if not self.op_structurally_enabled(cur, op):
                        ok = False
                        break
                    if guard_ok is not None and not guard_ok(cur, op):
                        ok = False
                        break
                    res = self.apply(cur, op, choice)
                    if res is None:
                        ok = False
                        break
                    cur, f = res
                    fail_here = fail_here or f
                if ok:
                    work.append((cur, cur.pcs[p], choices + ((choice,) if
                                 choice is not None else ()), fail_here,
                                 done + self.inst_ops[t]))
        return results, truncated

    def stage_ops(self, t: int, stage: frozenset[str]) -> tuple[int, ...]:
        ops = []
        if "Fe" in stage:
            ops.append(self.fe_of[t])
        if "Is" in stage:
            ops.append(self.is_of[t])
        if "Ex" in stage and self.ex_of[t] is not None:
            ops.append(self.ex_of[t])
        if "Re" in stage and self.re_of[t] is not None:
            ops.extend(self.re_of[t])
        return tuple(ops)

    def stage_step(self, state: MachineState, t: int, stage: frozenset[str],
                   choice: bool | None = None, guard_ok=None):
        """Perform the instance's operations of one stage consecutively.

        Returns (state, failed) or None when any inner operation is
        structurally blocked, guard blocked, or infeasible. A jump whose
        fetch and issue share the stage resolves directly, without a
        prediction.
        """
        direct = "Fe" in stage and "Is" in stage
        cur = state
        failed_any = False
        for op in self.stage_ops(t, stage):
            if not self.op_structurally_enabled(cur, op):
                return None
            if guard_ok is not None and not guard_ok(cur, op):
                return None
            res = self.apply(cur, op, choice,
                             predict=not (direct and self.op_kind[op] == KF))
            if res is None:
                return None
            cur, failed = res
            failed_any = failed_any or failed
        return cur, failed_any

    def stage_choices(self, state: MachineState, t: int,
                      stage: frozenset[str]) -> tuple:
        """Choice values a stage step of this instance forks on."""
        ins = self.instances[t].instr
        if not isinstance(ins.raw, Jump):
            return ()
        if ins.is_choose_jump():
            return (True, False) if "Is" in stage else ()
        if ("Fe" in stage and "Is" not in stage and ins.block is None
                and self.bounds.predicts(ins.label)):
            return (True, False)
        return ()
