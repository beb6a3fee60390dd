"""Exhaustive bounded exploration with optional pruning optimizations.

The search walks the transition system depth first, deduplicating states
by their canonical key. Optimization layers:

  guards      refuse a transition that would permanently violate a rule
  predicates  replace per-operation timestamps with one bit per ground
              atom, collapsing states that differ only in order history
  stages      perform an instance's operations one stage at a time

Atomic blocks always run as one indivisible transition regardless of the
optimization mix. Assertion failures and terminals are judged against
full admissibility; a failing assertion on an inadmissible prefix is
filtered, never reported.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

from .constraints import ConstraintEngine
from .lang import Jump, Store
from .mcm import OP_KINDS
from .semantics import KF, KI, KX, Machine


@dataclass
class ExploreOptions:
    use_guards: bool = False
    use_order_predicates: bool = False
    use_stages: bool = False
    stop_at_first_violation: bool = True
    state_limit: int | None = None
    depth_limit: int | None = None
    workers: int = 1


@dataclass
class Counterexample:
    steps: list          # serializable transition descriptors
    lines: list[str]     # one rendered line per ground operation
    final_regs: tuple

    def text(self) -> str:
        return "\n".join(self.lines)


@dataclass
class Report:
    verdict: str = "pass"
    states_stored: int = 0
    transitions: int = 0
    terminal_states: int = 0
    residual_filtered: int = 0
    filtered_asserts: int = 0
    dead_ends: int = 0
    max_depth: int = 0
    elapsed: float = 0.0
    truncated: bool = False
    counterexample: Counterexample | None = None
    final_regs: frozenset = field(default_factory=frozenset)


class _Search:
    def __init__(self, program, spec, bounds, options: ExploreOptions):
        self.options = options
        mode = "ordbits" if options.use_order_predicates else "clock"
        self.machine = Machine(program, bounds, mode=mode)
        self.engine = ConstraintEngine(self.machine, spec)
        if mode == "ordbits":
            self.machine.order_hook = self.engine.order_hook
        self.guard = self.engine.guard_ok if options.use_guards else None
        self.stages = None
        if options.use_stages and spec.stages is not None:
            self.stages = spec.stages.stages
            self.stage_of_kind = {}
            for si, group in enumerate(self.stages):
                for kind in group:
                    self.stage_of_kind[OP_KINDS.index(kind)] = si

    # -- successor generation ------------------------------------------------

    def expand(self, state):
        """All transitions from state.

        Returns (entries, truncated) with entries a list of
        (desc, successor, assert_failed) in deterministic order. desc is
        a serializable descriptor replayable by apply_desc.
        """
        m = self.machine
        out = []
        truncated = False
        if self.stages is None:
            for o in m.structurally_enabled(state):
                t = m.op_inst[o]
                inst = m.instances[t]
                if m.op_kind[o] == KF and inst.instr.block is not None:
                    truncated |= self._block(state, inst, out)
                    continue
                if self.guard is not None and not self.guard(state, o):
                    continue
                key = (inst.p, inst.idx, inst.j, m.op_kind[o],
                       m.op_dest[o] if m.op_dest[o] is not None else -1)
                for rank, c in enumerate(m.op_choices(o, state) or (None,)):
                    res = m.apply(state, o, c)
                    if res is None:
                        continue
                    st, failed = res
                    out.append((key + (rank,), ("op", m.op_key(o), c),
                                st, failed))
        else:
            for t in self._stage_candidates(state):
                inst = m.instances[t]
                if inst.instr.block is not None:
                    if state.end >> m.fe_of[t] & 1:
                        continue  # block instances complete atomically
                    truncated |= self._block(state, inst, out)
                    continue
                first = next(o for o in m.inst_ops[t]
                             if not state.end >> o & 1)
                si = self.stage_of_kind[m.op_kind[first]]
                stage = self.stages[si]
                key = (inst.p, inst.idx, inst.j, m.op_kind[first], -1)
                for rank, c in enumerate(
                        m.stage_choices(state, t, stage) or (None,)):
                    res = m.stage_step(state, t, stage, c, self.guard)
                    if res is None:
                        continue
                    st, failed = res
                    out.append((key + (rank,),
                                ("stage", (inst.p, inst.idx, inst.j), si, c),
                                st, failed))
        out.sort(key=lambda e: e[0])
        return [e[1:] for e in out], truncated

    def _stage_candidates(self, state):
        m = self.machine
        cands = []
        for p in range(m.n):
            fe = m.fetch_candidate(state, p)
            if fe is not None:
                cands.append(m.op_inst[fe])
        cands.extend(state.live)
        return cands

    def _block(self, state, inst, out):
        m = self.machine
        block_id = inst.instr.block
        results, truncated = m.atomic_step(state, block_id, self.guard)
        key = (inst.p, inst.idx, inst.j, -1, -1)
        for rank, (st, failed, choices, _ops) in enumerate(results):
            out.append((key + (rank,), ("block", block_id, choices),
                        st, failed))
        return truncated

    # -- descriptor replay ---------------------------------------------------

    def apply_desc(self, state, desc, trail=None):
        """Re-apply one transition descriptor.

        Returns (state, failed) or None when the descriptor does not fit
        the state. With trail a list, appends (op, pre, post, choice) for
        every ground operation performed.
        """
        m = self.machine
        kind = desc[0]
        if kind == "op":
            _, op_key, choice = desc
            o = m.op_key_index().get(op_key)
            if o is None or not m.op_structurally_enabled(state, o):
                return None
            res = m.apply(state, o, choice)
            if res is None:
                return None
            if trail is not None:
                trail.append((o, state, res[0], choice))
            return res
        if kind == "stage":
            _, inst_key, si, choice = desc
            t = m.inst_index.get(inst_key)
            if t is None or self.stages is None or si >= len(self.stages):
                return None
            stage = self.stages[si]
            if trail is None:
                return m.stage_step(state, t, stage, choice)
            direct = "Fe" in stage and "Is" in stage
            cur = state
            failed_any = False
            for op in m.stage_ops(t, stage):
                if not m.op_structurally_enabled(cur, op):
                    return None
                res = m.apply(cur, op, choice,
                              predict=not (direct and m.op_kind[op] == KF))
                if res is None:
                    return None
                nxt, failed = res
                trail.append((op, cur, nxt, choice))
                cur = nxt
                failed_any = failed_any or failed
            return cur, failed_any
        if kind == "block":
            _, block_id, choices = desc
            if block_id not in m.blocks:
                return None
            results, _ = m.atomic_step(state, block_id)
            for st, failed, ch, ops in results:
                if ch != tuple(choices):
                    continue
                if trail is not None:
                    cur = state
                    chooser = list(choices)
                    for op in ops:
                        t = m.op_inst[op]
                        ins = m.instances[t].instr
                        c = None
                        if (m.op_kind[op] == KI and ins.is_choose_jump()
                                and chooser):
                            c = chooser.pop(0)
                        nxt, _f = m.apply(cur, op, c)
                        trail.append((op, cur, nxt, c))
                        cur = nxt
                return st, failed
            return None
        return None

    def render_steps(self, descs):
        """Op-level counterexample lines for a descriptor path."""
        m = self.machine
        s = m.initial_state()
        lines = []
        n = 0
        failed_any = False
        for desc in descs:
            trail = []
            res = self.apply_desc(s, desc, trail)
            if res is None:
                raise ValueError("descriptor path does not replay")
            for op, pre, post, choice in trail:
                lines.append(f"step {n}: {m.op_text(op)} -> "
                             f"{_delta(m, op, pre, post, choice)}")
                n += 1
            s, failed = res
            failed_any = failed_any or failed
        return lines, s, failed_any


def _delta(m, op, pre, post, choice):
    inst = m.instances[m.op_inst[op]]
    p = inst.p
    raw = inst.instr.raw
    kind = m.op_kind[op]
    if kind == KF:
        if post.stalled >> p & 1:
            return "stalled for issue"
        note = ""
        if isinstance(raw, Jump) and choice is not None:
            note = " predicted" + (" taken" if choice else " not taken")
        return f"pc[{p}]={post.pcs[p]}{note}"
    if kind == KI:
        name = type(raw).__name__
        if name == "Move":
            rp = m.reg_pos[p][raw.reg]
            return f"{raw.reg}={post.regs[p][rp]}"
        if name == "Store":
            slot = m.store_slot[m.op_inst[op]]
            return f"buffered {raw.var}={post.storevals[slot]}"
        if name == "Jump":
            if pre.stalled >> p & 1 or choice is not None:
                return f"pc[{p}]={post.pcs[p]}"
            return "prediction confirmed"
        if name == "Assert":
            val = m._ins_eval[(p, inst.idx)](pre.regs[p])
            return "assert holds" if val != 0 else "assert FAILS"
        return "issued"
    if kind == KX:
        if isinstance(raw, Store):
            return "executed"
        rp = m.reg_pos[p][raw.reg]
        return f"{raw.reg}={post.regs[p][rp]}"
    k = m.op_dest[op]
    loc = raw.var
    return f"mem[{k}].{loc}={post.mems[k][m.loc_pos[loc]]}"


def explore(program, spec, bounds, options: ExploreOptions | None = None):
    """Exhaustively check the program against the model. Returns a Report."""
    options = options or ExploreOptions()
    search = _Search(program, spec, bounds, options)
    if options.workers > 1:
        return _run(search, options, parallel=True)
    return _run(search, options, parallel=False)


def _run(search: _Search, options: ExploreOptions, parallel: bool):
    m = search.machine
    eng = search.engine
    pruned = search.guard is not None
    rep = Report()
    t0 = time.monotonic()

    init = m.initial_state()
    visited = {init.key(): (None, None)}
    regsets = set()
    stop = threading.Event()
    cut = [False]
    lock = threading.Lock()
    violation = []  # (parent_key, desc)

    def judge_assert(parent, desc, post):
        if eng.admissible(post):
            with lock:
                if not violation:
                    violation.append((parent, desc, post))
            if options.stop_at_first_violation:
                stop.set()
        else:
            with lock:
                if pruned:
                    rep.residual_filtered += 1
                else:
                    rep.filtered_asserts += 1

    def process(state, depth):
        key = state.key()
        with lock:
            rep.max_depth = max(rep.max_depth, depth)
            if m.any_truncated(state):
                rep.truncated = True
        if options.depth_limit is not None and depth >= options.depth_limit \
                and not m.is_terminal(state):
            cut[0] = True
            return []
        entries, trunc = search.expand(state)
        pushes = []
        with lock:
            if trunc:
                rep.truncated = True
        if not entries:
            with lock:
                if m.is_terminal(state):
                    if pruned and not eng.admissible(state):
                        rep.residual_filtered += 1
                    else:
                        rep.terminal_states += 1
                        if eng.admissible(state):
                            regsets.add(state.regs)
                else:
                    rep.dead_ends += 1
            return []
        for desc, post, failed in entries:
            with lock:
                rep.transitions += 1
            if failed:
                judge_assert(key, desc, post)
                continue
            pk = post.key()
            with lock:
                if pk in visited:
                    continue
                visited[pk] = (key, desc)
                if options.state_limit is not None \
                        and len(visited) > options.state_limit:
                    cut[0] = True
                    stop.set()
                    return pushes
            pushes.append((post, depth + 1))
        return pushes

    if not parallel:
        stack = [(init, 0)]
        while stack and not stop.is_set():
            state, depth = stack.pop()
            stack.extend(reversed(process(state, depth)))
    else:
        pending = [(init, 0)]
        idle = [0]
        cond = threading.Condition()

        def worker():
            while True:
                with cond:
                    while not pending and not stop.is_set():
                        idle[0] += 1
                        if idle[0] == options.workers:
                            stop.set()
                            cond.notify_all()
                            idle[0] -= 1
                            return
                        cond.wait()
                        idle[0] -= 1
                    if stop.is_set() and not pending:
                        return
                    state, depth = pending.pop()
                pushes = process(state, depth)
                if pushes:
                    with cond:
                        pending.extend(pushes)
                        cond.notify_all()
                if stop.is_set():
                    with cond:
                        cond.notify_all()
                    return

        threads = [threading.Thread(target=worker)
                   for _ in range(options.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    if violation:
        parent, desc, post = violation[0]
        descs = [desc]
        k = parent
        while True:
            pk, d = visited[k]
            if d is None:
                break
            descs.append(d)
            k = pk
        descs.reverse()
        lines, final, _ = search.render_steps(descs)
        rep.counterexample = Counterexample(
            steps=[_desc_jsonable(d) for d in descs],
            lines=lines, final_regs=final.regs)
        rep.verdict = "violation"
    elif cut[0]:
        rep.verdict = "resource-bound"
    elif rep.truncated:
        rep.verdict = "bound-exhausted-pass"
    else:
        rep.verdict = "pass"
    rep.states_stored = len(visited)
    rep.final_regs = frozenset(regsets)
    rep.elapsed = time.monotonic() - t0
    return rep


def _desc_jsonable(desc):
    if desc[0] == "op":
        return ["op", list(desc[1]), desc[2]]
    if desc[0] == "stage":
        return ["stage", list(desc[1]), desc[2], desc[3]]
    return ["block", desc[1], list(desc[2])]


def desc_from_jsonable(item):
    kind = item[0]
    if kind == "op":
        return ("op", tuple(item[1]), item[2])
    if kind == "stage":
        return ("stage", tuple(item[1]), item[2], item[3])
    if kind == "block":
        return ("block", item[1], tuple(bool(c) for c in item[2]))
    raise ValueError(f"unknown step kind {kind!r}")


def replay(program, spec, bounds, steps, options: ExploreOptions | None = None):
    """Validate a recorded counterexample against base semantics.

    Returns (status, lines) with status one of:
      confirmed   every step applies, the last one fails its assertion,
                  and the final state is admissible
      filtered    the path replays and fails its assertion, but it is
                  inadmissible under this model
      corrupt     a step does not apply, or no assertion fails
    """
    options = options or ExploreOptions()
    search = _Search(program, spec, bounds, options)
    m = search.machine
    s = m.initial_state()
    lines = []
    n = 0
    failed_last = False
    for i, desc in enumerate(steps):
        trail = []
        res = search.apply_desc(s, desc, trail)
        if res is None:
            return "corrupt", lines + [f"step {n}: does not apply"]
        for op, pre, post, choice in trail:
            lines.append(f"step {n}: {m.op_text(op)} -> "
                         f"{_delta(m, op, pre, post, choice)}")
            n += 1
        s, failed_last = res
    if not failed_last:
        return "corrupt", lines + ["no assertion failure at the end"]
    if not search.engine.admissible(s):
        return "filtered", lines
    return "confirmed", lines


def count_complete_traces(program, spec, bounds) -> int:
    """Number of complete admissible transition sequences.

    Atomic blocks count as single steps; assertion outcomes are ignored.
    Intended for small programs, the count grows factorially.
    """
    search = _Search(program, spec, bounds,
                     ExploreOptions(use_order_predicates=True))
    m = search.machine
    eng = search.engine
    memo: dict = {}

    def count(state):
        key = state.key()
        got = memo.get(key)
        if got is not None:
            return got
        entries, _ = search.expand(state)
        if not entries:
            total = 1 if m.is_terminal(state) and eng.admissible(state) else 0
        else:
            total = sum(count(post) for _, post, _ in entries)
        memo[key] = total
        return total

    import sys
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 4 * m.nops + 1000))
    try:
        return count(m.initial_state())
    finally:
        sys.setrecursionlimit(old)


def final_register_states(program, spec, bounds) -> frozenset:
    """Register valuations over all admissible complete executions."""
    rep = explore(program, spec, bounds, ExploreOptions(
        use_order_predicates=True, stop_at_first_violation=False))
    return rep.final_regs


MODE_SETS = (
    ("baseline", ExploreOptions()),
    ("guards", ExploreOptions(use_guards=True)),
    ("guards+predicates", ExploreOptions(use_guards=True,
                                         use_order_predicates=True)),
    ("guards+predicates+stages", ExploreOptions(use_guards=True,
                                                use_order_predicates=True,
                                                use_stages=True)),
)


def state_count_comparison(program, spec, bounds):
    """Reports for the optimization ladder, weakest to strongest."""
    out = []
    for label, opts in MODE_SETS:
        opts = ExploreOptions(**{**opts.__dict__,
                                 "stop_at_first_violation": False})
        out.append((label, explore(program, spec, bounds, opts)))
    return out
