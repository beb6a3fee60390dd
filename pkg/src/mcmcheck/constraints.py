"""Grounding of order-constraint rules and the runtime admissibility engine.

Grounding instantiates each quantified rule over concrete instruction
instances and process ids, producing implications between order atoms on
ground operations. An operation is named by its key
(kind, process, instruction index, occurrence, destination-or-None).

A static feasibility pass drops ground rules whose condition mentions an
order that no execution can produce: reversed lifecycle order inside one
instance, fetch order against the control-flow graph, or occurrences past
what the per-process supremum and the graph allow. Dropping such rules
never changes which executions are admissible, it only shrinks the atom
set the runtime engine has to track.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

from .lang import Assert, Const, Jump, Load, Move, Nop, Store
from .mcm import (KIND_ORDER, DestAll, DestProcOf, DestVar, Distinct, HasAttr,
                  KindIs, LabelIs, LocEq, McmSpec, OrderAtom, ProcEq, ProcNe)

# (kind, p, idx, j, dest) with dest None outside Re
OpKey = tuple

_RAW_KIND = {Move: "move", Load: "load", Store: "store", Jump: "jump",
             Nop: "nop", Assert: "assert"}


@dataclass(frozen=True)
class GroundRule:
    name: str
    when: tuple[tuple[OpKey, OpKey], ...]
    then: tuple[tuple[OpKey, OpKey], ...]


def _kind_of(instr) -> str:
    return _RAW_KIND[type(instr.raw)]


def _loc_of(instr) -> str | None:
    raw = instr.raw
    if isinstance(raw, (Load, Store)):
        return raw.var
    return None


def _opkey_sort(key: OpKey):
    kind, p, idx, j, dest = key
    return (p, idx, j, KIND_ORDER[kind], -1 if dest is None else dest)


def atom_sort_key(atom):
    return (_opkey_sort(atom[0]), _opkey_sort(atom[1]))


class _Feasibility:
    """Static order possibility over instruction instances.

    Built only from the instance list: bodies, suprema and the per-process
    control-flow graph are reconstructed from it.
    """

    def __init__(self, instances):
        bodies: dict[int, dict[int, object]] = {}
        sup: dict[int, int] = {}
        for inst in instances:
            bodies.setdefault(inst.p, {})[inst.idx] = inst.instr
            sup[inst.p] = max(sup.get(inst.p, 0), inst.j + 1)
        self.sup = sup

        self._succ: dict[int, list[tuple[int, ...]]] = {}
        for p, body in bodies.items():
            size = len(body)
            labels = {body[i].label: i for i in range(size)}
            succ = []
            for idx in range(size):
                instr = body[idx]
                raw = instr.raw
                nxt = (idx + 1,) if idx + 1 < size else ()
                if not isinstance(raw, Jump):
                    succ.append(nxt)
                    continue
                target = (labels[raw.target],)
                if instr.is_choose_jump():
                    succ.append(tuple(sorted({*target, *nxt})))
                elif isinstance(raw.cond, Const):
                    succ.append(target if raw.cond.value != 0 else nxt)
                else:
                    succ.append(tuple(sorted({*target, *nxt})))
            self._succ[p] = succ

        # reach_from[p][idx]: indices reachable along one or more edges
        self._reach_from: dict[int, list[frozenset[int]]] = {}
        for p, succ in self._succ.items():
            rf = []
            for start in range(len(succ)):
                seen: set[int] = set()
                work = list(succ[start])
                while work:
                    i = work.pop()
                    if i in seen:
                        continue
                    seen.add(i)
                    work.extend(succ[i])
                rf.append(frozenset(seen))
            self._reach_from[p] = rf

        self._maxcount: dict[tuple[int, int], int] = {}
        for p, succ in self._succ.items():
            rf = self._reach_from[p]
            for idx in range(len(succ)):
                if idx != 0 and idx not in rf[0]:
                    self._maxcount[(p, idx)] = 0
                elif idx in rf[idx]:
                    self._maxcount[(p, idx)] = sup[p]
                else:
                    self._maxcount[(p, idx)] = 1

    def occurs(self, key: OpKey) -> bool:
        _, p, idx, j, _ = key
        return j < self._maxcount[(p, idx)]

    def possible(self, a: OpKey, b: OpKey) -> bool:
        """Over-approximation: can a perform strictly before b."""
        if a == b:
            return False
        if not (self.occurs(a) and self.occurs(b)):
            return False
        ka, pa, ia, ja, _ = a
        kb, pb, ib, jb, _ = b
        if (pa, ia, ja) == (pb, ib, jb):
            if ka == kb:
                return True  # reflects of one store, destinations differ
            return KIND_ORDER[ka] < KIND_ORDER[kb]
        if ka == "Fe" and kb == "Fe" and pa == pb:
            if ia == ib:
                return ja < jb
            return ib in self._reach_from[pa][ia]
        return True


def _unary_ok(pred, instance) -> bool:
    if isinstance(pred, KindIs):
        return _kind_of(instance.instr) == pred.kind
    if isinstance(pred, HasAttr):
        return pred.attr in instance.instr.attrs
    if isinstance(pred, LabelIs):
        return instance.label == pred.label
    raise AssertionError(pred)


def _atom_keys(atom: OrderAtom, env, procenv, n: int):
    """Ground one atom, expanding `*` destinations conjunctively.

    Returns a list of key pairs, or None when a referenced operation does
    not exist for the assigned instance (wrong kind for Ex or Re).
    """
    sides = []
    for ref in (atom.lhs, atom.rhs):
        inst = env[ref.var]
        raw = inst.instr.raw
        if ref.kind == "Ex" and not isinstance(raw, (Load, Store)):
            return None
        if ref.kind == "Re":
            if not isinstance(raw, Store):
                return None
            if isinstance(ref.dest, DestAll):
                dests = range(n)
            elif isinstance(ref.dest, DestVar):
                dests = (procenv[ref.dest.name],)
            else:
                dests = (env[ref.dest.var].p,)
        else:
            dests = (None,)
        sides.append([(ref.kind, inst.p, inst.idx, inst.j, d) for d in dests])
    return [(l, r) for l in sides[0] for r in sides[1]]


def _ground_one(rule, instances, feas: _Feasibility, n: int):
    unary = {}
    binary = []
    proc_distinct = []
    for pred in rule.where:
        if isinstance(pred, (KindIs, HasAttr, LabelIs)):
            unary.setdefault(pred.var, []).append(pred)
        elif isinstance(pred, Distinct) and pred.a in rule.proc_vars:
            proc_distinct.append(pred)
        else:
            binary.append(pred)

    cands = []
    for v in rule.instr_vars:
        preds = unary.get(v, ())
        cands.append([t for t, inst in enumerate(instances)
                      if all(_unary_ok(p, inst) for p in preds)])

    out = []
    for combo in product(*cands):
        env = {v: instances[t] for v, t in zip(rule.instr_vars, combo)}
        envt = dict(zip(rule.instr_vars, combo))
        ok = True
        for pred in binary:
            if isinstance(pred, ProcEq):
                ok = env[pred.a].p == env[pred.b].p
            elif isinstance(pred, ProcNe):
                ok = env[pred.a].p != env[pred.b].p
            elif isinstance(pred, LocEq):
                la, lb = _loc_of(env[pred.a].instr), _loc_of(env[pred.b].instr)
                ok = la is not None and la == lb
            elif isinstance(pred, Distinct):
                ok = envt[pred.a] != envt[pred.b]
            else:
                raise AssertionError(pred)
            if not ok:
                break
        if not ok:
            continue

        for pcombo in product(range(n), repeat=len(rule.proc_vars)):
            procenv = dict(zip(rule.proc_vars, pcombo))
            if any(procenv[d.a] == procenv[d.b] for d in proc_distinct):
                continue
            when: list = []
            then: list = []
            valid = True
            for atoms, target in ((rule.when, when), (rule.then, then)):
                for atom in atoms:
                    keys = _atom_keys(atom, env, procenv, n)
                    if keys is None:
                        valid = False
                        break
                    target.extend(keys)
                if not valid:
                    break
            if not valid:
                continue
            if any(not feas.possible(a, b) for a, b in when):
                continue
            out.append(GroundRule(rule.name,
                                  tuple(dict.fromkeys(when)),
                                  tuple(dict.fromkeys(then))))
    return out


def ground_rules(spec: McmSpec, instances, n: int) -> list[GroundRule]:
    feas = _Feasibility(instances)
    out = []
    seen = set()
    for rule in spec.rules:
        for gr in _ground_one(rule, instances, feas, n):
            sig = (frozenset(gr.when), frozenset(gr.then))
            if sig not in seen:
                seen.add(sig)
                out.append(gr)
    return out


def defining_atoms(spec: McmSpec, instances, n: int) -> list:
    """Sorted ground atoms mentioned by any surviving ground rule."""
    atoms = set()
    for gr in ground_rules(spec, instances, n):
        atoms.update(gr.when)
        atoms.update(gr.then)
    return sorted(atoms, key=atom_sort_key)


# ---------------------------------------------------------------------------
# Runtime engine


class ConstraintEngine:
    """Admissibility, violation and guard checks bound to one machine.

    Atom truth needs order information from the state: either clock
    stamps or the predicate bits kept up to date through order_hook.
    Atom i of a state is (lhs performed) and (rhs performed) and
    (lhs before rhs); an unperformed side makes the atom false.
    """

    def __init__(self, machine, spec: McmSpec):
        self.machine = machine
        self.ground = ground_rules(spec, machine.instances, machine.n)
        atoms = sorted({a for gr in self.ground for a in gr.when + gr.then},
                       key=atom_sort_key)
        okidx = machine.op_key_index()
        self.atoms = atoms
        self.atom_ops = [(okidx[l], okidx[r]) for l, r in atoms]
        self.natoms = len(atoms)
        aid = {a: i for i, a in enumerate(atoms)}
        self.rules = [(gr.name,
                       tuple(aid[a] for a in gr.when),
                       tuple(aid[a] for a in gr.then))
                      for gr in self.ground]

        # predicate-bit maintenance: at the rhs perform, set the bit if
        # the lhs already performed
        self.order_hook = [[] for _ in range(machine.nops)]
        for i, (l, r) in enumerate(self.atom_ops):
            self.order_hook[r].append((1 << i, l))

        # rule masks for the predicate-bit fast path
        self._rule_masks = []
        for _, when, then in self.rules:
            wm = tm = 0
            for i in when:
                wm |= 1 << i
            for i in then:
                tm |= 1 << i
            self._rule_masks.append((wm, tm))

        # per-operation guard entries; performing op o is blocked when some
        # rule would hold its condition with a conclusion atom decided false
        table: list[list] = [[] for _ in range(machine.nops)]
        for _, when, then in self.rules:
            rhs_ops = {self.atom_ops[i][1] for i in when + then}
            for o in rhs_ops:
                pre_when = tuple(i for i in when if self.atom_ops[i][1] != o)
                sub_when = tuple(self.atom_ops[i][0] for i in when
                                 if self.atom_ops[i][1] == o)
                new_then = tuple(self.atom_ops[i][0] for i in then
                                 if self.atom_ops[i][1] == o)
                old_then = tuple(i for i in then if self.atom_ops[i][1] != o)
                table[o].append((pre_when, sub_when, new_then, old_then))
        self.guard_table = [tuple(entries) for entries in table]

    def atom_true(self, state, i: int) -> bool:
        if state.ordvals is not None:
            return state.ordvals >> i & 1 == 1
        l, r = self.atom_ops[i]
        end = state.end
        if not (end >> l & 1 and end >> r & 1):
            return False
        return state.stamps[l] < state.stamps[r]

    def atoms_value(self, state) -> int:
        if state.ordvals is not None:
            return state.ordvals
        v = 0
        for i in range(self.natoms):
            if self.atom_true(state, i):
                v |= 1 << i
        return v

    def admissible(self, state) -> bool:
        """Every rule whose condition holds has its conclusion hold."""
        if state.ordvals is not None:
            v = state.ordvals
            for wm, tm in self._rule_masks:
                if v & wm == wm and v & tm != tm:
                    return False
            return True
        for _, when, then in self.rules:
            if all(self.atom_true(state, i) for i in when):
                if not all(self.atom_true(state, i) for i in then):
                    return False
        return True

    def permanently_violated(self, state) -> bool:
        """Some held condition has a conclusion atom that can no longer
        become true because its rhs already performed."""
        end = state.end
        for _, when, then in self.rules:
            if all(self.atom_true(state, i) for i in when):
                for i in then:
                    if end >> self.atom_ops[i][1] & 1 \
                            and not self.atom_true(state, i):
                        return True
        return False

    def guard_ok(self, state, op: int) -> bool:
        """False when performing op would permanently violate some rule."""
        entries = self.guard_table[op]
        if not entries:
            return True
        end = state.end
        for pre_when, sub_when, new_then, old_then in entries:
            if any(not end >> l & 1 for l in sub_when):
                continue
            if not all(self.atom_true(state, i) for i in pre_when):
                continue
            if any(not end >> l & 1 for l in new_then):
                return False
            for i in old_then:
                if end >> self.atom_ops[i][1] & 1 \
                        and not self.atom_true(state, i):
                    return False
        return True
