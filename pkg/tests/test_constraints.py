import random

from mcmcheck.constraints import ConstraintEngine, defining_atoms, ground_rules
from mcmcheck.lang import BoundsConfig, parse_program
from mcmcheck.mcm import extract_defining_predicates, parse_mcm
from mcmcheck.semantics import Machine

TWO_STORES = """
process 0 { a: store x 1
            b: store y 1 }
process 1 { nop }
"""

STORE_STORE = """
mcm "ss" {
  rule store_store {
    vars s0 s1: instr, k: proc;
    where kind(s0) = store, kind(s1) = store, proc(s0) = proc(s1), s0 != s1;
    when Fe(s0) < Fe(s1);
    then Re(s0, k) < Re(s1, k);
  }
}
"""

TOY_PROG = """
process 0 { a: nop }
process 1 { b: nop }
process 2 { c: nop }
process 3 { d: nop }
"""

TOY_MCM = """
mcm "toy" {
  stages { {Fe Is Ex Re} }
  rule cross {
    vars w x y z: instr;
    where label(w) = a, label(x) = b, label(y) = c, label(z) = d;
    when Is(w) < Is(x);
    then Is(y) < Is(z);
  }
}
"""


def setup(prog_src, mcm_src, sups=None, mode="clock"):
    prog = parse_program(prog_src)
    bounds = (BoundsConfig.for_program(prog) if sups is None
              else BoundsConfig(sups))
    m = Machine(prog, bounds, mode=mode)
    eng = ConstraintEngine(m, parse_mcm(mcm_src))
    if mode == "ordbits":
        m.order_hook = eng.order_hook
    return m, eng


def grounded(prog_src, mcm_src, sups=None):
    prog = parse_program(prog_src)
    bounds = (BoundsConfig.for_program(prog) if sups is None
              else BoundsConfig(sups))
    from mcmcheck.lang import enumerate_instances
    instances = enumerate_instances(prog, bounds)
    spec = parse_mcm(mcm_src)
    return (ground_rules(spec, instances, prog.n),
            defining_atoms(spec, instances, prog.n))


def test_store_store_grounding_counts():
    rules, atoms = grounded(TWO_STORES, STORE_STORE)
    assert len(rules) == 2
    assert len(atoms) == 3
    for gr in rules:
        assert gr.when == ((("Fe", 0, 0, 0, None), ("Fe", 0, 1, 0, None)),)
    assert {gr.then[0][0][4] for gr in rules} == {0, 1}


def test_program_order_reversal_is_pruned():
    rules, _ = grounded(TWO_STORES, STORE_STORE)
    # only the program-order assignment survives
    for gr in rules:
        assert gr.when[0][0][2] == 0 and gr.when[0][1][2] == 1


def test_toy_grounding():
    rules, atoms = grounded(TOY_PROG, TOY_MCM)
    assert len(rules) == 1
    assert len(atoms) == 2
    (r,) = rules
    assert r.when == ((("Is", 0, 0, 0, None), ("Is", 1, 0, 0, None)),)
    assert r.then == ((("Is", 2, 0, 0, None), ("Is", 3, 0, 0, None)),)


def test_occurrence_filter_straight_line():
    src = "process 0 { nop }\nprocess 1 { nop }"
    mcm = """
mcm "m" {
  rule r {
    vars v w: instr;
    where proc(v) != proc(w);
    when Fe(v) < Fe(w);
    then Is(v) < Is(w);
  }
}
"""
    rules, _ = grounded(src, mcm, sups=(2, 2))
    # second occurrences can never be fetched off a straight line
    assert len(rules) == 2


def test_unreachable_code_is_pruned():
    src = "process 0 { jump end 1\n dead: store x 1\n end: nop }"
    mcm = """
mcm "m" {
  rule r {
    vars s: instr;
    where kind(s) = store;
    when Fe(s) < Fe(s);
    then Is(s) < Is(s);
  }
}
"""
    prog = parse_program(src)
    rules, atoms = grounded(src, mcm)
    assert rules == [] and atoms == []


def test_loop_occurrences_survive():
    src = "process 0 { body: nop\n jump body 1 }"
    mcm = """
mcm "m" {
  rule r {
    vars v w: instr;
    where label(v) = body, label(w) = body, v != w;
    when Fe(v) < Fe(w);
    then Is(v) < Is(w);
  }
}
"""
    rules, _ = grounded(src, mcm, sups=(3,))
    # occurrence pairs in fetch order: (0,1) (0,2) (1,2)
    assert len(rules) == 3
    assert all(gr.when[0][0][3] < gr.when[0][1][3] for gr in rules)


def test_const_jump_prunes_fallthrough():
    src = "process 0 { jump t 1\n mid: nop\n t: nop }"
    mcm = """
mcm "m" {
  rule r {
    vars v: instr;
    where label(v) = mid;
    when Fe(v) < Fe(v);
    then Is(v) < Is(v);
  }
}
"""
    rules, _ = grounded(src, mcm)
    assert rules == []


def test_wildcard_destination_expands_conjunctively():
    src = "process 0 { s: store x 1\n m: nop }\nprocess 1 { nop }"
    mcm = """
mcm "m" {
  rule flush {
    vars s n: instr;
    where kind(s) = store, label(n) = m;
    when Fe(s) < Fe(n);
    then Re(s, *) < Is(n);
  }
}
"""
    rules, atoms = grounded(src, mcm)
    assert len(rules) == 1
    assert len(rules[0].then) == 2
    assert {a[0][4] for a in rules[0].then} == {0, 1}


def test_dest_proc_of_resolves_to_performer():
    src = "process 0 { s: store x 1\n l: load r0 x }\nprocess 1 { nop }"
    mcm = """
mcm "m" {
  rule own {
    vars s l: instr;
    where kind(s) = store, kind(l) = load, proc(s) = proc(l),
          loc(s) = loc(l);
    when Fe(s) < Fe(l);
    then Re(s, proc(s)) < Ex(l);
  }
}
"""
    rules, _ = grounded(src, mcm)
    assert len(rules) == 1
    ((lhs, rhs),) = rules[0].then
    assert lhs == ("Re", 0, 0, 0, 0)
    assert rhs == ("Ex", 0, 1, 0, None)


def test_loc_mismatch_drops_assignment():
    src = "process 0 { s: store x 1\n l: load r0 y }"
    mcm = """
mcm "m" {
  rule own {
    vars s l: instr;
    where kind(s) = store, kind(l) = load, loc(s) = loc(l);
    when Fe(s) < Fe(l);
    then Re(s, proc(s)) < Ex(l);
  }
}
"""
    rules, _ = grounded(src, mcm)
    assert rules == []


def test_nonexistent_op_drops_assignment():
    src = "process 0 { move r0 1\n nop }"
    mcm = """
mcm "m" {
  rule r {
    vars v w: instr;
    where v != w;
    when Fe(v) < Fe(w);
    then Ex(v) < Is(w);
  }
}
"""
    rules, _ = grounded(src, mcm)
    assert rules == []


def test_duplicate_ground_rules_collapse():
    # swapping the two proc variables yields the identical ground rule
    src = "process 0 { a: store x 1\n b: store y 1 }\nprocess 1 { nop }"
    mcm = """
mcm "m" {
  rule r {
    vars s0 s1: instr, k kp: proc;
    where kind(s0) = store, kind(s1) = store, s0 != s1;
    when Fe(s0) < Fe(s1);
    then Re(s0, k) < Re(s1, k), Re(s0, kp) < Re(s1, kp);
  }
}
"""
    rules, _ = grounded(src, mcm)
    # assignments (k=0,kp=1), (k=1,kp=0) coincide; (0,0) and (1,1) differ
    assert len(rules) == 3


def test_atoms_grow_monotonically_with_rules():
    base = parse_mcm(STORE_STORE)
    more = parse_mcm(STORE_STORE.replace(
        "}\n}", """}
  rule extra {
    vars v w: instr;
    where kind(v) = store, kind(w) = nop;
    when Fe(v) < Fe(w);
    then Is(v) < Is(w);
  }
}"""))
    prog = parse_program(TWO_STORES)
    from mcmcheck.lang import enumerate_instances
    instances = enumerate_instances(prog, BoundsConfig.for_program(prog))
    a1 = set(defining_atoms(base, instances, prog.n))
    a2 = set(defining_atoms(more, instances, prog.n))
    assert a1 <= a2 and len(a2) > len(a1)


def test_extract_defining_predicates_delegates():
    prog = parse_program(TWO_STORES)
    from mcmcheck.lang import enumerate_instances
    instances = enumerate_instances(prog, BoundsConfig.for_program(prog))
    spec = parse_mcm(STORE_STORE)
    assert extract_defining_predicates(spec, instances, prog.n) == \
        defining_atoms(spec, instances, prog.n)


def run(m, s, picks):
    """picks: (kind, p, dest[, idx]) selecting one enabled op each step."""
    from mcmcheck.semantics import KIND_NAMES
    for pick in picks:
        kind, p, dest = pick[:3]
        idx = pick[3] if len(pick) > 3 else None
        chosen = None
        for o in m.structurally_enabled(s):
            inst = m.instances[m.op_inst[o]]
            if (KIND_NAMES[m.op_kind[o]] == kind and inst.p == p
                    and (dest is None or m.op_dest[o] == dest)
                    and (idx is None or inst.idx == idx)):
                chosen = o
                break
        assert chosen is not None, pick
        s, _ = m.apply(s, chosen)
    return s


def test_engine_flags_reversed_reflects():
    m, eng = setup(TWO_STORES, STORE_STORE)
    s = m.initial_state()
    s = run(m, s, [("Fe", 0, None), ("Is", 0, None), ("Ex", 0, None),
                   ("Fe", 0, None), ("Is", 0, None), ("Ex", 0, None)])
    assert not eng.permanently_violated(s)
    # second store reflects to process 1 first: decided against the rule
    s_bad = run(m, s, [("Re", 0, 1, 1)])
    assert eng.permanently_violated(s_bad)
    assert not eng.admissible(s_bad)
    # reflecting the first store first keeps the rule satisfiable
    s_good = run(m, s, [("Re", 0, 1, 0)])
    assert not eng.permanently_violated(s_good)


def test_prefix_admissibility_requires_conclusions():
    m, eng = setup(TWO_STORES, STORE_STORE)
    s = m.initial_state()
    assert eng.admissible(s)
    s = run(m, s, [("Fe", 0, None), ("Fe", 0, None)])
    # condition already holds, conclusions still unperformed
    assert not eng.admissible(s)
    assert not eng.permanently_violated(s)


def test_guard_blocks_exactly_the_violating_reflect():
    m, eng = setup(TWO_STORES, STORE_STORE)
    s = m.initial_state()
    s = run(m, s, [("Fe", 0, None), ("Is", 0, None), ("Ex", 0, None),
                   ("Fe", 0, None), ("Is", 0, None), ("Ex", 0, None)])
    second_re0 = next(o for o in m.structurally_enabled(s)
                      if m.op_kind[o] == 3
                      and m.instances[m.op_inst[o]].idx == 1
                      and m.op_dest[o] == 0)
    first_re0 = next(o for o in m.structurally_enabled(s)
                     if m.op_kind[o] == 3
                     and m.instances[m.op_inst[o]].idx == 0
                     and m.op_dest[o] == 0)
    assert not eng.guard_ok(s, second_re0)
    assert eng.guard_ok(s, first_re0)


def test_strengthened_guard_blocks_condition_completion():
    m, eng = setup(TOY_PROG, TOY_MCM)
    s = m.initial_state()
    # d then c makes the conclusion decided false; a's issue is fine but
    # completing the condition at b must be refused
    s = run(m, s, [("Fe", 3, None), ("Is", 3, None),
                   ("Fe", 2, None), ("Is", 2, None),
                   ("Fe", 0, None), ("Is", 0, None), ("Fe", 1, None)])
    is_b = next(o for o in m.structurally_enabled(s) if m.op_kind[o] == 1)
    assert not eng.guard_ok(s, is_b)
    post, _ = m.apply(s, is_b)
    assert eng.permanently_violated(post)


def test_guard_matches_post_state_violation():
    rng = random.Random(5)
    m, eng = setup(TWO_STORES, STORE_STORE)
    for _ in range(80):
        s = m.initial_state()
        while not m.is_terminal(s):
            allowed = []
            for o in m.structurally_enabled(s):
                post, _ = m.apply(s, o)
                created = eng.permanently_violated(post)
                assert eng.guard_ok(s, o) == (not created)
                if not created:
                    allowed.append(o)
            if not allowed:
                break
            s, _ = m.apply(s, rng.choice(allowed))


def test_predicate_bits_track_clock_truth():
    rng = random.Random(9)
    mc, ec = setup(TWO_STORES, STORE_STORE, mode="clock")
    mo, eo = setup(TWO_STORES, STORE_STORE, mode="ordbits")
    assert ec.atoms == eo.atoms
    for _ in range(60):
        sc, so = mc.initial_state(), mo.initial_state()
        while not mc.is_terminal(sc):
            ops = mc.structurally_enabled(sc)
            assert ops == mo.structurally_enabled(so)
            o = rng.choice(ops)
            sc, _ = mc.apply(sc, o)
            so, _ = mo.apply(so, o)
            for i in range(ec.natoms):
                assert ec.atom_true(sc, i) == eo.atom_true(so, i)
            assert ec.admissible(sc) == eo.admissible(so)
            assert ec.permanently_violated(sc) == eo.permanently_violated(so)
        assert ec.atoms_value(sc) == eo.atoms_value(so)
