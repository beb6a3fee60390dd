import itertools

import pytest
from hypothesis import given, strategies as st

from mcmcheck.mcm import (
    DestAll, DestProcOf, DestVar, Distinct, HasAttr, KindIs, OpRef, OrderAtom,
    ProcEq, StageSpec, parse_mcm, validate_stages,
)
from mcmcheck.parsing import ParseError

FENCE_RULE = """
mcm "demo" {
  rule fence_flush {
    vars i0 i1: instr;
    where kind(i0) = store, kind(i1) = nop, attr(i1) has fence,
          proc(i0) = proc(i1);
    when Fe(i0) < Fe(i1);
    then Re(i0, *) < Is(i1);
  }
}
"""


def test_fence_rule_parses():
    spec = parse_mcm(FENCE_RULE)
    assert spec.name == "demo"
    assert len(spec.rules) == 1
    r = spec.rules[0]
    assert r.name == "fence_flush"
    assert r.instr_vars == ("i0", "i1")
    assert r.proc_vars == ()
    assert KindIs("i0", "store") in r.where
    assert HasAttr("i1", "fence") in r.where
    assert ProcEq("i0", "i1") in r.where
    assert r.when == (OrderAtom(OpRef("Fe", "i0"), OpRef("Fe", "i1")),)
    assert r.then == (OrderAtom(OpRef("Re", "i0", DestAll()),
                                OpRef("Is", "i1")),)


def test_store_store_rule_with_proc_var():
    src = """
    mcm "m" {
      rule ss {
        vars s0 s1: instr, k: proc;
        where kind(s0) = store, kind(s1) = store, proc(s0) = proc(s1),
              s0 != s1;
        when Fe(s0) < Fe(s1);
        then Re(s0, k) < Re(s1, k);
      }
    }
    """
    r = parse_mcm(src).rules[0]
    assert r.proc_vars == ("k",)
    assert r.then[0].lhs.dest == DestVar("k")


def test_read_own_write_dest():
    src = """
    mcm "m" {
      rule row {
        vars s l: instr;
        where kind(s) = store, kind(l) = load, proc(s) = proc(l),
              loc(s) = loc(l);
        when Fe(s) < Fe(l);
        then Re(s, proc(s)) < Ex(l);
      }
    }
    """
    r = parse_mcm(src).rules[0]
    assert r.then[0].lhs.dest == DestProcOf("s")


def test_stages_block():
    src = 'mcm "m" { stages { {Fe Is Ex} {Re} } }'
    spec = parse_mcm(src)
    assert spec.stages == StageSpec((frozenset({"Fe", "Is", "Ex"}),
                                     frozenset({"Re"})))


def test_empty_when_is_unconditional():
    src = """
    mcm "m" {
      rule uncond {
        vars a b: instr;
        where kind(a) = load, kind(b) = load, proc(a) = proc(b), a != b;
        when;
        then Ex(a) < Ex(b);
      }
    }
    """
    r = parse_mcm(src).rules[0]
    assert r.when == ()
    assert len(r.then) == 1


def test_when_section_may_be_omitted():
    src = """
    mcm "m" {
      rule uncond { vars a: instr; where kind(a) = load; then Is(a) < Ex(a); }
    }
    """
    assert parse_mcm(src).rules[0].when == ()


def test_obs_collapses_to_performing_process():
    src = """
    mcm "m" {
      rule r { vars a b: instr; where obs(a) = proc(a), a != b;
               when Fe(a) < Fe(b); then Is(a) < Is(b); }
    }
    """
    r = parse_mcm(src).rules[0]
    # the obs predicate is validated and dropped; only a != b remains
    assert r.where == (Distinct("a", "b"),)


def test_obs_of_other_process_rejected():
    src = """
    mcm "m" {
      rule r { vars a b: instr; where obs(a) = proc(b); then Is(a) < Is(b); }
    }
    """
    with pytest.raises(ParseError) as e:
        parse_mcm(src)
    assert "observer" in str(e.value)


def test_undeclared_variable_rejected():
    src = 'mcm "m" { rule r { vars a: instr; then Is(a) < Is(zz); } }'
    with pytest.raises(ParseError) as e:
        parse_mcm(src)
    assert "zz" in str(e.value)


def test_dest_must_be_declared_proc_var():
    src = """
    mcm "m" { rule r { vars a: instr; then Re(a, q) < Is(a); } }
    """
    with pytest.raises(ParseError):
        parse_mcm(src)


def test_non_re_dest_rejected():
    src = 'mcm "m" { rule r { vars a: instr, k: proc; then Is(a, k) < Ex(a); } }'
    with pytest.raises(ParseError):
        parse_mcm(src)


def test_negated_atom_rejected():
    src = 'mcm "m" { rule r { vars a b: instr; then !Is(a) < Is(b); } }'
    with pytest.raises(ParseError) as e:
        parse_mcm(src)
    assert "negation" in str(e.value)


def test_le_atom_rejected():
    src = 'mcm "m" { rule r { vars a b: instr; then Is(a) <= Is(b); } }'
    with pytest.raises(ParseError) as e:
        parse_mcm(src)
    assert "strict" in str(e.value)


def test_duplicate_rule_name_rejected():
    src = """
    mcm "m" {
      rule r { vars a: instr; then Fe(a) < Is(a); }
      rule r { vars a: instr; then Fe(a) < Is(a); }
    }
    """
    with pytest.raises(ParseError):
        parse_mcm(src)


def test_stage_overlap_rejected():
    src = 'mcm "m" { stages { {Fe Is} {Fe Ex Re} } }'
    with pytest.raises(ParseError) as e:
        parse_mcm(src)
    assert "overlap" in str(e.value)


def test_stage_omission_rejected():
    src = 'mcm "m" { stages { {Fe Is} {Ex} } }'
    with pytest.raises(ParseError) as e:
        parse_mcm(src)
    assert "Re" in str(e.value)


def test_stage_order_violation_rejected():
    src = 'mcm "m" { stages { {Fe Ex} {Is Re} } }'
    with pytest.raises(ParseError) as e:
        parse_mcm(src)
    assert "order" in str(e.value)


def test_identity_partition_ok():
    validate_stages(StageSpec((frozenset({"Fe"}), frozenset({"Is"}),
                               frozenset({"Ex"}), frozenset({"Re"}))))


def test_single_stage_ok():
    validate_stages(StageSpec((frozenset({"Fe", "Is", "Ex", "Re"}),)))


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def test_stage_validation_accepts_exactly_ordered_partitions():
    kinds = ["Fe", "Is", "Ex", "Re"]
    order = {k: i for i, k in enumerate(kinds)}
    accepted = set()
    for part in _set_partitions(kinds):
        for perm in itertools.permutations(part):
            spec = StageSpec(tuple(frozenset(g) for g in perm))
            stage_of = {k: i for i, g in enumerate(perm) for k in g}
            expected_ok = all(
                stage_of[a] <= stage_of[b]
                for a in kinds for b in kinds if order[a] < order[b])
            try:
                validate_stages(spec)
                ok = True
            except ValueError:
                ok = False
            assert ok == expected_ok
            if ok:
                accepted.add(spec.stages)
    # ordered set partitions of a 4-chain: compositions of 4, i.e. 2^3
    assert len(accepted) == 8


@given(st.lists(st.sampled_from(["Fe", "Is", "Ex", "Re", "Fe"]),
                min_size=0, max_size=6))
def test_stage_validator_never_crashes(seq):
    groups = [frozenset(seq[i:i + 2]) for i in range(0, len(seq), 2)]
    groups = [g for g in groups if g]
    try:
        validate_stages(StageSpec(tuple(groups)))
    except ValueError:
        pass
