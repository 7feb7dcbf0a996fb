import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsl.corpus import figure1_pair, shipped_classes
from tsl.fuzz import gen_inputs
from tsl.minilang import (MAX_ARRAY_LEN, UNDEF, Limits, ParseError, TypeCheckError, UndefinedIdentifierError,
                          dumps_traces, execute, loads_traces, make_layout, parse, pretty_print)
from tsl.minilang.ast import While, executable_lines, walk_stmts

from conftest import spec_for

CLASSES = shipped_classes()


def bubble_sort_reference(a):
    a = list(a)
    n = len(a)
    for i in range(n):
        for j in range(n - 1 - i):
            if a[j] > a[j + 1]:
                a[j], a[j + 1] = a[j + 1], a[j]
    return a


# -- parse ------------------------------------------------------------------------------

def test_parse_identity_program():
    p = parse("fn f(x:int){return x;}")
    assert p.name == "f"
    assert p.params == [("x", "int")]
    assert len(p.body) == 1 and type(p.body[0]).__name__ == "Return"


def test_parse_undefined_identifier():
    with pytest.raises(UndefinedIdentifierError) as e:
        parse("fn f(){return y;}")
    assert e.value.name == "y"


def test_parse_syntax_error_reports_position():
    with pytest.raises(ParseError) as e:
        parse("fn f(x:int){\n  return x\n}")
    assert e.value.line == 3 and e.value.col >= 1


def test_type_errors_are_rejected():
    with pytest.raises(TypeCheckError):
        parse("fn f(x:int){ y := x && true; return y; }")


def test_figure1_bubble_has_two_nested_whiles():
    bubble, _ = figure1_pair()
    outer = [s for s in bubble.body if isinstance(s, While)]
    assert len(outer) == 1
    assert any(isinstance(s, While) for s in outer[0].body)


def test_statement_lines_are_in_range():
    for c in CLASSES:
        p = c.oracle
        assert all(1 <= s.line <= p.source_lines for s in walk_stmts(p.body))


# -- layout -----------------------------------------------------------------------------

def test_layout_array_then_scalars():
    p = parse("fn f(a:int[], n:int){ i := 0; return i; }")
    slots = make_layout(p).slots
    assert slots[:MAX_ARRAY_LEN] == tuple(("a", f"elem:{k}") for k in range(MAX_ARRAY_LEN))
    assert slots[MAX_ARRAY_LEN:] == (("a", "len"), ("n", "int"), ("i", "int"))


def test_layout_empty():
    assert len(make_layout(parse("fn f(){return 0;}"))) == 0


def test_alpha_renamed_layouts_match():
    a = parse("fn f(a:int[], n:int){ i := 0; t := a[0]; return t + i; }")
    b = parse("fn f(xs:int[], m:int){ k := 0; tmp := xs[0]; return tmp + k; }")
    kinds = lambda p: [k for _, k in make_layout(p).slots]
    assert kinds(a) == kinds(b)


# -- execute ----------------------------------------------------------------------------

def test_execute_two_assignments():
    t = execute(parse("fn f(){ x := 1; y := x + 1; return y; }"), ())
    assert [s.values for s in t.states] == [(1, UNDEF), (1, 2)]
    assert t.output == 2


def test_execute_no_writes():
    t = execute(parse("fn f(){return 0;}"), ())
    assert len(t.states) == 0 and t.output == 0 and t.ok


def test_bubble_sort_trace_passes_through_sorted_permutation():
    bubble, _ = figure1_pair()
    t = execute(bubble, ((5, 1, 4),))
    assert t.output == max(5, 1, 4) - min(5, 1, 4)
    target = bubble_sort_reference((5, 1, 4))
    assert any(list(s.values[:3]) == target for s in t.states)


def test_parameter_binding_emits_one_state_per_parameter():
    t = execute(parse("fn f(a:int, b:int){ return a + b; }"), (3, 4))
    assert [s.values for s in t.states] == [(3, UNDEF), (3, 4)]


@pytest.mark.parametrize("src,inp,kind", [
    ("fn f(x:int){return 10/x;}", (0,), "division-by-zero"),
    ("fn f(x:int){return 10%x;}", (0,), "division-by-zero"),
    ("fn f(a:int[]){return a[5];}", ((1, 2),), "index-out-of-bounds"),
    ("fn f(x:int){ x := x*65536; x := x*65536; return 0; }", (1,), "integer-overflow"),
    ("fn f(x:int){ while (true) { x := x + 1; } return 0; }", (0,), "step-limit-exceeded"),
])
def test_execution_errors_are_markers(src, inp, kind):
    t = execute(parse(src), inp)
    assert t.error == kind and not t.ok


def test_state_limit_truncates():
    t = execute(parse("fn f(n:int){ i := 0; while (i < n) { i := i + 1; } return i; }"), (50,),
                Limits(max_states=10))
    assert t.truncated and len(t.states) <= 10


def test_input_arity_checked():
    with pytest.raises(ValueError):
        execute(parse("fn f(x:int){return x;}"), (1, 2))


# -- pretty print -----------------------------------------------------------------------

def test_pretty_print_roundtrip_oracles():
    for c in CLASSES:
        assert parse(pretty_print(c.oracle)) == c.oracle


def test_pretty_print_empty_body():
    assert " ".join(pretty_print(parse("fn f(){return 0;}")).split()) == "fn f() { return 0; }"


def test_figure1_pair_differs_only_in_loop_bodies():
    bubble, insertion = figure1_pair()
    a, b = pretty_print(bubble).splitlines(), pretty_print(insertion).splitlines()
    assert a[:4] == b[:4]
    assert a[-3:] == b[-3:]
    assert a != b


# -- properties -------------------------------------------------------------------------

@st.composite
def program_and_input(draw):
    c = CLASSES[draw(st.integers(0, len(CLASSES) - 1))]
    seed = draw(st.integers(0, 2**32 - 1))
    return c.oracle, gen_inputs(spec_for(c.label).with_seed(seed), 1)[0]


@given(program_and_input())
@settings(max_examples=60)
def test_trace_properties(case):
    p, inp = case
    t1, t2 = execute(p, inp), execute(p, inp)
    assert dumps_traces([t1]) == dumps_traces([t2])
    width = len(make_layout(p))
    assert all(len(s.values) == width for s in t1.states)
    lines = executable_lines(p)
    assert t1.covered_lines <= set(range(1, p.source_lines + 1))
    assert t1.covered_lines <= lines
    assert {s.step_line for s in t1.states} <= t1.covered_lines
    for prev, cur in zip(t1.states, t1.states[1:]):
        assert prev.values != cur.values
        assert all(not (a is not UNDEF and b is UNDEF) for a, b in zip(prev.values, cur.values))


@given(program_and_input())
@settings(max_examples=30)
def test_trace_json_roundtrip(case):
    p, inp = case
    t = execute(p, inp)
    back = loads_traces(dumps_traces([t]))[0]
    assert dumps_traces([back]) == dumps_traces([t])
    assert [s.values for s in back.states] == [s.values for s in t.states]


def test_trace_file_uses_decimal_strings_and_undef_marker():
    import json
    t = execute(parse("fn f(a:int[]){ x := -7; return x; }"), ((3, -2),))
    obj = json.loads(dumps_traces([t]))
    assert obj["states"][0][:3] == ["3", "-2", "U"]
    assert obj["states"][-1][-1] == "-7"
    assert obj["lines"] == [1, 1] and obj["output"] == "-7"
