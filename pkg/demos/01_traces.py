"""Two functions, one answer, different executions.

Both programs below return max(a) - min(a).  One sorts with bubble sort, the
other with insertion sort.  Their outputs agree everywhere; their state
traces do not, and that difference is what the classifier learns from.
"""
# %%
from tsl.corpus import PROBLEMS, figure1_pair
from tsl.fuzz import collect_traces, select_test_suite, suite_coverage
from tsl.minilang import UNDEF, execute, make_layout, pretty_print

bubble, insertion = figure1_pair()
print(pretty_print(bubble))

# %% one input, two traces
inp = ((5, 1, 4),)
for prog in (bubble, insertion):
    t = execute(prog, inp)
    slots = make_layout(prog).slots
    # hide the unused tail of the fixed-length array
    cols = [k for k, (v, kind) in enumerate(slots) if not kind.startswith("elem") or int(kind[5:]) < 3]
    names = []
    for k in cols:
        v, kind = slots[k]
        names.append(f"{v}[{kind[5:]}]" if kind.startswith("elem") else f"len({v})" if kind == "len" else v)
    print(f"\n{prog.label}: output {t.output}, {len(t.states)} states")
    print("   ", " ".join(f"{n:>5}" for n in names))
    for s in t.states[:8]:
        print("   ", " ".join(f"{'U' if s.values[k] is UNDEF else s.values[k]:>5}" for k in cols))
    print("    ...")

# %% a coverage-ranked suite shared by both
spec = PROBLEMS["maxdiff"].with_seed(0)
for n in (1, 2, 4, 8):
    suite = select_test_suite([bubble, insertion], spec, n, problem="maxdiff")
    print(f"N={n:2d}  mean line coverage {suite_coverage([bubble, insertion], suite):.3f}")

# %% same outputs, different state sequences on every input
ta, tb = collect_traces(bubble, suite), collect_traces(insertion, suite)
print([t.output for t in ta] == [t.output for t in tb])
print(sum(len(x.states) != len(y.states) or [s.values for s in x.states] != [s.values for s in y.states]
          for x, y in zip(ta, tb)), "of", len(ta), "executions differ")
