"""Likely loop invariants from traces, and the negatives that balance them.

Candidates come from small templates instantiated with observed values.  A
candidate survives when it holds at every loop-head check, the exit check
included.  Each survivor is paired with its first single-token mutant that
the same traces refute.
"""
# %%
from tsl.corpus import figure4_program
from tsl.fuzz import TestSuite, collect_traces
from tsl.invariant import InvariantCandidate, find_violation, loop_sites, mutate_negative, propose_invariants
from tsl.minilang import pretty_print

prog = figure4_program()
print(pretty_print(prog))
traces = collect_traces(prog, TestSuite([((5, 1, 4),), ((3, 3),), ((2, 7, 1, 0),)], []))

# %% proposals at the inner loop
inner = loop_sites(prog)[1]
found = propose_invariants(prog, traces, inner)
print(len(found), "candidates hold, e.g.", ", ".join(c.text() for c in found[:8]))

# %% the classic pair
pos = InvariantCandidate(("max", ">=", "diff"), inner)
neg = mutate_negative(pos, prog, traces)
print(f"{pos.text()!r} holds; first refuted mutant {neg.text()!r}")
print("witness:", find_violation(neg, prog, traces))
