"""JSON-lines trace files.

One object per trace::

    {"program": "maxdiff", "input": [["5", "1", "4"]], "output": "4",
     "states": [["5", "1", "4", "U", ...], ...], "lines": [1, 3, ...],
     "error": null, "covered": [1, 2, 3], "truncated": false}

Integers are written as decimal strings and UNDEF as ``"U"`` so that files are
bit-identical across platforms.  ``lines`` holds the source line of the write
that produced each state.
"""
from __future__ import annotations

import json

from .interp import UNDEF, ProgramState, Trace


def encode_value(v):
    if v is UNDEF:
        return "U"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, (tuple, list)):
        return [encode_value(x) for x in v]
    if v is None:
        return None
    raise TypeError(f"cannot encode {v!r}")


def decode_value(v):
    if v == "U":
        return UNDEF
    if v == "true":
        return True
    if v == "false":
        return False
    if isinstance(v, list):
        return tuple(decode_value(x) for x in v)
    if v is None:
        return None
    return int(v)


def trace_to_json(trace: Trace) -> str:
    obj = {
        "program": trace.program,
        "input": [encode_value(v) for v in trace.input],
        "output": encode_value(trace.output),
        "states": [[encode_value(x) for x in s.values] for s in trace.states],
        "lines": [s.step_line for s in trace.states],
        "error": trace.error,
        "covered": sorted(trace.covered_lines),
        "truncated": trace.truncated,
    }
    return json.dumps(obj, separators=(",", ":"))


def trace_from_json(line: str) -> Trace:
    obj = json.loads(line)
    states = [ProgramState(tuple(decode_value(x) for x in vals), ln)
              for vals, ln in zip(obj["states"], obj["lines"])]
    return Trace(
        program=obj["program"],
        input=tuple(decode_value(v) for v in obj["input"]),
        states=states,
        output=decode_value(obj["output"]),
        error=obj.get("error"),
        covered_lines=frozenset(obj.get("covered", ())),
        truncated=obj.get("truncated", False),
    )


def dumps_traces(traces) -> str:
    return "".join(trace_to_json(t) + "\n" for t in traces)


def loads_traces(text: str) -> list[Trace]:
    return [trace_from_json(ln) for ln in text.splitlines() if ln.strip()]
