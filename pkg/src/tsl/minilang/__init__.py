"""The mini imperative language: parser, printer and instrumented interpreter."""
from .ast import ARRAY, BOOL, INT, Program, executable_lines, loops
from .interp import (MAX_ARRAY_LEN, MAX_STATES, MAX_STEPS, UNDEF, Compiled, ExecutionError, Limits,
                     ProgramState, StateLayout, Trace, compile_program, execute, make_layout)
from .parser import MiniLangError, ParseError, TypeCheckError, UndefinedIdentifierError, parse
from .printer import pretty_print
from .traceio import dumps_traces, loads_traces, trace_from_json, trace_to_json

__all__ = [
    "ARRAY", "BOOL", "INT", "Program", "executable_lines", "loops",
    "MAX_ARRAY_LEN", "MAX_STATES", "MAX_STEPS", "UNDEF", "Compiled", "ExecutionError", "Limits",
    "ProgramState", "StateLayout", "Trace", "compile_program", "execute", "make_layout",
    "MiniLangError", "ParseError", "TypeCheckError", "UndefinedIdentifierError", "parse",
    "pretty_print", "dumps_traces", "loads_traces", "trace_from_json", "trace_to_json",
]
