from __future__ import annotations

from . import ast as A

_PREC = {"||": 1, "&&": 2, "+": 4, "-": 4, "*": 5, "/": 5, "%": 5}
for _op in A.COMPARE_OPS:
    _PREC[_op] = 3


def _prec(e) -> int:
    if isinstance(e, A.Binary):
        return _PREC[e.op]
    if isinstance(e, A.Unary):
        return 6
    return 7


def format_expr(e) -> str:
    if isinstance(e, A.Num):
        return str(e.value)
    if isinstance(e, A.BoolLit):
        return "true" if e.value else "false"
    if isinstance(e, A.Var):
        return e.name
    if isinstance(e, A.Index):
        return f"{e.name}[{format_expr(e.index)}]"
    if isinstance(e, A.Len):
        return f"len({e.name})"
    if isinstance(e, A.Unary):
        inner = format_expr(e.operand)
        if _prec(e.operand) < 6:
            inner = f"({inner})"
        return f"{e.op}{inner}"
    p = _PREC[e.op]
    left, right = format_expr(e.left), format_expr(e.right)
    # comparisons do not chain, so both sides of one need parentheses at equal precedence
    if _prec(e.left) < p or (p == 3 and _prec(e.left) == 3):
        left = f"({left})"
    if _prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {e.op} {right}"


def _block(stmts, indent: int, out: list[str]):
    pad = "  " * indent
    for s in stmts:
        if isinstance(s, A.Assign):
            out.append(f"{pad}{s.name} := {format_expr(s.expr)};")
        elif isinstance(s, A.Store):
            out.append(f"{pad}{s.name}[{format_expr(s.index)}] := {format_expr(s.expr)};")
        elif isinstance(s, A.Return):
            out.append(f"{pad}return {format_expr(s.expr)};")
        elif isinstance(s, A.While):
            out.append(f"{pad}while ({format_expr(s.cond)}) {{")
            _block(s.body, indent + 1, out)
            out.append(f"{pad}}}")
        elif isinstance(s, A.For):
            out.append(f"{pad}for {s.var} in {format_expr(s.lo)} .. {format_expr(s.hi)} {{")
            _block(s.body, indent + 1, out)
            out.append(f"{pad}}}")
        elif isinstance(s, A.If):
            _if(s, pad, indent, out, prefix=pad)
        else:
            raise TypeError(s)


def _if(s, pad, indent, out, prefix):
    out.append(f"{prefix}if ({format_expr(s.cond)}) {{")
    _block(s.then, indent + 1, out)
    if not s.orelse:
        out.append(f"{pad}}}")
    elif len(s.orelse) == 1 and isinstance(s.orelse[0], A.If):
        _if(s.orelse[0], pad, indent, out, prefix=f"{pad}}} else ")
    else:
        out.append(f"{pad}}} else {{")
        _block(s.orelse, indent + 1, out)
        out.append(f"{pad}}}")


def pretty_print(program: A.Program) -> str:
    """Render ``program`` as canonical source text, one statement per line."""
    params = ", ".join(f"{n}:{k}" for n, k in program.params)
    out = [f"fn {program.name}({params}) {{"]
    _block(program.body, 1, out)
    out.append("}")
    return "\n".join(out) + "\n"
