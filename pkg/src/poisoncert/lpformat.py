"""Text export of :class:`~poisoncert.encode.MiqcpModel` in an LP-style grammar.

The layout follows the common LP file convention (``Maximize`` / ``Subject
To`` / ``Bounds`` / ``Binaries`` / ``End``) with quadratic terms in square
brackets. Coefficients are written with ``repr`` so a parse followed by a
second emit reproduces the file byte for byte. The grammar is described in
``docs/format.md``.
"""

from __future__ import annotations

import re
from pathlib import Path

from .encode import BINARY, CONTINUOUS, MiqcpModel, VarRef

MAX_LINE = 240
_META_KEYS = ("tie_break_epsilon", "aux_mode", "linearized", "objective", "loss")


class LPFormatError(ValueError):
    """Raised on malformed model text."""


def _num(v: float) -> str:
    return repr(float(v))


def _terms(lin, quad, names, obj: bool = False) -> list[str]:
    out = []
    for c, a in lin:
        out.append(f"{'-' if c < 0 else '+'} {_num(abs(c))} {names[a]}")
    if quad:
        out.append("+ [")
        for c, a, b in quad:
            c = 2.0 * c if obj else c
            prod = f"{names[a]} ^ 2" if a == b else f"{names[a]} * {names[b]}"
            out.append(f"{'-' if c < 0 else '+'} {_num(abs(c))} {prod}")
        out.append("] / 2" if obj else "]")
    return out


def _wrap(head: str, tokens: list[str], tail: str = "") -> list[str]:
    lines, cur = [], head
    for tok in tokens + ([tail] if tail else []):
        if len(cur) + 1 + len(tok) > MAX_LINE and cur.strip():
            lines.append(cur)
            cur = "   " + tok
        else:
            cur = f"{cur} {tok}" if cur else tok
    lines.append(cur)
    return lines


def dumps(model: MiqcpModel) -> str:
    names = [v.name for v in model.variables]
    census = model.census()
    lines = ["\\ poisoncert MIQCP model"]
    for key in _META_KEYS:
        if key in model.meta:
            lines.append(f"\\ meta {key}: {model.meta[key]}")
    lines.append("\\ census " + " ".join(f"{k}={census[k]}" for k in (
        "variables", "binaries", "continuous", "constraints", "quadratic_constraints", "linear_constraints")))
    lines.append("Maximize" if model.sense == "maximize" else "Minimize")
    toks = _terms(model.obj_lin, model.obj_quad, names, obj=True)
    if model.obj_const or not toks:
        c = model.obj_const
        toks.append(f"{'-' if c < 0 else '+'} {_num(abs(c))}")
    lines.extend(_wrap(" obj:", toks))
    lines.append("Subject To")
    for con in model.constraints:
        toks = _terms(con.lin, con.quad, names)
        lines.extend(_wrap(f" {con.name}:", toks, f"{con.sense} {_num(con.rhs)}"))
    lines.append("Bounds")
    for v in model.variables:
        lines.append(f" {_num(v.lo)} <= {v.name} <= {_num(v.hi)}")
    lines.append("Binaries")
    for v in model.variables:
        if v.kind == BINARY:
            lines.append(f" {v.name}")
    lines.append("End")
    return "\n".join(lines) + "\n"


def emit(model: MiqcpModel, path) -> str:
    """Write ``model`` to ``path``; returns the text written."""
    text = dumps(model)
    Path(path).write_text(text, encoding="utf-8")
    return text


_SECTIONS = {"maximize", "minimize", "subject to", "bounds", "binaries", "end"}
_TOKEN = re.compile(r"\d[\d.]*(?:[eE][+-]?\d+)?|inf|nan|\[|\]|\^|\*|/|<=|>=|=|[+-]|[^\s\[\]^*/<>=+-]+")


def _entries(lines):
    cur = None
    for ln in lines:
        if ln.startswith("   ") and cur is not None:
            cur += " " + ln.strip()
            continue
        if cur is not None:
            yield cur
        cur = ln.strip()
    if cur is not None:
        yield cur


def _parse_expr(tokens, index, obj=False):
    lin, quad, const = [], [], 0.0
    k, in_quad, sign = 0, False, 1.0
    while k < len(tokens):
        tok = tokens[k]
        if tok in ("+", "-"):
            sign = -1.0 if tok == "-" else 1.0
            k += 1
            continue
        if tok == "[":
            in_quad = True
            k += 1
            continue
        if tok == "]":
            in_quad = False
            k += 1
            if obj and k + 1 < len(tokens) and tokens[k] == "/" and tokens[k + 1] == "2":
                k += 2
            continue
        coef = float(tok)
        if k + 1 >= len(tokens) or tokens[k + 1] in ("+", "-", "]"):
            const += sign * coef
            k += 1
            continue
        a = index[tokens[k + 1]]
        if in_quad:
            if tokens[k + 2] == "^":
                b = a
                k += 4
            else:
                b = index[tokens[k + 3]]
                k += 4
            c = sign * coef
            quad.append((c / 2.0 if obj else c, a, b))
        else:
            lin.append((sign * coef, a))
            k += 2
        sign = 1.0
    return lin, quad, const


def loads(text: str) -> MiqcpModel:
    sections = {}
    meta = {}
    cur = None
    for raw in text.splitlines():
        if raw.startswith("\\"):
            m = re.match(r"\\ meta (\w+): (.*)$", raw)
            if m:
                meta[m.group(1)] = _meta_value(m.group(2))
            continue
        if raw.strip().lower() in _SECTIONS:
            cur = raw.strip().lower()
            sections.setdefault(cur, [])
            continue
        if not raw.strip():
            continue
        if cur is None:
            raise LPFormatError(f"content before the first section: {raw!r}")
        sections[cur].append(raw)
    if "end" not in sections:
        raise LPFormatError("missing End")
    sense = "maximize" if "maximize" in sections else "minimize"
    variables = []
    for ent in _entries(sections.get("bounds", [])):
        parts = ent.split()
        if len(parts) != 5 or parts[1] != "<=" or parts[3] != "<=":
            raise LPFormatError(f"bad bound line: {ent!r}")
        variables.append(VarRef(parts[2], CONTINUOUS, float(parts[0]), float(parts[4])))
    model = MiqcpModel(variables=variables, sense=sense)
    for ent in _entries(sections.get("binaries", [])):
        k = model.index.get(ent)
        if k is None:
            raise LPFormatError(f"binary {ent!r} has no bound line")
        v = model.variables[k]
        model.variables[k] = VarRef(v.name, BINARY, v.lo, v.hi)
    obj = list(_entries(sections.get(sense, [])))
    if len(obj) != 1 or not obj[0].startswith("obj:"):
        raise LPFormatError("objective must be a single 'obj:' entry")
    try:
        lin, quad, const = _parse_expr(_TOKEN.findall(obj[0][4:]), model.index, obj=True)
        model.obj_lin, model.obj_quad, model.obj_const = lin, quad, const
        for ent in _entries(sections.get("subject to", [])):
            name, _, body = ent.partition(":")
            toks = _TOKEN.findall(body)
            sense_at = max(k for k, t in enumerate(toks) if t in ("<=", ">=", "="))
            rhs_sign = 1.0
            rhs_toks = toks[sense_at + 1:]
            if rhs_toks and rhs_toks[0] in ("+", "-"):
                rhs_sign = -1.0 if rhs_toks[0] == "-" else 1.0
                rhs_toks = rhs_toks[1:]
            lin, quad, _ = _parse_expr(toks[:sense_at], model.index)
            model.add_con(name.strip(), lin, quad, toks[sense_at], rhs_sign * float(rhs_toks[0]))
    except (KeyError, IndexError, ValueError) as exc:
        raise LPFormatError(f"malformed expression: {exc}") from exc
    model.meta = meta
    return model


def parse(path) -> MiqcpModel:
    return loads(Path(path).read_text(encoding="utf-8"))


def _meta_value(s: str):
    if s in ("True", "False"):
        return s == "True"
    try:
        return float(s)
    except ValueError:
        return s
