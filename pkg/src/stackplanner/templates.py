"""A deliberately small template language for the prompt files.

Supported syntax::

    {{ name }}                        substitution (unknown name is an error)
    {% if name %} ... {% endif %}     truthiness test (missing name is false)
    {% if name == "literal" %} ... {% endif %}
    {% if a == "x" or b %} ... {% endif %}

Blocks nest. There are no loops, filters, or else branches.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping, Union


class TemplateError(Exception):
    pass


class UnknownVariable(TemplateError):
    pass


class UnbalancedBlock(TemplateError):
    pass


_TOKEN = re.compile(r"(\{\{.*?\}\}|\{%.*?%\})", re.DOTALL)
_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_VAR = re.compile(rf"^\{{\{{\s*({_NAME})\s*\}}\}}$")
_TAG = re.compile(r"^\{%\s*(.*?)\s*%\}$", re.DOTALL)
_CLAUSE = re.compile(rf'^({_NAME})(?:\s*==\s*"([^"]*)")?$')


@dataclass
class _If:
    clauses: list[tuple[str, str | None]]
    body: list["_Node"] = field(default_factory=list)


@dataclass
class _Var:
    name: str


_Node = Union[str, _Var, _If]


def _parse_condition(expr: str) -> list[tuple[str, str | None]]:
    clauses = []
    for part in re.split(r"\s+or\s+", expr.strip()):
        m = _CLAUSE.match(part.strip())
        if not m:
            raise TemplateError(f"unsupported condition: {expr!r}")
        clauses.append((m.group(1), m.group(2)))
    return clauses


@lru_cache(maxsize=128)
def _parse(template: str) -> tuple[_Node, ...]:
    root: list[_Node] = []
    stack: list[list[_Node]] = [root]
    for piece in _TOKEN.split(template):
        if not piece:
            continue
        if piece.startswith("{{"):
            m = _VAR.match(piece)
            if not m:
                raise TemplateError(f"bad substitution: {piece!r}")
            stack[-1].append(_Var(m.group(1)))
        elif piece.startswith("{%"):
            tag = _TAG.match(piece).group(1)
            if tag == "endif":
                if len(stack) == 1:
                    raise UnbalancedBlock("endif without matching if")
                stack.pop()
            elif tag.startswith("if ") or tag == "if":
                node = _If(_parse_condition(tag[2:]) if tag != "if" else [])
                if not node.clauses:
                    raise UnbalancedBlock("if block without condition")
                stack[-1].append(node)
                stack.append(node.body)
            else:
                raise TemplateError(f"unsupported tag: {tag!r}")
        else:
            stack[-1].append(piece)
    if len(stack) != 1:
        raise UnbalancedBlock("if block not closed")
    return tuple(root)


def _truthy(variables: Mapping[str, Any], name: str, literal: str | None) -> bool:
    value = variables.get(name)
    if literal is None:
        return bool(value)
    return value is not None and str(value) == literal


def _emit(nodes, variables: Mapping[str, Any], out: list[str]) -> None:
    for node in nodes:
        if isinstance(node, str):
            out.append(node)
        elif isinstance(node, _Var):
            if node.name not in variables:
                raise UnknownVariable(node.name)
            value = variables[node.name]
            out.append("" if value is None else str(value))
        elif any(_truthy(variables, name, lit) for name, lit in node.clauses):
            _emit(node.body, variables, out)


def render_template(template: str, variables: Mapping[str, Any]) -> str:
    out: list[str] = []
    _emit(_parse(template), variables, out)
    return "".join(out)


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    """Read a bundled prompt file from ``stackplanner/prompts``."""
    return resources.files("stackplanner").joinpath("prompts", name).read_text(encoding="utf-8")
