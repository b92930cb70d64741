"""A small path-selector language over element trees.

Grammar::

    path      := sep step (sep step)*
    sep       := '/' | '//'
    step      := name-test predicate?
    name-test := NAME | '*'
    predicate := '[' '@' NAME '=' literal ']'
               | '[' 'text()' '=' literal ']'
               | '[' INTEGER ']'

``/`` selects element children, ``//`` selects children of any
descendant-or-self node (so ``//b[2]`` is "every second b among its
siblings", as in XPath).  Addresses index element children only.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Tuple, Union

from axml.errors import AxmlError, PathSyntaxError
from axml.model import Condition, Element, NodeAddress

NAME_RE = re.compile(r"[^\W\d][\w.\-]*", re.UNICODE)
_INT_RE = re.compile(r"[0-9]+")
_WS_RE = re.compile(r"\s*")


class Axis(enum.Enum):
    CHILD = "/"
    DESCENDANT = "//"


@dataclass(frozen=True)
class AttrEquals:
    name: str
    value: str

    def __str__(self) -> str:
        return f"[@{self.name}={_quote(self.value)}]"


@dataclass(frozen=True)
class TextEquals:
    value: str

    def __str__(self) -> str:
        return f"[text()={_quote(self.value)}]"


@dataclass(frozen=True)
class Position:
    index: int

    def __str__(self) -> str:
        return f"[{self.index}]"


Predicate = Union[AttrEquals, TextEquals, Position]


@dataclass(frozen=True)
class Step:
    axis: Axis
    name: str  # "*" is the wildcard
    predicate: Optional[Predicate] = None

    def __str__(self) -> str:
        return f"{self.axis.value}{self.name}{self.predicate or ''}"

    def name_matches(self, el: Element) -> bool:
        return self.name == "*" or self.name == el.name


@dataclass(frozen=True)
class PathExpr:
    steps: Tuple[Step, ...]

    def __post_init__(self):
        if not isinstance(self.steps, tuple):
            object.__setattr__(self, "steps", tuple(self.steps))

    def __str__(self) -> str:
        return "".join(str(s) for s in self.steps)


def _quote(value: str) -> str:
    if "'" not in value:
        return f"'{value}'"
    if '"' not in value:
        return f'"{value}"'
    raise AxmlError("PATH_SYNTAX", f"literal {value!r} holds both quote kinds")


def parse_path(text: str) -> PathExpr:
    """Parse ``text`` into a :class:`PathExpr` or raise ``PATH_SYNTAX``."""
    pos = 0
    n = len(text)
    steps: list[Step] = []

    def skip_ws(p: int) -> int:
        return _WS_RE.match(text, p).end()

    pos = skip_ws(pos)
    while pos < n:
        if text.startswith("//", pos):
            axis = Axis.DESCENDANT
            pos += 2
        elif text.startswith("/", pos):
            axis = Axis.CHILD
            pos += 1
        else:
            raise PathSyntaxError(pos, "expected '/' or '//'", text)
        if text.startswith("*", pos):
            name = "*"
            pos += 1
        else:
            m = NAME_RE.match(text, pos)
            if not m:
                raise PathSyntaxError(pos, "expected a name or '*'", text)
            name = m.group()
            pos = m.end()
        predicate = None
        if text.startswith("[", pos):
            predicate, pos = _parse_predicate(text, pos + 1)
        steps.append(Step(axis, name, predicate))
        pos = skip_ws(pos)
    if not steps:
        raise PathSyntaxError(pos, "a path needs at least one step", text)
    return PathExpr(tuple(steps))


def _parse_predicate(text: str, pos: int) -> Tuple[Predicate, int]:
    pos = _WS_RE.match(text, pos).end()
    if text.startswith("@", pos):
        m = NAME_RE.match(text, pos + 1)
        if not m:
            raise PathSyntaxError(pos + 1, "expected an attribute name", text)
        value, pos = _parse_literal(text, _expect(text, m.end(), "="))
        pred: Predicate = AttrEquals(m.group(), value)
    elif text.startswith("text()", pos):
        value, pos = _parse_literal(text, _expect(text, pos + 6, "="))
        pred = TextEquals(value)
    else:
        m = _INT_RE.match(text, pos)
        if not m:
            raise PathSyntaxError(pos, "expected '@name=', 'text()=' or a position", text)
        index = int(m.group())
        if index < 1:
            raise PathSyntaxError(pos, "positions start at 1", text)
        pred = Position(index)
        pos = m.end()
    return pred, _expect(text, pos, "]")


def _expect(text: str, pos: int, token: str) -> int:
    pos = _WS_RE.match(text, pos).end()
    if not text.startswith(token, pos):
        raise PathSyntaxError(pos, f"expected {token!r}", text)
    return _WS_RE.match(text, pos + len(token)).end()


def _parse_literal(text: str, pos: int) -> Tuple[str, int]:
    if pos >= len(text) or text[pos] not in "'\"":
        raise PathSyntaxError(pos, "expected a quoted literal", text)
    end = text.find(text[pos], pos + 1)
    if end < 0:
        raise PathSyntaxError(pos, "unterminated literal", text)
    return text[pos + 1:end], end + 1


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

_Path = Tuple[int, ...]


def _filter(step: Step, parent_path: _Path, kids: Tuple[Element, ...]) -> list[Tuple[_Path, Element]]:
    named = [(parent_path + (i,), k) for i, k in enumerate(kids) if step.name_matches(k)]
    pred = step.predicate
    if pred is None:
        return named
    if isinstance(pred, Position):
        return named[pred.index - 1:pred.index]
    if isinstance(pred, AttrEquals):
        return [(p, k) for p, k in named if k.get(pred.name) == pred.value]
    return [(p, k) for p, k in named if pred.value in k.texts()]


def eval_path(expr: Union[PathExpr, str], doc: Element, doc_id: str = "") -> list[NodeAddress]:
    """Addresses selected by ``expr`` in ``doc``, in document order, no duplicates."""
    if isinstance(expr, str):
        expr = parse_path(expr)
    # The context starts at the virtual document node, whose only child is the root.
    context: Optional[list[Tuple[_Path, Element]]] = None
    for step in expr.steps:
        found: dict[_Path, Element] = {}
        if context is None:
            parents: Iterable[Tuple[Optional[_Path], Tuple[Element, ...]]] = [(None, (doc,))]
            if step.axis is Axis.DESCENDANT:
                parents = [(None, (doc,))] + [(p, el.elements) for p, el in doc.iter()]
        else:
            if step.axis is Axis.CHILD:
                parents = [(p, el.elements) for p, el in context]
            else:
                parents = [(p + q, sub.elements) for p, el in context for q, sub in el.iter()]
        for parent_path, kids in parents:
            if parent_path is None:
                # Children of the document node: the root, addressed by ().
                if step.name_matches(doc) and (
                        step.predicate is None or _filter(step, (), (doc,))):
                    found.setdefault((), doc)
                continue
            for path, el in _filter(step, parent_path, kids):
                found.setdefault(path, el)
        context = sorted(found.items())
        if not context:
            return []
    return [NodeAddress(doc_id, p) for p, _ in context]


def eval_query_over(path: PathExpr, snapshot: Mapping[str, Element],
                    doc_id: Optional[str] = None) -> list[NodeAddress]:
    """Evaluate over one scoped document, or every document in id order."""
    if doc_id is not None:
        if doc_id not in snapshot:
            raise AxmlError("UNKNOWN_DOC", f"no document {doc_id!r}", doc_id=doc_id)
        return eval_path(path, snapshot[doc_id], doc_id)
    out: list[NodeAddress] = []
    for key in sorted(snapshot):
        out.extend(eval_path(path, snapshot[key], key))
    return out


def eval_condition(cond: Condition, snapshot: Mapping[str, Element]) -> bool:
    """True iff every query selects at least one node (vacuously true if none)."""
    for query in cond.queries:
        if query.doc_id is not None:
            if not eval_query_over(query.path, snapshot, query.doc_id):
                return False
        elif not any(eval_path(query.path, snapshot[k]) for k in snapshot):
            return False
    return True
