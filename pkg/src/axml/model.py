"""Value types for documents, links, mutations and ECA rules.

Everything here is an immutable value.  Trees are shared structurally:
mutating a document builds a new root and reuses every untouched subtree,
so an old root is a free snapshot.
"""

from __future__ import annotations

import datetime
import enum
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Iterator, Optional, Tuple, Union

from axml.errors import AxmlError

if TYPE_CHECKING:
    from axml.paths import PathExpr

MAX_EVENT_DEPTH = 8

RULE_ID_RE = re.compile(r"[A-Za-z0-9_-]+\Z")
DOC_ID_RE = re.compile(r"[A-Za-z0-9_.-]+\Z")


class EventKind(enum.Enum):
    UPDATE = "update"
    ADD = "add"
    MOVE = "move"
    DELETE = "delete"

    def __str__(self) -> str:
        return self.value


# --------------------------------------------------------------------------
# Documents
# --------------------------------------------------------------------------

Node = Union["Element", str]


@dataclass(frozen=True)
class Element:
    """An XML element.  Text children are plain ``str`` values."""

    name: str
    attrs: Tuple[Tuple[str, str], ...] = ()
    children: Tuple[Node, ...] = ()

    def __post_init__(self):
        if not isinstance(self.attrs, tuple):
            object.__setattr__(self, "attrs", tuple(
                self.attrs.items() if isinstance(self.attrs, dict) else self.attrs))
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    def get(self, attr: str, default: Optional[str] = None) -> Optional[str]:
        for key, value in self.attrs:
            if key == attr:
                return value
        return default

    # Nodes are immutable, so both views are computed once per node.
    @cached_property
    def elements(self) -> Tuple["Element", ...]:
        """Element children only; these are what addresses index."""
        return tuple(c for c in self.children if isinstance(c, Element))

    @cached_property
    def element_slots(self) -> Tuple[int, ...]:
        """Position in ``children`` of each element child."""
        return tuple(i for i, c in enumerate(self.children) if isinstance(c, Element))

    def texts(self) -> list[str]:
        """Maximal runs of direct text content."""
        runs: list[str] = []
        pending = False
        for child in self.children:
            if isinstance(child, str):
                if pending:
                    runs[-1] += child
                else:
                    runs.append(child)
                    pending = True
            else:
                pending = False
        return runs

    def iter(self, path: Tuple[int, ...] = ()) -> Iterator[Tuple[Tuple[int, ...], "Element"]]:
        """Yield ``(path, element)`` for this subtree in document order."""
        yield path, self
        for i, child in enumerate(self.elements):
            yield from child.iter(path + (i,))

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.elements)


# DocTree is just the root element.
DocTree = Element


def normalize_text(el: Element) -> Element:
    """Merge adjacent text children and drop empty ones, recursively."""
    children: list[Node] = []
    for child in el.children:
        if isinstance(child, str):
            if not child:
                continue
            if children and isinstance(children[-1], str):
                children[-1] += child
                continue
            children.append(child)
        else:
            children.append(normalize_text(child))
    out = tuple(children)
    if out == el.children:
        return el
    return Element(el.name, el.attrs, out)


@dataclass(frozen=True, order=True)
class NodeAddress:
    """Document id plus element-child indexes from the root (empty = root)."""

    doc_id: str
    path: Tuple[int, ...] = ()

    def __post_init__(self):
        if not isinstance(self.path, tuple):
            object.__setattr__(self, "path", tuple(self.path))

    def __str__(self) -> str:
        return format_href(self)

    def child(self, index: int) -> "NodeAddress":
        return NodeAddress(self.doc_id, self.path + (index,))

    def is_within(self, other: "NodeAddress") -> bool:
        """True if self is other or one of its descendants."""
        return self.doc_id == other.doc_id and self.path[:len(other.path)] == other.path


_HREF_RE = re.compile(r"([A-Za-z0-9_.-]+)(?:#(/?(?:\d+(?:/\d+)*)?))?\Z")


def parse_href(text: str) -> NodeAddress:
    m = _HREF_RE.match(text.strip())
    if not m:
        raise AxmlError("BAD_HREF", f"cannot parse href {text!r}", href=text)
    frag = (m.group(2) or "").strip("/")
    path = tuple(int(p) for p in frag.split("/")) if frag else ()
    return NodeAddress(m.group(1), path)


def format_href(addr: NodeAddress) -> str:
    return addr.doc_id + "#/" + "/".join(str(i) for i in addr.path)


def resolve(root: Optional[Element], path: Tuple[int, ...]) -> Optional[Element]:
    node = root
    for index in path:
        if node is None:
            return None
        kids = node.elements
        if not 0 <= index < len(kids):
            return None
        node = kids[index]
    return node


@dataclass(frozen=True)
class DocMeta:
    doc_id: str
    name: str
    created: datetime.date
    version: int = 1
    author: str = ""


@dataclass(frozen=True)
class Link:
    link_id: str
    origin: NodeAddress
    destinations: Tuple[NodeAddress, ...]

    def __post_init__(self):
        if not isinstance(self.destinations, tuple):
            object.__setattr__(self, "destinations", tuple(self.destinations))

    def endpoints(self) -> Tuple[NodeAddress, ...]:
        return (self.origin,) + self.destinations


@dataclass(frozen=True)
class MutationOp:
    kind: EventKind
    target: NodeAddress
    payload: Optional[Element] = None
    destination: Optional[NodeAddress] = None


@dataclass(frozen=True)
class EventOccurrence:
    """A mutation that happened.

    ``rule_id`` is None for user-originated occurrences.  ``state`` is the
    in-memory document map the target is matched against (pre-mutation for
    delete/move, post-mutation otherwise); occurrences reloaded from disk
    have no state.
    """

    seq: int
    kind: EventKind
    target: NodeAddress
    rule_id: Optional[str] = None
    cascade_depth: int = 0
    rolled_back: bool = False
    state: Optional[object] = field(default=None, compare=False, repr=False, hash=False)

    @property
    def origin(self) -> str:
        return "user" if self.rule_id is None else "rule"


# --------------------------------------------------------------------------
# Rules
# --------------------------------------------------------------------------

class CompositeOp(enum.Enum):
    AND = "and"
    OR = "or"
    SEQ = "seq"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Primitive:
    kind: EventKind
    target: Optional["PathExpr"] = None


@dataclass(frozen=True)
class Composite:
    op: CompositeOp
    operands: Tuple["EventSpec", ...]

    def __post_init__(self):
        if not isinstance(self.operands, tuple):
            object.__setattr__(self, "operands", tuple(self.operands))


EventSpec = Union[Primitive, Composite]


@dataclass(frozen=True)
class Query:
    path: "PathExpr"
    doc_id: Optional[str] = None


@dataclass(frozen=True)
class Condition:
    queries: Tuple[Query, ...] = ()

    def __post_init__(self):
        if not isinstance(self.queries, tuple):
            object.__setattr__(self, "queries", tuple(self.queries))


@dataclass(frozen=True)
class ActionOp:
    kind: EventKind
    target: "PathExpr"
    payload: Optional[Element] = None
    destination: Optional["PathExpr"] = None
    doc_id: Optional[str] = None


@dataclass(frozen=True)
class Action:
    ops: Tuple[ActionOp, ...]

    def __post_init__(self):
        if not isinstance(self.ops, tuple):
            object.__setattr__(self, "ops", tuple(self.ops))


@dataclass(frozen=True)
class Rule:
    id: str
    event: EventSpec
    condition: Condition
    action: Action


@dataclass(frozen=True)
class Violation:
    code: str
    where: str
    detail: str = ""


def event_depth(spec: EventSpec) -> int:
    """Nesting depth: 0 for a primitive, 1 + deepest operand for a composite."""
    if isinstance(spec, Composite):
        return 1 + max((event_depth(s) for s in spec.operands), default=0)
    return 0


def has_seq(spec: EventSpec) -> bool:
    if isinstance(spec, Composite):
        return spec.op is CompositeOp.SEQ or any(has_seq(s) for s in spec.operands)
    return False


def _check_event(spec, where: str, out: list[Violation], depth: int) -> None:
    if isinstance(spec, Primitive):
        if not isinstance(spec.kind, EventKind):
            out.append(Violation("BAD_EVENT_KIND", where, repr(spec.kind)))
        if spec.target is not None and not spec.target.steps:
            out.append(Violation("EMPTY_PATH", where + "/target"))
        return
    if not isinstance(spec, Composite):
        out.append(Violation("BAD_EVENT", where, type(spec).__name__))
        return
    if not isinstance(spec.op, CompositeOp):
        out.append(Violation("BAD_OPERATOR", where, repr(spec.op)))
    if len(spec.operands) < 2:
        out.append(Violation("COMPOSITE_ARITY", where, f"{len(spec.operands)} operand(s)"))
    if depth == MAX_EVENT_DEPTH:
        out.append(Violation("DEPTH_EXCEEDED", where, f"nesting deeper than {MAX_EVENT_DEPTH}"))
        return
    for i, operand in enumerate(spec.operands):
        _check_event(operand, f"{where}/{i}", out, depth + 1)


def validate_rule(rule: Rule) -> list[Violation]:
    """Return every invariant the rule breaks; an empty list means valid."""
    out: list[Violation] = []
    if not isinstance(rule.id, str) or not RULE_ID_RE.match(rule.id):
        out.append(Violation("BAD_RULE_ID", "id", repr(rule.id)))
    _check_event(rule.event, "event", out, 0)
    for i, query in enumerate(rule.condition.queries):
        if not query.path.steps:
            out.append(Violation("EMPTY_PATH", f"condition/{i}"))
    if not rule.action.ops:
        out.append(Violation("EMPTY_ACTION", "action"))
    for i, op in enumerate(rule.action.ops):
        where = f"action/{i}"
        if not isinstance(op.kind, EventKind):
            out.append(Violation("BAD_EVENT_KIND", where, repr(op.kind)))
            continue
        if not op.target.steps:
            out.append(Violation("EMPTY_PATH", where + "/target"))
        if op.kind in (EventKind.ADD, EventKind.UPDATE) and op.payload is None:
            out.append(Violation("MISSING_PAYLOAD", where))
        if op.kind is EventKind.MOVE and op.destination is None:
            out.append(Violation("MISSING_DESTINATION", where))
    return out


def normalize_event_spec(spec: EventSpec) -> EventSpec:
    """Flatten nested AND-in-AND and OR-in-OR; SEQ keeps its shape."""
    if event_depth(spec) > MAX_EVENT_DEPTH:
        raise AxmlError("DEPTH_EXCEEDED", f"event nesting deeper than {MAX_EVENT_DEPTH}")
    return _normalize(spec)


def _normalize(spec: EventSpec) -> EventSpec:
    if isinstance(spec, Primitive):
        return spec
    operands: list[EventSpec] = []
    for operand in spec.operands:
        operand = _normalize(operand)
        if (spec.op is not CompositeOp.SEQ and isinstance(operand, Composite)
                and operand.op is spec.op):
            operands.extend(operand.operands)
        else:
            operands.append(operand)
    return Composite(spec.op, tuple(operands))
