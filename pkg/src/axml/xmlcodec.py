"""Reading and writing the on-disk XML formats.

``parse_document`` is the well-formedness gate every other reader goes
through.  The structured formats (rules, links, registry, log) ignore
whitespace-only text between their elements, so they can be written
pretty-printed; document payloads are always written byte-exact.
"""

from __future__ import annotations

import datetime
import unicodedata
import xml.parsers.expat as expat
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple, Union

from axml.errors import AxmlError, MalformedXml, SchemaError
from axml.model import (
    DOC_ID_RE, Action, ActionOp, Composite, CompositeOp, Condition, DocMeta, Element,
    EventKind, EventOccurrence, EventSpec, Link, NodeAddress, Primitive, Query, Rule,
    format_href, normalize_event_spec, parse_href, validate_rule,
)
from axml.paths import PathExpr, parse_path

XML_DECL = b'<?xml version="1.0" encoding="UTF-8"?>\n'


# --------------------------------------------------------------------------
# Generic documents
# --------------------------------------------------------------------------

class _Builder:
    def __init__(self):
        self.stack: list[Tuple[str, list, list]] = []
        self.root: Optional[Element] = None

    def start(self, name, attrs):
        pairs = list(zip(attrs[0::2], attrs[1::2]))
        self.stack.append((name, pairs, []))

    def end(self, name):
        tag, attrs, children = self.stack.pop()
        el = Element(tag, tuple(attrs), tuple(children))
        if self.stack:
            self.stack[-1][2].append(el)
        else:
            self.root = el

    def text(self, data):
        if not self.stack:
            return
        kids = self.stack[-1][2]
        if kids and isinstance(kids[-1], str):
            kids[-1] += data
        else:
            kids.append(data)


def parse_document(data: Union[bytes, str]) -> Element:
    """Parse well-formed XML into an :class:`Element` tree.

    Comments and processing instructions are dropped; CDATA sections become
    text.  Entity declarations are refused, so only the predefined entities
    and character references are ever expanded.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    builder = _Builder()
    parser = expat.ParserCreate()
    parser.ordered_attributes = True
    parser.buffer_text = True
    parser.StartElementHandler = builder.start
    parser.EndElementHandler = builder.end
    parser.CharacterDataHandler = builder.text

    def refuse_entity(name, *_):
        raise MalformedXml(parser.CurrentLineNumber, parser.CurrentColumnNumber + 1,
                           f"entity declaration {name!r} not supported")

    parser.EntityDeclHandler = refuse_entity
    try:
        parser.Parse(data, True)
    except expat.ExpatError as exc:
        raise MalformedXml(exc.lineno, exc.offset + 1, expat.errors.messages[exc.code]) from None
    except (ValueError, UnicodeError, RecursionError) as exc:
        raise MalformedXml(parser.CurrentLineNumber, parser.CurrentColumnNumber + 1,
                           str(exc) or type(exc).__name__) from None
    if builder.root is None:
        raise MalformedXml(1, 1, "no element found")
    return builder.root


def _escape_text(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace("\r", "&#13;"))


def _escape_attr(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;").replace("\t", "&#9;").replace("\n", "&#10;")
            .replace("\r", "&#13;"))


def _open_tag(el: Element) -> str:
    attrs = "".join(f' {k}="{_escape_attr(v)}"' for k, v in el.attrs)
    return f"<{el.name}{attrs}"


def _write(el: Element, out: list[str], indent: Optional[str], level: int,
           verbatim: frozenset) -> None:
    head = _open_tag(el)
    if not el.children:
        out.append(head + "/>")
        return
    pretty = (indent is not None and el.name not in verbatim
              and all(isinstance(c, Element) for c in el.children))
    out.append(head + ">")
    for child in el.children:
        if isinstance(child, str):
            out.append(_escape_text(child))
            continue
        if pretty:
            out.append("\n" + indent * (level + 1))
            _write(child, out, indent, level + 1, verbatim)
        else:
            _write(child, out, None, level + 1, verbatim)
    if pretty:
        out.append("\n" + indent * level)
    out.append(f"</{el.name}>")


def to_string(el: Element, indent: Optional[str] = None,
              verbatim: Iterable[str] = ()) -> str:
    """Serialize without a declaration.

    With ``indent``, elements holding only element children are laid out one
    child per line, except inside elements named in ``verbatim``.
    """
    out: list[str] = []
    _write(el, out, indent, 0, frozenset(verbatim))
    return "".join(out)


def serialize_document(el: Element, indent: Optional[str] = None,
                       verbatim: Iterable[str] = ()) -> bytes:
    return XML_DECL + to_string(el, indent, verbatim).encode("utf-8") + b"\n"


def _pretty(el: Element) -> bytes:
    return serialize_document(el, "  ", verbatim=("payload",))


# --------------------------------------------------------------------------
# Rules
# --------------------------------------------------------------------------

def _fold(name: str) -> str:
    decomposed = unicodedata.normalize("NFKD", name)
    bare = "".join(c for c in decomposed if not unicodedata.combining(c))
    return bare.lower().replace("-", "_")


_ELEMENT_ALIASES = {
    "rule": "rule", "regle": "rule",
    "rules": "rules", "regles": "rules", "fichier_regle": "rules", "fichier_regles": "rules",
    "event": "event", "evenement": "event", "evenement_primitif": "event",
    "composite": "composite", "evenement_composite": "composite",
    "condition": "condition",
    "query": "query", "requete": "query",
    "action": "action",
    "payload": "payload",
}

_KIND_ALIASES = {
    "update": EventKind.UPDATE, "updated": EventKind.UPDATE,
    "add": EventKind.ADD, "added": EventKind.ADD,
    # "remove" relocates a node; destruction is "delete".
    "move": EventKind.MOVE, "remove": EventKind.MOVE, "removed": EventKind.MOVE,
    "delete": EventKind.DELETE, "deleted": EventKind.DELETE,
}

_OP_ALIASES = {"and": CompositeOp.AND, "or": CompositeOp.OR,
               "seq": CompositeOp.SEQ, "sequence": CompositeOp.SEQ}


def canonical_name(name: str) -> Optional[str]:
    return _ELEMENT_ALIASES.get(_fold(name))


def _children(el: Element, where: str) -> list[Element]:
    """Element children; stray non-blank text is a schema error."""
    for child in el.children:
        if isinstance(child, str) and child.strip():
            raise SchemaError(where, f"unexpected text {child.strip()[:20]!r}")
    return list(el.elements)


def _path_attr(el: Element, attr: str, where: str, required: bool) -> Optional[PathExpr]:
    text = el.get(attr)
    if text is None:
        if required:
            raise SchemaError(where, f"missing {attr!r} attribute")
        return None
    try:
        return parse_path(text)
    except AxmlError as exc:
        raise SchemaError(f"{where}/@{attr}", exc.message) from None


def _kind(el: Element, where: str) -> EventKind:
    text = el.get("kind")
    if text is None:
        raise SchemaError(where, "missing 'kind' attribute")
    try:
        return _KIND_ALIASES[text.strip().lower()]
    except KeyError:
        raise SchemaError(where, f"unknown event kind {text!r}") from None


def _parse_event(el: Element, where: str) -> EventSpec:
    name = canonical_name(el.name)
    if name == "event":
        if _children(el, where):
            raise SchemaError(where, "event takes no child elements")
        return Primitive(_kind(el, where), _path_attr(el, "target", where, False))
    if name == "composite":
        op_text = (el.get("op") or "").strip().lower()
        if op_text not in _OP_ALIASES:
            raise SchemaError(where, f"unknown operator {el.get('op')!r}")
        operands = []
        for i, child in enumerate(_children(el, where)):
            operands.append(_parse_event(child, f"{where}/{i}"))
        return Composite(_OP_ALIASES[op_text], tuple(operands))
    raise SchemaError(where, f"unexpected element <{el.name}> in event")


def _parse_condition(el: Element, where: str) -> list[Query]:
    kids = list(el.elements)
    if not kids:
        # A bare condition body is read as a single unscoped query.
        text = "".join(el.texts()).strip()
        if not text:
            return []
        return [Query(_parse_query_text(text, where))]
    queries = []
    for i, child in enumerate(_children(el, where)):
        sub = f"{where}/{i}"
        if canonical_name(child.name) != "query":
            raise SchemaError(sub, f"unexpected element <{child.name}> in condition")
        if child.elements:
            raise SchemaError(sub, "query takes text only")
        queries.append(Query(_parse_query_text("".join(child.texts()).strip(), sub),
                             child.get("doc")))
    return queries


def _parse_query_text(text: str, where: str) -> PathExpr:
    try:
        return parse_path(text)
    except AxmlError as exc:
        raise SchemaError(where, exc.message) from None


def _parse_action(el: Element, where: str) -> ActionOp:
    payload = None
    for child in _children(el, where):
        if canonical_name(child.name) != "payload" or payload is not None:
            raise SchemaError(where, f"unexpected element <{child.name}> in action")
        payload = _parse_payload(child, where + "/payload")
    return ActionOp(
        kind=_kind(el, where),
        target=_path_attr(el, "target", where, True),
        payload=payload,
        destination=_path_attr(el, "destination", where, False),
        doc_id=el.get("doc"),
    )


def _parse_payload(el: Element, where: str) -> Element:
    kids = _children(el, where)
    if len(kids) != 1:
        raise SchemaError(where, f"payload needs exactly one element, found {len(kids)}")
    return kids[0]


def parse_rule(tree: Element) -> Rule:
    """Build a :class:`Rule` from a ``<rule>`` tree (French aliases accepted)."""
    if canonical_name(tree.name) != "rule":
        raise SchemaError("/", f"expected <rule>, found <{tree.name}>")
    rid = tree.get("id", tree.get("ID"))
    if rid is None:
        raise SchemaError("rule", "missing 'id' attribute")
    where = f"rule[{rid}]"
    events: list[EventSpec] = []
    queries: list[Query] = []
    ops: list[ActionOp] = []
    for i, child in enumerate(_children(tree, where)):
        sub = f"{where}/{i}"
        name = canonical_name(child.name)
        if name in ("event", "composite"):
            events.append(_parse_event(child, sub))
        elif name == "condition":
            queries.extend(_parse_condition(child, sub))
        elif name == "action":
            ops.append(_parse_action(child, sub))
        else:
            raise SchemaError(sub, f"unknown element <{child.name}>")
    if len(events) != 1:
        raise SchemaError(where, f"expected exactly one event specification, found {len(events)}")
    rule = Rule(rid, events[0], Condition(tuple(queries)), Action(tuple(ops)))
    violations = validate_rule(rule)
    if violations:
        reason = ", ".join(f"{v.code} at {v.where}" for v in violations)
        raise SchemaError(where, reason, violations)
    return rule


def _event_to_xml(spec: EventSpec) -> Element:
    if isinstance(spec, Primitive):
        attrs = [("kind", spec.kind.value)]
        if spec.target is not None:
            attrs.append(("target", str(spec.target)))
        return Element("event", tuple(attrs))
    return Element("composite", (("op", spec.op.value),),
                   tuple(_event_to_xml(s) for s in spec.operands))


def serialize_rule(rule: Rule) -> Element:
    children: list[Element] = [_event_to_xml(normalize_event_spec(rule.event))]
    if rule.condition.queries:
        queries = []
        for q in rule.condition.queries:
            attrs = (("doc", q.doc_id),) if q.doc_id is not None else ()
            queries.append(Element("query", attrs, (str(q.path),)))
        children.append(Element("condition", (), tuple(queries)))
    for op in rule.action.ops:
        attrs = [("kind", op.kind.value), ("target", str(op.target))]
        if op.destination is not None:
            attrs.append(("destination", str(op.destination)))
        if op.doc_id is not None:
            attrs.append(("doc", op.doc_id))
        body = (Element("payload", (), (op.payload,)),) if op.payload is not None else ()
        children.append(Element("action", tuple(attrs), body))
    return Element("rule", (("id", rule.id),), tuple(children))


def _check_unique_rules(rules: Sequence[Rule]) -> None:
    seen = set()
    for rule in rules:
        if rule.id in seen:
            raise AxmlError("DUPLICATE_RULE_ID", f"rule id {rule.id!r} appears twice", id=rule.id)
        seen.add(rule.id)


def parse_rule_file(data: Union[bytes, Element]) -> list[Rule]:
    tree = data if isinstance(data, Element) else parse_document(data)
    if canonical_name(tree.name) != "rules":
        raise SchemaError("/", f"expected <rules>, found <{tree.name}>")
    rules = [parse_rule(child) for child in _children(tree, "rules")]
    _check_unique_rules(rules)
    return rules


def rule_file_tree(rules: Sequence[Rule]) -> Element:
    _check_unique_rules(rules)
    return Element("rules", (), tuple(serialize_rule(r) for r in rules))


def serialize_rule_file(rules: Sequence[Rule]) -> bytes:
    return _pretty(rule_file_tree(rules))


# --------------------------------------------------------------------------
# Links
# --------------------------------------------------------------------------

def _href(el: Element, where: str) -> NodeAddress:
    text = el.get("href", el.get("Href"))
    if text is None:
        raise SchemaError(where, "missing 'href' attribute")
    return parse_href(text)


def parse_link_file(data: Union[bytes, Element]) -> list[Link]:
    tree = data if isinstance(data, Element) else parse_document(data)
    if tree.name != "links":
        raise SchemaError("/", f"expected <links>, found <{tree.name}>")
    links: list[Link] = []
    seen = set()
    for i, el in enumerate(_children(tree, "links")):
        where = f"links/{i}"
        if el.name != "link":
            raise SchemaError(where, f"unexpected element <{el.name}>")
        link_id = el.get("id")
        if not link_id:
            raise SchemaError(where, "missing 'id' attribute")
        if link_id in seen:
            raise AxmlError("DUPLICATE_LINK_ID", f"link id {link_id!r} appears twice", id=link_id)
        seen.add(link_id)
        origins, dests = [], []
        for part in _children(el, where):
            if part.name == "origin":
                origins.append(_href(part, where))
            elif part.name == "destination":
                dests.append(_href(part, where))
            else:
                raise SchemaError(where, f"unexpected element <{part.name}> in link")
        if len(origins) != 1:
            raise SchemaError(where, f"link needs exactly one origin, found {len(origins)}")
        if not dests:
            raise AxmlError("NO_DESTINATION", f"link {link_id!r} has no destination",
                            link_id=link_id)
        links.append(Link(link_id, origins[0], tuple(dests)))
    return links


def serialize_link_file(links: Sequence[Link]) -> bytes:
    items = []
    for link in links:
        parts = [Element("origin", (("href", format_href(link.origin)),))]
        parts += [Element("destination", (("href", format_href(d)),)) for d in link.destinations]
        items.append(Element("link", (("id", link.link_id),), tuple(parts)))
    return _pretty(Element("links", (), tuple(items)))


# --------------------------------------------------------------------------
# Document registry
# --------------------------------------------------------------------------

_META_FIELDS = ("name", "created", "version", "author")


def parse_registry(data: Union[bytes, Element]) -> list[DocMeta]:
    tree = data if isinstance(data, Element) else parse_document(data)
    if tree.name != "documents":
        raise SchemaError("/", f"expected <documents>, found <{tree.name}>")
    metas: list[DocMeta] = []
    seen = set()
    for i, el in enumerate(_children(tree, "documents")):
        where = f"documents/{i}"
        if el.name != "document":
            raise SchemaError(where, f"unexpected element <{el.name}>")
        doc_id = el.get("id", el.get("ID"))
        if not doc_id or not DOC_ID_RE.match(doc_id):
            raise SchemaError(where, f"bad or missing document id {doc_id!r}")
        if doc_id in seen:
            raise AxmlError("DUPLICATE_DOC_ID", f"document id {doc_id!r} appears twice",
                            doc_id=doc_id)
        seen.add(doc_id)
        values = {k: el.get(k) for k in _META_FIELDS if el.get(k) is not None}
        for child in _children(el, where):
            if child.name not in _META_FIELDS:
                raise SchemaError(where, f"unexpected element <{child.name}>")
            values[child.name] = "".join(child.texts())
        for key in ("name", "created", "version"):
            if key not in values:
                raise SchemaError(where, f"missing <{key}>")
        try:
            created = datetime.date.fromisoformat(values["created"].strip())
        except ValueError:
            raise AxmlError("BAD_DATE", f"bad creation date {values['created']!r}",
                            doc_id=doc_id) from None
        try:
            version = int(values["version"].strip())
        except ValueError:
            version = 0
        if version < 1:
            raise AxmlError("BAD_VERSION", f"bad version {values['version']!r}", doc_id=doc_id)
        metas.append(DocMeta(doc_id, values["name"], created, version, values.get("author", "")))
    return metas


def registry_tree(metas: Sequence[DocMeta]) -> Element:
    items = []
    for m in metas:
        fields = (
            Element("name", (), (m.name,) if m.name else ()),
            Element("created", (), (m.created.isoformat(),)),
            Element("version", (), (str(m.version),)),
            Element("author", (), (m.author,) if m.author else ()),
        )
        items.append(Element("document", (("id", m.doc_id),), fields))
    return Element("documents", (), tuple(items))


def serialize_registry(metas: Sequence[DocMeta]) -> bytes:
    return _pretty(registry_tree(metas))


# --------------------------------------------------------------------------
# Event log
# --------------------------------------------------------------------------

def occurrence_to_xml(occ: EventOccurrence) -> Element:
    attrs = [("seq", str(occ.seq)), ("kind", occ.kind.value),
             ("target", format_href(occ.target)), ("origin", occ.origin)]
    if occ.rule_id is not None:
        attrs.append(("rule", occ.rule_id))
    attrs.append(("depth", str(occ.cascade_depth)))
    if occ.rolled_back:
        attrs.append(("rolled-back", "true"))
    return Element("occurrence", tuple(attrs))


def occurrence_from_xml(el: Element, where: str = "log") -> EventOccurrence:
    try:
        return EventOccurrence(
            seq=int(el.get("seq")),
            kind=EventKind(el.get("kind")),
            target=parse_href(el.get("target") or ""),
            rule_id=el.get("rule"),
            cascade_depth=int(el.get("depth", "0")),
            rolled_back=el.get("rolled-back") == "true",
        )
    except (TypeError, ValueError, AxmlError) as exc:
        raise SchemaError(where, f"bad occurrence: {exc}") from None


def parse_log(data: Union[bytes, Element]) -> list[EventOccurrence]:
    tree = data if isinstance(data, Element) else parse_document(data)
    if tree.name != "log":
        raise SchemaError("/", f"expected <log>, found <{tree.name}>")
    occs = [occurrence_from_xml(el, f"log/{i}") for i, el in enumerate(_children(tree, "log"))]
    for before, after in zip(occs, occs[1:]):
        if after.seq <= before.seq:
            raise SchemaError("log", f"sequence numbers not increasing at {after.seq}")
    return occs


def serialize_log(occs: Sequence[EventOccurrence]) -> bytes:
    return _pretty(Element("log", (), tuple(occurrence_to_xml(o) for o in occs)))


# --------------------------------------------------------------------------
# Embedded rule acquisition
# --------------------------------------------------------------------------

@dataclass
class AcquisitionResult:
    """Rules pulled out of a client document.

    ``removal_sites`` are element addresses in the original tree;
    ``raw_sites`` hold the same positions counted over all children (text
    included), which is what :func:`restore_embedded` needs.  ``stripped_doc``
    is None when the document root was itself a rule container.
    """

    rules: list[Rule]
    stripped_doc: Optional[Element]
    removal_sites: list[NodeAddress] = field(default_factory=list)
    raw_sites: list[Tuple[int, ...]] = field(default_factory=list)
    removed: list[Element] = field(default_factory=list)
    errors: list[Tuple[NodeAddress, AxmlError]] = field(default_factory=list)


def _is_rule_container(el: Element) -> bool:
    return canonical_name(el.name) in ("rule", "rules")


def _harvest(el: Element, site: NodeAddress, result: AcquisitionResult) -> None:
    if canonical_name(el.name) == "rule":
        try:
            result.rules.append(parse_rule(el))
        except AxmlError as exc:
            result.errors.append((site, exc))
        return
    for i, child in enumerate(el.elements):
        _harvest(child, site.child(i), result)


def extract_embedded_rules(doc: Element, doc_id: Optional[str] = None) -> AcquisitionResult:
    """Remove every maximal ``rule``/``rules`` subtree and parse what was removed."""
    if doc_id is None:
        doc_id = doc.get("id") or ""
    result = AcquisitionResult([], None)
    root = NodeAddress(doc_id, ())
    if _is_rule_container(doc):
        result.removal_sites.append(root)
        result.raw_sites.append(())
        result.removed.append(doc)
        _harvest(doc, root, result)
        return result

    def strip(el: Element, addr: NodeAddress, raw: Tuple[int, ...]) -> Element:
        kept = []
        changed = False
        element_index = 0
        for raw_index, child in enumerate(el.children):
            if isinstance(child, str):
                kept.append(child)
                continue
            child_addr = addr.child(element_index)
            element_index += 1
            if _is_rule_container(child):
                result.removal_sites.append(child_addr)
                result.raw_sites.append(raw + (raw_index,))
                result.removed.append(child)
                _harvest(child, child_addr, result)
                changed = True
                continue
            new_child = strip(child, child_addr, raw + (raw_index,))
            changed = changed or new_child is not child
            kept.append(new_child)
        return Element(el.name, el.attrs, tuple(kept)) if changed else el

    result.stripped_doc = strip(doc, root, ())
    return result


def restore_embedded(result: AcquisitionResult) -> Element:
    """Put the removed subtrees back at their recorded positions."""
    if result.stripped_doc is None:
        return result.removed[0]

    def insert(el: Element, raw: Tuple[int, ...], sub: Element) -> Element:
        kids = list(el.children)
        if len(raw) == 1:
            kids.insert(raw[0], sub)
        else:
            # Earlier siblings are already restored, so raw indexes line up.
            kids[raw[0]] = insert(kids[raw[0]], raw[1:], sub)
        return Element(el.name, el.attrs, tuple(kids))

    doc = result.stripped_doc
    for raw, sub in zip(result.raw_sites, result.removed):
        doc = insert(doc, raw, sub)
    return doc
