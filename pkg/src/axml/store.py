"""File-backed document, link and rule base with an append-only event log.

Layout under the store root::

    registry.xml  rules.xml  links.xml  log.xml  docs/<doc_id>.xml  traces/<run>.xml

Everything is loaded on open and written back by :meth:`Store.flush`, one
temp-file-then-rename per dirty file.  The document map is replaced (never
edited in place) on every mutation, so :meth:`Store.snapshot` is O(1) and a
snapshot stays valid while the store keeps changing.
"""

from __future__ import annotations

import bisect
import contextlib
import datetime
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterator, Mapping, Optional, Sequence, Tuple

from axml import xmlcodec
from axml.errors import AxmlError
from axml.model import (
    DOC_ID_RE, DocMeta, Element, EventKind, EventOccurrence, Link, MutationOp, NodeAddress,
    Rule, normalize_text, resolve, validate_rule,
)

Snapshot = Mapping[str, Element]

REGISTRY = "registry.xml"
RULES = "rules.xml"
LINKS = "links.xml"
LOG = "log.xml"


@dataclass
class IntegrityReport:
    dangling_internal: list[Tuple[str, NodeAddress]] = field(default_factory=list)
    dangling_external: list[Tuple[str, str]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.dangling_internal or self.dangling_external)


@dataclass(frozen=True)
class Checkpoint:
    docs: Mapping[str, Element]
    registry: Mapping[str, DocMeta]
    links: Mapping[str, Link]
    rules: Tuple[Rule, ...]
    next_seq: int


# --------------------------------------------------------------------------
# Tree surgery on immutable elements
# --------------------------------------------------------------------------

def _raw_index(el: Element, element_index: int) -> int:
    return el.element_slots[element_index]


def _edit(root: Element, path: Tuple[int, ...], fn) -> Element:
    """Rebuild ``root`` with ``fn(node)`` substituted at ``path`` (None deletes)."""
    if not path:
        return fn(root)
    raw = _raw_index(root, path[0])
    kids = list(root.children)
    new = _edit(kids[raw], path[1:], fn)
    if new is None:
        del kids[raw]
        # keep text runs maximal, as a reload from disk would
        if 0 < raw < len(kids) and isinstance(kids[raw - 1], str) and isinstance(kids[raw], str):
            kids[raw - 1:raw + 1] = [kids[raw - 1] + kids[raw]]
    else:
        kids[raw] = new
    return Element(root.name, root.attrs, tuple(kids))


def _append_child(parent: Element, child: Element) -> Element:
    return Element(parent.name, parent.attrs, parent.children + (child,))


def shift_after_detach(addr: NodeAddress, removed: NodeAddress) -> Optional[NodeAddress]:
    """Where ``addr`` ends up once the subtree at ``removed`` is cut out.

    Returns None for addresses inside the removed subtree.
    """
    if addr.doc_id != removed.doc_id:
        return addr
    if addr.is_within(removed):
        return None
    depth = len(removed.path) - 1
    if (len(addr.path) > depth and addr.path[:depth] == removed.path[:depth]
            and addr.path[depth] > removed.path[depth]):
        path = list(addr.path)
        path[depth] -= 1
        return NodeAddress(addr.doc_id, tuple(path))
    return addr


class Store:
    """An open store.  Use :func:`open_store` to get one."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._docs: dict[str, Element] = {}
        self._registry: dict[str, DocMeta] = {}
        self._links: dict[str, Link] = {}
        self._rules: list[Rule] = []
        self._log: list[EventOccurrence] = []
        self._traces: dict[str, bytes] = {}
        self._dirty: set[str] = set()
        self._dirty_docs: set[str] = set()
        self._dropped_docs: set[str] = set()
        self._by_name: dict[str, set[str]] = {}
        self._by_author: dict[str, set[str]] = {}
        self._by_created: dict[datetime.date, set[str]] = {}

    # -- loading ------------------------------------------------------------

    @classmethod
    def open(cls, path, create: bool = False) -> "Store":
        root = Path(path)
        store = cls(root)
        if create:
            if (root / REGISTRY).exists():
                raise AxmlError("STORE_EXISTS", f"{root} already holds a store")
            (root / "docs").mkdir(parents=True, exist_ok=True)
            store._dirty.update({REGISTRY, RULES, LINKS, LOG})
            store.flush()
            return store
        if not (root / REGISTRY).is_file():
            raise AxmlError("IO", f"{root} is not a store (no {REGISTRY})")
        metas = store._load(REGISTRY, xmlcodec.parse_registry)
        store._rules = store._load(RULES, xmlcodec.parse_rule_file)
        store._links = {l.link_id: l for l in store._load(LINKS, xmlcodec.parse_link_file)}
        store._log = store._load(LOG, xmlcodec.parse_log)
        for meta in metas:
            name = f"docs/{meta.doc_id}.xml"
            store._docs[meta.doc_id] = store._load(name, xmlcodec.parse_document)
            store._registry[meta.doc_id] = meta
        store.rebuild_indexes()
        return store

    def _load(self, name: str, parse):
        try:
            data = (self.root / name).read_bytes()
        except FileNotFoundError:
            raise AxmlError("STORE_CORRUPT", f"{name}: missing", file=name) from None
        except OSError as exc:
            raise AxmlError("IO", f"{name}: {exc}") from None
        try:
            return parse(data)
        except AxmlError as exc:
            raise AxmlError("STORE_CORRUPT", f"{name}: {exc}", file=name) from None

    # -- persistence --------------------------------------------------------

    def _stage(self, name: str, data: bytes) -> Path:
        target = self.root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix="." + target.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        return Path(tmp)

    def flush(self) -> None:
        """Write every dirty file.

        All temp files are written before the first rename; the registry is
        renamed last because it decides which documents exist on reopen.
        """
        staged: list[Tuple[Path, Path]] = []
        try:
            for doc_id in sorted(self._dirty_docs):
                if doc_id in self._docs:
                    data = xmlcodec.serialize_document(self._docs[doc_id])
                    name = f"docs/{doc_id}.xml"
                    staged.append((self._stage(name, data), self.root / name))
            for run_id, data in sorted(self._traces.items()):
                name = f"traces/{run_id}.xml"
                staged.append((self._stage(name, data), self.root / name))
            writers = {
                LINKS: lambda: xmlcodec.serialize_link_file(list(self._links.values())),
                RULES: lambda: xmlcodec.serialize_rule_file(self._rules),
                LOG: lambda: xmlcodec.serialize_log(self._log),
                REGISTRY: lambda: xmlcodec.serialize_registry(
                    [self._registry[k] for k in sorted(self._registry)]),
            }
            for name in (LINKS, RULES, LOG, REGISTRY):
                if name in self._dirty:
                    staged.append((self._stage(name, writers[name]()), self.root / name))
        except BaseException:
            for tmp, _ in staged:
                tmp.unlink(missing_ok=True)
            raise
        for i, (tmp, target) in enumerate(staged):
            try:
                os.replace(tmp, target)
            except BaseException:
                for left, _ in staged[i:]:
                    left.unlink(missing_ok=True)
                raise
        for doc_id in self._dropped_docs:
            if doc_id not in self._docs:
                (self.root / "docs" / f"{doc_id}.xml").unlink(missing_ok=True)
        self._dirty.clear()
        self._dirty_docs.clear()
        self._dropped_docs.clear()
        self._traces.clear()

    # -- reading ------------------------------------------------------------

    def snapshot(self) -> Snapshot:
        return MappingProxyType(self._docs)

    def get(self, doc_id: str) -> Element:
        try:
            return self._docs[doc_id]
        except KeyError:
            raise AxmlError("UNKNOWN_DOC", f"no document {doc_id!r}", doc_id=doc_id) from None

    def meta(self, doc_id: str) -> DocMeta:
        try:
            return self._registry[doc_id]
        except KeyError:
            raise AxmlError("UNKNOWN_DOC", f"no document {doc_id!r}", doc_id=doc_id) from None

    @property
    def registry(self) -> list[DocMeta]:
        return [self._registry[k] for k in sorted(self._registry)]

    @property
    def links(self) -> list[Link]:
        return list(self._links.values())

    @property
    def log(self) -> list[EventOccurrence]:
        return list(self._log)

    def log_since(self, seq: int) -> list[EventOccurrence]:
        start = bisect.bisect_left([o.seq for o in self._log], seq)
        return self._log[start:]

    @property
    def next_seq(self) -> int:
        return self._log[-1].seq + 1 if self._log else 1

    def resolves(self, addr: NodeAddress) -> bool:
        return resolve(self._docs.get(addr.doc_id), addr.path) is not None

    def node(self, addr: NodeAddress) -> Element:
        node = resolve(self._docs.get(addr.doc_id), addr.path)
        if node is None:
            raise AxmlError("UNRESOLVED_TARGET", f"{addr} does not resolve", target=str(addr))
        return node

    # -- indexes ------------------------------------------------------------

    def rebuild_indexes(self) -> None:
        self._by_name, self._by_author, self._by_created = {}, {}, {}
        for meta in self._registry.values():
            self._index(meta)

    def _index(self, meta: DocMeta) -> None:
        self._by_name.setdefault(meta.name, set()).add(meta.doc_id)
        self._by_author.setdefault(meta.author, set()).add(meta.doc_id)
        self._by_created.setdefault(meta.created, set()).add(meta.doc_id)

    def _unindex(self, meta: DocMeta) -> None:
        for index, key in ((self._by_name, meta.name), (self._by_author, meta.author),
                           (self._by_created, meta.created)):
            ids = index.get(key)
            if ids is not None:
                ids.discard(meta.doc_id)
                if not ids:
                    del index[key]

    def indexes(self) -> dict:
        """Current index contents, as plain sorted data (for comparison)."""
        def plain(index):
            return {k: sorted(v) for k, v in sorted(index.items())}
        return {"name": plain(self._by_name), "author": plain(self._by_author),
                "created": plain(self._by_created)}

    def search(self, name: Optional[str] = None, author: Optional[str] = None,
               created_from: Optional[datetime.date] = None,
               created_to: Optional[datetime.date] = None,
               version: Optional[int] = None) -> list[DocMeta]:
        """Documents satisfying every given criterion, sorted by id."""
        if all(c is None for c in (name, author, created_from, created_to, version)):
            raise AxmlError("EMPTY_CRITERIA", "give at least one search criterion")
        candidates: Optional[set[str]] = None

        def narrow(ids):
            nonlocal candidates
            candidates = set(ids) if candidates is None else candidates & ids

        if name is not None:
            narrow(self._by_name.get(name, set()))
        if author is not None:
            narrow(self._by_author.get(author, set()))
        if created_from is not None or created_to is not None:
            dates = sorted(self._by_created)
            lo = 0 if created_from is None else bisect.bisect_left(dates, created_from)
            hi = len(dates) if created_to is None else bisect.bisect_right(dates, created_to)
            narrow(set().union(*(self._by_created[d] for d in dates[lo:hi])))
        if candidates is None:
            candidates = set(self._registry)
        out = [self._registry[k] for k in sorted(candidates)]
        if version is not None:
            out = [m for m in out if m.version == version]
        return out

    # -- documents and mutations -------------------------------------------

    def _log_occurrence(self, kind: EventKind, target: NodeAddress, rule_id: Optional[str],
                        depth: int, state: Snapshot) -> EventOccurrence:
        occ = EventOccurrence(self.next_seq, kind, target, rule_id, depth, state=state)
        self._log.append(occ)
        self._dirty.add(LOG)
        return occ

    def _set_doc(self, doc_id: str, tree: Optional[Element]) -> None:
        docs = dict(self._docs)
        if tree is None:
            docs.pop(doc_id, None)
            self._dropped_docs.add(doc_id)
        else:
            docs[doc_id] = tree
        self._docs = docs
        self._dirty_docs.add(doc_id)

    def _bump(self, doc_id: str) -> None:
        meta = self._registry[doc_id]
        self._registry[doc_id] = replace(meta, version=meta.version + 1)
        self._dirty.add(REGISTRY)

    def _drop(self, doc_id: str) -> None:
        self._unindex(self._registry.pop(doc_id))
        self._set_doc(doc_id, None)
        self._dirty.add(REGISTRY)

    def put_document(self, meta: DocMeta, tree: Element) -> EventOccurrence:
        """Store a new document and log an Add on its root."""
        if not DOC_ID_RE.match(meta.doc_id):
            raise AxmlError("BAD_DOC_ID", f"bad document id {meta.doc_id!r}", doc_id=meta.doc_id)
        if meta.doc_id in self._registry:
            raise AxmlError("DUPLICATE_DOC_ID", f"document {meta.doc_id!r} exists",
                            doc_id=meta.doc_id)
        if meta.version < 1:
            raise AxmlError("BAD_VERSION", f"bad version {meta.version}")
        self._registry[meta.doc_id] = meta
        self._index(meta)
        self._dirty.add(REGISTRY)
        self._dropped_docs.discard(meta.doc_id)
        self._set_doc(meta.doc_id, normalize_text(tree))
        return self._log_occurrence(EventKind.ADD, NodeAddress(meta.doc_id), None, 0,
                                    self.snapshot())

    def apply_mutation(self, op: MutationOp, rule_id: Optional[str] = None,
                       cascade_depth: int = 0) -> EventOccurrence:
        """Apply one mutation and log its occurrence.

        Update replaces the target subtree, Add appends the payload as the
        target's last child, Move re-parents the target as the destination's
        last child, Delete removes the target (a root delete drops the
        document).  Every touched document gets its version bumped.
        """
        target = op.target
        tree = self._docs.get(target.doc_id)
        if resolve(tree, target.path) is None:
            raise AxmlError("UNRESOLVED_TARGET", f"{target} does not resolve", target=str(target))
        before = self.snapshot()
        kind = op.kind
        if kind in (EventKind.ADD, EventKind.UPDATE) and op.payload is None:
            raise AxmlError("MISSING_PAYLOAD", f"{kind.value} needs a payload")

        if kind is EventKind.UPDATE:
            payload = normalize_text(op.payload)
            self._set_doc(target.doc_id, _edit(tree, target.path, lambda _: payload))
            self._bump(target.doc_id)
            return self._log_occurrence(kind, target, rule_id, cascade_depth, self.snapshot())

        if kind is EventKind.ADD:
            payload = normalize_text(op.payload)
            self._set_doc(target.doc_id,
                          _edit(tree, target.path, lambda n: _append_child(n, payload)))
            self._bump(target.doc_id)
            return self._log_occurrence(kind, target, rule_id, cascade_depth, self.snapshot())

        if kind is EventKind.DELETE:
            if not target.path:
                self._drop(target.doc_id)
            else:
                self._set_doc(target.doc_id, _edit(tree, target.path, lambda _: None))
                self._bump(target.doc_id)
            return self._log_occurrence(kind, target, rule_id, cascade_depth, before)

        # Move
        dest = op.destination
        if dest is None or resolve(self._docs.get(dest.doc_id), dest.path) is None:
            raise AxmlError("UNRESOLVED_DESTINATION", f"{dest} does not resolve",
                            destination=str(dest))
        if dest.is_within(target):
            raise AxmlError("MOVE_INTO_SELF", f"{dest} lies inside {target}",
                            target=str(target), destination=str(dest))
        if not target.path:
            raise AxmlError("MOVE_ROOT", f"cannot move the root of {target.doc_id!r}")
        moved = resolve(tree, target.path)
        self._set_doc(target.doc_id, _edit(tree, target.path, lambda _: None))
        new_dest = shift_after_detach(dest, target)
        dest_tree = self._docs[new_dest.doc_id]
        self._set_doc(new_dest.doc_id,
                      _edit(dest_tree, new_dest.path, lambda n: _append_child(n, moved)))
        self._bump(target.doc_id)
        if new_dest.doc_id != target.doc_id:
            self._bump(new_dest.doc_id)
        return self._log_occurrence(kind, target, rule_id, cascade_depth, before)

    def remove_document(self, doc_id: str) -> EventOccurrence:
        self.get(doc_id)
        return self.apply_mutation(MutationOp(EventKind.DELETE, NodeAddress(doc_id)))

    # -- rollback -----------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(MappingProxyType(dict(self._docs)), MappingProxyType(dict(self._registry)),
                          MappingProxyType(dict(self._links)), tuple(self._rules), self.next_seq)

    def restore(self, cp: Checkpoint) -> list[int]:
        """Return to ``cp``; occurrences logged since stay, marked rolled back."""
        touched = set(self._docs) | set(cp.docs)
        changed = {k for k in touched if self._docs.get(k) is not cp.docs.get(k)}
        self._dropped_docs.update(k for k in changed if k not in cp.docs)
        self._dirty_docs.update(changed)
        self._docs = dict(cp.docs)
        self._registry = dict(cp.registry)
        self._links = dict(cp.links)
        self._rules = list(cp.rules)
        self.rebuild_indexes()
        self._dirty.update({REGISTRY, LINKS, RULES})
        rolled = []
        for i, occ in enumerate(self._log):
            if occ.seq >= cp.next_seq and not occ.rolled_back:
                self._log[i] = replace(occ, rolled_back=True)
                rolled.append(occ.seq)
        if rolled:
            self._dirty.add(LOG)
        return rolled

    # -- links --------------------------------------------------------------

    def _fresh_link_id(self) -> str:
        n = len(self._links) + 1
        while f"l{n}" in self._links:
            n += 1
        return f"l{n}"

    def add_link(self, origin: NodeAddress, destinations: Sequence[NodeAddress],
                 link_id: Optional[str] = None) -> Link:
        if not destinations:
            raise AxmlError("NO_DESTINATION", "a link needs at least one destination")
        for addr in (origin, *destinations):
            if not self.resolves(addr):
                raise AxmlError("UNRESOLVED_ENDPOINT", f"{addr} does not resolve",
                                endpoint=str(addr))
        link_id = link_id or self._fresh_link_id()
        if link_id in self._links:
            raise AxmlError("DUPLICATE_LINK_ID", f"link {link_id!r} exists", link_id=link_id)
        link = Link(link_id, origin, tuple(destinations))
        self._links[link_id] = link
        self._dirty.add(LINKS)
        return link

    def remove_link(self, link_id: str) -> Link:
        try:
            link = self._links.pop(link_id)
        except KeyError:
            raise AxmlError("UNKNOWN_LINK", f"no link {link_id!r}", link_id=link_id) from None
        self._dirty.add(LINKS)
        return link

    def links_from(self, addr: NodeAddress) -> list[Link]:
        return [l for l in self._links.values() if l.origin == addr]

    def links_to(self, addr: NodeAddress) -> list[Link]:
        return [l for l in self._links.values() if addr in l.destinations]

    def check_referential_integrity(self) -> IntegrityReport:
        report = IntegrityReport()
        for link in self._links.values():
            missing_seen = set()
            for addr in link.endpoints():
                if addr.doc_id not in self._docs:
                    if addr.doc_id not in missing_seen:
                        missing_seen.add(addr.doc_id)
                        report.dangling_external.append((link.link_id, addr.doc_id))
                elif not self.resolves(addr):
                    report.dangling_internal.append((link.link_id, addr))
        return report

    def prune_links(self) -> list[str]:
        """Drop every link with an endpoint that no longer resolves."""
        dead = [l.link_id for l in self._links.values()
                if not all(self.resolves(a) for a in l.endpoints())]
        for link_id in dead:
            del self._links[link_id]
        if dead:
            self._dirty.add(LINKS)
        return dead

    # -- rules --------------------------------------------------------------

    def list_rules(self) -> list[Rule]:
        return list(self._rules)

    def _index_of(self, rule_id: str) -> int:
        for i, rule in enumerate(self._rules):
            if rule.id == rule_id:
                return i
        raise AxmlError("UNKNOWN_RULE", f"no rule {rule_id!r}", rule_id=rule_id)

    @staticmethod
    def _validated(rule: Rule) -> Rule:
        violations = validate_rule(rule)
        if violations:
            raise AxmlError("INVALID_RULE", ", ".join(v.code for v in violations),
                            violations=violations)
        return rule

    def add_rule(self, rule: Rule) -> None:
        if any(r.id == rule.id for r in self._rules):
            raise AxmlError("DUPLICATE_RULE_ID", f"rule {rule.id!r} exists", rule_id=rule.id)
        self._rules.append(self._validated(rule))
        self._dirty.add(RULES)

    def remove_rule(self, rule_id: str) -> Rule:
        rule = self._rules.pop(self._index_of(rule_id))
        self._dirty.add(RULES)
        return rule

    def modify_rule(self, rule_id: str, new: Rule) -> None:
        i = self._index_of(rule_id)
        if new.id != rule_id and any(r.id == new.id for r in self._rules):
            raise AxmlError("DUPLICATE_RULE_ID", f"rule {new.id!r} exists", rule_id=new.id)
        self._rules[i] = self._validated(new)
        self._dirty.add(RULES)

    # -- traces -------------------------------------------------------------

    def trace_ids(self) -> list[str]:
        on_disk = {p.stem for p in (self.root / "traces").glob("*.xml")}
        return sorted(on_disk | set(self._traces))

    def next_run_id(self) -> str:
        return f"run-{len(self.trace_ids()) + 1:04d}"

    def save_trace(self, run_id: str, data: bytes) -> None:
        self._traces[run_id] = data

    def load_trace(self, run_id: str) -> bytes:
        if run_id in self._traces:
            return self._traces[run_id]
        path = self.root / "traces" / f"{run_id}.xml"
        if not path.is_file():
            raise AxmlError("UNKNOWN_TRACE", f"no trace {run_id!r}", run_id=run_id)
        return path.read_bytes()


def open_store(path, create: bool = False) -> Store:
    return Store.open(path, create=create)


def flush(store: Store) -> None:
    store.flush()


@contextlib.contextmanager
def store_lock(path) -> Iterator[Path]:
    """Hold ``<root>/.lock`` for the duration; fail fast if already held."""
    lock = Path(path) / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise AxmlError("STORE_LOCKED", f"{path} is in use (remove {lock} if stale)") from None
    except OSError as exc:
        raise AxmlError("IO", f"cannot lock {path}: {exc}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)
