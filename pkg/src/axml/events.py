"""Matching event specifications against windows of occurrences.

A set of occurrences *witnesses* a spec when:

* primitive: it is a single occurrence of that kind whose target the spec's
  path selects;
* OR: it witnesses some operand;
* AND: it is a union of one witness per operand (overlap allowed);
* SEQ: it is a union of one witness per operand where every occurrence of
  operand i precedes every occurrence of operand i+1.

A spec matches a window when some subset of the window witnesses it.
Rather than enumerate subsets, two greedy functions answer what the engine
needs: the earliest possible end of a witness after a bound, and the latest
possible end.  Both are exact because every operator is monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Tuple

from axml.model import (
    Composite, CompositeOp, Element, EventOccurrence, EventSpec, NodeAddress, Primitive, Rule,
    has_seq,
)
from axml.paths import PathExpr, eval_path


@dataclass
class EventWindow:
    """Occurrences visible to one selection round.

    ``occurrences`` is the session history up to and including the current
    batch, ordered by seq; the batch is the tail starting at ``batch_start``.
    Specs without SEQ only look at the batch.
    """

    occurrences: Sequence[EventOccurrence]
    session_start_seq: int = 0
    batch_start: Optional[int] = None

    def __post_init__(self):
        self.occurrences = sorted(self.occurrences, key=lambda o: o.seq)
        if self.batch_start is None:
            self.batch_start = self.occurrences[0].seq if self.occurrences else 0

    @property
    def batch(self) -> list[EventOccurrence]:
        return [o for o in self.occurrences if o.seq >= self.batch_start]

    def visible_to(self, spec: EventSpec) -> list[EventOccurrence]:
        return list(self.occurrences) if has_seq(spec) else self.batch


@dataclass
class RuleActivation:
    rule_id: str
    triggers: Tuple[int, ...]
    binding: NodeAddress
    rule: Optional[Rule] = field(default=None, compare=False, repr=False)


class _TargetCache:
    """Memoizes path evaluation per (state object, path)."""

    def __init__(self):
        self._hits: dict[Tuple[int, PathExpr, str], frozenset] = {}
        self._keep: list = []

    def selects(self, target: PathExpr, occ: EventOccurrence,
                state: Optional[Mapping[str, Element]]) -> bool:
        if state is None:
            return False
        doc = state.get(occ.target.doc_id)
        if doc is None:
            return False
        key = (id(state), target, occ.target.doc_id)
        hit = self._hits.get(key)
        if hit is None:
            hit = frozenset(a.path for a in eval_path(target, doc))
            self._hits[key] = hit
            self._keep.append(state)
        return occ.target.path in hit


def matches_primitive(spec: Primitive, occ: EventOccurrence,
                      snapshot: Optional[Mapping[str, Element]] = None,
                      _cache: Optional[_TargetCache] = None) -> bool:
    """Kind equality plus, if the spec has a target, path membership.

    The path is evaluated against ``snapshot`` or, by default, the state the
    store recorded with the occurrence.
    """
    if occ.kind is not spec.kind:
        return False
    if spec.target is None:
        return True
    cache = _cache or _TargetCache()
    return cache.selects(spec.target, occ, snapshot if snapshot is not None else occ.state)


class _Matcher:
    def __init__(self, occs: Sequence[EventOccurrence], snapshot=None, cache=None):
        self.occs = occs
        self.snapshot = snapshot
        self.cache = cache or _TargetCache()
        self._prim: dict[Primitive, list[int]] = {}

    def positions(self, spec: Primitive) -> list[int]:
        """Indexes into ``occs`` of occurrences matching a primitive."""
        hit = self._prim.get(spec)
        if hit is None:
            hit = [i for i, o in enumerate(self.occs)
                   if matches_primitive(spec, o, self.snapshot, self.cache)]
            self._prim[spec] = hit
        return hit

    def earliest(self, spec: EventSpec, after: int) -> Optional[Tuple[int, frozenset]]:
        """Witness whose first index is > ``after`` with the smallest last index."""
        if isinstance(spec, Primitive):
            for i in self.positions(spec):
                if i > after:
                    return i, frozenset((i,))
            return None
        if spec.op is CompositeOp.OR:
            best = None
            for operand in spec.operands:
                got = self.earliest(operand, after)
                if got is not None and (best is None or got[0] < best[0]):
                    best = got
            return best
        if spec.op is CompositeOp.AND:
            end, used = -1, frozenset()
            for operand in spec.operands:
                got = self.earliest(operand, after)
                if got is None:
                    return None
                end, used = max(end, got[0]), used | got[1]
            return end, used
        bound, used = after, frozenset()
        for operand in spec.operands:
            got = self.earliest(operand, bound)
            if got is None:
                return None
            bound, used = got[0], used | got[1]
        return bound, used

    def latest(self, spec: EventSpec, after: int) -> Optional[Tuple[int, frozenset]]:
        """Witness whose first index is > ``after`` with the largest last index."""
        if isinstance(spec, Primitive):
            hits = [i for i in self.positions(spec) if i > after]
            return (hits[-1], frozenset((hits[-1],))) if hits else None
        if spec.op is CompositeOp.OR:
            best = None
            for operand in spec.operands:
                got = self.latest(operand, after)
                if got is not None and (best is None or got[0] > best[0]):
                    best = got
            return best
        if spec.op is CompositeOp.AND:
            parts = []
            for operand in spec.operands:
                got = self.earliest(operand, after)
                if got is None:
                    return None
                parts.append(got)
            # Swap in the latest witness for whichever operand reaches furthest.
            best_i, best = None, None
            for i, operand in enumerate(spec.operands):
                got = self.latest(operand, after)
                if best is None or got[0] > best[0]:
                    best_i, best = i, got
            used = frozenset().union(*(p[1] for i, p in enumerate(parts) if i != best_i))
            return best[0], used | best[1]
        bound, used = after, frozenset()
        for operand in spec.operands[:-1]:
            got = self.earliest(operand, bound)
            if got is None:
                return None
            bound, used = got[0], used | got[1]
        got = self.latest(spec.operands[-1], bound)
        if got is None:
            return None
        return got[0], used | got[1]


def matches(spec: EventSpec, window, snapshot=None) -> bool:
    """True if some subset of the visible occurrences witnesses ``spec``.

    ``window`` is an :class:`EventWindow` or a plain occurrence list (taken
    whole).
    """
    occs = window.visible_to(spec) if isinstance(window, EventWindow) \
        else sorted(window, key=lambda o: o.seq)
    return _Matcher(occs, snapshot).earliest(spec, -1) is not None


def latest_witness(spec: EventSpec, occs: Sequence[EventOccurrence], snapshot=None,
                   _cache=None) -> Optional[list[EventOccurrence]]:
    """A witness ending as late as possible, as occurrences in seq order."""
    got = _Matcher(occs, snapshot, _cache).latest(spec, -1)
    if got is None:
        return None
    return [occs[i] for i in sorted(got[1])]


def select_rules(rule_base: Sequence[Rule], window: EventWindow,
                 snapshot=None) -> list[RuleActivation]:
    """Activations, in rule-base order, for rules whose event fired in the batch.

    A rule activates at most once per window.  Its witness must end inside
    the current batch, so a sequence completed in an earlier round does not
    fire again.  The binding is the target of the witness's last occurrence.
    """
    cache = _TargetCache()
    out = []
    for rule in rule_base:
        occs = window.visible_to(rule.event)
        witness = latest_witness(rule.event, occs, snapshot, cache)
        if witness is None or witness[-1].seq < window.batch_start:
            continue
        out.append(RuleActivation(rule.id, tuple(o.seq for o in witness),
                                  witness[-1].target, rule))
    return out
