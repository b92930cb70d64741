"""Rule execution: extract, detect, select, then condition and action.

Round 0 applies the user's mutations.  Each later round selects rules
against the previous round's occurrences, evaluates each activation's
condition on the current state and runs its action; the occurrences the
actions produce seed the next round.  The link policy runs once at the end.
"""

from __future__ import annotations

import datetime
import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

from axml import xmlcodec
from axml.errors import AxmlError
from axml.events import EventWindow, RuleActivation, select_rules
from axml.model import (
    Action, ActionOp, DocMeta, Element, EventKind, EventOccurrence, MutationOp, NodeAddress, Rule,
    format_href,
)
from axml.paths import eval_condition, eval_path, eval_query_over
from axml.store import IntegrityReport, Store, shift_after_detach


class LinkPolicy(enum.Enum):
    PRUNE = "prune"
    REPORT = "report"
    VETO = "veto"


class Outcome(enum.Enum):
    COMPLETED = "completed"
    DEPTH_EXCEEDED = "depth-exceeded"
    VETOED = "vetoed"
    FAILED = "failed"


@dataclass(frozen=True)
class ExecConfig:
    max_cascade_depth: int = 16
    max_rules_per_round: int = 256
    link_policy: LinkPolicy = LinkPolicy.REPORT
    # rule-driven mutations per cascade; stops rule bases whose matches multiply
    max_mutations: int = 10_000

    def __post_init__(self):
        if min(self.max_cascade_depth, self.max_rules_per_round, self.max_mutations) < 1:
            raise AxmlError("BAD_CONFIG", "cascade bounds must be positive")


class MutationLimit(Exception):
    """Raised by :func:`execute_action` when its mutation allowance runs out."""

    def __init__(self, occurrences: list[EventOccurrence]):
        super().__init__("mutation limit reached")
        self.occurrences = occurrences


@dataclass
class TraceError:
    code: str
    message: str
    rule_id: Optional[str] = None


@dataclass
class Applied:
    op: MutationOp
    seq: int
    rule_id: Optional[str] = None


@dataclass
class Round:
    depth: int
    occurrences: list[EventOccurrence] = field(default_factory=list)
    activations: list[RuleActivation] = field(default_factory=list)
    conditions: list[bool] = field(default_factory=list)
    applied: list[Applied] = field(default_factory=list)
    errors: list[TraceError] = field(default_factory=list)


@dataclass
class ExecutionTrace:
    rounds: list[Round] = field(default_factory=list)
    outcome: Outcome = Outcome.COMPLETED
    reason: str = ""
    pending: list[str] = field(default_factory=list)
    integrity: Optional[IntegrityReport] = None
    pruned: list[str] = field(default_factory=list)
    rolled_back: list[int] = field(default_factory=list)
    run_id: str = ""

    @property
    def cascade_rounds(self) -> int:
        """Rounds driven by rules (round 0 is the user's)."""
        return sum(1 for r in self.rounds if r.depth > 0)


# --------------------------------------------------------------------------
# Actions
# --------------------------------------------------------------------------

def _follow(addr: NodeAddress, op: MutationOp, dest: Optional[NodeAddress],
            moved_index: int) -> Optional[NodeAddress]:
    """Where a not-yet-processed match lives after ``op`` was applied."""
    target = op.target
    if op.kind is EventKind.ADD:
        return addr
    if op.kind is EventKind.UPDATE:
        # The target itself stays addressable; what was inside it is gone.
        if addr.is_within(target) and addr != target:
            return None
        return addr
    if op.kind is EventKind.DELETE:
        if not target.path and addr.doc_id == target.doc_id:
            return None
        return shift_after_detach(addr, target)
    # Move: inside the moved subtree follows it under the destination.
    if addr.is_within(target):
        rel = addr.path[len(target.path):]
        return NodeAddress(dest.doc_id, dest.path + (moved_index,) + rel)
    return shift_after_detach(addr, target)


def execute_action(store: Store, rule_id: str, action: Action,
                   binding: Optional[NodeAddress], depth: int,
                   errors: Optional[list[TraceError]] = None,
                   applied: Optional[list[Applied]] = None,
                   limit: Optional[int] = None) -> list[EventOccurrence]:
    """Run an action's ops in order; each op hits every node its target selects.

    Matches are processed in document order.  Addresses of matches not yet
    processed are carried through each mutation so they keep naming the same
    nodes.  Store errors are appended to ``errors`` and the run continues.
    At most ``limit`` mutations are applied; one more raises :class:`MutationLimit`.
    """
    errors = errors if errors is not None else []
    out: list[EventOccurrence] = []
    for action_op in action.ops:
        try:
            todo = eval_query_over(action_op.target, store.snapshot(), action_op.doc_id)
        except AxmlError as exc:
            errors.append(TraceError(exc.code, exc.message, rule_id))
            continue
        while todo:
            addr = todo.pop(0)
            dest = None
            if action_op.kind is EventKind.MOVE:
                dests = eval_path(action_op.destination, store.get(addr.doc_id), addr.doc_id)
                if not dests:
                    errors.append(TraceError(
                        "UNRESOLVED_DESTINATION",
                        f"{action_op.destination} selects nothing in {addr.doc_id!r}", rule_id))
                    continue
                dest = dests[0]
            op = MutationOp(action_op.kind, addr, action_op.payload, dest)
            if limit is not None and len(out) >= limit:
                raise MutationLimit(out)
            try:
                occ = store.apply_mutation(op, rule_id, depth)
            except AxmlError as exc:
                errors.append(TraceError(exc.code, exc.message, rule_id))
                continue
            out.append(occ)
            if applied is not None:
                applied.append(Applied(op, occ.seq, rule_id))
            if op.kind is EventKind.ADD:
                continue
            new_dest, moved_index = None, 0
            if dest is not None:
                new_dest = shift_after_detach(dest, addr)
                moved_index = len(store.node(new_dest).elements) - 1
            todo = [a for a in (_follow(t, op, new_dest, moved_index) for t in todo)
                    if a is not None]
    return out


# --------------------------------------------------------------------------
# Cascade
# --------------------------------------------------------------------------

class Engine:
    """One rule-execution session over a store.

    The session remembers occurrences since it started (for SEQ events) and
    any transient rules acquired from client files.
    """

    def __init__(self, store: Store, config: ExecConfig = ExecConfig()):
        self.store = store
        self.config = config
        self.session_start_seq = store.next_seq
        self.transient_rules: list[Rule] = []

    def rule_base(self) -> list[Rule]:
        return self.store.list_rules() + self.transient_rules

    def _history(self) -> list[EventOccurrence]:
        return [o for o in self.store.log_since(self.session_start_seq) if not o.rolled_back]

    def run_cascade(self, initial_ops: Sequence[MutationOp]) -> ExecutionTrace:
        """Apply the user's ops, then cascade rules to a fixpoint or the depth bound."""
        checkpoint = self.store.checkpoint()
        trace = ExecutionTrace()
        round0 = Round(0)
        trace.rounds.append(round0)
        for op in initial_ops:
            try:
                occ = self.store.apply_mutation(op)
            except AxmlError as exc:
                round0.errors.append(TraceError(exc.code, exc.message))
                trace.outcome = Outcome.FAILED
                trace.reason = f"{exc.code}: {exc.message}"
                trace.rolled_back = self.store.restore(checkpoint)
                return trace
            round0.occurrences.append(occ)
            round0.applied.append(Applied(op, occ.seq))
        return self._cascade(trace, checkpoint)

    def run_seeded(self, seed: Sequence[EventOccurrence], checkpoint=None) -> ExecutionTrace:
        """Cascade from occurrences the caller already produced (round 0)."""
        trace = ExecutionTrace()
        trace.rounds.append(Round(0, occurrences=list(seed)))
        return self._cascade(trace, checkpoint or self.store.checkpoint())

    def _cascade(self, trace: ExecutionTrace, checkpoint) -> ExecutionTrace:
        config = self.config
        batch = trace.rounds[0].occurrences
        depth = 0
        spent = 0
        while batch:
            window = EventWindow(self._history(), self.session_start_seq, batch[0].seq)
            activations = select_rules(self.rule_base(), window)
            if not activations:
                break
            if depth == config.max_cascade_depth:
                pending = [a.rule_id for a in activations
                           if self._condition_holds(a, None)]
                if pending:
                    trace.outcome = Outcome.DEPTH_EXCEEDED
                    trace.pending = pending
                break
            depth += 1
            rnd = Round(depth)
            if len(activations) > config.max_rules_per_round:
                rnd.errors.append(TraceError(
                    "RULE_LIMIT", f"{len(activations)} activations, kept "
                    f"{config.max_rules_per_round}"))
                activations = activations[:config.max_rules_per_round]
            for i, activation in enumerate(activations):
                holds = self._condition_holds(activation, rnd)
                rnd.activations.append(activation)
                rnd.conditions.append(holds)
                if not holds:
                    continue
                try:
                    occs = execute_action(
                        self.store, activation.rule_id, activation.rule.action,
                        activation.binding, depth, rnd.errors, rnd.applied,
                        config.max_mutations - spent)
                except MutationLimit as cut:
                    rnd.occurrences.extend(cut.occurrences)
                    rnd.errors.append(TraceError(
                        "MUTATION_LIMIT", f"{config.max_mutations} rule mutations applied",
                        activation.rule_id))
                    trace.outcome = Outcome.DEPTH_EXCEEDED
                    trace.reason = f"MUTATION_LIMIT: stopped after {config.max_mutations} mutations"
                    trace.pending = [a.rule_id for a in activations[i:]]
                    break
                spent += len(occs)
                rnd.occurrences.extend(occs)
            trace.rounds.append(rnd)
            if trace.outcome is Outcome.DEPTH_EXCEEDED or not any(rnd.conditions):
                break
            batch = rnd.occurrences
        self._apply_link_policy(trace, checkpoint)
        return trace

    def _condition_holds(self, activation: RuleActivation, rnd: Optional[Round]) -> bool:
        try:
            return eval_condition(activation.rule.condition, self.store.snapshot())
        except AxmlError as exc:
            if rnd is not None:
                rnd.errors.append(TraceError(exc.code, exc.message, activation.rule_id))
            return False

    def _apply_link_policy(self, trace: ExecutionTrace, checkpoint) -> None:
        policy = self.config.link_policy
        if policy is LinkPolicy.PRUNE:
            trace.pruned = self.store.prune_links()
            return
        report = self.store.check_referential_integrity()
        trace.integrity = report
        if policy is LinkPolicy.VETO and report:
            trace.outcome = Outcome.VETOED
            trace.rolled_back = self.store.restore(checkpoint)

    # -- client files -------------------------------------------------------

    def process_client_file(self, data: bytes, install: bool = False,
                            author: str = "", created: Optional[datetime.date] = None):
        """Acquire embedded rules, store the stripped document, cascade from its Add.

        Acquired rules join this session's rule base; with ``install`` they
        are added to the stored rule base instead.
        """
        doc = xmlcodec.parse_document(data)
        acquisition = xmlcodec.extract_embedded_rules(doc)
        known = {r.id for r in self.rule_base()}
        for rule in acquisition.rules:
            if rule.id in known:
                acquisition.errors.append((NodeAddress(doc.get("id") or ""), AxmlError(
                    "DUPLICATE_RULE_ID", f"rule {rule.id!r} exists", rule_id=rule.id)))
                continue
            known.add(rule.id)
            if install:
                self.store.add_rule(rule)
            else:
                self.transient_rules.append(rule)
        if acquisition.stripped_doc is None:
            return ProcessResult(acquisition, ExecutionTrace(), None)
        stripped = acquisition.stripped_doc
        doc_id = stripped.get("id") or self._fresh_doc_id()
        meta = DocMeta(doc_id, stripped.get("name") or doc_id,
                       created or datetime.date.today(), 1, author)
        checkpoint = self.store.checkpoint()
        occ = self.store.put_document(meta, stripped)
        return ProcessResult(acquisition, self.run_seeded([occ], checkpoint), doc_id)

    def _fresh_doc_id(self) -> str:
        n = 1
        while f"doc{n}" in self.store.snapshot():
            n += 1
        return f"doc{n}"


@dataclass
class ProcessResult:
    acquisition: xmlcodec.AcquisitionResult
    trace: ExecutionTrace
    doc_id: Optional[str]


def run_cascade(store: Store, initial_ops: Sequence[MutationOp],
                config: ExecConfig = ExecConfig(), extra_rules: Sequence[Rule] = ()) -> ExecutionTrace:
    engine = Engine(store, config)
    engine.transient_rules.extend(extra_rules)
    return engine.run_cascade(initial_ops)


def process_client_file(store: Store, data: bytes, config: ExecConfig = ExecConfig(),
                        install: bool = False, **meta) -> ProcessResult:
    return Engine(store, config).process_client_file(data, install, **meta)


# --------------------------------------------------------------------------
# Trace serialization
# --------------------------------------------------------------------------

def _op_to_xml(applied: Applied) -> Element:
    op = applied.op
    attrs = [("seq", str(applied.seq)), ("kind", op.kind.value), ("target", format_href(op.target))]
    if op.destination is not None:
        attrs.append(("destination", format_href(op.destination)))
    if applied.rule_id is not None:
        attrs.append(("rule", applied.rule_id))
    body = (Element("payload", (), (op.payload,)),) if op.payload is not None else ()
    return Element("applied", tuple(attrs), body)


def trace_to_xml(trace: ExecutionTrace) -> Element:
    rounds = []
    for rnd in trace.rounds:
        kids: list[Element] = []
        for act, holds in zip(rnd.activations, rnd.conditions):
            kids.append(Element("activation", (
                ("rule", act.rule_id), ("binding", format_href(act.binding)),
                ("triggers", " ".join(str(s) for s in act.triggers)),
                ("condition", "true" if holds else "false"))))
        kids += [_op_to_xml(a) for a in rnd.applied]
        kids += [xmlcodec.occurrence_to_xml(o) for o in rnd.occurrences]
        for err in rnd.errors:
            attrs = [("code", err.code)] + ([("rule", err.rule_id)] if err.rule_id else [])
            kids.append(Element("error", tuple(attrs), (err.message,)))
        rounds.append(Element("round", (("depth", str(rnd.depth)),), tuple(kids)))
    attrs = [("outcome", trace.outcome.value)]
    if trace.run_id:
        attrs.insert(0, ("run", trace.run_id))
    if trace.reason:
        attrs.append(("reason", trace.reason))
    tail: list[Element] = [Element("pending", (("rule", r),)) for r in trace.pending]
    if trace.integrity is not None:
        items = [Element("dangling-internal", (("link", l), ("href", format_href(a))))
                 for l, a in trace.integrity.dangling_internal]
        items += [Element("dangling-external", (("link", l), ("doc", d)))
                  for l, d in trace.integrity.dangling_external]
        tail.append(Element("integrity", (), tuple(items)))
    tail += [Element("pruned", (("link", l),)) for l in trace.pruned]
    if trace.rolled_back:
        tail.append(Element("rolled-back", (("seqs", " ".join(map(str, trace.rolled_back))),)))
    return Element("trace", tuple(attrs), tuple(rounds) + tuple(tail))


def serialize_trace(trace: ExecutionTrace) -> bytes:
    return xmlcodec.serialize_document(trace_to_xml(trace), "  ", verbatim=("payload",))
