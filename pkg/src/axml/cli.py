"""Command-line front end: ``axml [options] <group> <command> ...``.

Results go to stdout, one-line ``CODE: message`` diagnostics to stderr.
Exit status is 0 on success, 1 on a user error, 2 on store corruption.
"""

from __future__ import annotations

import contextlib
import datetime
import sys
from pathlib import Path
from typing import Optional

import click

from axml import xmlcodec
from axml.errors import CORRUPTION_CODES, AxmlError
from axml.executor import (
    Engine, ExecConfig, ExecutionTrace, LinkPolicy, ProcessResult, serialize_trace, trace_to_xml,
)
from axml.model import (
    DocMeta, Element, EventKind, MutationOp, NodeAddress, Primitive, Rule, parse_href,
)
from axml.paths import eval_path, parse_path
from axml.store import IntegrityReport, Store, open_store, store_lock


class Ctx:
    def __init__(self, store_path, fmt, config):
        self.store_path = store_path
        self.fmt = fmt
        self.config = config

    @contextlib.contextmanager
    def store(self, write: bool = True):
        if not self.store_path:
            raise AxmlError("NO_STORE", "give --store or set AXML_STORE")
        with store_lock(self.store_path):
            store = open_store(self.store_path)
            yield store
            if write:
                store.flush()

    def emit_xml(self, el: Element) -> None:
        click.echo(xmlcodec.serialize_document(el, "  ", verbatim=("payload",)).decode(), nl=False)

    @property
    def xml(self) -> bool:
        return self.fmt == "xml"


pass_ctx = click.make_pass_decorator(Ctx)


@click.group()
@click.option("--store", "store_path", envvar="AXML_STORE", type=click.Path(file_okay=False),
              help="Store directory (or AXML_STORE).")
@click.option("--format", "fmt", type=click.Choice(["text", "xml"]), default="text",
              show_default=True)
@click.option("--max-depth", type=click.IntRange(min=1), default=16, show_default=True,
              help="Cascade depth bound.")
@click.option("--max-rules", type=click.IntRange(min=1), default=256, show_default=True,
              help="Activations allowed per cascade round.")
@click.option("--max-mutations", type=click.IntRange(min=1), default=10_000, show_default=True,
              help="Rule-driven mutations allowed per cascade.")
@click.option("--link-policy", type=click.Choice([p.value for p in LinkPolicy]),
              default="report", show_default=True)
@click.pass_context
def cli(ctx, store_path, fmt, max_depth, max_rules, max_mutations, link_policy):
    """Active XML document repository."""
    ctx.obj = Ctx(store_path, fmt,
                  ExecConfig(max_depth, max_rules, LinkPolicy(link_policy), max_mutations))


@cli.command()
@click.argument("path", type=click.Path(file_okay=False))
@pass_ctx
def init(ctx: Ctx, path):
    """Create an empty store at PATH."""
    open_store(path, create=True)
    if ctx.xml:
        ctx.emit_xml(Element("store", (("path", str(path)),)))
    else:
        click.echo(f"initialized store at {path}")


# --------------------------------------------------------------------------
# Shared output helpers
# --------------------------------------------------------------------------

def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise AxmlError("IO", f"cannot read {path}: {exc.strerror}") from None


def _describe_rule(rule: Rule) -> str:
    def event(spec) -> str:
        if isinstance(spec, Primitive):
            return spec.kind.value + (f" {spec.target}" if spec.target else "")
        return f"{spec.op.value}(" + ", ".join(event(s) for s in spec.operands) + ")"

    lines = [f"rule {rule.id}", f"  event: {event(rule.event)}"]
    if not rule.condition.queries:
        lines.append("  condition: (always)")
    for q in rule.condition.queries:
        lines.append(f"  condition: {q.path}" + (f" in {q.doc_id}" if q.doc_id else ""))
    for op in rule.action.ops:
        text = f"  action: {op.kind.value} {op.target}"
        if op.destination is not None:
            text += f" -> {op.destination}"
        if op.payload is not None:
            text += " with " + xmlcodec.to_string(op.payload)
        lines.append(text)
    return "\n".join(lines)


def _trace_text(trace: ExecutionTrace) -> str:
    lines = [f"run {trace.run_id}: {trace.outcome.value}" + (f" ({trace.reason})" if trace.reason else "")]
    for rnd in trace.rounds:
        lines.append(f"round {rnd.depth}:")
        for act, holds in zip(rnd.activations, rnd.conditions):
            lines.append(f"  rule {act.rule_id} on {act.binding}: condition {'true' if holds else 'false'}")
        for occ in rnd.occurrences:
            who = "user" if occ.rule_id is None else f"rule {occ.rule_id}"
            lines.append(f"  #{occ.seq} {occ.kind.value} {occ.target} by {who}")
        for err in rnd.errors:
            lines.append(f"  error {err.code}: {err.message}")
    for rule_id in trace.pending:
        lines.append(f"pending: rule {rule_id}")
    if trace.integrity is not None:
        lines += _integrity_lines(trace.integrity)
    for link_id in trace.pruned:
        lines.append(f"pruned link {link_id}")
    return "\n".join(lines)


def _integrity_lines(report: IntegrityReport) -> list[str]:
    if not report:
        return ["links: all endpoints resolve"]
    lines = [f"dangling {link_id}: {addr} (node missing)" for link_id, addr in report.dangling_internal]
    lines += [f"dangling {link_id}: document {doc} missing" for link_id, doc in report.dangling_external]
    return lines


def _integrity_xml(report: IntegrityReport) -> Element:
    items = [Element("dangling-internal", (("link", l), ("href", str(a))))
             for l, a in report.dangling_internal]
    items += [Element("dangling-external", (("link", l), ("doc", d)))
              for l, d in report.dangling_external]
    return Element("integrity", (), tuple(items))


def _finish_trace(ctx: Ctx, store: Store, trace: ExecutionTrace) -> None:
    trace.run_id = store.next_run_id()
    store.save_trace(trace.run_id, serialize_trace(trace))
    if ctx.xml:
        ctx.emit_xml(trace_to_xml(trace))
    else:
        click.echo(_trace_text(trace))


def _cascade(ctx: Ctx, store: Store, ops) -> None:
    _finish_trace(ctx, store, Engine(store, ctx.config).run_cascade(ops))


def _one_node(store: Store, doc_id: str, path_text: str, what: str = "target") -> NodeAddress:
    hits = eval_path(parse_path(path_text), store.get(doc_id), doc_id)
    if not hits:
        raise AxmlError(f"UNRESOLVED_{what.upper()}", f"{path_text} selects nothing in {doc_id!r}")
    if len(hits) > 1:
        raise AxmlError("AMBIGUOUS_TARGET", f"{path_text} selects {len(hits)} nodes in {doc_id!r}")
    return hits[0]


# --------------------------------------------------------------------------
# doc
# --------------------------------------------------------------------------

@cli.group()
def doc():
    """Store, remove, find and print documents."""


@doc.command("add")
@click.argument("file", type=click.Path(dir_okay=False))
@click.option("--id", "doc_id", help="Document id (default: root id attribute, else file stem).")
@click.option("--name", help="Document name (default: root name attribute, else the id).")
@click.option("--author", default="", help="Author recorded in the registry.")
@click.option("--created", type=click.DateTime(["%Y-%m-%d"]), help="Creation date (default today).")
@pass_ctx
def doc_add(ctx: Ctx, file, doc_id, name, author, created):
    """Store FILE as a new document; its Add event runs through the rules."""
    tree = xmlcodec.parse_document(_read(file))
    doc_id = doc_id or tree.get("id") or Path(file).stem
    created = created.date() if created else datetime.date.today()
    with ctx.store() as store:
        checkpoint = store.checkpoint()
        occ = store.put_document(DocMeta(doc_id, name or tree.get("name") or doc_id, created, 1,
                                         author), tree)
        _finish_trace(ctx, store, Engine(store, ctx.config).run_seeded([occ], checkpoint))


@doc.command("rm")
@click.argument("doc_id")
@pass_ctx
def doc_rm(ctx: Ctx, doc_id):
    """Delete a whole document."""
    with ctx.store() as store:
        store.get(doc_id)
        _cascade(ctx, store, [MutationOp(EventKind.DELETE, NodeAddress(doc_id))])


@doc.command("get")
@click.argument("doc_id")
@pass_ctx
def doc_get(ctx: Ctx, doc_id):
    """Print a stored document."""
    with ctx.store(write=False) as store:
        click.echo(xmlcodec.serialize_document(store.get(doc_id)).decode(), nl=False)


@doc.command("search")
@click.option("--name")
@click.option("--author")
@click.option("--created-from", type=click.DateTime(["%Y-%m-%d"]))
@click.option("--created-to", type=click.DateTime(["%Y-%m-%d"]))
@click.option("--version", type=int)
@pass_ctx
def doc_search(ctx: Ctx, name, author, created_from, created_to, version):
    """List documents matching every given criterion."""
    with ctx.store(write=False) as store:
        found = store.search(name=name, author=author,
                             created_from=created_from.date() if created_from else None,
                             created_to=created_to.date() if created_to else None,
                             version=version)
    if ctx.xml:
        ctx.emit_xml(xmlcodec.registry_tree(found))
        return
    for m in found:
        click.echo(f"{m.doc_id}\t{m.name}\t{m.created.isoformat()}\tv{m.version}\t{m.author}")


# --------------------------------------------------------------------------
# elem
# --------------------------------------------------------------------------

@cli.group()
def elem():
    """Edit elements inside a document (each edit runs the rules)."""


@elem.command("add")
@click.argument("doc_id")
@click.argument("parent_path")
@click.argument("payload_file", type=click.Path(dir_okay=False))
@pass_ctx
def elem_add(ctx: Ctx, doc_id, parent_path, payload_file):
    """Append PAYLOAD_FILE's root as the last child of PARENT_PATH."""
    payload = xmlcodec.parse_document(_read(payload_file))
    with ctx.store() as store:
        target = _one_node(store, doc_id, parent_path)
        _cascade(ctx, store, [MutationOp(EventKind.ADD, target, payload)])


@elem.command("rm")
@click.argument("doc_id")
@click.argument("path")
@pass_ctx
def elem_rm(ctx: Ctx, doc_id, path):
    """Delete the element at PATH."""
    with ctx.store() as store:
        _cascade(ctx, store, [MutationOp(EventKind.DELETE, _one_node(store, doc_id, path))])


@elem.command("mv")
@click.argument("doc_id")
@click.argument("path")
@click.argument("dest_path")
@pass_ctx
def elem_mv(ctx: Ctx, doc_id, path, dest_path):
    """Move the element at PATH under the element at DEST_PATH."""
    with ctx.store() as store:
        target = _one_node(store, doc_id, path)
        dest = _one_node(store, doc_id, dest_path, "destination")
        _cascade(ctx, store, [MutationOp(EventKind.MOVE, target, destination=dest)])


@elem.command("update")
@click.argument("doc_id")
@click.argument("path")
@click.argument("payload_file", type=click.Path(dir_okay=False))
@pass_ctx
def elem_update(ctx: Ctx, doc_id, path, payload_file):
    """Replace the element at PATH with PAYLOAD_FILE's root."""
    payload = xmlcodec.parse_document(_read(payload_file))
    with ctx.store() as store:
        _cascade(ctx, store, [MutationOp(EventKind.UPDATE, _one_node(store, doc_id, path), payload)])


# --------------------------------------------------------------------------
# rule
# --------------------------------------------------------------------------

@cli.group()
def rule():
    """Manage the rule base."""


def _rules_from(data: bytes) -> list[Rule]:
    tree = xmlcodec.parse_document(data)
    if xmlcodec.canonical_name(tree.name) == "rules":
        return xmlcodec.parse_rule_file(tree)
    return [xmlcodec.parse_rule(tree)]


def _emit_rules(ctx: Ctx, rules) -> None:
    if ctx.xml:
        ctx.emit_xml(xmlcodec.rule_file_tree(rules))
    else:
        for r in rules:
            click.echo(_describe_rule(r))


@rule.command("list")
@pass_ctx
def rule_list(ctx: Ctx):
    """Print the rule base in firing order."""
    with ctx.store(write=False) as store:
        _emit_rules(ctx, store.list_rules())


@rule.command("add")
@click.argument("file", type=click.Path(dir_okay=False))
@pass_ctx
def rule_add(ctx: Ctx, file):
    """Append the rule (or every rule of a rules file) in FILE."""
    rules = _rules_from(_read(file))
    with ctx.store() as store:
        for r in rules:
            store.add_rule(r)
    if ctx.xml:
        _emit_rules(ctx, rules)
    else:
        click.echo("added " + " ".join(r.id for r in rules))


@rule.command("rm")
@click.argument("rule_id")
@pass_ctx
def rule_rm(ctx: Ctx, rule_id):
    """Remove a rule."""
    with ctx.store() as store:
        removed = store.remove_rule(rule_id)
    if ctx.xml:
        _emit_rules(ctx, [removed])
    else:
        click.echo(f"removed {rule_id}")


@rule.command("set")
@click.argument("rule_id")
@click.argument("file", type=click.Path(dir_okay=False))
@pass_ctx
def rule_set(ctx: Ctx, rule_id, file):
    """Replace a rule in place with the one in FILE."""
    new = xmlcodec.parse_rule(xmlcodec.parse_document(_read(file)))
    with ctx.store() as store:
        store.modify_rule(rule_id, new)
    if ctx.xml:
        _emit_rules(ctx, [new])
    else:
        click.echo(f"replaced {rule_id}")


@rule.command("extract")
@click.argument("file", type=click.Path(dir_okay=False))
@pass_ctx
def rule_extract(ctx: Ctx, file):
    """Show the rules embedded in a document without storing anything."""
    result = xmlcodec.extract_embedded_rules(xmlcodec.parse_document(_read(file)))
    if ctx.xml:
        ctx.emit_xml(_acquisition_xml(result))
    else:
        for r in result.rules:
            click.echo(_describe_rule(r))
        for site, err in result.errors:
            click.echo(f"{err.code} at {site}: {err.message}", err=True)


def _acquisition_xml(result: xmlcodec.AcquisitionResult) -> Element:
    kids = [xmlcodec.rule_file_tree(result.rules)]
    kids += [Element("site", (("href", str(a)),)) for a in result.removal_sites]
    kids += [Element("error", (("code", e.code), ("site", str(a))), (e.message,))
             for a, e in result.errors]
    return Element("acquisition", (), tuple(kids))


# --------------------------------------------------------------------------
# link
# --------------------------------------------------------------------------

@cli.group()
def link():
    """Manage the link base."""


@link.command("add")
@click.argument("origin")
@click.argument("destinations", nargs=-1, required=True)
@click.option("--id", "link_id")
@pass_ctx
def link_add(ctx: Ctx, origin, destinations, link_id):
    """Link ORIGIN (doc#/i/j) to one or more DESTINATIONS."""
    with ctx.store() as store:
        new = store.add_link(parse_href(origin), [parse_href(d) for d in destinations], link_id)
    if ctx.xml:
        ctx.emit_xml(xmlcodec.parse_document(xmlcodec.serialize_link_file([new])))
    else:
        click.echo(f"added {new.link_id}")


@link.command("rm")
@click.argument("link_id")
@pass_ctx
def link_rm(ctx: Ctx, link_id):
    """Remove a link."""
    with ctx.store() as store:
        store.remove_link(link_id)
    if ctx.xml:
        ctx.emit_xml(Element("removed", (("link", link_id),)))
    else:
        click.echo(f"removed {link_id}")


@link.command("check")
@pass_ctx
def link_check(ctx: Ctx):
    """Report links whose endpoints no longer resolve."""
    with ctx.store(write=False) as store:
        report = store.check_referential_integrity()
    if ctx.xml:
        ctx.emit_xml(_integrity_xml(report))
    else:
        click.echo("\n".join(_integrity_lines(report)))


# --------------------------------------------------------------------------
# process / log / trace
# --------------------------------------------------------------------------

@cli.command()
@click.argument("file", type=click.Path(dir_okay=False))
@click.option("--install-rules", is_flag=True, help="Keep acquired rules in the rule base.")
@click.option("--author", default="")
@pass_ctx
def process(ctx: Ctx, file, install_rules, author):
    """Acquire FILE's embedded rules, store it, and run the rules."""
    data = _read(file)
    with ctx.store() as store:
        result: ProcessResult = Engine(store, ctx.config).process_client_file(
            data, install=install_rules, author=author)
        result.trace.run_id = store.next_run_id()
        store.save_trace(result.trace.run_id, serialize_trace(result.trace))
    if ctx.xml:
        attrs = (("doc", result.doc_id),) if result.doc_id else ()
        ctx.emit_xml(Element("process", attrs, (_acquisition_xml(result.acquisition),
                                                trace_to_xml(result.trace))))
        return
    acq = result.acquisition
    click.echo(f"acquired {len(acq.rules)} rule(s)"
               + (" (installed)" if install_rules else "")
               + (f", stored as {result.doc_id}" if result.doc_id else ""))
    for site, err in acq.errors:
        click.echo(f"{err.code} at {site}: {err.message}", err=True)
    click.echo(_trace_text(result.trace))


@cli.command()
@click.option("--since", type=int, default=0, help="First sequence number to show.")
@pass_ctx
def log(ctx: Ctx, since):
    """Print the event log."""
    with ctx.store(write=False) as store:
        occs = store.log_since(since)
    if ctx.xml:
        ctx.emit_xml(xmlcodec.parse_document(xmlcodec.serialize_log(occs)))
        return
    for o in occs:
        who = "user" if o.rule_id is None else f"rule {o.rule_id}"
        flag = " (rolled back)" if o.rolled_back else ""
        click.echo(f"{o.seq}\t{o.kind.value}\t{o.target}\t{who}\tdepth {o.cascade_depth}{flag}")


@cli.command()
@click.argument("run_id")
@pass_ctx
def trace(ctx: Ctx, run_id):
    """Print a stored execution trace."""
    with ctx.store(write=False) as store:
        click.echo(store.load_trace(run_id).decode(), nl=False)


def main(argv: Optional[list[str]] = None) -> int:
    try:
        cli.main(args=argv, prog_name="axml", standalone_mode=False)
    except AxmlError as exc:
        click.echo(f"{exc.code}: {exc.message}", err=True)
        return 2 if exc.code in CORRUPTION_CODES else 1
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
