import datetime
import os
import random

import pytest

import gen
from axml.errors import AxmlError
from axml.model import EventKind, MutationOp, NodeAddress, resolve
from axml.paths import eval_path
from axml.store import open_store
from axml.xmlcodec import parse_document
from conftest import meta
from oracles import NaiveStore, oracle_integrity


def code_of(fn, *args, **kw):
    with pytest.raises(AxmlError) as exc:
        fn(*args, **kw)
    return exc.value.code


def test_init_is_empty(store):
    assert (store.registry, store.links, store.list_rules(), store.log) == ([], [], [], [])
    reopened = open_store(store.root)
    assert (reopened.registry, reopened.links, reopened.list_rules(), reopened.log) == ([], [], [], [])


def test_init_twice_refused(store):
    assert code_of(open_store, store.root, create=True) == "STORE_EXISTS"


def test_put_document_logs_add(store):
    store.put_document(meta("d1"), parse_document("<a/>"))
    assert [m.doc_id for m in store.registry] == ["d1"]
    last = store.log[-1]
    assert (last.kind, last.target, last.rule_id, last.cascade_depth) == \
        (EventKind.ADD, NodeAddress("d1"), None, 0)
    assert code_of(store.put_document, meta("d1"), parse_document("<a/>")) == "DUPLICATE_DOC_ID"


def test_flush_and_reopen(store):
    rng = random.Random(0)
    trees = {f"d{i}": gen.tree(rng) for i in range(3)}
    for doc_id, tree in trees.items():
        store.put_document(meta(doc_id), tree)
    store.flush()
    again = open_store(store.root)
    assert again.registry == store.registry
    assert dict(again.snapshot()) == trees
    assert again.log == store.log
    assert again.indexes() == store.indexes()


def test_truncated_rules_file_is_corrupt(store, example_rule):
    store.add_rule(example_rule)
    store.flush()
    path = store.root / "rules.xml"
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(AxmlError) as exc:
        open_store(store.root)
    assert exc.value.code == "STORE_CORRUPT"
    assert "rules.xml" in exc.value.message


def test_interrupted_flush_keeps_previous_state(store, monkeypatch):
    store.put_document(meta("d1"), parse_document("<a><b/></a>"))
    store.flush()
    before = sorted(p.name for p in store.root.rglob("*"))
    store.apply_mutation(MutationOp(EventKind.DELETE, NodeAddress("d1", (0,))))
    store.put_document(meta("d2"), parse_document("<c/>"))

    def boom(*args):
        raise OSError("power cut")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        store.flush()
    monkeypatch.undo()
    assert sorted(p.name for p in store.root.rglob("*")) == before
    again = open_store(store.root)
    assert [m.doc_id for m in again.registry] == ["d1"]
    assert again.get("d1") == parse_document("<a><b/></a>")


def test_delete_paragraph_by_path(store):
    store.put_document(meta("X"), parse_document("<doc name='X'><titre/><Paragraphe/></doc>"))
    (addr,) = eval_path("/doc[@name='X']//Paragraphe", store.get("X"), "X")
    occ = store.apply_mutation(MutationOp(EventKind.DELETE, addr))
    assert store.get("X") == parse_document("<doc name='X'><titre/></doc>")
    assert (occ.kind, occ.target) == (EventKind.DELETE, NodeAddress("X", (1,)))
    assert store.meta("X").version == 2


def test_mutation_errors(store):
    store.put_document(meta("d"), parse_document("<a><b><c/></b><e/></a>"))
    b, c = NodeAddress("d", (0,)), NodeAddress("d", (0, 0))
    assert code_of(store.apply_mutation, MutationOp(EventKind.MOVE, b, destination=c)) == "MOVE_INTO_SELF"
    assert code_of(store.apply_mutation, MutationOp(EventKind.MOVE, b, destination=b)) == "MOVE_INTO_SELF"
    assert code_of(store.apply_mutation, MutationOp(EventKind.DELETE, NodeAddress("d", (7,)))) \
        == "UNRESOLVED_TARGET"
    assert code_of(store.apply_mutation,
                   MutationOp(EventKind.MOVE, b, destination=NodeAddress("zz"))) == "UNRESOLVED_DESTINATION"


def test_move_sibling_forward(store):
    store.put_document(meta("d"), parse_document("<a><b/><c/><e/></a>"))
    store.apply_mutation(MutationOp(EventKind.MOVE, NodeAddress("d", (0,)),
                                    destination=NodeAddress("d", (2,))))
    assert store.get("d") == parse_document("<a><c/><e><b/></e></a>")


def test_delete_root_removes_document(store):
    store.put_document(meta("d"), parse_document("<a/>"))
    store.apply_mutation(MutationOp(EventKind.DELETE, NodeAddress("d")))
    assert store.registry == [] and "d" not in store.snapshot()
    store.flush()
    assert not (store.root / "docs" / "d.xml").exists()


def test_snapshot_survives_mutation(store):
    store.put_document(meta("d"), parse_document("<a><b/></a>"))
    snap = store.snapshot()
    store.apply_mutation(MutationOp(EventKind.DELETE, NodeAddress("d", (0,))))
    assert snap["d"] == parse_document("<a><b/></a>")


def _random_op(rng, docs):
    doc_ids = sorted(docs) + ["ghost"]
    doc_id = rng.choice(doc_ids)
    nodes = [p for p, _ in docs[doc_id].iter()] if doc_id in docs else [()]
    target = NodeAddress(doc_id, rng.choice(nodes + [(9,)]))
    kind = rng.choice(list(EventKind))
    if kind in (EventKind.ADD, EventKind.UPDATE):
        return MutationOp(kind, target, gen.payload(rng))
    if kind is EventKind.MOVE:
        dest_doc = rng.choice(doc_ids)
        dnodes = [p for p, _ in docs[dest_doc].iter()] if dest_doc in docs else [()]
        return MutationOp(kind, target, destination=NodeAddress(dest_doc, rng.choice(dnodes)))
    return MutationOp(kind, target)


@pytest.mark.parametrize("seed", range(40))
def test_random_ops_match_naive_replayer(store, seed):
    rng = random.Random(seed)
    for i in range(3):
        store.put_document(meta(f"d{i}"), gen.tree(rng, 12))
    naive = NaiveStore(store.snapshot())
    for _ in range(rng.randint(1, 20)):
        op = _random_op(rng, store.snapshot())
        expected_error = naive.apply(op)
        if expected_error:
            assert code_of(store.apply_mutation, op) == expected_error
        else:
            store.apply_mutation(op)
    assert dict(sorted(store.snapshot().items())) == naive.snapshot()
    seqs = [o.seq for o in store.log]
    assert seqs == list(range(1, len(seqs) + 1))
    indexes = store.indexes()
    store.rebuild_indexes()
    assert store.indexes() == indexes


def test_version_bumps_on_every_mutation_kind(store):
    store.put_document(meta("d"), parse_document("<a><b/><c/></a>"))
    e = parse_document("<e/>")
    store.apply_mutation(MutationOp(EventKind.ADD, NodeAddress("d"), e))
    store.apply_mutation(MutationOp(EventKind.UPDATE, NodeAddress("d", (2,)), e))
    store.apply_mutation(MutationOp(EventKind.MOVE, NodeAddress("d", (0,)), destination=NodeAddress("d", (1,))))
    store.apply_mutation(MutationOp(EventKind.DELETE, NodeAddress("d", (1,))))
    assert store.meta("d").version == 5


# -- links -------------------------------------------------------------------

def _two_docs(store):
    store.put_document(meta("d1"), parse_document("<a><b/></a>"))
    store.put_document(meta("d2"), parse_document("<a><b/><c><x/></c></a>"))


def test_links_to_and_from(store):
    _two_docs(store)
    l1 = store.add_link(NodeAddress("d1", (0,)), [NodeAddress("d2", (1,))])
    assert l1.link_id == "l1"
    assert store.links_to(NodeAddress("d2", (1,))) == [l1]
    assert store.links_from(NodeAddress("d1", (0,))) == [l1]
    assert store.links_to(NodeAddress("d2", (1, 0))) == []
    assert code_of(store.add_link, NodeAddress("d1"), [NodeAddress("d9")]) == "UNRESOLVED_ENDPOINT"
    assert code_of(store.remove_link, "zz") == "UNKNOWN_LINK"


def test_integrity_after_destination_doc_deleted(store):
    _two_docs(store)
    store.add_link(NodeAddress("d1", (0,)), [NodeAddress("d2", (1,))])
    assert not store.check_referential_integrity()
    store.remove_document("d2")
    report = store.check_referential_integrity()
    assert report.dangling_external == [("l1", "d2")] and report.dangling_internal == []


@pytest.mark.parametrize("seed", range(30))
def test_integrity_matches_brute_force(store, seed):
    rng = random.Random(seed)
    for i in range(3):
        store.put_document(meta(f"d{i}"), gen.tree(rng, 10))
    addrs = [NodeAddress(k, p) for k, t in store.snapshot().items() for p, _ in t.iter()]
    for _ in range(6):
        store.add_link(rng.choice(addrs), rng.sample(addrs, rng.randint(1, 3)))
    for _ in range(rng.randint(1, 4)):
        snap = store.snapshot()
        if not snap:
            break
        doc_id = rng.choice(sorted(snap))
        path = rng.choice([p for p, _ in snap[doc_id].iter()])
        store.apply_mutation(MutationOp(EventKind.DELETE, NodeAddress(doc_id, path)))
    report = store.check_referential_integrity()
    internal, external = oracle_integrity(store.snapshot(), store.links)
    assert (report.dangling_internal, report.dangling_external) == (internal, external)
    links_to = {a: store.links_to(a) for a in addrs}
    for a in addrs:
        assert links_to[a] == [l for l in store.links if a in l.destinations]
        assert store.links_from(a) == [l for l in store.links if l.origin == a]


# -- rules -------------------------------------------------------------------

def test_rule_base_ops(store, example_rule):
    rng = random.Random(1)
    r2 = gen.rule(rng, "r2")
    store.add_rule(example_rule)
    store.add_rule(r2)
    assert [r.id for r in store.list_rules()] == ["r1", "r2"]
    r1b = gen.rule(rng, "r1")
    store.modify_rule("r1", r1b)
    assert store.list_rules() == [r1b, r2]
    assert code_of(store.remove_rule, "zz") == "UNKNOWN_RULE"
    assert code_of(store.add_rule, r2) == "DUPLICATE_RULE_ID"
    store.flush()
    assert open_store(store.root).list_rules() == [r1b, r2]


# -- search ------------------------------------------------------------------

def test_search_by_author(store):
    store.put_document(meta("d1", author="mansouri"), parse_document("<a/>"))
    store.put_document(meta("d2", author="ali"), parse_document("<a/>"))
    store.put_document(meta("d3", author="mansouri"), parse_document("<a/>"))
    assert [m.doc_id for m in store.search(author="mansouri")] == ["d1", "d3"]
    assert code_of(store.search) == "EMPTY_CRITERIA"


def test_search_conjunction(store):
    store.put_document(meta("d1", name="spec", author="x"), parse_document("<a/>"))
    store.put_document(meta("d2", name="spec", author="y"), parse_document("<a/>"))
    store.put_document(meta("d3", name="other", author="x"), parse_document("<a/>"))
    both = store.search(name="spec", author="x")
    assert both == [m for m in store.search(name="spec") if m in store.search(author="x")]
    assert [m.doc_id for m in both] == ["d1"]


def test_search_matches_linear_scan(store):
    rng = random.Random(7)
    for m in gen.registry(rng, 500):
        store.put_document(m, parse_document("<a/>"))
    for _ in range(200):
        crit = {}
        if rng.random() < 0.5:
            crit["name"] = rng.choice(["spec", "notes", "Rapport é", "x&y", "nope"])
        if rng.random() < 0.5:
            crit["author"] = rng.choice(["mansouri", "ali", "", "zz"])
        if rng.random() < 0.5:
            lo = datetime.date(2000, 1, 1) + datetime.timedelta(days=rng.randint(0, 9000))
            crit["created_from"] = lo
            crit["created_to"] = lo + datetime.timedelta(days=rng.randint(0, 2000))
        if rng.random() < 0.3 or not crit:
            crit["version"] = rng.randint(1, 50)
        expected = [m for m in store.registry
                    if all({"name": m.name == crit.get("name"),
                            "author": m.author == crit.get("author"),
                            "created_from": m.created >= crit.get("created_from", m.created),
                            "created_to": m.created <= crit.get("created_to", m.created),
                            "version": m.version == crit.get("version")}[k] for k in crit)]
        assert store.search(**crit) == expected


def test_author_index_matches_scan(store):
    rng = random.Random(11)
    for m in gen.registry(rng, 100):
        store.put_document(m, parse_document("<a/>"))
    for author in ["mansouri", "ali", ""]:
        assert store.search(author=author) == [m for m in store.registry if m.author == author]


def test_checkpoint_restore_marks_rolled_back(store):
    store.put_document(meta("d"), parse_document("<a><b/></a>"))
    cp = store.checkpoint()
    store.apply_mutation(MutationOp(EventKind.DELETE, NodeAddress("d", (0,))))
    rolled = store.restore(cp)
    assert store.get("d") == parse_document("<a><b/></a>")
    assert rolled == [2] and store.log[-1].rolled_back
    assert store.meta("d").version == 1
