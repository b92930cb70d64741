import random

import pytest
from hypothesis import given, settings, strategies as st

import gen
from axml.errors import AxmlError
from axml.model import Condition, Element, Query
from axml.paths import (
    AttrEquals, Axis, PathExpr, Position, Step, eval_condition, eval_path, parse_path,
)
from axml.xmlcodec import parse_document
from oracles import oracle_eval_path


def paths(expr, xml):
    return [list(a.path) for a in eval_path(parse_path(expr), parse_document(xml))]


def test_parse_example_condition():
    expr = parse_path("/doc[@name='X']//Paragraphe")
    assert expr.steps == (
        Step(Axis.CHILD, "doc", AttrEquals("name", "X")),
        Step(Axis.DESCENDANT, "Paragraphe"),
    )


def test_parse_positional():
    assert parse_path("/a/b[2]").steps == (Step(Axis.CHILD, "a"), Step(Axis.CHILD, "b", Position(2)))


@pytest.mark.parametrize("text", ["//", "/", "", "a/b", "/a[", "/a[0]", "/a[@x=1]",
                                  "/a[text()='x'", "/1a", "/a]"])
def test_syntax_errors(text):
    with pytest.raises(AxmlError) as exc:
        parse_path(text)
    assert exc.value.code == "PATH_SYNTAX"


def test_round_trips_through_str():
    for text in ["/a/b", "//x[@k='v']/*[3]", "/doc[text()=\"it's\"]//p"]:
        assert str(parse_path(text)) == text


def test_children_in_document_order():
    assert paths("/a/b", "<a><b/><c/><b/></a>") == [[0], [2]]


def test_no_match_is_empty():
    assert paths("//x", "<a><b/></a>") == []


def test_descendant_includes_root_and_nested():
    assert paths("//a", "<a><a><a/></a><b><a/></b></a>") == [[], [0], [0, 0], [1, 0]]


def test_position_is_per_parent():
    assert paths("//b[2]", "<a><b/><b/><c><b/><b/><b/></c></a>") == [[1], [2, 1]]


def test_text_predicate_uses_direct_text():
    xml = "<a><p>x</p><p><i>x</i></p><p>y<i/>x</p></a>"
    assert paths("/a/p[text()='x']", xml) == [[0], [2]]


def test_unicode_names():
    assert paths("//élément", "<r><élément/></r>") == [[0]]


def _cond(*qs):
    return Condition(tuple(Query(parse_path(q), d) for q, d in qs))


def test_condition_conjunction():
    snap = {"X": parse_document("<doc name='X'><Paragraphe/></doc>")}
    assert eval_condition(_cond(("/doc[@name='X']//Paragraphe", None)), snap)
    assert not eval_condition(_cond(("/doc//Paragraphe", None), ("//missing", None)), snap)
    assert eval_condition(Condition(()), snap)


def test_condition_after_paragraph_deleted():
    snap = {"X": parse_document("<doc name='X'><titre/></doc>")}
    assert not eval_condition(_cond(("/doc[@name='X']//Paragraphe", None)), snap)


def test_condition_scoping():
    snap = {"d1": parse_document("<a/>"), "d2": parse_document("<b/>")}
    assert eval_condition(_cond(("/b", None)), snap)
    assert not eval_condition(_cond(("/b", "d1")), snap)
    with pytest.raises(AxmlError) as exc:
        eval_condition(_cond(("/b", "d9")), snap)
    assert exc.value.code == "UNKNOWN_DOC"


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32))
def test_matches_oracle_and_is_sorted(seed):
    rng = random.Random(seed)
    doc, expr = gen.tree(rng), gen.path(rng)
    got = [a.path for a in eval_path(expr, doc)]
    assert got == oracle_eval_path(expr, doc)
    assert all(x < y for x, y in zip(got, got[1:]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_descendant_superset_of_any_fixed_prefix(seed):
    rng = random.Random(seed)
    doc = gen.tree(rng)
    prefix = gen.path(rng, 3)
    name = rng.choice(gen.NAMES)
    fixed = PathExpr(prefix.steps + (Step(Axis.CHILD, name),))
    anywhere = PathExpr((Step(Axis.DESCENDANT, name),))
    assert set(eval_path(fixed, doc)) <= set(eval_path(anywhere, doc))
