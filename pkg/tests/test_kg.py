import itertools

import numpy as np
import pytest

from kggan.kg import (
    HAS_ATTRIBUTE, SUBCLASS, KGParseError, KGValidationError, KnowledgeGraph, LabelSpace,
    edge_sets_for_decoder, extract_views, load_graph, load_name_vectors, parse_triples,
    save_graph, save_name_vectors,
)

HORSES = """\
# a tiny taxonomy
horse\tsubClass\tequine
zebra\tsubClass\tequine
zebra\thasAttribute\tstripe
"""


def write(tmp_path, text, name="kg.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def random_kg(rng, n_classes=12, n_attrs=8, p_attr=0.3):
    triples = []
    for i in range(1, n_classes):
        triples.append((f"c{i:02d}", SUBCLASS, f"c{int(rng.integers(0, i)):02d}"))
    for i in range(n_classes):
        for a in range(n_attrs):
            if rng.random() < p_attr:
                triples.append((f"c{i:02d}", HAS_ATTRIBUTE, f"a{a:02d}"))
    return triples


def test_load_small_graph(tmp_path):
    kg = load_graph(write(tmp_path, HORSES))
    assert kg.classes == ("equine", "horse", "zebra")
    assert kg.attributes == ("stripe",)
    assert len(kg.subclass) == 2 and len(kg.has_attribute) == 1
    assert kg.parents("zebra") == ["equine"]
    assert kg.attributes_of("zebra") == ["stripe"]


def test_duplicate_triples_collapse(tmp_path):
    kg = load_graph(write(tmp_path, HORSES + "zebra\thasAttribute\tstripe\n"))
    assert len(kg.has_attribute) == 1


def test_unknown_relation_reports_line(tmp_path):
    with pytest.raises(KGParseError, match="line 3") as err:
        load_graph(write(tmp_path, "a\tsubClass\tb\n\nlion\teats\tzebra\n"))
    assert err.value.line == 3


def test_malformed_line():
    with pytest.raises(KGParseError, match="3 tab-separated"):
        parse_triples(["a subClass b"])


def test_cycle_is_rejected():
    with pytest.raises(KGValidationError, match="cycle"):
        KnowledgeGraph.from_triples([("a", SUBCLASS, "b"), ("b", SUBCLASS, "c"), ("c", SUBCLASS, "a")])


def test_self_loop_is_rejected():
    with pytest.raises(KGValidationError, match="self-loop"):
        KnowledgeGraph.from_triples([("a", SUBCLASS, "a")])


def test_name_used_as_class_and_attribute():
    with pytest.raises(KGValidationError, match="both"):
        KnowledgeGraph.from_triples([("a", SUBCLASS, "b"), ("b", HAS_ATTRIBUTE, "a")])


def test_dangling_index_is_rejected():
    kg = KnowledgeGraph(("a", "b"), (), ((0, 5),), ())
    with pytest.raises(KGValidationError, match="missing"):
        kg.validate()


def test_round_trip(tmp_path, rng):
    kg = KnowledgeGraph.from_triples(random_kg(rng))
    save_graph(kg, tmp_path / "g.tsv")
    again = load_graph(tmp_path / "g.tsv")
    assert again == kg
    assert set(again.triples()) == set(kg.triples())


def test_views_of_small_graph(tmp_path):
    cv, av = extract_views(load_graph(write(tmp_path, HORSES)))
    assert cv.neighbors_of("zebra") == {"equine"}
    assert cv.neighbors_of("equine") == {"horse", "zebra"}
    assert av.neighbors_of("zebra") == {"stripe"}
    assert av.neighbors_of("horse") == set()
    assert av.nodes[:av.n_classes] == cv.nodes


def test_view_without_attributes_has_empty_neighbourhoods():
    kg = KnowledgeGraph.from_triples([("a", SUBCLASS, "b")])
    _, av = extract_views(kg)
    assert av.edges == () and all(nb == () for nb in av.neighbors)


@pytest.mark.parametrize("seed", range(5))
def test_views_partition_edges_by_relation(seed):
    triples = random_kg(np.random.default_rng(seed), n_classes=20)
    kg = KnowledgeGraph.from_triples(triples)
    cv, av = extract_views(kg)
    sub = sorted(tuple(sorted((kg.class_index[s], kg.class_index[o]))) for s, r, o in triples if r == SUBCLASS)
    has = sorted((kg.class_index[s], len(kg.classes) + kg.attribute_index[o])
                 for s, r, o in triples if r == HAS_ATTRIBUTE)
    assert sorted(cv.edges) == sub
    assert sorted(av.edges) == has
    assert len(cv.edges) == len(kg.subclass)
    for view in (cv, av):
        for i, nb in enumerate(view.neighbors):
            for j in nb:
                assert i in view.neighbors[j]


def test_mean_adjacency_rows(rng):
    cv, _ = extract_views(KnowledgeGraph.from_triples(random_kg(rng)))
    a = cv.mean_adjacency()
    for i, nb in enumerate(cv.neighbors):
        np.testing.assert_allclose(a[i].sum(), 1.0 if nb else 0.0)


def test_exhaustive_class_negatives():
    kg = KnowledgeGraph.from_triples([("b", SUBCLASS, "a"), ("c", SUBCLASS, "a")], classes=["d"])
    cv, _ = extract_views(kg)
    e = edge_sets_for_decoder(cv, "exhaustive")
    assert len(e.positives) == 2 and len(e.negatives) == 4
    assert e.weight == 0.5


def test_attribute_negatives_are_class_attribute_pairs():
    kg = KnowledgeGraph.from_triples([("x", HAS_ATTRIBUTE, "p")], classes=["y"], attributes=["q"])
    _, av = extract_views(kg)
    e = edge_sets_for_decoder(av, "exhaustive")
    assert len(e.negatives) == 3
    for i, j in e.negatives:
        assert av.admissible(i, j) and i < av.n_classes <= j


@pytest.mark.parametrize("seed", range(5))
def test_sampled_negatives(seed):
    kg = KnowledgeGraph.from_triples(random_kg(np.random.default_rng(seed), n_classes=30, n_attrs=20, p_attr=0.1))
    for view in extract_views(kg):
        e = edge_sets_for_decoder(view, "sampled", ratio=5, seed=seed)
        assert len(e.negatives) == 5 * len(e.positives)
        pos = {tuple(p) for p in e.positives}
        neg = [tuple(p) for p in e.negatives]
        assert len(set(neg)) == len(neg)
        assert not pos & set(neg)
        assert all(view.admissible(i, j) for i, j in neg)
        again = edge_sets_for_decoder(view, "sampled", ratio=5, seed=seed)
        np.testing.assert_array_equal(again.negatives, e.negatives)


def test_exhaustive_complement_by_enumeration(rng):
    kg = KnowledgeGraph.from_triples(random_kg(rng))
    cv, av = extract_views(kg)
    for view in (cv, av):
        e = edge_sets_for_decoder(view, "exhaustive")
        linked = {tuple(p) for p in e.positives}
        brute = {(i, j) for i, j in itertools.combinations(range(view.n_nodes), 2)
                 if view.admissible(i, j) and (i, j) not in linked}
        assert {tuple(p) for p in e.negatives} == brute
        assert e.weight == len(e.positives) / len(brute)


def test_auto_policy_switches_at_threshold(rng):
    cv, _ = extract_views(KnowledgeGraph.from_triples(random_kg(rng, n_classes=12)))
    assert len(edge_sets_for_decoder(cv, "auto").negatives) == 66 - len(cv.edges)
    small = edge_sets_for_decoder(cv, "auto", max_exhaustive=10, ratio=2)
    assert len(small.negatives) == 2 * len(cv.edges)


def test_empty_view_is_usage_error():
    _, av = extract_views(KnowledgeGraph.from_triples([("a", SUBCLASS, "b")]))
    with pytest.raises(ValueError, match="no edges"):
        edge_sets_for_decoder(av)


def test_label_space_disjoint():
    with pytest.raises(KGValidationError):
        LabelSpace(("a", "b"), ("b",))
    kg = KnowledgeGraph.from_triples([("a", SUBCLASS, "b")])
    LabelSpace(("a",), ("b",)).check_against(kg)
    with pytest.raises(KGValidationError):
        LabelSpace(("a",), ("zz",)).check_against(kg)


def test_name_vector_round_trip(tmp_path, rng):
    vecs = {f"n{i}": rng.normal(size=4) for i in range(5)}
    save_name_vectors(tmp_path / "v.vec", "class", vecs)
    kind, back = load_name_vectors(tmp_path / "v.vec")
    assert kind == "class" and set(back) == set(vecs)
    for k in vecs:
        np.testing.assert_array_equal(back[k], vecs[k])


def test_name_vector_dimension_error(tmp_path):
    p = write(tmp_path, "name_vectors class 3\nhorse\t0.1,0.2\n", "v.vec")
    with pytest.raises(KGParseError, match="line 2"):
        load_name_vectors(p)
