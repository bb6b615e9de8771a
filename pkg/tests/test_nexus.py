import numpy as np
import pytest

from conftest import data_path
from dollo.likelihood import ABSENT, MISSING, PRESENT
from dollo.nexus import (NexusError, TraitMatrix, parse_newick, parse_nexus,
                         write_data_nexus, write_newick)
from dollo.trees import CladeConstraint, random_exponential_tree


@pytest.fixture
def nine_taxa_text():
    with open(data_path("nine_taxa.nex")) as f:
        return f.read()


def test_example_file(nine_taxa_text):
    parsed = parse_nexus(nine_taxa_text)
    assert parsed.matrix.n_taxa == 9
    assert parsed.matrix.n_traits == 30
    assert len(parsed.clades) == 2
    c1 = parsed.clades[0]
    assert c1.name == "Clade_1"
    assert c1.rootmin == 346 and c1.rootmax == 422
    assert c1.taxa == frozenset({"taxon_4", "taxon_5"})
    c2 = parsed.clades[1]
    assert c2.originatemin == 346 and c2.rootmax is None
    assert c2.taxa == frozenset({"taxon_1", "taxon_8", "taxon_9"})
    assert not parsed.is_synthetic


def test_data_block_only():
    text = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=3;\n"
            "MATRIX\na 101\nb 011\n;\nEND;\n")
    parsed = parse_nexus(text)
    assert parsed.clades == []
    assert parsed.matrix.taxa_names == ["a", "b"]


def test_gap_equals_missing():
    text = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=3;\n"
            "MATRIX\na 1-1\nb 1?1\n;\nEND;\n")
    cells = parse_nexus(text).matrix.cells
    assert cells[0, 1] == MISSING
    assert cells[0, 1] == cells[1, 1]


def test_keyword_case_insensitive_labels_case_sensitive():
    text = ("#nexus\nbegin data;\ndimensions NTAX=2 nchar=2;\n"
            "matrix\nAbC 10\nabc 01\n;\nend;\n")
    m = parse_nexus(text).matrix
    assert m.taxa_names == ["AbC", "abc"]


def test_interleaved_equals_standard():
    std = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=6;\n"
           "MATRIX\na 101010\nb 010101\n;\nEND;\n")
    inter = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=6;\n"
             "FORMAT INTERLEAVE;\nMATRIX\na 101\nb 010\n\n[second half]\n"
             "a 010\nb 101\n;\nEND;\n")
    assert np.array_equal(parse_nexus(std).matrix.cells,
                          parse_nexus(inter).matrix.cells)


def test_matrix_row_comment_is_error():
    text = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=3;\n"
            "MATRIX\na 101 [note]\nb 011\n;\nEND;\n")
    with pytest.raises(NexusError, match="comment"):
        parse_nexus(text)


def test_dimension_mismatch():
    text = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=3 NCHAR=3;\n"
            "MATRIX\na 101\nb 011\n;\nEND;\n")
    with pytest.raises(NexusError, match="ntax"):
        parse_nexus(text)
    text = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=4;\n"
            "MATRIX\na 101\nb 011\n;\nEND;\n")
    with pytest.raises(NexusError, match="characters"):
        parse_nexus(text)


def test_duplicate_taxon_and_bad_symbol():
    dup = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=3;\n"
           "MATRIX\na 101\na 011\n;\nEND;\n")
    with pytest.raises(NexusError, match="duplicate"):
        parse_nexus(dup)
    bad = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=3;\n"
           "MATRIX\na 1x1\nb 011\n;\nEND;\n")
    with pytest.raises(NexusError, match="symbol"):
        parse_nexus(bad)


def test_clade_unknown_taxon():
    text = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=2;\n"
            "MATRIX\na 10\nb 01\n;\nEND;\n"
            "BEGIN CLADES;\nCLADE NAME = z TAXA = a, ghost;\nEND;\n")
    with pytest.raises(NexusError, match="unknown"):
        parse_nexus(text)


def test_unknown_blocks_ignored_and_charlabels():
    text = ("#NEXUS\nBEGIN WEIRD;\nanything;\nEND;\n"
            "BEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=2;\n"
            "CHARLABELS w1 w2;\nMATRIX\na 10\nb 01\n;\nEND;\n"
            "BEGIN CHARACTERS;\nstuff;\nEND;\n")
    m = parse_nexus(text).matrix
    assert m.trait_labels == ["w1", "w2"]


def test_missing_header():
    with pytest.raises(NexusError, match="#NEXUS"):
        parse_nexus("BEGIN DATA;\nEND;\n")


def test_synthetic_flag():
    text = ("#NEXUS\nBEGIN DATA;\nDIMENSIONS NTAX=2 NCHAR=2;\n"
            "MATRIX\na 10\nb 01\n;\nEND;\n"
            "BEGIN TREES;\nTREE t = (a:1,b:1);\nEND;\n"
            "BEGIN SYNTHESIZE;\nK = 5;\nPsi = 0.3;\nEND;\n")
    parsed = parse_nexus(text)
    assert parsed.is_synthetic
    assert parsed.embedded_tree is not None
    assert parsed.synthesize_params["K"] == "5"


# -- newick -----------------------------------------------------------------

def test_parse_newick_cherry():
    t = parse_newick("((A:1,B:1):1,C:2);")
    assert t.n_leaves == 3
    assert t.age[t.root] == pytest.approx(2.0)
    assert sorted(t.leaf_names.values()) == ["A", "B", "C"]
    a = t.name_to_leaf()["A"]
    assert t.age[a] == pytest.approx(0.0)


def test_parse_newick_rejects_nonbinary():
    with pytest.raises(NexusError, match="binary"):
        parse_newick("(A:1,B:1,C:1);")


def test_parse_newick_rejects_unbalanced():
    with pytest.raises(NexusError):
        parse_newick("((A:1,B:1):1,C:2;")


def test_newick_round_trip(rng):
    for _ in range(10):
        t = random_exponential_tree(10, 0.37, rng)
        back = parse_newick(write_newick(t), leaf_order=[t.leaf_names[i]
                                                         for i in t.leaves()])
        assert back.leaf_names == t.leaf_names
        assert back.leafsets()[back.root] == frozenset(back.leaves())
        splits = {frozenset(t.leaf_names[u] for u in t.leafset(v)): t.age[v]
                  for v in t.age}
        splits_back = {frozenset(back.leaf_names[u] for u in back.leafset(v)):
                       back.age[v] for v in back.age}
        assert set(splits) == set(splits_back)
        for key, age in splits.items():
            assert splits_back[key] == pytest.approx(age, rel=1e-9, abs=1e-9)


def test_newick_cat_annotations_round_trip(rng):
    t = random_exponential_tree(5, 0.5, rng)
    e1, e2 = t.edges()[0], t.edges()[2]
    t.cats[e1] = [0.3, 0.6]
    t.cats[e2] = [0.9]
    text = write_newick(t, with_cats=True)
    back = parse_newick(text, leaf_order=[t.leaf_names[i] for i in t.leaves()])
    per_split = {frozenset(t.leafset(v)): len(t.cats[v]) for v in t.parent}
    per_split_back = {frozenset(back.leafset(v)): len(back.cats[v])
                      for v in back.parent}
    assert per_split == per_split_back


def test_write_data_nexus_round_trip(rng):
    for _ in range(5):
        L = int(rng.integers(2, 7))
        N = int(rng.integers(1, 40))
        cells = rng.choice([ABSENT, PRESENT, MISSING], size=(L, N),
                           p=[0.4, 0.5, 0.1]).astype(np.int8)
        names = [f"tx{i}" for i in range(L)]
        m = TraitMatrix(taxa_names=names, cells=cells)
        clades = [CladeConstraint("c1", frozenset(names[:2]), rootmin=10.0,
                                  rootmax=20.0)] if L >= 2 else []
        text = write_data_nexus(m, clades=clades)
        back = parse_nexus(text)
        assert back.matrix.taxa_names == names
        assert np.array_equal(back.matrix.cells, cells)
        if clades:
            assert back.clades[0].taxa == clades[0].taxa
            assert back.clades[0].rootmin == 10.0
