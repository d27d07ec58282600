import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftguard import tensorcore as tc
from shiftguard.graph import (
    BundleError,
    Graph,
    identity_operator,
    load_bundle,
    save_bundle,
    sym_normalize,
    unseen_neighbor_fraction,
    unseen_neighbor_fractions,
)
from shiftguard.tensorcore import ContractError, SparseMatrix

from .helpers import path_graph, random_graph


def _labelled(rng, n=10, p=0.3):
    labels = np.zeros(n, dtype=int)
    labels[:2] = 1
    unseen = np.zeros(n, dtype=bool)
    unseen[-3:] = True
    train = np.zeros(n, dtype=bool)
    train[:4] = True
    val = np.zeros(n, dtype=bool)
    val[4:6] = True
    return random_graph(rng, n, p, labels=labels, train=train, val=val, test=~(train | val), unseen=unseen)


def _dense_norm(g):
    a = g.adjacency.dense() + np.eye(g.n)
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


# --- invariants -------------------------------------------------------------------


def test_rejects_self_loop():
    with pytest.raises(ContractError):
        Graph(SparseMatrix.from_coo(2, [0, 0, 1], [0, 1, 0]), np.zeros((2, 1)))


def test_rejects_asymmetric_adjacency():
    with pytest.raises(ContractError):
        Graph(SparseMatrix.from_coo(2, [0], [1]), np.zeros((2, 1)))
    with pytest.raises(ContractError):
        Graph(SparseMatrix.from_coo(2, [0, 1], [1, 0], [1.0, 2.0]), np.zeros((2, 1)))


def test_rejects_overlapping_masks():
    with pytest.raises(ContractError):
        Graph.from_edges(2, [], np.zeros((2, 1)), train=[True, False], test=[True, True])


def test_rejects_unseen_anomaly_and_unseen_train():
    with pytest.raises(ContractError):
        Graph.from_edges(2, [], np.zeros((2, 1)), labels=[1, 0], unseen=[True, False])
    with pytest.raises(ContractError):
        Graph.from_edges(2, [], np.zeros((2, 1)), train=[True, False], unseen=[True, False])


def test_rejects_partial_split_of_labelled_nodes():
    with pytest.raises(ContractError):
        Graph.from_edges(3, [], np.zeros((3, 1)), labels=[0, 0, 1], train=[True, False, False])


def test_rejects_bad_labels_and_feature_shape():
    with pytest.raises(ContractError):
        Graph.from_edges(2, [], np.zeros((2, 1)), labels=[0, 2])
    with pytest.raises(ContractError):
        Graph.from_edges(2, [], np.zeros((3, 1)))


def test_graph_arrays_are_read_only():
    g = path_graph(3)
    with pytest.raises(ValueError):
        g.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        g.unseen[0] = True


def test_require_labels():
    with pytest.raises(ContractError, match="labels required"):
        path_graph(3).require_labels()


def test_remove_unseen_drops_nodes_and_edges():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)], np.arange(4.0)[:, None], unseen=[False, False, True, False])
    sub = g.remove_unseen()
    assert sub.n == 3 and sub.num_edges == 1
    np.testing.assert_array_equal(sub.features[:, 0], [0.0, 1.0, 3.0])
    assert not sub.unseen.any()


# --- operators ------------------------------------------------------------------


def test_sym_normalize_single_node():
    g = Graph.from_edges(1, [], np.zeros((1, 1)))
    np.testing.assert_array_equal(sym_normalize(g).matrix.dense(), [[1.0]])


def test_sym_normalize_two_nodes():
    np.testing.assert_array_equal(sym_normalize(path_graph(2)).matrix.dense(), np.full((2, 2), 0.5))


def test_sym_normalize_isolated_node_gets_unit_self_loop():
    g = Graph.from_edges(3, [(0, 1)], np.zeros((3, 1)))
    m = sym_normalize(g).matrix.dense()
    assert m[2, 2] == 1.0 and m[2, :2].sum() == 0.0


def test_sym_normalize_spectral_radius_power_iteration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = random_graph(rng, int(rng.integers(2, 30)), 0.2)
        op = sym_normalize(g)
        v = rng.standard_normal((g.n, 1))
        for _ in range(200):
            v = tc.spmm(op.matrix, tc.Tensor(v)).data
            nv = np.linalg.norm(v)
            if nv == 0:
                break
            v = v / nv
        rayleigh = float(v[:, 0] @ op.matrix.dense() @ v[:, 0])
        assert abs(rayleigh) <= 1.0 + 1e-12


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 20), p=st.floats(0.0, 1.0), seed=st.integers(0, 2**31))
def test_sym_normalize_matches_dense_oracle(n, p, seed):
    g = random_graph(np.random.default_rng(seed), n, p)
    m = sym_normalize(g).matrix
    dense = m.dense()
    np.testing.assert_array_equal(dense, dense.T)
    np.testing.assert_allclose(dense, _dense_norm(g), rtol=1e-14, atol=0)
    assert np.all(m.values > 0) and np.all(m.values <= 1.0)


def test_identity_operator_edge_independent():
    rng = np.random.default_rng(1)
    a = random_graph(rng, 8, 0.5)
    b = random_graph(rng, 8, 0.1)
    assert identity_operator(a.n).matrix == identity_operator(b.n).matrix
    x = rng.standard_normal((8, 3))
    np.testing.assert_array_equal(tc.spmm(identity_operator(8).matrix, tc.Tensor(x)).data, x)
    np.testing.assert_array_equal(identity_operator(1).matrix.dense(), [[1.0]])
    with pytest.raises(ContractError):
        identity_operator(0)


# --- neighbourhood statistics ---------------------------------------------------------


def test_unseen_fraction_counting():
    g = Graph.from_edges(
        5, [(0, 1), (0, 2), (0, 3), (0, 4)], np.zeros((5, 1)), unseen=[False, True, True, False, False]
    )
    assert unseen_neighbor_fraction(g, 0) == 0.5
    assert unseen_neighbor_fraction(g, 3) == 0.0
    isolated = Graph.from_edges(2, [], np.zeros((2, 1)))
    assert unseen_neighbor_fraction(isolated, 1) == 0.0
    with pytest.raises(ContractError):
        unseen_neighbor_fraction(g, 5)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 25), p=st.floats(0.0, 0.6), seed=st.integers(0, 2**31))
def test_unseen_fractions_match_adjacency_scan(n, p, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, p, unseen=rng.random(n) < 0.3)
    dense = g.adjacency.dense()
    fr = unseen_neighbor_fractions(g)
    for i in range(n):
        nbrs = [j for j in range(n) if dense[i, j]]
        expected = sum(g.unseen[j] for j in nbrs) / len(nbrs) if nbrs else 0.0
        assert fr[i] == pytest.approx(expected, abs=1e-15)
        assert fr[i] == unseen_neighbor_fraction(g, i)
    # fraction * degree summed = arcs ending at an unseen node
    total = float((fr * g.degrees()).sum())
    assert total == pytest.approx(dense[:, g.unseen].sum(), abs=1e-9)


# --- bundle I/O -------------------------------------------------------------------


def test_bundle_round_trip(tmp_path):
    g = _labelled(np.random.default_rng(2))
    save_bundle(g, tmp_path / "b")
    assert load_bundle(tmp_path / "b") == g
    assert json.loads((tmp_path / "b" / "meta.json").read_text()) == {
        "num_nodes": 10, "feat_dim": 3, "has_labels": True,
    }
    assert (tmp_path / "b" / "masks.csv").read_text().splitlines()[0] == "train,val,test,unseen"


def test_bundle_round_trip_unlabelled_and_extreme_floats(tmp_path):
    x = np.array([[1e-300, -0.1], [np.pi, 2.0**60 + 1]])
    g = Graph.from_edges(2, [(0, 1)], x)
    save_bundle(g, tmp_path)
    back = load_bundle(tmp_path)
    assert back == g and not back.has_labels
    assert not (tmp_path / "labels.csv").exists()


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 2**31))
def test_bundle_round_trip_property(tmp_path_factory, n, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, 0.4, unseen=rng.random(n) < 0.5)
    path = tmp_path_factory.mktemp("bundle")
    save_bundle(g, path)
    assert load_bundle(path) == g


def _saved(tmp_path):
    save_bundle(_labelled(np.random.default_rng(3)), tmp_path)
    return tmp_path


def test_bundle_rejects_asymmetric_edges(tmp_path):
    p = _saved(tmp_path)
    lines = (p / "edges.csv").read_text().splitlines()
    (p / "edges.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(BundleError, match="asymmetric"):
        load_bundle(p)


def test_bundle_rejects_feature_width(tmp_path):
    p = _saved(tmp_path)
    meta = json.loads((p / "meta.json").read_text())
    meta["feat_dim"] = 2
    (p / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(BundleError, match="features.csv"):
        load_bundle(p)


def test_bundle_rejects_bad_label_and_missing_file(tmp_path):
    p = _saved(tmp_path)
    lines = (p / "labels.csv").read_text().splitlines()
    lines[1] = "2"
    (p / "labels.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(BundleError, match="0 or 1"):
        load_bundle(p)
    (p / "labels.csv").unlink()
    with pytest.raises(BundleError, match="missing file"):
        load_bundle(p)


def test_bundle_rejects_self_loop_and_duplicates(tmp_path):
    p = _saved(tmp_path)
    base = (p / "edges.csv").read_text()
    (p / "edges.csv").write_text(base + "1,1\n")
    with pytest.raises(BundleError, match="self-loop"):
        load_bundle(p)
    first = base.splitlines()[1]
    (p / "edges.csv").write_text(base + first + "\n")
    with pytest.raises(BundleError, match="duplicate"):
        load_bundle(p)
