"""Attributed graphs, aggregation operators and the on-disk bundle format."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorcore import ContractError, SparseMatrix


class BundleError(ValueError):
    pass


def _bool(a, n, name):
    a = np.zeros(n, dtype=bool) if a is None else np.asarray(a, dtype=bool)
    if a.shape != (n,):
        raise ContractError(f"{name} must have length {n}")
    a = a.copy()
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph with optional binary labels.

    ``labels`` uses 1 for anomalies.  ``unseen`` flags normal nodes whose
    pattern was absent at training time; they live only in the test split.
    """

    adjacency: SparseMatrix
    features: np.ndarray
    labels: np.ndarray | None = None
    train: np.ndarray | None = None
    val: np.ndarray | None = None
    test: np.ndarray | None = None
    unseen: np.ndarray | None = None

    def __post_init__(self):
        n = self.adjacency.n
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != n:
            raise ContractError(f"features must be {n} x d")
        x.flags.writeable = False
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.array(self.labels)
            if y.shape != (n,) or not np.all((y == 0) | (y == 1)):
                raise ContractError("labels must be a 0/1 vector of length n")
            y = y.astype(np.int64)
            y.flags.writeable = False
            object.__setattr__(self, "labels", y)
        for name in ("train", "val", "test", "unseen"):
            object.__setattr__(self, name, _bool(getattr(self, name), n, name))
        self._validate()

    def _validate(self):
        a = self.adjacency
        rows = a.row_indices()
        if np.any(rows == a.col_idx):
            raise ContractError("self-loops are not allowed")
        # symmetric: the transposed entry list, sorted, must equal the original
        order = np.lexsort((rows, a.col_idx))
        if not (
            np.array_equal(a.col_idx[order], rows)
            and np.array_equal(rows[order], a.col_idx)
            and np.array_equal(a.values[order], a.values)
        ):
            raise ContractError("adjacency must be symmetric")
        tr, va, te = self.train, self.val, self.test
        if np.any(tr & va) or np.any(tr & te) or np.any(va & te):
            raise ContractError("train/val/test masks must be disjoint")
        if np.any(self.unseen & tr):
            raise ContractError("unseen nodes may not be in the train split")
        if self.labels is not None:
            if np.any(self.unseen & (self.labels == 1)):
                raise ContractError("unseen nodes must be labelled normal")
            if (tr | va | te).any() and not np.all(tr | va | te):
                raise ContractError("every labelled node must be in exactly one split")

    @classmethod
    def from_edges(cls, n: int, edges, features, **kw) -> "Graph":
        """Build from undirected (i, j) pairs; each pair is stored as both arcs."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        return cls(SparseMatrix.from_coo(n, src, dst), features, **kw)

    @property
    def n(self) -> int:
        return self.adjacency.n

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.row_ptr)

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ContractError("labels required")
        return self.labels

    def replace(self, **changes) -> "Graph":
        fields = dict(
            adjacency=self.adjacency, features=self.features, labels=self.labels,
            train=self.train, val=self.val, test=self.test, unseen=self.unseen,
        )
        fields.update(changes)
        return Graph(**fields)

    def without_labels(self) -> "Graph":
        return self.replace(labels=None)

    def subgraph(self, keep) -> "Graph":
        """Induced subgraph on ``keep`` (bool mask); node order is preserved."""
        keep = np.asarray(keep, dtype=bool)
        new_id = np.cumsum(keep) - 1
        a = self.adjacency
        rows = a.row_indices()
        sel = keep[rows] & keep[a.col_idx]
        adj = SparseMatrix.from_coo(
            int(keep.sum()), new_id[rows[sel]], new_id[a.col_idx[sel]], a.values[sel]
        )
        return Graph(
            adj,
            self.features[keep],
            None if self.labels is None else self.labels[keep],
            self.train[keep], self.val[keep], self.test[keep], self.unseen[keep],
        )

    def remove_unseen(self) -> "Graph":
        """The pre-shift graph: unseen nodes and their incident edges dropped."""
        return self.subgraph(~self.unseen)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.adjacency == other.adjacency
            and np.array_equal(self.features, other.features)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("train", "val", "test", "unseen")
            )
        )

    __hash__ = None


@dataclass(frozen=True)
class AggregationOperator:
    kind: str  # "normalized_adjacency" | "identity"
    matrix: SparseMatrix


def sym_normalize(g: Graph) -> AggregationOperator:
    """GCN operator D^-1/2 (A + I) D^-1/2, degrees taken on A + I."""
    a = g.adjacency
    n = a.n
    rows = np.concatenate([a.row_indices(), np.arange(n)])
    cols = np.concatenate([a.col_idx, np.arange(n)])
    vals = np.concatenate([a.values, np.ones(n)])
    deg = np.bincount(rows, weights=vals, minlength=n)
    # product taken in (min, max) order so (i,j) and (j,i) are bit-identical
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    vals = vals / np.sqrt(deg[lo] * deg[hi])
    return AggregationOperator("normalized_adjacency", SparseMatrix.from_coo(n, rows, cols, vals))


def identity_operator(n: int) -> AggregationOperator:
    if n < 1:
        raise ContractError("identity_operator needs n >= 1")
    return AggregationOperator("identity", SparseMatrix.identity(n))


def unseen_neighbor_fractions(g: Graph) -> np.ndarray:
    """Per-node share of 1-hop neighbours flagged unseen (0 for isolated nodes)."""
    a = g.adjacency
    deg = np.diff(a.row_ptr)
    hits = np.bincount(a.row_indices(), weights=g.unseen[a.col_idx].astype(float), minlength=a.n)
    out = np.zeros(a.n)
    np.divide(hits, deg, out=out, where=deg > 0)
    return out


def unseen_neighbor_fraction(g: Graph, node: int) -> float:
    if not 0 <= node < g.n:
        raise ContractError(f"node {node} out of range")
    a = g.adjacency
    nbrs = a.col_idx[a.row_ptr[node] : a.row_ptr[node + 1]]
    if nbrs.size == 0:
        return 0.0
    return float(g.unseen[nbrs].sum() / nbrs.size)


# ---------------------------------------------------------------------------
# bundle I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def save_bundle(g: Graph, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": g.n, "feat_dim": g.feat_dim, "has_labels": g.has_labels}
    (path / "meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
    a = g.adjacency
    with open(path / "edges.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["src", "dst"])
        w.writerows(zip(a.row_indices().tolist(), a.col_idx.tolist()))
    with open(path / "features.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in g.features:
            w.writerow([_fmt(v) for v in row])
    labels_path = path / "labels.csv"
    if g.has_labels:
        with open(labels_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["label"])
            w.writerows([[int(v)] for v in g.labels])
    elif labels_path.exists():
        labels_path.unlink()
    with open(path / "masks.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["train", "val", "test", "unseen"])
        cols = np.stack([g.train, g.val, g.test, g.unseen], axis=1).astype(int)
        w.writerows(cols.tolist())


def _read_csv(path: Path, header: list[str] | None):
    if not path.exists():
        raise BundleError(f"missing file: {path.name}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if header is not None:
        if not rows or rows[0] != header:
            raise BundleError(f"{path.name}: expected header {','.join(header)}")
        rows = rows[1:]
    return rows


def _binary(rows, path_name, ncols):
    try:
        arr = np.array([[int(v) for v in r] for r in rows], dtype=np.int64).reshape(-1, ncols)
    except ValueError as exc:
        raise BundleError(f"{path_name}: {exc}") from None
    if not np.all((arr == 0) | (arr == 1)):
        raise BundleError(f"{path_name}: values must be 0 or 1")
    return arr


def load_bundle(path) -> Graph:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise BundleError("missing file: meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    try:
        n, d, has_labels = int(meta["num_nodes"]), int(meta["feat_dim"]), bool(meta["has_labels"])
    except KeyError as exc:
        raise BundleError(f"meta.json: missing key {exc}") from None

    feat_rows = _read_csv(path / "features.csv", None)
    if len(feat_rows) != n or any(len(r) != d for r in feat_rows):
        raise BundleError(f"features.csv: expected {n} rows x {d} columns")
    x = np.array([[float(v) for v in r] for r in feat_rows], dtype=np.float64).reshape(n, d)

    edge_rows = _read_csv(path / "edges.csv", ["src", "dst"])
    e = np.array([[int(s), int(t)] for s, t in edge_rows], dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise BundleError("edges.csv: node id out of range")
    if np.any(e[:, 0] == e[:, 1]):
        raise BundleError("edges.csv: self-loops are not allowed")
    arcs = set(map(tuple, e.tolist()))
    if len(arcs) != len(e):
        raise BundleError("edges.csv: duplicate arc")
    if any((t, s) not in arcs for s, t in arcs):
        raise BundleError("edges.csv: asymmetric edge list")
    adj = SparseMatrix.from_coo(n, e[:, 0], e[:, 1])

    labels = None
    if has_labels:
        lab = _binary(_read_csv(path / "labels.csv", ["label"]), "labels.csv", 1)
        if lab.shape[0] != n:
            raise BundleError(f"labels.csv: expected {n} rows")
        labels = lab[:, 0]

    masks = _binary(_read_csv(path / "masks.csv", ["train", "val", "test", "unseen"]), "masks.csv", 4)
    if masks.shape[0] != n:
        raise BundleError(f"masks.csv: expected {n} rows")
    m = masks.astype(bool)
    try:
        return Graph(adj, x, labels, m[:, 0], m[:, 1], m[:, 2], m[:, 3])
    except ContractError as exc:
        raise BundleError(str(exc)) from None
