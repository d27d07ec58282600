"""Synthetic shifted benchmarks, shift construction, metrics and the contamination study."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .graph import Graph, unseen_neighbor_fractions
from .tensorcore import ContractError, SparseMatrix

SPLIT = (0.4, 0.2)  # train, val; remainder is test

CONTAMINATION_BINS = ((0.0, 0.0), (0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0))


# ---------------------------------------------------------------------------
# configs


@dataclass
class SynthConfig:
    cluster_sizes: list[int] = field(default_factory=lambda: [150, 150, 150])
    unseen_size: int = 150
    anomaly_size: int = 60
    feat_dim: int = 16
    cluster_spread: float = 0.3
    center_separation: float = 6.0
    intra_p: float = 0.01
    inter_p: float = 0.004
    anomaly_mix: float = 0.5
    seed: int = 0

    def __post_init__(self):
        sizes = list(self.cluster_sizes) + [self.unseen_size, self.anomaly_size, self.feat_dim]
        if not self.cluster_sizes or any(int(s) < 1 for s in sizes):
            raise ContractError("all sizes must be >= 1")
        for p in (self.intra_p, self.inter_p, self.anomaly_mix):
            if not 0.0 <= p <= 1.0:
                raise ContractError("probabilities and anomaly_mix must lie in [0, 1]")
        if not self.center_separation > 0:
            raise ContractError("center_separation must be positive")
        if not self.cluster_spread >= 0:
            raise ContractError("cluster_spread must be non-negative")


@dataclass
class ShiftSpec:
    method: str = "kmeans_holdout"  # or "class_holdout"
    num_clusters: int = 3
    anomaly_class_threshold: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("kmeans_holdout", "class_holdout"):
            raise ContractError(f"unknown shift method {self.method!r}")
        if self.method == "kmeans_holdout" and self.num_clusters < 2:
            raise ContractError("num_clusters must be >= 2")
        if not 0 < self.anomaly_class_threshold < 1:
            raise ContractError("anomaly_class_threshold must lie in (0, 1)")


@dataclass
class MetricReport:
    auroc: float
    auprc: float
    auroc_seen_vs_anom: float | None = None
    auroc_unseen_vs_anom: float | None = None
    contamination_bins: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# synthetic data


def _centers(rng: np.random.Generator, k: int, d: int, separation: float) -> np.ndarray:
    if k <= d:
        # orthonormal directions scaled so every pair sits exactly `separation` apart
        q, _ = np.linalg.qr(rng.standard_normal((d, k)))
        return q.T * (separation / np.sqrt(2.0))
    c = rng.standard_normal((k, d))
    return c / np.linalg.norm(c, axis=1, keepdims=True) * (separation / np.sqrt(2.0))


def _tri_pairs(k: np.ndarray):
    # linear index over the strict lower triangle -> (i, j) with j < i
    i = np.floor((1 + np.sqrt(8 * k.astype(np.float64) + 1)) / 2).astype(np.int64)
    i -= (i * (i - 1) // 2) > k
    i += ((i + 1) * i // 2) <= k
    return i, k - i * (i - 1) // 2


def _sample_pairs(rng, total: int, p: float) -> np.ndarray:
    count = rng.binomial(total, p) if total else 0
    if count == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(total, size=count, replace=False))


def sbm_edges(rng: np.random.Generator, blocks: np.ndarray, intra_p: float, inter_p: float) -> np.ndarray:
    """Undirected SBM edge list (i < j) for the given block assignment."""
    members = [np.flatnonzero(blocks == b) for b in range(int(blocks.max()) + 1)]
    out = []
    for a, ma in enumerate(members):
        na = ma.size
        idx = _sample_pairs(rng, na * (na - 1) // 2, intra_p)
        i, j = _tri_pairs(idx)
        out.append(np.stack([ma[j], ma[i]], axis=1))
        for b in range(a + 1, len(members)):
            mb = members[b]
            idx = _sample_pairs(rng, na * mb.size, inter_p)
            out.append(np.stack([ma[idx // mb.size], mb[idx % mb.size]], axis=1))
    e = np.concatenate(out) if out else np.empty((0, 2), dtype=np.int64)
    e = np.sort(e, axis=1)
    return e[np.lexsort((e[:, 1], e[:, 0]))]


def stratified_split(rng: np.random.Generator, labels: np.ndarray, eligible: np.ndarray):
    n = labels.size
    train, val, test = (np.zeros(n, dtype=bool) for _ in range(3))
    for cls in (0, 1):
        idx = np.flatnonzero(eligible & (labels == cls))
        idx = idx[rng.permutation(idx.size)]
        n_tr = int(np.floor(SPLIT[0] * idx.size))
        n_va = int(np.floor(SPLIT[1] * idx.size))
        train[idx[:n_tr]] = True
        val[idx[n_tr : n_tr + n_va]] = True
        test[idx[n_tr + n_va :]] = True
    test |= ~eligible
    return train, val, test


def synth_graph(cfg: SynthConfig) -> Graph:
    """Gaussian-cluster features on an SBM graph, with one held-out normal cluster.

    Node order: seen clusters, then the unseen cluster, then anomalies.  Each
    anomaly is drawn around a random seen center, then a fraction
    ``anomaly_mix`` of its coordinates is redrawn uniformly from
    ``[-center_separation, center_separation]``.  Anomalies form their own SBM
    block, so their links to normals come from ``inter_p`` only.
    """
    rng = np.random.default_rng(cfg.seed)
    k_seen = len(cfg.cluster_sizes)
    d = cfg.feat_dim
    centers = _centers(rng, k_seen + 1, d, cfg.center_separation)

    normal_sizes = list(cfg.cluster_sizes) + [cfg.unseen_size]
    blocks = np.concatenate([np.full(s, b) for b, s in enumerate(normal_sizes)])
    x = centers[blocks] + cfg.cluster_spread * rng.standard_normal((blocks.size, d))

    source = rng.integers(0, k_seen, size=cfg.anomaly_size)
    xa = centers[source] + cfg.cluster_spread * rng.standard_normal((cfg.anomaly_size, d))
    n_mix = int(round(cfg.anomaly_mix * d))
    for i in range(cfg.anomaly_size):
        dims = rng.choice(d, size=n_mix, replace=False)
        xa[i, dims] = rng.uniform(-cfg.center_separation, cfg.center_separation, size=n_mix)

    x = np.concatenate([x, xa])
    blocks = np.concatenate([blocks, np.full(cfg.anomaly_size, k_seen + 1)])
    n = x.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    labels[n - cfg.anomaly_size :] = 1
    unseen = blocks == k_seen
    unseen[n - cfg.anomaly_size :] = False

    edges = sbm_edges(rng, blocks, cfg.intra_p, cfg.inter_p)
    train, val, test = stratified_split(rng, labels, ~unseen)
    return Graph.from_edges(n, edges, x, labels=labels, train=train, val=val, test=test, unseen=unseen)


# ---------------------------------------------------------------------------
# clustering


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective: list[float]  # within-cluster SS after each assignment step


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def kmeans_fit(x, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Stops at an assignment fixpoint or after ``max_iter`` iterations.  Empty
    clusters keep their previous center.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must be between 1 and the number of rows ({n})")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centers[c] = x[pick]
        closest = np.minimum(closest, _sq_dists(x, centers[c : c + 1])[:, 0])

    labels = None
    objective = []
    for _ in range(max_iter):
        dist = _sq_dists(x, centers)
        new = dist.argmin(axis=1)
        objective.append(float(dist[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
        objective.append(float(((x - centers[labels]) ** 2).sum(axis=1).sum()))
    return KMeansResult(labels, centers, objective)


def kmeans(x, k: int, seed: int = 0) -> np.ndarray:
    return kmeans_fit(x, k, seed).labels


def construct_shift_kmeans(g: Graph, spec: ShiftSpec) -> Graph:
    """Flag the smallest k-means cluster of normal nodes as unseen and move it to test."""
    if spec.method != "kmeans_holdout":
        raise ContractError("construct_shift_kmeans needs method kmeans_holdout")
    y = g.require_labels()
    normal = np.flatnonzero(y == 0)
    if normal.size < spec.num_clusters:
        raise ContractError("fewer normal nodes than clusters")
    assign = kmeans(g.features[normal], spec.num_clusters, spec.seed)
    sizes = np.bincount(assign, minlength=spec.num_clusters)
    smallest = int(np.argmin(sizes))  # first minimum = lowest cluster id
    unseen = np.zeros(g.n, dtype=bool)
    unseen[normal[assign == smallest]] = True
    return g.replace(
        unseen=unseen, train=g.train & ~unseen, val=g.val & ~unseen, test=g.test | unseen
    )


def convert_imbalanced(classes, spec: ShiftSpec):
    """Multi-class labels -> (binary anomaly labels, unseen flags).

    Classes holding strictly less than the threshold share of nodes become
    anomalies; the largest remaining class becomes the unseen normal class.
    """
    classes = np.asarray(classes)
    ids, counts = np.unique(classes, return_counts=True)
    if ids.size < 2:
        raise ContractError("need at least two classes")
    share = counts / classes.size
    rare = share < spec.anomaly_class_threshold
    if not rare.any():
        raise ContractError("no class below threshold")
    if rare.all():
        raise ContractError("all classes below threshold")
    labels = np.isin(classes, ids[rare]).astype(np.int64)
    normal_counts = np.where(rare, -1, counts)
    largest = ids[int(np.argmax(normal_counts))]  # ids sorted, so ties go to the lowest id
    return labels, classes == largest


def apply_class_holdout(g: Graph, classes, spec: ShiftSpec) -> Graph:
    labels, unseen = convert_imbalanced(classes, spec)
    rng = np.random.default_rng(spec.seed)
    train, val, test = stratified_split(rng, labels, ~unseen)
    return g.replace(labels=labels, unseen=unseen, train=train, val=val, test=test)


# ---------------------------------------------------------------------------
# metrics


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels).astype(np.int64).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0/1")
    if y.min() == y.max():
        raise ContractError("both classes must be present")
    return y


def _midranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="stable")
    ss = s[order]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], ss.size]
    ranks = np.empty(s.size)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """P(anomaly outscores normal) + half the tie probability, via midranks."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = _midranks(s)[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve, ties grouped into one threshold."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    last = np.r_[ss[1:] != ss[:-1], True]
    tp = np.cumsum(yy)[last]
    fp = np.cumsum(1 - yy)[last]
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def metric_report(g: Graph, scores, mask=None) -> MetricReport:
    """Detection metrics on ``mask`` (default: the test split)."""
    y = g.require_labels()
    mask = g.test if mask is None else np.asarray(mask, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    anom = mask & (y == 1)
    seen = mask & (y == 0) & ~g.unseen
    unseen = mask & g.unseen

    def sub_auc(normals):
        if not normals.any() or not anom.any():
            return None
        sel = normals | anom
        return auroc(s[sel], y[sel])

    return MetricReport(
        auroc(s[mask], y[mask]), auprc(s[mask], y[mask]), sub_auc(seen), sub_auc(unseen)
    )


# ---------------------------------------------------------------------------
# contamination study


def _check_before_after(before: Graph, after: Graph) -> np.ndarray:
    """Index into ``after`` of every node of ``before`` (order-preserving over seen nodes)."""
    keep = ~after.unseen
    if before.n != int(keep.sum()) or before.feat_dim != after.feat_dim:
        raise ContractError("id mapping inconsistency: node counts differ")
    ids = np.flatnonzero(keep)
    if before.unseen.any() or not np.array_equal(before.features, after.features[ids]):
        raise ContractError("id mapping inconsistency: features differ")
    if before.adjacency != after.subgraph(keep).adjacency:
        raise ContractError("id mapping inconsistency: edges among seen nodes differ")
    if before.labels is not None and not np.array_equal(before.labels, after.labels[ids]):
        raise ContractError("id mapping inconsistency: labels differ")
    return ids


def contamination_study(g_before: Graph, g_after: Graph, model) -> list[dict]:
    """Mean change in anomaly probability of seen normals, binned by unseen-neighbour share."""
    from .gadmodel import score

    ids = _check_before_after(g_before, g_after)
    y = g_after.require_labels()
    p_before = expit(score(g_before, model))
    p_after = expit(score(g_after, model))[ids]
    delta = p_after - p_before
    frac = unseen_neighbor_fractions(g_after)[ids]
    seen_normal = y[ids] == 0

    bins = []
    for lo, hi in CONTAMINATION_BINS:
        if hi == lo:
            member = frac == lo
        else:
            member = (frac > lo) & (frac <= hi)
        member &= seen_normal
        count = int(member.sum())
        bins.append({
            "lo": lo,
            "hi": hi,
            "mean_delta": float(delta[member].mean()) if count else None,
            "count": count,
        })
    return bins
