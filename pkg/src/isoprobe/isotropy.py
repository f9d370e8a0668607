"""Embedding-space isotropy diagnostics.

Effective dimension from the PCA spectrum, expected inter-token cosine
similarity (globally and after per-cluster mean removal), and k-means
clustering with silhouette-based selection of the cluster count.  All
sampling draws from caller-provided RngStreams, so every metric is a
pure function of (data, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, UndefinedMetricError
from .numerics import RngStream, as_matrix, pca
from .theory import isotropy_partition


@dataclass(frozen=True)
class EffectiveDimension:
    value: int
    degenerate: bool


def effective_dimension(a, eps):
    """Smallest m whose leading PCA components capture fraction eps of
    the variance; rows are centered first."""
    if not 0.0 < eps <= 1.0:
        raise InvalidArgumentError(f"eps must be in (0, 1], got {eps}")
    res = pca(a)
    if float(res.eigenvalues.sum()) <= 0.0:
        return EffectiveDimension(1, True)
    cum = np.cumsum(res.explained_ratio)
    hits = np.flatnonzero(cum >= eps - 1e-12)
    value = int(hits[0]) + 1 if hits.size else cum.size
    return EffectiveDimension(value, False)


@dataclass(frozen=True)
class CosineStat:
    value: float
    pair_count: int
    exhaustive: bool
    zero_vectors_excluded: int


def _nonzero_instances(instances):
    """Drop zero vectors (cosine undefined); returns (clean dict, dropped)."""
    clean, dropped = {}, 0
    for token, vecs in instances.items():
        norms = np.linalg.norm(vecs, axis=1)
        keep = vecs[norms > 0.0]
        dropped += int(vecs.shape[0] - keep.shape[0])
        if keep.shape[0]:
            clean[token] = keep
    return clean, dropped


def _cosine(u, v):
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def _pair_expectation(instances, pair_budget, stream):
    """Expected cosine over pairs of distinct tokens, one freshly sampled
    instance per token per pair.  Enumerates every token pair when that
    is within budget, otherwise Monte-Carlo samples pair_budget pairs."""
    tokens = sorted(instances)
    k = len(tokens)
    total_pairs = k * (k - 1) // 2
    exhaustive = total_pairs <= pair_budget

    def draw(token):
        vecs = instances[token]
        idx = stream.uniform_choice(len(vecs)) if len(vecs) > 1 else 0
        return vecs[idx]

    acc = 0.0
    count = 0
    if exhaustive:
        for i in range(k):
            for j in range(i + 1, k):
                acc += _cosine(draw(tokens[i]), draw(tokens[j]))
                count += 1
    else:
        for _ in range(pair_budget):
            i = stream.uniform_choice(k)
            j = stream.uniform_choice(k - 1)
            if j >= i:
                j += 1
            acc += _cosine(draw(tokens[i]), draw(tokens[j]))
            count += 1
    return acc / count, count, exhaustive


def inter_token_cos(dump, layer, pair_budget=10000, stream=None):
    """Expected cosine similarity between distinct tokens' embedding
    instances for one layer."""
    if stream is None:
        stream = RngStream(0, 0)
    instances, dropped = _nonzero_instances(dump.instances_by_token(layer))
    if len(instances) < 2:
        raise InvalidArgumentError(
            f"layer {layer} has {len(instances)} distinct tokens with nonzero "
            f"vectors; need at least 2"
        )
    value, count, exhaustive = _pair_expectation(instances, pair_budget, stream)
    return CosineStat(value, count, exhaustive, dropped)


@dataclass
class Clustering:
    """K-means output; mean_silhouette is attached after selection."""

    k: int
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    inertia_history: np.ndarray
    mean_silhouette: float | None = None


def _dist_sq(x, centroids):
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x, k, stream):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[stream.uniform_choice(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = stream.uniform_choice(n)
        else:
            u = stream.uniform() * total
            idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            idx = min(idx, n - 1)
        centroids[c] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centroids[c]) ** 2, axis=1))
    return centroids


def _lloyd(x, centroids, max_iter, tol):
    k = centroids.shape[0]
    history = []
    assignment = None
    for iteration in range(max_iter):
        d2 = _dist_sq(x, centroids)
        assignment = np.argmin(d2, axis=1)
        own = d2[np.arange(x.shape[0]), assignment]
        counts = np.bincount(assignment, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # reseed an empty cluster at the farthest point whose own
            # cluster survives losing it
            eligible = np.flatnonzero(counts[assignment] >= 2)
            far = eligible[np.argmax(own[eligible])]
            counts[assignment[far]] -= 1
            assignment[far] = c
            counts[c] = 1
            own[far] = 0.0
        history.append(float(own.sum()))
        new_centroids = np.empty_like(centroids)
        for c in range(k):
            new_centroids[c] = x[assignment == c].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    d2 = _dist_sq(x, centroids)
    assignment = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(x.shape[0]), assignment].sum())
    return assignment, centroids, inertia, len(history), history


def kmeans(x, k, stream=None, *, restarts=5, max_iter=300, tol=1e-8):
    """Best-of-restarts k-means++ with Lloyd iteration.

    Empty clusters are repaired by reseeding to the farthest point; the
    winner is the restart with the lowest within-cluster sum of squares.
    """
    data = as_matrix(x, "data")
    n = data.shape[0]
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    if stream is None:
        stream = RngStream(0, 0)
    best = None
    for _ in range(restarts):
        init = _kmeans_pp_init(data, k, stream)
        assignment, centroids, inertia, iters, history = _lloyd(data, init, max_iter, tol)
        if best is None or inertia < best.inertia:
            best = Clustering(
                k=k,
                assignment=assignment,
                centroids=centroids,
                inertia=inertia,
                iterations=iters,
                inertia_history=np.asarray(history),
            )
    return best


def silhouette(x, clustering):
    """Per-point silhouette scores and their mean (Euclidean distances).

    a(p): mean distance to the rest of p's cluster (singletons score 0);
    b(p): smallest mean distance to another cluster; s = (b-a)/max(a,b).
    """
    data = as_matrix(x, "data")
    n = data.shape[0]
    k = clustering.k
    if k < 2:
        raise InvalidArgumentError("silhouette needs at least 2 clusters")
    assignment = np.asarray(clustering.assignment)
    members = np.zeros((n, k))
    members[np.arange(n), assignment] = 1.0
    counts = members.sum(axis=0)
    scores = np.zeros(n)
    for p in range(n):
        own = assignment[p]
        if counts[own] <= 1:
            continue  # singleton: s(p) = 0
        # difference-based distances avoid the cancellation of the
        # expanded quadratic form
        row = np.linalg.norm(data - data[p], axis=1)
        sums = row @ members
        a = sums[own] / (counts[own] - 1)
        b = min(
            sums[c] / counts[c] for c in range(k) if c != own and counts[c] > 0
        )
        denom = max(a, b)
        scores[p] = (b - a) / denom if denom > 0 else 0.0
    return scores, float(scores.mean())


@dataclass
class ClusterSelection:
    best_k: int
    clustering: Clustering
    scores: dict
    low_silhouette: bool


def select_cluster_count(x, k_range=range(2, 11), stream=None):
    """Pick the cluster count with the highest mean silhouette.

    Ties resolve to the smallest k; a winning silhouette below 0.3 sets
    the low_silhouette flag (weak cluster structure)."""
    data = as_matrix(x, "data")
    if stream is None:
        stream = RngStream(0, 0)
    candidates = [k for k in k_range if 2 <= k <= data.shape[0]]
    if not candidates:
        raise InvalidArgumentError("no feasible cluster counts in range")
    scores = {}
    clusterings = {}
    for k in candidates:
        clustering = kmeans(data, k, stream)
        _, mean_score = silhouette(data, clustering)
        clustering.mean_silhouette = mean_score
        scores[k] = mean_score
        clusterings[k] = clustering
    best_k = max(candidates, key=lambda k: (scores[k], -k))
    return ClusterSelection(
        best_k=best_k,
        clustering=clusterings[best_k],
        scores=scores,
        low_silhouette=scores[best_k] < 0.3,
    )


@dataclass(frozen=True)
class AdjustedCosineStat:
    value: float
    cluster_values: dict
    skipped_clusters: int
    pair_count: int
    zero_vectors_excluded: int


def adjusted_inter_token_cos(dump, layer, clustering, pair_budget=10000, stream=None):
    """Expected inter-token cosine after subtracting each cluster's mean.

    Clusters with fewer than two distinct tokens are skipped (and
    counted); the result is the unweighted mean over the remaining
    clusters.  Values near 0 indicate isotropy within clusters."""
    if stream is None:
        stream = RngStream(0, 0)
    vectors = dump.layer_matrix(layer)
    tokens = dump.layer_token_ids(layer)
    assignment = np.asarray(clustering.assignment)
    if assignment.shape[0] != vectors.shape[0]:
        raise InvalidArgumentError(
            "clustering does not match the layer's record count"
        )
    cluster_values = {}
    skipped = 0
    pair_count = 0
    dropped = 0
    for c in range(clustering.k):
        members = np.flatnonzero(assignment == c)
        if members.size == 0:
            skipped += 1
            continue
        centered = vectors[members] - vectors[members].mean(axis=0)
        member_tokens = tokens[members]
        instances = {
            int(t): centered[member_tokens == t] for t in np.unique(member_tokens)
        }
        instances, zeros = _nonzero_instances(instances)
        dropped += zeros
        if len(instances) < 2:
            skipped += 1
            continue
        value, count, _ = _pair_expectation(instances, pair_budget, stream)
        cluster_values[c] = value
        pair_count += count
    if not cluster_values:
        raise UndefinedMetricError(
            "every cluster lacks two distinct tokens; adjusted cosine undefined"
        )
    mean_value = float(np.mean(list(cluster_values.values())))
    return AdjustedCosineStat(
        value=mean_value,
        cluster_values=cluster_values,
        skipped_clusters=skipped,
        pair_count=pair_count,
        zero_vectors_excluded=dropped,
    )


@dataclass
class LayerIsotropyReport:
    """One layer's isotropy diagnostics, JSON-ready via to_dict."""

    layer: int
    record_count: int
    distinct_tokens: int
    effective_dim: dict
    zeta_cos: float
    chosen_k: int
    mean_silhouette: float
    low_silhouette: bool
    zeta_prime_cos: float
    skipped_clusters: int
    partition_isotropy: float
    degenerate_partition: bool
    explained_ratio: list
    clustering: Clustering | None = None  # not serialized; reused for plots

    def to_dict(self):
        return {
            "layer": self.layer,
            "record_count": self.record_count,
            "distinct_tokens": self.distinct_tokens,
            "effective_dim": self.effective_dim,
            "zeta_cos": self.zeta_cos,
            "chosen_k": self.chosen_k,
            "mean_silhouette": self.mean_silhouette,
            "low_silhouette": self.low_silhouette,
            "zeta_prime_cos": self.zeta_prime_cos,
            "skipped_clusters": self.skipped_clusters,
            "partition_isotropy": self.partition_isotropy,
            "degenerate_partition": self.degenerate_partition,
            "explained_ratio": self.explained_ratio,
        }


def layer_report(
    dump,
    layer,
    stream,
    *,
    pair_budget=10000,
    k_range=range(2, 11),
    eps_values=(0.8, 0.9),
):
    """Assemble the full diagnostic row for one layer of a dump."""
    matrix = dump.layer_matrix(layer)
    if matrix.shape[0] < 2:
        raise InvalidArgumentError(f"layer {layer} has fewer than 2 records")
    eff = {
        f"{eps:g}": effective_dimension(matrix, eps).value for eps in eps_values
    }
    zeta = inter_token_cos(dump, layer, pair_budget, stream)
    selection = select_cluster_count(matrix, k_range, stream)
    adjusted = adjusted_inter_token_cos(
        dump, layer, selection.clustering, pair_budget, stream
    )
    iso = isotropy_partition(matrix)
    ratios = pca(matrix).explained_ratio
    return LayerIsotropyReport(
        layer=int(layer),
        record_count=int(matrix.shape[0]),
        distinct_tokens=int(np.unique(dump.layer_token_ids(layer)).size),
        effective_dim=eff,
        zeta_cos=zeta.value,
        chosen_k=selection.best_k,
        mean_silhouette=selection.clustering.mean_silhouette,
        low_silhouette=selection.low_silhouette,
        zeta_prime_cos=adjusted.value,
        skipped_clusters=adjusted.skipped_clusters,
        partition_isotropy=iso.value,
        degenerate_partition=iso.degenerate,
        explained_ratio=[float(r) for r in ratios],
        clustering=selection.clustering,
    )


def pca_plot_rows(dump, layer, clustering):
    """Top-3 principal-component coordinates per record, for plot CSVs."""
    matrix = dump.layer_matrix(layer)
    res = pca(matrix)
    centered = matrix - matrix.mean(axis=0)
    take = min(3, res.components.shape[1])
    proj = centered @ res.components[:, :take]
    if take < 3:
        proj = np.hstack([proj, np.zeros((proj.shape[0], 3 - take))])
    tokens = dump.layer_token_ids(layer)
    assignment = np.asarray(clustering.assignment)
    return [
        (int(layer), float(p[0]), float(p[1]), float(p[2]), int(c), int(t))
        for p, c, t in zip(proj, assignment, tokens)
    ]
