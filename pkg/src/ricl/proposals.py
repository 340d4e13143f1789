"""Object proposals from radar reflections, paired across consecutive frames.

Reflections are clustered with DBSCAN in (range_bin, doppler_bin) space,
summarised by mean/std statistics, matched frame-to-frame by a distance
threshold and turned into boxes from the member envelopes.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from .radar import Reflection

DBSCAN_EPS = 2.5
MIN_REFLECTIONS = 4  # a cluster must have strictly more members than this
MATCH_EPS = 4.0
DBSCAN_MIN_PTS = 3
MIN_BOX_SIZE = 3.0

Box = tuple[float, float, float, float]


class Metric(str, enum.Enum):
    euclidean = "euclidean"
    cityblock = "cityblock"
    chebyshev = "chebyshev"


@dataclass
class Cluster:
    member_indices: list[int]
    stats: np.ndarray = field(default_factory=lambda: np.zeros(4))


@dataclass(frozen=True)
class Proposal:
    box: Box  # (x_min, y_min, x_max, y_max) = (doppler, range) pixels
    instance_id: int
    source_cluster: int


@dataclass
class FramePair:
    frame_t: object
    frame_t1: object
    proposals_t: list[Proposal]
    proposals_t1: list[Proposal]

    def __post_init__(self):
        if sorted(p.instance_id for p in self.proposals_t) != sorted(p.instance_id for p in self.proposals_t1):
            raise ValueError("proposal lists must share instance ids")


def _coords(reflections: list[Reflection]) -> np.ndarray:
    return np.array([[r.range_bin, r.doppler_bin] for r in reflections], dtype=np.float64).reshape(-1, 2)


def dbscan(reflections: list[Reflection], eps: float = DBSCAN_EPS, min_pts: int = DBSCAN_MIN_PTS,
           min_reflections: int = MIN_REFLECTIONS) -> list[Cluster]:
    """DBSCAN on bin coordinates; clusters with <= ``min_reflections`` members are dropped.

    A point is core when its eps-neighbourhood, itself included, holds at
    least ``min_pts`` points.  Clusters are the connected components of the
    core points.  A border point joins the cluster of its nearest core point,
    and clusters are ordered by their smallest (range, doppler) core
    coordinate; both ties resolve on that order, so the result does not
    depend on the order of ``reflections``.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError(f"need eps > 0 and min_pts >= 1, got eps={eps} min_pts={min_pts}")
    pts = _coords(reflections)
    n = len(pts)
    if n == 0:
        return []
    dist = cdist(pts, pts)
    adj = dist <= eps
    core_idx = np.flatnonzero(adj.sum(axis=1) >= min_pts)
    if len(core_idx) == 0:
        return []
    n_comp, comp = connected_components(csr_matrix(adj[np.ix_(core_idx, core_idx)]), directed=False)
    # rank components by their lexicographically smallest core coordinate
    first = [min(map(tuple, pts[core_idx[comp == c]])) for c in range(n_comp)]
    rank = np.empty(n_comp, dtype=int)
    rank[sorted(range(n_comp), key=lambda c: first[c])] = np.arange(n_comp)
    labels = np.full(n, -1)
    labels[core_idx] = rank[comp]
    for p in np.setdiff1d(np.arange(n), core_idx):
        near = core_idx[adj[p, core_idx]]
        if len(near):
            labels[p] = min((dist[p, q], labels[q]) for q in near)[1]
    clusters = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c).tolist()
        if len(members) > min_reflections:
            clusters.append(Cluster(members, cluster_stats(members, reflections)))
    return clusters


def cluster_stats(cluster: Cluster | list[int], reflections: list[Reflection]) -> np.ndarray:
    """(mean range, mean doppler, population std range, population std doppler)."""
    members = cluster.member_indices if isinstance(cluster, Cluster) else cluster
    if not members:
        raise ValueError("cluster_stats of an empty cluster")
    pts = _coords([reflections[i] for i in members])
    return np.concatenate([pts.mean(axis=0), pts.std(axis=0)])


def match_clusters(stats_t, stats_t1, eps_match: float = MATCH_EPS,
                   metric: Metric | str = Metric.euclidean) -> list[tuple[int, int]]:
    """One-to-one pairs with distance < eps_match, taken greedily by ascending distance.

    Equal distances are ordered by (i, j).  Returned pairs are sorted by i.
    """
    if eps_match <= 0:
        raise ValueError(f"eps_match must be positive, got {eps_match}")
    a = np.asarray(stats_t, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(stats_t1, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return []
    d = cdist(a, b, metric=Metric(metric).value)
    ii, jj = np.nonzero(d < eps_match)
    order = np.lexsort((jj, ii, d[ii, jj]))
    used_i, used_j, pairs = set(), set(), []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def _pad_axis(lo: float, hi: float, size: float, limit: float) -> tuple[float, float]:
    if hi - lo < size:
        c = (lo + hi) / 2
        lo, hi = c - size / 2, c + size / 2
    if limit >= size:
        if lo < 0:
            lo, hi = 0.0, hi - lo
        if hi > limit:
            lo, hi = lo - (hi - limit), limit
    return max(lo, 0.0), min(hi, limit)


def cluster_to_box(cluster: Cluster | list[int], reflections: list[Reflection],
                   map_shape: tuple[int, int] = (64, 64), min_size: float = MIN_BOX_SIZE) -> Box:
    """Envelope of member bins, padded to ``min_size`` and kept inside the map.

    ``map_shape`` is (H range bins, W doppler bins).  Coordinates are bin
    indices, so boxes live in [0, W-1] x [0, H-1].
    """
    members = cluster.member_indices if isinstance(cluster, Cluster) else cluster
    if not members:
        raise ValueError("cluster_to_box of an empty cluster")
    pts = _coords([reflections[i] for i in members])
    h, w = map_shape
    x0, x1 = _pad_axis(pts[:, 1].min(), pts[:, 1].max(), min_size, float(w - 1))
    y0, y1 = _pad_axis(pts[:, 0].min(), pts[:, 0].max(), min_size, float(h - 1))
    return (float(x0), float(y0), float(x1), float(y1))


@dataclass(frozen=True)
class ProposalConfig:
    dbscan_eps: float = DBSCAN_EPS
    min_reflections: int = MIN_REFLECTIONS
    match_eps: float = MATCH_EPS
    min_pts: int = DBSCAN_MIN_PTS
    metric: Metric = Metric.euclidean
    min_box_size: float = MIN_BOX_SIZE


def generate_proposals(refl_t: list[Reflection], refl_t1: list[Reflection],
                       cfg: ProposalConfig = ProposalConfig(),
                       map_shape: tuple[int, int] = (64, 64)) -> tuple[list[Proposal], list[Proposal]]:
    """Cluster both frames, match clusters, emit paired boxes; ([], []) if either side is empty."""
    if not refl_t or not refl_t1:
        return [], []
    c_t = dbscan(refl_t, cfg.dbscan_eps, cfg.min_pts, cfg.min_reflections)
    c_t1 = dbscan(refl_t1, cfg.dbscan_eps, cfg.min_pts, cfg.min_reflections)
    pairs = match_clusters([c.stats for c in c_t], [c.stats for c in c_t1], cfg.match_eps, cfg.metric)
    p_t, p_t1 = [], []
    for inst, (i, j) in enumerate(pairs, start=1):
        p_t.append(Proposal(cluster_to_box(c_t[i], refl_t, map_shape, cfg.min_box_size), inst, i))
        p_t1.append(Proposal(cluster_to_box(c_t1[j], refl_t1, map_shape, cfg.min_box_size), inst, j))
    return p_t, p_t1


def flip_box(box: Box, width: int) -> Box:
    """Mirror a box the way reversing the columns of a ``width``-column map does."""
    x0, y0, x1, y1 = box
    return (width - 1 - x1, y0, width - 1 - x0, y1)
