"""Epipolar-consistency graph over detections and its consensus clustering.

Nodes are bounding boxes from several calibrated images. Two boxes in
different images are linked by the fraction of random in-box samples whose
epipolar lines cross the other box. The graph is clustered by label
propagation with signed weights, repeated ``m`` times; detections that land
together in at least ``n`` runs are merged.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import itertools
import logging

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ._seeding import derive_rng, hash64
from .camera import epipolar_lines, fundamental_matrix, lines_intersect_boxes

logger = logging.getLogger(__name__)

DEFAULT_K = 20
DEFAULT_TAU = 0.75
DEFAULT_W_MISS = -2.0
DEFAULT_W_SAME_IMAGE = -5.0


def sample_box_points(box, k=DEFAULT_K, rng_seed=0):
    """``k`` uniform points in ``box``; the stream depends on the box identity."""
    rng = derive_rng(rng_seed, "box", box.image_id, box.detection_id)
    u = rng.random((k, 2))
    x = box.min_x + u[:, 0] * (box.max_x - box.min_x)
    y = box.min_y + u[:, 1] * (box.max_y - box.min_y)
    return np.column_stack([x, y])


def _dense_hits(lines, bounds, chunk=8192):
    """(n_lines, n_boxes) hit table; a line meets a closed box iff its value
    at the box center is no larger in magnitude than its spread over the
    half extents (the corner sign test as two matrix products)."""
    centers = np.column_stack([(bounds[:, 0] + bounds[:, 2]) / 2, (bounds[:, 1] + bounds[:, 3]) / 2])
    half = np.column_stack([(bounds[:, 2] - bounds[:, 0]) / 2, (bounds[:, 3] - bounds[:, 1]) / 2])
    hits = np.empty((len(lines), len(bounds)), dtype=bool)
    for start in range(0, len(lines), chunk):
        lc = lines[start:start + chunk]
        value = lc[:, :2] @ centers.T + lc[:, 2:3]
        spread = np.abs(lc[:, :2]) @ half.T
        hits[start:start + chunk] = np.abs(value) <= spread
    return hits


def _epipole(F):
    """Finite epipole of the target image as a pixel, or None when it is at
    (or numerically near) infinity."""
    u, _, _ = np.linalg.svd(F)
    e = u[:, 2]
    if abs(e[2]) <= 1e-9 * np.hypot(e[0], e[1]):
        return None
    return e[:2] / e[2]


def _count_hits(F, samples, bounds, dense=False):
    """Per-source-box count of epipolar lines hitting each target box.

    ``samples`` has shape (n_src, k, 2); returns an (n_src, n_dst) int array.

    All epipolar lines pass through the epipole, so a line meets a box iff
    its angle lies in the angular interval the box subtends from the
    epipole. Sorting the line angles makes the cost proportional to the
    number of hits. Boxes close to the epipole, and epipoles at infinity,
    fall back to the direct test.
    """
    n_src, k, _ = samples.shape
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 4)
    n_dst = len(bounds)
    lines = epipolar_lines(F, samples.reshape(-1, 2))
    valid = ~np.isnan(lines[:, 0])
    src = np.repeat(np.arange(n_src), k)[valid]
    lines = lines[valid]
    counts = np.zeros((n_src, n_dst), dtype=np.int64)
    if len(lines) == 0 or n_dst == 0:
        return counts
    e = None if dense else _epipole(F)
    if e is None or not np.all(np.isfinite(e)) or np.abs(e).max() > 1e9:
        hits = _dense_hits(lines, bounds)
        np.add.at(counts, src, hits.astype(np.int64))
        return counts

    # boxes whose closure lies within a pixel of the epipole are handled directly
    near = ((bounds[:, 0] - 1.0 <= e[0]) & (e[0] <= bounds[:, 2] + 1.0)
            & (bounds[:, 1] - 1.0 <= e[1]) & (e[1] <= bounds[:, 3] + 1.0))
    if near.any():
        cols = np.flatnonzero(near)
        hits = _dense_hits(lines, bounds[cols])
        np.add.at(counts, (src[:, None], cols[None, :]), hits.astype(np.int64))

    # line normal angles in [0, pi)
    phi = np.mod(np.arctan2(lines[:, 1], lines[:, 0]), np.pi)
    order = np.argsort(phi, kind="stable")
    phi, src = phi[order], src[order]

    far = np.flatnonzero(~near)
    if len(far) == 0:
        return counts
    b = bounds[far]
    cx = np.stack([b[:, 0], b[:, 2], b[:, 2], b[:, 0]], axis=1) - e[0]
    cy = np.stack([b[:, 1], b[:, 1], b[:, 3], b[:, 3]], axis=1) - e[1]
    # a line through the epipole and a point has its normal perpendicular to the ray
    corner = np.arctan2(cy, cx) + np.pi / 2
    ref = np.arctan2((b[:, 1] + b[:, 3]) / 2 - e[1], (b[:, 0] + b[:, 2]) / 2 - e[0]) + np.pi / 2
    rel = np.mod(corner - ref[:, None] + np.pi / 2, np.pi) - np.pi / 2
    ref = np.mod(ref, np.pi)
    lo = ref + rel.min(axis=1)
    hi = ref + rel.max(axis=1)

    # split wrapped intervals into at most two ranges inside [0, pi)
    starts, stops, boxes = [], [], []
    for a, z in ((lo, hi), (lo + np.pi, np.full_like(hi, np.pi)), (np.zeros_like(lo), hi - np.pi)):
        starts.append(np.searchsorted(phi, np.maximum(a, 0.0), side="left"))
        stops.append(np.searchsorted(phi, np.minimum(z, np.pi), side="right"))
        boxes.append(far)
    starts, stops, boxes = np.concatenate(starts), np.concatenate(stops), np.concatenate(boxes)
    # the second range only exists for lo < 0, the third only for hi > pi
    m = len(far)
    starts[m:2 * m][lo >= 0] = 0
    stops[m:2 * m][lo >= 0] = 0
    starts[2 * m:][hi <= np.pi] = 0
    stops[2 * m:][hi <= np.pi] = 0
    # the first range is clipped to [0, pi)
    lengths = np.maximum(stops - starts, 0)
    total = int(lengths.sum())
    if total == 0:
        return counts
    rep_box = np.repeat(boxes, lengths)
    offset = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    pos = np.repeat(starts, lengths) + offset
    counts += np.bincount(src[pos] * n_dst + rep_box,
                          minlength=n_src * n_dst).reshape(n_src, n_dst)
    return counts


def edge_weight(box_a, box_b, F_ab, F_ba, k=DEFAULT_K, rng_seed=0):
    """Symmetric epipolar consistency of two boxes in different images.

    ``F_ab`` maps pixels of ``box_a``'s image to epipolar lines in
    ``box_b``'s image, ``F_ba`` the reverse (so ``F_ba = F_ab.T``).
    """
    if box_a.image_id == box_b.image_id:
        raise ValueError("edge weights are only defined across images")
    pa = sample_box_points(box_a, k, rng_seed)
    pb = sample_box_points(box_b, k, rng_seed)
    hits_a = _count_hits(F_ba, pb[None], box_a.bounds[None])[0, 0]
    hits_b = _count_hits(F_ab, pa[None], box_b.bounds[None])[0, 0]
    return (hits_a + hits_b) / (2.0 * k)


class PairingGraph:
    """Signed weighted graph over detections.

    Every pair of nodes has a baseline weight: ``base_same`` inside one image
    and ``base_cross`` across images. Pairs that deviate from their baseline
    are stored sparsely (CSR) as ``weight - baseline``. For graphs built from
    images the baselines are the penalties ``w_same_image`` and ``w_miss``, so
    the O(n^2) penalty edges never have to be materialised.
    """

    def __init__(self, node_ids, image_of, indptr, indices, delta, base_same=0.0,
                 base_cross=0.0, tau=DEFAULT_TAU, k=DEFAULT_K, boxes=None):
        self.node_ids = list(node_ids)
        if len(set(self.node_ids)) != len(self.node_ids):
            raise ValueError("detection ids must be unique")
        _, self.image_of = np.unique(np.asarray(image_of), return_inverse=True)
        self.image_of = self.image_of.reshape(-1)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.delta = np.asarray(delta, dtype=float)
        self.base_same = float(base_same)
        self.base_cross = float(base_cross)
        self.tau = tau
        self.k = k
        self.boxes = boxes
        self._index = {d: i for i, d in enumerate(self.node_ids)}

    @classmethod
    def from_edges(cls, node_ids, edges, image_of=None):
        """Graph with explicit edges only (zero baseline), e.g. for hand-built cases."""
        node_ids = list(node_ids)
        index = {d: i for i, d in enumerate(node_ids)}
        adjacency = [dict() for _ in node_ids]
        for a, b, w in edges:
            ia, ib = index[a], index[b]
            if ia == ib:
                raise ValueError("self edges are not allowed")
            if ib in adjacency[ia]:
                raise ValueError(f"duplicate edge ({a}, {b})")
            adjacency[ia][ib] = float(w)
            adjacency[ib][ia] = float(w)
        if image_of is None:
            image_of = np.arange(len(node_ids))
        elif isinstance(image_of, dict):
            image_of = [image_of[d] for d in node_ids]
        indptr, indices, delta = [0], [], []
        for row in adjacency:
            for b in sorted(row):
                indices.append(b)
                delta.append(row[b])
            indptr.append(len(indices))
        return cls(node_ids, image_of, indptr, indices, delta, tau=0.0)

    def __len__(self):
        return len(self.node_ids)

    def index(self, detection_id):
        return self._index[detection_id]

    def row(self, a):
        lo, hi = self.indptr[a], self.indptr[a + 1]
        return self.indices[lo:hi], self.delta[lo:hi]

    def baseline(self, a, b):
        return self.base_same if self.image_of[a] == self.image_of[b] else self.base_cross

    def weight(self, a, b):
        """Edge weight between node indices ``a`` and ``b``; 0.0 if absent."""
        if a == b:
            return 0.0
        idx, delta = self.row(a)
        pos = np.searchsorted(idx, b)
        extra = delta[pos] if pos < len(idx) and idx[pos] == b else 0.0
        return float(self.baseline(a, b) + extra)

    def positive_neighbors(self, a):
        idx, delta = self.row(a)
        w = delta + np.where(self.image_of[idx] == self.image_of[a], self.base_same, self.base_cross)
        return idx[w > 0]

    def positive_weights(self, a):
        idx, delta = self.row(a)
        w = delta + np.where(self.image_of[idx] == self.image_of[a], self.base_same, self.base_cross)
        keep = w > 0
        return idx[keep], w[keep]

    def edges(self):
        """All edges (a, b, weight) with a < b, penalty edges included. O(n^2)."""
        out = []
        for a, b in itertools.combinations(range(len(self)), 2):
            w = self.weight(a, b)
            if w != 0.0:
                out.append((a, b, w))
        return out

    def positive_strength(self, a, among=None):
        idx, w = self.positive_weights(a)
        if among is not None:
            keep = np.isin(idx, list(among))
            w = w[keep]
        return float(w.sum())


def build_graph(detections, cameras, tau=DEFAULT_TAU, w_miss=DEFAULT_W_MISS,
                w_same_image=DEFAULT_W_SAME_IMAGE, k=DEFAULT_K, rng_seed=0, n_jobs=1):
    """Build the pairing graph.

    Cross-image pairs keep their weight when it exceeds ``tau``, get
    ``w_miss`` when no epipolar line hit (weight exactly 0) and no edge
    otherwise. Pairs within one image get ``w_same_image``.

    Parameters
    ----------
    detections : dict
        ``image_id -> list of BoundingBox``.
    cameras : dict or list
        ``image_id -> Camera``, or cameras keyed by their ``camera_id``.
    """
    if not isinstance(cameras, dict):
        cameras = {c.camera_id: c for c in cameras}
    image_ids = sorted(detections, key=str)
    if len(image_ids) < 2:
        raise ValueError("pairing needs at least two images")
    missing = [i for i in image_ids if i not in cameras]
    if missing:
        raise KeyError(f"no camera for images {missing}")

    boxes, image_of = [], []
    for ii, img in enumerate(image_ids):
        boxes.extend(detections[img])
        image_of.extend([ii] * len(detections[img]))
    node_ids = [b.detection_id for b in boxes]
    samples = {
        img: np.array([sample_box_points(b, k, rng_seed) for b in detections[img]]).reshape(-1, k, 2)
        for img in image_ids
    }
    bounds = {img: np.array([b.bounds for b in detections[img]]).reshape(-1, 4) for img in image_ids}

    def pair_counts(pair):
        ii, jj = pair
        si, sj = samples[image_ids[ii]], samples[image_ids[jj]]
        if len(si) == 0 or len(sj) == 0:
            return pair, np.zeros((len(si), len(sj)), dtype=np.int64)
        F_ij = fundamental_matrix(cameras[image_ids[ii]], cameras[image_ids[jj]])
        # lines of i-samples in image j, then j-samples in image i
        c_ij = _count_hits(F_ij, si, bounds[image_ids[jj]])
        c_ji = _count_hits(F_ij.T, sj, bounds[image_ids[ii]])
        return pair, c_ij + c_ji.T

    pairs = list(itertools.combinations(range(len(image_ids)), 2))
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(pair_counts, pairs))
    else:
        results = [pair_counts(p) for p in pairs]

    offsets = np.cumsum([0] + [len(detections[i]) for i in image_ids])
    rows, cols, vals = [], [], []
    for (ii, jj), c in results:
        w = c / (2.0 * k)
        # stored deviation from the w_miss baseline: kept edges carry w, weak ones 0
        ra, rb = np.nonzero(c > 0)
        wv = w[ra, rb]
        dv = np.where(wv > tau, wv, 0.0) - w_miss
        a, b = offsets[ii] + ra, offsets[jj] + rb
        rows += [a, b]
        cols += [b, a]
        vals += [dv, dv]
    n = len(boxes)
    if rows:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        rows = cols = np.array([], dtype=np.int64)
        vals = np.array([])
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.searchsorted(rows, np.arange(n + 1))
    graph = PairingGraph(node_ids, image_of, indptr, cols, vals, base_same=w_same_image,
                         base_cross=w_miss, tau=tau, k=k, boxes=boxes)
    logger.debug("pairing graph: %d nodes, %d stored pairs", n, len(cols) // 2)
    return graph


def label_propagation(graph, rng_seed=0, max_iter=100, return_indices=False):
    """Asynchronous label propagation with signed weights.

    A node moves to the label with the largest summed incident weight among
    its positive neighbours' labels; repulsive members of a label count
    against it. A node whose best support is not positive keeps its label,
    as does a node whose current label is among the tied maxima.

    Sweeps visit nodes in a fresh random order. A node is only re-evaluated
    once something its decision depends on has changed; this skips no-op
    visits and gives the same result as evaluating every node.
    """
    rng = derive_rng(rng_seed, "label_propagation")
    n = len(graph)
    labels = np.arange(n)
    n_img = int(graph.image_of.max()) + 1 if n else 0
    size = np.ones(n, dtype=np.int64)
    per_image = np.zeros((n, n_img), dtype=np.int64)
    per_image[np.arange(n), graph.image_of] = 1
    members = [[a] for a in range(n)]
    rows, pos_at, pos = [], [], []
    for a in range(n):
        idx, delta = graph.row(a)
        w = delta + np.where(graph.image_of[idx] == graph.image_of[a], graph.base_same,
                             graph.base_cross)
        rows.append((idx, delta))
        pos_at.append(np.flatnonzero(w > 0))
        pos.append(idx[w > 0])
    bs, bc = graph.base_same, graph.base_cross
    dirty = np.array([len(p) > 0 for p in pos])
    for _ in range(max_iter):
        if not dirty.any():
            break
        changed = False
        for a in rng.permutation(n):
            if not dirty[a]:
                continue
            dirty[a] = False
            if len(pos_at[a]) == 0:
                continue
            current = labels[a]
            img = graph.image_of[a]
            idx, delta = rows[a]
            lab = labels[idx]
            # one entry per positive neighbour; repeated labels get equal support.
            # bincount sums in row order, so exact ties do not depend on rounding
            cand = lab[pos_at[a]]
            extra = np.bincount(lab, weights=delta)[cand]
            here = per_image[cand, img]
            support = extra + bs * (here - (cand == current)) + bc * (size[cand] - here)
            best = support.max()
            if best <= 0:
                continue
            tied = cand[support == best]
            if (tied == current).any():
                continue
            if len(tied) > 1:
                tied = np.unique(tied)
            new = tied[0] if len(tied) == 1 else tied[rng.integers(len(tied))]
            size[current] -= 1
            per_image[current, img] -= 1
            size[new] += 1
            per_image[new, img] += 1
            labels[a] = new
            members[current].remove(a)
            members[new].append(a)
            changed = True
            # current gained support, new lost it: only a's neighbours, nodes
            # that can pick current and members of new can change their choice
            dirty[idx] = True
            for m in members[current]:
                dirty[pos[m]] = True
            dirty[members[new]] = True
        if not changed:
            break
    if return_indices:
        return labels
    return {graph.node_ids[i]: int(labels[i]) for i in range(n)}


@dataclass(frozen=True)
class ClusterSet:
    clusters: list
    run_count: int = 1
    agreement_threshold: int = 1
    meta: dict = field(default_factory=dict, compare=False)

    def labels(self):
        return {d: c for c, cluster in enumerate(self.clusters) for d in cluster}

    def __len__(self):
        return len(self.clusters)

    def to_lists(self):
        return [sorted(c, key=str) for c in self.clusters]


def _sorted_clusters(groups):
    groups = [frozenset(g) for g in groups if g]
    return sorted(groups, key=lambda g: (-len(g), sorted(map(str, g))))


def consensus_clusters(graph, m=3, n=2, rng_seed=0, max_iter=100):
    """Merge detections co-clustered in at least ``n`` of ``m`` propagation runs."""
    if not 1 <= n <= m:
        raise ValueError("need 1 <= n <= m")
    size = len(graph)
    co = {}
    for run in range(m):
        labels = label_propagation(graph, rng_seed=hash64(rng_seed, "consensus", run),
                                   max_iter=max_iter, return_indices=True)
        groups = {}
        for node, lab in enumerate(labels):
            groups.setdefault(lab, []).append(node)
        for group in groups.values():
            for a, b in itertools.combinations(sorted(group), 2):
                co[(a, b)] = co.get((a, b), 0) + 1
    kept = [(a, b) for (a, b), c in co.items() if c >= n]
    if kept:
        rows, cols = np.array(kept).T
    else:
        rows = cols = np.array([], dtype=int)
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(size, size))
    _, comp = connected_components(adj, directed=False)

    groups = {}
    for node, c in enumerate(comp):
        groups.setdefault(c, []).append(node)
    clusters = []
    for nodes in groups.values():
        by_image = {}
        for a in nodes:
            by_image.setdefault(graph.image_of[a], []).append(a)
        keep = set(nodes)
        for dup in by_image.values():
            if len(dup) < 2:
                continue
            best = max(dup, key=lambda a: (graph.positive_strength(a, among=keep), -a))
            for a in dup:
                if a != best:
                    keep.discard(a)
                    clusters.append({graph.node_ids[a]})
        clusters.append({graph.node_ids[a] for a in keep})
    return ClusterSet(_sorted_clusters(clusters), run_count=m, agreement_threshold=n)


def filter_small_clusters(clusters, min_views):
    if min_views < 1:
        raise ValueError("min_views must be >= 1")
    kept = [c for c in clusters.clusters if len(c) >= min_views]
    return ClusterSet(kept, clusters.run_count, clusters.agreement_threshold, dict(clusters.meta))


def pair_detections(detections, cameras, tau=DEFAULT_TAU, k=DEFAULT_K, runs=3, agree=2,
                    min_views=1, rng_seed=0, n_jobs=1):
    """Graph construction, consensus clustering and size filtering in one call."""
    graph = build_graph(detections, cameras, tau=tau, k=k, rng_seed=rng_seed, n_jobs=n_jobs)
    clusters = consensus_clusters(graph, m=runs, n=agree, rng_seed=rng_seed)
    return filter_small_clusters(clusters, min_views), graph
