"""Synthetic datasets with known manifold structure for desk-scale validation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DescriptorSet, InputError, normalize_rows
from .evaluation import GroundTruth

# --- 2-d arcs lifted onto the sphere -------------------------------------------


@dataclass(frozen=True)
class Arc:
    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    start: float = 0.0  # radians
    span: float = np.pi
    sigma: float = 0.05
    count: int = 200

    def __post_init__(self):
        if self.count < 1:
            raise InputError("arc point count must be >= 1")
        if self.sigma < 0:
            raise InputError("sigma must be nonnegative")
        if self.radius < 0:
            raise InputError("radius must be nonnegative")


def two_crescents(count: int = 200, sigma: float = 0.05) -> tuple:
    """Two interleaved half circles."""
    return (
        Arc((0.0, 0.0), 1.0, 0.0, np.pi, sigma, count),
        Arc((1.0, 0.5), 1.0, np.pi, np.pi, sigma, count),
    )


@dataclass(frozen=True)
class SyntheticManifoldSpec:
    manifolds: tuple = field(default_factory=two_crescents)
    seed: int = 0
    dimension: int = 2
    background: int = 0  # uniform noise points away from every arc
    background_margin: float = 0.5
    lift: float = 3.0

    def __post_init__(self):
        if self.dimension != 2:
            raise InputError("only planar manifolds are supported")
        if not self.manifolds:
            raise InputError("need at least one manifold")
        if self.background < 0 or self.lift <= 0:
            raise InputError("background must be >= 0 and lift > 0")


@dataclass
class ManifoldData:
    ds: DescriptorSet
    labels: np.ndarray  # manifold index per point, -1 for background
    points: np.ndarray  # planar coordinates
    origin: np.ndarray
    lift: float

    def embed(self, points) -> np.ndarray:
        return lift_points(points, self.origin, self.lift)


def lift_points(points, origin, lift: float) -> np.ndarray:
    """Planar points -> unit vectors (x - ox, y - oy, lift) / norm."""
    P = np.atleast_2d(np.asarray(points, dtype=np.float64)) - np.asarray(origin)
    return normalize_rows(np.column_stack([P, np.full(len(P), lift)]))


def sample_arc(arc: Arc, count: int, rng: np.random.Generator) -> np.ndarray:
    theta = arc.start + arc.span * rng.random(count)
    pts = np.column_stack([arc.center[0] + arc.radius * np.cos(theta), arc.center[1] + arc.radius * np.sin(theta)])
    if arc.sigma > 0:
        pts = pts + arc.sigma * rng.standard_normal(pts.shape)
    return pts


def _distance_to_arc(points: np.ndarray, arc: Arc) -> np.ndarray:
    rel = points - np.asarray(arc.center)
    ang = np.mod(np.arctan2(rel[:, 1], rel[:, 0]) - arc.start, 2 * np.pi)
    ang = np.where(ang <= arc.span, ang, np.where(ang - arc.span < 2 * np.pi - ang, arc.span, 0.0))
    closest = np.column_stack([np.cos(arc.start + ang), np.sin(arc.start + ang)]) * arc.radius + np.asarray(arc.center)
    return np.linalg.norm(points - closest, axis=1)


def generate_manifolds(spec: SyntheticManifoldSpec = SyntheticManifoldSpec()) -> ManifoldData:
    rng = np.random.default_rng(spec.seed)
    pts = [sample_arc(arc, arc.count, rng) for arc in spec.manifolds]
    labels = [np.full(arc.count, i) for i, arc in enumerate(spec.manifolds)]
    allpts = np.vstack(pts)
    origin = np.mean([arc.center for arc in spec.manifolds], axis=0)
    if spec.background:
        lo = allpts.min(axis=0) - 0.5
        hi = allpts.max(axis=0) + 0.5
        noise = []
        while len(noise) < spec.background:
            cand = lo + (hi - lo) * rng.random((4 * spec.background, 2))
            dist = np.min([_distance_to_arc(cand, arc) for arc in spec.manifolds], axis=0)
            noise.extend(cand[dist > spec.background_margin].tolist())
        pts.append(np.asarray(noise[: spec.background]))
        labels.append(np.full(spec.background, -1))
    points = np.vstack(pts)
    ds = DescriptorSet.from_rows(lift_points(points, origin, spec.lift))
    return ManifoldData(ds, np.concatenate(labels), points, origin, spec.lift)


def manifold_queries(spec: SyntheticManifoldSpec, per_manifold: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fresh points drawn from each arc. Returns (planar points, unit vectors, labels)."""
    rng = np.random.default_rng(seed)
    pts = np.vstack([sample_arc(arc, per_manifold, rng) for arc in spec.manifolds])
    labels = np.repeat(np.arange(len(spec.manifolds)), per_manifold)
    origin = np.mean([arc.center for arc in spec.manifolds], axis=0)
    return pts, lift_points(pts, origin, spec.lift), labels


def manifold_ground_truth(labels: np.ndarray, query_ids, query_labels) -> GroundTruth:
    gt = GroundTruth()
    labels = np.asarray(labels)
    for qid, lab in zip(query_ids, query_labels):
        gt.add(qid, np.flatnonzero(labels == lab).tolist())
    return gt


# --- smooth curves in higher dimension ---------------------------------------


def curve_points(coeffs: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Sum of harmonics: coeffs (2H, d) evaluated at parameters t."""
    H = coeffs.shape[0] // 2
    basis = np.column_stack([np.cos((h + 1) * t) for h in range(H)] + [np.sin((h + 1) * t) for h in range(H)])
    return basis @ coeffs


@dataclass
class CurveData:
    ds: DescriptorSet
    labels: np.ndarray
    coeffs: np.ndarray  # (manifolds, 2H, d)
    noise: float
    span: float

    def sample(self, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, len(self.coeffs), count)
        t = self.span * rng.random(count)
        X = np.vstack([curve_points(self.coeffs[c], t[i : i + 1]) for i, c in enumerate(labels)])
        X = X + self.noise * rng.standard_normal(X.shape)
        return normalize_rows(X), labels


def generate_curves(
    n: int = 5000, d: int = 32, manifolds: int = 2, harmonics: int = 3, noise: float = 0.05, span: float = 3.0, seed: int = 0
) -> CurveData:
    """Points near `manifolds` random closed-form curves in R^d, projected to the sphere."""
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal((manifolds, 2 * harmonics, d)) / np.sqrt(d)
    labels = rng.integers(0, manifolds, n)
    t = span * rng.random(n)
    X = np.empty((n, d))
    for c in range(manifolds):
        sel = labels == c
        X[sel] = curve_points(coeffs[c], t[sel])
    X += noise * rng.standard_normal(X.shape)
    return CurveData(DescriptorSet.from_rows(X), labels, coeffs, noise, span)


# --- planted-object regional benchmark -------------------------------------------


@dataclass(frozen=True)
class RegionalSpec:
    """Items made of region descriptors; some items show an object of a class.

    Each class has an appearance manifold (a small circle on the sphere); an item
    of the class contributes object regions near one viewpoint on it, their number
    proportional to the planted object size. Remaining regions come from a shared
    pool of background patterns, repeated in bursts.
    """

    classes: int = 10
    items_per_class: int = 20
    distractors: int = 150
    regions: int = 21
    d: int = 64
    radius: float = 1.05  # angular radius of each appearance circle (rad)
    span: float = 2.0  # viewpoint range along the circle (rad)
    object_noise: float = 0.15
    background_patterns: int = 40
    background_noise: float = 0.25
    burst: int = 4  # background regions per pattern draw
    confusers_per_class: int = 1
    confuser_angle: float = 0.6  # rad from the manifold
    confuser_items: int = 4  # distractors carrying each confuser
    confuser_regions: int = 15  # repeated confuser regions in such a distractor
    min_size: float = 0.05
    queries_per_class: int = 5
    query_regions: int = 3
    seed: int = 0


@dataclass
class RegionalBenchmark:
    ds: DescriptorSet
    queries: dict  # query id -> (m, d) unit rows
    gt: GroundTruth
    size_of: dict  # positive item -> relative object size
    class_of: dict  # item -> class (-1 distractor)
    region_kind: np.ndarray  # per row: 0 full image, 1 object, 2 background, 3 confuser


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _jitter(center: np.ndarray, count: int, noise: float, rng) -> np.ndarray:
    d = center.shape[0]
    return _unit(center[None, :] + noise * rng.standard_normal((count, d)) / np.sqrt(d))


def generate_regional_benchmark(spec: RegionalSpec = RegionalSpec()) -> RegionalBenchmark:
    rng = np.random.default_rng(spec.seed)
    d = spec.d
    if 3 * spec.classes <= d:
        frames = np.linalg.qr(rng.standard_normal((d, 3 * spec.classes)))[0].T.reshape(spec.classes, 3, d)
    else:
        frames = np.stack([np.linalg.qr(rng.standard_normal((d, 3)))[0].T for _ in range(spec.classes)])

    def view(c, t):
        a, b, e = frames[c]
        return np.cos(spec.radius) * a + np.sin(spec.radius) * (np.cos(t) * b + np.sin(t) * e)

    patterns = _unit(rng.standard_normal((spec.background_patterns, d)))
    confusers = []
    for c in range(spec.classes):
        for _ in range(spec.confusers_per_class):
            anchor = view(c, spec.span * rng.random())
            off = rng.standard_normal(d)
            off -= (off @ anchor) * anchor
            confusers.append((c, np.cos(spec.confuser_angle) * anchor + np.sin(spec.confuser_angle) * _unit(off)))

    def background(count):
        out = []
        while len(out) < count:
            p = patterns[rng.integers(len(patterns))]
            out.extend(_jitter(p, spec.burst, spec.background_noise, rng))
        return np.asarray(out[:count]).reshape(count, d)

    rows, item_of, kinds = [], [], []
    size_of, class_of = {}, {}
    item = 0
    body = spec.regions - 1
    for c in range(spec.classes):
        for _ in range(spec.items_per_class):
            size = spec.min_size + (1 - spec.min_size) * rng.random()
            n_obj = int(np.clip(round(size * body), 1, body))
            obj = _jitter(view(c, spec.span * rng.random()), n_obj, spec.object_noise, rng)
            bg = background(body - n_obj)
            full = _unit(size * obj.mean(0) + (1 - size) * (bg.mean(0) if len(bg) else 0))
            rows.append(np.vstack([full[None, :], obj, bg]))
            item_of.extend([item] * spec.regions)
            kinds.extend([0] + [1] * n_obj + [2] * (body - n_obj))
            size_of[item], class_of[item] = size, c
            item += 1
    confuser_slots = [cf for cf in confusers for _ in range(spec.confuser_items)]
    for j in range(spec.distractors):
        if j < len(confuser_slots):
            n_conf = min(spec.confuser_regions, body)
            conf = _jitter(confuser_slots[j][1], n_conf, spec.object_noise, rng)
            bg = np.vstack([conf, background(body - n_conf)])
            kinds.extend([0] + [3] * n_conf + [2] * (body - n_conf))
        else:
            bg = background(body)
            kinds.extend([0] + [2] * body)
        full = _unit(bg.mean(0))
        rows.append(np.vstack([full[None, :], bg]))
        item_of.extend([item] * spec.regions)
        class_of[item] = -1
        item += 1
    order = rng.permutation(item)  # shuffle item ids so classes are not contiguous
    relabel = {old: int(new) for old, new in zip(range(item), order)}
    item_of = np.asarray([relabel[i] for i in item_of])
    size_of = {relabel[i]: s for i, s in size_of.items()}
    class_of = {relabel[i]: c for i, c in class_of.items()}
    ds = DescriptorSet.from_rows(np.vstack(rows), item_of)

    queries, gt = {}, GroundTruth()
    qid = 0
    for c in range(spec.classes):
        members = sorted(i for i, k in class_of.items() if k == c)
        for _ in range(spec.queries_per_class):
            queries[qid] = _jitter(view(c, spec.span * rng.random()), spec.query_regions, spec.object_noise, rng)
            gt.add(qid, members)
            qid += 1
    return RegionalBenchmark(ds, queries, gt, size_of, class_of, np.asarray(kinds))


# 1000 items, 50 queries: shortlist-vs-full comparisons.
TRUNCATION_SPEC = RegionalSpec(
    classes=25, items_per_class=20, distractors=500, regions=5, queries_per_class=2, d=128, span=1.3
)
