"""Planar polygon and convex-polytope primitives.

Conventions: polygons are CCW vertex arrays (K, 2) in meters; convex
polytopes carry both the vertex hull and the half-space form A p <= b with
unit outward normals. Touching (shared boundary point, zero distance)
counts as intersection/collision everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# absolute cross-product threshold [m^2] under which vertices count as collinear
COLLINEAR_TOL = 1e-9
# contact tolerance [m] for touching tests
TOUCH_TOL = 1e-9


class NonConvexInput(ValueError):
    """Raised when an operation requiring a convex vertex set gets a concave one."""


@dataclass(frozen=True)
class Polygon:
    """Simple closed CCW polygon."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs an (K>=3, 2) vertex array")
        object.__setattr__(self, "vertices", v)

    @property
    def edges(self) -> np.ndarray:
        """(K, 2, 2) array of directed edges (start, end)."""
        return np.stack([self.vertices, np.roll(self.vertices, -1, axis=0)], axis=1)

    @property
    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class ObstacleEdgeSet:
    """Directed obstacle segments, (E, 2, 2): edge e runs segments[e,0] -> segments[e,1]."""

    segments: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.segments, dtype=float)
        if s.size == 0:
            s = np.zeros((0, 2, 2))
        if s.ndim != 3 or s.shape[1:] != (2, 2):
            raise ValueError("edge set needs an (E, 2, 2) array")
        lengths = np.linalg.norm(s[:, 1] - s[:, 0], axis=1)
        if np.any(lengths <= 0):
            raise ValueError("zero-length obstacle edges are not allowed")
        object.__setattr__(self, "segments", s)

    @staticmethod
    def from_polygons(polys) -> "ObstacleEdgeSet":
        chunks = [p.edges for p in polys]
        if not chunks:
            return ObstacleEdgeSet(np.zeros((0, 2, 2)))
        return ObstacleEdgeSet(np.concatenate(chunks, axis=0))

    @property
    def points(self) -> np.ndarray:
        """All segment endpoints, (2E, 2)."""
        return self.segments.reshape(-1, 2)


@dataclass(frozen=True)
class ConvexPolytope:
    """Convex CCW vertex hull plus half-space rows (a, b) with ||a||=1, a.p <= b."""

    vertices: np.ndarray
    A: np.ndarray
    b: np.ndarray

    @staticmethod
    def from_vertices(vertices: np.ndarray) -> "ConvexPolytope":
        A, b = vertices_to_halfspaces(vertices)
        return ConvexPolytope(np.asarray(vertices, dtype=float), A, b)

    def contains(self, points: np.ndarray, tol: float = TOUCH_TOL) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all(pts @ self.A.T <= self.b[None, :] + tol, axis=1)

    @property
    def edges(self) -> np.ndarray:
        return np.stack([self.vertices, np.roll(self.vertices, -1, axis=0)], axis=1)

    @property
    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


# ---------------------------------------------------------------------------
# basic predicates
# ---------------------------------------------------------------------------

def is_convex(vertices: np.ndarray, tol: float = COLLINEAR_TOL) -> bool:
    """True iff consecutive-edge cross products share one sign (collinear tolerated)."""
    v = np.asarray(vertices, dtype=float)
    if v.shape[0] < 3:
        raise ValueError("need at least 3 vertices")
    e = np.roll(v, -1, axis=0) - v
    e_next = np.roll(e, -1, axis=0)
    cross = e[:, 0] * e_next[:, 1] - e[:, 1] * e_next[:, 0]
    has_pos = np.any(cross > tol)
    has_neg = np.any(cross < -tol)
    return not (has_pos and has_neg)


def vertices_to_halfspaces(vertices: np.ndarray):
    """Half-space rows (A, b) of a convex CCW polygon, one row per non-degenerate edge."""
    v = np.asarray(vertices, dtype=float)
    if not is_convex(v):
        raise NonConvexInput("vertex sequence is not convex")
    if _signed_area(v) < 0:
        raise NonConvexInput("vertex sequence must be counter-clockwise")
    e = np.roll(v, -1, axis=0) - v
    lengths = np.hypot(e[:, 0], e[:, 1])
    keep = lengths > 1e-12
    e = e[keep]
    base = v[keep]
    lengths = lengths[keep]
    # outward normal of a CCW edge (dx, dy) is (dy, -dx)
    A = np.stack([e[:, 1], -e[:, 0]], axis=1) / lengths[:, None]
    b = np.einsum("ij,ij->i", A, base)
    return A, b


def point_in_polygon(points: np.ndarray, polygon: Polygon, tol: float = TOUCH_TOL):
    """Even-odd ray casting; boundary points (within tol) count as inside."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    v0 = polygon.vertices
    v1 = np.roll(v0, -1, axis=0)
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x0, y0 = v0[:, 0][None, :], v0[:, 1][None, :]
    x1, y1 = v1[:, 0][None, :], v1[:, 1][None, :]

    cond = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_int = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    crossings = np.sum(cond & (x < x_int), axis=1)
    inside = (crossings % 2) == 1

    on_edge = _point_segment_distance_matrix(pts, polygon.edges).min(axis=1) <= tol
    return inside | on_edge


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


# ---------------------------------------------------------------------------
# footprint placement
# ---------------------------------------------------------------------------

def footprint_at(footprint: np.ndarray, eta) -> ConvexPolytope:
    """Body-frame convex footprint rotated by psi and translated to (x, y)."""
    v = np.asarray(footprint, dtype=float)
    x, y, psi = float(eta.x), float(eta.y), float(eta.psi)
    c, s = math.cos(psi), math.sin(psi)
    world = np.empty_like(v)
    world[:, 0] = c * v[:, 0] - s * v[:, 1] + x
    world[:, 1] = s * v[:, 0] + c * v[:, 1] + y
    return ConvexPolytope.from_vertices(world)


def rotate_footprint_vertices(footprint: np.ndarray, x: float, y: float, psi: float) -> np.ndarray:
    """Same map as footprint_at but returning the raw vertex array."""
    v = np.asarray(footprint, dtype=float)
    c, s = math.cos(psi), math.sin(psi)
    out = np.empty_like(v)
    out[:, 0] = c * v[:, 0] - s * v[:, 1] + x
    out[:, 1] = s * v[:, 0] + c * v[:, 1] + y
    return out


# ---------------------------------------------------------------------------
# segment intersections
# ---------------------------------------------------------------------------

def segments_intersect_matrix(a: np.ndarray, b: np.ndarray, tol: float = TOUCH_TOL) -> np.ndarray:
    """Boolean (len(a), len(b)) matrix of segment-pair intersections.

    Proper crossings, endpoint touches and collinear overlaps all count.
    Degenerate (zero-length) segments in `a` are treated as points.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=bool)

    p = a[:, 0][:, None, :]          # (A,1,2)
    pr = (a[:, 1] - a[:, 0])[:, None, :]
    q = b[None, :, 0, :]             # (1,B,2)
    qs = (b[:, 1] - b[:, 0])[None, :, :]

    rxs = pr[..., 0] * qs[..., 1] - pr[..., 1] * qs[..., 0]
    qp = q - p
    qpxr = qp[..., 0] * pr[..., 1] - qp[..., 1] * pr[..., 0]
    qpxs = qp[..., 0] * qs[..., 1] - qp[..., 1] * qs[..., 0]

    # scale-aware tolerance for the cross products
    la = np.linalg.norm(pr, axis=2)
    lb = np.linalg.norm(qs, axis=2)
    cross_tol = tol * np.maximum(la * lb, 1.0)

    parallel = np.abs(rxs) <= cross_tol
    rxs_safe = np.where(parallel, 1.0, rxs)
    t = np.where(~parallel, qpxs / rxs_safe, 0.0)
    u = np.where(~parallel, qpxr / rxs_safe, 0.0)
    eps_t = tol / np.maximum(la, tol)
    eps_u = tol / np.maximum(lb, tol)
    general = (~parallel) & (t >= -eps_t) & (t <= 1 + eps_t) & (u >= -eps_u) & (u <= 1 + eps_u)

    # collinear (parallel and on the same line): project onto a's direction
    collinear = parallel & (np.abs(qpxr) <= cross_tol)
    rr = np.einsum("abj,abj->ab", pr, pr)
    rr_safe = np.maximum(rr, tol * tol)
    t0 = np.einsum("abj,abj->ab", qp, pr) / rr_safe
    t1 = t0 + np.einsum("abj,abj->ab", qs, pr) / rr_safe
    tlo = np.minimum(t0, t1)
    thi = np.maximum(t0, t1)
    overlap = collinear & (thi >= -eps_t) & (tlo <= 1 + eps_t) & (rr > tol * tol)

    # degenerate a-segments: point vs segment distance
    degen = (la <= tol) & (np.abs(qpxr) <= cross_tol)  # cheap prefilter
    if np.any(la <= tol):
        d = _point_segment_distance_matrix(a[:, 0], b)
        degen = (la <= tol) & (d <= tol)
    return general | overlap | degen


def segment_intersections(a: ObstacleEdgeSet, b: ObstacleEdgeSet):
    """Count distinct edges of b intersected by any edge of a.

    Returns (count, hits) with hits = list of (edge index in b, point).
    The reported point is the first intersection location found for that edge.
    """
    mat = segments_intersect_matrix(a.segments, b.segments)
    hit_cols = np.where(mat.any(axis=0))[0]
    hits = []
    for col in hit_cols:
        row = int(np.argmax(mat[:, col]))
        pt = _intersection_point(a.segments[row], b.segments[col])
        hits.append((int(col), pt))
    return len(hit_cols), hits


def _intersection_point(seg_a: np.ndarray, seg_b: np.ndarray) -> np.ndarray:
    p, r = seg_a[0], seg_a[1] - seg_a[0]
    q, s = seg_b[0], seg_b[1] - seg_b[0]
    rxs = r[0] * s[1] - r[1] * s[0]
    if abs(rxs) > 1e-15:
        t = ((q - p)[0] * s[1] - (q - p)[1] * s[0]) / rxs
        t = min(max(t, 0.0), 1.0)
        return p + t * r
    # parallel/collinear or degenerate: closest point of a's start on b
    return _closest_point_on_segment(p, seg_b)


def _closest_point_on_segment(pt: np.ndarray, seg: np.ndarray) -> np.ndarray:
    d = seg[1] - seg[0]
    denom = float(d @ d)
    if denom <= 0:
        return seg[0].copy()
    t = float((pt - seg[0]) @ d) / denom
    return seg[0] + min(max(t, 0.0), 1.0) * d


def _point_segment_distance_matrix(points: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """(P, S) distances from each point to each segment."""
    pts = np.atleast_2d(points)
    s0 = segments[:, 0][None, :, :]
    d = (segments[:, 1] - segments[:, 0])[None, :, :]
    dd = np.einsum("psj,psj->ps", d, d)
    dd = np.maximum(dd, 1e-300)
    t = np.einsum("psj,psj->ps", pts[:, None, :] - s0, d) / dd
    t = np.clip(t, 0.0, 1.0)
    proj = s0 + t[..., None] * d
    return np.linalg.norm(pts[:, None, :] - proj, axis=2)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def segment_segment_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(A, B) Euclidean distances between two families of segments."""
    inter = segments_intersect_matrix(a, b)
    d1 = _point_segment_distance_matrix(a[:, 0], b)
    d2 = _point_segment_distance_matrix(a[:, 1], b)
    d3 = _point_segment_distance_matrix(b[:, 0], a).T
    d4 = _point_segment_distance_matrix(b[:, 1], a).T
    d = np.minimum(np.minimum(d1, d2), np.minimum(d3, d4))
    d[inter] = 0.0
    return d


def distance(poly: ConvexPolytope, obstacles) -> float:
    """Euclidean set distance from a convex polytope to the nearest obstacle polygon.

    Zero when intersecting or touching (including full containment either way).
    """
    best = math.inf
    pe = poly.edges
    for obs in obstacles:
        if bool(np.any(point_in_polygon(poly.vertices, obs))):
            return 0.0
        if bool(np.any(poly.contains(obs.vertices))):
            return 0.0
        d = segment_segment_distance_matrix(pe, obs.edges).min()
        if d <= 0.0:
            return 0.0
        best = min(best, float(d))
    return best


def distance_to_edges(poly: ConvexPolytope, edges: ObstacleEdgeSet) -> float:
    """Distance from a convex polytope to a bare edge set (no containment test)."""
    if edges.segments.shape[0] == 0:
        return math.inf
    return float(segment_segment_distance_matrix(poly.edges, edges.segments).min())


# ---------------------------------------------------------------------------
# map document
# ---------------------------------------------------------------------------

class EmptyMap(ValueError):
    """Raised when a map document lacks bounds."""


@dataclass(frozen=True)
class MapDocument:
    """Planning world: CCW outer bounds polygon minus CCW obstacle interiors.

    Bounds edges count as obstacle edges everywhere.
    """

    bounds: Polygon
    obstacles: tuple[Polygon, ...]

    @property
    def obstacle_edges(self) -> ObstacleEdgeSet:
        return ObstacleEdgeSet.from_polygons([self.bounds, *self.obstacles])

    def footprint_distance(self, poly: ConvexPolytope) -> float:
        """Distance to the nearest obstacle or to the bounds boundary."""
        d = math.inf
        for obs in self.obstacles:
            d = min(d, distance(poly, [obs]))
            if d == 0.0:
                return 0.0
        if not bool(np.all(point_in_polygon(poly.vertices, self.bounds))):
            return 0.0
        d = min(d, float(segment_segment_distance_matrix(poly.edges, self.bounds.edges).min()))
        return d


def map_to_dict(doc: MapDocument) -> dict:
    return {
        "bounds": doc.bounds.vertices.tolist(),
        "obstacles": [o.vertices.tolist() for o in doc.obstacles],
    }


def map_from_dict(raw: dict) -> MapDocument:
    if "bounds" not in raw or not raw["bounds"]:
        raise EmptyMap("map document has no bounds polygon")
    bounds = Polygon(np.asarray(raw["bounds"], dtype=float))
    if bounds.area <= 0:
        raise ValueError("bounds polygon must be counter-clockwise")
    obstacles = tuple(Polygon(np.asarray(o, dtype=float)) for o in raw.get("obstacles", []))
    return MapDocument(bounds=bounds, obstacles=obstacles)


def save_map(doc: MapDocument, path) -> None:
    Path(path).write_text(json.dumps(map_to_dict(doc), indent=2))


def load_map(path) -> MapDocument:
    return map_from_dict(json.loads(Path(path).read_text()))
