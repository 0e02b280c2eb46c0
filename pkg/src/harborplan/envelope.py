"""Convex safety-envelope growth around a trajectory sample.

Starting from the posed ship footprint, vertices of a cyclic CCW graph are
pushed outward along fixed expansion directions. Steps that break convexity
are undone (optionally consuming the limiting vertex once the ring is large
enough), steps that cross exactly one obstacle edge project the vertex onto
that edge and split it into two copies that slide along the wall, and steps
that cross several edges are rejected with a halved step length. A vertex
freezes when its step drops below a minimum or its cumulative travel reaches
the expansion budget. The final ring is returned in half-space form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    COLLINEAR_TOL,
    ConvexPolytope,
    ObstacleEdgeSet,
    footprint_at,
    segments_intersect_matrix,
)
from .vessel import GeneralizedPosition, BodyVelocity

# gap left between a projected vertex and its wall so the touching-counts-as-
# intersection convention does not re-flag the envelope on later iterations
WALL_OFFSET = 1e-6


class FootprintInCollision(ValueError):
    """Raised when the seed footprint already touches an obstacle edge."""


class ExpansionLoopBound(RuntimeError):
    """Defensive bound on the expansion loop; indicates a logic error."""


@dataclass
class ExpansionVertex:
    """One growable corner of the envelope ring."""

    position: np.ndarray   # [m]
    direction: np.ndarray  # unit expansion direction
    step: float            # [m] current step length
    traveled: float = 0.0  # [m] accumulated accepted expansion

    def expandable(self, params: "EnvelopeParams") -> bool:
        return self.step >= params.min_step and self.traveled < params.max_expansion


@dataclass
class ExpansionGraph:
    """Cyclic CCW ring of expansion vertices."""

    vertices: list

    def positions(self) -> np.ndarray:
        return np.array([v.position for v in self.vertices])

    def edges(self) -> np.ndarray:
        pos = self.positions()
        return np.stack([pos, np.roll(pos, -1, axis=0)], axis=1)

    def __len__(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class EnvelopeParams:
    """Growth parameters (all meters except the vertex-count threshold)."""

    initial_step: float = 4.0
    min_step: float = 0.25
    max_expansion: float = 60.0
    n_card: int = 8

    def __post_init__(self):
        if not (0.0 < self.min_step < self.initial_step):
            raise ValueError("need 0 < min_step < initial_step")
        if self.max_expansion <= 0.0:
            raise ValueError("max_expansion must be positive")
        if self.n_card < 4:
            raise ValueError("n_card must be at least 4")


def initialize_graph(footprint: np.ndarray, eta: GeneralizedPosition,
                     params: EnvelopeParams = EnvelopeParams()) -> ExpansionGraph:
    """Seed the ring with the posed footprint; directions point centroid-to-vertex."""
    world = footprint_at(footprint, eta).vertices
    centroid = world.mean(axis=0)
    verts = []
    for p in world:
        d = p - centroid
        norm = np.linalg.norm(d)
        if norm <= 0:
            raise ValueError("footprint vertex coincides with its centroid")
        verts.append(ExpansionVertex(position=p.copy(), direction=d / norm,
                                     step=params.initial_step))
    return ExpansionGraph(verts)


def select_initial(graph: ExpansionGraph, nu: BodyVelocity, psi: float) -> int:
    """Index of the vertex whose direction best matches the world-frame velocity.

    Ties and near-zero speed fall back to index 0 for determinism.
    """
    speed = math.hypot(nu.u, nu.v)
    if speed < 1e-6:
        return 0
    c, s = math.cos(psi), math.sin(psi)
    w = np.array([c * nu.u - s * nu.v, s * nu.u + c * nu.v]) / speed
    scores = np.array([float(v.direction @ w) for v in graph.vertices])
    return int(np.argmax(scores))


def compute_envelope(eta_i: GeneralizedPosition, nu_i: BodyVelocity,
                     footprint: np.ndarray, obstacles: ObstacleEdgeSet,
                     params: EnvelopeParams = EnvelopeParams()) -> ConvexPolytope:
    """Grow the obstacle-free convex envelope around one trajectory sample."""
    graph = initialize_graph(footprint, eta_i, params)
    pos0 = graph.positions()

    # only obstacle edges reachable within the expansion budget matter
    center = pos0.mean(axis=0)
    reach = np.linalg.norm(pos0 - center, axis=1).max() + params.max_expansion \
        + params.initial_step + 1.0
    segs = obstacles.segments
    if segs.shape[0] > 0:
        mid = 0.5 * (segs[:, 0] + segs[:, 1])
        half = 0.5 * np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
        near = np.linalg.norm(mid - center[None, :], axis=1) - half <= reach
        segs = segs[near]

    if segs.shape[0] > 0:
        ring = np.stack([pos0, np.roll(pos0, -1, axis=0)], axis=1)
        if bool(segments_intersect_matrix(ring, segs).any()):
            raise FootprintInCollision("seed footprint touches an obstacle edge")
        if bool(_strictly_inside(segs.reshape(-1, 2), pos0).any()):
            raise FootprintInCollision("obstacle vertex inside the seed footprint")

    c = select_initial(graph, nu_i, eta_i.psi)
    verts = graph.vertices

    halvings = max(1, math.ceil(math.log2(params.initial_step / params.min_step)) + 1)
    travel_steps = math.ceil(params.max_expansion / params.min_step)
    budget = 4 * halvings * travel_steps * (len(verts) + 2 * max(1, segs.shape[0]) + 8) + 1000

    iters = 0
    while any(v.expandable(params) for v in verts):
        iters += 1
        if iters > budget:
            raise ExpansionLoopBound("expansion loop exceeded its defensive bound")
        vtx = verts[c]
        if vtx.expandable(params):
            delta = vtx.step
            g = vtx.direction
            old = vtx.position.copy()
            vtx.position = old + delta * g

            if not _ring_convex(verts):
                success = False
                if len(verts) > params.n_card:
                    success, c = _remove_limiting(verts, c, segs, pos0, params)
                    vtx = verts[c]
                if not success:
                    vtx.position = old
                    vtx.step = delta / 2.0
                    continue  # retry the same vertex (listing's control flow)

            hit_idx = _intersected_obstacle_edges(verts, segs)
            swallowed = _swallows_obstacle_points(verts, segs)
            if len(hit_idx) == 1 and not swallowed:
                projected = _project_to_edge(old, vtx.position, g, segs[hit_idx[0]])
                if projected is None:
                    vtx.position = old
                    vtx.step = delta / 2.0
                else:
                    vtx.position = projected
                    _split_along_edge(verts, c, segs[hit_idx[0]])
            elif len(hit_idx) > 1 or swallowed:
                vtx.position = old
                vtx.step = delta / 2.0
            else:
                vtx.traveled += delta
        c = (c + 1) % len(verts)

    pos = np.array([v.position for v in verts])
    pos = _dedupe_ring(pos)
    return ConvexPolytope.from_vertices(pos)


# ---------------------------------------------------------------------------
# ring predicates
# ---------------------------------------------------------------------------

def _ring_convex(verts, tol: float = COLLINEAR_TOL) -> bool:
    pos = np.array([v.position for v in verts])
    e = np.roll(pos, -1, axis=0) - pos
    e_next = np.roll(e, -1, axis=0)
    cross = e[:, 0] * e_next[:, 1] - e[:, 1] * e_next[:, 0]
    return bool(np.all(cross >= -tol))


def _vertex_turn_cross(pos: np.ndarray) -> np.ndarray:
    """Cross product of the incoming and outgoing edge at each vertex."""
    e_in = pos - np.roll(pos, 1, axis=0)
    e_out = np.roll(pos, -1, axis=0) - pos
    return e_in[:, 0] * e_out[:, 1] - e_in[:, 1] * e_out[:, 0]


def _intersected_obstacle_edges(verts, segs: np.ndarray):
    if segs.shape[0] == 0:
        return []
    pos = np.array([v.position for v in verts])
    ring = np.stack([pos, np.roll(pos, -1, axis=0)], axis=1)
    mat = segments_intersect_matrix(ring, segs)
    return list(np.where(mat.any(axis=0))[0])


def _strictly_inside(points: np.ndarray, ring_pos: np.ndarray,
                     tol: float = 1e-9) -> np.ndarray:
    """Strict containment of points in a convex CCW ring (boundary excluded)."""
    if points.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    e = np.roll(ring_pos, -1, axis=0) - ring_pos
    keep = np.hypot(e[:, 0], e[:, 1]) > 1e-12
    base = ring_pos[keep]
    e = e[keep]
    rel = points[:, None, :] - base[None, :, :]
    cross = e[None, :, 0] * rel[:, :, 1] - e[None, :, 1] * rel[:, :, 0]
    return np.all(cross > tol, axis=1)


def _swallows_obstacle_points(verts, segs: np.ndarray) -> bool:
    if segs.shape[0] == 0:
        return False
    pos = np.array([v.position for v in verts])
    return bool(_strictly_inside(segs.reshape(-1, 2), pos).any())


def _contains_all(ring_pos: np.ndarray, points: np.ndarray, tol: float = 1e-9) -> bool:
    e = np.roll(ring_pos, -1, axis=0) - ring_pos
    keep = np.hypot(e[:, 0], e[:, 1]) > 1e-12
    base = ring_pos[keep]
    e = e[keep]
    rel = points[:, None, :] - base[None, :, :]
    cross = e[None, :, 0] * rel[:, :, 1] - e[None, :, 1] * rel[:, :, 0]
    return bool(np.all(cross >= -tol))


# ---------------------------------------------------------------------------
# step outcomes
# ---------------------------------------------------------------------------

def _remove_limiting(verts, c: int, segs: np.ndarray, footprint_pts: np.ndarray,
                     params: EnvelopeParams):
    """Consume reflex vertices while allowed; revert unless the result is clean.

    Success requires the reduced ring to be convex, obstacle-free and to keep
    every footprint vertex inside. Returns (success, index of the candidate).
    """
    saved = [ExpansionVertex(v.position.copy(), v.direction.copy(), v.step, v.traveled)
             for v in verts]
    cand = verts[c]
    while len(verts) > params.n_card:
        pos = np.array([v.position for v in verts])
        cross = _vertex_turn_cross(pos)
        reflex = [k for k in range(len(verts)) if cross[k] < -COLLINEAR_TOL and verts[k] is not cand]
        if not reflex:
            break
        # deterministic order: first reflex vertex after the candidate in ring order
        c_now = verts.index(cand)
        reflex.sort(key=lambda k: (k - c_now) % len(verts))
        del verts[reflex[0]]
        if _ring_convex(verts):
            break
    pos = np.array([v.position for v in verts])
    ok = (
        _ring_convex(verts)
        and len(_intersected_obstacle_edges(verts, segs)) == 0
        and not _swallows_obstacle_points(verts, segs)
        and _contains_all(pos, footprint_pts)
    )
    if not ok or cand not in verts:
        verts.clear()
        verts.extend(saved)
        return False, c
    return True, verts.index(cand)


def _project_to_edge(old: np.ndarray, candidate: np.ndarray, g: np.ndarray,
                     seg: np.ndarray):
    """Pull the candidate back along -g onto the intersected edge segment.

    Returns the offset projected point, or None when the back-projection does
    not land on the segment (treated as a multi-intersection rejection).
    """
    a, b = seg[0], seg[1]
    e = b - a
    denom = g[0] * e[1] - g[1] * e[0]
    if abs(denom) < 1e-12:
        return None
    # candidate - t*g on the edge line: solve for t and the edge parameter s
    d = candidate - a
    t = (d[0] * e[1] - d[1] * e[0]) / denom
    s = (d[0] * g[1] - d[1] * g[0]) / denom
    if t < -1e-9 or s < -1e-9 or s > 1.0 + 1e-9:
        return None
    return candidate - (t + WALL_OFFSET) * g


def _split_along_edge(verts, c: int, seg: np.ndarray) -> None:
    """Duplicate the projected vertex; the pair slides along the wall."""
    e = seg[1] - seg[0]
    e = e / np.linalg.norm(e)
    n = len(verts)
    prev_pos = verts[(c - 1) % n].position
    next_pos = verts[(c + 1) % n].position
    tangent = next_pos - prev_pos
    if float(e @ tangent) >= 0.0:
        dir_child, dir_self = e.copy(), -e.copy()
    else:
        dir_child, dir_self = -e.copy(), e.copy()
    vtx = verts[c]
    child = ExpansionVertex(position=vtx.position.copy(), direction=dir_child,
                            step=vtx.step, traveled=vtx.traveled)
    vtx.direction = dir_self
    verts.insert(c + 1, child)


def _dedupe_ring(pos: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    keep = []
    n = pos.shape[0]
    for k in range(n):
        if np.linalg.norm(pos[k] - pos[(k - 1) % n]) > tol or not keep:
            keep.append(k)
    # first and last may still coincide
    if len(keep) > 1 and np.linalg.norm(pos[keep[0]] - pos[keep[-1]]) <= tol:
        keep.pop()
    return pos[keep]
