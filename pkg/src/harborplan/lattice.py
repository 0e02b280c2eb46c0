"""State-space discretization and motion-primitive generation.

The lattice is a uniform position grid crossed with 16 irregular headings
(integer-vector directions, closed under quarter turns) and a small set of
body velocities with zero yaw rate. Boundary thruster states come from a
steady-state allocation, primitives are solved as free-space OCPs on a
fixed shooting grid that tiles the improvement step, and the full set is
completed by rotating canonical primitives through the four-fold symmetry
group. Swaths are precomputed as relative cell sets.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from . import ocp
from .geometry import rotate_footprint_vertices, vertices_to_halfspaces
from .vessel import (
    BodyVelocity,
    ControlInput,
    GeneralizedPosition,
    VesselModel,
    VesselState,
    angle_diff,
    model_to_dict,
    rk4_step_batch,
    wrap_angle,
)

POS_TOL = 1e-3     # [m] endpoint / re-integration tolerance
ANG_TOL = 1e-3     # [rad]
VEL_TOL = 1e-3     # [m/s, rad/s, RPS]


class AllocationInfeasible(RuntimeError):
    """Steady thruster allocation could not reach the required force."""


class PrimitiveInfeasible(RuntimeError):
    """A required motion-primitive OCP failed to converge."""


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

_HEADING_SEEDS = ((1, 0), (2, 1), (1, 1), (1, 2))


def default_heading_set():
    """16 irregular headings and their integer direction vectors, sorted in (-pi, pi]."""
    vecs = []
    for i, j in _HEADING_SEEDS:
        v = (i, j)
        for _ in range(4):
            vecs.append(v)
            v = (-v[1], v[0])
    entries = sorted((math.atan2(j, i), (i, j)) for i, j in vecs)
    headings = tuple(a for a, _ in entries)
    vectors = tuple(v for _, v in entries)
    return headings, vectors


def default_velocity_set(v_max: float):
    """Surge {0, +-v/2, v} and sway {0, +-v/2} velocities, yaw rate zero."""
    h = v_max / 2.0
    return (
        BodyVelocity(0.0, 0.0, 0.0),
        BodyVelocity(h, 0.0, 0.0),
        BodyVelocity(v_max, 0.0, 0.0),
        BodyVelocity(-h, 0.0, 0.0),
        BodyVelocity(0.0, h, 0.0),
        BodyVelocity(0.0, -h, 0.0),
    )


@dataclass(frozen=True)
class DiscreteState:
    """Lattice state: grid cell, heading index and velocity index."""

    ix: int
    iy: int
    heading_idx: int
    vel_idx: int

    def key(self):
        return (self.ix, self.iy, self.heading_idx, self.vel_idx)


@dataclass(frozen=True)
class LatticeSpec:
    """Grid resolution, heading/velocity sets and the steady thruster table."""

    r_p: float
    headings: tuple
    heading_vectors: tuple
    velocities: tuple
    steady_alpha: tuple       # per velocity index: tuple of thruster angles
    steady_n: tuple           # per velocity index: tuple of propeller speeds
    dt: float = 2.0           # [s] shooting grid (ties primitives to improvement)
    sample_step: float = 1.0  # [s] stored sample spacing
    swath_resolution: float = 1.0
    model_hash: str = ""

    def __post_init__(self):
        if len(self.headings) != 16:
            raise ValueError("heading set must have 16 members")
        for k, psi in enumerate(self.headings):
            rot = wrap_angle(psi + math.pi / 2.0)
            if min(abs(angle_diff(rot, h)) for h in self.headings) > 1e-9:
                raise ValueError("heading set must be closed under quarter turns")
        for v in self.velocities:
            if abs(v.r) > 0:
                raise ValueError("lattice velocities must have zero yaw rate")

    @staticmethod
    def build(model: VesselModel, r_p: float = 5.0, dt: float = 2.0,
              sample_step: float = 1.0, swath_resolution: float = 1.0,
              velocities=None) -> "LatticeSpec":
        headings, vectors = default_heading_set()
        vels = tuple(velocities) if velocities is not None else default_velocity_set(model.v_max)
        alphas, ns = [], []
        for vel in vels:
            a, n = steady_thruster_allocation(vel, model)
            alphas.append(tuple(float(x) for x in a))
            ns.append(tuple(float(x) for x in n))
        return LatticeSpec(
            r_p=float(r_p), headings=headings, heading_vectors=vectors,
            velocities=vels, steady_alpha=tuple(alphas), steady_n=tuple(ns),
            dt=float(dt), sample_step=float(sample_step),
            swath_resolution=float(swath_resolution),
            model_hash=hash_model(model),
        )

    # -- symmetry helpers ---------------------------------------------------

    def rotate_heading(self, idx: int, quarter_turns: int) -> int:
        psi = wrap_angle(self.headings[idx] + quarter_turns * math.pi / 2.0)
        diffs = [abs(angle_diff(psi, h)) for h in self.headings]
        return int(np.argmin(diffs))

    def heading_step(self, idx: int, steps: int) -> int:
        """Neighbor heading index in sorted circular order."""
        return (idx + steps) % len(self.headings)

    def canonical_heading_indices(self):
        return tuple(k for k, h in enumerate(self.headings)
                     if -1e-12 <= h < math.pi / 2.0 - 1e-12)

    def quadrant_of(self, idx: int) -> int:
        """Quarter turns q such that rotate_heading(canonical, q) == idx."""
        for q in range(4):
            cand = self.rotate_heading(idx, -q)
            if cand in self.canonical_heading_indices():
                return q
        raise ValueError("heading index outside the quadrant structure")

    def lattice_state(self, ds: DiscreteState) -> VesselState:
        """Full vehicle state induced by a discrete lattice state."""
        return VesselState(
            eta=GeneralizedPosition(ds.ix * self.r_p, ds.iy * self.r_p,
                                    self.headings[ds.heading_idx]),
            nu=self.velocities[ds.vel_idx],
            alpha=self.steady_alpha[ds.vel_idx],
            n=self.steady_n[ds.vel_idx],
        )

    def spec_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(spec_to_dict(self), sort_keys=True).encode()).hexdigest()


def hash_model(model: VesselModel) -> str:
    return hashlib.sha256(
        json.dumps(model_to_dict(model), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# steady-state thruster allocation
# ---------------------------------------------------------------------------

def required_steady_force(nu_d: BodyVelocity, model: VesselModel) -> np.ndarray:
    """Generalized force balancing Coriolis and damping at constant velocity."""
    from .vessel import coriolis_vector, damping_vector

    return coriolis_vector(model, nu_d) + damping_vector(model, nu_d)


def steady_thruster_allocation(nu_d: BodyVelocity, model: VesselModel,
                               tol: float = 1e-6):
    """Thruster angles and speeds realizing the steady force for nu_d (r = 0).

    Solved as a bound-constrained least-squares rootfind with a minimum-norm
    tie-break; the zero-velocity case returns all-zero thruster states.
    """
    if abs(nu_d.r) > 1e-12:
        raise ValueError("steady allocation requires zero yaw rate")
    nt = model.n_thrusters
    tau_d = required_steady_force(nu_d, model)
    force_scale = max(1.0, float(np.abs(tau_d[:2]).max()),
                      float(abs(tau_d[2])) / 10.0)
    if np.allclose(tau_d, 0.0, atol=1e-9):
        return np.zeros(nt), np.zeros(nt)

    from .vessel import total_thruster_force

    n_max = model.n_max

    def residual(theta):
        alpha, n = theta[:nt], theta[nt:]
        tau = total_thruster_force(model, alpha, n, nu_d)
        r = (tau - tau_d) / force_scale
        reg = 1e-7 * theta
        return np.concatenate([r, reg])

    guesses = _allocation_guesses(tau_d, model, nt)
    best = None
    for g in guesses:
        lb = np.concatenate([np.full(nt, -2.0 * math.pi), -n_max])
        ub = np.concatenate([np.full(nt, 2.0 * math.pi), n_max])
        sol = least_squares(residual, np.clip(g, lb, ub), bounds=(lb, ub),
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=400)
        tau = total_thruster_force(model, sol.x[:nt], sol.x[nt:], nu_d)
        nu_dot = model.M_inv @ (tau - tau_d)
        err = float(np.linalg.norm(nu_dot))
        if best is None or err < best[0]:
            best = (err, sol.x)
        if err <= tol * 0.01:
            break
    err, theta = best
    if err > tol:
        raise AllocationInfeasible(
            f"residual |nu_dot| = {err:.2e} above {tol:.0e} for nu_d = {nu_d}")
    alpha = np.array([wrap_angle(a) for a in theta[:nt]])
    return alpha, theta[nt:].copy()


def _allocation_guesses(tau_d, model, nt):
    f = tau_d[:2]
    fn = float(np.linalg.norm(f))
    guesses = []
    if fn > 0:
        share = f / nt
        mag = float(np.linalg.norm(share))
        ang = math.atan2(share[1], share[0])
        n0 = math.sqrt(mag / model.thrusters[0].theta_p)
        guesses.append(np.concatenate([np.full(nt, ang), np.full(nt, min(n0, model.thrusters[0].n_max * 0.95))]))
        guesses.append(np.concatenate([np.full(nt, ang + math.pi), np.full(nt, -min(n0, model.thrusters[0].n_max * 0.95))]))
    guesses.append(np.concatenate([np.zeros(nt), np.full(nt, 0.5)]))
    guesses.append(np.concatenate([np.full(nt, math.pi / 2.0), np.full(nt, 0.5)]))
    return guesses


# ---------------------------------------------------------------------------
# motion primitives
# ---------------------------------------------------------------------------

@dataclass
class MotionPrimitive:
    """Sampled feasible trajectory between two lattice states.

    states[k] is the state at time k*sample_step, controls[k] is the
    zero-order-hold input on [k, k+1)*sample_step; re-integration of the
    controls reproduces the states bit-for-bit (same substep sequence).
    """

    prim_id: str
    start: DiscreteState
    end: DiscreteState
    duration: float
    sample_step: float
    states: np.ndarray        # (S+1, d)
    controls: np.ndarray      # (S, m)
    cost_lm: float
    swath: np.ndarray         # (C, 2) int cells relative to the start cell
    swath_resolution: float
    _sample_cells: tuple = field(default=None, repr=False, compare=False)

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    def vessel_states(self):
        return [VesselState.from_vector(s) for s in self.states]

    def control_inputs(self):
        return [ControlInput.from_vector(c) for c in self.controls]


def _round_to_grid(value: float, grid: float, mode: str) -> float:
    q = value / grid
    if mode == "ceil":
        return max(2.0 * grid, math.ceil(q - 1e-9) * grid)
    return max(2.0 * grid, round(q) * grid)


def _interp_states(x_start: np.ndarray, x_end: np.ndarray, N: int) -> np.ndarray:
    """Linear state interpolation with shortest-path heading."""
    d = x_start.size
    out = np.empty((N + 1, d))
    frac = np.linspace(0.0, 1.0, N + 1)
    for k in range(d):
        out[:, k] = x_start[k] + frac * (x_end[k] - x_start[k])
    out[:, 2] = x_start[2] + frac * angle_diff(x_end[2], x_start[2])
    return out


def generate_primitive(start_state: VesselState, goal_state: VesselState,
                       model: VesselModel,
                       running_cost: ocp.RunningCost = ocp.RunningCost(),
                       dt_grid: float = 2.0, sample_step: float = 1.0,
                       durations=None, warm=None, interp_fallback: bool = True,
                       feas_tol: float = 1e-7):
    """Solve the free-space primitive OCP; duration locked to the dt grid.

    Tries the candidate durations in order and returns
    (states, controls, duration, cost) at the sample_step grid for the first
    converged one, or None when every candidate fails.
    """
    x0 = start_state.to_vector()
    x0[2] = float(start_state.eta.psi)
    xf = goal_state.to_vector()
    # keep the heading continuous relative to the start
    xf[2] = x0[2] + angle_diff(goal_state.eta.psi, x0[2])

    if durations is None:
        durations = default_duration_candidates(
            _duration_estimate(x0, xf, model), dt_grid, x0, xf, model)
    for T in durations:
        N = int(round(T / dt_grid))
        if N < 2:
            continue
        tr = ocp.transcribe(model, N, (x0, xf), ocp.DtSpec.fixed_dt(dt_grid),
                            running_cost)
        rep = None
        warm_starts = []
        if warm is not None and warm[1].shape[0] == N:
            warm_starts.append(warm)
        if interp_fallback or not warm_starts:
            warm_starts.append(None)
        for ws in warm_starts:
            if ws is None:
                X_ws = _interp_states(x0, xf, N)
                U_ws = _controls_from_states(X_ws, model, dt_grid)
            else:
                X_ws, U_ws = ws
            guess = tr.initial_guess(X_ws, U_ws)
            z, rep = ocp.solve(tr.problem(), guess, feas_tol=feas_tol,
                               opt_tol=5e-2, max_iter=80)
            if rep.status == "converged":
                break
        if rep is None or rep.status != "converged":
            continue
        X = tr.layout.states(z)
        U = tr.layout.controls(z)
        states, controls = _densify(model, x0, U, dt_grid, sample_step)
        end_err_pos = float(np.abs(states[-1, :2] - xf[:2]).max())
        end_err_ang = float(abs(angle_diff(states[-1, 2], xf[2])))
        end_err_vel = float(np.abs(states[-1, 3:] - xf[3:]).max())
        if end_err_pos > POS_TOL or end_err_ang > ANG_TOL or end_err_vel > VEL_TOL:
            continue
        if not _samples_feasible(states, controls, model):
            continue
        cost = float(running_cost.stage(X[:-1], U, model.n_thrusters).sum() * dt_grid)
        return states, controls, float(N * dt_grid), cost
    return None


def _duration_estimate(x0, xf, model) -> float:
    dist = float(np.hypot(*(xf[:2] - x0[:2])))
    speed0 = float(np.hypot(x0[3], x0[4]))
    speedf = float(np.hypot(xf[3], xf[4]))
    v_ref = max(0.5 * (speed0 + speedf), 0.25 * model.v_max)
    t_pos = dist / v_ref
    t_turn = abs(angle_diff(xf[2], x0[2])) / 0.03
    dn = float(np.abs(xf[6 + model.n_thrusters:] - x0[6 + model.n_thrusters:]).max())
    da = float(np.abs(xf[6:6 + model.n_thrusters] - x0[6:6 + model.n_thrusters]).max())
    # thruster-state swings need roughly twice the pure ramp time (out and back)
    t_act = 2.0 * (dn / float(model.n_dot_max.min())
                   + da / float(model.alpha_dot_max.min()))
    return max(t_pos, t_turn, t_act, 4.0)


def default_duration_candidates(hint, dt_grid, x0, xf, model):
    at_vmax = max(np.hypot(x0[3], x0[4]), np.hypot(xf[3], xf[4])) \
        >= model.v_max * (1.0 - 1e-9)
    base = _round_to_grid(hint, dt_grid, "ceil" if at_vmax else "round")
    cands = [base, base + dt_grid, base + 2 * dt_grid, base + 4 * dt_grid]
    if not at_vmax and base - dt_grid >= 2 * dt_grid:
        cands.insert(2, base - dt_grid)
    seen, out = set(), []
    for c in cands:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def _controls_from_states(X_ws, model, dt):
    nt = model.n_thrusters
    N = X_ws.shape[0] - 1
    U = np.zeros((N, 2 * nt))
    dalpha = np.diff(X_ws[:, 6:6 + nt], axis=0) / dt
    dn = np.diff(X_ws[:, 6 + nt:6 + 2 * nt], axis=0) / dt
    U[:, :nt] = np.clip(dalpha, -model.alpha_dot_max, model.alpha_dot_max)
    U[:, nt:] = np.clip(dn, -model.n_dot_max, model.n_dot_max)
    return U


def _simulated_warm_start(model, x0, xf, N, dt):
    """Dynamically consistent start: ramp thruster states to the goal values.

    Defects vanish by construction; only the terminal equality is violated.
    """
    nt = model.n_thrusters
    X = np.empty((N + 1, x0.size))
    U = np.zeros((N, 2 * nt))
    X[0] = x0
    x = x0[None, :].copy()
    a_cap = 0.9 * model.alpha_dot_max
    n_cap = 0.9 * model.n_dot_max
    for i in range(N):
        ua = np.clip((xf[6:6 + nt] - x[0, 6:6 + nt]) / dt, -a_cap, a_cap)
        un = np.clip((xf[6 + nt:6 + 2 * nt] - x[0, 6 + nt:6 + 2 * nt]) / dt,
                     -n_cap, n_cap)
        U[i] = np.concatenate([ua, un])
        x = rk4_step_batch(model, x, U[i][None, :], dt, ocp.Transcription.SUBSTEPS)
        X[i + 1] = x[0]
    return X, U


def _densify(model, x0, U_shoot, dt_grid, sample_step):
    """Re-integrate shooting controls on the sample grid (identical substeps)."""
    per = int(round(dt_grid / sample_step))
    substeps_total = ocp.Transcription.SUBSTEPS
    sub = max(1, substeps_total // per)
    N = U_shoot.shape[0]
    S = N * per
    d = x0.size
    states = np.empty((S + 1, d))
    controls = np.empty((S, U_shoot.shape[1]))
    states[0] = x0
    x = x0[None, :].copy()
    for i in range(N):
        u = U_shoot[i][None, :]
        for k in range(per):
            x = rk4_step_batch(model, x, u, sample_step, sub)
            states[i * per + k + 1] = x[0]
            controls[i * per + k] = U_shoot[i]
    return states, controls


def _samples_feasible(states, controls, model, slack: float = 1e-6):
    speed = np.hypot(states[:, 3], states[:, 4])
    if float(speed.max()) > model.v_max + slack:
        return False
    nt = model.n_thrusters
    nmax = model.n_max
    if np.any(np.abs(states[:, 6 + nt:6 + 2 * nt]) > nmax[None, :] + slack):
        return False
    if np.any(np.abs(controls[:, :nt]) > model.alpha_dot_max[None, :] + slack):
        return False
    if np.any(np.abs(controls[:, nt:]) > model.n_dot_max[None, :] + slack):
        return False
    return True


# ---------------------------------------------------------------------------
# swath computation
# ---------------------------------------------------------------------------

def compute_swath(states: np.ndarray, footprint: np.ndarray, resolution: float,
                  ring_only: bool = False):
    """Cells covered by the footprint along the samples, relative to the start cell.

    Cell (i, j) covers [i, i+1) x [j, j+1) in units of `resolution`; a cell
    belongs to the swath when its center lies inside the posed footprint or
    within half a cell diagonal of it. With ring_only, keep only cells near
    the footprint boundary (used for the per-sample cost probes).
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    margin = resolution * math.sqrt(2.0) / 2.0
    start_cell = np.floor(states[0, :2] / resolution + 1e-9).astype(np.int64)
    per_sample = []
    for row in states:
        verts = rotate_footprint_vertices(footprint, row[0], row[1], row[2])
        A, b = vertices_to_halfspaces(verts)
        lo = np.floor(verts.min(axis=0) / resolution).astype(np.int64) - 1
        hi = np.floor(verts.max(axis=0) / resolution).astype(np.int64) + 1
        ii = np.arange(lo[0], hi[0] + 1)
        jj = np.arange(lo[1], hi[1] + 1)
        cx = (ii + 0.5) * resolution
        cy = (jj + 0.5) * resolution
        CX, CY = np.meshgrid(cx, cy, indexing="ij")
        pts = np.stack([CX.ravel(), CY.ravel()], axis=1)
        margins = pts @ A.T - b[None, :]
        inside = margins.max(axis=1) <= margin
        if ring_only:
            inside &= margins.max(axis=1) >= -(2.0 * resolution)
        II, JJ = np.meshgrid(ii, jj, indexing="ij")
        cells = np.stack([II.ravel()[inside], JJ.ravel()[inside]], axis=1)
        per_sample.append(cells - start_cell[None, :])
    return per_sample


def union_swath(per_sample_cells):
    if not per_sample_cells:
        return np.zeros((0, 2), dtype=np.int64)
    allc = np.concatenate(per_sample_cells, axis=0)
    return np.unique(allc, axis=0)


def primitive_sample_cells(prim: MotionPrimitive, footprint: np.ndarray):
    """Per-sample boundary-ring cells (cached); used for environmental cost."""
    if prim._sample_cells is None:
        cells = compute_swath(prim.states, footprint, prim.swath_resolution,
                              ring_only=True)
        prim._sample_cells = tuple(cells)
    return prim._sample_cells


def rotate_cells(cells: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Exact rotation of unit cells about the origin by q quarter turns."""
    out = np.asarray(cells, dtype=np.int64)
    for _ in range(quarter_turns % 4):
        out = np.stack([-out[:, 1] - 1, out[:, 0]], axis=1)
    return np.unique(out, axis=0)


# ---------------------------------------------------------------------------
# primitive set
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrimitiveMenu:
    """Which canonical maneuver families to generate."""

    ride_lengths: tuple = (1, 2, 3, 4, 5, 6)
    rides_to_keep: int = 2
    turn_steps: tuple = (1, 2, 3, 4)
    combined_turn_steps: tuple = (1,)
    include_hold: bool = True


@dataclass
class PrimitiveSet:
    spec: LatticeSpec
    primitives: dict                    # (heading_idx, vel_idx) -> list of prims
    by_id: dict = field(default_factory=dict)

    def applicable(self, heading_idx: int, vel_idx: int):
        return self.primitives.get((heading_idx, vel_idx), [])

    def all_primitives(self):
        out = []
        for key in sorted(self.primitives):
            out.extend(self.primitives[key])
        return out


def _velocity_neighbors(vels):
    """Adjacency on the velocity set by Euclidean closeness (ties included)."""
    pts = np.array([[v.u, v.v] for v in vels])
    nbrs = []
    for i in range(len(vels)):
        d = np.linalg.norm(pts - pts[i], axis=1)
        d[i] = np.inf
        dmin = d.min()
        nbrs.append(tuple(int(j) for j in np.where(d <= dmin + 1e-9)[0]))
    return nbrs


def _displacement_estimate(spec, h_idx, vel_s, vel_g, dpsi, T):
    """Integrated world displacement for a linear heading/velocity blend."""
    psi0 = spec.headings[h_idx]
    ts = np.linspace(0.0, 1.0, 41)
    psi = psi0 + ts * dpsi
    u = vel_s.u + ts * (vel_g.u - vel_s.u)
    v = vel_s.v + ts * (vel_g.v - vel_s.v)
    dx = np.trapezoid((np.cos(psi) * u - np.sin(psi) * v), ts) * T
    dy = np.trapezoid((np.sin(psi) * u + np.cos(psi) * v), ts) * T
    return np.array([dx, dy])


def _cell_candidates(disp, r_p):
    base = disp / r_p
    center = np.round(base).astype(int)
    offsets = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1),
               (1, -1), (-1, 1)]
    cands = []
    for ox, oy in offsets:
        c = (int(center[0] + ox), int(center[1] + oy))
        if c not in cands:
            cands.append(c)
    cands.sort(key=lambda c: (float(np.hypot(c[0] - base[0], c[1] - base[1])),
                              c[0], c[1]))
    return cands[:4]


# a ride candidate is viable when the grid-quantized duration keeps the mean
# speed within this fraction of the boundary speed (actuator-rate limited)
RIDE_SPEED_SLACK = 0.12


def _ride_duration(T_nat: float, dt_grid: float, at_vmax: bool):
    """Quantized ride duration and its relative speed error, or None."""
    T_q = _round_to_grid(T_nat, dt_grid, "ceil" if at_vmax else "round")
    err = abs(T_q - T_nat) / T_q
    if err > RIDE_SPEED_SLACK:
        return None
    return T_q


def _canonical_jobs(spec: LatticeSpec, menu: PrimitiveMenu):
    """Deterministic list of canonical primitive-generation jobs."""
    jobs = []
    nbrs = _velocity_neighbors(spec.velocities)
    vmax = max(math.hypot(v.u, v.v) for v in spec.velocities)
    for h in spec.canonical_heading_indices():
        hv = np.array(spec.heading_vectors[h], dtype=float)
        hv_len = float(np.linalg.norm(hv))
        perp = np.array([-hv[1], hv[0]], dtype=float)
        for v_idx, vel in enumerate(spec.velocities):
            speed = math.hypot(vel.u, vel.v)
            at_vmax = speed >= vmax * (1.0 - 1e-9)
            key = (h, v_idx)
            if speed < 1e-9:
                if menu.include_hold:
                    jobs.append(dict(kind="hold", key=key, tag="hold"))
            else:
                direction = hv if abs(vel.u) > 0 else perp
                sign = 1.0 if (vel.u + vel.v) > 0 else -1.0
                for k in menu.ride_lengths:
                    T_q = _ride_duration(k * hv_len * spec.r_p / speed,
                                         spec.dt, at_vmax)
                    if T_q is None:
                        continue
                    cell = (int(round(sign * k * direction[0])),
                            int(round(sign * k * direction[1])))
                    jobs.append(dict(kind="ride", key=key, cell=cell,
                                     durations=(T_q, T_q + spec.dt),
                                     tag=f"ride{k}"))
            # same-velocity heading changes
            steps = (1,) if at_vmax else menu.turn_steps
            for s in steps:
                for sgn in (1, -1):
                    jobs.append(dict(kind="turn", key=key, dstep=sgn * s,
                                     vel_goal=v_idx, tag=f"turn{sgn * s:+d}"))
            # velocity transitions: same heading (required), adjacent headings
            for v_g in nbrs[v_idx]:
                jobs.append(dict(kind="trans", key=key, dstep=0, vel_goal=v_g,
                                 required=True, tag=f"vel{v_idx}to{v_g}"))
                for s in menu.combined_turn_steps:
                    for sgn in (1, -1):
                        jobs.append(dict(kind="trans", key=key, dstep=sgn * s,
                                         vel_goal=v_g,
                                         tag=f"vel{v_idx}to{v_g}turn{sgn * s:+d}"))
    return jobs


def _resample_solution(X, U, N2):
    """Resample a shooting solution onto an N2-interval grid (linear states, ZOH controls)."""
    N1 = U.shape[0]
    tau = np.linspace(0.0, N1, N2 + 1)
    X2 = np.empty((N2 + 1, X.shape[1]))
    for k in range(X.shape[1]):
        X2[:, k] = np.interp(tau, np.arange(N1 + 1), X[:, k])
    idx = np.clip((tau[:-1] + 0.5 * N1 / N2).astype(int), 0, N1 - 1)
    return X2, U[idx]


def _solve_two_pass(spec, model, cost, start, goal_ds, hint):
    """Free-final-time pass to locate the duration, then a grid-locked refit."""
    goal = spec.lattice_state(goal_ds)
    x0 = start.to_vector()
    xf = goal.to_vector()
    xf[2] = x0[2] + angle_diff(goal.eta.psi, x0[2])
    N1 = 12
    dt_init = min(max(hint / N1, 0.5), 8.0)
    tr1 = ocp.transcribe(model, N1, (x0, xf),
                         ocp.DtSpec.free_dt(0.3, 10.0, dt_init), cost)
    X_ws = _interp_states(x0, xf, N1)
    U_ws = _controls_from_states(X_ws, model, dt_init)
    z1, rep1 = ocp.solve(tr1.problem(), tr1.initial_guess(X_ws, U_ws),
                         feas_tol=1e-5, opt_tol=1e-2, max_iter=40)
    # the free-time pass only locates the duration; near-feasible is enough
    if rep1.status != "converged" and rep1.max_violation > 1e-3:
        return None
    T_star = N1 * tr1.layout.dt_value(z1, None)
    X1 = tr1.layout.states(z1)
    U1 = tr1.layout.controls(z1)

    # refit comfortably inside the feasible set: grid durations at the
    # free-time optimum sit on the feasibility edge and condition poorly
    base = _round_to_grid(1.12 * T_star, spec.dt, "ceil")
    for T in (base, base + spec.dt):
        N2 = int(round(T / spec.dt))
        if N2 < 2:
            continue
        X2, U2 = _resample_solution(X1, U1, N2)
        out = generate_primitive(start, goal, model, cost, dt_grid=spec.dt,
                                 sample_step=spec.sample_step, durations=[T],
                                 warm=(X2, U2), interp_fallback=False)
        if out is not None:
            return out
    return None


def _solve_job(args):
    spec, model, cost, job = args
    h, v_idx = job["key"]
    start = spec.lattice_state(DiscreteState(0, 0, h, v_idx))
    results = []
    if job["kind"] == "hold":
        return (job, [_build_hold(spec, model, start, job, cost)])
    if job["kind"] == "ride":
        goal_ds = DiscreteState(job["cell"][0], job["cell"][1], h, v_idx)
        goal = spec.lattice_state(goal_ds)
        out = generate_primitive(start, goal, model, cost, dt_grid=spec.dt,
                                 sample_step=spec.sample_step,
                                 durations=job["durations"])
        if out is not None:
            results.append((goal_ds, out))
        return (job, results)
    # turns and transitions: free-time pass per displacement candidate
    h_g = spec.heading_step(h, job["dstep"])
    v_g = job["vel_goal"]
    dpsi = angle_diff(spec.headings[h_g], spec.headings[h])
    vel_s, vel_g = spec.velocities[v_idx], spec.velocities[v_g]
    x0 = start.to_vector()
    xf_proto = spec.lattice_state(DiscreteState(0, 0, h_g, v_g)).to_vector()
    hint = max(_duration_estimate(x0, xf_proto, model), abs(dpsi) / 0.02)
    disp = _displacement_estimate(spec, h, vel_s, vel_g, dpsi, hint)
    for cell in _cell_candidates(disp, spec.r_p):
        goal_ds = DiscreteState(cell[0], cell[1], h_g, v_g)
        out = _solve_two_pass(spec, model, cost, start, goal_ds, hint)
        if out is not None:
            results.append((goal_ds, out))
            break
    return (job, results)


def _build_hold(spec, model, start, job, cost):
    h, v_idx = job["key"]
    duration = 2 * spec.dt
    S = int(round(duration / spec.sample_step))
    x0 = start.to_vector()
    states = np.tile(x0, (S + 1, 1))
    controls = np.zeros((S, model.control_dim))
    c = float(cost.stage(states[:1], controls[:1], model.n_thrusters)[0] * duration)
    return (DiscreteState(0, 0, h, v_idx), (states, controls, float(duration), c))


def generate_primitive_set(spec: LatticeSpec, model: VesselModel,
                           running_cost: ocp.RunningCost = ocp.RunningCost(),
                           menu: PrimitiveMenu = PrimitiveMenu(),
                           workers: int = None) -> PrimitiveSet:
    """Generate canonical primitives and close the set under quarter turns."""
    jobs = _canonical_jobs(spec, menu)
    args = [(spec, model, running_cost, j) for j in jobs]
    if workers is None:
        workers = thread_budget()
    if workers > 1 and len(jobs) > 4:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_solve_job, args, chunksize=2))
    else:
        results = [_solve_job(a) for a in args]

    prims = {}
    ride_kept = {}
    failed_required = []
    for job, outs in results:
        key = tuple(job["key"])
        if job["kind"] == "ride":
            if ride_kept.get(key, 0) >= menu.rides_to_keep:
                continue
            if outs:
                ride_kept[key] = ride_kept.get(key, 0) + 1
        if not outs and job.get("required"):
            failed_required.append((key, job["tag"]))
            continue
        for goal_ds, (states, controls, duration, cost) in outs:
            pid = f"h{key[0]}v{key[1]}_{job['tag']}"
            per_sample = compute_swath(states, model.footprint,
                                       spec.swath_resolution)
            prim = MotionPrimitive(
                prim_id=pid, start=DiscreteState(0, 0, key[0], key[1]),
                end=goal_ds, duration=duration, sample_step=spec.sample_step,
                states=states, controls=controls, cost_lm=cost,
                swath=union_swath(per_sample),
                swath_resolution=spec.swath_resolution)
            prims.setdefault(key, []).append(prim)

    if failed_required:
        raise PrimitiveInfeasible(
            f"required transitions failed to converge: {failed_required}")
    missing = []
    for h in spec.canonical_heading_indices():
        for v_idx, vel in enumerate(spec.velocities):
            if math.hypot(vel.u, vel.v) > 1e-9:
                if not any("ride" in p.prim_id for p in prims.get((h, v_idx), [])):
                    missing.append((h, v_idx))
    if missing:
        raise PrimitiveInfeasible(f"no ride primitive converged for keys {missing}")

    full = _close_under_rotation(spec, prims)
    pset = PrimitiveSet(spec=spec, primitives=full)
    for key in sorted(full):
        for p in full[key]:
            pset.by_id[p.prim_id] = p
    # connectivity: every key needs at least one applicable primitive
    for h in range(16):
        for v_idx in range(len(spec.velocities)):
            if not pset.applicable(h, v_idx):
                raise PrimitiveInfeasible(f"no primitives for key {(h, v_idx)}")
    return pset


def _close_under_rotation(spec: LatticeSpec, canonical: dict) -> dict:
    full = {}
    for (h, v_idx), plist in sorted(canonical.items()):
        for prim in plist:
            for q in range(4):
                rp = _rotate_primitive(spec, prim, q)
                full.setdefault((rp.start.heading_idx, rp.start.vel_idx),
                                []).append(rp)
    for key in full:
        full[key].sort(key=lambda p: p.prim_id)
    return full


_ROT_INT = np.array([[0, -1], [1, 0]], dtype=np.int64)


def _rotate_primitive(spec: LatticeSpec, prim: MotionPrimitive,
                      q: int) -> MotionPrimitive:
    if q % 4 == 0:
        return MotionPrimitive(
            prim_id=prim.prim_id + "_r0", start=prim.start, end=prim.end,
            duration=prim.duration, sample_step=prim.sample_step,
            states=prim.states.copy(), controls=prim.controls.copy(),
            cost_lm=prim.cost_lm, swath=prim.swath.copy(),
            swath_resolution=prim.swath_resolution)
    R = np.linalg.matrix_power(_ROT_INT, q % 4)
    states = prim.states.copy()
    states[:, :2] = states[:, :2] @ R.T.astype(float)
    states[:, 2] = wrap_angle(states[:, 2] + q * math.pi / 2.0)
    h_s = spec.rotate_heading(prim.start.heading_idx, q)
    h_e = spec.rotate_heading(prim.end.heading_idx, q)
    # exact heading values at the boundary samples
    states[0, 2] = spec.headings[h_s]
    end_cell = R @ np.array([prim.end.ix, prim.end.iy], dtype=np.int64)
    return MotionPrimitive(
        prim_id=prim.prim_id + f"_r{q % 4}",
        start=DiscreteState(0, 0, h_s, prim.start.vel_idx),
        end=DiscreteState(int(end_cell[0]), int(end_cell[1]), h_e,
                          prim.end.vel_idx),
        duration=prim.duration, sample_step=prim.sample_step,
        states=states, controls=prim.controls.copy(), cost_lm=prim.cost_lm,
        swath=rotate_cells(prim.swath, q),
        swath_resolution=prim.swath_resolution)


def thread_budget() -> int:
    """Worker count from HARBOR_THREADS (0 or unset = auto)."""
    raw = os.environ.get("HARBOR_THREADS", "0")
    try:
        val = int(raw)
    except ValueError:
        val = 0
    if val <= 0:
        return max(1, min(os.cpu_count() or 1, 8))
    return val


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

FILE_VERSION = 1


def spec_to_dict(spec: LatticeSpec) -> dict:
    return {
        "r_p": spec.r_p,
        "headings": list(spec.headings),
        "heading_vectors": [list(v) for v in spec.heading_vectors],
        "velocities": [[v.u, v.v, v.r] for v in spec.velocities],
        "steady_alpha": [list(a) for a in spec.steady_alpha],
        "steady_n": [list(n) for n in spec.steady_n],
        "dt": spec.dt,
        "sample_step": spec.sample_step,
        "swath_resolution": spec.swath_resolution,
        "model_hash": spec.model_hash,
    }


def spec_from_dict(doc: dict) -> LatticeSpec:
    return LatticeSpec(
        r_p=float(doc["r_p"]),
        headings=tuple(float(h) for h in doc["headings"]),
        heading_vectors=tuple(tuple(int(x) for x in v) for v in doc["heading_vectors"]),
        velocities=tuple(BodyVelocity(*v) for v in doc["velocities"]),
        steady_alpha=tuple(tuple(float(x) for x in a) for a in doc["steady_alpha"]),
        steady_n=tuple(tuple(float(x) for x in n) for n in doc["steady_n"]),
        dt=float(doc["dt"]), sample_step=float(doc["sample_step"]),
        swath_resolution=float(doc["swath_resolution"]),
        model_hash=doc.get("model_hash", ""),
    )


def _rle_encode(cells: np.ndarray):
    """Row-major run-length encoding: [dy, dx_start, run] triples."""
    if cells.size == 0:
        return []
    order = np.lexsort((cells[:, 0], cells[:, 1]))
    c = cells[order]
    runs = []
    run_y, run_x0, run_len = int(c[0, 1]), int(c[0, 0]), 1
    for k in range(1, c.shape[0]):
        x, y = int(c[k, 0]), int(c[k, 1])
        if y == run_y and x == run_x0 + run_len:
            run_len += 1
        else:
            runs.append([run_y, run_x0, run_len])
            run_y, run_x0, run_len = y, x, 1
    runs.append([run_y, run_x0, run_len])
    return runs


def _rle_decode(runs) -> np.ndarray:
    cells = []
    for y, x0, ln in runs:
        for x in range(x0, x0 + ln):
            cells.append((x, y))
    if not cells:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(cells), dtype=np.int64)


def primitive_set_to_dict(pset: PrimitiveSet) -> dict:
    prims = []
    for p in pset.all_primitives():
        prims.append({
            "id": p.prim_id,
            "start": [p.start.heading_idx, p.start.vel_idx],
            "end": [p.end.ix, p.end.iy, p.end.heading_idx, p.end.vel_idx],
            "duration": p.duration,
            "sample_step": p.sample_step,
            "cost_lm": p.cost_lm,
            "states": p.states.tolist(),
            "controls": p.controls.tolist(),
            "swath_rle": _rle_encode(p.swath),
        })
    return {"version": FILE_VERSION, "spec": spec_to_dict(pset.spec),
            "primitives": prims}


def primitive_set_from_dict(doc: dict) -> PrimitiveSet:
    if doc.get("version") != FILE_VERSION:
        raise ValueError("unsupported primitive-set file version")
    spec = spec_from_dict(doc["spec"])
    prims = {}
    pset = PrimitiveSet(spec=spec, primitives=prims)
    for pd in doc["primitives"]:
        start = DiscreteState(0, 0, int(pd["start"][0]), int(pd["start"][1]))
        end = DiscreteState(*[int(x) for x in pd["end"]])
        prim = MotionPrimitive(
            prim_id=pd["id"], start=start, end=end,
            duration=float(pd["duration"]), sample_step=float(pd["sample_step"]),
            states=np.asarray(pd["states"], dtype=float),
            controls=np.asarray(pd["controls"], dtype=float),
            cost_lm=float(pd["cost_lm"]),
            swath=_rle_decode(pd["swath_rle"]),
            swath_resolution=spec.swath_resolution)
        prims.setdefault((start.heading_idx, start.vel_idx), []).append(prim)
        pset.by_id[prim.prim_id] = prim
    for key in prims:
        prims[key].sort(key=lambda p: p.prim_id)
    return pset


def save_primitive_set(pset: PrimitiveSet, path) -> None:
    Path(path).write_text(json.dumps(primitive_set_to_dict(pset), sort_keys=True))


def load_primitive_set(path) -> PrimitiveSet:
    return primitive_set_from_dict(json.loads(Path(path).read_text()))
