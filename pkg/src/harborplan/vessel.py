"""3-DOF ship model: kinematics, kinetics, azimuth-thruster forces.

State vector x = [eta, nu, alpha, n] with
    eta = (x, y, psi)     Earth-fixed position [m] and heading [rad]
    nu  = (u, v, r)       body-fixed surge/sway [m/s] and yaw rate [rad/s]
    alpha, n              thruster angles [rad] and propeller speeds [RPS]
Control input u = [alpha_dot, n_dot] (thruster-angle and propeller-speed
rates). Kinetics follow M*nu_dot + C(nu) + D(nu) = tau with a
skew-symmetric Coriolis construction (nu'*C(nu)*nu == 0), linear plus
diagonal-quadratic damping, and quadratic propeller / V^2-lift rudder
forces per thruster.

All functions are pure; VesselModel is immutable after construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(psi):
    """Normalize an angle (scalar or array) to (-pi, pi]."""
    wrapped = np.remainder(np.asarray(psi, dtype=float) + math.pi, TWO_PI)
    out = wrapped - math.pi
    # remainder gives [0, 2pi) -> [-pi, pi); move -pi to +pi for (-pi, pi]
    out = np.where(out == -math.pi, math.pi, out)
    if np.ndim(psi) == 0:
        return float(out)
    return out


def angle_diff(a, b):
    """Smallest signed difference a - b, in (-pi, pi]."""
    return wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


@dataclass(frozen=True)
class GeneralizedPosition:
    """Earth-fixed pose (x [m], y [m], psi [rad], normalized to (-pi, pi])."""

    x: float
    y: float
    psi: float

    def __post_init__(self):
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    @property
    def array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])


@dataclass(frozen=True)
class BodyVelocity:
    """Body-fixed generalized velocity (u, v [m/s], r [rad/s])."""

    u: float
    v: float
    r: float

    @property
    def array(self) -> np.ndarray:
        return np.array([self.u, self.v, self.r])

    @property
    def speed(self) -> float:
        return math.hypot(self.u, self.v)


@dataclass(frozen=True)
class ThrusterConfig:
    """One azimuth thruster: mount point, gains and rate/speed limits."""

    lx: float            # [m] mount x in body frame
    ly: float            # [m] mount y in body frame
    theta_p: float       # [N/RPS^2] propeller gain
    theta_r: float       # [N s^2 m^-2 rad^-1] rudder (lift) gain
    n_max: float         # [RPS]
    n_dot_max: float     # [RPS/s]
    alpha_dot_max: float  # [rad/s]

    def __post_init__(self):
        for name in ("theta_p", "theta_r", "n_max", "n_dot_max", "alpha_dot_max"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"thruster {name} must be strictly positive")


@dataclass(frozen=True)
class VesselModel:
    """Inertia, damping, thruster layout and convex footprint of one ship."""

    M: np.ndarray                      # 3x3 total inertia [kg, kg m^2]
    D_lin: np.ndarray                  # 3x3 linear damping
    D_quad: np.ndarray                 # diagonal quadratic damping (3,)
    thrusters: tuple[ThrusterConfig, ...]
    footprint: np.ndarray              # (K, 2) convex CCW body-frame polygon [m]
    v_max: float                       # [m/s] max planar speed

    M_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "D_lin", np.asarray(self.D_lin, dtype=float))
        object.__setattr__(self, "D_quad", np.asarray(self.D_quad, dtype=float))
        object.__setattr__(self, "thrusters", tuple(self.thrusters))
        object.__setattr__(self, "footprint", np.asarray(self.footprint, dtype=float))
        if M.shape != (3, 3) or not np.allclose(M, M.T, rtol=0, atol=1e-9 * abs(M).max()):
            raise ValueError("M must be a symmetric 3x3 matrix")
        if np.any(np.linalg.eigvalsh(M) <= 0):
            raise ValueError("M must be positive definite")
        if self.footprint.shape[0] < 3:
            raise ValueError("footprint needs at least 3 vertices")
        if _polygon_area(self.footprint) <= 0:
            raise ValueError("footprint must be counter-clockwise")
        if not _is_convex_ccw(self.footprint):
            raise ValueError("footprint must be convex")
        if not _origin_inside(self.footprint):
            raise ValueError("footprint must contain the body origin")
        if self.v_max <= 0:
            raise ValueError("v_max must be strictly positive")
        object.__setattr__(self, "M_inv", np.linalg.inv(M))

        # flattened thruster parameter arrays for vectorized force evaluation
        t = self.thrusters
        object.__setattr__(self, "_lx", np.array([c.lx for c in t]))
        object.__setattr__(self, "_ly", np.array([c.ly for c in t]))
        object.__setattr__(self, "_theta_p", np.array([c.theta_p for c in t]))
        object.__setattr__(self, "_theta_r", np.array([c.theta_r for c in t]))

    @property
    def n_thrusters(self) -> int:
        return len(self.thrusters)

    @property
    def state_dim(self) -> int:
        return 6 + 2 * self.n_thrusters

    @property
    def control_dim(self) -> int:
        return 2 * self.n_thrusters

    @property
    def n_max(self) -> np.ndarray:
        return np.array([c.n_max for c in self.thrusters])

    @property
    def n_dot_max(self) -> np.ndarray:
        return np.array([c.n_dot_max for c in self.thrusters])

    @property
    def alpha_dot_max(self) -> np.ndarray:
        return np.array([c.alpha_dot_max for c in self.thrusters])


@dataclass(frozen=True)
class VesselState:
    """Full vehicle state: pose, body velocity and thruster states."""

    eta: GeneralizedPosition
    nu: BodyVelocity
    alpha: tuple[float, ...]
    n: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "n", tuple(float(x) for x in self.n))
        if len(self.alpha) != len(self.n):
            raise ValueError("alpha and n must have equal length")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.eta.array, self.nu.array, self.alpha, self.n])

    @staticmethod
    def from_vector(z: np.ndarray) -> "VesselState":
        z = np.asarray(z, dtype=float)
        nt = (z.size - 6) // 2
        return VesselState(
            eta=GeneralizedPosition(z[0], z[1], z[2]),
            nu=BodyVelocity(z[3], z[4], z[5]),
            alpha=tuple(z[6:6 + nt]),
            n=tuple(z[6 + nt:6 + 2 * nt]),
        )


@dataclass(frozen=True)
class ControlInput:
    """Thruster rate commands (alpha_dot [rad/s], n_dot [RPS/s])."""

    alpha_dot: tuple[float, ...]
    n_dot: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha_dot", tuple(float(a) for a in self.alpha_dot))
        object.__setattr__(self, "n_dot", tuple(float(x) for x in self.n_dot))
        if len(self.alpha_dot) != len(self.n_dot):
            raise ValueError("alpha_dot and n_dot must have equal length")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha_dot, self.n_dot])

    @staticmethod
    def from_vector(z: np.ndarray) -> "ControlInput":
        z = np.asarray(z, dtype=float)
        nt = z.size // 2
        return ControlInput(alpha_dot=tuple(z[:nt]), n_dot=tuple(z[nt:]))

    @staticmethod
    def zero(n_thrusters: int) -> "ControlInput":
        return ControlInput((0.0,) * n_thrusters, (0.0,) * n_thrusters)


# ---------------------------------------------------------------------------
# kinematics and forces
# ---------------------------------------------------------------------------

def rotation_matrix(psi: float) -> np.ndarray:
    """3x3 planar rotation about z by heading psi."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def kinematics(eta: GeneralizedPosition, nu: BodyVelocity) -> np.ndarray:
    """Earth-frame generalized velocity (x_dot, y_dot, psi_dot)."""
    return rotation_matrix(eta.psi) @ nu.array


def flow_speed_at_thruster(nu: BodyVelocity, cfg: ThrusterConfig) -> float:
    """Local water-flow speed V at the thruster mount point [m/s]."""
    return math.hypot(nu.u - cfg.ly * nu.r, nu.v + cfg.lx * nu.r)


def rudder_normal_force(V: float, alpha: float) -> float:
    """Lift-type rudder force F_N; linear in angle, quadratic in flow speed."""
    return V * V * alpha


def thruster_force(cfg: ThrusterConfig, alpha: float, n: float, nu: BodyVelocity) -> np.ndarray:
    """Generalized force (F_x, F_y, M_z) of one thruster."""
    tp = np.array([math.cos(alpha), math.sin(alpha)]) * (abs(n) * n)
    V = flow_speed_at_thruster(nu, cfg)
    tr = np.array([-math.sin(alpha), math.cos(alpha)]) * rudder_normal_force(V, alpha)
    f = cfg.theta_p * tp + cfg.theta_r * tr
    return np.array([f[0], f[1], cfg.ly * f[0] + cfg.lx * f[1]])


def total_thruster_force(model: VesselModel, alpha, n, nu: BodyVelocity) -> np.ndarray:
    """Sum of all thruster generalized forces."""
    tau = np.zeros(3)
    for j, cfg in enumerate(model.thrusters):
        tau += thruster_force(cfg, alpha[j], n[j], nu)
    return tau


def coriolis_vector(model: VesselModel, nu: BodyVelocity) -> np.ndarray:
    """C(nu)*nu with the skew-symmetric construction from M.

    Guarantees nu' * C(nu) * nu == 0 for every nu.
    """
    vec = nu.array
    p1 = model.M[0] @ vec
    p2 = model.M[1] @ vec
    u, v, r = vec
    return np.array([-p2 * r, p1 * r, p2 * u - p1 * v])


def damping_vector(model: VesselModel, nu: BodyVelocity) -> np.ndarray:
    """D(nu)*nu = D_lin*nu + D_quad .* |nu| .* nu."""
    vec = nu.array
    return model.D_lin @ vec + model.D_quad * np.abs(vec) * vec


def dynamics(model: VesselModel, x: VesselState, u: ControlInput) -> np.ndarray:
    """Time derivative of the full state vector."""
    return _dynamics_vec(model, x.to_vector(), u.to_vector())


def _dynamics_vec(model: VesselModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    xb, ub, _ = _as_batch(x, u)
    return _dynamics_batch(model, xb, ub)[0]


def _as_batch(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        u = u[None, :]
    return x, u, single


def _dynamics_batch(model: VesselModel, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Vectorized dynamics over a batch of states/controls (B, dim)."""
    nt = model.n_thrusters
    psi = X[:, 2]
    nu = X[:, 3:6]
    alpha = X[:, 6:6 + nt]
    n = X[:, 6 + nt:6 + 2 * nt]

    c, s = np.cos(psi), np.sin(psi)
    eta_dot = np.empty((X.shape[0], 3))
    eta_dot[:, 0] = c * nu[:, 0] - s * nu[:, 1]
    eta_dot[:, 1] = s * nu[:, 0] + c * nu[:, 1]
    eta_dot[:, 2] = nu[:, 2]

    tau = _tau_batch(model, nu, alpha, n)

    p1 = nu @ model.M[0]
    p2 = nu @ model.M[1]
    u_, v_, r_ = nu[:, 0], nu[:, 1], nu[:, 2]
    cor = np.stack([-p2 * r_, p1 * r_, p2 * u_ - p1 * v_], axis=1)
    damp = nu @ model.D_lin.T + model.D_quad * np.abs(nu) * nu

    nu_dot = (tau - cor - damp) @ model.M_inv.T

    out = np.empty_like(X)
    out[:, 0:3] = eta_dot
    out[:, 3:6] = nu_dot
    out[:, 6:6 + nt] = U[:, :nt]
    out[:, 6 + nt:] = U[:, nt:]
    return out


def _tau_batch(model: VesselModel, nu, alpha, n):
    """Total thruster force for a batch: nu (B,3), alpha/n (B,Nt) -> (B,3)."""
    lx, ly = model._lx, model._ly
    wp = nu[:, 0:1] - ly[None, :] * nu[:, 2:3]   # (B, Nt) flow x-component
    wq = nu[:, 1:2] + lx[None, :] * nu[:, 2:3]   # (B, Nt) flow y-component
    V2 = wp * wp + wq * wq
    ca, sa = np.cos(alpha), np.sin(alpha)
    prop = np.abs(n) * n
    fx = model._theta_p * ca * prop - model._theta_r * sa * V2 * alpha
    fy = model._theta_p * sa * prop + model._theta_r * ca * V2 * alpha
    tau = np.empty((nu.shape[0], 3))
    tau[:, 0] = fx.sum(axis=1)
    tau[:, 1] = fy.sum(axis=1)
    tau[:, 2] = (ly * fx + lx * fy).sum(axis=1)
    return tau


def dynamics_jacobians(model: VesselModel, X: np.ndarray, U: np.ndarray):
    """Analytic Jacobians of the dynamics: (B,d,d) wrt state, (B,d,m) wrt control."""
    X, U, single = _as_batch(X, U)
    B = X.shape[0]
    nt = model.n_thrusters
    d = model.state_dim

    psi = X[:, 2]
    nu = X[:, 3:6]
    alpha = X[:, 6:6 + nt]
    n = X[:, 6 + nt:6 + 2 * nt]
    u_, v_, r_ = nu[:, 0], nu[:, 1], nu[:, 2]

    A = np.zeros((B, d, d))
    Bu = np.zeros((B, d, 2 * nt))

    c, s = np.cos(psi), np.sin(psi)
    # d eta_dot / d psi and / d nu
    A[:, 0, 2] = -s * u_ - c * v_
    A[:, 1, 2] = c * u_ - s * v_
    A[:, 0, 3] = c
    A[:, 0, 4] = -s
    A[:, 1, 3] = s
    A[:, 1, 4] = c
    A[:, 2, 5] = 1.0

    # tau derivatives
    lx, ly = model._lx, model._ly
    wp = u_[:, None] - ly[None, :] * r_[:, None]
    wq = v_[:, None] + lx[None, :] * r_[:, None]
    V2 = wp * wp + wq * wq
    ca, sa = np.cos(alpha), np.sin(alpha)
    prop = np.abs(n) * n
    dprop = 2.0 * np.abs(n)

    # dV2/d(u,v,r): (B, Nt, 3)
    dV2 = np.empty((B, nt, 3))
    dV2[:, :, 0] = 2.0 * wp
    dV2[:, :, 1] = 2.0 * wq
    dV2[:, :, 2] = 2.0 * (-wp * ly[None, :] + wq * lx[None, :])

    tp, tr = model._theta_p, model._theta_r
    # per-thruster force components fx, fy and their partials
    dfx_da = -tp * sa * prop - tr * V2 * (ca * alpha + sa)
    dfy_da = tp * ca * prop + tr * V2 * (-sa * alpha + ca)
    dfx_dn = tp * ca * dprop
    dfy_dn = tp * sa * dprop
    dfx_dnu = -(tr * sa * alpha)[:, :, None] * dV2       # (B, Nt, 3)
    dfy_dnu = (tr * ca * alpha)[:, :, None] * dV2

    dtau_dnu = np.empty((B, 3, 3))
    dtau_dnu[:, 0] = dfx_dnu.sum(axis=1)
    dtau_dnu[:, 1] = dfy_dnu.sum(axis=1)
    dtau_dnu[:, 2] = (ly[None, :, None] * dfx_dnu + lx[None, :, None] * dfy_dnu).sum(axis=1)

    # Coriolis + damping derivatives
    m1, m2 = model.M[0], model.M[1]
    p1 = nu @ m1
    p2 = nu @ m2
    dcor = np.zeros((B, 3, 3))
    dcor[:, 0] = -r_[:, None] * m2[None, :]
    dcor[:, 0, 2] -= p2
    dcor[:, 1] = r_[:, None] * m1[None, :]
    dcor[:, 1, 2] += p1
    dcor[:, 2] = u_[:, None] * m2[None, :] - v_[:, None] * m1[None, :]
    dcor[:, 2, 0] += p2
    dcor[:, 2, 1] -= p1

    ddamp = np.broadcast_to(model.D_lin[None], (B, 3, 3)).copy()
    idx = np.arange(3)
    ddamp[:, idx, idx] += 2.0 * model.D_quad[None, :] * np.abs(nu)

    dnudot_dnu = np.einsum("ij,bjk->bik", model.M_inv, dtau_dnu - dcor - ddamp)
    A[:, 3:6, 3:6] = dnudot_dnu

    # d nu_dot / d alpha_j and / d n_j
    Minv = model.M_inv
    for j in range(nt):
        col_a = np.stack(
            [dfx_da[:, j], dfy_da[:, j], ly[j] * dfx_da[:, j] + lx[j] * dfy_da[:, j]], axis=1
        )
        col_n = np.stack(
            [dfx_dn[:, j], dfy_dn[:, j], ly[j] * dfx_dn[:, j] + lx[j] * dfy_dn[:, j]], axis=1
        )
        A[:, 3:6, 6 + j] = col_a @ Minv.T
        A[:, 3:6, 6 + nt + j] = col_n @ Minv.T

    # alpha_dot, n_dot rows: identity wrt control
    for j in range(2 * nt):
        Bu[:, 6 + j, j] = 1.0

    if single:
        return A[0], Bu[0]
    return A, Bu


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def rk4_step_batch(model: VesselModel, X, U, h: float, substeps: int) -> np.ndarray:
    """Classical RK4 over `substeps` equal intervals; no angle normalization."""
    X = np.array(X, dtype=float)
    hs = h / substeps
    for _ in range(substeps):
        k1 = _dynamics_batch(model, X, U)
        k2 = _dynamics_batch(model, X + 0.5 * hs * k1, U)
        k3 = _dynamics_batch(model, X + 0.5 * hs * k2, U)
        k4 = _dynamics_batch(model, X + hs * k3, U)
        X = X + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return X


def rk4_step_with_sensitivity(model: VesselModel, X, U, h, substeps: int):
    """RK4 map and its Jacobians wrt state, control and step length h.

    X (B,d), U (B,m), h scalar or (B,). Returns (X1, Phi, Psi, theta) with
    Phi (B,d,d) = dX1/dX, Psi (B,d,m) = dX1/dU, theta (B,d) = dX1/dh.
    """
    X = np.array(X, dtype=float)
    U = np.asarray(U, dtype=float)
    B, d = X.shape
    m = U.shape[1]
    h = np.broadcast_to(np.asarray(h, dtype=float), (B,)).astype(float)

    Phi = np.broadcast_to(np.eye(d)[None], (B, d, d)).copy()
    Psi = np.zeros((B, d, m))
    theta = np.zeros((B, d))
    hs = (h / substeps)[:, None]          # (B,1)
    hsm = hs[:, :, None]                  # (B,1,1)

    for _ in range(substeps):
        k1 = _dynamics_batch(model, X, U)
        A1, B1 = dynamics_jacobians(model, X, U)
        x2 = X + 0.5 * hs * k1
        k2 = _dynamics_batch(model, x2, U)
        A2, B2 = dynamics_jacobians(model, x2, U)
        x3 = X + 0.5 * hs * k2
        k3 = _dynamics_batch(model, x3, U)
        A3, B3 = dynamics_jacobians(model, x3, U)
        x4 = X + hs * k3
        k4 = _dynamics_batch(model, x4, U)
        A4, B4 = dynamics_jacobians(model, x4, U)

        K1 = A1 @ Phi
        K2 = A2 @ (Phi + 0.5 * hsm * K1)
        K3 = A3 @ (Phi + 0.5 * hsm * K2)
        K4 = A4 @ (Phi + hsm * K3)

        L1 = A1 @ Psi + B1
        L2 = A2 @ (Psi + 0.5 * hsm * L1) + B2
        L3 = A3 @ (Psi + 0.5 * hsm * L2) + B3
        L4 = A4 @ (Psi + hsm * L3) + B4

        t1 = np.einsum("bij,bj->bi", A1, theta)
        t2 = np.einsum("bij,bj->bi", A2, theta + 0.5 * k1 / substeps + 0.5 * hs * t1)
        t3 = np.einsum("bij,bj->bi", A3, theta + 0.5 * k2 / substeps + 0.5 * hs * t2)
        t4 = np.einsum("bij,bj->bi", A4, theta + k3 / substeps + hs * t3)

        ksum = k1 + 2.0 * k2 + 2.0 * k3 + k4
        X = X + (hs / 6.0) * ksum
        theta = theta + ksum / (6.0 * substeps) + (hs / 6.0) * (t1 + 2.0 * t2 + 2.0 * t3 + t4)
        Phi = Phi + (hsm / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
        Psi = Psi + (hsm / 6.0) * (L1 + 2.0 * L2 + 2.0 * L3 + L4)

    return X, Phi, Psi, theta


def integrate(model: VesselModel, x: VesselState, u: ControlInput, h: float,
              substeps: int = 4) -> VesselState:
    """Fixed-step RK4 integration over h seconds; psi renormalized at the end."""
    if h <= 0:
        raise ValueError("h must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    z = rk4_step_batch(model, x.to_vector()[None, :], u.to_vector()[None, :], h, substeps)[0]
    z[2] = wrap_angle(z[2])
    return VesselState.from_vector(z)


# ---------------------------------------------------------------------------
# feasible sets
# ---------------------------------------------------------------------------

_FEAS_RTOL = 1e-9


def state_feasible(model: VesselModel, x: VesselState) -> bool:
    """True iff planar speed and propeller speeds are within limits (closed set)."""
    if x.nu.speed > model.v_max * (1.0 + _FEAS_RTOL):
        return False
    for j, cfg in enumerate(model.thrusters):
        if abs(x.n[j]) > cfg.n_max * (1.0 + _FEAS_RTOL):
            return False
    return True


def control_feasible(model: VesselModel, u: ControlInput) -> bool:
    """True iff thruster-angle and propeller rates are within limits."""
    for j, cfg in enumerate(model.thrusters):
        if abs(u.alpha_dot[j]) > cfg.alpha_dot_max * (1.0 + _FEAS_RTOL):
            return False
        if abs(u.n_dot[j]) > cfg.n_dot_max * (1.0 + _FEAS_RTOL):
            return False
    return True


# ---------------------------------------------------------------------------
# polygon helpers (local to model validation; full versions live in geometry)
# ---------------------------------------------------------------------------

def _polygon_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _is_convex_ccw(verts: np.ndarray, tol: float = 1e-9) -> bool:
    e = np.roll(verts, -1, axis=0) - verts
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    return bool(np.all(cross >= -tol))


def _origin_inside(verts: np.ndarray) -> bool:
    e = np.roll(verts, -1, axis=0) - verts
    cross = e[:, 0] * (-verts[:, 1]) - e[:, 1] * (-verts[:, 0])
    return bool(np.all(cross > 0))


# ---------------------------------------------------------------------------
# model IO and the synthetic default
# ---------------------------------------------------------------------------

def model_to_dict(model: VesselModel) -> dict:
    return {
        "M": model.M.tolist(),
        "D_lin": model.D_lin.tolist(),
        "D_quad": model.D_quad.tolist(),
        "thrusters": [
            {
                "lx": c.lx, "ly": c.ly, "theta_p": c.theta_p, "theta_r": c.theta_r,
                "n_max": c.n_max, "n_dot_max": c.n_dot_max,
                "alpha_dot_max": c.alpha_dot_max,
            }
            for c in model.thrusters
        ],
        "footprint": model.footprint.tolist(),
        "v_max": model.v_max,
    }


def model_from_dict(doc: dict) -> VesselModel:
    return VesselModel(
        M=np.asarray(doc["M"], dtype=float),
        D_lin=np.asarray(doc["D_lin"], dtype=float),
        D_quad=np.asarray(doc["D_quad"], dtype=float),
        thrusters=tuple(
            ThrusterConfig(
                lx=t["lx"], ly=t["ly"], theta_p=t["theta_p"], theta_r=t["theta_r"],
                n_max=t["n_max"], n_dot_max=t["n_dot_max"],
                alpha_dot_max=t["alpha_dot_max"],
            )
            for t in doc["thrusters"]
        ),
        footprint=np.asarray(doc["footprint"], dtype=float),
        v_max=float(doc["v_max"]),
    )


def save_model(model: VesselModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2, sort_keys=True))


def load_model(path) -> VesselModel:
    return model_from_dict(json.loads(Path(path).read_text()))


KNOT = 1852.0 / 3600.0   # [m/s]


def default_model() -> VesselModel:
    """Synthetic twin-azimuth-thruster ship, 76 m x 20 m hull, 6 kn top speed.

    Inertia/damping are repo defaults (no published hull coefficients);
    damping is sized so drag at v_max is ~85% of combined peak thrust.
    """
    v_max = 6.0 * KNOT
    peak_thrust = 2.0 * 4.2e5 * 2.0 ** 2
    drag_at_vmax = 0.85 * peak_thrust
    d_lin_u = 0.5 * drag_at_vmax / v_max
    d_quad_u = 0.5 * drag_at_vmax / v_max ** 2
    thruster = dict(
        theta_p=4.2e5, theta_r=3.8e4, n_max=2.0, n_dot_max=0.08,
        alpha_dot_max=math.radians(7.2),
    )
    return VesselModel(
        M=np.diag([5.3e6, 8.3e6, 3.7e9]),
        D_lin=np.diag([d_lin_u, 1.0e6, 8.0e8]),
        D_quad=np.array([d_quad_u, 3.0e5, 1.0e9]),
        thrusters=(
            ThrusterConfig(lx=-32.0, ly=0.0, **thruster),
            ThrusterConfig(lx=32.0, ly=0.0, **thruster),
        ),
        footprint=np.array([
            [-38.0, -10.0], [26.0, -10.0], [38.0, -4.0],
            [38.0, 4.0], [26.0, 10.0], [-38.0, 10.0],
        ]),
        v_max=v_max,
    )
