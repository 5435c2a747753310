"""Ground-truth elasto-plastic world: a minimal 3D MLS-MPM simulator.

Quadratic B-spline transfers with APIC affine velocity, fixed-corotated
elasticity, and von Mises plastic return mapping on the singular values of
the deformation gradient. Two kinematic capsule fingers act as grid boundary
conditions with Coulomb friction; an optional cylindrical fixation region
pins particles (a rod holding the object). States are explicit values and
steps are pure functions of (state, pose, config), so runs are deterministic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import ActionBoundsError, ConfigError, DomainError, EscapeError, NumericError

__all__ = [
    "SimConfig",
    "SimState",
    "ToolPose",
    "GripAction",
    "Cuboid",
    "Episode",
    "capsule_sdf",
    "finger_segments",
    "grip_trajectory",
    "clearance_separation",
    "sim_init",
    "sim_step",
    "run_grip",
    "run_episode",
]


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    grid_res: int = 64
    cell_size: float = 0.25 / 64
    dt: float = 1e-4
    substeps: int = 40
    particles_per_cell: int = 8
    particle_mass: float | None = None  # None: derived from 1000 kg/m^3
    youngs_modulus: float = 1e4
    poisson_ratio: float = 0.3
    yield_stress: float = 3e3
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.8)
    friction: float = 0.5
    margin_cells: int = 3
    damping: float = 0.0
    tool_radii: tuple[float, ...] = (0.008, 0.015)
    finger_half_length: float = 0.03
    finger_z_offset: float = 0.0275
    gripper_open: float = 0.11
    finger_overlap_tol: float = 0.002
    fixation: tuple[float, float, float] | None = None  # (x, y, radius)

    def __post_init__(self):
        if self.grid_res < 8 or self.cell_size <= 0 or self.dt <= 0 or self.substeps < 1:
            raise ConfigError(f"invalid grid/timestep: {self}")
        rho = self.resolved_particle_mass * self.particles_per_cell / self.cell_size**3
        cfl = 0.1 * self.cell_size / np.sqrt(self.youngs_modulus / rho)
        if self.dt > cfl * (1 + 1e-9):
            raise ConfigError(
                f"timestep {self.dt:g} violates CFL bound {cfl:g} "
                f"(cell {self.cell_size:g} m, E {self.youngs_modulus:g} Pa)"
            )

    @property
    def resolved_particle_mass(self) -> float:
        if self.particle_mass is not None:
            return self.particle_mass
        return 1000.0 * self.cell_size**3 / self.particles_per_cell

    @property
    def extent(self) -> float:
        return self.grid_res * self.cell_size

    @property
    def floor_height(self) -> float:
        return self.margin_cells * self.cell_size

    @property
    def frame_dt(self) -> float:
        return self.dt * self.substeps

    def finger_radius(self, tool_id: int) -> float:
        if not 0 <= tool_id < len(self.tool_radii):
            raise ConfigError(f"tool id {tool_id} outside configured set {self.tool_radii}")
        return self.tool_radii[tool_id]

    def min_separation(self, tool_id: int) -> float:
        return 2.0 * self.finger_radius(tool_id) - self.finger_overlap_tol

    def digest(self) -> str:
        payload = json.dumps(
            {k: getattr(self, k) for k in sorted(self.__dataclass_fields__)},
            sort_keys=True,
            default=str,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Cuboid:
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def bounds(self):
        c, s = np.asarray(self.center), np.asarray(self.size)
        return c - s / 2, c + s / 2

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds()
        return np.all((pts >= lo) & (pts <= hi), axis=1)


def default_object_shape(config: SimConfig, size=(0.06, 0.06, 0.025)) -> Cuboid:
    """Cuboid resting on the floor at the centre of the workspace."""
    half = config.extent / 2
    return Cuboid(
        center=(half, half, config.floor_height + size[2] / 2 + 1e-4), size=size
    )


# -- tool geometry ---------------------------------------------------------


@dataclass(frozen=True)
class ToolPose:
    """Gripper pose: both capsule fingers derive from one record."""

    center: tuple[float, float, float]
    r_z: float = 0.0
    r_x: float = 0.0
    r_y: float = 0.0
    separation: float = 0.11
    tool_id: int = 0

    def rotation(self) -> np.ndarray:
        cz, sz = np.cos(self.r_z), np.sin(self.r_z)
        cy, sy = np.cos(self.r_y), np.sin(self.r_y)
        cx, sx = np.cos(self.r_x), np.sin(self.r_x)
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1.0]])
        ry = np.array([[cy, 0, sy], [0, 1.0, 0], [-sy, 0, cy]])
        rx = np.array([[1.0, 0, 0], [0, cx, -sx], [0, sx, cx]])
        return rz @ ry @ rx

    def to_vector(self) -> np.ndarray:
        return np.array(
            [*self.center, self.r_z, self.r_x, self.r_y, self.separation, float(self.tool_id)]
        )

    @staticmethod
    def from_vector(vec: np.ndarray) -> "ToolPose":
        return ToolPose(
            center=(float(vec[0]), float(vec[1]), float(vec[2])),
            r_z=float(vec[3]),
            r_x=float(vec[4]),
            r_y=float(vec[5]),
            separation=float(vec[6]),
            tool_id=int(round(vec[7])),
        )


def finger_centers(pose: ToolPose, config: SimConfig) -> np.ndarray:
    """World positions of the two finger centres, shape [2, 3]."""
    rot = pose.rotation()
    out = np.empty((2, 3))
    for k, sign in enumerate((1.0, -1.0)):
        local = np.array([0.0, sign * pose.separation / 2, config.finger_z_offset])
        out[k] = np.asarray(pose.center) + rot @ local
    return out


def finger_segments(pose: ToolPose, config: SimConfig) -> np.ndarray:
    """Capsule axis endpoints for both fingers, shape [2, 2, 3]."""
    rot = pose.rotation()
    axis = rot @ np.array([0.0, 0.0, 1.0])
    centers = finger_centers(pose, config)
    segs = np.empty((2, 2, 3))
    for k in range(2):
        segs[k, 0] = centers[k] - config.finger_half_length * axis
        segs[k, 1] = centers[k] + config.finger_half_length * axis
    return segs


def capsule_sdf(points: np.ndarray, seg_a, seg_b, radius: float) -> np.ndarray:
    """Exact signed distance to a capsule: negative inside, 0 on the surface."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a = np.asarray(seg_a, dtype=np.float64)
    ab = np.asarray(seg_b, dtype=np.float64) - a
    denom = float(ab @ ab)
    if denom < 1e-30:
        t = np.zeros(len(points))
    else:
        t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1) - radius


def tool_sdf(points: np.ndarray, pose: ToolPose, config: SimConfig) -> np.ndarray:
    """Min signed distance to either finger of the gripper."""
    segs = finger_segments(pose, config)
    r = config.finger_radius(pose.tool_id)
    d0 = capsule_sdf(points, segs[0, 0], segs[0, 1], r)
    d1 = capsule_sdf(points, segs[1, 0], segs[1, 1], r)
    return np.minimum(d0, d1)


# -- actions and trajectories ------------------------------------------------


@dataclass(frozen=True)
class GripAction:
    """One parameterized pinch: grip centre, rotation, closing target, tool."""

    x: float
    y: float
    z: float
    r_z: float
    d: float
    tool_id: int = 0
    r_x: float = 0.0
    r_y: float = 0.0

    def pose(self, separation: float) -> ToolPose:
        return ToolPose(
            center=(self.x, self.y, self.z),
            r_z=self.r_z,
            r_x=self.r_x,
            r_y=self.r_y,
            separation=separation,
            tool_id=self.tool_id,
        )

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.r_z, self.r_x, self.r_y, self.d, float(self.tool_id)]
        )

    @staticmethod
    def from_vector(vec: np.ndarray) -> "GripAction":
        return GripAction(
            x=float(vec[0]),
            y=float(vec[1]),
            z=float(vec[2]),
            r_z=float(vec[3]),
            r_x=float(vec[4]),
            r_y=float(vec[5]),
            d=float(vec[6]),
            tool_id=int(round(vec[7])),
        )


@dataclass(frozen=True)
class ActionBounds:
    """Sampling box for grip actions, horizontal centre relative to the
    object centroid. ``z_offset`` spans relative to the centroid height."""

    xy_offset: float = 0.02
    z_offset: tuple[float, float] = (0.0, 0.0)
    r_z: tuple[float, float] = (0.0, np.pi)
    d: tuple[float, float] = (0.03, 0.08)
    r_x: tuple[float, float] = (0.0, 0.0)
    r_y: tuple[float, float] = (0.0, 0.0)
    tools: tuple[int, ...] = (0,)

    def d_low(self, tool_id: int, config: SimConfig) -> float:
        return max(self.d[0], config.min_separation(tool_id))

    def box(self, centroid: np.ndarray, tool_id: int, config: SimConfig):
        """Absolute (lo, hi) arrays over [x, y, z, r_z, d, r_x, r_y]."""
        lo = np.array(
            [
                centroid[0] - self.xy_offset,
                centroid[1] - self.xy_offset,
                centroid[2] + self.z_offset[0],
                self.r_z[0],
                self.d_low(tool_id, config),
                self.r_x[0],
                self.r_y[0],
            ]
        )
        hi = np.array(
            [
                centroid[0] + self.xy_offset,
                centroid[1] + self.xy_offset,
                centroid[2] + self.z_offset[1],
                self.r_z[1],
                self.d[1],
                self.r_x[1],
                self.r_y[1],
            ]
        )
        return lo, hi


def sample_action(
    bounds: ActionBounds,
    centroid: np.ndarray,
    config: SimConfig,
    rng: np.random.Generator,
) -> GripAction:
    """Uniform draw from the action box around the current centroid."""
    tool_id = int(rng.choice(bounds.tools))
    lo, hi = bounds.box(centroid, tool_id, config)
    vals = rng.uniform(lo, hi)
    return GripAction(
        x=vals[0],
        y=vals[1],
        z=vals[2],
        r_z=vals[3],
        d=vals[4],
        r_x=vals[5],
        r_y=vals[6],
        tool_id=tool_id,
    )


def separation_schedule(open_width: float, d: float, frames: int) -> np.ndarray:
    """Finger separations per frame: linear close from open to d, d exact at
    the final frame. d >= open_width keeps the fingers parked open."""
    if frames < 2:
        raise ActionBoundsError(f"grip needs >= 2 frames, got {frames}")
    target = min(d, open_width)
    return np.linspace(open_width, target, frames)


def grip_trajectory(
    action: GripAction, config: SimConfig, frames: int, open_width: float | None = None
) -> list[ToolPose]:
    """Tool poses over one pinch at constant closing speed."""
    open_w = config.gripper_open if open_width is None else open_width
    if action.d < config.min_separation(action.tool_id):
        raise ActionBoundsError(
            f"grip depth d={action.d:g} below minimum feasible separation "
            f"{config.min_separation(action.tool_id):g} for tool {action.tool_id}"
        )
    return [action.pose(s) for s in separation_schedule(open_w, action.d, frames)]


def clearance_separation(points: np.ndarray, action: GripAction, config: SimConfig) -> float:
    """Smallest opening that keeps both fingers clear of the given particles.

    Used when repositioning the gripper between grips so the teleported
    fingers never spawn inside material.
    """
    rot = ToolPose(center=(0, 0, 0), r_z=action.r_z, r_x=action.r_x, r_y=action.r_y).rotation()
    rel = np.atleast_2d(points) - np.array([action.x, action.y, action.z])
    along = rel @ (rot @ np.array([0.0, 1.0, 0.0]))
    perp = rel @ (rot @ np.array([1.0, 0.0, 0.0]))
    axial = rel @ (rot @ np.array([0.0, 0.0, 1.0])) - config.finger_z_offset
    r = config.finger_radius(action.tool_id)
    margin = 0.004
    near = (np.abs(perp) < r + margin) & (
        np.abs(axial) < config.finger_half_length + r + margin
    )
    if not near.any():
        return config.gripper_open
    reach = np.abs(along[near]).max()
    return max(config.gripper_open, 2.0 * (reach + r + margin))


# -- state -------------------------------------------------------------------


@dataclass
class SimState:
    positions: np.ndarray  # [N, 3]
    velocities: np.ndarray  # [N, 3]
    affine: np.ndarray  # [N, 3, 3] APIC velocity gradient
    deformation: np.ndarray  # [N, 3, 3]
    pinned: np.ndarray  # [N] bool, fixation region
    tool: ToolPose | None = None

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "SimState":
        return SimState(
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            affine=self.affine.copy(),
            deformation=self.deformation.copy(),
            pinned=self.pinned.copy(),
            tool=self.tool,
        )


def sim_init(
    config: SimConfig,
    shape: Cuboid | None = None,
    rng: np.random.Generator | None = None,
    settle_frames: int = 0,
) -> SimState:
    """Fill a shape with a jittered particle lattice at the configured density."""
    rng = rng or np.random.default_rng(0)
    shape = shape or default_object_shape(config)
    lo, hi = shape.bounds()
    if np.any(hi - lo <= 0):
        raise DomainError(f"zero-volume shape: bounds {lo} .. {hi}")
    margin = config.margin_cells * config.cell_size
    if np.any(lo < margin) or np.any(hi > config.extent - margin):
        raise DomainError(
            f"shape {lo}..{hi} outside workspace margin [{margin:g}, {config.extent - margin:g}]"
        )
    spacing = config.cell_size / round(config.particles_per_cell ** (1 / 3))
    # stretched lattice: tiles the bbox exactly so the count tracks volume*density
    axes = []
    for k in range(3):
        n_k = max(1, round((hi[k] - lo[k]) / spacing))
        axes.append(lo[k] + (np.arange(n_k) + 0.5) * (hi[k] - lo[k]) / n_k)
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = grid[shape.contains(grid)]
    if len(pts) == 0:
        raise DomainError("shape produced no particles at this resolution")
    pts = pts + rng.uniform(-0.2, 0.2, size=pts.shape) * spacing
    n = len(pts)
    pinned = np.zeros(n, dtype=bool)
    if config.fixation is not None:
        fx, fy, fr = config.fixation
        pinned = (pts[:, 0] - fx) ** 2 + (pts[:, 1] - fy) ** 2 < fr**2
    state = SimState(
        positions=pts,
        velocities=np.zeros((n, 3)),
        affine=np.zeros((n, 3, 3)),
        deformation=np.tile(np.eye(3), (n, 1, 1)),
        pinned=pinned,
    )
    for _ in range(settle_frames):
        pose = state.tool
        sim_step(state, pose, config)
    if settle_frames:
        state.velocities[:] = 0.0
        state.affine[:] = 0.0
    return state


# -- MPM kernel ----------------------------------------------------------------


@njit(cache=True)
def _svd3(F, U, sig, V):
    # Jacobi eigen-decomposition of F^T F, then U = F V / sig. Assumes
    # det F > 0 (maintained by the plastic return mapping).
    A = F.T @ F
    Vw = np.eye(3)
    for _ in range(24):
        m01 = abs(A[0, 1])
        m02 = abs(A[0, 2])
        m12 = abs(A[1, 2])
        if m01 >= m02 and m01 >= m12:
            p, q, off = 0, 1, m01
        elif m02 >= m12:
            p, q, off = 0, 2, m02
        else:
            p, q, off = 1, 2, m12
        if off < 1e-14 * (abs(A[0, 0]) + abs(A[1, 1]) + abs(A[2, 2]) + 1e-300):
            break
        apq = A[p, q]
        theta = 0.5 * (A[q, q] - A[p, p]) / apq
        t = 1.0 if theta == 0.0 else np.sign(theta) / (abs(theta) + np.sqrt(1.0 + theta * theta))
        c = 1.0 / np.sqrt(1.0 + t * t)
        s = t * c
        for k in range(3):
            akp = A[k, p]
            akq = A[k, q]
            A[k, p] = c * akp - s * akq
            A[k, q] = s * akp + c * akq
        for k in range(3):
            apk = A[p, k]
            aqk = A[q, k]
            A[p, k] = c * apk - s * aqk
            A[q, k] = s * apk + c * aqk
            vpk = Vw[k, p]
            vqk = Vw[k, q]
            Vw[k, p] = c * vpk - s * vqk
            Vw[k, q] = s * vpk + c * vqk
    for i in range(3):
        sig[i] = np.sqrt(max(A[i, i], 1e-30))
        for j in range(3):
            V[i, j] = Vw[i, j]
    B = F @ V
    for j in range(3):
        nrm = np.sqrt(B[0, j] ** 2 + B[1, j] ** 2 + B[2, j] ** 2)
        if nrm > 1e-20:
            for i in range(3):
                U[i, j] = B[i, j] / nrm
        else:
            for i in range(3):
                U[i, j] = 1.0 if i == j else 0.0


@njit(cache=True)
def _quad_weights(fx, w):
    w[0] = 0.5 * (1.5 - fx) ** 2
    w[1] = 0.75 - (fx - 1.0) ** 2
    w[2] = 0.5 * (fx - 0.5) ** 2


@njit(cache=True)
def _capsule_project(pos, vel, seg, radius, fvel, friction):
    # Kinematic capsule boundary: inside the SDF, project the node velocity
    # to the finger velocity plus Coulomb-friction-limited slip.
    ab0 = seg[1, 0] - seg[0, 0]
    ab1 = seg[1, 1] - seg[0, 1]
    ab2 = seg[1, 2] - seg[0, 2]
    ap0 = pos[0] - seg[0, 0]
    ap1 = pos[1] - seg[0, 1]
    ap2 = pos[2] - seg[0, 2]
    denom = ab0 * ab0 + ab1 * ab1 + ab2 * ab2
    t = 0.0
    if denom > 1e-30:
        t = (ap0 * ab0 + ap1 * ab1 + ap2 * ab2) / denom
        t = min(max(t, 0.0), 1.0)
    c0 = seg[0, 0] + t * ab0
    c1 = seg[0, 1] + t * ab1
    c2 = seg[0, 2] + t * ab2
    d0 = pos[0] - c0
    d1 = pos[1] - c1
    d2 = pos[2] - c2
    dist = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if dist - radius >= 0.0:
        return False
    if dist < 1e-12:
        vel[0] = fvel[0]
        vel[1] = fvel[1]
        vel[2] = fvel[2]
        return True
    n0 = d0 / dist
    n1 = d1 / dist
    n2 = d2 / dist
    r0 = vel[0] - fvel[0]
    r1 = vel[1] - fvel[1]
    r2 = vel[2] - fvel[2]
    vn = r0 * n0 + r1 * n1 + r2 * n2
    if vn >= 0.0:
        return False
    t0 = r0 - vn * n0
    t1 = r1 - vn * n1
    t2 = r2 - vn * n2
    tn = np.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
    scale = 0.0
    if tn > 1e-12:
        scale = max(0.0, 1.0 - friction * (-vn) / tn)
    vel[0] = fvel[0] + scale * t0
    vel[1] = fvel[1] + scale * t1
    vel[2] = fvel[2] + scale * t2
    return True


@njit(cache=True)
def _substep(
    x,
    v,
    C,
    F,
    pinned,
    grid_v,
    grid_m,
    n_grid,
    dx,
    dt,
    mu,
    lam,
    yield_stress,
    p_mass,
    p_vol,
    gravity,
    friction,
    margin,
    damping,
    segs,
    radii,
    fvel,
    n_fingers,
):
    inv_dx = 1.0 / dx
    grid_v[:] = 0.0
    grid_m[:] = 0.0
    n = x.shape[0]
    U = np.empty((3, 3))
    sig = np.empty(3)
    V = np.empty((3, 3))
    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    # particle to grid
    for p in range(n):
        bx = int(x[p, 0] * inv_dx - 0.5)
        by = int(x[p, 1] * inv_dx - 0.5)
        bz = int(x[p, 2] * inv_dx - 0.5)
        if bx < 0 or by < 0 or bz < 0 or bx + 2 >= n_grid or by + 2 >= n_grid or bz + 2 >= n_grid:
            return p
        fx = x[p, 0] * inv_dx - bx
        fy = x[p, 1] * inv_dx - by
        fz = x[p, 2] * inv_dx - bz
        _quad_weights(fx, wx)
        _quad_weights(fy, wy)
        _quad_weights(fz, wz)
        Fp = (np.eye(3) + dt * C[p]) @ F[p]
        _svd3(Fp, U, sig, V)
        e0 = np.log(sig[0])
        e1 = np.log(sig[1])
        e2 = np.log(sig[2])
        tr = (e0 + e1 + e2) / 3.0
        h0 = e0 - tr
        h1 = e1 - tr
        h2 = e2 - tr
        hn = np.sqrt(h0 * h0 + h1 * h1 + h2 * h2)
        dgamma = hn - yield_stress / (2.0 * mu)
        if dgamma > 0.0 and hn > 1e-12:
            f = dgamma / hn
            sig[0] = np.exp(e0 - f * h0)
            sig[1] = np.exp(e1 - f * h1)
            sig[2] = np.exp(e2 - f * h2)
            S = np.zeros((3, 3))
            S[0, 0] = sig[0]
            S[1, 1] = sig[1]
            S[2, 2] = sig[2]
            Fp = U @ S @ V.T
        F[p] = Fp
        J = sig[0] * sig[1] * sig[2]
        R = U @ V.T
        stress = 2.0 * mu * (Fp - R) @ Fp.T
        ljj = lam * J * (J - 1.0)
        stress[0, 0] += ljj
        stress[1, 1] += ljj
        stress[2, 2] += ljj
        coef = -dt * p_vol * 4.0 * inv_dx * inv_dx
        aff = coef * stress + p_mass * C[p]
        pv0 = p_mass * v[p, 0]
        pv1 = p_mass * v[p, 1]
        pv2 = p_mass * v[p, 2]
        for i in range(3):
            for j in range(3):
                wij = wx[i] * wy[j]
                for k in range(3):
                    w = wij * wz[k]
                    dp0 = (i - fx) * dx
                    dp1 = (j - fy) * dx
                    dp2 = (k - fz) * dx
                    gi = bx + i
                    gj = by + j
                    gk = bz + k
                    grid_v[gi, gj, gk, 0] += w * (pv0 + aff[0, 0] * dp0 + aff[0, 1] * dp1 + aff[0, 2] * dp2)
                    grid_v[gi, gj, gk, 1] += w * (pv1 + aff[1, 0] * dp0 + aff[1, 1] * dp1 + aff[1, 2] * dp2)
                    grid_v[gi, gj, gk, 2] += w * (pv2 + aff[2, 0] * dp0 + aff[2, 1] * dp1 + aff[2, 2] * dp2)
                    grid_m[gi, gj, gk] += w * p_mass
    # grid update: momentum -> velocity, gravity, boundaries, tool collision
    pos = np.empty(3)
    damp = 1.0 / (1.0 + damping * dt)
    for gi in range(n_grid):
        for gj in range(n_grid):
            for gk in range(n_grid):
                m = grid_m[gi, gj, gk]
                if m <= 0.0:
                    continue
                vel = grid_v[gi, gj, gk]
                vel[0] = vel[0] / m * damp
                vel[1] = vel[1] / m * damp
                vel[2] = vel[2] / m * damp
                vel[0] += gravity[0] * dt
                vel[1] += gravity[1] * dt
                vel[2] += gravity[2] * dt
                if n_fingers > 0:
                    pos[0] = gi * dx
                    pos[1] = gj * dx
                    pos[2] = gk * dx
                    for fi in range(n_fingers):
                        _capsule_project(pos, vel, segs[fi], radii[fi], fvel[fi], friction)
                # floor with Coulomb friction, walls/ceiling zero inward normal
                if gk <= margin and vel[2] < 0.0:
                    tn = np.sqrt(vel[0] * vel[0] + vel[1] * vel[1])
                    scale = 0.0
                    if tn > 1e-12:
                        scale = max(0.0, 1.0 - friction * (-vel[2]) / tn)
                    vel[0] *= scale
                    vel[1] *= scale
                    vel[2] = 0.0
                if gk >= n_grid - margin - 1 and vel[2] > 0.0:
                    vel[2] = 0.0
                if gi <= margin and vel[0] < 0.0:
                    vel[0] = 0.0
                if gi >= n_grid - margin - 1 and vel[0] > 0.0:
                    vel[0] = 0.0
                if gj <= margin and vel[1] < 0.0:
                    vel[1] = 0.0
                if gj >= n_grid - margin - 1 and vel[1] > 0.0:
                    vel[1] = 0.0
    # grid to particle
    for p in range(n):
        if pinned[p]:
            v[p, 0] = 0.0
            v[p, 1] = 0.0
            v[p, 2] = 0.0
            for i in range(3):
                for j in range(3):
                    C[p, i, j] = 0.0
            continue
        bx = int(x[p, 0] * inv_dx - 0.5)
        by = int(x[p, 1] * inv_dx - 0.5)
        bz = int(x[p, 2] * inv_dx - 0.5)
        fx = x[p, 0] * inv_dx - bx
        fy = x[p, 1] * inv_dx - by
        fz = x[p, 2] * inv_dx - bz
        _quad_weights(fx, wx)
        _quad_weights(fy, wy)
        _quad_weights(fz, wz)
        nv0 = 0.0
        nv1 = 0.0
        nv2 = 0.0
        c00 = 0.0
        c01 = 0.0
        c02 = 0.0
        c10 = 0.0
        c11 = 0.0
        c12 = 0.0
        c20 = 0.0
        c21 = 0.0
        c22 = 0.0
        for i in range(3):
            for j in range(3):
                wij = wx[i] * wy[j]
                for k in range(3):
                    w = wij * wz[k]
                    gv = grid_v[bx + i, by + j, bz + k]
                    nv0 += w * gv[0]
                    nv1 += w * gv[1]
                    nv2 += w * gv[2]
                    cw = 4.0 * inv_dx * w
                    dp0 = i - fx
                    dp1 = j - fy
                    dp2 = k - fz
                    c00 += cw * gv[0] * dp0
                    c01 += cw * gv[0] * dp1
                    c02 += cw * gv[0] * dp2
                    c10 += cw * gv[1] * dp0
                    c11 += cw * gv[1] * dp1
                    c12 += cw * gv[1] * dp2
                    c20 += cw * gv[2] * dp0
                    c21 += cw * gv[2] * dp1
                    c22 += cw * gv[2] * dp2
        v[p, 0] = nv0
        v[p, 1] = nv1
        v[p, 2] = nv2
        C[p, 0, 0] = c00
        C[p, 0, 1] = c01
        C[p, 0, 2] = c02
        C[p, 1, 0] = c10
        C[p, 1, 1] = c11
        C[p, 1, 2] = c12
        C[p, 2, 0] = c20
        C[p, 2, 1] = c21
        C[p, 2, 2] = c22
        x[p, 0] += dt * nv0
        x[p, 1] += dt * nv1
        x[p, 2] += dt * nv2
    return -1


class _GridScratch:
    """Per-config grid buffers reused across substeps of one episode."""

    def __init__(self, config: SimConfig):
        self.v = np.zeros((config.grid_res, config.grid_res, config.grid_res, 3))
        self.m = np.zeros((config.grid_res, config.grid_res, config.grid_res))


def sim_step(
    state: SimState,
    next_pose: ToolPose | None,
    config: SimConfig,
    scratch: _GridScratch | None = None,
) -> SimState:
    """Advance one frame (``config.substeps`` MPM substeps) in place.

    The tool moves linearly from ``state.tool`` to ``next_pose`` over the
    frame; its velocity enters the grid collision as a rigid velocity.
    """
    scratch = scratch or _GridScratch(config)
    lame_mu = config.youngs_modulus / (2 * (1 + config.poisson_ratio))
    lame_lambda = (
        config.youngs_modulus
        * config.poisson_ratio
        / ((1 + config.poisson_ratio) * (1 - 2 * config.poisson_ratio))
    )
    p_vol = config.cell_size**3 / config.particles_per_cell
    gravity = np.asarray(config.gravity, dtype=np.float64)

    prev_pose = state.tool if state.tool is not None else next_pose
    n_fingers = 0
    segs = np.zeros((2, 2, 3))
    radii = np.zeros(2)
    fvel = np.zeros((2, 3))
    if next_pose is not None:
        n_fingers = 2
        radii[:] = config.finger_radius(next_pose.tool_id)
        c_prev = finger_centers(prev_pose, config)
        c_next = finger_centers(next_pose, config)
        fvel[:] = (c_next - c_prev) / config.frame_dt

    for s in range(config.substeps):
        if next_pose is not None:
            alpha = (s + 1) / config.substeps
            pose_s = replace(
                next_pose,
                center=tuple(
                    (1 - alpha) * np.asarray(prev_pose.center)
                    + alpha * np.asarray(next_pose.center)
                ),
                separation=(1 - alpha) * prev_pose.separation + alpha * next_pose.separation,
            )
            segs[:] = finger_segments(pose_s, config)
        escaped = _substep(
            state.positions,
            state.velocities,
            state.affine,
            state.deformation,
            state.pinned,
            scratch.v,
            scratch.m,
            config.grid_res,
            config.cell_size,
            config.dt,
            lame_mu,
            lame_lambda,
            config.yield_stress,
            config.resolved_particle_mass,
            p_vol,
            gravity,
            config.friction,
            config.margin_cells,
            config.damping,
            segs,
            radii,
            fvel,
            n_fingers,
        )
        if escaped >= 0:
            raise EscapeError(f"particle {escaped} left the grid")
    if not np.isfinite(state.positions).all() or not np.isfinite(state.velocities).all():
        raise NumericError("non-finite state after frame")
    state.tool = next_pose
    return state


# -- episodes -----------------------------------------------------------------


@dataclass
class Episode:
    """Recorded frames of one multi-grip interaction."""

    positions: np.ndarray  # [frames, N, 3] object particles
    tool_poses: np.ndarray  # [frames, 8] ToolPose vectors
    actions: np.ndarray  # [grips, 8] GripAction vectors
    frames_per_grip: int
    initial_positions: np.ndarray  # [N, 3]
    seed: int
    config_digest: str

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_grips(self) -> int:
        return self.actions.shape[0]

    def grip_slice(self, g: int) -> slice:
        return slice(g * self.frames_per_grip, (g + 1) * self.frames_per_grip)


def run_grip(
    state: SimState,
    action: GripAction,
    frames: int,
    config: SimConfig,
    scratch: _GridScratch | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Execute one pinch from the current state, mutating it.

    The gripper teleports to an opening wide enough to clear the material,
    closes at constant speed, then withdraws. Returns per-frame particle
    positions [frames, N, 3] and tool pose vectors [frames, 8].
    """
    open_w = clearance_separation(state.positions, action, config)
    traj = grip_trajectory(action, config, frames, open_width=open_w)
    scratch = scratch or _GridScratch(config)
    state.tool = traj[0]  # reposition between grips; no frames recorded
    frames_out = np.empty((frames, state.count, 3))
    poses_out = np.empty((frames, 8))
    for i, pose in enumerate(traj):
        sim_step(state, pose, config, scratch)
        frames_out[i] = state.positions
        poses_out[i] = pose.to_vector()
    state.tool = None  # withdraw
    return frames_out, poses_out


def run_episode(
    config: SimConfig,
    actions: list[GripAction],
    frames_per_grip: int,
    rng: np.random.Generator | None = None,
    shape: Cuboid | None = None,
    initial_state: SimState | None = None,
    seed: int = 0,
) -> Episode:
    """Reset and run a sequence of grips, recording every frame."""
    if not actions:
        raise ActionBoundsError("episode needs at least one grip action")
    if initial_state is not None:
        state = initial_state.copy()
    else:
        state = sim_init(config, shape, rng or np.random.default_rng(seed))
    scratch = _GridScratch(config)
    initial = state.positions.copy()
    all_frames, all_poses = [], []
    for action in actions:
        f, p = run_grip(state, action, frames_per_grip, config, scratch)
        all_frames.append(f)
        all_poses.append(p)
    return Episode(
        positions=np.concatenate(all_frames, axis=0),
        tool_poses=np.concatenate(all_poses, axis=0),
        actions=np.stack([a.to_vector() for a in actions]),
        frames_per_grip=frames_per_grip,
        initial_positions=initial,
        seed=seed,
        config_digest=config.digest(),
    )
