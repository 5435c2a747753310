"""Particle sampling from occluded synthetic point clouds.

A z-buffer renderer turns simulator states into per-camera depth point
clouds (object particles splatted as spheres, finger capsules, optional
platform plane). The sampling pipeline then recovers a fixed-size, uniform
particle set: plane removal, normal estimation, an oriented-tangent-plane
signed distance field, interior sampling, a physics prior patching occluded
regions from the previous frame, tool-interior removal, voxel downsampling,
outlier rejection, and farthest point sampling.

All voxel and lattice stages anchor their grids at the data's own min
corner, so the pipeline commutes with rigid translations of its inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .errors import ContractError, EmptyCloudError, EmptyInteriorError
from .worldsim import SimConfig, SimState, ToolPose, finger_segments, tool_sdf

logger = logging.getLogger(__name__)

__all__ = [
    "Camera",
    "PointCloud",
    "RenderConfig",
    "SamplingConfig",
    "default_cameras",
    "render_depth",
    "remove_plane_ransac",
    "estimate_normals",
    "reconstruct_sdf",
    "sample_interior",
    "apply_physics_prior",
    "remove_tool_points",
    "voxel_downsample",
    "remove_outliers",
    "farthest_point_sample",
    "sample_particles",
]

TAG_OBJECT = 0
TAG_TOOL = 1
TAG_BACKGROUND = 2


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    fov_y: float = np.deg2rad(50.0)
    width: int = 160
    height: int = 120

    def basis(self):
        pos = np.asarray(self.position, dtype=np.float64)
        fwd = np.asarray(self.look_at, dtype=np.float64) - pos
        fwd /= np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        if abs(fwd @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return pos, np.stack([right, down, fwd])


@dataclass(frozen=True)
class RenderConfig:
    splat_radius: float = 0.0024
    noise_sigma: float = 0.0
    include_floor: bool = True
    tool_sample_spacing: float = 0.003


@dataclass
class PointCloud:
    points: np.ndarray  # [M, 3]
    normals: np.ndarray | None = None  # [M, 3] unit
    tags: np.ndarray | None = None  # [M] int8 class labels
    view_origins: np.ndarray | None = None  # [M, 3] camera position per point

    def __len__(self):
        return self.points.shape[0]

    def select(self, mask) -> "PointCloud":
        return PointCloud(
            points=self.points[mask],
            normals=None if self.normals is None else self.normals[mask],
            tags=None if self.tags is None else self.tags[mask],
            view_origins=None if self.view_origins is None else self.view_origins[mask],
        )


@dataclass(frozen=True)
class SamplingConfig:
    ransac_threshold: float = 0.002
    ransac_iterations: int = 500
    ransac_min_inliers: int = 100
    normal_k: int = 20
    tangent_neighbors: int = 8
    truncation: float = 0.01
    interior_pitch: float = 0.004
    voxel_size: float = 0.005
    outlier_k: int = 20
    outlier_ratio: float = 2.0
    n_particles: int = 300
    contact_threshold: float = 0.005

    def __post_init__(self):
        lengths = (
            self.ransac_threshold,
            self.truncation,
            self.interior_pitch,
            self.voxel_size,
            self.contact_threshold,
        )
        if any(v <= 0 for v in lengths) or self.n_particles < 8:
            raise ContractError(f"invalid sampling config: {self}")


def default_cameras(sim_config: SimConfig, n: int = 4) -> list[Camera]:
    """Cameras surrounding the workspace centre at ~35 degrees elevation."""
    half = sim_config.extent / 2
    target = (half, half, sim_config.floor_height + 0.015)
    cams = []
    for k in range(n):
        az = 2 * np.pi * (k + 0.5) / n
        pos = (
            half + 0.20 * np.cos(az),
            half + 0.20 * np.sin(az),
            sim_config.floor_height + 0.155,
        )
        cams.append(Camera(position=pos, look_at=target))
    return cams


# -- rendering ----------------------------------------------------------------


@njit(cache=True)
def _splat_spheres(centers, radius, cam_pos, rot, f, cx, cy, width, height, zbuf, tagbuf, tag):
    # exact ray-sphere depth per covered pixel; zbuf keeps the nearest hit
    n = centers.shape[0]
    for p in range(n):
        rel0 = centers[p, 0] - cam_pos[0]
        rel1 = centers[p, 1] - cam_pos[1]
        rel2 = centers[p, 2] - cam_pos[2]
        cz = rot[2, 0] * rel0 + rot[2, 1] * rel1 + rot[2, 2] * rel2
        if cz < 1e-4:
            continue
        cxm = rot[0, 0] * rel0 + rot[0, 1] * rel1 + rot[0, 2] * rel2
        cym = rot[1, 0] * rel0 + rot[1, 1] * rel1 + rot[1, 2] * rel2
        u = f * cxm / cz + cx
        v = f * cym / cz + cy
        pr = int(f * radius / cz) + 1
        u0 = max(int(u) - pr, 0)
        u1 = min(int(u) + pr + 1, width)
        v0 = max(int(v) - pr, 0)
        v1 = min(int(v) + pr + 1, height)
        c2 = rel0 * rel0 + rel1 * rel1 + rel2 * rel2
        for vi in range(v0, v1):
            for ui in range(u0, u1):
                dx = (ui + 0.5 - cx) / f
                dy = (vi + 0.5 - cy) / f
                d0 = rot[0, 0] * dx + rot[1, 0] * dy + rot[2, 0]
                d1 = rot[0, 1] * dx + rot[1, 1] * dy + rot[2, 1]
                d2 = rot[0, 2] * dx + rot[1, 2] * dy + rot[2, 2]
                dn = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                d0 /= dn
                d1 /= dn
                d2 /= dn
                proj = rel0 * d0 + rel1 * d1 + rel2 * d2
                if proj <= 0.0:
                    continue
                perp2 = c2 - proj * proj
                arg = radius * radius - perp2
                if arg < 0.0:
                    continue
                t = proj - np.sqrt(arg)
                if t > 0.0 and t < zbuf[vi, ui]:
                    zbuf[vi, ui] = t
                    tagbuf[vi, ui] = tag


def _capsule_surface_points(seg_a, seg_b, radius, spacing) -> np.ndarray:
    axis = seg_b - seg_a
    length = np.linalg.norm(axis)
    axis = axis / max(length, 1e-12)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(axis @ ref) > 0.99:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    n_circ = max(8, int(2 * np.pi * radius / spacing))
    n_axial = max(2, int(length / spacing) + 1)
    pts = []
    for t in np.linspace(0.0, 1.0, n_axial):
        c = seg_a + t * (seg_b - seg_a)
        for a in np.linspace(0, 2 * np.pi, n_circ, endpoint=False):
            pts.append(c + radius * (np.cos(a) * e1 + np.sin(a) * e2))
    for center, sign in ((seg_a, -1.0), (seg_b, 1.0)):
        for phi in np.linspace(0.15, np.pi / 2, 4):
            rr = radius * np.cos(phi)
            zz = radius * np.sin(phi) * sign
            n_c = max(4, int(2 * np.pi * rr / spacing))
            for a in np.linspace(0, 2 * np.pi, n_c, endpoint=False):
                pts.append(center + rr * (np.cos(a) * e1 + np.sin(a) * e2) + zz * axis)
    return np.asarray(pts)


def render_depth(
    state: SimState,
    cameras: list[Camera],
    sim_config: SimConfig,
    rng: np.random.Generator | None = None,
    render_config: RenderConfig = RenderConfig(),
) -> PointCloud:
    """Backprojected z-buffer sample of the scene from every camera."""
    rng = rng or np.random.default_rng(0)
    clouds = []
    tool_pts = None
    if state.tool is not None:
        segs = finger_segments(state.tool, sim_config)
        r = sim_config.finger_radius(state.tool.tool_id)
        tool_pts = np.vstack(
            [
                _capsule_surface_points(segs[k, 0], segs[k, 1], r, render_config.tool_sample_spacing)
                for k in range(2)
            ]
        )
    for cam in cameras:
        pos, rot = cam.basis()
        f = cam.height / (2 * np.tan(cam.fov_y / 2))
        cx, cy = cam.width / 2, cam.height / 2
        zbuf = np.full((cam.height, cam.width), np.inf)
        tagbuf = np.full((cam.height, cam.width), -1, dtype=np.int8)
        if render_config.include_floor:
            us, vs = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
            dirs = np.stack(
                [(us + 0.5 - cx) / f, (vs + 0.5 - cy) / f, np.ones_like(us, dtype=float)], axis=-1
            )
            dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
            world = dirs @ rot  # rows of rot are camera axes
            dz = world[..., 2]
            t = np.where(np.abs(dz) > 1e-9, (sim_config.floor_height - pos[2]) / dz, -1.0)
            hit = world * t[..., None] + pos
            inside = (
                (t > 0)
                & (hit[..., 0] >= 0)
                & (hit[..., 0] <= sim_config.extent)
                & (hit[..., 1] >= 0)
                & (hit[..., 1] <= sim_config.extent)
            )
            zbuf[inside] = t[inside]
            tagbuf[inside] = TAG_BACKGROUND
        _splat_spheres(
            state.positions,
            render_config.splat_radius,
            pos,
            rot,
            f,
            cx,
            cy,
            cam.width,
            cam.height,
            zbuf,
            tagbuf,
            TAG_OBJECT,
        )
        if tool_pts is not None:
            _splat_spheres(
                tool_pts,
                render_config.tool_sample_spacing * 0.9,
                pos,
                rot,
                f,
                cx,
                cy,
                cam.width,
                cam.height,
                zbuf,
                tagbuf,
                TAG_TOOL,
            )
        vi, ui = np.nonzero(np.isfinite(zbuf))
        if len(vi) == 0:
            continue
        depth = zbuf[vi, ui]
        if render_config.noise_sigma > 0:
            depth = depth + rng.normal(0.0, render_config.noise_sigma, size=depth.shape)
        dirs = np.stack(
            [(ui + 0.5 - cx) / f, (vi + 0.5 - cy) / f, np.ones_like(depth)], axis=-1
        )
        dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        pts = pos + (dirs @ rot) * depth[:, None]
        clouds.append(
            PointCloud(
                points=pts,
                tags=tagbuf[vi, ui].copy(),
                view_origins=np.broadcast_to(pos, pts.shape).copy(),
            )
        )
    if not clouds or not any((c.tags == TAG_OBJECT).any() for c in clouds):
        raise EmptyCloudError("no camera sees the object")
    return merge_clouds(clouds)


def merge_clouds(clouds: list[PointCloud]) -> PointCloud:
    return PointCloud(
        points=np.vstack([c.points for c in clouds]),
        tags=np.concatenate([c.tags for c in clouds]) if clouds[0].tags is not None else None,
        view_origins=(
            np.vstack([c.view_origins for c in clouds])
            if clouds[0].view_origins is not None
            else None
        ),
    )


# -- pipeline stages -------------------------------------------------------------


def remove_plane_ransac(
    cloud: PointCloud,
    threshold: float,
    iterations: int,
    rng: np.random.Generator,
    min_inliers: int = 100,
) -> PointCloud:
    """Drop the inliers of the plane with the largest support."""
    pts = cloud.points
    if len(pts) < 3:
        raise ContractError(f"plane removal needs >= 3 points, got {len(pts)}")
    best_count, best_mask = 0, None
    for _ in range(iterations):
        idx = rng.choice(len(pts), size=3, replace=False)
        a, b, c = pts[idx]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        dist = np.abs((pts - a) @ n)
        mask = dist < threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None or best_count < min_inliers:
        return cloud
    return cloud.select(~best_mask)


def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """Per-point normal from the k-NN covariance, oriented toward the camera."""
    pts = cloud.points
    if len(pts) < k + 1:
        raise ContractError(f"normal estimation needs > k={k} points, got {len(pts)}")
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    neigh = pts[idx]  # [M, k+1, 3]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered)
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()  # smallest-eigenvalue eigenvector
    degenerate = w[:, 1] < 1e-18
    if degenerate.any():
        logger.warning("estimate_normals: %d degenerate neighbourhoods", degenerate.sum())
        normals[degenerate] = (0.0, 0.0, 1.0)
    if cloud.view_origins is not None:
        flip = np.einsum("mi,mi->m", normals, cloud.view_origins - pts) < 0
    else:
        flip = normals[:, 2] < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(
        points=pts, normals=normals, tags=cloud.tags, view_origins=cloud.view_origins
    )


class TangentPlaneSdf:
    """Signed distance from oriented points: inverse-distance-weighted blend
    of the nearest tangent-plane offsets, clamped to +/- truncation."""

    def __init__(self, cloud: PointCloud, truncation: float, neighbors: int = 8):
        if len(cloud) == 0:
            raise ContractError("sdf reconstruction from an empty cloud")
        if cloud.normals is None:
            raise ContractError("sdf reconstruction needs oriented normals")
        self.points = cloud.points
        self.normals = cloud.normals
        self.truncation = truncation
        self.neighbors = min(neighbors, len(cloud))
        self._tree = cKDTree(self.points)

    def __call__(self, queries: np.ndarray) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        dist, idx = self._tree.query(queries, k=self.neighbors)
        if self.neighbors == 1:
            dist, idx = dist[:, None], idx[:, None]
        offsets = np.einsum(
            "qki,qki->qk", queries[:, None, :] - self.points[idx], self.normals[idx]
        )
        weights = 1.0 / (dist + 1e-9)
        sdf = (weights * offsets).sum(axis=1) / weights.sum(axis=1)
        return np.clip(sdf, -self.truncation, self.truncation)


def reconstruct_sdf(cloud: PointCloud, truncation: float, neighbors: int = 8) -> TangentPlaneSdf:
    return TangentPlaneSdf(cloud, truncation, neighbors)


def sample_interior(
    sdf,
    box: tuple[np.ndarray, np.ndarray],
    pitch: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Jittered-lattice points with sdf < 0 inside the box, grid anchored at
    the box's own min corner."""
    if pitch <= 0:
        raise ContractError("interior pitch must be positive")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    axes = [lo[k] + np.arange(pitch / 2, max(hi[k] - lo[k], pitch), pitch) for k in range(3)]
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    if rng is not None:
        lattice = lattice + rng.uniform(-0.25, 0.25, size=lattice.shape) * pitch
    inside = sdf(lattice) < 0
    if not inside.any():
        raise EmptyInteriorError("no lattice point falls inside the reconstructed surface")
    return lattice[inside]


def _voxel_keys(points: np.ndarray, voxel: float, anchor: np.ndarray) -> np.ndarray:
    return np.floor((points - anchor) / voxel).astype(np.int64)


def apply_physics_prior(
    current: np.ndarray,
    previous: np.ndarray | None,
    tool_pose: ToolPose | None,
    sim_config: SimConfig,
    contact_threshold: float,
    voxel: float,
) -> np.ndarray:
    """When the tool is away from the object, patch voxels that were occupied
    in the previous frame but are empty now with the previous frame's points."""
    if previous is None or len(previous) == 0:
        return current
    if tool_pose is not None:
        if tool_sdf(previous, tool_pose, sim_config).min() <= contact_threshold:
            return current
    anchor = np.minimum(current.min(axis=0), previous.min(axis=0))
    cur_keys = _voxel_keys(current, voxel, anchor)
    prev_keys = _voxel_keys(previous, voxel, anchor)
    occupied = {tuple(k) for k in cur_keys}
    missing = np.array([tuple(k) not in occupied for k in prev_keys])
    if not missing.any():
        return current
    return np.vstack([current, previous[missing]])


def remove_tool_points(
    particles: np.ndarray, tool_pose: ToolPose | None, sim_config: SimConfig
) -> np.ndarray:
    """Drop points strictly inside either finger capsule."""
    if tool_pose is None or len(particles) == 0:
        return particles
    return particles[tool_sdf(particles, tool_pose, sim_config) >= 0]


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One point per occupied voxel, at the centroid of its members."""
    if len(points) == 0:
        return points
    anchor = points.min(axis=0)
    keys = _voxel_keys(points, voxel, anchor)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, points)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    return sums / counts[:, None]


def remove_outliers(points: np.ndarray, k: int, std_ratio: float) -> np.ndarray:
    """Drop points whose mean k-NN distance exceeds mean + ratio * std."""
    if len(points) <= k + 1:
        logger.warning("remove_outliers: cloud of %d points smaller than k+1, unchanged", len(points))
        return points
    dist, _ = cKDTree(points).query(points, k=k + 1)
    mean_knn = dist[:, 1:].mean(axis=1)
    # relative slack keeps ulp-level rounding from evicting points of a
    # perfectly uniform cloud (std ~ 1e-16)
    cutoff = (mean_knn.mean() + std_ratio * mean_knn.std()) * (1 + 1e-12)
    return points[mean_knn <= cutoff]


def farthest_point_sample(points: np.ndarray, n: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min selection of n points starting at seed_index; output in
    selection order."""
    m = len(points)
    if m < n:
        raise ContractError(f"farthest point sampling needs >= {n} points, got {m}")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = seed_index
    dist = np.linalg.norm(points - points[seed_index], axis=1)
    for i in range(1, n):
        nxt = int(dist.argmax())
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return points[chosen]


def sample_particles(
    clouds: PointCloud | list[PointCloud],
    previous: np.ndarray | None,
    tool_pose: ToolPose | None,
    config: SamplingConfig,
    sim_config: SimConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Full pipeline from raw depth clouds to exactly N object particles."""
    rng = rng or np.random.default_rng(0)
    cloud = merge_clouds(clouds) if isinstance(clouds, list) else clouds
    if len(cloud) == 0:
        raise EmptyCloudError("sample_particles: empty input cloud")
    cloud = remove_plane_ransac(
        cloud, config.ransac_threshold, config.ransac_iterations, rng, config.ransac_min_inliers
    )
    if cloud.tags is not None:
        cloud = cloud.select(cloud.tags == TAG_OBJECT)
    if len(cloud) < config.normal_k + 1:
        raise EmptyCloudError(f"only {len(cloud)} object points after filtering")
    cloud = estimate_normals(cloud, config.normal_k)
    sdf = reconstruct_sdf(cloud, config.truncation, config.tangent_neighbors)
    pad = config.interior_pitch / 2
    box = (cloud.points.min(axis=0) - pad, cloud.points.max(axis=0) + pad)
    pts = sample_interior(sdf, box, config.interior_pitch, rng)
    pts = apply_physics_prior(
        pts, previous, tool_pose, sim_config, config.contact_threshold, config.voxel_size
    )
    pts = remove_tool_points(pts, tool_pose, sim_config)
    pts = voxel_downsample(pts, config.voxel_size)
    pts = remove_outliers(pts, config.outlier_k, config.outlier_ratio)
    if len(pts) < config.n_particles:
        raise EmptyCloudError(
            f"pipeline left {len(pts)} points, fewer than N={config.n_particles}"
        )
    return farthest_point_sample(pts, config.n_particles, seed_index=0)
