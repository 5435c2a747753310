"""Radius-graph construction and the graph-network dynamics model.

Vertices are object particles plus fixed surface samples of the two finger
capsules; edges connect all pairs within a proximity threshold (object pairs
in both directions, tool to object one way). Node features are finite
difference velocities plus a class one-hot, edge features the receiver minus
sender displacement, its norm, and a relation one-hot; absolute positions
never enter the network. Five learnable blocks: node/edge encoders, a
one-layer propagator applied over several message-passing steps, and
edge/node decoders producing a per-particle displacement.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial import cKDTree

from . import tensor
from .errors import ContractError
from .tensor import Tape, Value, affine, concat_cols, concat_rows, gather_cols, relu, scatter_sum
from .worldsim import SimConfig, ToolPose

__all__ = [
    "GraphConfig",
    "ArchSpec",
    "ModelParams",
    "NormStats",
    "DynamicsModel",
    "Graph",
    "tool_surface_points",
    "build_graph",
    "init_params",
    "param_count",
    "flatten_params",
    "unflatten_params",
    "gnn_forward",
    "gnn_rollout",
    "save_checkpoint",
    "load_checkpoint",
]

N_CLASSES = 2  # object, tool
N_EDGE_TYPES = 2  # internal, gripper-to-object
CLS_OBJECT = 0
CLS_TOOL = 1


@dataclass(frozen=True)
class GraphConfig:
    proximity: float = 0.0125  # 0.05 in workspace units of a 0.25 m domain
    history: int = 2  # frames per velocity window (h=2: one velocity)
    prop_steps: int = 3
    tool_vertices: int = 32  # surface samples per finger
    frame_dt: float = 0.004

    def __post_init__(self):
        if self.proximity <= 0 or self.history < 2 or self.prop_steps < 1:
            raise ContractError(f"invalid graph config: {self}")


@dataclass(frozen=True)
class ArchSpec:
    latent: int = 150
    node_features: int = 3 + N_CLASSES
    edge_features: int = 3 + 1 + N_EDGE_TYPES

    def layer_shapes(self) -> dict[str, list[tuple[int, int]]]:
        lat = self.latent
        return {
            "node_enc": [(lat, self.node_features), (lat, lat), (lat, lat)],
            "edge_enc": [(lat, 2 * self.node_features + self.edge_features), (lat, lat), (lat, lat)],
            "propagator": [(lat, 2 * lat)],
            "edge_dec": [(lat, lat), (lat, lat), (lat, lat)],
            "node_dec": [(lat, 2 * lat), (lat, lat), (3, lat)],
        }


@dataclass
class ModelParams:
    """Weights of the five sub-networks, each a list of (W, b) layers."""

    node_enc: list
    edge_enc: list
    propagator: list
    edge_dec: list
    node_dec: list

    def blocks(self):
        for name in ("node_enc", "edge_enc", "propagator", "edge_dec", "node_dec"):
            yield name, getattr(self, name)


@dataclass
class NormStats:
    """Dataset statistics used to standardize features and targets."""

    vel_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    vel_std: np.ndarray = field(default_factory=lambda: np.ones(3))
    disp_std: np.ndarray = field(default_factory=lambda: np.ones(3))
    norm_scale: float = 1.0
    dx_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dx_std: np.ndarray = field(default_factory=lambda: np.ones(3))

    def to_dict(self) -> dict:
        return {
            "vel_mean": self.vel_mean.tolist(),
            "vel_std": self.vel_std.tolist(),
            "disp_std": self.disp_std.tolist(),
            "norm_scale": self.norm_scale,
            "dx_mean": self.dx_mean.tolist(),
            "dx_std": self.dx_std.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "NormStats":
        return NormStats(
            vel_mean=np.asarray(d["vel_mean"], dtype=float),
            vel_std=np.asarray(d["vel_std"], dtype=float),
            disp_std=np.asarray(d["disp_std"], dtype=float),
            norm_scale=float(d["norm_scale"]),
            dx_mean=np.asarray(d["dx_mean"], dtype=float),
            dx_std=np.asarray(d["dx_std"], dtype=float),
        )


@dataclass
class DynamicsModel:
    arch: ArchSpec
    graph_config: GraphConfig
    params: ModelParams
    stats: NormStats


@dataclass
class Graph:
    """Numeric graph for one frame: topology plus per-vertex kinematics."""

    n_obj: int
    positions: np.ndarray  # [V, 3], object rows first
    velocities: np.ndarray  # [V, 3]
    receivers: np.ndarray  # [E]
    senders: np.ndarray  # [E]
    edge_types: np.ndarray  # [E] 0 internal, 1 tool->object

    @property
    def n_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def n_edges(self) -> int:
        return self.receivers.shape[0]


# -- parameters ----------------------------------------------------------------


def init_params(arch: ArchSpec, rng: np.random.Generator) -> ModelParams:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero biases."""
    blocks = {}
    for name, shapes in arch.layer_shapes().items():
        layers = []
        for out_dim, in_dim in shapes:
            bound = np.sqrt(1.0 / in_dim)
            layers.append(
                (rng.uniform(-bound, bound, size=(out_dim, in_dim)), np.zeros(out_dim))
            )
        blocks[name] = layers
    return ModelParams(**blocks)


def zero_params(arch: ArchSpec) -> ModelParams:
    blocks = {
        name: [(np.zeros((o, i)), np.zeros(o)) for o, i in shapes]
        for name, shapes in arch.layer_shapes().items()
    }
    return ModelParams(**blocks)


def param_count(arch: ArchSpec) -> int:
    return sum(o * i + o for shapes in arch.layer_shapes().values() for o, i in shapes)


def flatten_params(params: ModelParams) -> np.ndarray:
    chunks = []
    for _, layers in params.blocks():
        for w, b in layers:
            chunks.append(w.ravel())
            chunks.append(b.ravel())
    return np.concatenate(chunks)


def unflatten_params(flat: np.ndarray, arch: ArchSpec) -> ModelParams:
    if flat.size != param_count(arch):
        raise ContractError(
            f"parameter vector of {flat.size} does not match descriptor count {param_count(arch)}"
        )
    blocks = {}
    k = 0
    for name, shapes in arch.layer_shapes().items():
        layers = []
        for o, i in shapes:
            w = flat[k : k + o * i].reshape(o, i)
            k += o * i
            b = flat[k : k + o]
            k += o
            layers.append((w.copy(), b.copy()))
        blocks[name] = layers
    return ModelParams(**blocks)


# -- tool surface samples ---------------------------------------------------------


def tool_surface_template(radius: float, half_length: float, n: int) -> np.ndarray:
    """Deterministic near-uniform samples of a vertical capsule around the
    origin, area-weighted between the side and the two caps."""
    side_area = 2 * np.pi * radius * (2 * half_length)
    cap_area = 4 * np.pi * radius**2
    total = side_area + cap_area
    golden = np.pi * (3 - np.sqrt(5.0))
    pts = np.empty((n, 3))
    for k in range(n):
        frac = (k + 0.5) / n * total
        ang = golden * k
        if frac < side_area:
            z = -half_length + (frac / side_area) * 2 * half_length
            pts[k] = (radius * np.cos(ang), radius * np.sin(ang), z)
        else:
            u = (frac - side_area) / cap_area  # 0..1 over both caps
            sign = -1.0 if u < 0.5 else 1.0
            v = u * 2 if u < 0.5 else (u - 0.5) * 2  # 0..1 per cap
            phi = np.arcsin(min(v, 1.0))  # latitude from equator
            rr = radius * np.cos(phi)
            pts[k] = (
                rr * np.cos(ang),
                rr * np.sin(ang),
                sign * (half_length + radius * np.sin(phi)),
            )
    return pts


def tool_surface_points(pose: ToolPose, sim_config: SimConfig, n_per_finger: int) -> np.ndarray:
    """World-space tool vertices for both fingers at a pose, [2n, 3]."""
    radius = sim_config.finger_radius(pose.tool_id)
    template = tool_surface_template(radius, sim_config.finger_half_length, n_per_finger)
    rot = pose.rotation()
    out = np.empty((2 * n_per_finger, 3))
    for k, sign in enumerate((1.0, -1.0)):
        offset = np.array([0.0, sign * pose.separation / 2, sim_config.finger_z_offset])
        out[k * n_per_finger : (k + 1) * n_per_finger] = (
            np.asarray(pose.center) + (template + offset) @ rot.T
        )
    return out


# -- graph building ----------------------------------------------------------------


def _radius_edges(obj_pos: np.ndarray, tool_pos: np.ndarray, proximity: float):
    n_obj = len(obj_pos)
    pts = np.vstack([obj_pos, tool_pos]) if len(tool_pos) else obj_pos
    pairs = cKDTree(pts).query_pairs(proximity, output_type="ndarray")
    receivers, senders, types = [], [], []
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]  # i < j
        both_obj = j < n_obj
        receivers.append(np.concatenate([i[both_obj], j[both_obj]]))
        senders.append(np.concatenate([j[both_obj], i[both_obj]]))
        types.append(np.zeros(2 * both_obj.sum(), dtype=np.int8))
        tool_obj = (i < n_obj) & (j >= n_obj)
        receivers.append(i[tool_obj])
        senders.append(j[tool_obj])
        types.append(np.ones(tool_obj.sum(), dtype=np.int8))
    if receivers:
        receivers = np.concatenate(receivers)
        senders = np.concatenate(senders)
        types = np.concatenate(types)
    else:
        receivers = np.empty(0, dtype=np.int64)
        senders = np.empty(0, dtype=np.int64)
        types = np.empty(0, dtype=np.int8)
    order = np.lexsort((senders, receivers))
    return receivers[order], senders[order], types[order]


def build_graph(
    obj_positions: np.ndarray,
    obj_history: np.ndarray,
    tool_vertices: np.ndarray,
    tool_vertices_next: np.ndarray,
    config: GraphConfig,
) -> Graph:
    """Assemble one frame's graph.

    ``obj_history`` is the previous object frame (backward-difference
    velocities); tool vertex velocities come from the commanded next pose
    (forward difference), matching what a planner knows at decision time.
    """
    obj_positions = np.asarray(obj_positions, dtype=np.float64)
    if obj_history.shape != obj_positions.shape:
        raise ContractError("history frame must match object particle count")
    obj_vel = (obj_positions - obj_history) / config.frame_dt
    if len(tool_vertices):
        tool_vel = (tool_vertices_next - tool_vertices) / config.frame_dt
        positions = np.vstack([obj_positions, tool_vertices])
        velocities = np.vstack([obj_vel, tool_vel])
    else:
        positions = obj_positions
        velocities = obj_vel
    receivers, senders, types = _radius_edges(
        obj_positions, np.asarray(tool_vertices, dtype=np.float64), config.proximity
    )
    return Graph(
        n_obj=len(obj_positions),
        positions=positions,
        velocities=velocities,
        receivers=receivers,
        senders=senders,
        edge_types=types,
    )


# -- forward ------------------------------------------------------------------------


def _mlp(layers_v, x: Value, relu_output: bool) -> Value:
    out = x
    for k, (w, b) in enumerate(layers_v):
        out = affine(w, b, out)
        if k < len(layers_v) - 1 or relu_output:
            out = relu(out)
    return out


def _leaf_block(tape: Tape, layers) -> list:
    return [(tape.leaf(w), tape.leaf(b)) for w, b in layers]


def params_as_leaves(tape: Tape, params: ModelParams) -> ModelParams:
    return ModelParams(**{name: _leaf_block(tape, layers) for name, layers in params.blocks()})


def param_grads(leaves: ModelParams) -> np.ndarray:
    chunks = []
    for _, layers in leaves.blocks():
        for w, b in layers:
            chunks.append(w.grad.ravel().copy())
            chunks.append(b.grad.ravel().copy())
    return np.concatenate(chunks)


def _class_onehot(n_obj: int, n_tool: int) -> np.ndarray:
    onehot = np.zeros((N_CLASSES, n_obj + n_tool))
    onehot[CLS_OBJECT, :n_obj] = 1.0
    onehot[CLS_TOOL, n_obj:] = 1.0
    return onehot


def gnn_forward(
    model: DynamicsModel,
    graph: Graph,
    tape: Tape,
    positions: Value | None = None,
    velocities: Value | None = None,
    params: ModelParams | None = None,
) -> Value:
    """Predict next object positions [3, n_obj].

    ``positions``/``velocities`` ([3, V] Values, object columns first)
    override the graph's numeric arrays when the caller differentiates
    through them; ``params`` may be a leaf-copy of the model parameters for
    gradient reads. Tool vertices are never displaced.
    """
    stats = model.stats
    cfg = model.graph_config
    p = params if params is not None else model.params
    if positions is None:
        positions = tape.leaf(graph.positions.T)
    if velocities is None:
        velocities = tape.leaf(graph.velocities.T)
    v = graph.n_vertices
    e = graph.n_edges
    lat = model.arch.latent

    # node features: standardized velocity, class one-hot
    vel_w = np.diag(1.0 / stats.vel_std)
    vel_b = -stats.vel_mean / stats.vel_std
    node_feat = concat_rows(
        [affine(vel_w, vel_b, velocities), _class_onehot(graph.n_obj, v - graph.n_obj)]
    )
    h_node = _mlp(p.node_enc, node_feat, relu_output=True)

    if e > 0:
        recv_pos = gather_cols(positions, graph.receivers)
        send_pos = gather_cols(positions, graph.senders)
        disp = recv_pos - send_pos
        type_onehot = np.zeros((N_EDGE_TYPES, e))
        type_onehot[graph.edge_types.astype(np.int64), np.arange(e)] = 1.0
        edge_feat = concat_rows(
            [
                affine(np.diag(1.0 / stats.disp_std), None, disp),
                tensor.sqrt(tensor.sqnorm_cols(disp)) * (1.0 / stats.norm_scale),
                type_onehot,
            ]
        )
        feat_in = concat_rows(
            [
                gather_cols(node_feat, graph.receivers),
                gather_cols(node_feat, graph.senders),
                edge_feat,
            ]
        )
        h_edge = _mlp(p.edge_enc, feat_in, relu_output=True)

        for _ in range(cfg.prop_steps):
            msg = relu(
                h_edge
                + gather_cols(h_node, graph.receivers)
                + gather_cols(h_node, graph.senders)
            )
            h_edge = msg
            agg = scatter_sum(msg, graph.receivers, v)
            h_node = relu(
                affine(p.propagator[0][0], p.propagator[0][1], concat_rows([h_node, agg]))
            )
        edge_out = _mlp(p.edge_dec, h_edge, relu_output=False)
        agg_out = scatter_sum(edge_out, graph.receivers, v)
    else:
        for _ in range(cfg.prop_steps):
            agg = tape.leaf(np.zeros((lat, v)))
            h_node = relu(
                affine(p.propagator[0][0], p.propagator[0][1], concat_rows([h_node, agg]))
            )
        agg_out = tape.leaf(np.zeros((lat, v)))

    raw = _mlp(p.node_dec, concat_rows([h_node, agg_out]), relu_output=False)
    dx = affine(np.diag(stats.dx_std), stats.dx_mean, raw)
    obj_idx = np.arange(graph.n_obj)
    return gather_cols(positions, obj_idx) + gather_cols(dx, obj_idx)


def gnn_rollout(
    model: DynamicsModel,
    obj_positions: np.ndarray | Value,
    obj_history: np.ndarray | Value,
    tool_vertex_seq: list,
    tape: Tape | None = None,
    params: ModelParams | None = None,
) -> list[Value]:
    """Autoregressive rollout over len(tool_vertex_seq) - 1 steps.

    ``tool_vertex_seq`` holds [3, T] tool vertex arrays or Values, one per
    frame boundary; step t uses pose t and its forward difference to t+1.
    The graph is rebuilt each step from the current predicted positions.
    With a recording tape the whole rollout is differentiable with respect
    to parameters and tool vertex positions.
    """
    tape = tape or Tape(recording=False)
    cfg = model.graph_config

    def as_value(x, transpose=False):
        if isinstance(x, Value):
            return x
        arr = np.asarray(x, dtype=np.float64)
        return tape.leaf(arr.T if transpose else arr)

    x_cur = as_value(obj_positions, transpose=True)
    x_prev = as_value(obj_history, transpose=True)
    tools = [as_value(t, transpose=True) for t in tool_vertex_seq]
    n_obj = x_cur.data.shape[1]
    out = []
    for t in range(len(tools) - 1):
        graph = build_graph(
            x_cur.data.T,
            x_prev.data.T,
            tools[t].data.T,
            tools[t + 1].data.T,
            cfg,
        )
        inv_dt = 1.0 / cfg.frame_dt
        obj_vel = (x_cur - x_prev) * inv_dt
        tool_vel = (tools[t + 1] - tools[t]) * inv_dt
        positions = concat_cols([x_cur, tools[t]])
        velocities = concat_cols([obj_vel, tool_vel])
        x_next = gnn_forward(
            model, graph, tape, positions=positions, velocities=velocities, params=params
        )
        x_prev, x_cur = x_cur, x_next
        out.append(x_next)
    return out


# -- checkpoint io ------------------------------------------------------------------


CHECKPOINT_FORMAT = "gripmold-checkpoint-1"


def save_checkpoint(path, model: DynamicsModel, extra: dict | None = None) -> None:
    """Header line of structured text, then named little-endian float64 blobs."""
    arrays = []
    manifest = []
    for name, layers in model.params.blocks():
        for k, (w, b) in enumerate(layers):
            for suffix, arr in (("W", w), ("b", b)):
                arrays.append(np.ascontiguousarray(arr, dtype="<f8"))
                manifest.append({"name": f"{name}.{k}.{suffix}", "shape": list(arr.shape)})
    header = {
        "format": CHECKPOINT_FORMAT,
        "arch": asdict(model.arch),
        "graph_config": asdict(model.graph_config),
        "stats": model.stats.to_dict(),
        "extra": extra or {},
        "arrays": manifest,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in arrays:
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[DynamicsModel, dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"unrecognized checkpoint format in {path}")
        arch = ArchSpec(**header["arch"])
        blocks: dict[str, list] = {}
        staging: dict[str, dict] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
            block, idx, suffix = entry["name"].rsplit(".", 2)
            staging.setdefault(block, {}).setdefault(int(idx), {})[suffix] = arr
        for block, layers in staging.items():
            blocks[block] = [(layers[k]["W"], layers[k]["b"]) for k in sorted(layers)]
    params = ModelParams(**blocks)
    expected = {name: [w.shape for w, _ in layers] for name, layers in params.blocks()}
    declared = {name: [tuple(s) for s in shapes] for name, shapes in arch.layer_shapes().items()}
    if expected != declared:
        raise ContractError("checkpoint arrays do not match the architecture descriptor")
    model = DynamicsModel(
        arch=arch,
        graph_config=GraphConfig(**header["graph_config"]),
        params=params,
        stats=NormStats.from_dict(header["stats"]),
    )
    return model, header.get("extra", {})
