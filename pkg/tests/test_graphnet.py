import numpy as np
import pytest

from gripmold.errors import ContractError
from gripmold.graphnet import (
    ArchSpec,
    DynamicsModel,
    GraphConfig,
    NormStats,
    build_graph,
    flatten_params,
    gnn_forward,
    gnn_rollout,
    init_params,
    load_checkpoint,
    param_count,
    params_as_leaves,
    param_grads,
    save_checkpoint,
    tool_surface_points,
    tool_surface_template,
    unflatten_params,
    zero_params,
)
from gripmold.losses import LossConfig, mixed_loss_node
from gripmold.tensor import Tape, finite_diff_check
from gripmold.worldsim import SimConfig, ToolPose


def tiny_model(latent=8, proximity=0.05, seed=0):
    arch = ArchSpec(latent=latent)
    cfg = GraphConfig(proximity=proximity, frame_dt=0.004, tool_vertices=8)
    params = init_params(arch, np.random.default_rng(seed))
    return DynamicsModel(arch=arch, graph_config=cfg, params=params, stats=NormStats())


NO_TOOL = np.zeros((0, 3))


def simple_graph(model, positions, history=None, tool=None, tool_next=None):
    history = positions if history is None else history
    tool = NO_TOOL if tool is None else tool
    tool_next = tool if tool_next is None else tool_next
    return build_graph(positions, history, tool, tool_next, model.graph_config)


# -- graph building ------------------------------------------------------------


def test_two_particles_within_threshold_two_directed_edges():
    model = tiny_model()
    pts = np.array([[0.0, 0, 0], [0.04, 0, 0]])
    g = simple_graph(model, pts)
    assert g.n_edges == 2
    assert set(zip(g.receivers, g.senders)) == {(0, 1), (1, 0)}
    assert (g.edge_types == 0).all()


def test_two_particles_outside_threshold_no_edges():
    model = tiny_model()
    g = simple_graph(model, np.array([[0.0, 0, 0], [0.06, 0, 0]]))
    assert g.n_edges == 0


def test_tool_far_away_only_internal_edges():
    model = tiny_model()
    pts = np.array([[0.0, 0, 0], [0.03, 0, 0]])
    tool = np.array([[1.0, 1.0, 1.0]])
    g = simple_graph(model, pts, tool=tool)
    assert (g.edge_types == 0).all()
    assert g.n_vertices == 3


def test_tool_to_object_edges_are_directed():
    model = tiny_model()
    pts = np.array([[0.0, 0, 0]])
    tool = np.array([[0.03, 0, 0]])
    g = simple_graph(model, pts, tool=tool)
    assert g.n_edges == 1
    assert g.receivers[0] == 0 and g.senders[0] == 1
    assert g.edge_types[0] == 1


def test_no_self_edges_and_endpoints_valid():
    model = tiny_model()
    rng = np.random.default_rng(0)
    pts = rng.random((30, 3)) * 0.08
    g = simple_graph(model, pts)
    assert (g.receivers != g.senders).all()
    assert g.receivers.max() < g.n_vertices and g.senders.max() < g.n_vertices


# -- parameters ------------------------------------------------------------------


def test_init_deterministic_per_seed():
    arch = ArchSpec(latent=16)
    a = init_params(arch, np.random.default_rng(5))
    b = init_params(arch, np.random.default_rng(5))
    assert np.array_equal(flatten_params(a), flatten_params(b))
    c = init_params(arch, np.random.default_rng(6))
    assert not np.array_equal(flatten_params(a), flatten_params(c))


def test_param_count_closed_form():
    arch = ArchSpec(latent=150)
    lat, nf, ef = 150, arch.node_features, arch.edge_features
    expected = (
        (lat * nf + lat) + 2 * (lat * lat + lat)  # node encoder
        + (lat * (2 * nf + ef) + lat) + 2 * (lat * lat + lat)  # edge encoder
        + (lat * 2 * lat + lat)  # propagator
        + 3 * (lat * lat + lat)  # edge decoder
        + (lat * 2 * lat + lat) + (lat * lat + lat) + (3 * lat + 3)  # node decoder
    )
    assert param_count(arch) == expected
    params = init_params(arch, np.random.default_rng(0))
    assert flatten_params(params).size == expected


def test_flatten_roundtrip():
    arch = ArchSpec(latent=12)
    params = init_params(arch, np.random.default_rng(1))
    flat = flatten_params(params)
    back = unflatten_params(flat, arch)
    assert np.array_equal(flatten_params(back), flat)
    with pytest.raises(ContractError):
        unflatten_params(flat[:-1], arch)


# -- forward ------------------------------------------------------------------------


def test_zero_params_identity_output():
    model = tiny_model()
    model.params = zero_params(model.arch)
    pts = np.random.default_rng(2).random((12, 3)) * 0.05
    g = simple_graph(model, pts)
    out = gnn_forward(model, g, Tape(recording=False))
    assert np.array_equal(out.data.T, pts)


def test_forward_handles_empty_edge_graph():
    model = tiny_model(proximity=1e-6)
    pts = np.random.default_rng(3).random((5, 3))
    g = simple_graph(model, pts)
    assert g.n_edges == 0
    out = gnn_forward(model, g, Tape(recording=False))
    assert out.data.shape == (3, 5)
    assert np.isfinite(out.data).all()


def test_permutation_equivariance():
    model = tiny_model(latent=10)
    rng = np.random.default_rng(4)
    pts = rng.random((20, 3)) * 0.06
    hist = pts - rng.normal(0, 1e-3, pts.shape)
    tool = rng.random((6, 3)) * 0.06
    out = gnn_forward(model, build_graph(pts, hist, tool, tool, model.graph_config), Tape(recording=False)).data.T
    perm = rng.permutation(20)
    out_p = gnn_forward(
        model, build_graph(pts[perm], hist[perm], tool, tool, model.graph_config), Tape(recording=False)
    ).data.T
    assert np.abs(out_p - out[perm]).max() < 1e-9


def test_translation_invariance_of_prediction():
    model = tiny_model(latent=10, seed=7)
    rng = np.random.default_rng(5)
    pts = rng.random((15, 3)) * 0.05
    hist = pts - rng.normal(0, 1e-3, pts.shape)
    tool = rng.random((4, 3)) * 0.05
    shift = np.array([0.31, -0.17, 0.23])
    out = gnn_forward(model, build_graph(pts, hist, tool, tool, model.graph_config), Tape(recording=False)).data.T
    out_s = gnn_forward(
        model,
        build_graph(pts + shift, hist + shift, tool + shift, tool + shift, model.graph_config),
        Tape(recording=False),
    ).data.T
    assert np.abs(out_s - (out + shift)).max() < 1e-9


def test_rollout_single_step_equals_forward():
    model = tiny_model(latent=10)
    rng = np.random.default_rng(6)
    pts = rng.random((10, 3)) * 0.05
    hist = pts.copy()
    tool0 = rng.random((4, 3)) * 0.05
    tool1 = tool0 + 0.001
    fwd = gnn_forward(model, build_graph(pts, hist, tool0, tool1, model.graph_config), Tape(recording=False))
    roll = gnn_rollout(model, pts, hist, [tool0, tool1])
    assert len(roll) == 1
    assert np.allclose(roll[0].data, fwd.data)


def test_zero_param_rollout_is_static():
    model = tiny_model()
    model.params = zero_params(model.arch)
    pts = np.random.default_rng(7).random((8, 3)) * 0.05
    tools = [np.random.default_rng(8).random((4, 3)) for _ in range(4)]
    roll = gnn_rollout(model, pts, pts, tools)
    for step in roll:
        assert np.array_equal(step.data.T, pts)


def test_tool_vertices_move_kinematically():
    cfg = SimConfig(grid_res=32, cell_size=0.25 / 32, dt=2e-4, substeps=20)
    pose0 = ToolPose(center=(0.12, 0.12, 0.05), separation=0.08)
    pose1 = ToolPose(center=(0.12, 0.12, 0.05), separation=0.06)
    v0 = tool_surface_points(pose0, cfg, 16)
    v1 = tool_surface_points(pose1, cfg, 16)
    # same template: vertices translate by the separation change only
    delta = v1 - v0
    assert np.allclose(np.abs(delta[:, 1]), 0.01, atol=1e-12)
    assert np.allclose(delta[:, [0, 2]], 0.0, atol=1e-12)


def test_tool_template_on_capsule_surface():
    from gripmold.worldsim import capsule_sdf

    pts = tool_surface_template(0.008, 0.03, 32)
    sdf = capsule_sdf(pts, [0, 0, -0.03], [0, 0, 0.03], 0.008)
    assert np.abs(sdf).max() < 1e-9


def test_gradient_flow_through_forward_and_loss():
    model = tiny_model(latent=6, seed=9)
    rng = np.random.default_rng(10)
    pts = rng.random((6, 3)) * 0.05
    hist = pts - 1e-3
    target = pts + rng.normal(0, 0.002, pts.shape)
    graph = simple_graph(model, pts, history=hist)
    # generic parameter point: zero-init biases would sit exactly on the
    # relu kink (subgradient 0) where central differences disagree
    x0 = rng.normal(0.0, 0.3, size=flatten_params(model.params).size)

    def f(theta):
        tape = Tape()
        leaves = params_as_leaves(tape, unflatten_params(theta, model.arch))
        out = gnn_forward(model, graph, tape, params=leaves)
        loss = mixed_loss_node(out, target, LossConfig())
        tape.backward(loss)
        return loss.item(), param_grads(leaves)

    directions = np.random.default_rng(11).normal(size=(6, x0.size))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    assert finite_diff_check(f, x0, 1e-6, directions=directions) < 1e-6


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = tiny_model(latent=12, seed=12)
    model.stats = NormStats(
        vel_mean=np.array([0.1, 0.2, 0.3]),
        vel_std=np.array([1.0, 2.0, 3.0]),
        disp_std=np.array([0.5, 0.5, 0.5]),
        norm_scale=0.7,
        dx_mean=np.array([0.0, 0.0, 1e-5]),
        dx_std=np.array([1e-3, 1e-3, 1e-3]),
    )
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, extra={"seed": 12})
    loaded, extra = load_checkpoint(path)
    assert extra == {"seed": 12}
    assert np.array_equal(flatten_params(loaded.params), flatten_params(model.params))
    assert loaded.arch == model.arch
    assert loaded.graph_config == model.graph_config
    assert np.array_equal(loaded.stats.vel_mean, model.stats.vel_mean)
    save_checkpoint(tmp_path / "model2.ckpt", loaded, extra={"seed": 12})
    assert (tmp_path / "model.ckpt").read_bytes() == (tmp_path / "model2.ckpt").read_bytes()


def test_checkpoint_rejects_descriptor_mismatch(tmp_path):
    model = tiny_model(latent=12)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    header, rest = raw.split(b"\n", 1)
    import json

    h = json.loads(header)
    h["arch"]["latent"] = 13
    (tmp_path / "bad.ckpt").write_bytes(json.dumps(h, sort_keys=True).encode() + b"\n" + rest)
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "bad.ckpt")
