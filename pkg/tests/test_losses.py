import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gripmold.errors import ContractError
from gripmold.losses import (
    Assignment,
    LossConfig,
    chamfer,
    chamfer_node,
    emd,
    emd_node,
    hausdorff,
    mixed_loss,
    mixed_loss_node,
)
from gripmold.tensor import Tape, finite_diff_check


def brute_force_emd(a, b):
    n = len(a)
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return min(
        sum(dist[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))
    )


ORIGIN = np.zeros((1, 3))
EX = np.array([[1.0, 0.0, 0.0]])
EY = np.array([[0.0, 1.0, 0.0]])


def test_chamfer_identity():
    a = np.random.default_rng(0).random((10, 3))
    assert chamfer(a, a) == 0.0


def test_chamfer_hand_values():
    assert chamfer(ORIGIN, EX) == pytest.approx(2.0)
    a = np.vstack([ORIGIN, EX])
    assert chamfer(a, ORIGIN) == pytest.approx(1.0)


def test_chamfer_empty_set_rejected():
    with pytest.raises(ContractError):
        chamfer(np.zeros((0, 3)), ORIGIN)


def test_emd_identity_any_order():
    rng = np.random.default_rng(1)
    a = rng.random((7, 3))
    value, assign = emd(a, a[::-1].copy())
    assert value == pytest.approx(0.0, abs=1e-12)
    assert sorted(assign.permutation) == list(range(7))


def test_emd_prefers_identity_matching():
    a = np.vstack([ORIGIN, EX])
    b = np.vstack([ORIGIN, EY])
    value, assign = emd(a, b)
    assert value == pytest.approx(np.sqrt(2.0))
    assert list(assign.permutation) == [0, 1]


def test_emd_matches_brute_force_n6():
    rng = np.random.default_rng(2)
    for _ in range(25):
        n = int(rng.integers(2, 7))
        a, b = rng.random((n, 3)), rng.random((n, 3))
        value, _ = emd(a, b)
        assert value == pytest.approx(brute_force_emd(a, b), abs=1e-10)


def test_emd_size_mismatch():
    with pytest.raises(ContractError):
        emd(np.zeros((2, 3)), np.zeros((3, 3)))


def test_hausdorff_cases():
    a = np.random.default_rng(3).random((5, 3))
    assert hausdorff(a, a) == 0.0
    assert hausdorff(ORIGIN, np.array([[3.0, 4.0, 0.0]])) == pytest.approx(5.0)
    sup = np.vstack([a, a + 0.5])
    directed = max(np.sqrt(((x - a) ** 2).sum(-1)).min() for x in sup)
    assert hausdorff(a, sup) == pytest.approx(directed)


def test_mixed_loss_hand_value():
    a = np.vstack([ORIGIN, EX])
    b = np.vstack([ORIGIN, EY])
    got = mixed_loss(a, b, LossConfig(0.9, 0.1))
    assert got == pytest.approx(0.9 * np.sqrt(2.0) + 0.1 * 2.0, abs=1e-9)
    assert got == pytest.approx(1.47279, abs=1e-4)


def test_mixed_loss_degenerate_weights():
    rng = np.random.default_rng(4)
    a, b = rng.random((6, 3)), rng.random((6, 3))
    assert mixed_loss(a, b, LossConfig(1.0, 0.0)) == pytest.approx(emd(a, b)[0])
    assert mixed_loss(a, a, LossConfig()) == pytest.approx(0.0, abs=1e-12)


def test_invalid_weights():
    with pytest.raises(ContractError):
        LossConfig(0.0, 0.0)
    with pytest.raises(ContractError):
        LossConfig(-1.0, 0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_symmetry_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    a, b = rng.random((n, 3)), rng.random((n, 3))
    assert emd(a, b)[0] == pytest.approx(emd(b, a)[0], abs=1e-10)
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), abs=1e-12)
    assert hausdorff(a, b) == pytest.approx(hausdorff(b, a), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_emd_rigid_motion_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    a, b = rng.random((n, 3)), rng.random((n, 3))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, 2 * np.pi)
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    rot = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
    shift = rng.normal(size=3)
    base, _ = emd(a, b)
    moved, _ = emd(a @ rot.T + shift, b @ rot.T + shift)
    assert moved == pytest.approx(base, abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_emd_lower_bound_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    a, b = rng.random((n, 3)), rng.random((n, 3))
    value, _ = emd(a, b)
    per_point = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).min(axis=1)
    assert value >= per_point.max() - 1e-12


def _loss_grad_fn(node_fn, target):
    def f(flat):
        tape = Tape()
        pred = tape.leaf(flat.reshape(-1, 3).T)
        out = node_fn(pred, target)
        tape.backward(out)
        return out.item(), pred.grad.T.ravel().copy()

    return f


def _assignment_is_stable(pts, target, eps):
    base = emd(pts, target)[1].permutation
    for delta in (-eps, eps):
        for i in range(pts.size):
            shifted = pts.copy().ravel()
            shifted[i] += delta
            if not np.array_equal(emd(shifted.reshape(-1, 3), target)[1].permutation, base):
                return False
    return True


def test_emd_node_gradient_matches_fd():
    rng = np.random.default_rng(5)
    checked = 0
    while checked < 5:
        pts = rng.random((5, 3))
        target = rng.random((5, 3))
        if not _assignment_is_stable(pts, target, 1e-5):
            continue
        err = finite_diff_check(_loss_grad_fn(emd_node, target), pts.ravel(), 1e-6)
        assert err < 1e-6
        checked += 1


def test_chamfer_node_gradient_matches_fd():
    rng = np.random.default_rng(6)
    for _ in range(5):
        pts = rng.random((6, 3))
        target = rng.random((6, 3)) + 2.0  # well-separated: argmins stable
        err = finite_diff_check(_loss_grad_fn(chamfer_node, target), pts.ravel(), 1e-6)
        assert err < 1e-6


def test_mixed_node_value_matches_plain():
    rng = np.random.default_rng(7)
    pts, target = rng.random((8, 3)), rng.random((8, 3))
    tape = Tape()
    pred = tape.leaf(pts.T)
    node = mixed_loss_node(pred, target, LossConfig())
    assert node.item() == pytest.approx(mixed_loss(pts, target, LossConfig()), abs=1e-12)


def test_assignment_is_bijection():
    rng = np.random.default_rng(8)
    a, b = rng.random((20, 3)), rng.random((20, 3))
    _, assign = emd(a, b)
    assert isinstance(assign, Assignment)
    assert sorted(assign.permutation) == list(range(20))
