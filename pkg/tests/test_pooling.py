import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evpose.gnn import NoEstimate
from evpose.graph import PoseGraph, empty_graph
from evpose.pooling import (
    JOINTS,
    LIMB_INDEX,
    N_JOINTS,
    JointHypotheses,
    PoolingHead,
    head_forward,
    pool_batch,
    pool_batch_backward,
    pool_joints,
)


def graph_at(points):
    return PoseGraph.from_pairs(np.asarray(points, float), np.zeros((0, 2)))


def hyp(offsets, conf):
    return JointHypotheses(np.asarray(offsets, float), np.asarray(conf, float))


def test_joint_order_and_limbs():
    assert JOINTS[:5] == ("head", "shoulder_r", "shoulder_l", "hip_l", "hip_r")
    assert JOINTS[-1] == "ankle_l" and N_JOINTS == 13
    touched = {j for pair in LIMB_INDEX for j in pair}
    assert touched == set(range(N_JOINTS))


@pytest.mark.parametrize("mode,n_conf", [("single", 1), ("axis_separated", 2)])
def test_head_shapes(mode, n_conf):
    head = PoolingHead(16, mode)
    params = head.init_params(np.random.default_rng(0), np.float64)
    h = head_forward(np.random.default_rng(1).standard_normal((7, 16)), head, params)
    assert h.offsets.shape == (7, 13, 2) and h.raw_conf.shape == (7, 13, n_conf)


def test_zero_features_and_weights_give_zero_offsets():
    head = PoolingHead(8)
    params = {k: np.zeros_like(v) for k, v in head.init_params(np.random.default_rng(0), np.float64).items()}
    assert not head.forward(params, np.zeros((4, 8))).offsets.any()


def test_head_dimension_mismatch():
    head = PoolingHead(8)
    params = head.init_params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        head.forward(params, np.zeros((3, 9)))


def test_unknown_mode():
    with pytest.raises(ValueError):
        PoolingHead(8, "double")


def test_singleton_ignores_confidence():
    off = np.zeros((1, 13, 2))
    off[0, 4] = (5, -5)
    est = pool_joints(graph_at([[10, 10]]), hyp(off, np.full((1, 13, 1), -37.0)))
    np.testing.assert_allclose(est.joints[4], (15, 5))
    np.testing.assert_allclose(est.joints[0], (10, 10))


def test_two_equal_confidences_average():
    est = pool_joints(graph_at([[0, 0], [10, 10]]), hyp(np.zeros((2, 13, 2)), np.zeros((2, 13, 1))))
    np.testing.assert_allclose(est.joints, np.full((13, 2), 5.0))


def weighted_mean_oracle(pos, offsets, conf):
    """Explicit per-joint, per-axis normalisation then a weighted sum."""
    n = len(pos)
    out = np.zeros((13, 2))
    for j in range(13):
        for a in range(2):
            z = conf[:, j, a if conf.shape[2] == 2 else 0]
            w = np.exp(z - z.max())
            w = w / w.sum()
            out[j, a] = sum(w[i] * (pos[i, a] + offsets[i, j, a]) for i in range(n))
    return out


@pytest.mark.parametrize("n_conf", [1, 2])
def test_matches_weighted_mean_oracle(n_conf):
    rng = np.random.default_rng(n_conf)
    pos = rng.uniform(0, 100, (30, 2))
    offsets = rng.normal(0, 20, (30, 13, 2))
    conf = rng.normal(0, 3, (30, 13, n_conf))
    mode = "single" if n_conf == 1 else "axis_separated"
    est = pool_joints(graph_at(pos), hyp(offsets, conf), mode)
    np.testing.assert_allclose(est.joints, weighted_mean_oracle(pos, offsets, conf), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 25), st.integers(0, 10_000), st.floats(-50, 50))
def test_convexity_and_shift_invariance(n, seed, shift):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 100, (n, 2))
    offsets = rng.normal(0, 20, (n, 13, 2))
    conf = rng.normal(0, 5, (n, 13, 2))
    g = graph_at(pos)
    est = pool_joints(g, hyp(offsets, conf), "axis_separated")
    pts = pos[:, None, :] + offsets
    assert (est.joints >= pts.min(axis=0) - 1e-9).all()
    assert (est.joints <= pts.max(axis=0) + 1e-9).all()
    shifted = pool_joints(g, hyp(offsets, conf + shift), "axis_separated")
    np.testing.assert_allclose(shifted.joints, est.joints, atol=1e-9)
    assert ((est.confidence >= 0) & (est.confidence <= 1)).all()


def test_single_equals_tied_axis_separated():
    rng = np.random.default_rng(9)
    pos = rng.uniform(0, 50, (12, 2))
    offsets = rng.normal(0, 5, (12, 13, 2))
    c = rng.normal(0, 2, (12, 13, 1))
    g = graph_at(pos)
    a = pool_joints(g, hyp(offsets, c), "single")
    b = pool_joints(g, hyp(offsets, np.repeat(c, 2, axis=2)), "axis_separated")
    np.testing.assert_array_equal(a.joints, b.joints)


def test_single_mode_rejects_two_confidences():
    with pytest.raises(ValueError):
        pool_joints(graph_at([[1, 1]]), hyp(np.zeros((1, 13, 2)), np.zeros((1, 13, 2))), "single")


def test_empty_graph_is_no_estimate():
    with pytest.raises(NoEstimate):
        pool_joints(empty_graph(), hyp(np.zeros((0, 13, 2)), np.zeros((0, 13, 1))))


def test_confidence_is_one_when_peaked_and_zero_when_flat():
    pos = np.zeros((4, 2))
    peaked = np.full((4, 13, 1), -1e3)
    peaked[0] = 0.0
    assert np.allclose(pool_joints(graph_at(pos), hyp(np.zeros((4, 13, 2)), peaked)).confidence, 1.0)
    flat = pool_joints(graph_at(pos), hyp(np.zeros((4, 13, 2)), np.zeros((4, 13, 1))))
    assert np.allclose(flat.confidence, 0.0)


@pytest.mark.parametrize("mode", ["single", "axis_separated"])
def test_pool_backward_matches_finite_differences(mode):
    rng = np.random.default_rng(0)
    ptr = np.array([0, 5, 9])
    gid = np.repeat([0, 1], [5, 4])
    pos = rng.uniform(0, 50, (9, 2))
    n_conf = 1 if mode == "single" else 2
    off = rng.normal(0, 5, (9, 13, 2))
    z = rng.normal(0, 1, (9, 13, n_conf))
    dj = rng.standard_normal((2, 13, 2))

    def loss(o, c):
        return float((pool_batch(pos, hyp(o, c), ptr, gid).joints * dj).sum())

    d_off, d_z = pool_batch_backward(pool_batch(pos, hyp(off, z), ptr, gid), dj, ptr, gid, mode)
    h = 1e-6
    for arr, grad in ((off, d_off), (z, d_z)):
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            a = loss(off, z)
            arr[i] = old - h
            b = loss(off, z)
            arr[i] = old
            num[i] = (a - b) / (2 * h)
        np.testing.assert_allclose(grad, num, atol=1e-6)


def test_head_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    head = PoolingHead(5, "axis_separated", offset_scale=3.0)
    params = head.init_params(rng, np.float64)
    feats = rng.standard_normal((4, 5))
    d_off = rng.standard_normal((4, 13, 2))
    d_conf = rng.standard_normal((4, 13, 2))

    def loss():
        h = head.forward(params, feats)
        return float((h.offsets * d_off).sum() + (h.raw_conf * d_conf).sum())

    grads = {}
    d_feats = head.backward(params, feats, d_off, d_conf, grads)
    h = 1e-6
    for arr, grad in ((params["head.weight"], grads["head.weight"]),
                      (params["head.bias"], grads["head.bias"]), (feats, d_feats)):
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            a = loss()
            arr[i] = old - h
            b = loss()
            arr[i] = old
            num[i] = (a - b) / (2 * h)
        np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-6)
