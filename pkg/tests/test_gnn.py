import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evpose.gnn import (
    BatchNorm,
    GNNStack,
    GraphBatch,
    NoEstimate,
    SplineConv,
    StackConfig,
    basis_1d,
    bspline_basis,
    forward_pass,
)
from evpose.graph import PoseGraph, empty_graph, normalize_graph

from helpers import dense_basis, random_graph, spline_conv_loop


def dense_from_sparse(idx, w, n):
    out = np.zeros(n)
    np.add.at(out, idx, w)
    return out


# -- basis


def test_corner_gets_full_weight():
    idx, w = bspline_basis((0.0, 0.0), (3, 3), degree=1)
    full = dense_from_sparse(idx, w, 9)
    assert full[0] == 1.0 and full.sum() == 1.0
    idx, w = bspline_basis((1.0, 1.0), (3, 3), degree=1)
    assert dense_from_sparse(idx, w, 9)[8] == 1.0


@pytest.mark.parametrize("degree", [1, 2, 3])
@pytest.mark.parametrize("ks", [(4, 4), (5, 7)])
def test_basis_matches_recursive_oracle(degree, ks):
    rng = np.random.default_rng(degree)
    u = np.r_[rng.uniform(0, 1, (200, 2)), [[0, 0], [1, 1], [0, 1], [0.5, 0.5]]]
    idx, w = bspline_basis(u, ks, degree)
    assert idx.shape == w.shape == (len(u), (degree + 1) ** 2)
    K = ks[0] * ks[1]
    for k in range(len(u)):
        np.testing.assert_allclose(dense_from_sparse(idx[k], w[k], K),
                                   dense_basis(u[k], ks, degree), atol=1e-10)


@pytest.mark.parametrize("degree", [1, 2])
def test_partition_of_unity_on_grid(degree):
    g = np.linspace(0, 1, 100)
    u = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    _, w = bspline_basis(u, (6, 5), degree)
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_hat_fast_path_equals_generic_scheme():
    u = np.linspace(0, 1, 301)
    idx, w = basis_1d(u, 5, 1)
    knots = np.linspace(0, 1, 5)
    for k, x in enumerate(u):
        expected = np.maximum(0, 1 - np.abs(x - knots) * 4)
        np.testing.assert_allclose(dense_from_sparse(idx[k], w[k], 5), expected, atol=1e-12)


@pytest.mark.parametrize("bad", [(-0.01, 0.5), (0.5, 1.2), (np.nan, 0.5)])
def test_basis_rejects_out_of_square(bad):
    with pytest.raises(ValueError):
        bspline_basis(bad, (3, 3))


def test_kernel_too_small_for_degree():
    with pytest.raises(ValueError):
        bspline_basis((0.5, 0.5), (2, 2), degree=2)
    with pytest.raises(ValueError):
        SplineConv("c", 2, 2, (1, 3))


# -- spline convolution


def conv_with_params(in_dim, out_dim, ks, rng, degree=1):
    conv = SplineConv("c", in_dim, out_dim, ks, degree)
    params = conv.init_params(rng, np.float64)
    return conv, params


@pytest.mark.parametrize("seed", range(50))
def test_spline_conv_matches_loop(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(2, 21)), p_edge=0.2)
    ks = tuple(int(k) for k in rng.integers(2, 6, 2))
    degree = 1 if min(ks) < 3 else int(rng.integers(1, 3))
    conv, params = conv_with_params(3, 4, ks, rng, degree)
    x = rng.standard_normal((g.num_nodes, 3))
    out, _ = conv.forward(params, GraphBatch([g]), x)
    ref = spline_conv_loop(g, x, params["c.weight"], params["c.root"], ks, degree)
    np.testing.assert_allclose(out, ref, atol=1e-8, rtol=0)


def test_isolated_node_with_identity_root():
    g = normalize_graph(PoseGraph.from_pairs([[5.0, 5.0]], np.zeros((0, 2))), (10, 10), 20)
    conv, params = conv_with_params(3, 3, (3, 3), np.random.default_rng(0))
    params["c.root"] = np.eye(3)
    x = np.array([[1.0, -2.0, 0.5]])
    out, _ = conv.forward(params, GraphBatch([g]), x)
    np.testing.assert_array_equal(out, x)


def test_symmetric_pair_gives_equal_outputs():
    g = normalize_graph(PoseGraph.from_pairs([[10.0, 10.0], [20.0, 14.0]], [[0, 1]]), (64, 64), 20)
    conv, params = conv_with_params(2, 3, (4, 4), np.random.default_rng(1))
    params["c.weight"][:] = params["c.weight"][0]
    x = np.ones((2, 2))
    out, _ = conv.forward(params, GraphBatch([g]), x)
    np.testing.assert_allclose(out[0], out[1], atol=1e-12)


def test_dimension_mismatch():
    g = random_graph(np.random.default_rng(0), 4)
    conv, params = conv_with_params(3, 2, (3, 3), np.random.default_rng(0))
    with pytest.raises(ValueError):
        conv.forward(params, GraphBatch([g]), np.zeros((4, 5)))


def test_batching_equals_separate_graphs():
    rng = np.random.default_rng(3)
    gs = [random_graph(rng, n) for n in (3, 7, 5)]
    conv, params = conv_with_params(2, 4, (5, 5), rng)
    xs = [rng.standard_normal((g.num_nodes, 2)) for g in gs]
    joint, _ = conv.forward(params, GraphBatch(gs), np.concatenate(xs))
    parts = [conv.forward(params, GraphBatch([g]), x)[0] for g, x in zip(gs, xs)]
    np.testing.assert_allclose(joint, np.concatenate(parts), atol=1e-12)


def test_float32_close_to_float64():
    rng = np.random.default_rng(4)
    g = random_graph(rng, 30)
    conv, params = conv_with_params(8, 16, (5, 5), rng)
    x = rng.standard_normal((30, 8))
    b = GraphBatch([g])
    ref, _ = conv.forward(params, b, x)
    p32 = {k: v.astype(np.float32) for k, v in params.items()}
    out, _ = conv.forward(p32, b, x.astype(np.float32))
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, ref, atol=1e-4)


# -- normalisation and layers


def test_batchnorm_training_moments():
    rng = np.random.default_rng(5)
    bn = BatchNorm("n", 6)
    params, buffers = bn.init_params(np.float64), bn.init_buffers(np.float64)
    x = rng.normal(3.0, 2.5, (50, 6))
    y, (xhat, _, _) = bn.forward(params, buffers, x, training=True)
    np.testing.assert_allclose(xhat.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(xhat.var(axis=0), 1, atol=1e-3)
    np.testing.assert_allclose(buffers["n.running_mean"], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(buffers["n.running_var"], 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batchnorm_inference_uses_running_stats():
    bn = BatchNorm("n", 2)
    params = {"n.scale": np.array([2.0, 1.0]), "n.shift": np.array([0.5, -1.0])}
    buffers = {"n.running_mean": np.array([1.0, 0.0]), "n.running_var": np.array([4.0, 1.0])}
    y, _ = bn.forward(params, buffers, np.array([[3.0, 2.0]]), training=False)
    expected = (np.array([3.0, 2.0]) - [1, 0]) / np.sqrt(np.array([4.0, 1.0]) + 1e-5) * [2, 1] + [0.5, -1]
    np.testing.assert_allclose(y[0], expected)


def small_stack(dims=(4, 6, 5), ks=(3, 4, 3)):
    stack = GNNStack(StackConfig(dims, ks, "custom"))
    params, buffers = stack.init(np.random.default_rng(0), np.float64)
    return stack, params, buffers


def test_zero_input_gives_relu_of_shift():
    stack, params, buffers = small_stack()
    g = random_graph(np.random.default_rng(1), 6)
    params["gnn.0.norm.shift"] = np.array([0.5, -0.5, 1.0, 0.0])
    out, _ = stack.layer_forward(0, params, buffers, GraphBatch([g]), np.zeros((6, 2)), False)
    expected = np.maximum(params["gnn.0.norm.shift"], 0)
    np.testing.assert_allclose(out, np.tile(expected, (6, 1)), atol=1e-12)


def test_inference_is_deterministic():
    stack, params, buffers = small_stack()
    g = random_graph(np.random.default_rng(2), 9)
    a = forward_pass(g, stack, params, buffers)
    b = forward_pass(g, stack, params, buffers)
    np.testing.assert_array_equal(a, b)


def test_locality_on_path_graph():
    """With L layers, node 0 cannot see features L+1 or more hops away."""
    n, layers = 8, 3
    pos = np.c_[np.arange(n) * 6.0 + 5, np.full(n, 30.0)]
    g = normalize_graph(PoseGraph.from_pairs(pos, [(i, i + 1) for i in range(n - 1)]), (64, 64), 20)
    stack, params, buffers = small_stack()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, 2))
    b = GraphBatch([g])
    base = stack.forward(params, buffers, b, x=x)
    far = x.copy()
    far[layers + 1:] += rng.standard_normal((n - layers - 1, 2)) * 5
    moved = stack.forward(params, buffers, b, x=far)
    np.testing.assert_array_equal(moved[0], base[0])
    near = x.copy()
    near[layers] += 5.0
    assert not np.allclose(stack.forward(params, buffers, b, x=near)[0], base[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(2, 15)))
    perm = rng.permutation(g.num_nodes)
    inv = np.argsort(perm)
    pg = PoseGraph(g.pos[perm], inv[g.edge_index], g.augmented, g.pseudo, g.feat[perm])
    stack, params, buffers = small_stack()
    a = forward_pass(g, stack, params, buffers, training=True)
    b = forward_pass(pg, stack, params, buffers, training=True)
    np.testing.assert_allclose(b, a[perm], atol=1e-10)


def test_default_conic_stack_smoke():
    g = random_graph(np.random.default_rng(7), 100, p_edge=0.03)
    cfg = StackConfig()
    assert cfg.num_layers == 10 and cfg.out_dim == 256
    stack = GNNStack(cfg)
    params, buffers = stack.init(np.random.default_rng(0))
    out = forward_pass(g, stack, params, buffers)
    assert out.shape == (100, 256) and np.isfinite(out).all()


def test_empty_graph_is_no_estimate():
    stack, params, buffers = small_stack()
    with pytest.raises(NoEstimate):
        forward_pass(normalize_graph(empty_graph(), (10, 10), 20), stack, params, buffers)


def test_unnormalised_graph_rejected():
    g = PoseGraph.from_pairs([[1.0, 1.0], [2.0, 2.0]], [[0, 1]])
    with pytest.raises(ValueError):
        GraphBatch([g])


# -- stack shape validation


def test_stack_shapes():
    assert StackConfig.conic().shape == "conic"
    b = StackConfig.biconic()
    assert b.feature_dims[0] == b.feature_dims[-1] == 32
    with pytest.raises(ValueError):
        StackConfig((8, 16, 8), (3, 3, 3), "conic")
    with pytest.raises(ValueError):
        StackConfig((8, 16, 64), (3, 4, 3), "biconic")
    with pytest.raises(ValueError):
        StackConfig((8, 16), (3,), "custom")


# -- backward


def fd_check_stack(seed, h=1e-5):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 8)
    stack, params, buffers = small_stack()
    b = GraphBatch([g])
    proj = rng.standard_normal((8, 5))

    def loss():
        return float((stack.forward(params, dict(buffers), b, training=True) * proj).sum())

    loss()
    grads = {}
    stack.backward(params, proj, grads)
    worst = 0.0
    for k, p in params.items():
        num = np.zeros_like(p)
        flat, nf = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            a = loss()
            flat[i] = old - h
            c = loss()
            flat[i] = old
            nf[i] = (a - c) / (2 * h)
        worst = max(worst, np.linalg.norm(num - grads[k]) / max(np.linalg.norm(num), 1e-12))
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_stack_gradients_match_finite_differences(seed):
    assert fd_check_stack(seed) < 1e-5


def test_zero_output_gradient_gives_zero_grads():
    stack, params, buffers = small_stack()
    g = random_graph(np.random.default_rng(0), 8)
    stack.forward(params, buffers, GraphBatch([g]), training=True)
    grads = {}
    dx = stack.backward(params, np.zeros((8, 5)), grads)
    assert all(not v.any() for v in grads.values()) and not dx.any()


def test_gradient_is_linear_in_output_gradient():
    stack, params, buffers = small_stack()
    g = random_graph(np.random.default_rng(0), 8)
    stack.forward(params, buffers, GraphBatch([g]), training=True)
    rng = np.random.default_rng(1)
    d1, d2 = rng.standard_normal((2, 8, 5))
    g1, g2, g12 = {}, {}, {}
    stack.backward(params, d1, g1)
    stack.backward(params, d2, g2)
    stack.backward(params, d1 + d2, g12)
    for k in g12:
        np.testing.assert_allclose(g12[k], g1[k] + g2[k], atol=1e-10)


def test_backward_needs_forward():
    stack, params, _ = small_stack()
    with pytest.raises(RuntimeError):
        stack.backward(params, np.zeros((3, 5)), {})
