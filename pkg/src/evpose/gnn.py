"""Spline-kernel graph convolutions with hand-written reverse mode.

A layer computes, for every node ``i``::

    out_i = x_i @ root + mean_{j -> i} sum_c B_c(u_ji) * (x_j @ W_c)

where ``u_ji`` are the edge pseudo-coordinates and ``B_c`` the tensor
product of open uniform B-spline bases. Layers are followed by batch
normalisation over nodes and a ReLU.

Parameters live in plain ``dict[str, ndarray]`` containers so the optimiser
and the checkpoint code can treat them uniformly.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import PoseGraph


class NoEstimate(Exception):
    """The input graph has no nodes, so no pose can be produced."""


# ---------------------------------------------------------------------------
# B-spline basis


@functools.lru_cache(maxsize=64)
def _knots(n_ctrl: int, degree: int) -> np.ndarray:
    n_inner = n_ctrl - degree - 1
    inner = np.linspace(0.0, 1.0, n_inner + 2)[1:-1]
    knots = np.r_[np.zeros(degree + 1), inner, np.ones(degree + 1)]
    knots.flags.writeable = False
    return knots


def open_uniform_knots(n_ctrl: int, degree: int) -> np.ndarray:
    return _knots(n_ctrl, degree).copy()


def basis_1d(u: np.ndarray, n_ctrl: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-zero basis functions at ``u`` (triangular de Boor scheme).

    Returns ``(index, weight)``, both shaped ``(len(u), degree + 1)``.
    """
    if degree == 1:
        # hat functions on a uniform grid
        t = u * (n_ctrl - 1)
        i = np.minimum(t.astype(np.int64), n_ctrl - 2)
        frac = t - i
        return np.stack([i, i + 1], axis=1), np.stack([1.0 - frac, frac], axis=1)
    knots = _knots(n_ctrl, degree)
    span = np.searchsorted(knots, u, side="right") - 1
    np.clip(span, degree, n_ctrl - 1, out=span)
    N = [np.ones_like(u)]
    left = [None]
    right = [None]
    for j in range(1, degree + 1):
        left.append(u - knots[span + 1 - j])
        right.append(knots[span + j] - u)
        saved = 0.0
        for r in range(j):
            temp = N[r] / (right[r + 1] + left[j - r])
            N[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        N.append(saved)
    index = span[:, None] + np.arange(-degree, 1)
    return index, np.stack(N, axis=1)


def bspline_basis(u, kernel_size: tuple[int, int], degree: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product basis for pseudo-coordinates in the unit square.

    ``u`` is ``(M, 2)`` (or a single ``(2,)`` point). Returns flat control
    indices ``iu * kv + iv`` and weights, each ``(M, (degree + 1) ** 2)``.
    """
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    u = u.reshape(-1, 2)
    ku, kv = kernel_size
    if min(ku, kv) < degree + 1:
        raise ValueError(f"kernel size {kernel_size} too small for degree {degree}")
    if len(u) and not (u.min() >= 0.0 and u.max() <= 1.0):
        raise ValueError("pseudo-coordinates must lie in [0, 1]^2")
    iu, wu = basis_1d(u[:, 0], ku, degree)
    iv, wv = basis_1d(u[:, 1], kv, degree)
    d = degree + 1
    idx = np.repeat(iu, d, axis=1) * kv + np.tile(iv, (1, d))
    w = np.repeat(wu, d, axis=1) * np.tile(wv, (1, d))
    if single:
        return idx[0], w[0]
    return idx, w


# ---------------------------------------------------------------------------
# batched graphs


@dataclass
class SplinePlan:
    """Sparse operators for one (graph batch, kernel size) pair.

    ``gather`` maps node features to rows keyed by (kernel index, target
    node), already weighted by basis value and 1/in-degree; rows are sorted
    by kernel index with ``bounds`` delimiting each kernel's block.
    ``scatter`` sums transformed rows back onto their target nodes. Both are
    kept as raw CSR arrays and materialised per dtype on demand.
    """

    n_nodes: int
    gather_csr: tuple  # (data, indices, indptr)
    scatter_csr: tuple
    bounds: np.ndarray
    _typed: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return len(self.gather_csr[2]) - 1

    def ops(self, dtype, transposed=False):
        """``(gather, scatter)`` in ``dtype``, or their transposes."""
        key = (np.dtype(dtype), transposed)
        if key not in self._typed:
            if transposed:
                g, s = self.ops(dtype)
                self._typed[key] = (g.T.tocsr(), s.T.tocsr())
            else:
                (gd, gi, gp), (sd, si, spp) = self.gather_csr, self.scatter_csr
                P, n = self.n_rows, self.n_nodes
                self._typed[key] = (
                    sp.csr_matrix((gd.astype(dtype), gi, gp), shape=(P, n)),
                    sp.csr_matrix((sd.astype(dtype), si, spp), shape=(n, P)),
                )
        return self._typed[key]

    @property
    def gather(self) -> sp.csr_matrix:
        return self.ops(np.float64)[0]

    @property
    def scatter(self) -> sp.csr_matrix:
        return self.ops(np.float64)[1]


def _stable_argsort(key: np.ndarray) -> np.ndarray:
    """Stable argsort of non-negative integer keys.

    numpy radix-sorts 16-bit types, which is far quicker than its merge
    sort on wide integers, so keys below 2**32 go through two 16-bit passes.
    """
    top = int(key.max()) if len(key) else 0
    if top < 1 << 16:
        return np.argsort(key.astype(np.uint16), kind="stable")
    if top >= 1 << 32:
        return np.argsort(key, kind="stable")
    order = np.argsort((key & 0xFFFF).astype(np.uint16), kind="stable")
    return order[np.argsort((key[order] >> 16).astype(np.uint16), kind="stable")]


def build_plan(edge_index, pseudo, n_nodes, kernel_size, degree) -> SplinePlan:
    ku, kv = kernel_size
    K = ku * kv
    src, dst = edge_index
    if len(src) == 0:
        none = np.zeros(0, np.int64)
        return SplinePlan(n_nodes, (np.zeros(0), none, np.zeros(1, np.int64)),
                          (np.zeros(0), none, np.zeros(n_nodes + 1, np.int64)),
                          np.zeros(K + 1, np.int64))
    idx, w = bspline_basis(pseudo, kernel_size, degree)
    S = idx.shape[1]
    inv_deg = 1.0 / np.maximum(np.bincount(dst, minlength=n_nodes), 1)
    key = (idx * n_nodes + dst[:, None]).ravel()
    order = _stable_argsort(key)
    key = key[order]
    first = np.r_[True, key[1:] != key[:-1]]
    starts = np.flatnonzero(first)
    P = len(starts)
    e = order // S
    coef = w.ravel()[order] * inv_deg[dst[e]]
    gather = (coef, src[e], np.r_[starts, len(key)])
    row_key = key[starts]
    row_dst = row_key % n_nodes
    by_dst = _stable_argsort(row_dst)
    indptr = np.r_[0, np.cumsum(np.bincount(row_dst, minlength=n_nodes))]
    bounds = np.searchsorted(row_key // n_nodes, np.arange(K + 1))
    return SplinePlan(n_nodes, gather, (np.ones(P), by_dst, indptr), bounds)


class GraphBatch:
    """Several graphs concatenated with node-index offsets."""

    def __init__(self, graphs: list[PoseGraph]):
        if not graphs:
            raise ValueError("empty batch")
        for g in graphs:
            if g.num_nodes == 0:
                raise NoEstimate("graph without nodes")
            if g.pseudo is None or g.feat is None:
                raise ValueError("graphs must be normalised before batching")
        sizes = np.array([g.num_nodes for g in graphs])
        self.ptr = np.r_[0, np.cumsum(sizes)]
        offs = self.ptr[:-1]
        self.pos = np.concatenate([g.pos for g in graphs])
        self.feat = np.concatenate([g.feat for g in graphs])
        self.edge_index = np.concatenate([g.edge_index + o for g, o in zip(graphs, offs)], axis=1)
        self.pseudo = np.concatenate([g.pseudo for g in graphs])
        self.graph_id = np.repeat(np.arange(len(graphs)), sizes)
        self._plans: dict = {}

    @classmethod
    def of(cls, g: "PoseGraph | GraphBatch") -> "GraphBatch":
        return g if isinstance(g, GraphBatch) else cls([g])

    @property
    def num_graphs(self) -> int:
        return len(self.ptr) - 1

    @property
    def num_nodes(self) -> int:
        return int(self.ptr[-1])

    def plan(self, kernel_size, degree) -> SplinePlan:
        key = (tuple(kernel_size), degree)
        if key not in self._plans:
            self._plans[key] = build_plan(self.edge_index, self.pseudo, self.num_nodes,
                                          kernel_size, degree)
        return self._plans[key]


# ---------------------------------------------------------------------------
# layers


class SplineConv:
    def __init__(self, name, in_dim, out_dim, kernel_size, degree=1):
        ku, kv = kernel_size
        if min(ku, kv) < degree + 1:
            raise ValueError(f"kernel size {kernel_size} too small for degree {degree}")
        self.name = name
        self.in_dim, self.out_dim = in_dim, out_dim
        self.kernel_size = (ku, kv)
        self.degree = degree

    @property
    def n_kernels(self) -> int:
        return self.kernel_size[0] * self.kernel_size[1]

    def init_params(self, rng, dtype) -> dict:
        bound = np.sqrt(6.0 / (self.in_dim * (self.degree + 1) ** 2))
        return {
            f"{self.name}.weight": rng.uniform(-bound, bound, (self.n_kernels, self.in_dim, self.out_dim)).astype(dtype),
            f"{self.name}.root": rng.uniform(-bound, bound, (self.in_dim, self.out_dim)).astype(dtype),
        }

    def forward(self, params, batch: GraphBatch, x):
        W = params[f"{self.name}.weight"]
        root = params[f"{self.name}.root"]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: expected {self.in_dim} input features, got {x.shape[1]}")
        plan = batch.plan(self.kernel_size, self.degree)
        gather, scatter = plan.ops(x.dtype)
        out = x @ root
        if plan.n_rows:
            z = gather @ x
            msg = np.empty((z.shape[0], self.out_dim), dtype=x.dtype)
            b = plan.bounds
            for c in np.flatnonzero(b[1:] > b[:-1]):
                np.matmul(z[b[c]:b[c + 1]], W[c], out=msg[b[c]:b[c + 1]])
            out += scatter @ msg
        else:
            z = None
        return out, (x, z, plan)

    def backward(self, params, cache, dout, grads):
        W = params[f"{self.name}.weight"]
        root = params[f"{self.name}.root"]
        x, z, plan = cache
        gW = np.zeros_like(W)
        grads[f"{self.name}.root"] = x.T @ dout
        dx = dout @ root.T
        if z is not None:
            gather_t, scatter_t = plan.ops(x.dtype, transposed=True)
            dmsg = scatter_t @ dout
            dz = np.empty_like(z)
            b = plan.bounds
            for c in np.flatnonzero(b[1:] > b[:-1]):
                sl = slice(b[c], b[c + 1])
                gW[c] = z[sl].T @ dmsg[sl]
                dz[sl] = dmsg[sl] @ W[c].T
            dx += gather_t @ dz
        grads[f"{self.name}.weight"] = gW
        return dx


class BatchNorm:
    def __init__(self, name, dim, eps=1e-5, momentum=0.1):
        self.name, self.dim, self.eps, self.momentum = name, dim, eps, momentum

    def init_params(self, dtype):
        return {f"{self.name}.scale": np.ones(self.dim, dtype), f"{self.name}.shift": np.zeros(self.dim, dtype)}

    def init_buffers(self, dtype):
        return {f"{self.name}.running_mean": np.zeros(self.dim, dtype),
                f"{self.name}.running_var": np.ones(self.dim, dtype)}

    def forward(self, params, buffers, x, training):
        gamma = params[f"{self.name}.scale"]
        beta = params[f"{self.name}.shift"]
        if training:
            n = x.shape[0]
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            rm, rv = f"{self.name}.running_mean", f"{self.name}.running_var"
            unbiased = var * (n / (n - 1)) if n > 1 else var
            buffers[rm] = ((1 - self.momentum) * buffers[rm] + self.momentum * mu).astype(x.dtype)
            buffers[rv] = ((1 - self.momentum) * buffers[rv] + self.momentum * unbiased).astype(x.dtype)
        else:
            # folded into one multiply-add; nothing is needed for backward
            inv_std = 1.0 / np.sqrt(buffers[f"{self.name}.running_var"] + self.eps)
            a = gamma * inv_std
            out = x * a
            out += beta - buffers[f"{self.name}.running_mean"] * a
            return out, (None, inv_std, False)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        return xhat * gamma + beta, (xhat, inv_std, training)

    def backward(self, params, cache, dout, grads):
        xhat, inv_std, training = cache
        gamma = params[f"{self.name}.scale"]
        grads[f"{self.name}.scale"] = (dout * xhat).sum(axis=0)
        grads[f"{self.name}.shift"] = dout.sum(axis=0)
        dxhat = dout * gamma
        if not training:
            return dxhat * inv_std
        n = dout.shape[0]
        return inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


# ---------------------------------------------------------------------------
# stack


CONIC_DIMS = (16, 32, 32, 64, 64, 64, 128, 128, 128, 256)
CONIC_KERNELS = (3, 3, 4, 4, 5, 5, 6, 6, 7, 7)
BICONIC_DIMS = (32, 64, 128, 256, 256, 256, 128, 64, 64, 32)
BICONIC_KERNELS = (3, 4, 5, 6, 7, 7, 6, 5, 4, 3)


def _unimodal(seq) -> bool:
    i = 0
    while i + 1 < len(seq) and seq[i + 1] >= seq[i]:
        i += 1
    return all(seq[k + 1] <= seq[k] for k in range(i, len(seq) - 1))


@dataclass(frozen=True)
class StackConfig:
    """Per-layer feature widths and kernel sizes.

    ``shape`` is ``"conic"`` (non-decreasing, widest last), ``"biconic"``
    (rise then fall, first and last within a factor of two) or ``"custom"``
    (unchecked). Default widths are reconstructions; the shapes are what
    matter.
    """

    feature_dims: tuple[int, ...] = CONIC_DIMS
    kernel_sizes: tuple[tuple[int, int], ...] = tuple((k, k) for k in CONIC_KERNELS)
    shape: str = "conic"
    degree: int = 1
    in_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "feature_dims", tuple(int(d) for d in self.feature_dims))
        ks = tuple((int(k), int(k)) if np.isscalar(k) else tuple(int(v) for v in k) for k in self.kernel_sizes)
        object.__setattr__(self, "kernel_sizes", ks)
        if len(self.feature_dims) != len(self.kernel_sizes) or not self.feature_dims:
            raise ValueError("feature_dims and kernel_sizes must have the same non-zero length")
        if self.shape not in ("conic", "biconic", "custom"):
            raise ValueError(f"unknown stack shape {self.shape!r}")
        dims = self.feature_dims
        ks = [k[0] * k[1] for k in self.kernel_sizes]
        if self.shape == "conic":
            for seq in (dims, ks):
                if any(b < a for a, b in zip(seq, seq[1:])) or seq[-1] != max(seq):
                    raise ValueError("conic stacks must be non-decreasing with the maximum last")
        elif self.shape == "biconic":
            for seq in (dims, ks):
                if not _unimodal(seq) or max(seq[0], seq[-1]) > 2 * min(seq[0], seq[-1]):
                    raise ValueError("biconic stacks must rise then fall with similar ends")
        for k in self.kernel_sizes:
            if min(k) < self.degree + 1:
                raise ValueError(f"kernel size {k} too small for degree {self.degree}")

    @property
    def num_layers(self) -> int:
        return len(self.feature_dims)

    @property
    def out_dim(self) -> int:
        return self.feature_dims[-1]

    @classmethod
    def conic(cls, **kw) -> "StackConfig":
        return cls(**kw)

    @classmethod
    def biconic(cls, **kw) -> "StackConfig":
        kw.setdefault("feature_dims", BICONIC_DIMS)
        kw.setdefault("kernel_sizes", tuple((k, k) for k in BICONIC_KERNELS))
        return cls(shape="biconic", **kw)


class GNNStack:
    """conv -> batch norm -> ReLU, repeated."""

    def __init__(self, cfg: StackConfig, prefix: str = "gnn"):
        self.cfg = cfg
        self.convs = []
        self.norms = []
        d_in = cfg.in_dim
        for i, (d_out, ks) in enumerate(zip(cfg.feature_dims, cfg.kernel_sizes)):
            self.convs.append(SplineConv(f"{prefix}.{i}.conv", d_in, d_out, ks, cfg.degree))
            self.norms.append(BatchNorm(f"{prefix}.{i}.norm", d_out))
            d_in = d_out
        self._cache = None

    def init(self, rng, dtype=np.float32) -> tuple[dict, dict]:
        params, buffers = {}, {}
        for conv, norm in zip(self.convs, self.norms):
            params.update(conv.init_params(rng, dtype))
            params.update(norm.init_params(dtype))
            buffers.update(norm.init_buffers(dtype))
        return params, buffers

    def layer_forward(self, i, params, buffers, batch, x, training):
        h, c1 = self.convs[i].forward(params, batch, x)
        n, c2 = self.norms[i].forward(params, buffers, h, training)
        mask = n > 0 if training else None
        return np.maximum(n, 0, out=n), (c1, c2, mask)

    def forward(self, params, buffers, batch: GraphBatch, x=None, training=False):
        if batch.num_nodes == 0:
            raise NoEstimate("graph without nodes")
        dtype = params[self.convs[0].name + ".weight"].dtype
        x = (batch.feat if x is None else x).astype(dtype, copy=False)
        caches = []
        for i in range(len(self.convs)):
            x, c = self.layer_forward(i, params, buffers, batch, x, training)
            caches.append(c)
        self._cache = caches
        return x

    def backward(self, params, dout, grads) -> np.ndarray:
        """Accumulate parameter gradients into ``grads``; return d(input features)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        for i in reversed(range(len(self.convs))):
            c1, c2, mask = self._cache[i]
            if mask is None:
                raise RuntimeError("backward needs a forward pass with training=True")
            dout = self.norms[i].backward(params, c2, dout * mask, grads)
            dout = self.convs[i].backward(params, c1, dout, grads)
        return dout


def forward_pass(g, stack: GNNStack, params, buffers, training=False) -> np.ndarray:
    """Per-node output features for a graph or graph batch."""
    return stack.forward(params, buffers, GraphBatch.of(g), training=training)
