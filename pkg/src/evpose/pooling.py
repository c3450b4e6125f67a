"""Offset + confidence pooling head.

Every node proposes, for each joint, a position relative to itself plus a
raw confidence. Confidences are turned into weights with a softmax over the
nodes of one graph (per axis when the head is axis-separated), and a joint
lands at the weighted mean of its hypotheses. Softmax keeps the estimate a
convex combination of hypotheses, so it always lies between them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gnn import GraphBatch, NoEstimate

JOINTS = (
    "head", "shoulder_r", "shoulder_l", "hip_l", "hip_r", "elbow_r", "elbow_l",
    "wrist_r", "wrist_l", "knee_r", "knee_l", "ankle_r", "ankle_l",
)
N_JOINTS = len(JOINTS)
J = {name: i for i, name in enumerate(JOINTS)}

# skeleton drawn between these joint pairs
LIMBS = (
    ("head", "shoulder_r"), ("head", "shoulder_l"), ("shoulder_r", "shoulder_l"),
    ("shoulder_r", "elbow_r"), ("elbow_r", "wrist_r"),
    ("shoulder_l", "elbow_l"), ("elbow_l", "wrist_l"),
    ("shoulder_r", "hip_r"), ("shoulder_l", "hip_l"), ("hip_r", "hip_l"),
    ("hip_r", "knee_r"), ("knee_r", "ankle_r"),
    ("hip_l", "knee_l"), ("knee_l", "ankle_l"),
)
LIMB_INDEX = tuple((J[a], J[b]) for a, b in LIMBS)

MODES = ("single", "axis_separated")


@dataclass
class JointHypotheses:
    offsets: np.ndarray  # (N, 13, 2) pixels
    raw_conf: np.ndarray  # (N, 13, 1) single, (N, 13, 2) axis separated


@dataclass
class PoseEstimate:
    joints: np.ndarray  # (13, 2) pixels, JOINTS order
    confidence: np.ndarray  # (13,) in [0, 1]


class PoolingHead:
    """Linear map from node features to offsets and raw confidences.

    Offsets are the linear output times ``offset_scale`` pixels, which keeps
    the learned weights at unit scale.
    """

    def __init__(self, in_dim: int, mode: str = "single", offset_scale: float = 50.0, name="head"):
        if mode not in MODES:
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.in_dim, self.mode, self.offset_scale, self.name = in_dim, mode, offset_scale, name
        self.n_conf = 1 if mode == "single" else 2
        self.out_dim = N_JOINTS * (2 + self.n_conf)

    def init_params(self, rng, dtype=np.float32) -> dict:
        bound = np.sqrt(6.0 / (self.in_dim + self.out_dim))
        return {
            f"{self.name}.weight": rng.uniform(-bound, bound, (self.in_dim, self.out_dim)).astype(dtype),
            f"{self.name}.bias": np.zeros(self.out_dim, dtype),
        }

    def forward(self, params, feats) -> JointHypotheses:
        W = params[f"{self.name}.weight"]
        if feats.shape[1] != self.in_dim:
            raise ValueError(f"head expects {self.in_dim} features, got {feats.shape[1]}")
        out = feats @ W + params[f"{self.name}.bias"]
        n = len(feats)
        k = 2 * N_JOINTS
        return JointHypotheses(
            offsets=out[:, :k].reshape(n, N_JOINTS, 2) * self.offset_scale,
            raw_conf=out[:, k:].reshape(n, N_JOINTS, self.n_conf),
        )

    def backward(self, params, feats, d_offsets, d_conf, grads) -> np.ndarray:
        n = len(feats)
        dout = np.concatenate(
            [d_offsets.reshape(n, -1) * self.offset_scale, d_conf.reshape(n, -1)], axis=1
        )
        grads[f"{self.name}.weight"] = feats.T @ dout
        grads[f"{self.name}.bias"] = dout.sum(axis=0)
        return dout @ params[f"{self.name}.weight"].T


@dataclass
class PoolResult:
    joints: np.ndarray  # (B, 13, 2)
    weights: np.ndarray  # (N, 13, 2) normalised per graph, joint and axis
    hypotheses: np.ndarray  # (N, 13, 2) node position + offset
    confidence: np.ndarray  # (B, 13)


def _segment_softmax(z, ptr, gid):
    starts = ptr[:-1]
    m = np.maximum.reduceat(z, starts, axis=0)
    e = np.exp(z - m[gid])
    s = np.add.reduceat(e, starts, axis=0)
    return e / s[gid]


def pool_batch(pos, hyp: JointHypotheses, ptr, gid) -> PoolResult:
    n = len(pos)
    if n == 0:
        raise NoEstimate("graph without nodes")
    z = np.broadcast_to(hyp.raw_conf, (n, N_JOINTS, 2))
    w = _segment_softmax(z, ptr, gid)
    h = pos[:, None, :] + hyp.offsets
    joints = np.add.reduceat(w * h, ptr[:-1], axis=0)
    # concentration: 1 - normalised entropy, averaged over the two axes
    sizes = np.diff(ptr)
    ent = np.add.reduceat(-w * np.log(np.maximum(w, 1e-300)), ptr[:-1], axis=0)
    norm = np.log(np.maximum(sizes, 2)).astype(w.dtype)[:, None, None]
    conc = np.where(sizes[:, None, None] > 1, 1.0 - ent / norm, 1.0).mean(axis=2)
    return PoolResult(joints, w, h, np.clip(conc, 0.0, 1.0))


def pool_batch_backward(res: PoolResult, d_joints, ptr, gid, mode) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. offsets and raw confidences given d(joints)."""
    dj = d_joints[gid]  # (N, 13, 2)
    d_offsets = res.weights * dj
    d_z = res.weights * (res.hypotheses - res.joints[gid]) * dj
    if mode == "single":
        d_z = d_z.sum(axis=2, keepdims=True)
    return d_offsets, d_z


def head_forward(node_feats, head: PoolingHead, params) -> JointHypotheses:
    return head.forward(params, node_feats)


def pool_joints(g, hyp: JointHypotheses, mode: str = "single") -> PoseEstimate:
    """Pool one graph's hypotheses into a pose."""
    if mode not in MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    if mode == "single" and hyp.raw_conf.shape[-1] != 1:
        raise ValueError("single mode needs one confidence per node and joint")
    pos = g.pos
    n = len(pos)
    if n == 0:
        raise NoEstimate("graph without nodes")
    res = pool_batch(pos, hyp, np.array([0, n]), np.zeros(n, np.int64))
    return PoseEstimate(res.joints[0], res.confidence[0])


def pool_graph_batch(batch: GraphBatch, hyp: JointHypotheses) -> PoolResult:
    return pool_batch(batch.pos, hyp, batch.ptr, batch.graph_id)
