"""Losses, training paradigms and the optimisation loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gnn import GraphBatch
from .graph import PoseGraph
from .metrics import mpjpe, pck
from .model import ModelConfig, PoseNet
from .pooling import N_JOINTS, JointHypotheses, PoseEstimate

log = logging.getLogger(__name__)

PARADIGMS = ("together", "node_only", "target_only", "staggered")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class GroundTruthPose:
    joints: np.ndarray  # (13, 2) pixels
    visible: np.ndarray = None  # (13,) bool

    def __post_init__(self):
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=np.float64).reshape(N_JOINTS, 2))
        vis = np.ones(N_JOINTS, bool) if self.visible is None else np.asarray(self.visible, bool)
        object.__setattr__(self, "visible", vis)


@dataclass(frozen=True)
class Sample:
    graph: PoseGraph  # normalised
    gt: GroundTruthPose
    t: int = 0


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError("alpha, beta must be >= 0 and not both zero")


# ---------------------------------------------------------------------------
# losses (batched forms return gradients too)


def target_loss_batch(joints, gt, vis):
    """Mean over samples of the per-sample MSE over visible joints and both axes."""
    diff = joints - gt
    n_vis = vis.sum(axis=1)
    if (n_vis == 0).any():
        raise ValueError("sample without visible joints")
    B = len(joints)
    scale = (vis / (2.0 * n_vis[:, None]))[:, :, None]
    loss = float((diff ** 2 * scale).sum() / B)
    return loss, 2.0 * diff * scale / B


def node_loss_batch(hypotheses, gt, vis, ptr, gid, mean_over_nodes=False):
    """Mean over samples of sum_i sum_j MSE(node i's hypothesis for joint j, gt_j).

    The per-(node, joint) MSE averages the two coordinates; invisible joints
    contribute nothing. ``mean_over_nodes`` divides each sample's sum by its
    node count.
    """
    diff = hypotheses - gt[gid]
    B = len(gt)
    scale = vis[gid].astype(np.float64)[:, :, None] * 0.5
    if mean_over_nodes:
        scale = scale / np.diff(ptr)[gid][:, None, None]
    loss = float((diff ** 2 * scale).sum() / B)
    return loss, 2.0 * diff * scale / B


def target_loss(est, gt: GroundTruthPose) -> float:
    joints = est.joints if isinstance(est, PoseEstimate) else np.asarray(est, np.float64)
    loss, _ = target_loss_batch(joints[None], gt.joints[None], gt.visible[None])
    return loss


def node_loss(g, hyp: JointHypotheses, gt: GroundTruthPose, mean_over_nodes=False) -> float:
    n = len(g.pos)
    if n == 0:
        raise ValueError("node loss needs at least one node")
    h = g.pos[:, None, :] + hyp.offsets
    loss, _ = node_loss_batch(h, gt.joints[None], gt.visible[None], np.array([0, n]),
                              np.zeros(n, np.int64), mean_over_nodes)
    return loss


def total_loss(l_target: float, l_node: float, w: LossWeights) -> float:
    return w.alpha * l_target + w.beta * l_node


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class TrainingParadigm:
    kind: str = "together"
    together: LossWeights = LossWeights(1.0, 1.0)
    phase_epochs: tuple[int, int] = (20, 50)  # staggered only

    def __post_init__(self):
        if self.kind not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.kind!r}")

    def weights(self, epoch: int) -> LossWeights:
        """Loss weights for a 0-based epoch."""
        if self.kind == "node_only":
            return LossWeights(0.0, 1.0)
        if self.kind == "target_only":
            return LossWeights(1.0, 0.0)
        if self.kind == "staggered":
            return LossWeights(0.0, 1.0) if epoch < self.phase_epochs[0] else LossWeights(1.0, 1.0)
        return self.together

    def epochs(self, default: int) -> int:
        return sum(self.phase_epochs) if self.kind == "staggered" else default

    def schedule(self, default_epochs: int) -> list[LossWeights]:
        return [self.weights(e) for e in range(self.epochs(default_epochs))]


# ---------------------------------------------------------------------------
# optimiser


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 5.0


class Adam:
    def __init__(self, params: dict, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> float:
        """Clip by global norm, update in place, return the pre-clip norm."""
        norm = math.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in params))
        if not math.isfinite(norm):
            raise TrainingDiverged("non-finite gradient norm")
        scale = min(1.0, self.cfg.clip_norm / norm) if norm > 0 else 1.0
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in params.items():
            g = grads[k] * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= (self.cfg.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.cfg.eps)).astype(p.dtype)
        return norm


# ---------------------------------------------------------------------------
# loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    node_loss_mean: bool = False
    pck_p: float = 0.4
    optimizer: OptimizerConfig = OptimizerConfig()


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    alpha: float
    beta: float
    train_loss: float
    l_target: float  # validation
    l_node: float
    pck04: float
    mpjpe: float


@dataclass
class TrainResult:
    net: PoseNet
    history: list[EpochRecord] = field(default_factory=list)


def _stack_gt(samples):
    gt = np.stack([s.gt.joints for s in samples])
    vis = np.stack([s.gt.visible for s in samples])
    return gt, vis


def loss_and_grads(net: PoseNet, samples, w: LossWeights, node_loss_mean=False, training=True):
    """Forward, both losses, and (when ``training``) parameter gradients of the weighted sum.

    Gradients are skipped (``None``) when the loss is not finite.
    """
    batch = GraphBatch([s.graph for s in samples])
    out = net.forward(batch, training=training)
    gt, vis = _stack_gt(samples)
    lt, d_joints = target_loss_batch(out.joints, gt, vis)
    ln, d_hyp = node_loss_batch(out.pooled.hypotheses, gt, vis, batch.ptr, batch.graph_id, node_loss_mean)
    total = total_loss(lt, ln, w)
    grads = None
    if training and math.isfinite(total):
        grads = net.backward(w.alpha * d_joints, w.beta * d_hyp)
    return total, lt, ln, out, grads


def predict_samples(net: PoseNet, samples, batch_size=32) -> np.ndarray:
    preds = []
    for i in range(0, len(samples), batch_size):
        out = net.forward([s.graph for s in samples[i:i + batch_size]], training=False)
        preds.append(out.joints)
    return np.concatenate(preds)


def validate(net: PoseNet, samples, cfg: TrainConfig, batch_size=32) -> tuple[float, float, float, float]:
    lts, lns, preds = [], [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        _, lt, ln, out, _ = loss_and_grads(net, chunk, LossWeights(1, 1), cfg.node_loss_mean, training=False)
        lts.append(lt * len(chunk))
        lns.append(ln * len(chunk))
        preds.append(out.joints)
    n = len(samples)
    pred = np.concatenate(preds)
    gt, vis = _stack_gt(samples)
    return sum(lts) / n, sum(lns) / n, pck(pred, gt, cfg.pck_p, vis), mpjpe(pred, gt, vis)


def train(train_set, val_set, model_cfg: ModelConfig, paradigm: TrainingParadigm,
          cfg: TrainConfig = TrainConfig(), seed: int = 0, out_dir: str | Path | None = None,
          net: PoseNet | None = None) -> TrainResult:
    """Train a fresh (or given) network.

    Each epoch logs validation ``l_target``, ``l_node``, PCK and MPJPE; with
    ``out_dir`` set, it also appends to ``metrics.log`` and ``schedule.log``
    and rewrites ``checkpoint_latest.bin``.
    """
    if not train_set:
        raise ValueError("empty training set")
    val_set = val_set or train_set
    net = net or PoseNet(model_cfg, seed=seed)
    opt = Adam(net.params, cfg.optimizer)
    rng = np.random.default_rng(seed)
    result = TrainResult(net)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.log").write_text("")
        (out / "schedule.log").write_text("")
    best = -1.0
    for epoch in range(paradigm.epochs(cfg.epochs)):
        w = paradigm.weights(epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train_set[k] for k in order[i:i + cfg.batch_size]]
            total, lt, ln, _, grads = loss_and_grads(net, chunk, w, cfg.node_loss_mean)
            if not math.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}, batch {i // cfg.batch_size} "
                    f"(l_target={lt}, l_node={ln}, alpha={w.alpha}, beta={w.beta})")
            opt.step(net.params, grads)
            losses.append(total)
        lt, ln, p04, err = validate(net, val_set, cfg)
        rec = EpochRecord(epoch + 1, w.alpha, w.beta, float(np.mean(losses)), lt, ln, p04, err)
        result.history.append(rec)
        log.info("epoch %d alpha=%g beta=%g train=%.4g l_target=%.4g l_node=%.4g pck=%.3f mpjpe=%.2f",
                 rec.epoch, w.alpha, w.beta, rec.train_loss, lt, ln, p04, err)
        if out is not None:
            with open(out / "metrics.log", "a") as fh:
                fh.write(f"{rec.epoch} {lt:.6f} {ln:.6f} {p04:.6f} {err:.6f}\n")
            with open(out / "schedule.log", "a") as fh:
                fh.write(f"{rec.epoch} {w.alpha:g} {w.beta:g}\n")
            net.save(out / "checkpoint_latest.bin")
            if p04 > best:
                best = p04
                net.save(out / "checkpoint_best.bin")
    return result
