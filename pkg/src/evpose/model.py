"""The full network: spline-conv stack, pooling head and joint pooling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .gnn import GNNStack, GraphBatch, StackConfig
from .pooling import (
    MODES,
    JointHypotheses,
    PoolingHead,
    PoolResult,
    PoseEstimate,
    pool_batch,
    pool_batch_backward,
)


@dataclass(frozen=True)
class ModelConfig:
    stack: StackConfig = field(default_factory=StackConfig)
    pooling_mode: str = "single"
    offset_scale: float = 50.0

    def __post_init__(self):
        if self.pooling_mode not in MODES:
            raise ValueError(f"unknown pooling mode {self.pooling_mode!r}; expected one of {MODES}")
        if not self.offset_scale > 0:
            raise ValueError("offset_scale must be positive")


@dataclass
class NetOutput:
    hyp: JointHypotheses
    pooled: PoolResult

    @property
    def joints(self) -> np.ndarray:
        return self.pooled.joints


def _as_batch(graphs) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, (list, tuple)):
        return GraphBatch(list(graphs))
    return GraphBatch([graphs])


class PoseNet:
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or ModelConfig()
        self.stack = GNNStack(self.cfg.stack)
        self.head = PoolingHead(self.cfg.stack.out_dim, self.cfg.pooling_mode, self.cfg.offset_scale)
        rng = np.random.default_rng(seed)
        self.params, self.buffers = self.stack.init(rng, dtype)
        self.params.update(self.head.init_params(rng, dtype))
        self._cache = None

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def forward(self, graphs, training: bool = False) -> NetOutput:
        batch = _as_batch(graphs)
        feats = self.stack.forward(self.params, self.buffers, batch, training=training)
        hyp = self.head.forward(self.params, feats)
        pooled = pool_batch(batch.pos, hyp, batch.ptr, batch.graph_id)
        self._cache = (batch, feats, pooled)
        return NetOutput(hyp, pooled)

    def backward(self, d_joints, d_offsets=None) -> dict[str, np.ndarray]:
        """Reverse pass from d(loss)/d(joints) and optionally d(loss)/d(offsets).

        Returns gradients for every parameter plus ``"input"`` for the
        node input features.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        batch, feats, pooled = self._cache
        d_off, d_conf = pool_batch_backward(pooled, d_joints, batch.ptr, batch.graph_id,
                                            self.head.mode)
        if d_offsets is not None:
            d_off = d_off + d_offsets
        grads: dict[str, np.ndarray] = {}
        d_feats = self.head.backward(self.params, feats, d_off, d_conf, grads)
        grads["input"] = self.stack.backward(self.params, d_feats, grads)
        return grads

    def predict(self, graph) -> PoseEstimate:
        out = self.forward([graph])
        return PoseEstimate(out.joints[0], out.pooled.confidence[0])

    # -- persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"checkpoint mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, v in state.items():
            target = self.params if k in self.params else self.buffers
            if target[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != expected {target[k].shape}")
            target[k] = np.array(v, dtype=self.dtype)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_checkpoint(path))
