"""Experiment configuration files and ablation presets.

The file format is INI (read with :mod:`configparser`). Every key is
optional; missing keys take the defaults of the matching dataclass::

    [surface]
    width = 640
    height = 480
    block_size = 20
    fifo_capacity = 64
    inactive_margin = 10

    [detector]
    min_events = 10
    ransac_iters = 50
    inlier_dist = 1.5
    score_threshold = 0.3

    [graph]
    zeta = 15
    merge_tol = 0.5
    zeta_max = 40

    [model]
    shape = biconic              ; conic | biconic | custom
    feature_dims = 32,64,128     ; defaults to the shape's standard widths
    kernel_sizes = 3,4,5         ; n for n x n, or n x m
    pooling = single             ; single | axis_separated
    offset_scale = 50

    [training]
    paradigm = staggered         ; together | node_only | target_only | staggered
    alpha = 1                    ; together weights
    beta = 1
    node_epochs = 20             ; staggered phases
    joint_epochs = 50
    epochs = 50                  ; the other paradigms
    batch_size = 8
    node_loss_mean = false
    lr = 0.001
    clip_norm = 5
    pck_p = 0.4

    [data]
    train = data/train           ; dataset root (directory of sequences)
    val = data/val
    sample_every = 1
    warmup_us = 0

    [run]
    seed = 0
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .events import SurfaceConfig
from .gnn import BICONIC_DIMS, BICONIC_KERNELS, CONIC_DIMS, CONIC_KERNELS, StackConfig
from .lines import DetectorConfig
from .model import ModelConfig
from .training import LossWeights, OptimizerConfig, TrainConfig, TrainingParadigm


@dataclass(frozen=True)
class GraphConfig:
    zeta: float = 15.0
    merge_tol: float = 0.5
    zeta_max: float = 40.0


@dataclass(frozen=True)
class DataConfig:
    train: str | None = None
    val: str | None = None
    sample_every: int = 1
    warmup_us: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    surface: SurfaceConfig = SurfaceConfig(640, 480)
    detector: DetectorConfig = DetectorConfig()
    graph: GraphConfig = GraphConfig()
    model: ModelConfig = field(default_factory=ModelConfig)
    paradigm: TrainingParadigm = TrainingParadigm()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    seed: int = 0


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _kernels(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in text.replace(" ", "").split(","):
        if not item:
            continue
        a, _, b = item.partition("x")
        out.append((int(a), int(b or a)))
    return tuple(out)


def _stack(sec) -> StackConfig:
    shape = sec.get("shape", "conic")
    dims, kernels = {"conic": (CONIC_DIMS, CONIC_KERNELS), "biconic": (BICONIC_DIMS, BICONIC_KERNELS)}.get(
        shape, (None, None))
    if "feature_dims" in sec:
        dims = _ints(sec["feature_dims"])
    if "kernel_sizes" in sec:
        kernels = _kernels(sec["kernel_sizes"])
    if dims is None or kernels is None:
        raise ValueError("a custom stack needs feature_dims and kernel_sizes")
    return StackConfig(dims, kernels, shape, degree=sec.getint("degree", 1))


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_string(text)
    known = {"surface", "detector", "graph", "model", "training", "data", "run"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ValueError(f"unknown section(s) {sorted(unknown)}")
    s, d, g, m, t, data, run = (cp[n] if cp.has_section(n) else cp[cp.default_section] for n in
                                ("surface", "detector", "graph", "model", "training", "data", "run"))
    surface = SurfaceConfig(
        s.getint("width", 640), s.getint("height", 480), s.getint("block_size", 20),
        s.getint("fifo_capacity", 64), s.getint("inactive_margin") if "inactive_margin" in s else None,
    )
    detector = DetectorConfig(d.getint("min_events", 10), d.getint("ransac_iters", 50),
                              d.getfloat("inlier_dist", 1.5), d.getfloat("score_threshold", 0.3))
    graph = GraphConfig(g.getfloat("zeta", 15.0), g.getfloat("merge_tol", 0.5), g.getfloat("zeta_max", 40.0))
    model = ModelConfig(_stack(m), m.get("pooling", "single"), m.getfloat("offset_scale", 50.0))
    paradigm = TrainingParadigm(
        t.get("paradigm", "together"),
        LossWeights(t.getfloat("alpha", 1.0), t.getfloat("beta", 1.0)),
        (t.getint("node_epochs", 20), t.getint("joint_epochs", 50)),
    )
    opt = OptimizerConfig(lr=t.getfloat("lr", 1e-3), clip_norm=t.getfloat("clip_norm", 5.0))
    train = TrainConfig(t.getint("epochs", 50), t.getint("batch_size", 8), t.getboolean("node_loss_mean", False),
                        t.getfloat("pck_p", 0.4), opt)
    dc = DataConfig(data.get("train"), data.get("val"), data.getint("sample_every", 1), data.getint("warmup_us", 0))
    return ExperimentConfig(surface, detector, graph, model, paradigm, train, dc, run.getint("seed", 0))


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    st = cfg.model.stack
    sections = {
        "surface": {"width": cfg.surface.width, "height": cfg.surface.height, "block_size": cfg.surface.block_size,
                    "fifo_capacity": cfg.surface.fifo_capacity, "inactive_margin": cfg.surface.inactive_margin},
        "detector": {"min_events": cfg.detector.min_events, "ransac_iters": cfg.detector.ransac_iters,
                     "inlier_dist": cfg.detector.inlier_dist, "score_threshold": cfg.detector.score_threshold},
        "graph": {"zeta": cfg.graph.zeta, "merge_tol": cfg.graph.merge_tol, "zeta_max": cfg.graph.zeta_max},
        "model": {"shape": st.shape, "feature_dims": ",".join(map(str, st.feature_dims)),
                  "kernel_sizes": ",".join(f"{a}x{b}" for a, b in st.kernel_sizes), "degree": st.degree,
                  "pooling": cfg.model.pooling_mode, "offset_scale": cfg.model.offset_scale},
        "training": {"paradigm": cfg.paradigm.kind, "alpha": cfg.paradigm.together.alpha,
                     "beta": cfg.paradigm.together.beta, "node_epochs": cfg.paradigm.phase_epochs[0],
                     "joint_epochs": cfg.paradigm.phase_epochs[1], "epochs": cfg.train.epochs,
                     "batch_size": cfg.train.batch_size, "node_loss_mean": str(cfg.train.node_loss_mean).lower(),
                     "lr": cfg.train.optimizer.lr, "clip_norm": cfg.train.optimizer.clip_norm,
                     "pck_p": cfg.train.pck_p},
        "data": {k: v for k, v in (("train", cfg.data.train), ("val", cfg.data.val)) if v is not None}
        | {"sample_every": cfg.data.sample_every, "warmup_us": cfg.data.warmup_us},
        "run": {"seed": cfg.seed},
    }
    return "".join(f"[{name}]\n" + "".join(f"{k} = {v}\n" for k, v in body.items()) + "\n"
                   for name, body in sections.items())


# ---------------------------------------------------------------------------
# ablation grid


def _biconic_model(pooling: str = "single") -> ModelConfig:
    return ModelConfig(StackConfig.biconic(), pooling)


_BASE = ExperimentConfig(model=_biconic_model(), paradigm=TrainingParadigm("staggered"))

PRESETS: dict[str, ExperimentConfig] = {
    "baseline": _BASE,
    "dual_contribution": replace(_BASE, model=_biconic_model("axis_separated")),
    "no_augmentation": replace(_BASE, graph=GraphConfig(zeta=0.0)),
    "more_augmentation": replace(_BASE, graph=GraphConfig(zeta=20.0)),
    "feature_shape": replace(_BASE, model=ModelConfig(StackConfig.conic())),
    "node_only": replace(_BASE, paradigm=TrainingParadigm("node_only")),
    "target_only": replace(_BASE, paradigm=TrainingParadigm("target_only")),
    "together": replace(_BASE, paradigm=TrainingParadigm("together")),
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
