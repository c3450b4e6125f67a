"""Synthetic stick-figure event streams with ground truth.

A figure is a set of capsules (limbs) and a disc (head) whose joint angles
follow sinusoids. Rendering the figure every ``step_us`` and differencing
consecutive binary masks gives the pixels an edge crossed; each such pixel
fires a Poisson number of events (ON where the figure arrived, OFF where it
left). Uniform noise events are added on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import FrameRecord, frames_from_stream
from .events import SurfaceConfig, make_events
from .lines import DetectorConfig
from .pooling import J, LIMB_INDEX, N_JOINTS
from .training import GroundTruthPose


@dataclass(frozen=True)
class StickFigureScene:
    resolution: tuple[int, int] = (160, 120)
    height_frac: float = 0.75  # figure height relative to image height
    limb_thickness: float = 2.5  # capsule radius, pixels
    motion: float = 1.0  # amplitude scale for every joint angle and the root path; 0 is static
    travel: float = 0.2  # horizontal root excursion, fraction of the width
    speed: float = 2.0  # frequency scale
    edge_event_rate: float = 2.0  # mean events per pixel crossed by an edge
    noise_rate: float = 2000.0  # uniform noise events per second over the sensor
    step_us: int = 1000
    gt_rate_hz: float = 100.0

    def __post_init__(self):
        if min(self.resolution) <= 0:
            raise ValueError("resolution must be positive")
        if self.step_us <= 0 or self.gt_rate_hz <= 0:
            raise ValueError("step_us and gt_rate_hz must be positive")
        if self.edge_event_rate < 0 or self.noise_rate < 0:
            raise ValueError("event rates must be non-negative")


@dataclass(frozen=True)
class FigureMotion:
    """Per-sequence random motion parameters (angles in radians)."""

    base: np.ndarray  # (n_angles,)
    amp: np.ndarray
    freq: np.ndarray  # Hz
    phase: np.ndarray
    root: np.ndarray  # (2,) pelvis position at rest, pixels
    root_amp: np.ndarray  # (2,)
    root_freq: np.ndarray
    root_phase: np.ndarray

    # torso lean, r shoulder, r elbow, l shoulder, l elbow, r hip, r knee, l hip, l knee
    N_ANGLES = 9

    @classmethod
    def random(cls, rng, scene: StickFigureScene) -> "FigureMotion":
        w, h = scene.resolution
        fig_h = scene.height_frac * h
        base = np.array([0.0, -0.4, -0.3, 0.4, 0.3, -0.1, 0.2, 0.1, -0.2]) + rng.normal(0, 0.15, cls.N_ANGLES)
        amp = np.array([0.15, 1.0, 0.8, 1.0, 0.8, 0.5, 0.6, 0.5, 0.6]) * rng.uniform(0.5, 1.0, cls.N_ANGLES)
        return cls(
            base=base,
            amp=amp,
            freq=rng.uniform(0.5, 1.5, cls.N_ANGLES),
            phase=rng.uniform(0, 2 * np.pi, cls.N_ANGLES),
            root=np.array([w / 2, 0.1 * h + 0.55 * fig_h]) + rng.normal(0, 0.05, 2) * (w, h),
            root_amp=rng.uniform(0.25, 1.0, 2) * (scene.travel * w, 0.02 * h),
            root_freq=rng.uniform(0.2, 0.6, 2),
            root_phase=rng.uniform(0, 2 * np.pi, 2),
        )


def _unit(angle):
    """Direction pointing down the image for angle 0, rotating towards +x."""
    return np.array([np.sin(angle), np.cos(angle)])


def joint_positions(motion: FigureMotion, scene: StickFigureScene, t_s: float) -> np.ndarray:
    """(13, 2) joint pixels at time ``t_s`` seconds."""
    m, s = scene.motion, scene.speed
    a = motion.base + m * motion.amp * np.sin(2 * np.pi * s * motion.freq * t_s + motion.phase)
    root = motion.root + m * motion.root_amp * np.sin(2 * np.pi * s * motion.root_freq * t_s + motion.root_phase)
    h = scene.height_frac * scene.resolution[1]
    up = -_unit(a[0])
    side = np.array([-up[1], up[0]])  # towards image +x when upright
    neck = root + 0.30 * h * up
    out = np.zeros((N_JOINTS, 2))
    out[J["head"]] = neck + 0.12 * h * up
    out[J["shoulder_r"]] = neck - 0.10 * h * side
    out[J["shoulder_l"]] = neck + 0.10 * h * side
    out[J["hip_r"]] = root - 0.07 * h * side
    out[J["hip_l"]] = root + 0.07 * h * side
    # right limbs swing on the image-left side, so their angles are mirrored
    for side_name, sign, (i_sh, i_el, i_hip, i_kn) in (("r", -1, (1, 2, 5, 6)), ("l", 1, (3, 4, 7, 8))):
        sh, hip = out[J[f"shoulder_{side_name}"]], out[J[f"hip_{side_name}"]]
        elbow = sh + 0.15 * h * _unit(a[0] + sign * a[i_sh])
        out[J[f"elbow_{side_name}"]] = elbow
        out[J[f"wrist_{side_name}"]] = elbow + 0.14 * h * _unit(a[0] + sign * (a[i_sh] + a[i_el]))
        knee = hip + 0.22 * h * _unit(sign * a[i_hip])
        out[J[f"knee_{side_name}"]] = knee
        out[J[f"ankle_{side_name}"]] = knee + 0.22 * h * _unit(sign * (a[i_hip] + a[i_kn]))
    return out


def visibility(joints: np.ndarray, resolution) -> np.ndarray:
    w, h = resolution
    return (joints[:, 0] >= 0) & (joints[:, 0] < w) & (joints[:, 1] >= 0) & (joints[:, 1] < h)


@dataclass
class Raster:
    """Pixel-centre grid reused across frames."""

    resolution: tuple[int, int]
    px: np.ndarray = field(init=False)
    py: np.ndarray = field(init=False)

    def __post_init__(self):
        w, h = self.resolution
        self.py, self.px = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5

    def capsules(self, segments, radius) -> np.ndarray:
        mask = np.zeros(self.px.shape, bool)
        for (ax, ay), (bx, by) in segments:
            # bounding box keeps the work proportional to limb area
            x0 = max(int(min(ax, bx) - radius) - 1, 0)
            x1 = min(int(max(ax, bx) + radius) + 2, self.resolution[0])
            y0 = max(int(min(ay, by) - radius) - 1, 0)
            y1 = min(int(max(ay, by) + radius) + 2, self.resolution[1])
            if x0 >= x1 or y0 >= y1:
                continue
            px, py = self.px[y0:y1, x0:x1], self.py[y0:y1, x0:x1]
            dx, dy = bx - ax, by - ay
            L2 = dx * dx + dy * dy
            t = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0, 1) if L2 > 0 else 0.0
            mask[y0:y1, x0:x1] |= (px - ax - t * dx) ** 2 + (py - ay - t * dy) ** 2 <= radius * radius
        return mask


def render_figure(joints: np.ndarray, scene: StickFigureScene, raster: Raster | None = None) -> np.ndarray:
    raster = raster or Raster(scene.resolution)
    r = scene.limb_thickness
    limbs = [(joints[a], joints[b]) for a, b in LIMB_INDEX if J["head"] not in (a, b)]
    mask = raster.capsules(limbs, r)
    head = joints[J["head"]]
    mask |= raster.capsules([(head, head)], 0.06 * scene.height_frac * scene.resolution[1])
    return mask


def events_from_masks(masks, times_us, scene: StickFigureScene, rng) -> np.ndarray:
    """Events for every consecutive mask pair plus noise, time-sorted."""
    w, h = scene.resolution
    chunks = []
    prev = masks[0]
    for mask, t1, t0 in zip(masks[1:], times_us[1:], times_us[:-1]):
        on = mask & ~prev
        off = prev & ~mask
        prev = mask
        parts = []
        for sel, pol in ((on, 1), (off, 0)):
            ys, xs = np.nonzero(sel)
            if len(xs) == 0 or scene.edge_event_rate == 0:
                continue
            k = rng.poisson(scene.edge_event_rate, len(xs))
            parts.append((np.repeat(xs, k), np.repeat(ys, k), np.full(int(k.sum()), pol)))
        n_noise = rng.poisson(scene.noise_rate * (t1 - t0) * 1e-6)
        if n_noise:
            parts.append((rng.integers(0, w, n_noise), rng.integers(0, h, n_noise), rng.integers(0, 2, n_noise)))
        if not parts:
            continue
        x = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        p = np.concatenate([p[2] for p in parts])
        t = rng.integers(t0, t1, len(x))
        order = np.argsort(t, kind="stable")
        chunks.append(make_events(x[order], y[order], t[order], p[order]))
    if not chunks:
        return make_events([], [], [], [])
    return np.concatenate(chunks)


@dataclass
class SynthResult:
    events: np.ndarray
    gt: list[tuple[int, GroundTruthPose]]


def synth_generate(scene: StickFigureScene, duration_s: float, seed: int = 0,
                   motion: FigureMotion | None = None) -> SynthResult:
    """Events and ground truth for one figure over ``duration_s`` seconds."""
    rng = np.random.default_rng(seed)
    motion = motion or FigureMotion.random(rng, scene)
    raster = Raster(scene.resolution)
    n_steps = int(round(duration_s * 1e6 / scene.step_us))
    times = np.arange(n_steps + 1, dtype=np.int64) * scene.step_us
    masks = [render_figure(joint_positions(motion, scene, t * 1e-6), scene, raster) for t in times]
    events = events_from_masks(masks, times, scene, rng)
    period = 1e6 / scene.gt_rate_hz
    gt = []
    for k in range(int(np.floor(duration_s * 1e6 / period)) + 1):
        t = int(round(k * period))
        joints = joint_positions(motion, scene, t * 1e-6)
        gt.append((t, GroundTruthPose(joints, visibility(joints, scene.resolution))))
    return SynthResult(events, gt)


def moving_limb_events(scene: StickFigureScene, start, end, velocity, duration_s: float,
                       seed: int = 0) -> np.ndarray:
    """Events from a single capsule from ``start`` to ``end`` translating at ``velocity`` px/s."""
    rng = np.random.default_rng(seed)
    raster = Raster(scene.resolution)
    n_steps = int(round(duration_s * 1e6 / scene.step_us))
    times = np.arange(n_steps + 1, dtype=np.int64) * scene.step_us
    a, b, v = (np.asarray(p, float) for p in (start, end, velocity))
    masks = [raster.capsules([(a + v * t * 1e-6, b + v * t * 1e-6)], scene.limb_thickness) for t in times]
    return events_from_masks(masks, times, scene, rng)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetConfig:
    scene: StickFigureScene = StickFigureScene()
    n_sequences: int = 10
    samples_per_sequence: int = 20
    sample_every: int = 5  # keep every k-th ground-truth pose
    warmup_s: float = 0.05
    # a quarter of the default block size, matching the quarter-size sensor
    block_size: int = 10
    fifo_capacity: int = 128
    detector: DetectorConfig = DetectorConfig()


def make_sequence(cfg: DatasetConfig, seed: int) -> list[FrameRecord]:
    sc = cfg.scene
    period_us = 1e6 / sc.gt_rate_hz
    duration = cfg.warmup_s + cfg.samples_per_sequence * cfg.sample_every * period_us * 1e-6
    res = synth_generate(sc, duration, seed)
    warm_us = cfg.warmup_s * 1e6
    picks = [t for t, _ in res.gt if t >= warm_us][:: cfg.sample_every][: cfg.samples_per_sequence]
    surface_cfg = SurfaceConfig(*sc.resolution, block_size=cfg.block_size, fifo_capacity=cfg.fifo_capacity)
    return frames_from_stream(res.events, res.gt, surface_cfg, cfg.detector, picks, seed=seed)


def make_dataset(cfg: DatasetConfig = DatasetConfig(), seed: int = 0) -> list[list[FrameRecord]]:
    """One list of frames per sequence; sequence ``i`` uses seed ``(seed, i)``."""
    seeds = np.random.SeedSequence(seed).spawn(cfg.n_sequences)
    return [make_sequence(cfg, int(s.generate_state(1)[0])) for s in seeds]
