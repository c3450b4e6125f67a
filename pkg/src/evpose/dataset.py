"""Training frames from event streams, and on-disk sequence directories.

A sequence directory holds ``events.txt`` (native event format) and
``gt.txt`` (native ground-truth format). A dataset root is a directory of
sequence directories, taken in sorted name order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import AccumulationSurface, SurfaceConfig, read_events, write_events
from .graph import build_graph
from .lines import DetectorConfig, LineSegment, detect_lines
from .poseio import read_ground_truth, write_ground_truth
from .training import GroundTruthPose, Sample


@dataclass(frozen=True)
class FrameRecord:
    """Line segments seen at time ``t`` plus the matching ground truth."""

    t: int
    segments: tuple[LineSegment, ...]
    gt: GroundTruthPose


def frames_from_stream(events, gt, surface_cfg: SurfaceConfig, detector: DetectorConfig,
                       times=None, seed: int = 0) -> list[FrameRecord]:
    """Replay ``events`` and detect lines at each ground-truth time in ``times``.

    Frames where no line is detected are dropped.
    """
    surface = AccumulationSurface(surface_cfg)
    wanted = {t for t, _ in gt} if times is None else set(times)
    out = []
    cursor = 0
    ts = events["t"]
    for t, pose in gt:
        if t not in wanted:
            continue
        end = int(np.searchsorted(ts, t, side="right"))
        surface.push_events(events[cursor:end])
        cursor = end
        segs = detect_lines(surface.snapshot(), detector, seed=seed)
        if segs:
            out.append(FrameRecord(t, tuple(segs), pose))
    return out


def split_sequences(seqs, n_val: int = 2):
    """Sequence-level split so validation poses never come from training motions."""
    train = [r for s in seqs[: len(seqs) - n_val] for r in s]
    val = [r for s in seqs[len(seqs) - n_val:] for r in s]
    return train, val


def records_to_samples(records, resolution, zeta=15.0, merge_tol=0.5, zeta_max=40.0) -> list[Sample]:
    return [Sample(build_graph(r.segments, resolution, zeta, merge_tol, zeta_max), r.gt, r.t)
            for r in records]


def write_sequence(seq_dir, events: np.ndarray, gt) -> Path:
    d = Path(seq_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_events(d / "events.txt", events)
    write_ground_truth(d / "gt.txt", gt)
    return d


def list_sequences(root) -> list[Path]:
    root = Path(root)
    seqs = sorted(p for p in root.iterdir() if (p / "events.txt").is_file() and (p / "gt.txt").is_file())
    if not seqs:
        raise FileNotFoundError(f"no sequence directories (events.txt + gt.txt) under {root}")
    return seqs


def load_sequence_frames(seq_dir, surface_cfg: SurfaceConfig, detector: DetectorConfig,
                         sample_every: int = 1, warmup_us: int = 0, seed: int = 0) -> list[FrameRecord]:
    d = Path(seq_dir)
    res = (surface_cfg.width, surface_cfg.height)
    events = read_events(d / "events.txt", res)
    gt = read_ground_truth(d / "gt.txt", res)
    picks = [t for t, _ in gt if t >= warmup_us][::sample_every]
    return frames_from_stream(events, gt, surface_cfg, detector, picks, seed=seed)
