"""Text formats for estimated and ground-truth poses.

Both formats hold one line per timestamp, joints in :data:`JOINTS` order::

    poses:         t x0 y0 c0 x1 y1 c1 ... x12 y12 c12     (c = confidence)
    ground truth:  t x0 y0 v0 x1 y1 v1 ... x12 y12 v12     (v = 1 visible, 0 hidden)

``t`` is an integer timestamp in microseconds. Blank lines and lines starting
with ``#`` are ignored.
"""

from __future__ import annotations

from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .events import EventFormatError
from .pooling import N_JOINTS, PoseEstimate
from .training import GroundTruthPose

N_FIELDS = 1 + 3 * N_JOINTS


def format_pose(t: int, est: PoseEstimate) -> str:
    parts = [str(int(t))]
    for (x, y), c in zip(est.joints, est.confidence):
        parts += [f"{x:.3f}", f"{y:.3f}", f"{c:.4f}"]
    return " ".join(parts)


def format_ground_truth(t: int, gt: GroundTruthPose) -> str:
    parts = [str(int(t))]
    for (x, y), v in zip(gt.joints, gt.visible):
        parts += [f"{x:.3f}", f"{y:.3f}", "1" if v else "0"]
    return " ".join(parts)


def _write(path, lines: Iterable[str]) -> None:
    text = "".join(line + "\n" for line in lines)
    if hasattr(path, "write"):
        path.write(text)
    else:
        Path(path).write_text(text)


def write_poses(path: str | Path | IO[str], frames: Iterable[tuple[int, PoseEstimate]]) -> None:
    _write(path, (format_pose(t, est) for t, est in frames))


def write_ground_truth(path: str | Path | IO[str], frames: Iterable[tuple[int, GroundTruthPose]]) -> None:
    _write(path, (format_ground_truth(t, gt) for t, gt in frames))


def _rows(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != N_FIELDS:
                raise EventFormatError(f"{path}: line {lineno}: expected {N_FIELDS} fields, got {len(parts)}")
            try:
                t = int(parts[0])
                vals = np.array([float(p) for p in parts[1:]]).reshape(N_JOINTS, 3)
            except ValueError as exc:
                raise EventFormatError(f"{path}: line {lineno}: {exc}") from None
            if not np.isfinite(vals).all():
                raise EventFormatError(f"{path}: line {lineno}: non-finite value")
            yield lineno, t, vals


def read_poses(path: str | Path) -> list[tuple[int, PoseEstimate]]:
    return [(t, PoseEstimate(v[:, :2], v[:, 2])) for _, t, v in _rows(path)]


def read_ground_truth(path: str | Path, resolution: tuple[int, int] | None = None
                      ) -> list[tuple[int, GroundTruthPose]]:
    """Parse a ground-truth file; visible joints must lie inside ``resolution``."""
    out = []
    last = None
    for lineno, t, v in _rows(path):
        if last is not None and t < last:
            raise EventFormatError(f"{path}: line {lineno}: timestamp {t} precedes {last}")
        last = t
        flags = v[:, 2]
        if not np.isin(flags, (0.0, 1.0)).all():
            raise EventFormatError(f"{path}: line {lineno}: visibility flags must be 0 or 1")
        vis = flags == 1.0
        if resolution is not None:
            w, h = resolution
            xy = v[vis, :2]
            if ((xy < 0) | (xy >= (w, h))).any():
                raise EventFormatError(f"{path}: line {lineno}: visible joint outside {w}x{h}")
        out.append((t, GroundTruthPose(v[:, :2], vis)))
    return out
