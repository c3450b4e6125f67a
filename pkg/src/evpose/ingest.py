"""Convert simple CSV dataset exports into the native event and pose files.

An export directory holds two files:

``events.csv``
    header ``timestamp_us,x,y,polarity``; one event per row, polarity 0 or 1,
    timestamps non-decreasing.
``joints.csv``
    header ``timestamp_us,joint,x,y,visible``; one row per joint, every
    timestamp lists all 13 joints once (names as in :data:`JOINTS`).

Converting the original dataset distributions into this layout is left to
the user; only the layout above is read here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventFormatError, make_events, write_events
from .pooling import J, JOINTS, N_JOINTS
from .poseio import write_ground_truth
from .training import GroundTruthPose

EH36M_RESOLUTION = (640, 480)
DHP19_RESOLUTION = (346, 260)

EVENT_HEADER = ["timestamp_us", "x", "y", "polarity"]
JOINT_HEADER = ["timestamp_us", "joint", "x", "y", "visible"]


def _rows(path: Path, header: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != header:
            raise EventFormatError(f"{path}: line 1: expected header {','.join(header)}")
        for row in reader:
            if not row or not "".join(row).strip():
                continue
            if len(row) != len(header):
                raise EventFormatError(f"{path}: line {reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, [c.strip() for c in row]


def read_event_csv(path, resolution) -> np.ndarray:
    w, h = resolution
    t, x, y, p = [], [], [], []
    last = None
    for lineno, (ts, xs, ys, ps) in _rows(Path(path), EVENT_HEADER):
        try:
            vals = int(ts), int(xs), int(ys), int(ps)
        except ValueError:
            raise EventFormatError(f"{path}: line {lineno}: non-integer field") from None
        ti, xi, yi, pi = vals
        if not (0 <= xi < w and 0 <= yi < h):
            raise EventFormatError(f"{path}: line {lineno}: ({xi}, {yi}) outside {w}x{h}")
        if pi not in (0, 1):
            raise EventFormatError(f"{path}: line {lineno}: polarity must be 0 or 1")
        if last is not None and ti < last:
            raise EventFormatError(f"{path}: line {lineno}: timestamp {ti} precedes {last}")
        last = ti
        t.append(ti)
        x.append(xi)
        y.append(yi)
        p.append(pi)
    return make_events(x, y, t, p)


def read_joint_csv(path, resolution) -> list[tuple[int, GroundTruthPose]]:
    w, h = resolution
    frames: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    order: list[int] = []
    for lineno, (ts, name, xs, ys, vs) in _rows(Path(path), JOINT_HEADER):
        if name not in J:
            raise EventFormatError(f"{path}: line {lineno}: unknown joint '{name}'")
        try:
            t, x, y, v = int(ts), float(xs), float(ys), int(vs)
        except ValueError:
            raise EventFormatError(f"{path}: line {lineno}: bad numeric field") from None
        if v not in (0, 1) or not (np.isfinite(x) and np.isfinite(y)):
            raise EventFormatError(f"{path}: line {lineno}: invalid joint values")
        if v and not (0 <= x < w and 0 <= y < h):
            raise EventFormatError(f"{path}: line {lineno}: visible joint outside {w}x{h}")
        if t not in frames:
            if order and t < order[-1]:
                raise EventFormatError(f"{path}: line {lineno}: timestamp {t} precedes {order[-1]}")
            frames[t] = (np.zeros((N_JOINTS, 2)), np.zeros(N_JOINTS, bool), np.zeros(N_JOINTS, bool))
            order.append(t)
        elif t != order[-1]:
            raise EventFormatError(f"{path}: line {lineno}: rows for timestamp {t} are not contiguous")
        joints, vis, seen = frames[t]
        j = J[name]
        if seen[j]:
            raise EventFormatError(f"{path}: line {lineno}: joint '{name}' repeated at {t}")
        joints[j] = (x, y)
        vis[j] = bool(v)
        seen[j] = True
    out = []
    for t in order:
        joints, vis, seen = frames[t]
        if not seen.all():
            missing = [JOINTS[i] for i in np.flatnonzero(~seen)]
            raise EventFormatError(f"{path}: timestamp {t} is missing joints {missing}")
        out.append((t, GroundTruthPose(joints, vis)))
    return out


@dataclass(frozen=True)
class IngestResult:
    events_path: Path
    gt_path: Path
    n_events: int
    n_poses: int
    resolution: tuple[int, int]


def ingest_export(src_dir, out_dir, resolution) -> IngestResult:
    src, out = Path(src_dir), Path(out_dir)
    events = read_event_csv(src / "events.csv", resolution)
    gt = read_joint_csv(src / "joints.csv", resolution)
    out.mkdir(parents=True, exist_ok=True)
    ev_path, gt_path = out / "events.txt", out / "gt.txt"
    write_events(ev_path, events)
    write_ground_truth(gt_path, gt)
    return IngestResult(ev_path, gt_path, len(events), len(gt), tuple(resolution))


def ingest_eh36m_like(src_dir, out_dir) -> IngestResult:
    return ingest_export(src_dir, out_dir, EH36M_RESOLUTION)


def ingest_dhp19_like(src_dir, out_dir) -> IngestResult:
    return ingest_export(src_dir, out_dir, DHP19_RESOLUTION)


def write_export(out_dir, events: np.ndarray, gt) -> None:
    """Write ``events`` and ``(t, GroundTruthPose)`` frames in the export layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "events.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(EVENT_HEADER)
        wr.writerows(zip(events["t"].tolist(), events["x"].tolist(), events["y"].tolist(), events["p"].tolist()))
    with open(out / "joints.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(JOINT_HEADER)
        for t, pose in gt:
            for name, (x, y), v in zip(JOINTS, pose.joints, pose.visible):
                wr.writerow([t, name, repr(float(x)), repr(float(y)), int(v)])
