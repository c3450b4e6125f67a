"""Per-block single-line RANSAC fitting, line-fit scoring and segment output.

Geometry convention: an event at pixel ``(x, y)`` is the point at the pixel
centre ``(x + 0.5, y + 0.5)``. A block with pixel extent ``[x0, x1) x [y0, y1)``
covers the continuous rectangle ``[x0, x1] x [y0, y1]``. Line models are in
normal form ``x cos(theta) + y sin(theta) = rho`` relative to the block's
top-left corner, with ``theta`` in ``[0, pi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .events import AccumulationSurface, SurfaceSnapshot


@dataclass(frozen=True)
class LineModel:
    theta: float
    rho: float

    @classmethod
    def canonical(cls, theta: float, rho: float) -> "LineModel":
        theta = math.fmod(theta, 2 * math.pi)
        if theta < 0:
            theta += 2 * math.pi
        if theta >= math.pi:
            theta -= math.pi
            rho = -rho
        if theta >= math.pi:  # rounding at exactly pi
            theta = 0.0
        return cls(theta, rho)

    @property
    def normal(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta)])

    @property
    def direction(self) -> np.ndarray:
        return np.array([-math.sin(self.theta), math.cos(self.theta)])

    def distances(self, pts: np.ndarray) -> np.ndarray:
        return np.abs(pts @ self.normal - self.rho)


def line_difference(a: LineModel, b: LineModel) -> tuple[float, float]:
    """Angle (radians) and offset (pixels) between two normal-form lines.

    Handles the wrap at ``theta = pi`` where ``(theta, rho)`` and
    ``(theta - pi, -rho)`` describe the same line.
    """
    dth = b.theta - a.theta
    rho_b = b.rho
    if dth > math.pi / 2:
        dth -= math.pi
        rho_b = -rho_b
    elif dth < -math.pi / 2:
        dth += math.pi
        rho_b = -rho_b
    return abs(dth), abs(rho_b - a.rho)


@dataclass(frozen=True)
class LineSegment:
    p_start: tuple[float, float]
    p_end: tuple[float, float]
    score: float
    block_index: int


@dataclass(frozen=True)
class DetectorConfig:
    min_events: int = 10
    ransac_iters: int = 50
    inlier_dist: float = 1.5
    score_threshold: float = 0.3

    def __post_init__(self):
        if self.min_events < 2 or self.ransac_iters < 1 or self.inlier_dist <= 0:
            raise ValueError("min_events >= 2, ransac_iters >= 1 and inlier_dist > 0 required")
        if not 0 < self.score_threshold < 1:
            raise ValueError("score_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class BlockGeometry:
    x0: float
    y0: float
    width: float
    height: float


def event_points(events: np.ndarray, origin=(0.0, 0.0)) -> np.ndarray:
    pts = np.empty((len(events), 2))
    pts[:, 0] = events["x"] + 0.5 - origin[0]
    pts[:, 1] = events["y"] + 0.5 - origin[1]
    return pts


def tls_fit(pts: np.ndarray) -> LineModel | None:
    """Orthogonal-regression line through a point set, or None if degenerate."""
    if len(pts) < 2:
        return None
    c = pts.mean(axis=0)
    d = pts - c
    cov = d.T @ d
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 0:
        return None  # all points coincide
    n = evecs[:, 0]
    return LineModel.canonical(math.atan2(n[1], n[0]), float(n @ c))


def fit_line_ransac(events: np.ndarray, cfg: DetectorConfig, seed,
                    origin=(0.0, 0.0)) -> tuple[LineModel, np.ndarray] | None:
    """Best single line through a block's events.

    Returns the total-least-squares model over the consensus set together
    with that set as a boolean mask, or None when there are fewer than
    ``cfg.min_events`` events or no non-degenerate sample exists.
    """
    n = len(events)
    if n < cfg.min_events:
        return None
    pts = event_points(events, origin)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, cfg.ransac_iters)
    j = rng.integers(0, n - 1, cfg.ransac_iters)
    j += j >= i  # distinct indices
    d = pts[j] - pts[i]
    length = np.hypot(d[:, 0], d[:, 1])
    ok = length > 0
    if not ok.any():
        return None
    normals = np.stack([-d[ok, 1], d[ok, 0]], axis=1) / length[ok, None]
    rhos = np.einsum("kd,kd->k", normals, pts[i[ok]])
    dist = np.abs(normals @ pts.T - rhos[:, None])
    counts = (dist <= cfg.inlier_dist).sum(axis=1)
    best = int(np.argmax(counts))
    inliers = dist[best] <= cfg.inlier_dist
    model = tls_fit(pts[inliers])
    if model is None:
        return None
    return model, inliers


def clip_to_rect(model: LineModel, width: float, height: float) -> tuple[float, float] | None:
    """Parameter interval ``[s0, s1]`` of the line inside ``[0,w] x [0,h]``.

    Points on the line are ``rho * normal + s * direction``.
    """
    foot = model.rho * model.normal
    d = model.direction
    s0, s1 = -math.inf, math.inf
    for k, hi in ((0, width), (1, height)):
        if abs(d[k]) < 1e-12:
            if not 0.0 <= foot[k] <= hi:
                return None
            continue
        a, b = (0.0 - foot[k]) / d[k], (hi - foot[k]) / d[k]
        s0, s1 = max(s0, min(a, b)), min(s1, max(a, b))
    if s1 <= s0:
        return None
    return s0, s1


def _projections(model: LineModel, pts: np.ndarray) -> np.ndarray:
    return (pts - model.rho * model.normal) @ model.direction


def line_fit_score(model: LineModel, events: np.ndarray, inliers: np.ndarray,
                   geometry: BlockGeometry) -> float:
    """Occupancy ratio times effective-event ratio.

    Occupancy is the fraction of 1 px bins along the line's in-block span
    hit by at least one inlier projection; the effective ratio is the
    inlier fraction of all events.
    """
    n = len(events)
    n_in = int(np.count_nonzero(inliers))
    if n == 0 or n_in == 0:
        return 0.0
    span = clip_to_rect(model, geometry.width, geometry.height)
    if span is None:
        return 0.0
    s0, s1 = span
    n_bins = max(1, math.ceil(s1 - s0 - 1e-9))
    pts = event_points(events[inliers], (geometry.x0, geometry.y0))
    s = _projections(model, pts) - s0
    s = s[(s >= 0) & (s <= s1 - s0)]
    bins = np.minimum(np.floor(s).astype(np.int64), n_bins - 1)
    occupancy = len(np.unique(bins)) / n_bins
    return occupancy * (n_in / n)


def _segment_for_block(events, cfg, seed, block_index, geometry):
    fit = fit_line_ransac(events, cfg, seed, (geometry.x0, geometry.y0))
    if fit is None:
        return None
    model, inliers = fit
    score = line_fit_score(model, events, inliers, geometry)
    if score < cfg.score_threshold:
        return None
    span = clip_to_rect(model, geometry.width, geometry.height)
    pts = event_points(events[inliers], (geometry.x0, geometry.y0))
    s = np.clip(_projections(model, pts), span[0], span[1])
    lo, hi = float(s.min()), float(s.max())
    if hi - lo <= 0:
        return None
    foot = model.rho * model.normal
    origin = np.array([geometry.x0, geometry.y0])
    a = tuple(float(v) for v in origin + foot + lo * model.direction)
    b = tuple(float(v) for v in origin + foot + hi * model.direction)
    p_start, p_end = (a, b) if a <= b else (b, a)
    return LineSegment(p_start, p_end, score, block_index)


def detect_lines(surface: AccumulationSurface | SurfaceSnapshot, cfg: DetectorConfig,
                 seed: int = 0) -> list[LineSegment]:
    """At most one accepted segment per block, ordered by block index.

    Each block draws its RANSAC samples from a generator seeded with
    ``(seed, block_index)`` so the result does not depend on the order in
    which blocks are visited.
    """
    snap = surface.snapshot() if isinstance(surface, AccumulationSurface) else surface
    scfg = snap.config
    out = []
    for b in np.flatnonzero(snap.count >= cfg.min_events):
        b = int(b)
        x0, y0, x1, y1 = scfg.block_rect(b)
        geom = BlockGeometry(x0, y0, x1 - x0, y1 - y0)
        seg = _segment_for_block(snap.block(b), cfg, (seed, b), b, geom)
        if seg is not None:
            out.append(seg)
    return out


# ---------------------------------------------------------------------------
# segment files: ``block_ix x0 y0 x1 y1 score`` lines; ``# t <us>`` starts a frame


def format_segments(segments: Iterable[LineSegment]) -> str:
    return "".join(
        f"{s.block_index} {s.p_start[0]:.4f} {s.p_start[1]:.4f} "
        f"{s.p_end[0]:.4f} {s.p_end[1]:.4f} {s.score:.6f}\n"
        for s in segments
    )


def write_segments(path: str | Path | IO[str], frames) -> None:
    """Write either a plain segment list or a list of ``(t, segments)`` frames."""
    frames = list(frames)
    if frames and isinstance(frames[0], LineSegment):
        text = format_segments(frames)
    else:
        text = "".join(f"# t {t}\n" + format_segments(segs) for t, segs in frames)
    if hasattr(path, "write"):
        path.write(text)
    else:
        Path(path).write_text(text)


def read_segments(path: str | Path) -> list[tuple[int | None, list[LineSegment]]]:
    frames: list[tuple[int | None, list[LineSegment]]] = []
    current: list[LineSegment] | None = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "t":
                    current = []
                    frames.append((int(parts[1]), current))
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"line {lineno}: expected 'block_ix x0 y0 x1 y1 score'")
            if current is None:
                current = []
                frames.append((None, current))
            b = int(parts[0])
            x0, y0, x1, y1, sc = (float(v) for v in parts[1:])
            current.append(LineSegment((x0, y0), (x1, y1), sc, b))
    return frames
