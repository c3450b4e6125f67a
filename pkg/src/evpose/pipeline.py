"""Staged event-to-pose pipeline.

Four stages (surface update, line detection, graph build, GNN) run either as
concurrent threads connected by :class:`LatestSlot` handoffs, or one after
the other in a deterministic sequential mode used for replay and tests.

Each handoff keeps only the newest item. A slow stage therefore skips stale
inputs instead of queueing them, and inter-stage memory stays bounded no
matter how mismatched the stage speeds are.
"""

from __future__ import annotations

import logging
import threading
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from .events import AccumulationSurface, SurfaceConfig, iter_event_chunks, read_events
from .gnn import NoEstimate
from .graph import PoseGraph, build_graph, write_graphs
from .lines import DetectorConfig, LineSegment, detect_lines, write_segments
from .pooling import PoseEstimate
from .poseio import write_poses

log = logging.getLogger(__name__)

STAGES = ("surface", "lines", "graph", "gnn")


# ---------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class LatencyStats:
    n: int
    min_ms: float
    median_ms: float
    p99_ms: float

    @classmethod
    def from_seconds(cls, samples) -> "LatencyStats":
        ms = np.asarray(samples, float) * 1e3
        if ms.size == 0:
            return cls(0, float("nan"), float("nan"), float("nan"))
        return cls(int(ms.size), float(ms.min()), float(np.median(ms)), float(np.percentile(ms, 99)))


@dataclass(frozen=True)
class StageTiming:
    """Per-stage latency summary.

    Stages run in parallel, so the slowest stage sets the pipeline rate:
    ``frequency_hz = 1000 / max(median_ms)`` over the stages that ran.
    """

    stages: Mapping[str, LatencyStats]

    @classmethod
    def from_samples(cls, samples: Mapping[str, Iterable[float]]) -> "StageTiming":
        return cls({name: LatencyStats.from_seconds(list(samples.get(name, ()))) for name in STAGES})

    @property
    def slowest(self) -> str | None:
        ran = {k: v for k, v in self.stages.items() if v.n}
        return max(ran, key=lambda k: ran[k].median_ms) if ran else None

    @property
    def frequency_hz(self) -> float:
        s = self.slowest
        return 1000.0 / self.stages[s].median_ms if s else float("nan")

    def report(self) -> str:
        lines = []
        for name, st in self.stages.items():
            lines += [f"{name}.n={st.n}", f"{name}.min_ms={st.min_ms:.4f}",
                      f"{name}.median_ms={st.median_ms:.4f}", f"{name}.p99_ms={st.p99_ms:.4f}"]
        lines += [f"slowest={self.slowest}", f"frequency_hz={self.frequency_hz:.2f}"]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# handoff


class LatestSlot:
    """Single-writer slot holding only the most recent item.

    Readers remember the version they last saw and block until a newer one
    arrives or the slot is closed.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._item = None
        self._version = 0
        self._closed = False

    @property
    def version(self) -> int:
        return self._version

    def publish(self, item) -> None:
        with self._cond:
            self._item = item
            self._version += 1
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def take(self, seen: int, timeout: float | None = None):
        """``(version, item)`` newer than ``seen``; ``None`` once closed and drained.

        Raises ``TimeoutError`` if nothing new arrives within ``timeout``.
        """
        with self._cond:
            ok = self._cond.wait_for(lambda: self._version > seen or self._closed, timeout)
            if not ok:
                raise TimeoutError("no new item")
            if self._version > seen:
                return self._version, self._item
            return None


# ---------------------------------------------------------------------------
# configuration and sources


@dataclass(frozen=True)
class PipelineConfig:
    surface: SurfaceConfig
    detector: DetectorConfig = DetectorConfig()
    zeta: float = 15.0
    merge_tol: float = 0.5
    zeta_max: float = 40.0
    frame_us: int = 10_000  # sequential mode: one output frame per interval
    chunk_size: int = 65_536
    seed: int = 0

    @property
    def resolution(self) -> tuple[int, int]:
        return self.surface.width, self.surface.height


def event_chunks(source, chunk_size: int, resolution=None) -> Iterator[np.ndarray]:
    """Chunks from an event array, an iterable of arrays, or an event file path."""
    if isinstance(source, (str, Path)):
        yield from iter_event_chunks(source, chunk_size, resolution)
    elif isinstance(source, np.ndarray):
        for i in range(0, len(source), chunk_size):
            yield source[i:i + chunk_size]
    else:
        yield from source


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, diagnostics: str):
        super().__init__(f"stage '{stage}' failed: {cause!r}\n{diagnostics}")
        self.stage = stage
        self.cause = cause
        self.diagnostics = diagnostics


@dataclass
class PipelineRun:
    poses: list[tuple[int, PoseEstimate]]
    timing: StageTiming
    events_ingested: int
    ingest_seconds: float  # wall time spent inside the surface stage loop

    @property
    def ingest_rate(self) -> float:
        return self.events_ingested / self.ingest_seconds if self.ingest_seconds > 0 else float("nan")


# ---------------------------------------------------------------------------
# concurrent runner

Hook = Callable[[], None]


class _Stage(threading.Thread):
    def __init__(self, name: str, body, errors: list, stop: threading.Event, slots):
        super().__init__(name=f"evpose-{name}", daemon=True)
        self.stage = name
        self.body = body
        self.errors = errors
        self.stop = stop
        self.slots = slots

    def run(self):
        try:
            self.body()
        except BaseException as exc:  # a stage panic shuts every stage down
            self.errors.append((self.stage, exc, traceback.format_exc()))
            self.stop.set()
            for s in self.slots:
                s.close()


def run_concurrent(source, net, cfg: PipelineConfig, hooks: Mapping[str, Hook] | None = None,
                   timeout: float | None = None) -> PipelineRun:
    """Run the four stages as threads until the source is exhausted.

    ``hooks`` maps a stage name to a callable invoked at the top of every
    iteration of that stage; tests use it to inject stalls and failures.
    ``net`` may be ``None`` to stop after graph building.
    """
    hooks = dict(hooks or {})
    unknown = set(hooks) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stage(s) {sorted(unknown)}")
    surface = AccumulationSurface(cfg.surface)
    s_surface, s_lines, s_graph = LatestSlot(), LatestSlot(), LatestSlot()
    slots = (s_surface, s_lines, s_graph)
    stop = threading.Event()
    errors: list = []
    samples: dict[str, list[float]] = {k: [] for k in STAGES}
    poses: list[tuple[int, PoseEstimate]] = []
    ingested = [0, 0.0]
    noop = lambda: None  # noqa: E731

    def ingest():
        hook = hooks.get("surface", noop)
        start = time.perf_counter()
        try:
            for chunk in event_chunks(source, cfg.chunk_size, cfg.resolution):
                if stop.is_set():
                    return
                hook()
                t0 = time.perf_counter()
                surface.push_events(chunk)
                samples["surface"].append(time.perf_counter() - t0)
                ingested[0] += len(chunk)
                if len(chunk):
                    s_surface.publish(int(surface.last_t))
        finally:
            ingested[1] = time.perf_counter() - start
            s_surface.close()

    def relay(name, inbox, outbox, work):
        def body():
            hook = hooks.get(name, noop)
            seen = 0
            try:
                while not stop.is_set():
                    got = inbox.take(seen)
                    if got is None:
                        return
                    seen, item = got
                    hook()
                    t0 = time.perf_counter()
                    out = work(item)
                    samples[name].append(time.perf_counter() - t0)
                    if outbox is not None and out is not None:
                        outbox.publish(out)
            finally:
                if outbox is not None:
                    outbox.close()
        return body

    def lines(t):
        return t, detect_lines(surface.snapshot(), cfg.detector, seed=cfg.seed)

    def graph(item):
        t, segs = item
        return t, build_graph(segs, cfg.resolution, cfg.zeta, cfg.merge_tol, cfg.zeta_max)

    def gnn(item):
        t, g = item
        try:
            poses.append((t, net.predict(g)))
        except NoEstimate:
            pass

    threads = [
        _Stage("surface", ingest, errors, stop, slots),
        _Stage("lines", relay("lines", s_surface, s_lines, lines), errors, stop, slots),
        _Stage("graph", relay("graph", s_lines, s_graph, graph), errors, stop, slots),
    ]
    if net is not None:
        threads.append(_Stage("gnn", relay("gnn", s_graph, None, gnn), errors, stop, slots))
    for th in threads:
        th.start()
    deadline = None if timeout is None else time.monotonic() + timeout
    for th in threads:
        th.join(None if deadline is None else max(0.0, deadline - time.monotonic()))
    if any(th.is_alive() for th in threads):
        stop.set()
        for s in slots:
            s.close()
        raise PipelineError("pipeline", TimeoutError(f"not finished after {timeout} s"),
                            StageTiming.from_samples(samples).report())
    timing = StageTiming.from_samples(samples)
    if errors:
        stage, exc, tb = errors[0]
        raise PipelineError(stage, exc, tb + "\n" + timing.report())
    return PipelineRun(poses, timing, ingested[0], ingested[1])


# ---------------------------------------------------------------------------
# sequential replay


@dataclass
class Frame:
    t: int
    segments: list[LineSegment]
    graph: PoseGraph
    pose: PoseEstimate | None


@dataclass
class SequentialRun:
    frames: list[Frame] = field(default_factory=list)
    timing: StageTiming | None = None

    @property
    def poses(self) -> list[tuple[int, PoseEstimate]]:
        return [(f.t, f.pose) for f in self.frames if f.pose is not None]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"segments": out / "segments.txt", "graphs": out / "graphs.txt", "poses": out / "poses.txt"}
        write_segments(paths["segments"], [(f.t, f.segments) for f in self.frames])
        write_graphs(paths["graphs"], [(f.t, f.graph) for f in self.frames])
        write_poses(paths["poses"], self.poses)
        return paths


def frame_times(first_t: int, last_t: int, frame_us: int) -> np.ndarray:
    """Frame boundaries: multiples of ``frame_us`` covering ``[first_t, last_t]``."""
    k0 = first_t // frame_us + 1
    k1 = -(-last_t // frame_us)
    return np.arange(k0, max(k0, k1) + 1, dtype=np.int64) * frame_us


def run_sequential(events, net, cfg: PipelineConfig, out_dir: str | Path | None = None) -> SequentialRun:
    """Replay ``events`` one frame at a time; fully deterministic.

    At each boundary ``T`` every event with ``t <= T`` has been pushed, then
    lines, graph and (if ``net`` is given) pose are computed in turn.
    """
    if isinstance(events, (str, Path)):
        events = read_events(events, cfg.resolution)
    run = SequentialRun()
    samples: dict[str, list[float]] = {k: [] for k in STAGES}
    if len(events):
        surface = AccumulationSurface(cfg.surface)
        ts = events["t"]
        cursor = 0
        for T in frame_times(int(ts[0]), int(ts[-1]), cfg.frame_us):
            end = int(np.searchsorted(ts, T, side="right"))
            t0 = time.perf_counter()
            surface.push_events(events[cursor:end])
            t1 = time.perf_counter()
            cursor = end
            segs = detect_lines(surface.snapshot(), cfg.detector, seed=cfg.seed)
            t2 = time.perf_counter()
            g = build_graph(segs, cfg.resolution, cfg.zeta, cfg.merge_tol, cfg.zeta_max)
            t3 = time.perf_counter()
            pose = None
            if net is not None and g.num_nodes:
                pose = net.predict(g)
                samples["gnn"].append(time.perf_counter() - t3)
            samples["surface"].append(t1 - t0)
            samples["lines"].append(t2 - t1)
            samples["graph"].append(t3 - t2)
            run.frames.append(Frame(int(T), segs, g, pose))
    run.timing = StageTiming.from_samples(samples)
    if out_dir is not None:
        run.write(out_dir)
    return run
