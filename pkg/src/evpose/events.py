"""Event ingestion and the per-block FIFO accumulation surface.

The sensor is tiled into square blocks. Every block owns one FIFO ring
buffer that stores, in arrival order, the events falling inside the block
(``active``) together with events from the block's overlapping border
region (``inactive``). Line detection reads consistent copies of these
buffers while ingestion keeps writing.

Events travel through the package as NumPy structured arrays with fields
``t`` (microseconds), ``x``, ``y`` and ``p``. :class:`Event` is the scalar
form used by the single-event API and the streaming reader.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterator, NamedTuple

import numpy as np

EVENT_DTYPE = np.dtype([("t", np.int64), ("x", np.int32), ("y", np.int32), ("p", np.int8)])
SNAPSHOT_DTYPE = np.dtype(
    [("t", np.int64), ("x", np.int32), ("y", np.int32), ("p", np.int8), ("active", np.bool_)]
)


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


class SurfaceError(ValueError):
    """Raised when an event violates the surface contract (bounds or ordering)."""


class EventFormatError(ValueError):
    """Malformed event file; the message carries the offending line number."""


def make_events(x, y, t, p=None) -> np.ndarray:
    """Build a structured event array from column sequences."""
    x = np.asarray(x)
    arr = np.zeros(x.shape[0], dtype=EVENT_DTYPE)
    arr["x"] = x
    arr["y"] = y
    arr["t"] = t
    arr["p"] = 1 if p is None else p
    return arr


@dataclass(frozen=True)
class SurfaceConfig:
    width: int
    height: int
    block_size: int = 20
    fifo_capacity: int = 64
    inactive_margin: int | None = None  # defaults to block_size // 2

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor resolution must be positive")
        if self.block_size <= 0:
            raise ValueError("block_size must be positive")
        if self.fifo_capacity < 1:
            raise ValueError("fifo_capacity must be >= 1")
        if self.inactive_margin is None:
            object.__setattr__(self, "inactive_margin", self.block_size // 2)
        if not 0 <= self.inactive_margin <= self.block_size:
            raise ValueError("inactive_margin must lie in [0, block_size]")

    @property
    def grid_shape(self) -> tuple[int, int]:
        """(columns, rows) of the block grid; border blocks may be partial."""
        bs = self.block_size
        return (-(-self.width // bs), -(-self.height // bs))

    @property
    def n_blocks(self) -> int:
        nx, ny = self.grid_shape
        return nx * ny

    def block_rect(self, block_index: int) -> tuple[int, int, int, int]:
        """Pixel extent ``(x0, y0, x1, y1)`` of a block, end-exclusive."""
        nx, _ = self.grid_shape
        if not 0 <= block_index < self.n_blocks:
            raise IndexError(f"block index {block_index} out of range [0, {self.n_blocks})")
        bx, by = block_index % nx, block_index // nx
        x0, y0 = bx * self.block_size, by * self.block_size
        return x0, y0, min(x0 + self.block_size, self.width), min(y0 + self.block_size, self.height)

    def block_of(self, x: int, y: int) -> int:
        nx, _ = self.grid_shape
        return (y // self.block_size) * nx + (x // self.block_size)


def _inactive_table(cfg: SurfaceConfig) -> np.ndarray:
    """Per-pixel list of neighbouring blocks whose inactive region covers it.

    Shape ``(height * width, 8)``, padded with -1. Only the 8-neighbourhood
    can be involved because ``inactive_margin <= block_size``.
    """
    W, H, bs, m = cfg.width, cfg.height, cfg.block_size, cfg.inactive_margin
    nx, ny = cfg.grid_shape
    xs = np.arange(W)
    ys = np.arange(H)
    table = np.full((H, W, 8), -1, dtype=np.int32)
    if m == 0:
        return table.reshape(H * W, 8)
    bx_of = xs // bs
    by_of = ys // bs
    slot = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            nbx = bx_of + dx
            nby = by_of + dy
            nx0 = nbx * bs
            ny0 = nby * bs
            in_x = (nbx >= 0) & (nbx < nx) & (xs >= nx0 - m) & (xs < np.minimum(nx0 + bs, W) + m)
            in_y = (nby >= 0) & (nby < ny) & (ys >= ny0 - m) & (ys < np.minimum(ny0 + bs, H) + m)
            covered = in_y[:, None] & in_x[None, :]
            nb = nby[:, None] * nx + nbx[None, :]
            table[:, :, slot] = np.where(covered, nb, -1)
            slot += 1
    # compact valid entries to the front so rows read left to right
    flat = table.reshape(H * W, 8)
    order = np.argsort(flat < 0, axis=1, kind="stable")
    return np.take_along_axis(flat, order, axis=1)


class AccumulationSurface:
    """Grid of per-block FIFO buffers fed one event (or one batch) at a time.

    ``event_count`` is the number of stored *active* entries; every event is
    active in exactly one block, so this is also the number of distinct
    events still held somewhere on the surface.
    """

    def __init__(self, config: SurfaceConfig):
        self.config = config
        nb, cap = config.n_blocks, config.fifo_capacity
        self._x = np.zeros((nb, cap), np.int32)
        self._y = np.zeros((nb, cap), np.int32)
        self._t = np.zeros((nb, cap), np.int64)
        self._p = np.zeros((nb, cap), np.int8)
        self._active = np.zeros((nb, cap), np.bool_)
        self._head = np.zeros(nb, np.int64)  # next write slot
        self._count = np.zeros(nb, np.int64)
        self._n_active = np.zeros(nb, np.int64)
        self._event_count = 0
        self.last_t: int | None = None
        self._lock = threading.Lock()

        W, H, bs = config.width, config.height, config.block_size
        nx, _ = config.grid_shape
        self._block_of_pixel = ((np.arange(H)[:, None] // bs) * nx + np.arange(W)[None, :] // bs).ravel()
        table = _inactive_table(config)
        width = int((table >= 0).sum(axis=1).max(initial=0))
        self._inactive = np.ascontiguousarray(table[:, :width])
        # 16-bit keys let argsort use radix sort
        self._key_dtype = np.int16 if config.n_blocks < 2**15 else np.int64
        self._inactive_lists = [tuple(int(b) for b in row if b >= 0) for row in self._inactive]

    @property
    def event_count(self) -> int:
        return self._event_count

    def buffer_lengths(self) -> np.ndarray:
        return self._count.copy()

    def _check(self, x: int, y: int, t: int) -> None:
        if not (0 <= x < self.config.width and 0 <= y < self.config.height):
            raise SurfaceError(
                f"event ({x}, {y}) outside sensor {self.config.width}x{self.config.height}"
            )
        if self.last_t is not None and t < self.last_t:
            raise SurfaceError(f"timestamp {t} precedes last pushed timestamp {self.last_t}")

    def _write(self, b: int, x: int, y: int, t: int, p: int, active: bool) -> None:
        cap = self.config.fifo_capacity
        slot = self._head[b]
        if self._count[b] == cap:
            if self._active[b, slot]:
                self._n_active[b] -= 1
                self._event_count -= 1
        else:
            self._count[b] += 1
        self._x[b, slot] = x
        self._y[b, slot] = y
        self._t[b, slot] = t
        self._p[b, slot] = p
        self._active[b, slot] = active
        if active:
            self._n_active[b] += 1
            self._event_count += 1
        self._head[b] = (slot + 1) % cap

    def push_event(self, e: Event) -> None:
        x, y, t = int(e.x), int(e.y), int(e.t)
        with self._lock:
            self._check(x, y, t)
            pix = y * self.config.width + x
            self._write(int(self._block_of_pixel[pix]), x, y, t, e.p, True)
            for b in self._inactive_lists[pix]:
                self._write(b, x, y, t, e.p, False)
            self.last_t = t

    def push_events(self, events: np.ndarray) -> None:
        """Vectorised equivalent of calling :meth:`push_event` for each row."""
        n = len(events)
        if n == 0:
            return
        x = events["x"].astype(np.int64)
        y = events["y"].astype(np.int64)
        t = events["t"]
        W, H = self.config.width, self.config.height
        bad = (x < 0) | (x >= W) | (y < 0) | (y >= H)
        if bad.any():
            i = int(np.argmax(bad))
            raise SurfaceError(f"event #{i} ({x[i]}, {y[i]}) outside sensor {W}x{H}")
        dec = np.diff(t) < 0
        if dec.any():
            i = int(np.argmax(dec)) + 1
            raise SurfaceError(f"event #{i}: timestamp {t[i]} precedes {t[i - 1]}")

        pix = y * W + x
        # entry table: column 0 is the active block, the rest inactive
        k = 1 + self._inactive.shape[1]
        table = np.empty((n, k), self._key_dtype)
        table[:, 0] = self._block_of_pixel[pix]
        table[:, 1:] = self._inactive[pix]
        flat = table.ravel()
        valid = flat >= 0
        blocks = flat[valid]
        entry = np.flatnonzero(valid)
        ev = entry // k
        active = entry % k == 0

        order = np.argsort(blocks, kind="stable")
        sb, ev, active = blocks[order], ev[order], active[order]
        starts = np.flatnonzero(np.r_[True, sb[1:] != sb[:-1]])
        sizes = np.diff(np.r_[starts, len(sb)])
        touched = sb[starts].astype(np.int64)
        rank = np.arange(len(sb)) - np.repeat(starts, sizes)
        size_of = np.repeat(sizes, sizes)

        cap = self.config.fifo_capacity
        keep = rank >= size_of - cap  # older entries would be overwritten within this batch
        kb, kr, kev, kact = sb[keep].astype(np.int64), rank[keep], ev[keep], active[keep]

        with self._lock:
            if self.last_t is not None and t[0] < self.last_t:
                raise SurfaceError(f"timestamp {t[0]} precedes last pushed timestamp {self.last_t}")
            slots = (self._head[kb] + kr) % cap
            self._x[kb, slots] = x[kev]
            self._y[kb, slots] = y[kev]
            self._t[kb, slots] = t[kev]
            self._p[kb, slots] = events["p"][kev]
            self._active[kb, slots] = kact
            self._head[touched] = (self._head[touched] + sizes) % cap
            self._count[touched] = np.minimum(cap, self._count[touched] + sizes)
            # slots only ever become valid, so a row sum counts live active entries
            before = self._n_active[touched].sum()
            self._n_active[touched] = self._active[touched].sum(axis=1)
            self._event_count += int(self._n_active[touched].sum() - before)
            self.last_t = int(t[-1])

    def snapshot_block(self, block_index: int) -> np.ndarray:
        """Events currently held by one block, oldest first (active and inactive)."""
        if not 0 <= block_index < self.config.n_blocks:
            raise IndexError(f"block index {block_index} out of range [0, {self.config.n_blocks})")
        with self._lock:
            return _block_events(self._x, self._y, self._t, self._p, self._active,
                                 self._head, self._count, block_index, self.config.fifo_capacity)

    def snapshot(self) -> "SurfaceSnapshot":
        """Consistent copy of every block buffer."""
        with self._lock:
            return SurfaceSnapshot(
                self.config, self._x.copy(), self._y.copy(), self._t.copy(), self._p.copy(),
                self._active.copy(), self._head.copy(), self._count.copy(), self.last_t,
            )


def _block_events(xb, yb, tb, pb, ab, head, count, b, cap) -> np.ndarray:
    c = int(count[b])
    idx = (int(head[b]) - c + np.arange(c)) % cap
    out = np.empty(c, SNAPSHOT_DTYPE)
    out["x"] = xb[b, idx]
    out["y"] = yb[b, idx]
    out["t"] = tb[b, idx]
    out["p"] = pb[b, idx]
    out["active"] = ab[b, idx]
    return out


@dataclass(frozen=True)
class SurfaceSnapshot:
    config: SurfaceConfig
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    active: np.ndarray
    head: np.ndarray
    count: np.ndarray
    last_t: int | None

    def block(self, block_index: int) -> np.ndarray:
        if not 0 <= block_index < self.config.n_blocks:
            raise IndexError(f"block index {block_index} out of range [0, {self.config.n_blocks})")
        return _block_events(self.x, self.y, self.t, self.p, self.active, self.head,
                             self.count, block_index, self.config.fifo_capacity)

    def active_events(self) -> np.ndarray:
        """All active entries (each stored event exactly once), unordered."""
        cap = self.config.fifo_capacity
        valid = np.arange(cap)[None, :] < self.count[:, None]
        # a full ring is entirely valid; a partial one has filled slots [0, count)
        mask = valid & self.active
        out = np.empty(int(mask.sum()), SNAPSHOT_DTYPE)
        for name in ("x", "y", "t", "p", "active"):
            out[name] = getattr(self, name)[mask]
        return out


def render_surface(surface: AccumulationSurface | SurfaceSnapshot) -> np.ndarray:
    """Grayscale ``(height, width)`` uint8 image of active-event counts scaled to 0..255."""
    snap = surface.snapshot() if isinstance(surface, AccumulationSurface) else surface
    cfg = snap.config
    ev = snap.active_events()
    counts = np.bincount(ev["y"].astype(np.int64) * cfg.width + ev["x"], minlength=cfg.width * cfg.height)
    img = np.zeros(cfg.width * cfg.height, np.uint8)
    top = counts.max(initial=0)
    if top > 0:
        img = np.rint(counts * (255.0 / top)).astype(np.uint8)
    return img.reshape(cfg.height, cfg.width)


# ---------------------------------------------------------------------------
# text event files: one ``t x y p`` per line


def write_events(path: str | Path | IO[str], events: np.ndarray) -> None:
    lines = [f"{int(t)} {int(x)} {int(y)} {int(p)}\n"
             for t, x, y, p in zip(events["t"], events["x"], events["y"], events["p"])]
    if hasattr(path, "write"):
        path.writelines(lines)
        return
    with open(path, "w") as fh:
        fh.writelines(lines)


def _parse_event_line(line: str, lineno: int, resolution, last_t) -> Event:
    parts = line.split()
    if len(parts) != 4:
        raise EventFormatError(f"line {lineno}: expected 't x y p', got {line.strip()!r}")
    try:
        t, x, y, p = (int(v) for v in parts)
    except ValueError:
        raise EventFormatError(f"line {lineno}: non-integer field in {line.strip()!r}") from None
    if p not in (0, 1):
        raise EventFormatError(f"line {lineno}: polarity must be 0 or 1, got {p}")
    if resolution is not None:
        w, h = resolution
        if not (0 <= x < w and 0 <= y < h):
            raise EventFormatError(f"line {lineno}: coordinate ({x}, {y}) outside {w}x{h}")
    if last_t is not None and t < last_t:
        raise EventFormatError(f"line {lineno}: timestamp {t} precedes {last_t}")
    return Event(x, y, t, p)


def iter_events(path: str | Path, resolution: tuple[int, int] | None = None) -> Iterator[Event]:
    """Stream events in file order, validating each line."""
    last_t = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            e = _parse_event_line(line, lineno, resolution, last_t)
            last_t = e.t
            yield e


def iter_event_chunks(path: str | Path, chunk_size: int = 65536,
                      resolution: tuple[int, int] | None = None) -> Iterator[np.ndarray]:
    buf: list[Event] = []
    for e in iter_events(path, resolution):
        buf.append(e)
        if len(buf) == chunk_size:
            yield _to_array(buf)
            buf = []
    if buf:
        yield _to_array(buf)


def _to_array(evs: list[Event]) -> np.ndarray:
    arr = np.array([(e.t, e.x, e.y, e.p) for e in evs], dtype=EVENT_DTYPE)
    return arr


def read_events(path: str | Path, resolution: tuple[int, int] | None = None) -> np.ndarray:
    evs = list(iter_events(path, resolution))
    if not evs:
        return np.zeros(0, EVENT_DTYPE)
    return _to_array(evs)
