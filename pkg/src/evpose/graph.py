"""Line segments to graphs: endpoint merging, distance augmentation, normalisation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .lines import LineSegment


@dataclass(frozen=True)
class PoseGraph:
    """Undirected graph stored with every edge in both directions.

    ``edge_index[:, k]`` is ``(src, dst)``; edge ``k`` and its reverse are
    adjacent (``2m`` and ``2m + 1``). ``pseudo`` and ``feat`` are filled by
    :func:`normalize_graph`.
    """

    pos: np.ndarray  # (N, 2) pixels
    edge_index: np.ndarray  # (2, E) int64
    augmented: np.ndarray  # (E,) bool
    pseudo: np.ndarray | None = None  # (E, 2) in [0, 1]
    feat: np.ndarray | None = None  # (N, 2) in [0, 1]

    @property
    def num_nodes(self) -> int:
        return len(self.pos)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return self.edge_index.shape[1] // 2

    @property
    def rel(self) -> np.ndarray:
        src, dst = self.edge_index
        return self.pos[dst] - self.pos[src]

    def undirected(self) -> tuple[np.ndarray, np.ndarray]:
        """``(pairs, augmented)`` with one row per undirected edge as stored."""
        return self.edge_index[:, 0::2].T, self.augmented[0::2]

    @classmethod
    def from_pairs(cls, pos, pairs, augmented=None) -> "PoseGraph":
        pos = np.asarray(pos, dtype=np.float64).reshape(-1, 2)
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if augmented is None:
            augmented = np.zeros(len(pairs), bool)
        if len(pairs) and (pairs[:, 0] == pairs[:, 1]).any():
            raise ValueError("self loops are not allowed")
        ei = np.empty((2, 2 * len(pairs)), np.int64)
        ei[0, 0::2], ei[1, 0::2] = pairs[:, 0], pairs[:, 1]
        ei[0, 1::2], ei[1, 1::2] = pairs[:, 1], pairs[:, 0]
        return cls(pos, ei, np.repeat(np.asarray(augmented, bool), 2))


def empty_graph() -> PoseGraph:
    return PoseGraph.from_pairs(np.zeros((0, 2)), np.zeros((0, 2), np.int64))


def segments_to_graph(segments: Sequence[LineSegment], merge_tol: float = 0.5) -> PoseGraph:
    """One edge per segment; endpoints closer than ``merge_tol`` share a node.

    Merging is single-linkage (transitive), nodes sit at cluster centroids
    and are numbered by first appearance.
    """
    if not segments:
        return empty_graph()
    ends = np.array([[*s.p_start, *s.p_end] for s in segments], dtype=np.float64).reshape(-1, 2)
    m = len(ends)
    close = cKDTree(ends).query_pairs(merge_tol, output_type="ndarray")
    adj = coo_matrix((np.ones(len(close)), (close[:, 0], close[:, 1])), shape=(m, m))
    _, labels = connected_components(adj, directed=False)
    # relabel by first appearance
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    relabel = np.empty_like(order)
    relabel[order] = np.arange(len(order))
    node = relabel[labels]
    n = len(order)
    pos = np.zeros((n, 2))
    np.add.at(pos, node, ends)
    pos /= np.bincount(node, minlength=n)[:, None]

    pairs = node.reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    key = np.sort(pairs, axis=1)
    _, keep = np.unique(key, axis=0, return_index=True)
    pairs = pairs[np.sort(keep)]
    return PoseGraph.from_pairs(pos, pairs)


def augment_edges(g: PoseGraph, zeta: float) -> PoseGraph:
    """Connect every unconnected node pair closer than ``zeta`` pixels."""
    if zeta < 0:
        raise ValueError("zeta must be non-negative")
    if g.num_nodes < 2 or zeta == 0:
        return g
    cand = cKDTree(g.pos).query_pairs(zeta, output_type="ndarray")
    if len(cand) == 0:
        return g
    cand = np.sort(cand, axis=1)
    d = np.linalg.norm(g.pos[cand[:, 0]] - g.pos[cand[:, 1]], axis=1)
    cand = cand[d < zeta]
    pairs, aug = g.undirected()
    n = g.num_nodes
    existing = set((np.minimum(pairs[:, 0], pairs[:, 1]) * n + np.maximum(pairs[:, 0], pairs[:, 1])).tolist())
    keys = cand[:, 0] * n + cand[:, 1]
    new = cand[~np.isin(keys, list(existing))]
    if len(new) == 0:
        return g
    new = new[np.lexsort((new[:, 1], new[:, 0]))]
    return PoseGraph.from_pairs(
        g.pos, np.vstack([pairs, new]), np.r_[aug, np.ones(len(new), bool)]
    )


def normalize_graph(g: PoseGraph, resolution: tuple[int, int], zeta_max: float) -> PoseGraph:
    """Attach edge pseudo-coordinates and [0, 1]-scaled node features.

    ``u = rel / (2 * zeta_max) + 0.5`` clamped to the unit square, so a
    relative offset of ``+-zeta_max`` maps to the square's border.
    """
    w, h = resolution
    pseudo = np.clip(g.rel / (2.0 * zeta_max) + 0.5, 0.0, 1.0)
    feat = g.pos / np.array([w, h], dtype=np.float64)
    return replace(g, pseudo=pseudo, feat=feat)


def denormalize_pseudo(pseudo: np.ndarray, zeta_max: float) -> np.ndarray:
    return (pseudo - 0.5) * (2.0 * zeta_max)


def build_graph(segments, resolution, zeta=15.0, merge_tol=0.5, zeta_max=40.0) -> PoseGraph:
    """Segments to a normalised, augmented graph ready for the network."""
    g = segments_to_graph(segments, merge_tol)
    g = augment_edges(g, zeta)
    return normalize_graph(g, resolution, zeta_max)


# ---------------------------------------------------------------------------
# text graph files: ``N E`` header, ``ix x y`` node lines, ``src dst augmented``
# edge lines (one per undirected edge); ``# t <us>`` starts a frame


def format_graph(g: PoseGraph) -> str:
    pairs, aug = g.undirected()
    lines = [f"{g.num_nodes} {len(pairs)}\n"]
    lines += [f"{i} {x:.4f} {y:.4f}\n" for i, (x, y) in enumerate(g.pos)]
    lines += [f"{a} {b} {int(f)}\n" for (a, b), f in zip(pairs, aug)]
    return "".join(lines)


def write_graphs(path: str | Path | IO[str], frames: Iterable) -> None:
    """Write one graph, or a sequence of ``(t, graph)`` frames."""
    if isinstance(frames, PoseGraph):
        text = format_graph(frames)
    else:
        text = "".join(f"# t {t}\n" + format_graph(g) for t, g in frames)
    if hasattr(path, "write"):
        path.write(text)
    else:
        Path(path).write_text(text)


def read_graphs(path: str | Path) -> list[tuple[int | None, PoseGraph]]:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    frames = []
    i = 0
    t = None
    while i < len(lines):
        if lines[i].startswith("#"):
            parts = lines[i][1:].split()
            t = int(parts[1]) if len(parts) == 2 and parts[0] == "t" else t
            i += 1
            continue
        n, e = (int(v) for v in lines[i].split())
        node_rows = [lines[i + 1 + k].split() for k in range(n)]
        edge_rows = [lines[i + 1 + n + k].split() for k in range(e)]
        pos = np.array([[float(r[1]), float(r[2])] for r in node_rows]).reshape(-1, 2)
        pairs = np.array([[int(r[0]), int(r[1])] for r in edge_rows], np.int64).reshape(-1, 2)
        aug = np.array([r[2] == "1" for r in edge_rows], bool)
        frames.append((t, PoseGraph.from_pairs(pos, pairs, aug)))
        i += 1 + n + e
    return frames
