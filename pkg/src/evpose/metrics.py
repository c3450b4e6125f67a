"""PCK with a torso-diagonal threshold, MPJPE, joint clusters and a chance baseline.

Inputs are arrays of shape ``(B, 13, 2)`` (pixels, joint order as in
:data:`evpose.pooling.JOINTS`) with optional ``(B, 13)`` visibility masks.
PCK counts a joint as correct when its error is *strictly* below
``p * T``; an error exactly equal to the threshold is a miss.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .pooling import J, JOINTS, N_JOINTS

TORSO_PAIR = ("shoulder_l", "hip_r")
CLUSTERS = {
    "torso": ("head", "shoulder_r", "shoulder_l", "hip_l", "hip_r"),
    "arms": ("elbow_r", "elbow_l", "wrist_r", "wrist_l"),
    "legs": ("knee_r", "knee_l", "ankle_r", "ankle_l"),
}


@dataclass(frozen=True)
class PckConfig:
    p: float = 0.4
    torso_pair: tuple[str, str] = TORSO_PAIR

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")
        for name in self.torso_pair:
            if name not in J:
                raise ValueError(f"unknown joint {name!r}")


def _as_batch(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def _vis(visible, shape):
    if visible is None:
        return np.ones(shape[:2], bool)
    v = np.asarray(visible, bool)
    return v[None] if v.ndim == 1 else v


def torso_diagonal(gt, visible=None, torso_pair=TORSO_PAIR):
    """Distance between the two torso-pair joints; float for one pose, array for a batch."""
    g = np.asarray(gt, dtype=np.float64)
    a, b = J[torso_pair[0]], J[torso_pair[1]]
    if visible is not None:
        v = np.asarray(visible, bool)
        if not (v[..., a].all() and v[..., b].all()):
            raise ValueError(f"torso joints {torso_pair} are not visible")
    d = np.linalg.norm(g[..., a, :] - g[..., b, :], axis=-1)
    return float(d) if g.ndim == 2 else d


def _thresholds(gts, vis, torso_pair):
    a, b = J[torso_pair[0]], J[torso_pair[1]]
    T = np.linalg.norm(gts[:, a] - gts[:, b], axis=-1)
    ok = (T > 0) & vis[:, a] & vis[:, b]
    if not ok.all():
        warnings.warn(f"skipping {int((~ok).sum())} sample(s) with a degenerate or hidden torso",
                      stacklevel=3)
    return T, ok


def joint_errors(preds, gts) -> np.ndarray:
    return np.linalg.norm(_as_batch(preds) - _as_batch(gts), axis=-1)


def pck_table(preds, gts, p=0.4, visible=None, torso_pair=TORSO_PAIR):
    """Per-sample/per-joint hit matrix and the matching validity mask."""
    preds, gts = _as_batch(preds), _as_batch(gts)
    vis = _vis(visible, gts.shape)
    T, ok = _thresholds(gts, vis, torso_pair)
    d = joint_errors(preds, gts)
    hit = d < p * T[:, None]
    return hit, vis & ok[:, None]


def pck(preds, gts, p=0.4, visible=None, torso_pair=TORSO_PAIR) -> float:
    """Mean over samples of the fraction of visible joints within ``p * T``."""
    hit, valid = pck_table(preds, gts, p, visible, torso_pair)
    per_sample_n = valid.sum(axis=1)
    use = per_sample_n > 0
    if not use.any():
        return float("nan")
    frac = (hit & valid).sum(axis=1)[use] / per_sample_n[use]
    return float(frac.mean())


def pck_per_joint(preds, gts, p=0.4, visible=None, torso_pair=TORSO_PAIR) -> np.ndarray:
    hit, valid = pck_table(preds, gts, p, visible, torso_pair)
    n = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, (hit & valid).sum(axis=0) / n, np.nan)


def mpjpe(preds, gts, visible=None) -> float:
    """Mean over samples of the mean Euclidean joint error (pixels)."""
    d = joint_errors(preds, gts)
    vis = _vis(visible, d.shape + (2,))
    n = vis.sum(axis=1)
    use = n > 0
    return float(((d * vis).sum(axis=1)[use] / n[use]).mean())


def mpjpe_per_joint(preds, gts, visible=None) -> np.ndarray:
    d = joint_errors(preds, gts)
    vis = _vis(visible, d.shape + (2,))
    n = vis.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, (d * vis).sum(axis=0) / n, np.nan)


def chance_baseline(resolution, gts, p=0.4, draws=100_000, seed=0, visible=None,
                    torso_pair=TORSO_PAIR) -> float:
    """Monte Carlo PCK of predictions drawn uniformly over the image plane.

    Each draw picks a ground-truth sample and a visible joint at random and
    a prediction uniform over ``[0, W) x [0, H)``.
    """
    w, h = resolution
    gts = _as_batch(gts)
    vis = _vis(visible, gts.shape)
    T, ok = _thresholds(gts, vis, torso_pair)
    cand = np.argwhere(vis & ok[:, None])
    if len(cand) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    pick = cand[rng.integers(0, len(cand), draws)]
    guess = rng.uniform(0, 1, (draws, 2)) * np.array([w, h])
    d = np.linalg.norm(guess - gts[pick[:, 0], pick[:, 1]], axis=1)
    return float(np.mean(d < p * T[pick[:, 0]]))


@dataclass
class MetricReport:
    p: float
    per_joint_pck: dict[str, float]
    per_joint_mpjpe: dict[str, float]
    clusters: dict[str, tuple[float, float]]  # name -> (pck, mpjpe)
    pck: float
    mpjpe: float
    n_samples: int

    def format_table(self) -> str:
        rows = [f"{'joint':<12} {'PCK@' + format(self.p, 'g'):>9} {'MPJPE':>9}"]
        for name in JOINTS:
            rows.append(f"{name:<12} {self.per_joint_pck[name]:>9.4f} {self.per_joint_mpjpe[name]:>9.3f}")
        for name, (a, b) in self.clusters.items():
            rows.append(f"{'[' + name + ']':<12} {a:>9.4f} {b:>9.3f}")
        rows.append(f"{'average':<12} {self.pck:>9.4f} {self.mpjpe:>9.3f}")
        rows.append(f"samples: {self.n_samples}")
        return "\n".join(rows) + "\n"

    def key_values(self) -> str:
        lines = [f"p={self.p:g}", f"samples={self.n_samples}", f"pck={self.pck:.6f}", f"mpjpe={self.mpjpe:.6f}"]
        for name, (a, b) in self.clusters.items():
            lines += [f"cluster.{name}.pck={a:.6f}", f"cluster.{name}.mpjpe={b:.6f}"]
        for name in JOINTS:
            lines += [f"joint.{name}.pck={self.per_joint_pck[name]:.6f}",
                      f"joint.{name}.mpjpe={self.per_joint_mpjpe[name]:.6f}"]
        return "\n".join(lines) + "\n"


def cluster_report(per_joint_pck, per_joint_mpjpe=None, n_samples=0, p=0.4) -> MetricReport:
    jp = np.asarray(per_joint_pck, dtype=np.float64)
    je = np.zeros(N_JOINTS) if per_joint_mpjpe is None else np.asarray(per_joint_mpjpe, np.float64)
    clusters = {}
    for name, members in CLUSTERS.items():
        idx = [J[m] for m in members]
        clusters[name] = (float(np.nanmean(jp[idx])), float(np.nanmean(je[idx])))
    return MetricReport(
        p=p,
        per_joint_pck={n: float(v) for n, v in zip(JOINTS, jp)},
        per_joint_mpjpe={n: float(v) for n, v in zip(JOINTS, je)},
        clusters=clusters,
        pck=float(np.nanmean(jp)),
        mpjpe=float(np.nanmean(je)),
        n_samples=n_samples,
    )


def evaluate(preds, gts, p=0.4, visible=None, torso_pair=TORSO_PAIR) -> MetricReport:
    preds, gts = _as_batch(preds), _as_batch(gts)
    return cluster_report(
        pck_per_joint(preds, gts, p, visible, torso_pair),
        mpjpe_per_joint(preds, gts, visible),
        n_samples=len(gts),
        p=p,
    )
