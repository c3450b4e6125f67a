"""Skeleton overlays: ground truth in green, estimates in yellow."""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .events import AccumulationSurface, SurfaceConfig, render_surface
from .pooling import LIMB_INDEX
from .poseio import read_ground_truth, read_poses

GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 255, 0)


def background_image(resolution, events=None, image=None) -> Image.Image:
    """RGB background: a given image, a render of ``events``, or black."""
    w, h = resolution
    if image is not None:
        img = image if isinstance(image, Image.Image) else Image.open(image)
        img = img.convert("RGB")
        if img.size != (w, h):
            raise ValueError(f"background is {img.size[0]}x{img.size[1]}, expected {w}x{h}")
        return img
    if events is not None and len(events):
        surface = AccumulationSurface(SurfaceConfig(w, h))
        surface.push_events(events)
        return Image.fromarray(render_surface(surface), "L").convert("RGB")
    return Image.new("RGB", (w, h))


def draw_skeleton(img: Image.Image, joints, color, visible=None, width: int = 1, joint_radius: int = 0) -> None:
    """Draw the limbs between documented joint pairs (hidden joints are skipped)."""
    joints = np.asarray(joints, float)
    vis = np.ones(len(joints), bool) if visible is None else np.asarray(visible, bool)
    draw = ImageDraw.Draw(img)
    for a, b in LIMB_INDEX:
        if vis[a] and vis[b]:
            draw.line([tuple(joints[a]), tuple(joints[b])], fill=color, width=width)
    if joint_radius:
        r = joint_radius
        for (x, y), v in zip(joints, vis):
            if v:
                draw.ellipse([x - r, y - r, x + r, y + r], fill=color)


def match_nearest(pred_ts, gt_ts, tolerance_us: int) -> list[tuple[int, int | None]]:
    """For each prediction index, the index of the nearest GT time, or None beyond tolerance."""
    gt = np.asarray(gt_ts, np.int64)
    out = []
    for i, t in enumerate(pred_ts):
        if len(gt) == 0:
            out.append((i, None))
            continue
        k = int(np.searchsorted(gt, t))
        cands = [j for j in (k - 1, k) if 0 <= j < len(gt)]
        j = min(cands, key=lambda c: abs(int(gt[c]) - int(t)))
        out.append((i, j if abs(int(gt[j]) - int(t)) <= tolerance_us else None))
    return out


def overlay(background: Image.Image, gt=None, pred=None, gt_visible=None, width: int = 1) -> Image.Image:
    img = background.copy()
    if gt is not None:
        draw_skeleton(img, gt, GT_COLOR, gt_visible, width)
    if pred is not None:
        draw_skeleton(img, pred, PRED_COLOR, None, width)
    return img


def visualize(pose_path, gt_path, out_dir, resolution, background=None, events=None,
              tolerance_us: int = 5000, width: int = 1) -> list[Path]:
    """Write one PNG per estimate, with the nearest ground truth drawn underneath.

    Estimates with no ground truth within ``tolerance_us`` are skipped with a
    warning. An empty pose file yields a single background-only image.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bg = background_image(resolution, events, background)
    poses = read_poses(pose_path)
    gts = read_ground_truth(gt_path, resolution) if gt_path is not None else []
    if not poses:
        path = out / "background.png"
        bg.save(path)
        return [path]
    written = []
    skipped = 0
    for i, j in match_nearest([t for t, _ in poses], [t for t, _ in gts], tolerance_us):
        t, est = poses[i]
        if j is None:
            skipped += 1
            continue
        gt = gts[j][1]
        path = out / f"frame_{t:012d}.png"
        overlay(bg, gt.joints, est.joints, gt.visible, width).save(path)
        written.append(path)
    if skipped:
        warnings.warn(f"skipped {skipped} estimate(s) with no ground truth within {tolerance_us} us",
                      stacklevel=2)
    return written
