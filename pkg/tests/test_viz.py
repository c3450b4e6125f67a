import numpy as np
import pytest
from PIL import Image

from evpose.pooling import LIMB_INDEX, PoseEstimate
from evpose.poseio import write_ground_truth, write_poses
from evpose.synth import FigureMotion, StickFigureScene, joint_positions
from evpose.training import GroundTruthPose
from evpose.viz import GT_COLOR, PRED_COLOR, background_image, match_nearest, overlay, visualize

RES = (160, 120)


def figure_pose(t_s=0.2, seed=0):
    scene = StickFigureScene(resolution=RES)
    return joint_positions(FigureMotion.random(np.random.default_rng(seed), scene), scene, t_s)


def color_mask(img, color):
    return (np.asarray(img) == color).all(axis=2)


def test_identical_skeletons_coincide():
    joints = figure_pose()
    bg = background_image(RES)
    gt_only = overlay(bg, gt=joints)
    both = overlay(bg, gt=joints, pred=joints)
    assert not color_mask(both, GT_COLOR).any()
    np.testing.assert_array_equal(color_mask(both, PRED_COLOR), color_mask(gt_only, GT_COLOR))


def test_limbs_follow_joint_pairs():
    joints = figure_pose(seed=4)
    green = color_mask(overlay(background_image(RES), gt=joints), GT_COLOR)
    ys, xs = np.nonzero(green)
    drawn = np.stack([xs + 0.5, ys + 0.5], axis=1)
    # every sample along every limb has a drawn pixel next to it
    for a, b in LIMB_INDEX:
        for s in np.linspace(0, 1, 15):
            p = joints[a] + s * (joints[b] - joints[a])
            assert np.abs(drawn - p).max(axis=1).min() <= 1.5
    # and every drawn pixel lies near some limb
    def seg_dist(p, a, b):
        d = b - a
        s = np.clip(((p - a) @ d) / (d @ d), 0, 1)
        return np.hypot(*(a + s[:, None] * d - p).T)
    nearest = np.min([seg_dist(drawn, joints[a], joints[b]) for a, b in LIMB_INDEX], axis=0)
    assert nearest.max() <= 1.5


def test_hidden_joints_not_drawn():
    joints = figure_pose()
    vis = np.zeros(13, bool)
    assert not color_mask(overlay(background_image(RES), gt=joints, gt_visible=vis), GT_COLOR).any()


def test_match_nearest():
    assert match_nearest([0, 1000, 5000, 20_000], [0, 4000, 10_000], 1500) == [(0, 0), (1, 0), (2, 1), (3, None)]
    assert match_nearest([5], [], 10) == [(0, None)]


def test_empty_pose_file_gives_background(tmp_path):
    (tmp_path / "p.txt").write_text("")
    write_ground_truth(tmp_path / "g.txt", [(0, GroundTruthPose(figure_pose()))])
    bg = Image.new("RGB", RES, (10, 20, 30))
    bg.save(tmp_path / "bg.png")
    out = visualize(tmp_path / "p.txt", tmp_path / "g.txt", tmp_path / "out", RES, background=tmp_path / "bg.png")
    assert len(out) == 1
    np.testing.assert_array_equal(np.asarray(Image.open(out[0])), np.asarray(bg))


def test_visualize_writes_frames_and_skips_unmatched(tmp_path):
    j = figure_pose()
    write_poses(tmp_path / "p.txt", [(10_000, PoseEstimate(j + 3, np.ones(13))), (90_000, PoseEstimate(j, np.ones(13)))])
    write_ground_truth(tmp_path / "g.txt", [(0, GroundTruthPose(j)), (10_000, GroundTruthPose(j))])
    with pytest.warns(UserWarning, match="skipped 1"):
        out = visualize(tmp_path / "p.txt", tmp_path / "g.txt", tmp_path / "o", RES)
    assert [p.name for p in out] == ["frame_000000010000.png"]
    img = Image.open(out[0])
    assert img.size == RES
    assert color_mask(img, GT_COLOR).any() and color_mask(img, PRED_COLOR).any()


def test_background_size_checked():
    with pytest.raises(ValueError):
        background_image(RES, image=Image.new("RGB", (10, 10)))
