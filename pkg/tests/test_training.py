import numpy as np
import pytest

from evpose.gnn import StackConfig
from evpose.graph import PoseGraph
from evpose.model import ModelConfig, PoseNet
from evpose.pooling import JointHypotheses, PoseEstimate
from evpose.training import (
    Adam,
    GroundTruthPose,
    LossWeights,
    OptimizerConfig,
    Sample,
    TrainConfig,
    TrainingDiverged,
    TrainingParadigm,
    loss_and_grads,
    node_loss,
    target_loss,
    total_loss,
    train,
)

from helpers import node_loop, random_samples, target_loop

TINY = ModelConfig(StackConfig((4, 6, 4), (3, 3, 3), "custom"), offset_scale=10.0)


def gt_pose(rng, hidden=()):
    vis = np.ones(13, bool)
    vis[list(hidden)] = False
    return GroundTruthPose(rng.uniform(0, 64, (13, 2)), vis)


# -- losses


def test_target_loss_examples():
    rng = np.random.default_rng(0)
    gt = gt_pose(rng)
    assert target_loss(PoseEstimate(gt.joints.copy(), np.ones(13)), gt) == 0.0
    est = gt.joints.copy()
    est[6] += (3, 4)
    assert target_loss(est, gt) == pytest.approx(25 / 26)


@pytest.mark.parametrize("seed", range(5))
def test_losses_match_loops(seed):
    rng = np.random.default_rng(seed)
    gt = gt_pose(rng, hidden=rng.choice(13, 3, replace=False))
    est = rng.uniform(0, 64, (13, 2))
    assert abs(target_loss(est, gt) - target_loop(est, gt)) < 1e-12
    n = 6
    g = PoseGraph.from_pairs(rng.uniform(0, 64, (n, 2)), np.zeros((0, 2)))
    hyp = JointHypotheses(rng.normal(0, 10, (n, 13, 2)), np.zeros((n, 13, 1)))
    for mean in (False, True):
        ref = node_loop(g.pos, hyp.offsets, gt, mean)
        assert abs(node_loss(g, hyp, gt, mean) - ref) < 1e-12 * max(1.0, ref)


def test_node_loss_examples():
    rng = np.random.default_rng(1)
    gt = gt_pose(rng)
    pos = np.zeros((3, 2))
    at_gt = JointHypotheses(gt.joints[None] - pos[:, None], np.zeros((3, 13, 1)))
    g = PoseGraph.from_pairs(pos, np.zeros((0, 2)))
    assert node_loss(g, at_gt, gt) == 0.0
    one = GroundTruthPose(np.zeros((13, 2)), np.eye(13, dtype=bool)[0])
    off = np.zeros((1, 13, 2))
    off[0, 0] = (1, 0)
    g1 = PoseGraph.from_pairs(np.zeros((1, 2)), np.zeros((0, 2)))
    assert node_loss(g1, JointHypotheses(off, np.zeros((1, 13, 1))), one) == 0.5


def test_loss_errors():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        target_loss(np.zeros((13, 2)), gt_pose(rng, hidden=range(13)))
    empty = PoseGraph.from_pairs(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        node_loss(empty, JointHypotheses(np.zeros((0, 13, 2)), np.zeros((0, 13, 1))), gt_pose(rng))


def test_total_loss_examples():
    assert total_loss(2.0, 3.0, LossWeights(1, 0)) == 2.0
    assert total_loss(2.0, 3.0, LossWeights(0, 1)) == 3.0
    assert total_loss(2.0, 3.0, LossWeights(1, 1)) == 5.0
    with pytest.raises(ValueError):
        LossWeights(0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1)


# -- paradigms


def test_paradigm_schedules():
    w = lambda s: [(x.alpha, x.beta) for x in s]
    assert w(TrainingParadigm("node_only").schedule(5)) == [(0, 1)] * 5
    assert w(TrainingParadigm("target_only").schedule(5)) == [(1, 0)] * 5
    assert w(TrainingParadigm("together").schedule(4)) == [(1, 1)] * 4
    stag = TrainingParadigm("staggered").schedule(999)
    assert w(stag) == [(0, 1)] * 20 + [(1, 1)] * 50
    custom = TrainingParadigm("together", together=LossWeights(0.5, 2.0))
    assert w(custom.schedule(2)) == [(0.5, 2.0)] * 2
    with pytest.raises(ValueError):
        TrainingParadigm("sometimes")


# -- gradients through the full network


@pytest.mark.parametrize("mode", ["single", "axis_separated"])
@pytest.mark.parametrize("weights", [(1.0, 0.0), (0.0, 1.0), (0.7, 0.3)])
def test_end_to_end_gradients(mode, weights):
    rng = np.random.default_rng(11)
    samples = random_samples(rng, 2, 6, hidden=2)
    cfg = ModelConfig(TINY.stack, mode, offset_scale=10.0)
    net = PoseNet(cfg, seed=3, dtype=np.float64)
    w = LossWeights(*weights)
    _, _, _, _, grads = loss_and_grads(net, samples, w, node_loss_mean=True)
    h = 1e-6
    for name in ("gnn.0.conv.weight", "gnn.1.norm.scale", "gnn.2.conv.root", "head.weight"):
        p = net.params[name].reshape(-1)
        picks = rng.choice(p.size, min(p.size, 12), replace=False)
        for i in picks:
            # batch statistics are in play, so evaluate in training mode too
            old = p[i]
            p[i] = old + h
            a = loss_and_grads(net, samples, w, True)[0]
            p[i] = old - h
            b = loss_and_grads(net, samples, w, True)[0]
            p[i] = old
            num = (a - b) / (2 * h)
            g = grads[name].reshape(-1)[i]
            assert abs(num - g) <= 1e-5 * max(1.0, abs(num)), (name, i, num, g)


# -- optimiser


def test_adam_minimises_quadratic_and_clips():
    params = {"x": np.array([5.0, -3.0])}
    opt = Adam(params, OptimizerConfig(lr=0.1, clip_norm=1.0))
    norm = opt.step(params, {"x": 2 * params["x"]})
    assert norm == pytest.approx(2 * np.hypot(5, 3))
    for _ in range(500):
        opt.step(params, {"x": 2 * params["x"]})
    assert np.abs(params["x"]).max() < 0.05


def test_adam_rejects_non_finite_gradient():
    params = {"x": np.zeros(2)}
    with pytest.raises(TrainingDiverged):
        Adam(params, OptimizerConfig()).step(params, {"x": np.array([np.nan, 0])})


# -- loop


def test_train_writes_logs_and_checkpoints(tmp_path):
    rng = np.random.default_rng(4)
    data = random_samples(rng, 6, 8)
    res = train(data[:4], data[4:], TINY, TrainingParadigm("node_only"),
                TrainConfig(epochs=3, batch_size=2), seed=1, out_dir=tmp_path)
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    assert len(lines) == 3 and all(len(line.split()) == 5 for line in lines)
    sched = [line.split() for line in (tmp_path / "schedule.log").read_text().splitlines()]
    assert [s[1:] for s in sched] == [["0", "1"]] * 3
    assert all(r.alpha == 0 for r in res.history)
    assert (tmp_path / "checkpoint_latest.bin").exists()
    assert (tmp_path / "checkpoint_best.bin").exists()
    back = PoseNet(TINY)
    back.load(tmp_path / "checkpoint_latest.bin")
    for k, v in res.net.state_dict().items():
        np.testing.assert_array_equal(back.state_dict()[k], v)


def test_same_seed_same_first_epoch():
    rng = np.random.default_rng(5)
    data = random_samples(rng, 4, 7)
    runs = [train(data, None, TINY, TrainingParadigm("together"), TrainConfig(epochs=1, batch_size=2), seed=9)
            for _ in range(2)]
    assert runs[0].history[0] == runs[1].history[0]


def test_divergence_is_reported():
    rng = np.random.default_rng(6)
    data = random_samples(rng, 2, 5)
    bad = Sample(data[0].graph, GroundTruthPose(np.full((13, 2), np.inf)))
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train([bad], data, TINY, TrainingParadigm("target_only"), TrainConfig(epochs=1))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train([], [], TINY, TrainingParadigm())
