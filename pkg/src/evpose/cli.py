"""Command-line entry point: ``evpose <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, ExperimentConfig, dump_config, load_config, preset
from .dataset import list_sequences, load_sequence_frames, records_to_samples, write_sequence
from .events import read_events
from .graph import build_graph, write_graphs
from .lines import read_segments, write_segments
from .metrics import chance_baseline, evaluate, pck
from .model import PoseNet
from .pipeline import PipelineConfig, run_concurrent, run_sequential
from .poseio import write_poses
from .synth import StickFigureScene, synth_generate
from .training import predict_samples, train

log = logging.getLogger("evpose")


def _experiment(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return preset(getattr(args, "preset", None) or "baseline")


def _pipeline_cfg(cfg: ExperimentConfig, args) -> PipelineConfig:
    return PipelineConfig(cfg.surface, cfg.detector, cfg.graph.zeta, cfg.graph.merge_tol, cfg.graph.zeta_max,
                          frame_us=getattr(args, "frame_us", 10_000), seed=cfg.seed)


def _network(cfg: ExperimentConfig, args) -> PoseNet:
    net = PoseNet(cfg.model, seed=cfg.seed)
    if getattr(args, "checkpoint", None):
        net.load(args.checkpoint)
    elif not getattr(args, "untrained", False):
        raise ValueError("pass --checkpoint, or --untrained to run with random weights")
    return net


def _thresholds(text: str) -> list[float]:
    parts = [float(v) for v in text.split(":")]
    if len(parts) == 1:
        return parts
    if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
        raise argparse.ArgumentTypeError("expected start:stop:step")
    lo, hi, step = parts
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + k * step, 10) for k in range(n)]


def _samples(cfg: ExperimentConfig, root):
    records = []
    for seq in list_sequences(root):
        records += load_sequence_frames(seq, cfg.surface, cfg.detector, cfg.data.sample_every,
                                        cfg.data.warmup_us, seed=cfg.seed)
    return records_to_samples(records, (cfg.surface.width, cfg.surface.height),
                              cfg.graph.zeta, cfg.graph.merge_tol, cfg.graph.zeta_max)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    scene = StickFigureScene(resolution=(args.width, args.height), motion=args.motion, noise_rate=args.noise_rate)
    seeds = np.random.SeedSequence(args.seed).spawn(args.sequences)
    for i, ss in enumerate(seeds):
        res = synth_generate(scene, args.duration, int(ss.generate_state(1)[0]))
        d = write_sequence(Path(args.out) / f"seq_{i:03d}", res.events, res.gt)
        print(f"{d}: {len(res.events)} events, {len(res.gt)} poses")
    return 0


def cmd_detect_lines(args) -> int:
    cfg = _experiment(args)
    run = run_sequential(read_events(args.events, (cfg.surface.width, cfg.surface.height)), None,
                         _pipeline_cfg(cfg, args))
    write_segments(args.out, [(f.t, f.segments) for f in run.frames])
    print(f"{len(run.frames)} frames, {sum(len(f.segments) for f in run.frames)} segments -> {args.out}")
    return 0


def cmd_build_graph(args) -> int:
    cfg = _experiment(args)
    zeta = cfg.graph.zeta if args.zeta is None else args.zeta
    res = (cfg.surface.width, cfg.surface.height)
    frames = [(t if t is not None else 0, build_graph(segs, res, zeta, cfg.graph.merge_tol, cfg.graph.zeta_max))
              for t, segs in read_segments(args.segments)]
    write_graphs(args.out, frames)
    print(f"{len(frames)} graphs -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    train_root = args.data or cfg.data.train
    val_root = args.val or cfg.data.val
    if train_root is None:
        raise ValueError("no training data: pass --data or set [data] train")
    tr = _samples(cfg, train_root)
    va = _samples(cfg, val_root) if val_root else None
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    res = train(tr, va, cfg.model, cfg.paradigm, tcfg, seed=cfg.seed, out_dir=out)
    last = res.history[-1]
    print(f"trained {len(res.history)} epochs on {len(tr)} samples; "
          f"final l_target={last.l_target:.4f} pck04={last.pck04:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _experiment(args)
    net = _network(cfg, args)
    samples = _samples(cfg, args.data)
    if not samples:
        raise ValueError("no frames with detected lines in the evaluation data")
    preds = predict_samples(net, samples)
    gts = np.stack([s.gt.joints for s in samples])
    vis = np.stack([s.gt.visible for s in samples])
    report = evaluate(preds, gts, cfg.train.pck_p, vis)
    print(report.format_table())
    res = (cfg.surface.width, cfg.surface.height)
    ps = args.pck_thresholds
    curve = [(p, pck(preds, gts, p, vis), chance_baseline(res, gts, p, visible=vis)) for p in ps]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.key_values())
        (out / "pck_curve.txt").write_text("# p pck chance\n" + "".join(f"{p:g} {v:.6f} {c:.6f}\n" for p, v, c in curve))
        write_poses(out / "poses.txt", [(s.t, net.predict(s.graph)) for s in samples])
    for p, v, c in curve:
        print(f"pck@{p:g}={v:.4f} chance={c:.4f}")
    return 0


def cmd_bench(args) -> int:
    from .bench import run_bench

    cfg = _experiment(args)
    net = PoseNet(cfg.model, seed=cfg.seed)
    if args.checkpoint:
        net.load(args.checkpoint)
    rep = run_bench(net, n_nodes=args.nodes, n_events=args.events, seed=cfg.seed)
    text = rep.key_values()
    text += f"gnn.budget_ms={args.budget_ms:g}\ngnn.within_budget={str(rep.gnn.stats.median_ms < args.budget_ms).lower()}\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_visualize(args) -> int:
    from .viz import visualize

    events = read_events(args.events, (args.width, args.height)) if args.events else None
    paths = visualize(args.poses, args.gt, args.out, (args.width, args.height), background=args.background,
                      events=events, tolerance_us=args.tolerance_us, width=args.line_width)
    print(f"{len(paths)} image(s) -> {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = _experiment(args)
    net = _network(cfg, args)
    pcfg = _pipeline_cfg(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.concurrent:
        run = run_concurrent(args.events, net, pcfg)
        write_poses(out / "poses.txt", run.poses)
        timing = run.timing
        print(f"{len(run.poses)} poses, ingest {run.ingest_rate:.0f} events/s")
    else:
        run = run_sequential(args.events, net, pcfg, out_dir=out)
        timing = run.timing
        print(f"{len(run.frames)} frames, {len(run.poses)} poses")
    (out / "timing.txt").write_text(timing.report())
    sys.stdout.write(timing.report())
    return 0


def cmd_ingest(args) -> int:
    from .ingest import ingest_dhp19_like, ingest_eh36m_like

    fn = {"eh36m": ingest_eh36m_like, "dhp19": ingest_dhp19_like}[args.format]
    res = fn(args.src, args.out)
    print(f"{res.n_events} events, {res.n_poses} poses at {res.resolution[0]}x{res.resolution[1]} -> {args.out}")
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(dump_config(preset(args.name)))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evpose", description="Event-camera pose estimation with graph networks.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--config", help="experiment config file (INI)")
        g.add_argument("--preset", choices=sorted(PRESETS), help="named ablation preset (default baseline)")
        return p

    p = sub.add_parser("synth", help="generate synthetic stick-figure sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--duration", type=float, default=1.0, help="seconds per sequence")
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--motion", type=float, default=1.0)
    p.add_argument("--noise-rate", type=float, default=2000.0, help="noise events per second")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("detect-lines", help="replay events and write detected segments"))
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame-us", type=int, default=10_000)
    p.set_defaults(func=cmd_detect_lines)

    p = with_config(sub.add_parser("build-graph", help="convert a segment file to graphs"))
    p.add_argument("--segments", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--zeta", type=float)
    p.set_defaults(func=cmd_build_graph)

    p = with_config(sub.add_parser("train", help="train a network"))
    p.add_argument("--data", help="training dataset root")
    p.add_argument("--val", help="validation dataset root")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--untrained", action="store_true")
    p.add_argument("--pck-thresholds", type=_thresholds, default=[0.4], help="p, or start:stop:step")
    p.add_argument("--out", help="directory for report, PCK curve and poses")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("bench", help="latency and throughput benchmark"))
    p.add_argument("--checkpoint")
    p.add_argument("--nodes", type=int, default=300)
    p.add_argument("--events", type=int, default=2_000_000)
    p.add_argument("--budget-ms", type=float, default=10.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("visualize", help="draw pose overlays")
    p.add_argument("--poses", required=True)
    p.add_argument("--gt")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--background", help="background image")
    p.add_argument("--events", help="event file rendered as the background")
    p.add_argument("--tolerance-us", type=int, default=5000)
    p.add_argument("--line-width", type=int, default=1)
    p.set_defaults(func=cmd_visualize)

    p = with_config(sub.add_parser("run", help="end-to-end pipeline on an event file"))
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--untrained", action="store_true")
    p.add_argument("--concurrent", action="store_true", help="threaded stages instead of sequential replay")
    p.add_argument("--frame-us", type=int, default=10_000)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ingest", help="convert CSV dataset exports")
    p.add_argument("--format", choices=("eh36m", "dhp19"), required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("config", help="print a preset as a config file")
    p.add_argument("name", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes a one-line message and exit code 1
        if args.verbose:
            log.exception("command failed")
        print(f"evpose {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
