"""Command-line interface: synth, train, sample, eval, render, info."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import render as render_mod
from . import trainer as trainer_mod
from .errors import CausalTrajError, ConfigError, DataError
from .model import ModelConfig, TrajectoryModel


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_synth(args) -> int:
    fs = data_mod.synth_forking_play(
        count=args.count,
        frames=args.frames,
        players=args.players,
        seed=args.seed,
        turn_deg=args.turn_deg,
    )
    data_mod.write_trajectories(args.out, fs.trajectories)
    data_mod.write_sidecar(
        args.out + ".meta",
        {
            "kind": "synthetic_forking_play",
            "seed": args.seed,
            "fork_frame": fs.fork_frame,
            "turn_deg": fs.turn_deg,
            "branch_counts": f"{int((fs.branch == 0).sum())},{int((fs.branch == 1).sum())}",
        },
    )
    _print({"written": args.out, **fs.trajectories.describe()})
    return 0


def _model_config_for(args, ts: data_mod.TrajectorySet) -> ModelConfig:
    future = ts.frames - args.context
    if future < 1:
        raise ConfigError(
            f"context {args.context} leaves no future frames in {ts.frames}-frame data"
        )
    common = dict(
        num_agents=ts.num_agents,
        num_components=args.components,
        context_frames=args.context,
        future_frames=future,
        temporal=args.temporal,
        use_mesh=not args.no_mesh,
        seed=args.seed,
    )
    if args.preset == "small":
        return ModelConfig.small(**common)
    return ModelConfig(**common)


def cmd_train(args) -> int:
    ts = data_mod.read_trajectories(args.data)
    if args.resume:
        model, optimizer, cfg, start_epoch = trainer_mod.load_training_checkpoint(args.resume)
        if args.epochs is not None and args.epochs != cfg.epochs:
            raise ConfigError(
                f"resumed run was planned for {cfg.epochs} epochs; drop --epochs or match it"
            )
        if start_epoch >= cfg.epochs:
            raise ConfigError(f"nothing to resume: {start_epoch}/{cfg.epochs} epochs done")
    else:
        model = TrajectoryModel(_model_config_for(args, ts))
        cfg = trainer_mod.TrainConfig(
            epochs=args.epochs if args.epochs is not None else 10,
            batch_size=args.batch_size,
            lr_max=args.lr,
            seed=args.seed,
        )
        optimizer, start_epoch = None, 0
    history, _ = trainer_mod.train(
        model,
        ts,
        cfg,
        start_epoch=start_epoch,
        optimizer=optimizer,
        checkpoint_path=args.out,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    _print(
        {
            "checkpoint": args.out,
            "parameters": model.count_parameters(),
            "steps": len(history),
            "final_loss": history[-1]["loss"] if history else None,
        }
    )
    return 0


def cmd_sample(args) -> int:
    model, _, _ = model_mod.load_model(args.model)
    ts = data_mod.read_trajectories(args.data)
    P = model.config.context_frames
    if ts.frames < P:
        raise DataError(f"data has {ts.frames} frames, model context needs {P}")
    if ts.num_agents != model.config.num_agents:
        raise DataError(
            f"data roster {ts.num_agents} != model roster {model.config.num_agents}"
        )
    count = ts.count if args.limit is None else min(args.limit, ts.count)
    horizon = args.horizon if args.horizon is not None else model.config.future_frames
    contexts = ts.agent_major()[:count, :, :P]
    samples = model.rollout(
        contexts,
        ts.categories.astype(np.int64),
        horizon=horizon,
        num_scenarios=args.scenarios,
        seed=args.seed,
        mode=args.mode,
    )
    full = np.stack(
        [np.concatenate([s.context, s.positions], axis=0) for s in samples], axis=0
    )
    out_ts = data_mod.TrajectorySet(full, ts.categories, ts.frame_rate)
    data_mod.write_trajectories(args.out, out_ts)
    data_mod.write_sidecar(
        args.out + ".meta",
        {
            "kind": "sampled_scenarios",
            "model": os.path.abspath(args.model),
            "source": os.path.abspath(args.data),
            "contexts": count,
            "scenarios_per_context": args.scenarios,
            "context_frames": P,
            "horizon": horizon,
            "mode": args.mode,
            "seed": args.seed,
        },
    )
    _print(
        {
            "written": args.out,
            "contexts": count,
            "scenarios_per_context": args.scenarios,
            "frames": int(full.shape[1]),
        }
    )
    return 0


def _context_frames_for_eval(args) -> int:
    if args.context is not None:
        return args.context
    meta_path = args.pred + ".meta"
    if os.path.exists(meta_path):
        meta = data_mod.read_sidecar(meta_path)
        if "context_frames" in meta:
            return int(meta["context_frames"])
    raise ConfigError("pass --context: no sidecar metadata next to the predictions")


def cmd_eval(args) -> int:
    pred = data_mod.read_trajectories(args.pred)
    gt = data_mod.read_trajectories(args.gt)
    P = _context_frames_for_eval(args)
    meta_path = args.pred + ".meta"
    k = None
    if os.path.exists(meta_path):
        meta = data_mod.read_sidecar(meta_path)
        if "scenarios_per_context" in meta:
            k = int(meta["scenarios_per_context"])
    if k is None:
        if pred.count % gt.count != 0:
            raise DataError(
                f"{pred.count} predictions do not group evenly over {gt.count} truths"
            )
        k = pred.count // gt.count
    if k < 1 or pred.count % k != 0:
        raise DataError(f"{pred.count} predictions do not split into groups of {k}")
    contexts = pred.count // k
    if contexts > gt.count:
        raise DataError(f"predictions cover {contexts} contexts but truth has {gt.count}")
    horizon = min(pred.frames - P, gt.frames - P)
    if horizon < 1:
        raise DataError("no overlapping future frames to score")
    preds = pred.positions[:, P: P + horizon].reshape(
        contexts, k, horizon, pred.num_agents, 2
    )
    gts = gt.positions[:contexts, P: P + horizon]
    scale = metrics_mod.COURT_TO_METERS if args.meters else 1.0
    out = metrics_mod.evaluate_batch(preds, gts, slice_frames=args.slice, scale=scale)
    out["units"] = "meters" if args.meters else "court"
    _print(out)
    return 0


def cmd_render(args) -> int:
    ts = data_mod.read_trajectories(args.data)
    if not 0 <= args.index < ts.count:
        raise DataError(f"index {args.index} out of range for {ts.count} scenarios")
    P = args.context if args.context is not None else ts.frames
    seq = ts.positions[args.index]
    context, future = seq[:P], seq[P:] if P < ts.frames else None
    samples = None
    if args.pred is not None:
        pr = data_mod.read_trajectories(args.pred)
        meta = {}
        if os.path.exists(args.pred + ".meta"):
            meta = data_mod.read_sidecar(args.pred + ".meta")
        k = int(meta.get("scenarios_per_context", pr.count // ts.count))
        pc = int(meta.get("context_frames", P))
        rows = pr.positions[args.index * k: (args.index + 1) * k]
        samples = [r[pc:] for r in rows]
    render_mod.save_scene(args.out, context, ts.categories, future, samples)
    _print({"written": args.out})
    return 0


def cmd_info(args) -> int:
    raw = open(args.path, "rb").read(8)
    if raw.startswith(data_mod.MAGIC):
        _print(data_mod.read_trajectories(args.path).describe())
    elif raw.startswith(model_mod.CHECKPOINT_MAGIC):
        meta, arrays = model_mod.load_checkpoint(args.path)
        params = sum(int(np.prod(a.shape)) for n, a in arrays.items() if n.startswith("param/"))
        _print({"model": meta["model"], "extra": meta["extra"], "parameters": params})
    else:
        raise DataError(f"{args.path} is neither a trajectory set nor a checkpoint")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="causaltraj",
        description="Likelihood-based multi-agent trajectory forecasting",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic forking-play dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=512)
    s.add_argument("--frames", type=int, default=24)
    s.add_argument("--players", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--turn-deg", type=float, default=35.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a forecaster on a trajectory set")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=0.02)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--context", type=int, default=10)
    s.add_argument("--components", type=int, default=8)
    s.add_argument("--temporal", choices=("pointnet", "ssm"), default="pointnet")
    s.add_argument("--preset", choices=("small", "full"), default="small")
    s.add_argument("--no-mesh", action="store_true", help="ablate the pair-mesh blocks")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="roll out futures from contexts in a data file")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scenarios", type=int, default=20)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("sample", "mean"), default="sample")
    s.add_argument("--limit", type=int, default=None, help="use only the first contexts")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="score sampled futures against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--context", type=int, default=None)
    s.add_argument("--slice", type=int, default=None, help="score only the first frames")
    s.add_argument("--meters", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="draw a scenario (and predictions) as SVG")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--context", type=int, default=None)
    s.add_argument("--pred", default=None)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("info", help="describe a trajectory set or checkpoint")
    s.add_argument("path")
    s.set_defaults(func=cmd_info)

    return p


def entrypoint(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CausalTrajError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(entrypoint())
