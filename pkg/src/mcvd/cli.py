"""Command-line entry point: ``mcvd <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data_io import (VideoFormatError, export_strip, extract_blocks, from_video, gen_dataset, read_video,
                      stack_blocks, to_video, write_video)
from .masking import TASK_ALIASES, TaskKind
from .metrics import evaluate_video
from .sampler import SamplerConfig, TaskRefused, blockwise_autoregressive, sample_block
from .trainer import NumericError, Trainer, model_from_checkpoint, schedule_from_metadata
from .denoiser import Denoiser

log = logging.getLogger("mcvd")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5
EXIT_REFUSED = 6

OUTPUT_ENV = "MCVD_OUTPUT_DIR"


def _out_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "."))


def _resolve(path, default_name: str) -> Path:
    if path is None:
        return _out_dir() / default_name
    return Path(path)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        cfg.override(item)
    return cfg.validate()


def _video_files(d: Path) -> list[Path]:
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(d.glob("*.mcvd"))


# subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.spec:
        args.config = args.spec
    cfg = _load_config(args)
    out = _resolve(args.out, "data")
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.synthetic()
    for i, video in enumerate(gen_dataset(spec, args.count)):
        write_video(out / f"video_{i:04d}.mcvd", video)
    cfg.save(out / "run_config.toml")
    print(f"wrote {args.count} videos to {out}")
    return EXIT_OK


def _training_data(cfg: RunConfig, data_dir: Path) -> dict:
    files = _video_files(data_dir)
    if not files:
        raise FileNotFoundError(f"no .mcvd videos in {data_dir}")
    layout = cfg.layout()
    blocks = []
    for i, f in enumerate(files):
        v = read_video(f)
        if v.shape[1:] != layout.frame_shape:
            raise ConfigError(f"{f.name} has frames {v.shape[1:]}, config expects {layout.frame_shape}")
        blocks += extract_blocks(v, layout, cfg.stride, source=i)
    return stack_blocks(blocks)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.set("train.steps", args.steps)
    data = _training_data(cfg, Path(args.data))
    out = _resolve(args.out, "model.ckpt")
    tcfg = cfg.train()
    if args.resume:
        state = load_checkpoint(args.resume)
        trainer = Trainer.from_checkpoint(state, data, tcfg)
        trainer.run_config = cfg.flat()
    else:
        trainer = Trainer(Denoiser(cfg.denoiser()), cfg.schedule(), tcfg, data, cfg.flat())
    remaining = max(0, tcfg.steps - trainer.step)
    trainer.run(remaining, out)
    save_checkpoint(out, trainer.state())
    print(f"trained to step {trainer.step}; eval loss {trainer.eval_loss():.5f}; checkpoint {out}")
    return EXIT_OK


def _task(name: str) -> TaskKind:
    if name in TASK_ALIASES:
        return TASK_ALIASES[name]
    return TaskKind(name)


def cmd_sample(args) -> int:
    state = load_checkpoint(args.checkpoint)
    meta = state.metadata
    caps = {TaskKind(c) for c in meta.get("capabilities", [])}
    task = _task(args.task)
    if task not in caps:
        raise TaskRefused(
            f"checkpoint was trained under masking regime {meta.get('masking_regime')} and cannot perform "
            f"{task.value}; supported tasks: {', '.join(sorted(c.value for c in caps))}")
    if args.blocks > 1 and task is not TaskKind.FUTURE_PREDICTION:
        raise TaskRefused("autoregressive extension (--blocks > 1) only applies to future prediction")
    model = model_from_checkpoint(state, use_ema=not args.no_ema)
    sched = schedule_from_metadata(meta)
    layout = model.cfg.layout
    frame = (layout.channels, layout.height, layout.width)

    past = future = None
    if args.video:
        frames = from_video(read_video(args.video))
        s = args.start
        if frames.shape[1:] != frame:
            raise ConfigError(f"video frames {frames.shape[1:]} do not match the model's {frame}")
        if frames.shape[0] < s + layout.window:
            raise ConfigError(f"video too short: need {s + layout.window} frames from start {s}")
        past = frames[s:s + layout.p]
        future = frames[s + layout.p + layout.k:s + layout.window]
    elif task is not TaskKind.UNCONDITIONAL:
        raise ConfigError(f"{task.value} needs --video for its conditioning frames")

    out = _resolve(args.out, "sample.mcvd")
    out.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for j in range(args.trajectories):
        scfg = SamplerConfig(args.sampler, args.steps, args.seed + j, task, args.blocks)
        if args.blocks > 1:
            video = blockwise_autoregressive(past, args.blocks, model, sched, scfg, layout,
                                             capabilities=caps).frames[0]
        else:
            video = sample_block(past, future, task, model, sched, scfg, layout, capabilities=caps)[0]
        path = out if args.trajectories == 1 else out.with_name(f"{out.stem}_{j}{out.suffix}")
        write_video(path, to_video(video.numpy()))
        written.append(path)
    sidecar = {"run_config": meta.get("run_config", {}), "fingerprint": meta.get("fingerprint"),
               "checkpoint": str(args.checkpoint), "checkpoint_step": state.step,
               "sampler": SamplerConfig(args.sampler, args.steps, args.seed, task, args.blocks).to_dict(),
               "trajectories": args.trajectories, "video": args.video, "start": args.start}
    out.with_name(out.name + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(written)} trajectories ({task.value}) to {out.parent}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    refs = _video_files(ref_dir)
    if not refs:
        raise FileNotFoundError(f"no reference videos in {ref_dir}")
    rows = []
    for ref_path in refs:
        vid = ref_path.stem
        preds = sorted(pred_dir.glob(f"{vid}_*.mcvd")) or sorted(pred_dir.glob(f"{vid}.mcvd"))
        preds = preds[:args.n]
        if not preds:
            log.warning("no predictions for %s", vid)
            continue
        ref = read_video(ref_path)
        trajs = [read_video(p) for p in preds]
        for t, p in zip(trajs, preds):
            if t.shape != ref.shape:
                raise ConfigError(f"{p.name} has shape {t.shape}, reference {ref.shape}")
        rows += [r.row() for r in evaluate_video(vid, trajs, ref)]
    if not rows:
        raise FileNotFoundError("no prediction/reference pairs found")
    report = _resolve(args.report, "report.csv")
    with open(report, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["video_id", "mse", "psnr", "ssim", "agg"])
        w.writeheader()
        w.writerows(rows)
    Path(str(report) + ".json").write_text(json.dumps({"pred": str(pred_dir), "ref": str(ref_dir), "n": args.n},
                                                      indent=2, sort_keys=True) + "\n")
    print(f"{'agg':<10} {'mse':>9} {'psnr':>8} {'ssim':>7} {'fvd':>5} {'lpips':>6}")
    for agg in ("mean", "best_of_n"):
        sel = [r for r in rows if r["agg"] == agg]
        print(f"{agg:<10} {np.mean([r['mse'] for r in sel]):>9.5f} {np.mean([r['psnr'] for r in sel]):>8.3f} "
              f"{np.mean([r['ssim'] for r in sel]):>7.4f} {'n/a':>5} {'n/a':>6}")
    return EXIT_OK


def cmd_export(args) -> int:
    video = read_video(args.video)
    export_strip(video, args.strip, scale=args.scale)
    print(f"wrote {args.strip}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    ok = run_all(print)
    return EXIT_OK if ok else EXIT_FAILED


# wiring ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcvd", description="Masked conditional video diffusion at desk scale.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def with_config(sp):
        sp.add_argument("--config", help="TOML file of dotted keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    g = sub.add_parser("gen-data", help="write synthetic moving-shape videos")
    with_config(g)
    g.add_argument("--spec", help="config file holding data.* keys")
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser on a directory of videos")
    with_config(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate frames from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task", choices=sorted(TASK_ALIASES), default="predict")
    s.add_argument("--sampler", choices=["ddim", "ddpm"], default="ddim")
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--blocks", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trajectories", type=int, default=1)
    s.add_argument("--video", help="source video supplying conditioning frames")
    s.add_argument("--start", type=int, default=0, help="first frame of the conditioning window")
    s.add_argument("--no-ema", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("evaluate", help="MSE/PSNR/SSIM of predictions against references")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--n", type=int, default=10)
    e.add_argument("--report")
    e.set_defaults(fn=cmd_evaluate)

    x = sub.add_parser("export", help="save a video as a PNG strip")
    x.add_argument("--video", required=True)
    x.add_argument("--strip", required=True)
    x.add_argument("--scale", type=int, default=4)
    x.set_defaults(fn=cmd_export)

    st = sub.add_parser("selftest", help="run the schedule/masking/gradient invariant suites")
    st.set_defaults(fn=cmd_selftest)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TaskRefused as e:
        print(f"refused: {e}", file=sys.stderr)
        return EXIT_REFUSED
    except (FloatingPointError, NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, VideoFormatError, CheckpointError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
