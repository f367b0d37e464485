"""Command-line entry point: gen-data, train, infer, eval, schedule, selftest.

Failures print one line ``sdm: error[<kind>]: <reason>`` on stderr and exit
with 2 (usage), 3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, apply_overrides, parse_kv_lines, read_config, unknown_keys
from .data import DataError, ImageKind, MaskSpec, load_dataset, read_image, read_mask, write_dataset, write_image, write_mask
from .diffusion import init_state, run
from .model import CheckpointError, DiscriminatorConfig, UNetConfig, load_checkpoint, make_predictor
from .numerics import NumericError, make_rng
from .schedule import ALL_KINDS, MaskSchedule, ScheduleKind
from .training import TrainConfig, Trainer, evaluate, mean_fill_baseline

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_CONFIG = "sdm.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _pair(kind):
    def parse(text: str):
        parts = text.split(",")
        if len(parts) == 1:
            parts = parts * 2
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
        try:
            return tuple(kind(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad number in {text!r}") from None

    return parse


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if len(vals) == 1:
        vals *= 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return vals[0], vals[1]


def _kinds(text: str) -> list[ImageKind]:
    try:
        return [ImageKind(k.strip()) for k in text.split(",") if k.strip()]
    except ValueError:
        choices = ", ".join(k.value for k in ImageKind)
        raise argparse.ArgumentTypeError(f"unknown kind in {text!r} (choose from {choices})") from None


def _schedule_kind(text: str) -> ScheduleKind:
    try:
        return ScheduleKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdm", description="Spatial diffusion inpainting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0, help="root seed for all random streams")
        return p

    g = add("gen-data", "write a synthetic image/mask dataset")
    g.add_argument("--kind", type=_kinds, default=[ImageKind.LINEAR_GRADIENT, ImageKind.CHECKERBOARD],
                   help="comma-separated image kinds, cycled by index")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--size", type=_size, default=(32, 32), help="H or HxW")
    g.add_argument("--channels", type=int, choices=(1, 3), default=1)
    g.add_argument("--out", required=True)
    d = MaskSpec()
    g.add_argument("--mask-rect-count", type=_pair(int), default=d.rect_count)
    g.add_argument("--mask-rect-size", type=_pair(float), default=d.rect_size)
    g.add_argument("--mask-stroke-count", type=_pair(int), default=d.stroke_count)
    g.add_argument("--mask-stroke-width", type=_pair(int), default=d.stroke_width)
    g.add_argument("--mask-stroke-vertices", type=_pair(int), default=d.stroke_vertices)
    g.add_argument("--mask-stroke-step", type=_pair(float), default=d.stroke_step)
    g.add_argument("--mask-hole-ratio", type=_pair(float), default=d.hole_ratio)

    t = add("train", "train generator and discriminator")
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--val", help="held-out dataset directory for masked_mse_eval")
    t.add_argument("--out", required=True, help="checkpoint and log directory")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--config", help=f"key=value file (default ./{DEFAULT_CONFIG} if present)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; model.* and disc.* address network configs")

    i = add("infer", "inpaint one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--mask", required=True)
    i.add_argument("--iters", type=int, default=TrainConfig().T_test)
    i.add_argument("--alpha", type=float, default=TrainConfig().alpha)
    i.add_argument("--schedule", type=_schedule_kind, default=ScheduleKind.LINEAR)
    i.add_argument("--out", required=True)
    i.add_argument("--dump-trajectory", metavar="DIR")

    e = add("eval", "hole-pixel metrics of a checkpoint on a dataset (CSV on stdout)")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--iters", type=int, default=TrainConfig().T_test)
    e.add_argument("--alpha", type=float, default=TrainConfig().alpha)
    e.add_argument("--schedule", type=_schedule_kind, default=ScheduleKind.LINEAR)

    s = add("schedule", "print reveal fractions and counts (CSV on stdout)")
    s.add_argument("--kind", default="all", help="schedule kind or 'all'")
    s.add_argument("--T", type=int, default=TrainConfig().T_test)
    s.add_argument("--holes", type=int, default=1024)

    st = add("selftest", "run oracle, gradient and invariant checks")
    st.add_argument("--trials", type=int, default=500, help="randomized diffusion trials")
    return parser


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, out) -> int:
    spec = MaskSpec(rect_count=args.mask_rect_count, rect_size=args.mask_rect_size,
                    stroke_count=args.mask_stroke_count, stroke_width=args.mask_stroke_width,
                    stroke_vertices=args.mask_stroke_vertices, stroke_step=args.mask_stroke_step,
                    hole_ratio=args.mask_hole_ratio)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    if not args.kind:
        raise UsageError("--kind is empty")
    try:
        rows = write_dataset(args.out, args.kind, args.count, args.size, args.channels, spec, args.seed)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc.strerror or exc}") from None
    print(f"wrote {len(rows)} pairs to {args.out}", file=out)
    return EXIT_OK


def load_train_settings(args) -> tuple[TrainConfig, UNetConfig, DiscriminatorConfig]:
    values: dict[str, str] = {}
    if args.config:
        values.update(read_config(args.config))
    elif Path(DEFAULT_CONFIG).exists():
        values.update(read_config(DEFAULT_CONFIG))
    values.update(parse_kv_lines(args.set, "--set"))
    if args.steps is not None:
        values["steps"] = str(args.steps)
    if args.batch_size is not None:
        values["batch_size"] = str(args.batch_size)
    base = {"": TrainConfig(), "model.": UNetConfig(), "disc.": DiscriminatorConfig()}
    bad = unknown_keys(values, base)
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join(bad)}")
    tcfg = apply_overrides(base[""], values)
    gcfg = apply_overrides(base["model."], values, "model.")
    if "disc.image_channels" not in values:
        values["disc.image_channels"] = str(gcfg.image_channels)
    dcfg = apply_overrides(base["disc."], values, "disc.")
    return tcfg, gcfg, dcfg


def cmd_train(args, out) -> int:
    tcfg, gcfg, dcfg = load_train_settings(args)
    images, masks, _ = load_dataset(args.data)
    if images.shape[0] == 0:
        raise DataError(f"{args.data}: empty training set")
    if images.shape[1] != gcfg.image_channels:
        raise DataError(f"{args.data}: {images.shape[1]}-channel images, model.image_channels={gcfg.image_channels}")
    val = None
    if args.val:
        vx, vm, _ = load_dataset(args.val)
        val = (vx, vm) if vx.shape[0] else None
    trainer = Trainer(tcfg, gcfg, dcfg, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer.fit(images, masks, tcfg.steps, log_path=out_dir / "train_log.csv", val=val)
    trainer.save(out_dir)
    print(f"trained {trainer.step} steps; checkpoints in {out_dir}", file=out)
    return EXIT_OK


def _load_generator(path):
    params, config, _ = load_checkpoint(path)
    if not isinstance(config, UNetConfig):
        raise CheckpointError(f"{path}: not a generator checkpoint")
    return params, config


def _check_compatible(config: UNetConfig, image: np.ndarray, mask: np.ndarray, where: str) -> None:
    c, h, w = image.shape[-3:]
    if c != config.image_channels:
        raise CheckpointError(f"{where}: {c}-channel input, checkpoint expects {config.image_channels}")
    if mask.shape[-2:] != (h, w):
        raise DataError(f"{where}: mask {mask.shape[-2:]} vs image {(h, w)}")
    step = 2**config.num_scales
    if h % step or w % step:
        raise CheckpointError(f"{where}: size {h}x{w} not divisible by {step} required by checkpoint")


def cmd_infer(args, out) -> int:
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    if args.alpha < 0:
        raise UsageError("--alpha must be >= 0")
    params, config = _load_generator(args.ckpt)
    image = read_image(args.image)
    mask = read_mask(args.mask)
    _check_compatible(config, image, mask, args.image)
    state = init_state(image[None], mask[None, None])
    sched = MaskSchedule(args.schedule, args.iters)
    rng = make_rng(args.seed, "sampling")
    record = args.dump_trajectory is not None
    x, traj = run(make_predictor(params, config), state, sched, args.alpha, rng, record=record)
    write_image(x[0], args.out)
    if record:
        d = Path(args.dump_trajectory)
        d.mkdir(parents=True, exist_ok=True)
        sfx = Path(args.out).suffix or (".pgm" if image.shape[0] == 1 else ".ppm")
        for t, (xt, mt, ut) in enumerate(zip(traj.images, traj.masks, traj.uncertainty), 1):
            write_image(xt[0], d / f"x_{t}{sfx}")
            write_mask(mt[0, 0], d / f"m_{t}.pgm")
            u = ut[0, 0]
            span = u.max() - u.min()
            un = (u - u.min()) / span if span > 0 else np.zeros_like(u)
            write_image(2.0 * un - 1.0, d / f"u_{t}.pgm")
    print(f"wrote {args.out}", file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    params, config = _load_generator(args.ckpt)
    images, masks, _ = load_dataset(args.data)
    if images.shape[0] == 0:
        raise DataError(f"{args.data}: empty dataset")
    _check_compatible(config, images[0], masks[0, 0], args.data)
    model = evaluate(params, config, images, masks, args.iters, args.alpha, args.seed, args.schedule.value)
    base = mean_fill_baseline(images, masks)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["method", "masked_mse", "masked_psnr", "masked_l1", "n_pixels"])
    for name, met in (("model", model), ("mean-fill", base)):
        row = met.as_row()
        writer.writerow([name, row["masked_mse"], row["masked_psnr"], row["masked_l1"], row["n_pixels"]])
    return EXIT_OK


def cmd_schedule(args, out) -> int:
    if args.T < 1:
        raise UsageError("--T must be >= 1")
    if args.holes < 0:
        raise UsageError("--holes must be >= 0")
    try:
        kinds = ALL_KINDS if args.kind == "all" else (ScheduleKind.parse(args.kind),)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["kind", "t", "fraction", "count"])
    for kind in kinds:
        sched = MaskSchedule(kind, args.T)
        counts = sched.reveal_counts(args.holes)
        for t in range(1, args.T + 1):
            writer.writerow([kind.value, t, f"{sched.known_fraction(t):.6f}", counts[t - 1]])
    return EXIT_OK


def cmd_selftest(args, out) -> int:
    from .selftest import run_selftest

    ok = run_selftest(seed=args.seed, trials=args.trials, out=out)
    if not ok:
        raise NumericError("selftest failed")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "schedule": cmd_schedule,
    "selftest": cmd_selftest,
}


def _fail(kind: str, code: int, message: str, err) -> int:
    text = " ".join(str(message).split())
    print(f"sdm: error[{kind}]: {text}", file=err)
    return code


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc, err)
    except ConfigError as exc:
        return _fail("usage", EXIT_USAGE, exc, err)
    except (DataError, CheckpointError) as exc:
        return _fail("data", EXIT_DATA, exc, err)
    except FileNotFoundError as exc:
        return _fail("data", EXIT_DATA, f"{exc.filename}: not found", err)
    except OSError as exc:
        return _fail("data", EXIT_DATA, f"{getattr(exc, 'filename', '') or ''} {exc.strerror or exc}", err)
    except NumericError as exc:
        return _fail("numeric", EXIT_NUMERIC, exc, err)
    except ValueError as exc:
        return _fail("data", EXIT_DATA, exc, err)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
