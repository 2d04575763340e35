"""Command-line entry point: ``asapnet {train,infer,bench,ablate}``.

Exit status: 0 on success, 2 for bad flags or configuration, 1 for any
other error. Log verbosity comes from ``ASAP_LOG`` (quiet, info, debug).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from asapnet import bench as B
from asapnet.config import RunConfig, config_load
from asapnet.data import (
    LossLog,
    center_crop,
    checkpoint_load,
    checkpoint_save,
    load_image,
    load_label_map,
    one_hot,
    synth_dataset,
    write_image,
)
from asapnet.errors import ConfigurationError, DataError, FormatError, UsageError
from asapnet.generator import AblationMode, generator_forward, lowres_input, predict_grid
from asapnet.training import TrainingDiverged, init_train_state, train

log = logging.getLogger("asapnet")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CliUsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("ASAP_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise CliUsageError(f"ASAP_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _modes(text: str) -> list[str]:
    names = [v for v in text.split(",") if v]
    valid = [m.value for m in AblationMode]
    bad = [n for n in names if n not in valid]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown mode(s) {bad}; choose from {valid}")
    return names


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="seed for every random choice (init, data, shuffling)")
    common.add_argument("--workers", type=int, default=1, help="threads for the pixelwise stage")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")

    p = argparse.ArgumentParser(prog="asapnet", description="Spatially-adaptive pixelwise image translation")
    sub = p.add_subparsers(dest="command", required=True, metavar="{train,infer,bench,ablate}")

    t = sub.add_parser("train", parents=[common], help="train on the synthetic texture dataset")
    t.add_argument("--output", type=Path, required=True, help="checkpoint path (loss log goes next to it)")
    t.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")

    i = sub.add_parser("infer", parents=[common], help="run a trained generator on one image")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--input", type=Path, required=True, help="RGB/gray PNG or PPM, or a label-map PNG")
    i.add_argument("--output", type=Path, required=True)
    i.add_argument("--intermediates", type=Path,
                   help="directory for the low-res input and a parameter-grid magnitude image")

    b = sub.add_parser("bench", parents=[common], help="per-stage runtime breakdown")
    b.add_argument("--resolutions", type=_int_list, default=[512, 1024])
    b.add_argument("--reps", type=int, default=B.MIN_REPS)
    b.add_argument("--warmup", type=int, default=B.MIN_WARMUP)
    b.add_argument("--mode", type=_modes, default=["full"])
    b.add_argument("--output", type=Path, help="also write the report as CSV")

    a = sub.add_parser("ablate", parents=[common], help="compare ablation modes or downsampling factors")
    a.add_argument("--action", choices=("sweep", "bench", "train"), default="sweep")
    a.add_argument("--modes", type=_modes, default=[m.value for m in AblationMode])
    a.add_argument("--s-values", type=_int_list, default=[16, 32, 64])
    a.add_argument("--resolution", type=int, default=512)
    a.add_argument("--reps", type=int, default=B.MIN_REPS)
    a.add_argument("--warmup", type=int, default=B.MIN_WARMUP)
    a.add_argument("--output", type=Path, help="directory for per-mode checkpoints (train)")
    return p


def _load_config(args) -> RunConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    return config_load(args.config, overrides)


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=2) if args.json else text)


# --- train --------------------------------------------------------------------


def run_training(cfg: RunConfig, output: Path, workers: int = 1, resume: Path | None = None):
    tc, gc, dc = cfg.train, cfg.generator, cfg.discriminator
    dataset = synth_dataset(cfg.data)
    if gc.input_channels != cfg.data.classes:
        raise ConfigurationError(
            f"generator.input_channels = {gc.input_channels} but the dataset has {cfg.data.classes} classes"
        )
    size = cfg.data.size
    if resume is not None:
        state = checkpoint_load(resume, dtype=tc.dtype)
        if (state.height, state.width) != (size, size) or state.mode.value != tc.mode:
            raise ConfigurationError(f"{resume}: checkpoint does not match the configured size or mode")
    else:
        state = init_train_state(gc, dc, tc, size, size)
    output.parent.mkdir(parents=True, exist_ok=True)
    loss_log = LossLog(output.with_suffix(".losses.csv"))
    pending: list[tuple] = []

    def on_step(st, _losses):
        pending.append(st.loss_history[-1])
        if tc.checkpoint_every and st.step % tc.checkpoint_every == 0:
            loss_log.append(pending)
            pending.clear()
            checkpoint_save(st, output)
            log.info("checkpoint at step %d -> %s", st.step, output)

    try:
        state = train(dataset, state, gc, dc, tc, workers=workers, on_step=on_step)
    except TrainingDiverged as e:
        loss_log.append(pending)
        snap = output.with_suffix(".diverged.json")
        snap.write_text(json.dumps(e.snapshot))
        raise RuntimeError(f"{e} (snapshot in {snap})") from e
    loss_log.append(pending)
    checkpoint_save(state, output)
    return state


def cmd_train(args) -> int:
    cfg = _load_config(args)
    state = run_training(cfg, args.output, args.workers, args.checkpoint)
    last = dict(zip(("step", "d_loss", "g_adv", "g_fm", "g_rec"), state.loss_history[-1])) if state.loss_history else {}
    _emit(args, {"checkpoint": str(args.output), "final": last},
          f"trained to step {state.step}; checkpoint {args.output}")
    return 0


# --- infer --------------------------------------------------------------------


def _read_input(path: Path, channels: int) -> np.ndarray:
    """RGB/gray image when the channel count matches, otherwise a label map."""
    try:
        img = load_image(path)
        if img.shape[1] == channels:
            return img
    except FormatError:
        pass
    return one_hot(load_label_map(path), channels)


def _grid_magnitude(grid: np.ndarray, s: int) -> np.ndarray:
    mag = np.sqrt((grid.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    lo, hi = mag.min(), mag.max()
    norm = (mag - lo) / (hi - lo) * 2 - 1 if hi > lo else np.zeros_like(mag)
    return norm.repeat(s, axis=2).repeat(s, axis=3)


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    state = checkpoint_load(args.checkpoint)
    gen = state.generator(cfg.generator)
    x = _read_input(args.input, cfg.generator.input_channels)
    x = center_crop(x, gen.factors.total)
    if x.shape[2:] != (gen.height, gen.width):
        raise ConfigurationError(
            f"input is {x.shape[2]}x{x.shape[3]} after cropping; checkpoint was trained at {gen.height}x{gen.width}"
        )
    x = x.astype(gen.dtype)
    out, _ = generator_forward(gen, x, workers=args.workers, keep_cache=False)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    write_image(out[:, :3] if out.shape[1] >= 3 else out[:, :1], args.output)
    written = [str(args.output)]
    if args.intermediates is not None:
        d = args.intermediates
        d.mkdir(parents=True, exist_ok=True)
        if x.shape[1] in (1, 3):
            write_image(np.clip(lowres_input(gen, x), -1, 1), d / "lowres.png")
            written.append(str(d / "lowres.png"))
        grid, _ = predict_grid(gen, x)
        write_image(_grid_magnitude(grid, gen.factors.total), d / "param_grid.png")
        written.append(str(d / "param_grid.png"))
    _emit(args, {"written": written}, "wrote " + ", ".join(written))
    return 0


# --- bench / ablate ---------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    reports = {}
    for mode in args.mode:
        reports[mode] = B.time_breakdown(
            cfg.generator, args.resolutions, args.reps, args.warmup, args.workers,
            dtype=cfg.train.precision, seed=cfg.train.seed, mode=mode,
        )
    if args.output is not None:
        args.output.write_text("".join(r.to_csv() for r in reports.values()))
    if args.json:
        print(json.dumps({m: json.loads(r.to_json()) for m, r in reports.items()}, indent=2))
    else:
        for mode, r in reports.items():
            print(f"mode={mode} workers={r.metadata['workers']} precision={r.metadata['precision']} "
                  f"config={r.metadata['config_hash']}")
            print(r.table())
    return 1 if any(r.failures for r in reports.values()) else 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if args.action == "sweep":
        rows, monotone = B.ablation_sweep(
            cfg.generator, args.s_values, args.resolution, args.reps, args.warmup, args.workers,
            dtype=cfg.train.precision, seed=cfg.train.seed,
        )
        payload = {"rows": [dataclasses.asdict(r) for r in rows], "time_nonincreasing_in_S": monotone}
        _emit(args, payload, B.sweep_table(rows) + f"\ntotal time non-increasing in S: {monotone}")
        return 0
    if args.action == "bench":
        args.mode, args.resolutions, args.output = args.modes, [args.resolution], None
        return cmd_bench(args)
    if args.output is None:
        raise CliUsageError("ablate --action train needs --output DIR")
    results = {}
    for mode in args.modes:
        mcfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, mode=mode))
        state = run_training(mcfg, args.output / f"{mode}.ckpt", args.workers)
        results[mode] = dict(zip(("step", "d_loss", "g_adv", "g_fm", "g_rec"), state.loss_history[-1]))
    text = "\n".join(f"{m}: " + " ".join(f"{k}={v:.4g}" for k, v in r.items()) for m, r in results.items())
    _emit(args, results, text)
    return 0


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    try:
        _setup_logging()
        if args.workers < 1:
            raise CliUsageError("--workers must be >= 1")
        return COMMANDS[args.command](args)
    except (CliUsageError, ConfigurationError) as e:
        parser.print_usage(sys.stderr)
        print(f"asapnet: error: {e}", file=sys.stderr)
        return 2
    except (DataError, FormatError, UsageError, OSError, MemoryError, RuntimeError) as e:
        print(f"asapnet: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - still one line, still nonzero
        log.debug("unexpected failure", exc_info=True)
        print(f"asapnet: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
