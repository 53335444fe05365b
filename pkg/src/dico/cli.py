"""Command-line interface.

Subcommands: make-data, train, sample, flops, bench, inspect-channels.
Every flag mirrors a RunConfig key one-to-one (underscores become dashes);
`--config FILE` reads the same keys from a key=value file, and flags win.
Exit codes: 0 success, 2 config error, 3 IO error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .costing import REFERENCE_SPECS, count_macs_params
from .diagnostics import bench_rows_to_csv, channel_activation_scores, throughput_bench
from .diffusion import GuidanceConfig, p_sample_loop
from .errors import ConfigError, DimensionError, NumericError, SerializationError, UsageError
from .modules import PRESETS, build_model
from .runconfig import RunConfig, parse_config
from .train import AdamW, Ema, ToyDataset, make_toy_data, train_loop
from .serialization import (
    load_checkpoint,
    load_dataset,
    read_checkpoint_config,
    save_checkpoint,
    save_dataset,
)
from . import reports

COMMANDS = ("make-data", "train", "sample", "flops", "bench", "inspect-channels")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dico",
        description="Train, sample, and analyze a diffusion ConvNet denoiser.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    help_text = {
        "make-data": "generate the two-class stripe dataset",
        "train": "train a denoiser on a stripe dataset",
        "sample": "draw images from a trained checkpoint",
        "flops": "analytic MAC/parameter report for a preset or reference spec",
        "bench": "wall-clock conv-module vs self-attention comparison",
        "inspect-channels": "per-channel activation scores from a checkpoint",
    }
    for command in COMMANDS:
        p = sub.add_parser(command, help=help_text[command])
        p.add_argument("--config", default=None, metavar="FILE", help="key=value config file")
        for f in dataclasses.fields(RunConfig):
            if f.name == "command":
                continue
            p.add_argument(
                "--" + f.name.replace("_", "-"),
                dest=f.name,
                default=argparse.SUPPRESS,
                metavar=f.type.upper() if isinstance(f.type, str) else "VALUE",
                help=f"RunConfig.{f.name}",
            )
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    text = ""
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as f:
            text = f.read()
    overrides = {
        name: value
        for name, value in vars(args).items()
        if name not in ("command", "config")
    }
    overrides["command"] = args.command
    return parse_config(text, overrides)


def _out(rc: RunConfig, name: str) -> str:
    os.makedirs(rc.out_dir, exist_ok=True)
    return os.path.join(rc.out_dir, name)


# -- commands ---------------------------------------------------------------------


def cmd_make_data(rc: RunConfig) -> None:
    dataset = make_toy_data(rc.data_spec())
    os.makedirs(os.path.dirname(rc.data_path) or ".", exist_ok=True)
    save_dataset(rc.data_path, dataset)
    reports.write_config_sidecar(rc.data_path, rc)
    print(
        f"wrote {rc.data_path}: {rc.n_images} images, "
        f"{rc.in_channels}x{rc.image_size}x{rc.image_size}"
    )


def _load_dataset(rc: RunConfig) -> ToyDataset:
    return load_dataset(rc.data_path)


def cmd_train(rc: RunConfig) -> None:
    dataset = _load_dataset(rc)
    config = rc.model_config()
    model = build_model(config, seed_or_rng=rc.seed)
    sched = rc.schedule()
    opt = AdamW(model.named_parameters(), lr=rc.lr, weight_decay=rc.weight_decay)
    ema = Ema(model.named_parameters(), decay=rc.ema_decay)
    rng = np.random.default_rng(rc.seed)

    log_every = max(1, rc.steps // 10)

    def log_fn(step, l_simple, l_vlb):
        if step % log_every == 0 or step == rc.steps - 1:
            print(f"step {step:>6d}  l_simple {l_simple:.4f}  l_vlb {l_vlb:.4f}")

    history = train_loop(
        model, dataset, sched, opt, ema,
        steps=rc.steps, batch_size=rc.batch_size, rng=rng,
        hflip_prob=rc.hflip_prob, log_fn=log_fn,
    )

    ckpt_path = _out(rc, rc.checkpoint)
    save_checkpoint(ckpt_path, model, opt, ema, step=rc.steps)
    reports.write_config_sidecar(ckpt_path, rc)
    csv_path = _out(rc, "loss.csv")
    reports.write_csv(csv_path, rc, reports.loss_history_csv(history))
    reports.save_loss_figure(reports.figure_path_for(csv_path), history)
    print(f"wrote {ckpt_path}, {csv_path}, {reports.figure_path_for(csv_path)}")


def _load_model_for_inference(rc: RunConfig):
    config = read_checkpoint_config(rc.checkpoint)
    model = build_model(config, seed_or_rng=0)
    ema = Ema(model.named_parameters(), decay=rc.ema_decay)
    load_checkpoint(rc.checkpoint, model, ema=ema)
    return model, ema


def _sample_labels(rc: RunConfig, num_classes: int) -> np.ndarray:
    if rc.class_label < 0:
        return np.arange(rc.num_samples, dtype=np.int64) % num_classes
    if rc.class_label >= num_classes:
        raise ConfigError(
            f"class_label {rc.class_label} out of range for {num_classes} classes"
        )
    return np.full(rc.num_samples, rc.class_label, dtype=np.int64)


def cmd_sample(rc: RunConfig) -> None:
    model, ema = _load_model_for_inference(rc)
    config = model.config
    labels = _sample_labels(rc, config.num_classes)
    sched = rc.schedule(respaced=True)
    guidance = GuidanceConfig(scale=rc.cfg_scale, enabled=(rc.cfg_scale != 1.0))
    rng = np.random.default_rng(rc.seed)
    shape = (rc.num_samples, config.in_channels, rc.image_size, rc.image_size)

    def run():
        return p_sample_loop(
            model, shape, labels, sched, rng, guidance=guidance, clip_x0=rc.clip_x0
        )

    if rc.use_ema:
        with ema.swapped_in():
            images = run()
    else:
        images = run()

    grid_name = "samples.pgm" if config.in_channels == 1 else "samples.ppm"
    grid_path = _out(rc, grid_name)
    reports.write_pnm_grid(grid_path, images, rc, cols=rc.grid_cols)
    npy_path = _out(rc, "samples.npy")
    reports.save_samples_npy(npy_path, images, rc)
    print(f"wrote {grid_path}, {npy_path} ({rc.num_samples} samples)")


def cmd_flops(rc: RunConfig) -> None:
    target = rc.target or rc.preset
    if target not in PRESETS and target not in REFERENCE_SPECS:
        raise ConfigError(
            f"unknown cost target {target!r}; known: {sorted(PRESETS) + sorted(REFERENCE_SPECS)}"
        )
    report = count_macs_params(target, (rc.image_size, rc.image_size))
    csv_path = _out(rc, "flops.csv")
    reports.write_csv(csv_path, rc, report.to_csv())
    reports.save_cost_figure(reports.figure_path_for(csv_path), report)
    print(f"{target} @ {rc.image_size}x{rc.image_size}: "
          f"{report.total_macs:,} MACs, {report.total_params:,} params ({report.note})")
    print(f"wrote {csv_path}, {reports.figure_path_for(csv_path)}")


def cmd_bench(rc: RunConfig) -> None:
    rows = throughput_bench(
        shapes=rc.bench_shape_list(),
        warmup=rc.bench_warmup,
        iters=rc.bench_iters,
        seed=rc.seed,
    )
    csv_path = _out(rc, "bench.csv")
    reports.write_csv(csv_path, rc, bench_rows_to_csv(rows))
    reports.save_bench_figure(reports.figure_path_for(csv_path), rows)
    for r in rows:
        print(f"{r.block:15s} N={r.n_tokens:<5d} d={r.width:<4d} "
              f"median {r.median_us:10.1f} us  macs {r.macs:,}")
    print(f"wrote {csv_path}, {reports.figure_path_for(csv_path)}")


def cmd_inspect_channels(rc: RunConfig) -> None:
    model, ema = _load_model_for_inference(rc)
    config = model.config
    dataset = _load_dataset(rc)
    n = min(rc.batch_size, dataset.images.shape[0])
    z = dataset.images[:n]
    t = np.zeros(n, dtype=np.int64)
    y = dataset.labels[:n].astype(np.int64)

    from .tensor import Tensor, no_grad

    capture: dict = {}
    with no_grad():
        if rc.use_ema:
            with ema.swapped_in():
                model.forward(Tensor(z), t, y, capture=capture)
        else:
            model.forward(Tensor(z), t, y, capture=capture)
    report = channel_activation_scores(capture, "stage5")
    csv_path = _out(rc, "channels.csv")
    reports.write_csv(csv_path, rc, report.to_csv())
    reports.save_activation_figure(
        reports.figure_path_for(csv_path), {"cca" if config.use_cca else "no-cca": report}
    )
    print(f"stage5 activation over {n} images: mean {report.scores.mean():.4f}, "
          f"max {report.scores.max():.4f}")
    print(f"wrote {csv_path}, {reports.figure_path_for(csv_path)}")


_DISPATCH = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "inspect-channels": cmd_inspect_channels,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        rc = _resolve(args)
        _DISPATCH[args.command](rc)
    except (ConfigError, UsageError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, SerializationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
