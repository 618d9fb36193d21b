"""Command-line interface.

Subcommands: synth (generate a dataset), train (config-driven training),
eval (metrics plus optional density-map export), analyze (cost and
receptive-field report), gradcheck (finite-difference gradient audit).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scaletree",
        description="Scale-tree crowd density estimation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--val-count", type=int, default=50)
    p.add_argument("--background-count", type=int, default=64)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--count-min", type=int, default=0)
    p.add_argument("--count-max", type=int, default=20)
    p.add_argument("--clutter", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train from a flat key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (default: config out_dir or '.')")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--export", default=None,
                   help="directory for per-image heatmap/grid/figure exports")
    p.add_argument("--limit", type=int, default=None, help="evaluate at most N samples")

    p = sub.add_parser("analyze", help="parameter/MAC accounting and receptive fields")
    p.add_argument("--kind", choices=["tree", "standard"], default="tree")
    p.add_argument("--d", type=int, default=18, help="block width D (multiple of 9)")
    p.add_argument("--h", type=int, default=8)
    p.add_argument("--w", type=int, default=8)
    p.add_argument("--assignment", choices=["reverse", "forward"], default="reverse")
    p.add_argument("--json", default=None, help="also write the report as JSON")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit of a model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _cmd_synth(args) -> int:
    from .data import SceneSpec, generate_background_pool, generate_scene, save_dataset

    base = dict(width=args.width, height=args.height, clutter_level=args.clutter)
    rngspec = lambda seed, lo, hi: SceneSpec(count_range=(lo, hi), seed=seed, **base)
    train = [generate_scene(rngspec(args.seed + i, args.count_min, args.count_max),
                            sigma=args.sigma)
             for i in range(args.train_count)]
    val = [generate_scene(rngspec(args.seed + 10_000 + i, args.count_min, args.count_max),
                          sigma=args.sigma)
           for i in range(args.val_count)]
    background = generate_background_pool(
        args.background_count, SceneSpec(seed=args.seed + 20_000, **base)
    )
    for name, samples in (("train", train), ("val", val), ("background", background)):
        out = os.path.join(args.out, name)
        save_dataset(out, samples)
        counts = [s.count for s in samples]
        print(f"wrote {len(samples)} samples to {out} "
              f"(heads min {min(counts)} max {max(counts)})")
    return 0


def _load_split(root: str, sigma: float):
    from .data import load_dataset

    return load_dataset(root, sigma=sigma)


def _cmd_train(args) -> int:
    from .checkpoint import restore_model, save_checkpoint
    from .model import build_model
    from .optim import adam_init
    from .training import parse_config, train_loop

    with open(args.config) as f:
        config, paths = parse_config(f.read())
    missing = {"train_dir", "background_dir"} - set(paths)
    if config.lam == 0.0:
        missing -= {"background_dir"}
    if missing:
        raise ValueError(f"config must set paths: {sorted(missing)}")
    out_dir = args.out or paths.get("out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)

    crowd = [s for s in _load_split(paths["train_dir"], config.sigma)
             if not s.is_background]
    val = []
    if "val_dir" in paths:
        val = _load_split(paths["val_dir"], config.sigma)
    background = []
    if config.lam > 0.0:
        background = _load_split(paths["background_dir"], config.sigma)

    if args.resume:
        model, opt_state, last_epoch, _ = restore_model(args.resume)
        start_epoch = last_epoch + 1
        print(f"resuming from {args.resume} at epoch {start_epoch}")
    else:
        model = build_model(config.model_spec(), seed=config.seed)
        opt_state = adam_init(list(model.named_parameters().values()), lr=config.lr)
        start_epoch = 1

    log_path = os.path.join(out_dir, "train_log.tsv")
    log_file = open(log_path, "w")
    log_file.write("epoch\tld\tlc\tlb\ttotal\tval_mae\tval_mse\n")

    def emit(entry):
        print(entry.record_line())
        log_file.write(
            f"{entry.epoch}\t{entry.loss_density:.6f}\t{entry.loss_confidence:.6f}"
            f"\t{entry.loss_background:.6f}\t{entry.loss_total:.6f}"
            f"\t{entry.val_mae:.4f}\t{entry.val_mse:.4f}\n"
        )

    try:
        model, _ = train_loop(config, crowd, val, background, model=model,
                              opt_state=opt_state, start_epoch=start_epoch,
                              log_fn=emit)
    finally:
        log_file.close()

    ckpt_path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(ckpt_path, model, opt_state,
                    epoch=max(config.epochs, start_epoch - 1),
                    config=config.as_dict())
    print(f"checkpoint written to {ckpt_path}")
    print(f"epoch log written to {log_path}")
    return 0


def _cmd_eval(args) -> int:
    from .analysis import evaluate_mae_mse
    from .checkpoint import restore_model
    from .report import export_density_map
    from .tensor import Tensor

    model, _, _, config = restore_model(args.checkpoint)
    samples = _load_split(args.data, float(config.get("sigma", 4.0)))
    if args.limit is not None:
        samples = samples[: args.limit]
    metrics = evaluate_mae_mse(model, samples)
    for line in metrics.lines():
        print(line)
    print(metrics.record_line())
    for i, (pred, true) in enumerate(metrics.per_image_counts):
        print(f"IMG {i} pred={pred:.4f} true={true:.1f}")

    if args.export:
        for i, s in enumerate(samples):
            pred = model.predict_density(Tensor(s.image[np.newaxis]))
            density = pred.data[0, 0]
            title = (f"pred {density.sum():.2f} / true {len(s.points)}")
            export_density_map(args.export, f"pred_{i:05d}", density, title=title)
        print(f"exported {len(samples)} density maps to {args.export}")
    return 0


def _cmd_analyze(args) -> int:
    from .analysis import count_params_flops

    report = count_params_flops(args.kind, args.d, args.h, args.w,
                                leaf_assignment=args.assignment)
    for line in report.lines():
        print(line)
    record = report.as_record()
    print("RECORD " + json.dumps(record, sort_keys=True))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(record, f, indent=2, sort_keys=True)
        print(f"report written to {args.json}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import grad_check
    from .model import ModelSpec, build_model
    from .supervision import CrowdLabel, loss_background, loss_confidence, loss_density, loss_total
    from .tensor import Tensor

    spec = ModelSpec(
        backbone_layers=((8, False), (8, True), (12, False), (12, True)),
        low_tap_index=2, middle_tap_index=4, enhancer_count=2, d_channels=9,
        head_channels=8,
    )
    model = build_model(spec, seed=args.seed)
    model.eval_mode()  # freeze gates at 0.5 so the closure is deterministic
    rng = np.random.default_rng(args.seed)
    crowd_x = Tensor(rng.uniform(0, 1, (2, 1, 16, 16)))
    bg_x = Tensor(rng.uniform(0, 1, (1, 1, 16, 16)))
    gt = rng.uniform(0, 0.5, (2, 1, 4, 4))
    labels = CrowdLabel((gt > gt.mean()).astype(float))

    def closure():
        density, confidence = model.forward(crowd_x)
        _, bg_conf = model.forward(bg_x)
        return loss_total(
            loss_density(density, gt, 0.25, 4),
            loss_confidence(confidence, labels, 0.25, 4),
            loss_background(bg_conf, 0.25, 4),
        )

    report = grad_check(closure, model.named_parameters(), step=args.step,
                        tolerance=args.tolerance, max_coords=args.samples,
                        rng=np.random.default_rng(args.seed + 1))
    print(report.summary())
    return 0 if report.passed else 1


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse argv and run the chosen subcommand; returns the exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "analyze": _cmd_analyze,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # dataset/checkpoint errors carry their own context
        from .checkpoint import CheckpointError
        from .data import DatasetError

        if isinstance(e, (CheckpointError, DatasetError)):
            print(f"error: {e}", file=sys.stderr)
            return 1
        raise


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
