"""Command-line entry point: synth / train / eval / gradcheck / predict.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 numerical abort (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import quantum
from . import tensor as T
from .checkpoint import (load_checkpoint, restore_model, restore_optimizer,
                         save_checkpoint)
from .config import RunConfig
from .errors import (CheckpointError, ConfigError, ContractError, DatasetError,
                     NumericalError)
from .model import CLASS_NAMES, HybridModel
from .train import AdamW, CSV_HEADER, evaluate, fit
from .verify import run_scope


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qviton",
        description="Hybrid quantum-classical flood-tile classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--regions", type=int, required=True)
    p.add_argument("--tiles", type=int, required=True,
                   help="tiles per region")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--flood-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="preprocessing workers (default: available cores)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=list(D.SPLITS))
    p.add_argument("--data", default=None, help="override the dataset root")
    p.add_argument("--out", default=None, help="confusion matrix CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run gradient and oracle suites")
    p.add_argument("--scope", default="all",
                   choices=["numerics", "quantum", "quanv", "vit", "model", "all"])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("predict", help="classify a single raster tile")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tile", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def _prepare_datasets(cfg: RunConfig, dtype, splits=("train", "val"),
                      root_override=None, workers: int = 1):
    dc = cfg.data
    root = root_override or dc["root"]
    if not root:
        raise ConfigError("config field data.root: no dataset root configured")
    manifest = D.scan_dataset(root, band=dc["band"])
    D.split_dataset(manifest, ratios=tuple(dc["ratios"]), seed=cfg.seed,
                    granularity=dc["split_granularity"])
    datasets = {}
    for split in splits:
        ds = D.FloodDataset(
            manifest, split, cfg.image_size, band=dc["band"],
            median_filter=dc["median_filter"],
            percentile_stretch=dc["percentile_stretch"],
            augment_enabled=dc["augment"], dtype=dtype)
        ds.warmup(workers)
        datasets[split] = ds
    return manifest, datasets


def _build_model(cfg: RunConfig) -> HybridModel:
    return HybridModel(cfg.model_config(), seed=cfg.seed, dtype=cfg.dtype())


def cmd_synth(args) -> int:
    if args.regions < 1 or args.tiles < 1:
        raise ConfigError("--regions and --tiles must be at least 1")
    out = Path(args.out)
    try:
        labels = D.synth_generate(out, args.regions, args.tiles, seed=args.seed,
                                  tile_size=args.tile_size,
                                  flood_fraction=args.flood_fraction)
    except OSError as exc:
        raise ConfigError(f"cannot write dataset to {out}: {exc}") from None
    n_flooded = sum(labels.values())
    print(f"wrote {args.regions * args.tiles} tiles across {args.regions} "
          f"regions ({n_flooded} flooded) to {out}")
    return 0


def _truncate_csv(path: Path, keep_epoch: int) -> list[str]:
    """Keep header plus rows for epochs <= keep_epoch."""
    lines = [CSV_HEADER]
    if path.exists():
        for line in path.read_text().splitlines()[1:]:
            if line and int(line.split(",", 1)[0]) <= keep_epoch:
                lines.append(line)
    return lines


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    train_cfg = cfg.train_config()
    dtype = cfg.dtype()
    _, datasets = _prepare_datasets(cfg, dtype, splits=("train", "val"),
                                    workers=args.workers)
    train_ds, val_ds = datasets["train"], datasets["val"]
    model = _build_model(cfg)
    optimizer = AdamW(model.store, train_cfg)
    sampler_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    sampler = D.WeightedSampler(train_ds.labels(),
                                np.random.default_rng(sampler_seq))
    data_rng = np.random.default_rng(data_seq)

    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    last_path = out_dir / "last.qvck"
    best_path = out_dir / "best.qvck"

    start_epoch = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        resumed_cfg = RunConfig.from_dict(ckpt.config)
        if resumed_cfg.signature() != cfg.signature():
            raise CheckpointError(
                "checkpoint was written under a different model config; "
                "refusing to resume")
        restore_model(model, ckpt)
        restore_optimizer(optimizer, ckpt)
        sampler.set_state(ckpt.rng["sampler"])
        data_rng.bit_generator.state = ckpt.rng["data"]
        start_epoch = ckpt.epoch + 1
        print(f"resumed from {args.resume} at epoch {start_epoch}")
    csv_lines = _truncate_csv(csv_path, start_epoch - 1)
    csv_path.write_text("\n".join(csv_lines) + "\n")

    print(f"mode={cfg.mode} precision={cfg.doc['precision']} "
          f"params={model.param_count()} train={len(train_ds)} val={len(val_ds)}")
    quantum.reset_eval_count()
    best_f1 = -1.0
    checkpoint_every = int(cfg.doc["train"]["checkpoint_every"])
    keep_epoch_ckpts = bool(cfg.doc["train"]["keep_epoch_checkpoints"])

    def snapshot(path: Path, epoch: int, state) -> None:
        save_checkpoint(
            path, config=cfg.to_dict(), epoch=epoch, model=model,
            optimizer=state["optimizer"],
            rng_states={
                "dropout": model.dropout_rng.bit_generator.state,
                "sampler": state["sampler"].state(),
                "data": state["data_rng"].bit_generator.state,
            })

    def on_epoch(epoch, row, state) -> None:
        nonlocal best_f1
        with open(csv_path, "a") as fh:
            fh.write(row + "\n")
        report = state["report"]
        print(f"epoch {epoch}: loss {row.split(',')[2]} "
              f"val_acc {report.accuracy:.4f} val_f1 {report.flooded.f1:.4f}")
        if (epoch + 1) % checkpoint_every == 0 or epoch == train_cfg.total_epochs - 1:
            snapshot(last_path, epoch, state)
        if keep_epoch_ckpts:
            snapshot(out_dir / f"epoch_{epoch:03d}.qvck", epoch, state)
        if report.flooded.f1 > best_f1:
            best_f1 = report.flooded.f1
            snapshot(best_path, epoch, state)

    fit(model, train_ds, val_ds, train_cfg, optimizer=optimizer,
        sampler=sampler, data_rng=data_rng, start_epoch=start_epoch,
        on_epoch=on_epoch)

    cm, report = evaluate(model, val_ds)
    print(f"final val: acc {report.accuracy:.4f} "
          f"f1_flood {report.flooded.f1:.4f} "
          f"f1_nonflood {report.non_flooded.f1:.4f}")
    print(f"quantum circuit evaluations: {quantum.eval_count()}")
    print(f"metrics: {csv_path}  checkpoints: {last_path}, {best_path}")
    return 0


def _model_from_checkpoint(ckpt):
    cfg = RunConfig.from_dict(ckpt.config)
    model = _build_model(cfg)
    restore_model(model, ckpt)
    return cfg, model.eval()


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg, model = _model_from_checkpoint(ckpt)
    _, datasets = _prepare_datasets(cfg, cfg.dtype(), splits=(args.split,),
                                    root_override=args.data)
    dataset = datasets[args.split]
    cm, report = evaluate(model, dataset)

    print(f"split={args.split} n={cm.total}")
    print("confusion matrix (rows: true, cols: predicted)")
    print(f"{'':>18}{'non-flooded':>14}{'flooded':>10}")
    print(f"{'true non-flooded':>18}{cm.tn:>14}{cm.fp:>10}")
    print(f"{'true flooded':>18}{cm.fn:>14}{cm.tp:>10}")
    print(f"accuracy: {report.accuracy:.4f}")
    print(f"{'class':<14}{'precision':>10}{'recall':>10}{'f1':>10}")
    for name, m in (("Flooded", report.flooded),
                    ("Non-Flooded", report.non_flooded)):
        print(f"{name:<14}{m.precision:>10.4f}{m.recall:>10.4f}{m.f1:>10.4f}")
        if m.degenerate:
            print(f"{'':<14}zero-denominator: {', '.join(m.degenerate)}")

    out = Path(args.out) if args.out else Path(args.ckpt).parent / (
        f"confusion_{args.split}.csv")
    out.write_text(
        ",pred_non_flooded,pred_flooded\n"
        f"true_non_flooded,{cm.tn},{cm.fp}\n"
        f"true_flooded,{cm.fn},{cm.tp}\n")
    print(f"confusion matrix csv: {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_scope(args.scope)
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks over tolerance")
        return 1
    print(f"all {len(results)} checks within tolerance")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg, model = _model_from_checkpoint(ckpt)
    dc = cfg.data
    tile = D.load_raster(args.tile, band=dc["band"])
    x = D.preprocess_tile(tile, cfg.image_size,
                          median_filter=dc["median_filter"],
                          percentile_stretch=dc["percentile_stretch"],
                          dtype=cfg.dtype())
    with T.no_grad():
        logits = model(T.Tensor(x))
        probs = T.softmax(logits.reshape((1, -1))).data[0]
    label = int(np.argmax(probs))
    print(f"{args.tile}: {CLASS_NAMES[label]} "
          f"(p_non_flooded={probs[0]:.4f}, p_flooded={probs[1]:.4f})")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DatasetError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
