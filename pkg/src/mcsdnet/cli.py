"""Command-line entry point: ``mcsdnet {train,eval,predict,synth,verify}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (divergence or a failed verification suite).

Outputs go to ``--out`` when given, else to ``$MCSDNET_OUT/<command>``,
else to ``./runs/<command>``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluation, verify
from .architecture import McsdNet, predict_mask
from .config import ConfigError, RunConfig, dump_config, load_config, load_synthetic_config
from .data import (
    DataError,
    DatasetManifest,
    ManifestDataset,
    ManifestError,
    binarize_mask,
    build_sequences,
    load_manifest,
    load_sample,
    read_gray,
    split_monthly,
    synth_generate,
)
from .numerics import FormatError, NonFiniteError, Tensor
from .training import (
    DivergenceError,
    FocalLossConfig,
    TrainingLog,
    evaluate_loss,
    fit,
    load_checkpoint,
    save_checkpoint,
)

OUT_ENV = "MCSDNET_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"usage error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV) or "runs") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# data plumbing shared by train / eval
# ---------------------------------------------------------------------------

def split_datasets(cfg: RunConfig) -> tuple[ManifestDataset, ManifestDataset]:
    """Training and validation sequences described by ``cfg``."""
    if not cfg.data:
        raise ConfigError("key 'data' (training manifest) is not set")
    manifest = load_manifest(cfg.data)
    if cfg.val_data:
        val_manifest = load_manifest(cfg.val_data)
        train = ManifestDataset(manifest, build_sequences(manifest, cfg.width, cfg.interval))
        val = ManifestDataset(val_manifest, build_sequences(val_manifest, cfg.width, cfg.interval))
    else:
        split = split_monthly(manifest, cfg.split_groups, cfg.test_group)
        tr, te = split.sequences(manifest, cfg.width, cfg.interval)
        train, val = ManifestDataset(manifest, tr), ManifestDataset(manifest, te)
    if len(train) == 0:
        raise DataError("no complete training sequence; check width, interval and the split")
    if len(val) == 0:
        raise DataError("no complete validation sequence; check width, interval and the split")
    return train, val


def run_training(cfg: RunConfig, out: Path) -> TrainingLog:
    """Train per ``cfg``; stream ``log.csv`` and write checkpoints and the config echo."""
    train, val = split_datasets(cfg)
    model = McsdNet(cfg.model_config(), seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg))
    log_path = out / "log.csv"
    log = TrainingLog()
    log_path.write_text(log.to_csv())
    record = cfg.to_dict()

    def on_epoch(rec, state):
        with open(log_path, "a") as fp:
            fp.write(log.to_csv().splitlines()[-1] + "\n")
        save_checkpoint(out / "last.ckpt", state, record)
        if rec.val_loss == state.best_val:
            save_checkpoint(out / "best.ckpt", state, record)

    fit(model, train.to_arrays(), val.to_arrays(), cfg.train_config(), on_epoch=on_epoch, log=log)
    return log


def _model_from_checkpoint(ckpt_path, cfg: RunConfig | None) -> McsdNet:
    ckpt = load_checkpoint(ckpt_path)
    if cfg is None:
        return ckpt.build_model()
    model = McsdNet(cfg.model_config(), dtype=next(iter(ckpt.params.values())).dtype)
    expected = {n: p.shape for n, p in model.named_parameters()}
    found = {n: a.shape for n, a in ckpt.params.items()}
    diffs = [f"{n}: checkpoint {found.get(n, 'absent')} vs config {expected.get(n, 'absent')}"
             for n in sorted(set(expected) | set(found)) if found.get(n) != expected.get(n)]
    if diffs:
        more = f" (+{len(diffs) - 5} more)" if len(diffs) > 5 else ""
        raise ConfigError("config/checkpoint mismatch: " + "; ".join(diffs[:5]) + more)
    ckpt.config = model.config
    model = ckpt.build_model()
    return model


def _resolve_run_config(args, ckpt_path=None) -> tuple[RunConfig, bool]:
    """The run config from ``--config``, else the one stored in the checkpoint."""
    if args.config:
        return load_config(args.config, seed=getattr(args, "seed", None)), True
    if ckpt_path:
        ckpt = load_checkpoint(ckpt_path)
        return RunConfig.from_checkpoint_fields(ckpt.config, ckpt.train_config), False
    return load_config(None), False


def _predicted_masks_dir(pred_dir: Path, manifest: DatasetManifest, seq) -> np.ndarray:
    frames = []
    for i in seq:
        name = Path(manifest.records[i].mask or manifest.records[i].image).name
        path = pred_dir / name
        if not path.is_file():
            raise DataError(f"missing predicted mask {path}")
        frames.append(binarize_mask(read_gray(path)[:1]))
    return np.stack(frames)


def evaluate_dataset(model: McsdNet | None, dataset: ManifestDataset, cfg: RunConfig, bins,
                     pred_dir: Path | None = None) -> tuple[evaluation.MetricsReport, dict]:
    """Metrics of a checkpoint (or of precomputed masks in ``pred_dir``) on ``dataset``."""
    if len(dataset) == 0:
        raise DataError("the evaluation set contains no complete sequence")
    extra = {"sequences": len(dataset)}
    gts = [dataset.sample(i).mask for i in range(len(dataset))]
    if pred_dir is not None:
        preds = [_predicted_masks_dir(pred_dir, dataset.manifest, s) for s in dataset.sequences]
    else:
        data = dataset.to_arrays()
        loss, _ = evaluate_loss(model, data, cfg.batch_size, FocalLossConfig(cfg.gamma_focal, cfg.clamp))
        extra["loss"] = repr(loss)
        preds = []
        for start in range(0, len(data), cfg.batch_size):
            x, _ = data.batch(np.arange(start, min(start + cfg.batch_size, len(data))))
            p = model(Tensor(x.astype(model.dtype)))
            preds.extend(predict_mask(p, model.config.threshold))
    return evaluation.binned_evaluate(preds, gts, bins), extra


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    out = _out_dir(args, "train")
    log = run_training(cfg, out)
    last = log.records[-1]
    print(f"trained {len(log.records)} epochs; final train loss {last.train_loss:.6g}, "
          f"val loss {last.val_loss:.6g}; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint and not args.predictions:
        raise UsageError("eval needs --checkpoint or --predictions")
    cfg, explicit = _resolve_run_config(args, args.checkpoint)
    bins = evaluation.parse_bins([float(b) for b in args.bins.split(",")]) if args.bins else evaluation.default_bins()
    model = None
    if args.checkpoint and not args.predictions:
        model = _model_from_checkpoint(args.checkpoint, cfg if explicit else None)
    if args.data:
        manifest = load_manifest(args.data)
        dataset = ManifestDataset(manifest, build_sequences(manifest, cfg.width, cfg.interval))
    else:
        _, dataset = split_datasets(cfg)
    report, extra = evaluate_dataset(model, dataset, cfg,
                                     bins, Path(args.predictions) if args.predictions else None)
    out = _out_dir(args, "eval")
    (out / "metrics.txt").write_text(report.to_table())
    (out / "metrics.kv").write_text(report.to_keyvalue(extra))
    (out / "bins.csv").write_text(report.to_bins_csv())
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.checkpoint or not args.data:
        raise UsageError("predict needs --checkpoint and --data")
    cfg, explicit = _resolve_run_config(args, args.checkpoint)
    model = _model_from_checkpoint(args.checkpoint, cfg if explicit else None)
    data = Path(args.data)
    manifest = load_manifest(data / "manifest.csv" if data.is_dir() else data)
    windows = build_sequences(manifest, model.config.seq_len, cfg.interval)
    if not windows:
        raise DataError(f"no complete {model.config.seq_len}-frame window at {cfg.interval} min spacing; "
                        "frames are missing")
    out = _out_dir(args, "predict")
    (out / "masks").mkdir(exist_ok=True)
    if args.overlay:
        (out / "overlays").mkdir(exist_ok=True)
    done: set[int] = set()
    for seq in windows:
        todo = [k for k, i in enumerate(seq) if i not in done]
        if not todo:
            continue
        sample = load_sample(manifest, seq, require_mask=False)
        p = model(Tensor(sample.image[None].astype(model.dtype)))
        mask = predict_mask(p, model.config.threshold)[0]
        for k in todo:
            i = seq[k]
            done.add(i)
            name = Path(manifest.records[i].image).stem + ".png"
            Image.fromarray(mask[k, 0] * np.uint8(255), mode="L").save(out / "masks" / name)
            if args.overlay and sample.mask is not None:
                rgb = evaluation.overlay(mask[k, 0], sample.mask[k, 0])
                Image.fromarray(rgb, mode="RGB").save(out / "overlays" / name)
    skipped = len(manifest) - len(done)
    print(f"wrote {len(done)} masks to {out / 'masks'}" + (f"; {skipped} frames lie in no complete window" if skipped else ""))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_synthetic_config(args.config, seed=args.seed)
    out = _out_dir(args, "synth")
    manifest = synth_generate(cfg, out)
    print(f"wrote {len(manifest)} frames to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_suites(args.suite, seed=args.seed or 0)
    report = verify.summary(results)
    text = json.dumps(report, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcsdnet", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", help="run config TOML path or preset:<name>")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or precomputed masks)")
    p.add_argument("--checkpoint")
    p.add_argument("--config", help="run config; must match the checkpoint's model")
    p.add_argument("--data", help="manifest to evaluate (default: the held-out split of the run config)")
    p.add_argument("--predictions", help="directory of predicted masks named like the ground-truth masks")
    p.add_argument("--bins", help="comma-separated coverage bin edges in percent, e.g. 0,1,2,3,4,5")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval, seed=None)

    p = sub.add_parser("predict", help="write per-frame masks and optional overlays")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", help="sequence directory holding manifest.csv, or a manifest path")
    p.add_argument("--overlay", action="store_true", help="also write TP/FN/FP overlays where masks exist")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict, seed=None)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", help="synthetic-data TOML (keys of SyntheticConfig)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", default="all", choices=verify.SUITES + ("all",))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, DataError, FormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NonFiniteError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # remaining value errors come from inconsistent settings
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
