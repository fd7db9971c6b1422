"""``seqformer`` command line: pretrain -> extract -> train -> eval.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Every command writes ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericalError
from .config import ConfigError, RunConfig
from .convtrans import ConvTransConfig, ConvTransModel, load_model, save_model
from .data import (LABELS, MANIFEST, Dataset, WindowSpec, export_csv, load_features, save_features,
                   synth_classification_set, window_dataset, FeatureFormatError, read_labels)
from .encodings import build_tape_table, erpe_index_map
from .mae import (MAEConfig, MAEModel, extract_features, load_mae, pretrain, save_mae, synth_clips)
from .metrics import format_report, to_json
from .optim import OptimizerConfig
from .rng import Rng, derive_seed
from .serialization import CheckpointError
from .training import evaluate, train_classifier

log = logging.getLogger("seqformer")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# -- shared helpers -------------------------------------------------------

def _write_manifest(out: Path, command: str, cfg: RunConfig, seed: int, **extra) -> dict:
    manifest = {
        "command": command,
        "seed": seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "versions": {"seqformer": __version__, "numpy": np.__version__, "python": platform.python_version()},
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _dtype(cfg: RunConfig):
    return np.float32 if cfg["run.precision"] == "single" else np.float64


def _mae_config(cfg: RunConfig) -> MAEConfig:
    return MAEConfig(
        frames=cfg["mae.frames"], height=cfg["mae.height"], width=cfg["mae.width"], channels=cfg["mae.channels"],
        t_patch=cfg["mae.t_patch"], s_patch=cfg["mae.s_patch"], d_enc=cfg["mae.d_enc"],
        enc_layers=cfg["mae.enc_layers"], enc_heads=cfg["mae.enc_heads"], enc_ffn=cfg["mae.enc_ffn"],
        d_dec=cfg["mae.d_dec"], dec_layers=cfg["mae.dec_layers"], dec_heads=cfg["mae.dec_heads"],
        dec_ffn=cfg["mae.dec_ffn"], mask_ratio=cfg["mae.ratio"], loss=cfg["mae.loss"])


def _window_spec(cfg: RunConfig) -> WindowSpec:
    return WindowSpec(L=cfg["model.L"], stride=cfg["data.stride"] or cfg["model.L"],
                      tail_policy=cfg["data.tail_policy"])


def _load_clips(path: Path) -> tuple[list[str], list[np.ndarray], dict[str, int]]:
    files = sorted(path.glob("*.npy"))
    return [f.stem for f in files], [np.load(f) for f in files], read_labels(path / MANIFEST)


def _fmt(x: float) -> str:
    return repr(float(x))


# -- commands -------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, seed: int, out: Path) -> int:
    if args.kind == "features":
        ds = synth_classification_set(seed, args.n_per_class, L=args.length or cfg["model.L"], D=args.dim,
                                      difficulty=args.difficulty, split=args.split)
        save_features(ds, out)
        if args.export_csv:
            for seq in ds:
                export_csv(seq, out / f"{seq.source_id}.csv")
        _write_manifest(out, "synth", cfg, seed, kind="features", n_per_class=args.n_per_class,
                        difficulty=args.difficulty, dim=args.dim, histogram=ds.histogram)
        log.info("wrote %d feature sequences to %s", len(ds), out)
    else:
        n = args.n_per_class * 3
        labels = np.repeat(np.arange(3), args.n_per_class)
        clips = synth_clips(seed, n, cfg["mae.frames"] * max(1, args.segments), cfg["mae.height"],
                            cfg["mae.width"], cfg["mae.channels"], labels=labels)
        lines = []
        for i, (clip, lab) in enumerate(zip(clips, labels)):
            sid = f"clip_{LABELS[lab]}_{i:04d}"
            np.save(out / f"{sid}.npy", clip)
            lines.append(f"{sid}\t{LABELS[lab]}\n")
        (out / MANIFEST).write_text("".join(lines), encoding="utf-8")
        _write_manifest(out, "synth", cfg, seed, kind="clips", count=n)
        log.info("wrote %d clips to %s", n, out)
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig, seed: int, out: Path) -> int:
    mcfg = _mae_config(cfg)
    steps = args.steps or cfg["mae.steps"]
    if args.synthetic:
        clips = synth_clips(derive_seed(seed, "pretrain:clips"), cfg["mae.synthetic_clips"], mcfg.frames,
                            mcfg.height, mcfg.width, mcfg.channels)
    else:
        path = args.clips or cfg["data.clips_path"]
        if not path:
            raise UsageError("pretrain needs --synthetic, --clips DIR or data.clips_path")
        _, arrays, _ = _load_clips(Path(path))
        if not arrays:
            raise UsageError(f"no .npy clips in {path}")
        # cut long clips into pretraining-length segments
        clips = np.stack([c[s:s + mcfg.frames] for c in arrays
                          for s in range(0, c.shape[0] - mcfg.frames + 1, mcfg.frames)])
    model = MAEModel(mcfg, Rng.for_stage(seed, "mae:init"), dtype=_dtype(cfg))
    opt = OptimizerConfig(cfg["mae.optimizer"], cfg["mae.lr"], cfg["mae.beta1"], cfg["mae.beta2"],
                          cfg["mae.weight_decay"] if cfg["mae.optimizer"] != "Adam" else 0.0)
    rows = []
    losses = pretrain(model, clips, steps, seed, opt=opt, batch_size=cfg["mae.batch_size"],
                      warmup_steps=cfg["mae.warmup"], on_step=lambda s, l, lr: rows.append((s, l, lr)))
    with open(out / "pretrain_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        w.writerows((s, _fmt(l), _fmt(lr)) for s, l, lr in rows)
    save_mae(out / "mae.ckpt", model, {"seed": seed})
    _write_manifest(out, "pretrain", cfg, seed, mask_ratio=mcfg.mask_ratio, steps=steps,
                    synthetic=bool(args.synthetic), initial_loss=losses[0], final_loss=losses[-1],
                    optimizer=opt.kind, base_lr=opt.base_lr, betas=[opt.beta1, opt.beta2])
    log.info("pretrain: loss %.4f -> %.4f over %d steps", losses[0], losses[-1], steps)
    return EXIT_OK


def cmd_extract(args, cfg: RunConfig, seed: int, out: Path) -> int:
    try:
        model, _ = load_mae(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise UsageError(f"cannot load MAE checkpoint: {exc}") from None
    expected = _mae_config(cfg)
    if args.config and model.config.to_dict() != expected.to_dict():
        raise UsageError("MAE checkpoint does not match the mae.* settings of --config")
    path = Path(args.clips or cfg["data.clips_path"] or "")
    if not path.is_dir():
        raise UsageError(f"clips directory not found: {path}")
    ids, clips, labels = _load_clips(path)
    seqs = []
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for sid, clip in zip(ids, clips):
        label = labels.get(sid)
        try:
            seq = extract_features(model, clip, source_id=sid, label=label)
        except ValueError as exc:
            raise UsageError(f"{sid}: {exc}") from None
        seqs.append(seq)
        if args.export_csv:
            export_csv(seq, feat_dir / f"{sid}.csv")
    save_features(Dataset(seqs), feat_dir)
    _write_manifest(out, "extract", cfg, seed, checkpoint=str(args.checkpoint), clips=len(seqs),
                    feature_dim=model.config.d_enc)
    log.info("extracted %d sequences of dimension %d", len(seqs), model.config.d_enc)
    return EXIT_OK


def _load_dataset(path: str, split: str) -> Dataset:
    if not path or not Path(path).is_dir():
        raise UsageError(f"feature directory not found: {path!r}")
    try:
        return load_features(path, split)
    except FeatureFormatError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args, cfg: RunConfig, seed: int, out: Path) -> int:
    for flag, key in (("no_erpe", "model.erpe"), ("no_tape", "model.tape"), ("no_skip", "model.skip")):
        if getattr(args, flag):
            cfg.set(key, False)
    if args.epochs:
        cfg.set("run.epochs", args.epochs)
    train = _load_dataset(args.features or cfg["data.train_path"], "train")
    if len(train) == 0:
        raise UsageError("training set is empty")
    if any(s.label is None for s in train):
        raise UsageError("training data contains unlabeled sequences")
    spec = _window_spec(cfg)
    x, y, _ = window_dataset(train, spec)
    if len(x) == 0:
        raise UsageError(f"no windows of length {spec.L} in the training data")
    val = None
    val_path = args.val or cfg["data.val_path"]
    if val_path:
        vx, vy, _ = window_dataset(_load_dataset(val_path, "val"), spec)
        val = (vx, vy)
    mcfg = ConvTransConfig(
        input_dim=train.input_dim, d_model=cfg["model.d_model"], num_layers=cfg["model.layers"],
        num_heads=cfg["model.heads"], ffn_dim=cfg["model.ffn_dim"], segment_len=cfg["model.L"],
        conv_kernel=cfg["model.conv_kernel"], dropout=cfg["model.dropout"], use_tape=cfg["model.tape"],
        use_erpe=cfg["model.erpe"], skip=cfg["model.skip"])
    model = ConvTransModel(mcfg, Rng.for_stage(seed, "classifier:init"), dtype=_dtype(cfg))
    opt = OptimizerConfig(cfg["optimizer.kind"], cfg["optimizer.lr"], cfg["optimizer.beta1"],
                          cfg["optimizer.beta2"], cfg["optimizer.weight_decay"], cfg["optimizer.eps"])
    result = train_classifier(model, x, y, cfg["run.epochs"], seed, opt=opt, batch_size=cfg["run.batch_size"],
                              cosine=cfg["optimizer.schedule"] == "cosine",
                              total_steps=cfg["optimizer.total_steps"], warmup_steps=cfg["optimizer.warmup"],
                              grad_clip=cfg["optimizer.grad_clip"], val=val)
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_accuracy", "val_accuracy", "lr"])
        for r in result.history:
            w.writerow([r.epoch, _fmt(r.loss), _fmt(r.train_accuracy),
                        "" if r.val_accuracy is None else _fmt(r.val_accuracy), _fmt(r.lr)])
    with open(out / "train_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, _fmt(l)) for i, l in enumerate(result.step_losses))
    model.load_arrays(result.best_state)
    window = {"L": spec.L, "stride": spec.stride, "tail_policy": spec.tail_policy}
    save_model(out / "classifier.ckpt", model, {"window": window, "seed": seed})
    best = result.history[result.best_epoch]
    _write_manifest(out, "train", cfg, seed, model=mcfg.to_dict(), window=window,
                    ablations={"tape": mcfg.use_tape, "erpe": mcfg.use_erpe, "skip": mcfg.skip},
                    best_epoch=best.epoch, best_train_accuracy=best.train_accuracy,
                    best_val_accuracy=best.val_accuracy, windows=int(len(x)))
    log.info("train: best epoch %d, train acc %.4f", best.epoch, best.train_accuracy)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, seed: int, out: Path) -> int:
    try:
        model, extra = load_model(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise UsageError(f"cannot load classifier checkpoint: {exc}") from None
    ds = _load_dataset(args.features or cfg["data.val_path"], "test")
    if ds.input_dim != model.config.input_dim:
        raise UsageError(f"feature dimension {ds.input_dim} does not match checkpoint ({model.config.input_dim})")
    if any(s.label is None for s in ds):
        raise UsageError("evaluation data contains unlabeled sequences")
    spec = WindowSpec(**extra["window"]) if "window" in extra else _window_spec(cfg)
    x, y, ids = window_dataset(ds, spec)
    if len(x) == 0:
        raise UsageError("no evaluation windows")
    report = evaluate(model, x, y, ids, vote=args.vote, weighted=args.weighted_avg)
    text = format_report(report)
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    (out / "report.json").write_text(to_json(report) + "\n", encoding="utf-8")
    _write_manifest(out, "eval", cfg, seed, checkpoint=str(args.checkpoint), vote=args.vote,
                    weighted_avg=args.weighted_avg)
    if not args.quiet:
        print(text)
    return EXIT_OK


def cmd_inspect_encodings(args, cfg: RunConfig, seed: int, out: Path) -> int:
    L = args.L or cfg["model.L"]
    d = args.d_model or cfg["model.d_model"]
    try:
        table = build_tape_table(L, d)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    np.savetxt(out / "tape_table.csv", table.table, delimiter=",", fmt="%.17g")
    np.savetxt(out / "erpe_index.csv", erpe_index_map(L), delimiter=",", fmt="%d")
    _write_manifest(out, "inspect-encodings", cfg, seed, L=L, d_model=d)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-encodings": cmd_inspect_encodings,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run config file (key = value)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides run.seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="warnings only, no report echo")

    parser = argparse.ArgumentParser(prog="seqformer", parents=[common],
                                     description="MAE features + residual ConvTrans classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic features or clips")
    p.add_argument("kind", choices=("features", "clips"))
    p.add_argument("--n-per-class", type=int, default=20)
    p.add_argument("--difficulty", choices=("easy", "hard"), default="easy")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--length", type=int, default=0, help="sequence length (default model.L)")
    p.add_argument("--segments", type=int, default=1, help="clip length in units of mae.frames")
    p.add_argument("--split", default="train")
    p.add_argument("--export-csv", action="store_true")

    p = sub.add_parser("pretrain", parents=[common], help="masked-autoencoder pretraining")
    p.add_argument("--synthetic", action="store_true", help="generate mae.synthetic_clips moving-blob clips")
    p.add_argument("--clips", help="directory of .npy clips (default data.clips_path)")
    p.add_argument("--steps", type=int, default=0, help="overrides mae.steps")

    p = sub.add_parser("extract", parents=[common], help="encode clips into FSEQ features")
    p.add_argument("--checkpoint", required=True, help="mae.ckpt from pretrain")
    p.add_argument("--clips", help="directory of .npy clips (default data.clips_path)")
    p.add_argument("--export-csv", action="store_true", help="also write one CSV per sequence")

    p = sub.add_parser("train", parents=[common], help="train the ConvTrans classifier")
    p.add_argument("--features", help="FSEQ directory (default data.train_path)")
    p.add_argument("--val", help="FSEQ directory for model selection (default data.val_path)")
    p.add_argument("--epochs", type=int, default=0, help="overrides run.epochs")
    p.add_argument("--no-erpe", action="store_true", help="ablate relative attention weights")
    p.add_argument("--no-tape", action="store_true", help="ablate the absolute position table")
    p.add_argument("--no-skip", action="store_true", help="ablate the extra per-layer skip path")

    p = sub.add_parser("eval", parents=[common], help="metrics report for a checkpoint")
    p.add_argument("--checkpoint", required=True, help="classifier.ckpt from train")
    p.add_argument("--features", help="FSEQ directory (default data.val_path)")
    p.add_argument("--vote", action="store_true", help="majority vote per source sequence")
    p.add_argument("--weighted-avg", action="store_true", help="support-weighted instead of macro averages")

    p = sub.add_parser("inspect-encodings", parents=[common], help="dump tAPE table and eRPE index map")
    p.add_argument("--L", type=int, default=0, help="segment length (default model.L)")
    p.add_argument("--d-model", type=int, default=0, help="embedding width (default model.d_model)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", "."), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.set("run.seed", args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, cfg["run.seed"], out)
    except (ConfigError, UsageError) as exc:
        print(f"seqformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"seqformer: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
