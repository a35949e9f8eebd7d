"""Single entry point exposing the pipeline as subcommands.

Every command is deterministic given (config, seed); the effective config
plus the command arguments are echoed to ``run_config.resolved.json`` in
the workdir, and re-running from that echo reproduces the artifacts
bit-exactly. Report-path commands render PNG figures next to their
delimited outputs unless ``--no-figures`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cf
from . import contrastive as ct
from . import figures, ingest, stream, windowing
from . import model as mdl
from . import train as tr
from .errors import BiwristError

log = logging.getLogger("biwrist")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s",
                        datefmt="%H:%M:%S")
    try:
        cfg = cf.load_config(args.config)
        workdir = Path(args.workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        handler = COMMANDS[args.command]
        echo_args = {k: (str(v) if isinstance(v, Path) else v)
                     for k, v in vars(args).items() if k not in ("command", "func")}
        handler(args, cfg, workdir)
        cf.write_resolved(workdir, args.command, echo_args, cfg)
    except BiwristError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: FileNotFoundError: {e}", file=sys.stderr)
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="biwrist",
                                     description="bilateral wrist IMU screening pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--workdir", default=".", help="output directory")
        p.add_argument("--config", default=None, help="JSON run config (or a resolved echo)")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    p = sub.add_parser("synth", help="write a synthetic cohort to disk")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--duration-s", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hf-artifacts", action="store_true",
                   help="inject 29-31 Hz artifacts (band-pass ablation data)")

    p = sub.add_parser("preprocess", help="cohort directory -> window cache")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-bandpass", action="store_true")

    p = sub.add_parser("train", help="train one fold")
    common(p)
    p.add_argument("--cache", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--mode", choices=("hierarchical", "three-class"), default=None)
    p.add_argument("--preset", choices=("base", "edge"), default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("cv", help="all folds, aggregate mean/std")
    common(p)
    p.add_argument("--cache", required=True)
    p.add_argument("--mode", choices=("hierarchical", "three-class"), default=None)
    p.add_argument("--preset", choices=("base", "edge"), default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("pretrain", help="contrastive pretraining on a training fold")
    common(p)
    p.add_argument("--cache", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--preset", choices=("base", "edge"), default=None)

    for name, help_text in (("finetune", "fine-tune from a pretrained checkpoint"),
                            ("probe", "linear probe on a frozen pretrained encoder")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--cache", required=True)
        p.add_argument("--init", required=True, help="pretraining checkpoint")
        p.add_argument("--fraction", type=float, default=1.0)
        p.add_argument("--fold", type=int, default=0)
        p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("stream-bench", help="streaming predictions + latency benchmark")
    common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--input", default=None, help="CSV of 100 Hz samples (12 columns)")
    p.add_argument("--n-windows", type=int, default=None)
    p.add_argument("--duration-s", type=float, default=60.0,
                   help="synthesized stream length when no --input")

    p = sub.add_parser("export-attn", help="export cross-attention maps for one window")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--window-id", type=int, required=True)
    return parser


# ---------------------------------------------------------------------------
# command implementations


def _model_cfg(cfg, preset=None, mode=None):
    m = dict(cfg["model"])
    if preset == "edge":
        m.update(d=32, n_layers=3, ff_dim=256, dropout=0.12)
    if mode:
        m["mode"] = mode.replace("-", "_")
    return mdl.ModelConfig(**m)


def _train_cfg(cfg, epochs=None):
    t = dict(cfg["train"])
    if epochs is not None:
        t["max_epochs"] = epochs
    return tr.TrainConfig(**t)


def cmd_synth(args, cfg, workdir):
    d = cfg["data"]
    cohort = ingest.synth_cohort(
        n_per_class=args.per_class if args.per_class is not None else d["per_class"],
        duration_s=args.duration_s if args.duration_s is not None else d["duration_s"],
        seed=args.seed if args.seed is not None else d["seed"],
        hf_artifacts=args.hf_artifacts or d["hf_artifacts"])
    ingest.save_cohort(cohort, args.out)
    log.info("wrote %d recordings to %s", len(cohort.recordings), args.out)


def cmd_preprocess(args, cfg, workdir):
    if args.no_bandpass:
        cfg["dsp"]["bandpass"] = False
    cohort = ingest.load_pads(args.data)
    foldspec = windowing.stratified_patient_folds(
        cohort, k=cfg["windowing"]["k_folds"], seed=cfg["windowing"]["fold_seed"])
    ws = windowing.window_cohort(cohort, bandpass=cfg["dsp"]["bandpass"])
    windowing.save_cache(args.out, ws, foldspec, {"bandpass": cfg["dsp"]["bandpass"]})
    log.info("cached %d windows (%s) to %s", len(ws), ws.group_counts(), args.out)


def _run_fold(ws, foldspec, fold, model_cfg, train_cfg, out_dir):
    train_ws, val_ws = windowing.split_by_fold(ws, foldspec, fold)
    result = tr.train_fold(train_ws, val_ws, model_cfg, train_cfg, out_dir=out_dir)
    return result, len(val_ws)


def _fold_entry(fold, result, n_val):
    entry = {"fold": fold, "best_epoch": result.best_epoch, "n_val": n_val}
    vm = result.val_metrics
    if "overall" in vm:
        entry.update({"overall": vm["overall"], "per_class": vm["per_class"]})
    else:
        entry.update({"head_hc_pd": vm["head_hc_pd"], "head_pd_dd": vm["head_pd_dd"],
                      "subject_majority": vm["subject_majority"]})
    return entry


def cmd_train(args, cfg, workdir):
    if args.mode:
        cfg["model"]["mode"] = args.mode.replace("-", "_")
    if args.epochs is not None:
        cfg["train"]["max_epochs"] = args.epochs
    model_cfg = _model_cfg(cfg, args.preset)
    train_cfg = _train_cfg(cfg)
    ws, foldspec, flags = windowing.load_cache(args.cache)
    result, n_val = _run_fold(ws, foldspec, args.fold, model_cfg, train_cfg, workdir)
    mdl.save_checkpoint(workdir / "checkpoint.bwt", result.params, model_cfg,
                        meta={"fold": args.fold, "best_epoch": result.best_epoch})
    payload = tr.metrics_json([_fold_entry(args.fold, result, n_val)], model_cfg.mode)
    tr.write_metrics(workdir / "metrics.json", payload)
    log.info("fold %d metrics: %s", args.fold, json.dumps(payload["aggregate"]))
    if not args.no_figures:
        figures.plot_loss_curve(workdir / "loss_curve.csv", workdir / "loss_curve.png")
        figures.plot_cv_metrics(payload, workdir / "metrics.png")


def cmd_cv(args, cfg, workdir):
    if args.mode:
        cfg["model"]["mode"] = args.mode.replace("-", "_")
    if args.epochs is not None:
        cfg["train"]["max_epochs"] = args.epochs
    model_cfg = _model_cfg(cfg, args.preset)
    train_cfg = _train_cfg(cfg)
    ws, foldspec, flags = windowing.load_cache(args.cache)
    per_fold = []
    for fold in range(foldspec.k):
        fold_dir = workdir / f"fold{fold}"
        result, n_val = _run_fold(ws, foldspec, fold, model_cfg, train_cfg, fold_dir)
        mdl.save_checkpoint(fold_dir / "checkpoint.bwt", result.params, model_cfg,
                            meta={"fold": fold, "best_epoch": result.best_epoch})
        per_fold.append(_fold_entry(fold, result, n_val))
        log.info("fold %d done", fold)
    payload = tr.metrics_json(per_fold, model_cfg.mode)
    tr.write_metrics(workdir / "metrics.json", payload)
    log.info("cv aggregate: %s", json.dumps(payload["aggregate"]))
    if not args.no_figures:
        figures.plot_cv_metrics(payload, workdir / "metrics.png")


def cmd_pretrain(args, cfg, workdir):
    if args.epochs is not None:
        cfg["ssl"]["epochs"] = args.epochs
    model_cfg = _model_cfg(cfg, args.preset)
    train_cfg = _train_cfg(cfg)
    s = cfg["ssl"]
    ssl_cfg = ct.SslConfig(temperature=s["temperature"], epochs=s["epochs"],
                           batch_size=s["batch_size"], seed=s["seed"])
    aug_cfg = ct.AugmentConfig(jitter_sigma=s["jitter_sigma"], warp_knots=s["warp_knots"],
                               warp_sigma=s["warp_sigma"], choice_prob=s["choice_prob"],
                               seed=s["seed"])
    ws, foldspec, _ = windowing.load_cache(args.cache)
    train_ws, _ = windowing.split_by_fold(ws, foldspec, args.fold)
    params, info = ct.pretrain(train_ws, model_cfg, ssl_cfg, train_cfg, aug_cfg)
    mdl.save_checkpoint(workdir / "ssl_checkpoint.bwt", params, model_cfg,
                        meta={"fold": args.fold, "ssl": True})
    (workdir / "ssl_history.json").write_text(json.dumps(info, indent=1))
    log.info("pretrained %d epochs, final loss %.4f", s["epochs"],
             info["history"][-1]["ssl_loss"])


LABEL_EFF_COLUMNS = ("fraction", "head1_acc", "head2_acc", "mode")


def _append_label_efficiency(workdir, fraction, vm, mode):
    path = workdir / "label_efficiency.csv"
    exists = path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(LABEL_EFF_COLUMNS)
        writer.writerow([fraction, vm["head_hc_pd"]["accuracy"],
                         vm["head_pd_dd"]["accuracy"], mode])
    return path


def cmd_finetune(args, cfg, workdir):
    model_cfg, train_cfg, train_ws, val_ws, pretrained = _label_eff_setup(args, cfg)
    result = ct.fine_tune(pretrained, train_ws, val_ws, model_cfg, train_cfg,
                          out_dir=workdir, curve_name=f"finetune_f{args.fraction}_loss.csv")
    mdl.save_checkpoint(workdir / f"finetune_f{args.fraction}.bwt", result.params, model_cfg)
    path = _append_label_efficiency(workdir, args.fraction, result.val_metrics, "finetune")
    log.info("finetune fraction %.2f: %s / %s", args.fraction,
             result.val_metrics["head_hc_pd"], result.val_metrics["head_pd_dd"])
    if not args.no_figures:
        figures.plot_label_efficiency(path, workdir / "label_efficiency.png")


def cmd_probe(args, cfg, workdir):
    model_cfg, train_cfg, train_ws, val_ws, pretrained = _label_eff_setup(args, cfg)
    report, _ = ct.linear_probe(pretrained, train_ws, val_ws, model_cfg, train_cfg)
    path = _append_label_efficiency(workdir, args.fraction, report, "probe")
    log.info("probe fraction %.2f: %s / %s", args.fraction,
             report["head_hc_pd"], report["head_pd_dd"])
    if not args.no_figures:
        figures.plot_label_efficiency(path, workdir / "label_efficiency.png")


def _label_eff_setup(args, cfg):
    if args.epochs is not None:
        cfg["train"]["max_epochs"] = args.epochs
    train_cfg = _train_cfg(cfg)
    ws, foldspec, _ = windowing.load_cache(args.cache)
    train_ws, val_ws = windowing.split_by_fold(ws, foldspec, args.fold)
    if args.fraction < 1.0:
        train_ws = ct.label_fraction_subset(train_ws, args.fraction, seed=train_cfg.seed)
    arrays, model_cfg, _ = mdl.load_checkpoint(args.init)
    pretrained = {k: v.data for k, v in arrays.items()}
    return model_cfg, train_cfg, train_ws, val_ws, pretrained


def cmd_stream_bench(args, cfg, workdir):
    params, model_cfg, _ = mdl.load_checkpoint(args.model)
    s = cfg["stream"]
    n_windows = args.n_windows if args.n_windows is not None else s["n_windows"]
    if args.input:
        signal = np.loadtxt(args.input, delimiter=",", skiprows=1)
    else:
        rng = np.random.default_rng(s["seed"])
        signal = rng.standard_normal((int(args.duration_s * 100), 12))
    preds = stream.run_stream(params, model_cfg, signal)
    stream.write_predictions_csv(workdir / "predictions.csv", preds)
    report = stream.bench(params, model_cfg, n_windows=n_windows, warmup=s["warmup"],
                          seed=s["seed"])
    stream.write_bench_json(workdir / "bench.json", report)
    log.info("%d predictions; %.2f ms/window mean (%.1f windows/s)",
             len(preds), report["mean_ms"], report["fps"])
    if not args.no_figures:
        figures.plot_bench(report, workdir / "bench.png")


def cmd_export_attn(args, cfg, workdir):
    params, model_cfg, _ = mdl.load_checkpoint(args.model)
    ws, _, _ = windowing.load_cache(args.cache)
    if not 0 <= args.window_id < len(ws):
        raise BiwristError(f"window-id {args.window_id} out of range (cache has {len(ws)})")
    out_dir = workdir / "attention"
    paths = mdl.export_attention(params, model_cfg, ws.left[args.window_id],
                                 ws.right[args.window_id], out_dir=out_dir)
    meta = {"window_id": int(args.window_id),
            "subject": str(ws.subjects[args.window_id]),
            "group": str(ws.groups[args.window_id]),
            "task": str(ws.tasks[args.window_id]),
            "files": [p.name for p in paths]}
    (out_dir / "window.json").write_text(json.dumps(meta, indent=1))
    log.info("wrote %d attention maps to %s", len(paths), out_dir)
    if not args.no_figures:
        for path in paths:
            mat = np.loadtxt(path, delimiter=",")
            figures.plot_attention_map(mat, path.with_suffix(".png"), title=path.stem)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "cv": cmd_cv,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "stream-bench": cmd_stream_bench,
    "export-attn": cmd_export_attn,
}


if __name__ == "__main__":
    sys.exit(main())
