"""Operator entry point.

Subcommands: ``generate`` (synthetic corpus to CSV), ``train`` (fit a model,
write best weights, checkpoint and metric history), ``eval`` (per-horizon
easy/hard table for one or more checkpoints), ``forecast`` (three-minute
prediction from an input CSV), ``bench`` (latency protocol with a budget
gate).

Every command is driven by an INI config (see ``config.py``) with a handful
of flag overrides, resolves file paths against ``--out`` (or the
``MESOCAST_OUT`` environment variable), and drops a manifest recording the
seed and the resolved-config hash next to its outputs.

Exit codes: 0 success, 2 usage/input error, 3 numerical failure (training
divergence); ``bench`` additionally exits 1 when the latency budget is
exceeded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluate as E
from .config import RunConfig, config_hash, load_config
from .runtime import tune_allocator
from .models import InferencePlan, build_model, load_model, save_model
from .train import (
    DivergenceError,
    best_model,
    load_checkpoint,
    save_checkpoint,
    train_nstep,
    train_one_step_model,
)

OUT_ENV = "MESOCAST_OUT"


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "days", None) is not None:
        cfg.data.train_days = args.days
    if getattr(args, "seed", None) is not None:
        cfg.data.seed = args.seed
        cfg.training.seed = args.seed
    if getattr(args, "model", None) is not None:
        cfg.model.kind = args.model
    if getattr(args, "n", None) is not None:
        cfg.model.horizon = args.n
    if getattr(args, "epochs", None) is not None:
        cfg.training.epochs_per_stage = args.epochs
    if getattr(args, "lap_depth", None) is not None:
        cfg.training.lap_depth = args.lap_depth
    if getattr(args, "iters", None) is not None:
        cfg.evaluation.iters = args.iters
    if getattr(args, "warmup", None) is not None:
        cfg.evaluation.warmup = args.warmup
    if getattr(args, "budget", None) is not None:
        cfg.evaluation.budget_ms = args.budget
    return cfg


def _write_manifest(out: Path, command: str, cfg: RunConfig, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "seed": cfg.data.seed if command == "generate" else cfg.training.seed,
        "config_sha256": config_hash(cfg),
        "outputs": sorted(outputs),
    }
    with open(out / f"{command}_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _hard_paths(cfg: RunConfig, out: Path) -> list[Path]:
    return [out / f"{cfg.data.hard_csv_prefix}{i}.csv" for i in range(cfg.data.hard_windows)]


def _load_corpus(cfg: RunConfig, out: Path) -> D.Corpus:
    train = D.read_csv(out / cfg.data.train_csv)
    easy = D.read_csv(out / cfg.data.easy_csv)
    hard = [D.read_csv(p) for p in _hard_paths(cfg, out)]
    return D.Corpus(train=train, easy=easy, hard=hard)


def _model_kind(cfg: RunConfig) -> str:
    if cfg.model.kind == "lstm" and cfg.model.per_segment:
        return "lstm-seg"
    return cfg.model.kind


def _build_model(cfg: RunConfig):
    return build_model(
        _model_kind(cfg), s=cfg.model.s, hidden=cfg.model.hidden,
        attn_width=cfg.model.attn_width, horizon=cfg.model.horizon,
        seed=cfg.training.seed,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = _out_dir(args)
    cfg = _load_run_config(args)
    ctm = cfg.ctm_config()
    ctm.validate()
    corpus = D.make_corpus(ctm, cfg.corpus_sizes())
    outputs = [cfg.data.train_csv, cfg.data.easy_csv]
    D.write_csv(corpus.train, out / cfg.data.train_csv)
    D.write_csv(corpus.easy, out / cfg.data.easy_csv)
    for path, series in zip(_hard_paths(cfg, out), corpus.hard):
        D.write_csv(series, path)
        outputs.append(path.name)
    _write_manifest(out, "generate", cfg, outputs)
    print(f"wrote {len(corpus.train)} train, {len(corpus.easy)} easy frames and "
          f"{len(corpus.hard)} hard windows to {out}")
    return 0


def _write_metrics_csv(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,lr,train_loss,easy_mse,hard_mse\n")
        for rec in history:
            easy = "" if rec.easy is None else format(rec.easy * E.MSE_DISPLAY_SCALE, ".9g")
            hard = "" if rec.hard is None else format(rec.hard * E.MSE_DISPLAY_SCALE, ".9g")
            fh.write(f"{rec.epoch},{format(rec.lr, '.9g')},"
                     f"{format(rec.train_loss, '.9g')},{easy},{hard}\n")


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _load_run_config(args)
    corpus = _load_corpus(cfg, out)
    model = _build_model(cfg)
    train_cfg = cfg.train_config()
    ckpt_path = out / cfg.training.checkpoint_out
    try:
        if model.kind == "nstep":
            run = train_nstep(model, corpus, train_cfg)
        else:
            run = train_one_step_model(model, corpus, train_cfg)
    except DivergenceError as exc:
        save_checkpoint(exc.run, train_cfg, ckpt_path)
        print(f"training diverged: {exc}; last checkpoint at {ckpt_path}", file=sys.stderr)
        return 3
    best = best_model(run)
    save_model(best, out / cfg.training.model_out)
    save_checkpoint(run, train_cfg, ckpt_path)
    _write_metrics_csv(run.history, out / cfg.training.metrics_csv)
    horizons = getattr(best, "horizon", 1)
    report = E.evaluate(best, corpus, horizons=horizons)
    for line in E.report_lines(_model_kind(cfg), report):
        print(line)
    _write_manifest(out, "train", cfg, [cfg.training.model_out,
                                        cfg.training.checkpoint_out,
                                        cfg.training.metrics_csv])
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    cfg = _load_run_config(args)
    corpus = _load_corpus(cfg, out)
    checkpoints = args.checkpoint or [str(out / cfg.evaluation.checkpoint)]
    horizons = cfg.evaluation.horizons
    rows = []
    for path in checkpoints:
        model = load_model(path)
        report = E.evaluate(model, corpus, horizons=min(horizons,
                                                        getattr(model, "horizon", horizons)))
        rows.append((Path(path).stem, model.kind, report))
        for line in E.report_lines(f"{Path(path).stem} [{model.kind}]", report):
            print(line)
    report_path = out / cfg.evaluation.report_csv
    with open(report_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("model,kind,horizon,easy_mse_x1e3,hard_mse_x1e3\n")
        for name, kind, report in rows:
            for h, vals in sorted(report.per_horizon.items()):
                fh.write(f"{name},{kind},{h},{format(vals['easy'], '.9g')},"
                         f"{format(vals['hard'], '.9g')}\n")
    _write_manifest(out, "eval", cfg, [cfg.evaluation.report_csv])
    return 0


def cmd_forecast(args) -> int:
    out = _out_dir(args)
    cfg = _load_run_config(args)
    model = load_model(args.checkpoint or (out / cfg.evaluation.checkpoint))
    series = D.read_csv(args.input)
    if len(series) < model.s:
        raise ValueError(f"input has {len(series)} frames, model needs {model.s}")
    at = args.at if args.at is not None else int(series.minutes[-1])
    idx = np.nonzero(series.minutes == at)[0]
    if len(idx) == 0:
        raise ValueError(f"minute {at} not present in input")
    end = int(idx[0]) + 1
    if end < model.s:
        raise ValueError(f"only {end} frames end at minute {at}, model needs {model.s}")
    window_mph = series.speeds[end - model.s:end]
    if np.any(np.diff(series.minutes[end - model.s:end]) != 1):
        raise ValueError("input frames are not minute-consecutive")

    horizons = cfg.evaluation.horizons
    window = D.normalize(window_mph)
    plan = InferencePlan(model)
    start = time.perf_counter()
    if model.kind in ("lstm", "lstm-seg", "sa-lstm"):
        rolling = np.array(window)
        preds = np.empty((horizons, D.NUM_SEGMENTS))
        for k in range(horizons):
            preds[k] = plan.run(rolling)[0]
            rolling = np.vstack([rolling[1:], preds[k][None, :]])
    else:
        preds = plan.run(window)[:horizons]
    elapsed_ms = (time.perf_counter() - start) * 1e3
    # clamp only at the export boundary
    preds = np.clip(preds, 0.0, 1.0)
    forecast_series = D.Series(
        minutes=np.arange(at + 1, at + 1 + preds.shape[0]),
        speeds=D.denormalize(preds),
    )
    out_path = Path(args.output) if args.output else out / "forecast.csv"
    D.write_csv(forecast_series, out_path)
    print(f"forecast minutes {at + 1}..{at + preds.shape[0]} written to {out_path} "
          f"(model forward {elapsed_ms:.3f} ms)")
    _write_manifest(out, "forecast", cfg, [out_path.name])
    return 0


def cmd_bench(args) -> int:
    out = _out_dir(args)
    cfg = _load_run_config(args)
    model = load_model(args.checkpoint or (out / cfg.evaluation.checkpoint))
    rng = np.random.default_rng(cfg.training.seed)
    window = rng.uniform(0.1, 1.0, (model.s, D.NUM_SEGMENTS))
    mean_ms = E.bench_latency(model, window, warmup=cfg.evaluation.warmup,
                              iters=cfg.evaluation.iters)
    budget = cfg.evaluation.budget_ms
    verdict = "PASS" if mean_ms < budget else "FAIL"
    print(f"{model.kind}: mean {mean_ms:.4f} ms over {cfg.evaluation.iters} inferences "
          f"(warmup {cfg.evaluation.warmup}), budget {budget} ms -> {verdict}")
    return 0 if mean_ms < budget else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mesocast",
        description="Mesoscale traffic forecasting: data generation, training, "
                    "evaluation, forecasting and latency benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run config (defaults apply when omitted)")
        p.add_argument("--out", help=f"output directory (or ${OUT_ENV}, default '.')")
        p.add_argument("--seed", type=int, help="override data+training seed")

    p = sub.add_parser("generate", help="write synthetic train/easy/hard CSVs")
    common(p)
    p.add_argument("--days", type=int, help="override number of training days")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated corpus")
    common(p)
    p.add_argument("--model", choices=["lstm", "sa-lstm", "all-at-once", "nstep"])
    p.add_argument("--n", type=int, help="horizon count for nstep/all-at-once")
    p.add_argument("--epochs", type=int, help="epochs (per stage for nstep)")
    p.add_argument("--lap-depth", dest="lap_depth", type=int,
                   help="pyramid loss depth (0 disables)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on a corpus")
    common(p)
    p.add_argument("--checkpoint", action="append",
                   help="model file; repeat for a side-by-side comparison table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="predict the next minutes from an input CSV")
    common(p)
    p.add_argument("--input", required=True, help="input series CSV")
    p.add_argument("--at", type=int, help="forecast from this minute (default: last)")
    p.add_argument("--checkpoint", help="model file (default from config)")
    p.add_argument("--output", help="forecast CSV path (default <out>/forecast.csv)")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("bench", help="latency benchmark with a budget gate")
    common(p)
    p.add_argument("--checkpoint", help="model file (default from config)")
    p.add_argument("--iters", type=int, help="timed inferences (default 50000)")
    p.add_argument("--warmup", type=int, help="untimed inferences (default 1000)")
    p.add_argument("--budget", type=float, help="pass/fail threshold in ms (default 1.0)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    tune_allocator()
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
