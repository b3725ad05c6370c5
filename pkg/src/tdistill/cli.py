"""Command-line entry point composing the library into reproducible runs.

Subcommands: ``train-teacher``, ``distill``, ``probe-arima``, ``report``.
Exit codes: 0 success, 2 configuration error, 3 runtime training error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import arima
from . import data as dio
from . import tensor as T
from .config import ExperimentConfig, build_model_spec, load_config
from .distill import DistillConfig
from .errors import DegenerateFitError
from .models import CnnModel, ConvLstm
from .optim import Adam, Sgd
from .schedule import all_general_schedule, build_schedule, run_training
from .tensor import Tensor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# fixed spawn slots off the experiment seed; order is part of the contract
_STREAMS = ("train_data", "test_data", "teacher_init", "student_init", "lstm_init", "batch_order")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(_STREAMS, children)}


def _load_datasets(cfg: ExperimentConfig, streams) -> tuple[dio.Dataset, dio.Dataset]:
    d = cfg.dataset
    if d.kind == "idx":
        train = dio.load_idx(d.train_images, d.train_labels, split="train")
        test = dio.load_idx(d.test_images, d.test_labels, num_classes=train.num_classes, split="test")
        return train, test
    train_seed = int(streams["train_data"].integers(2 ** 31))
    test_seed = int(streams["test_data"].integers(2 ** 31))
    train = dio.synth_dataset(train_seed, d.n_per_class, d.num_classes, d.image_size, d.noise)
    test = dio.synth_dataset(test_seed, d.test_n_per_class, d.num_classes, d.image_size, d.noise,
                             split="test")
    return train, test


def _prepare(config_path, overrides, *, need_teacher_checkpoint):
    cfg, errors = load_config(config_path)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    verrors, warns = cfg.validate(need_teacher_checkpoint=need_teacher_checkpoint)
    errors = errors + verrors
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return None, errors
    for w in warns:
        print(f"warning: {w}", file=sys.stderr)
    return cfg, []


def _metrics_callback(out_dir: Path):
    metrics = dio.CsvAppender(out_dir / "metrics.csv", dio.METRICS_COLUMNS)
    timing = dio.CsvAppender(out_dir / "timing.csv", dio.TIMING_COLUMNS)

    def on_epoch(r: dio.EpochRecord):
        metrics.append((r.epoch, r.node_kind, r.loss_task, r.loss_temporal,
                        r.train_acc, r.test_acc, r.lr))
        timing.append((r.epoch, r.node_kind, r.ms_per_batch))

    def close():
        metrics.close()
        timing.close()

    return on_epoch, close


def cmd_train_teacher(args) -> int:
    cfg, errors = _prepare(args.config, {"seed": args.seed}, need_teacher_checkpoint=False)
    if errors:
        return EXIT_CONFIG
    out_dir = cfg.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(out_dir / "config.echo.json")
    streams = rng_streams(cfg.seed)
    train, test = _load_datasets(cfg, streams)
    spec = build_model_spec(cfg.teacher, "teacher", train.num_classes, train.images.shape[-1])
    teacher = CnnModel(spec, rng=streams["teacher_init"])
    opt = Sgd(teacher.params, lr=cfg.optimizer.lr, momentum=cfg.optimizer.momentum,
              milestones=[tuple(m) for m in cfg.optimizer.milestones])
    on_epoch, close = _metrics_callback(out_dir)
    try:
        run_training(teacher, None, None, all_general_schedule(cfg.training.epochs),
                     train, test, cfg.distill, opt, None, "vanilla",
                     cfg.training.batch_size, streams["batch_order"], on_epoch=on_epoch)
    except Exception as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        close()
    dio.save_checkpoint(teacher.state_arrays(), out_dir / "teacher.ckpt")
    final = dio.read_metrics(out_dir / "metrics.csv")[-1]["test_acc"]
    print(f"teacher arch={spec.name} seed={cfg.seed} final_test_acc={final:.4f}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg, errors = _prepare(args.config, {"seed": args.seed, "variant": args.variant},
                           need_teacher_checkpoint=True)
    if errors:
        return EXIT_CONFIG
    out_dir = cfg.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(out_dir / "config.echo.json")
    streams = rng_streams(cfg.seed)
    train, test = _load_datasets(cfg, streams)
    image_size = train.images.shape[-1]

    teacher_spec = build_model_spec(cfg.teacher, "teacher", train.num_classes, image_size)
    teacher = CnnModel(teacher_spec, rng=streams["teacher_init"], trainable=False)
    teacher.load_state_arrays(dio.load_checkpoint(cfg.teacher_checkpoint))
    student_spec = build_model_spec(cfg.student, "student", train.num_classes, image_size)
    student = CnnModel(student_spec, rng=streams["student_init"])

    dcfg = cfg.distill
    if cfg.variant == "tskd_fm":
        dcfg = DistillConfig(**{**dcfg.__dict__, "sequence_mode": "feature_maps"})
    is_review = cfg.variant in ("tskd", "tskd_fm")
    lstm = lstm_opt = None
    if is_review:
        lstm = ConvLstm(hidden_channels=cfg.lstm.hidden_channels, kernel_size=cfg.lstm.kernel_size,
                        rng=streams["lstm_init"])
        lstm_opt = Adam(lstm.params, lr=cfg.lstm.lr)
        schedule = build_schedule(cfg.training.epochs, dcfg.delta, dcfg.k,
                                  cfg.training.warmup_epochs)
    else:
        schedule = all_general_schedule(cfg.training.epochs)

    opt = Sgd(student.params, lr=cfg.optimizer.lr, momentum=cfg.optimizer.momentum,
              milestones=[tuple(m) for m in cfg.optimizer.milestones])
    on_epoch, close = _metrics_callback(out_dir)
    try:
        run_training(student, teacher, lstm, schedule, train, test, dcfg, opt, lstm_opt,
                     cfg.variant, cfg.training.batch_size, streams["batch_order"],
                     on_epoch=on_epoch, state_dir=out_dir / "state")
    except Exception as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        close()
    dio.save_checkpoint(student.state_arrays(), out_dir / "student.ckpt")
    if lstm is not None:
        dio.save_checkpoint(lstm.state_arrays(), out_dir / "lstm.ckpt")
    best = max(r["test_acc"] for r in dio.read_metrics(out_dir / "metrics.csv"))
    print(f"variant={cfg.variant} seed={cfg.seed} best_test_acc={best:.4f}")
    return EXIT_OK


def cmd_probe_arima(args) -> int:
    cfg, errors = _prepare(args.config, {"seed": args.seed}, need_teacher_checkpoint=False)
    if errors:
        return EXIT_CONFIG
    out_dir = cfg.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(out_dir / "config.echo.json")
    p = cfg.probe
    try:
        trace = arima.run_quadratic_probe(cfg.seed, p.epochs, hidden=p.hidden, lr=p.lr,
                                          unit_index=p.unit_index, probe_x=p.probe_x)
        fit_window = arima.ActivationTrace(trace.probe_id, trace.values[:p.trace_epochs])
        arima.write_trace_csv(fit_window, out_dir / "trace.csv")
        orders = tuple(p.orders)
        try:
            model = arima.fit_arima(fit_window.values, *orders)
        except DegenerateFitError as exc:
            print(f"warning: {exc} for probe {trace.probe_id}; "
                  f"falling back to a (0,1,0) random walk", file=sys.stderr)
            orders = (0, 1, 0)
            model = arima.fit_arima(fit_window.values, *orders)
        arima.write_fit_json(model, out_dir / "fit.json", probe_id=trace.probe_id)
        preds = arima.forecast(model, fit_window.values, p.horizon)
        actual = trace.values[p.trace_epochs:p.trace_epochs + p.horizon]
        arima.write_forecast_csv(p.trace_epochs, preds, actual, out_dir / "forecast.csv")
    except Exception as exc:
        print(f"probe failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if actual:
        mse = float(np.mean((np.asarray(preds[:len(actual)]) - np.asarray(actual)) ** 2))
        naive = float(np.mean((fit_window.values[-1] - np.asarray(actual)) ** 2))
        print(f"probe {trace.probe_id}: orders={orders} forecast_mse={mse:.3e} naive_mse={naive:.3e}")
    return EXIT_OK


def _summarize_run(run_dir: Path) -> dict:
    rows = dio.read_metrics(run_dir / "metrics.csv")
    if not rows:
        raise ValueError("metrics.csv has no rows")
    best = max(r["test_acc"] for r in rows)
    summary = {"run": run_dir.name, "best_test_acc": best,
               "final_test_acc": rows[-1]["test_acc"], "epochs": len(rows)}
    variant = ""
    echo = run_dir / "config.echo.json"
    if echo.exists():
        import json
        payload = json.loads(echo.read_text())
        variant = payload.get("variant", "")
        summary["seed"] = payload.get("seed", "")
    summary["variant"] = variant
    timing_path = run_dir / "timing.csv"
    if timing_path.exists():
        timing = dio.read_metrics(timing_path)
        for kind in ("M", "G", "R"):
            vals = [t["ms_per_batch"] for t in timing if t["node_kind"] == kind]
            summary[f"ms_{kind}"] = float(np.mean(vals)) if vals else None
        summary["ms_all"] = float(np.mean([t["ms_per_batch"] for t in timing]))
    return summary


def cmd_report(args) -> int:
    summaries = []
    failures = []
    for run in args.run_dirs:
        run_dir = Path(run)
        try:
            summaries.append(_summarize_run(run_dir))
        except Exception as exc:
            failures.append((run, exc))
            print(f"report error for {run}: {exc}", file=sys.stderr)
    if not summaries:
        print("no readable runs", file=sys.stderr)
        return EXIT_RUNTIME

    baseline = summaries[0]
    columns = ["run", "variant", "seed", "best_test_acc", "final_test_acc",
               "ms_all", "ms_M", "ms_G", "ms_R"]
    if len(summaries) > 1:
        columns.append("delta_vs_baseline")
        for s in summaries:
            s["delta_vs_baseline"] = s["best_test_acc"] - baseline["best_test_acc"]

    def cell(s, c):
        v = s.get(c)
        if v is None or v == "":
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    widths = {c: max(len(c), *(len(cell(s, c)) for s in summaries)) for c in columns}
    header = "  ".join(c.ljust(widths[c]) for c in columns)
    print(header)
    print("-" * len(header))
    for s in summaries:
        print("  ".join(cell(s, c).ljust(widths[c]) for c in columns))

    if args.out:
        with open(args.out, "w") as f:
            f.write(",".join(columns) + "\n")
            for s in summaries:
                f.write(",".join("" if s.get(c) in (None, "") else
                                 (format(s[c], ".9g") if isinstance(s.get(c), float) else str(s[c]))
                                 for c in columns) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdistill",
                                     description="Deterministic desk-scale distillation runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="pre-train a teacher with plain cross-entropy")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student under the selected variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", default=None,
                   choices=["vanilla", "kd", "at", "tskd", "tskd_fm"])
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("probe-arima", help="record a training trajectory and forecast it")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_probe_arima)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
