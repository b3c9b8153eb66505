"""Command-line entry point.

Subcommands: gen, train, eval, sort, sweep, bench. Each resolves one
run configuration (defaults, then scenario preset, then --config file,
then flags) and writes the resolved snapshot next to its outputs, so a
run can be reproduced from the snapshot alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 budget violation
under --strict.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Sequence

from . import checkpoint, cnn, data, imgproc, scenarios, sorter, synth
from .config import ConfigError, RunConfig, parse_value, read_config_file, \
    resolve, write_snapshot

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BUDGET = 3

SNAPSHOT_NAME = "resolved.cfg"


class BudgetError(RuntimeError):
    """Latency budget exceeded in strict mode."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="key=value config file")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR",
                        help="output directory for this subcommand")
    common.add_argument("--scenario", metavar="NAME",
                        choices=scenarios.SCENARIO_NAMES)
    common.add_argument("--theta", type=float, metavar="X")
    common.add_argument("--deadline-ms", type=float, metavar="X")
    common.add_argument("--strict", action="store_true", default=None,
                        help="nonzero exit when a latency budget is missed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        dest="overrides", help="override any config key")

    parser = _Parser(prog="dropsort", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common],
                   help="render a train/val dataset for a scenario")
    sub.add_parser("train", parents=[common],
                   help="train a classifier on a generated dataset")
    sub.add_parser("eval", parents=[common],
                   help="validation metrics and confusion matrix")
    sub.add_parser("sort", parents=[common],
                   help="run the virtual sorting loop on a droplet stream")
    sub.add_parser("sweep", parents=[common],
                   help="confidence-threshold sweep on a labeled stream")
    sub.add_parser("bench", parents=[common],
                   help="wall-clock stage latencies across image sizes")
    return parser


def _cli_values(args: argparse.Namespace) -> dict:
    vals: dict[str, object] = {}
    for flag, key in (("seed", "seed"), ("scenario", "scenario"),
                      ("theta", "theta"), ("deadline_ms", "deadline_ms"),
                      ("strict", "strict")):
        got = getattr(args, flag)
        if got is not None:
            vals[key] = got
    for item in args.overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        vals[key.strip()] = parse_value(key.strip(), value.strip())
    if args.out is not None:
        if args.command == "gen":
            vals.setdefault("data_dir", args.out)
        elif args.command == "train":
            vals.setdefault("model_path", str(Path(args.out) / "model.ckpt"))
        else:
            vals.setdefault("report_dir", args.out)
    return vals


def _resolve(args: argparse.Namespace) -> RunConfig:
    file_vals = read_config_file(args.config) if args.config else None
    return resolve(file_vals, _cli_values(args))


def _network_config(cfg: RunConfig) -> cnn.NetworkConfig:
    return cnn.NetworkConfig(
        input_px=cfg.image_px,
        conv_layers=tuple(cnn.ConvSpec(cfg.kernel_px, n)
                          for n in cfg.conv_filters),
        pool_window=cfg.pool_window, pool_stride=cfg.pool_stride,
        dense_units=cfg.dense_units, dropout_rate=cfg.dropout_rate,
        n_classes=cfg.n_classes)


def _manifest(cfg: RunConfig, split: str) -> Path:
    path = Path(cfg.data_dir) / split / "manifest.tsv"
    if not path.is_file():
        raise FileNotFoundError(
            f"missing manifest {path}; run `dropsort gen` first")
    return path


def _load_model(path_text: str) -> tuple[cnn.Params, cnn.NetworkConfig]:
    path = Path(path_text)
    if not path.is_file():
        raise FileNotFoundError(
            f"missing checkpoint {path}; run `dropsort train` first")
    return checkpoint.load_checkpoint(path)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# stream seeds must not collide with the train (seed) and val (seed + 1)
# dataset seeds
_VAL_SEED_OFFSET = 1
_STREAM_SEED_OFFSET = 2


def _cmd_gen(cfg: RunConfig) -> int:
    spec = scenarios.scenario(cfg.scenario)
    rcfg = synth.scaled_config(cfg.image_px)
    out = _out_dir(cfg.data_dir)
    for split, n, seed in (("train", cfg.n_train, cfg.seed),
                           ("val", cfg.n_val, cfg.seed + _VAL_SEED_OFFSET)):
        synth.generate_dataset(spec.classes, n, rcfg, out / split, seed,
                               template=spec.template,
                               focus_jitter_um=spec.focus_jitter_um)
        print(f"{split}: {n * len(spec.classes)} images "
              f"({len(spec.classes)} classes x {n}) -> {out / split}")
    write_snapshot(cfg, out / SNAPSHOT_NAME)
    return EXIT_OK


def _write_history(history: Sequence[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]),
                        repr(row["val_loss"]), repr(row["val_accuracy"])])


def _cmd_train(cfg: RunConfig) -> int:
    train_set = data.load_dataset(_manifest(cfg, "train"), plan=cfg.plan,
                                  seed=cfg.seed)
    val_set = data.load_dataset(_manifest(cfg, "val"))
    n_base = train_set[0].shape[0] // imgproc.plan_multiplier(cfg.plan)
    print(f"training size {train_set[0].shape[0]} "
          f"({n_base} base, plan {cfg.plan!r})")
    net = _network_config(cfg)
    tcfg = cnn.TrainConfig(epochs=cfg.epochs, learning_rate=cfg.learning_rate,
                           batch_size=cfg.batch_size, seed=cfg.seed)
    params, history = cnn.train(net, tcfg, train_set, val_set)
    model_path = Path(cfg.model_path)
    out = _out_dir(model_path.parent if model_path.parent != Path("")
                   else Path("."))
    checkpoint.save_checkpoint(model_path, params, net)
    _write_history(history, out / "history.csv")
    write_snapshot(cfg, out / SNAPSHOT_NAME)
    print(f"checkpoint -> {model_path}; "
          f"final val accuracy {history[-1]['val_accuracy']:.3f}")
    return EXIT_OK


def _write_metrics(report: dict, out: Path) -> None:
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerow(["accuracy", repr(report["accuracy"])])
        w.writerow(["mean_loss", repr(report["mean_loss"])])
    with open(out / "confusion.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        n = report["confusion"].shape[0]
        w.writerow(["true\\predicted"] + [str(c) for c in range(n)])
        for r in range(n):
            w.writerow([r] + [int(v) for v in report["confusion"][r]])


def _dump_activations(params, net, image, out: Path) -> None:
    from .pgmio import write_pgm
    for stage in range(len(net.conv_layers)):
        maps = cnn.export_activations(params, net, image, stage)
        for f, map2d in enumerate(maps):
            write_pgm(out / f"activation_conv{stage + 1}_f{f:02d}.pgm",
                      cnn.scale_activation(map2d))


def _cmd_eval(cfg: RunConfig) -> int:
    params, net = _load_model(cfg.model_path)
    val_set = data.load_dataset(_manifest(cfg, "val"))
    report = cnn.evaluate(params, net, val_set)
    out = _out_dir(cfg.report_dir)
    _write_metrics(report, out)
    if cfg.dump_activations:
        _dump_activations(params, net, val_set[0][0], out)
    write_snapshot(cfg, out / SNAPSHOT_NAME)
    print(f"accuracy {report['accuracy']:.3f}, "
          f"mean loss {report['mean_loss']:.4f} -> {out}")
    return EXIT_OK


def _classifier_for(cfg: RunConfig, spec: scenarios.ScenarioSpec):
    params, net = _load_model(cfg.model_path)
    first = sorter.CnnClassifier(params, net, preprocess=data.preprocess)
    if spec.label_mode != "joint":
        return first
    if not cfg.second_model_path:
        raise ConfigError(
            f"scenario {spec.name!r} sorts on two models; "
            "set second_model_path")
    params2, net2 = _load_model(cfg.second_model_path)
    second = sorter.CnnClassifier(params2, net2, preprocess=data.preprocess)
    return sorter.TwoModelAndClassifier(
        first, spec.target_class, cfg.theta,
        second, spec.target_class, cfg.theta)


def _write_storage(line: sorter.StorageLine, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["droplet_id"])
        for droplet_id in line.contents:
            w.writerow([droplet_id])


def _cmd_sort(cfg: RunConfig) -> int:
    spec = scenarios.scenario(cfg.scenario)
    rcfg = synth.scaled_config(cfg.image_px)
    classifier = _classifier_for(cfg, spec)
    stream = scenarios.rendered_stream(spec, cfg.stream_len, rcfg,
                                       cfg.seed + _STREAM_SEED_OFFSET)
    timing = sorter.TimingModel(grab_ms=cfg.grab_ms, infer_ms=cfg.infer_ms,
                                deadline_ms=cfg.deadline_ms)
    storage = sorter.StorageLine(cfg.storage_capacity)
    decisions, report, pulses = sorter.run_sort(
        stream, classifier, spec.target_class, cfg.theta, timing, storage)
    out = _out_dir(cfg.report_dir)
    sorter.write_decision_log(decisions, out / "decisions.csv")
    sorter.write_run_report(report, out / "report.csv")
    sorter.write_pulse_events(pulses, out / "pulses.csv")
    _write_storage(storage, out / "storage.csv")
    write_snapshot(cfg, out / SNAPSHOT_NAME)
    print(f"screened {report.n_screened}, sorted {report.n_sorted}, "
          f"fp_of_sorted {report.fp_of_sorted:.3f}, "
          f"fn_of_screened {report.fn_of_screened:.4f}, "
          f"enrichment {report.enrichment:.2f}x -> {out}")
    return EXIT_OK


def _cmd_sweep(cfg: RunConfig) -> int:
    if not cfg.thetas:
        raise ConfigError("sweep needs at least one theta")
    if len(set(cfg.thetas)) != len(cfg.thetas):
        raise ConfigError(f"duplicate thetas in {cfg.thetas}")
    thetas = tuple(sorted(cfg.thetas))
    spec = scenarios.scenario(cfg.scenario)
    rcfg = synth.scaled_config(cfg.image_px)
    params, net = _load_model(cfg.model_path)
    classifier = sorter.CnnClassifier(params, net, preprocess=data.preprocess)
    stream = scenarios.rendered_stream(spec, cfg.stream_len, rcfg,
                                       cfg.seed + _STREAM_SEED_OFFSET)
    rows = sorter.threshold_sweep(stream, classifier, spec.target_class,
                                  thetas)
    out = _out_dir(cfg.report_dir)
    sorter.write_sweep_table(rows, out / "sweep.csv")
    write_snapshot(cfg, out / SNAPSHOT_NAME)
    for row in rows:
        print(f"theta {row['theta']:.2f}: sorted {row['sorted_count']}, "
              f"fp {row['fp_count']}, "
              f"missed target fraction {row['fn_of_screened']:.4f}")
    return EXIT_OK


def _cmd_bench(cfg: RunConfig) -> int:
    # the operating size always gets benched so the budget check is
    # meaningful even with a custom size list
    sizes = tuple(sorted(set(cfg.bench_sizes) | {cfg.image_px}))
    rows = sorter.measure_stage_latencies(sizes, cfg.bench_reps,
                                          seed=cfg.seed)
    out = _out_dir(cfg.report_dir)
    sorter.write_latency_table(rows, out / "latency.csv")
    write_snapshot(cfg, out / SNAPSHOT_NAME)
    p99 = next(r["p99_ms"] for r in rows
               if r["image_px"] == cfg.image_px and r["stage"] == "inference")
    print(f"inference p99 at {cfg.image_px} px: {p99:.3f} ms "
          f"(budget {cfg.deadline_ms} ms)")
    if cfg.strict and p99 > cfg.deadline_ms:
        raise BudgetError(
            f"inference p99 {p99:.3f} ms exceeds {cfg.deadline_ms} ms")
    return EXIT_OK


_COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
             "sort": _cmd_sort, "sweep": _cmd_sweep, "bench": _cmd_bench}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve(args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BudgetError as exc:
        print(f"budget violation: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
