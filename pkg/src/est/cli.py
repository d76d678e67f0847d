"""``est`` command line: data, training, conversion, inference and SA/PSA comparison.

Exit codes: 0 success, 2 configuration error, 3 runtime error. Output files
are written under a temporary name and renamed into place only on success.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from est import ann as ann_mod
from est.converter import DEFAULT_PERCENTILE, calibrate_thresholds, convert, thresholds_from_report
from est.data import Dataset, dataset_csv, gen_synthetic, load_csv, load_idx, split
from est.errors import ConfigError, EstError
from est.metrics import (
    ATTENTION_LAYERS,
    MEAN_SPIKE_DEFINITION,
    SYNOPS_DEFINITION,
    accuracy,
    attention_heatmap,
    heatmap_csv,
    mean_spike_count,
    metrics_csv,
    metrics_rows,
    reduction,
    synops,
)
from est.snn import PsaSchedule, infer, load_model

log = logging.getLogger("est")

DEFAULT_SWEEP = (2, 4, 8, 16, 32, 64, 128, 256)
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def default_seed() -> int:
    raw = os.environ.get("EST_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"EST_SEED must be an integer, got {raw!r}")


# -- output handling -------------------------------------------------------

class Outputs:
    """Collects output files and commits them all at once via rename."""

    def __init__(self):
        self._pending: list[tuple[str, Path]] = []

    def add(self, path, text: str) -> None:
        path = Path(path)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        self._pending.append((tmp, path))

    def commit(self) -> None:
        for tmp, path in self._pending:
            os.replace(tmp, path)
        self._pending.clear()

    def discard(self) -> None:
        for tmp, _ in self._pending:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
        self._pending.clear()


# -- argument helpers ------------------------------------------------------

def _positive_int(name, value) -> int:
    if value < 1:
        raise ConfigError(f"{name} must be >= 1, got {value}")
    return value


def _timesteps(raw: str) -> list[int]:
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--timesteps must be a comma-separated list of integers, got {raw!r}")
    if not values:
        raise ConfigError("--timesteps is empty")
    for v in values:
        _positive_int("--timesteps", v)
    return values


def _need_file(path, flag) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{flag}: no such file {path}")
    return p


def _need_out_dir(path) -> None:
    parent = Path(path).parent
    if not parent.is_dir():
        raise ConfigError(f"output directory does not exist: {parent}")


def _load_data(args, n_tokens: int, d_model: int, n_classes: int | None = None) -> Dataset:
    path = _need_file(args.data, "--data")
    if getattr(args, "idx_labels", None):
        labels = _need_file(args.idx_labels, "--idx-labels")
        data = load_idx(path, labels, n_tokens)
        if data.d_model != d_model:
            raise ConfigError(f"IDX tokens have width {data.d_model}, model expects {d_model}")
        return data
    return load_csv(path, n_tokens, d_model, n_classes)


def _run_id(args) -> str:
    return args.run_id if args.run_id else f"seed{args.seed}"


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args, out: Outputs) -> None:
    for flag in ("classes", "n", "tokens", "dmodel"):
        _positive_int(f"--{flag}", getattr(args, flag))
    if args.n < args.classes:
        raise ConfigError("--n must be at least --classes")
    _need_out_dir(args.out)
    data = gen_synthetic(args.n // args.classes, args.classes, args.tokens, args.dmodel, args.seed)
    files = [(args.out, data)]
    if args.test_out:
        _need_out_dir(args.test_out)
        full = gen_synthetic(2 * (args.n // args.classes), args.classes, args.tokens,
                             args.dmodel, args.seed)
        train, test = split(full, 0.5, args.seed)
        files = [(args.out, train), (args.test_out, test)]
    for path, d in files:
        out.add(path, dataset_csv(d))


def cmd_train(args, out: Outputs) -> None:
    for flag in ("tokens", "dmodel", "dhead", "dff", "blocks", "epochs"):
        _positive_int(f"--{flag}", getattr(args, flag))
    if not args.lr > 0:
        raise ConfigError(f"--lr must be > 0, got {args.lr}")
    _need_out_dir(args.out)
    data = _load_data(args, args.tokens, args.dmodel)
    p = ann_mod.init_params(args.tokens, args.dmodel, args.dhead, data.n_classes,
                            d_ff=args.dff, blocks=args.blocks, seed=args.seed)
    history: list[float] = []
    p = ann_mod.train_sgd(p, data, args.epochs, args.lr, args.seed,
                          batch_size=args.batch_size, history=history)
    acc = accuracy(ann_mod.predict(p, data.inputs), data.labels)
    log.info("final loss %.6g, train accuracy %.4f", history[-1], acc)
    out.add(args.out, ann_mod.dumps(ann_mod.params_to_dict(p)))


def cmd_calibrate(args, out: Outputs) -> None:
    p = ann_mod.load_params(_need_file(args.ann, "--ann"))
    _need_out_dir(args.out)
    data = _load_data(args, p.n_tokens, p.d_model)
    _, report = calibrate_thresholds(p, data, args.percentile)
    for w in report.warnings:
        log.warning(w)
    out.add(args.out, report.to_json())


def _schedule(args, T: int) -> PsaSchedule:
    return PsaSchedule(T, args.rho if args.mode == "psa" else 1.0, args.gain)


def cmd_convert(args, out: Outputs) -> None:
    p = ann_mod.load_params(_need_file(args.ann, "--ann"))
    _positive_int("--timesteps", args.timesteps)
    schedule = _schedule(args, args.timesteps)
    _need_out_dir(args.out)
    if args.calib:
        th = thresholds_from_report(json.loads(_need_file(args.calib, "--calib").read_text()))
    elif args.data:
        th, report = calibrate_thresholds(p, _load_data(args, p.n_tokens, p.d_model),
                                          args.percentile)
        if args.report:
            out.add(args.report, report.to_json())
    else:
        raise ConfigError("convert needs --calib REPORT or --data CSV")
    out.add(args.out, ann_mod.dumps(convert(p, th, schedule, args.mode).to_dict()))


def _infer_rows(args, m, data, T: int, per_layer: bool):
    logits, rec = infer(m, data.inputs, T, workers=args.workers)
    acc = accuracy(logits, data.labels)
    mt = replace(m, schedule=m.schedule.with_T(T))
    return metrics_rows(_run_id(args), mt, rec, acc, per_layer=per_layer), rec, mt


def cmd_infer(args, out: Outputs) -> None:
    m = load_model(_need_file(args.snn, "--snn"))
    m.require_calibrated()
    T = _positive_int("--timesteps", args.timesteps) if args.timesteps is not None else m.schedule.T
    _positive_int("--workers", args.workers)
    _need_out_dir(args.out)
    data = _load_data(args, m.params.n_tokens, m.params.d_model)
    rows, rec, _ = _infer_rows(args, m, data, T, per_layer=True)
    out.add(args.out, metrics_csv(rows))
    if args.heatmap:
        out.add(args.heatmap, heatmap_csv(attention_heatmap(rec)))


def cmd_sweep(args, out: Outputs) -> None:
    m = load_model(_need_file(args.snn, "--snn"))
    m.require_calibrated()
    steps = _timesteps(args.timesteps) if args.timesteps else list(DEFAULT_SWEEP)
    _positive_int("--workers", args.workers)
    _need_out_dir(args.out)
    data = _load_data(args, m.params.n_tokens, m.params.d_model)
    rows = []
    for T in steps:
        r, _, _ = _infer_rows(args, m, data, T, per_layer=False)
        rows.extend(r)
    out.add(args.out, metrics_csv(rows))


def cmd_compare(args, out: Outputs) -> None:
    p = ann_mod.load_params(_need_file(args.ann, "--ann"))
    T = _positive_int("--timesteps", args.timesteps)
    _positive_int("--workers", args.workers)
    psa_schedule = PsaSchedule(T, args.rho, args.gain)
    _need_out_dir(args.out)
    data = _load_data(args, p.n_tokens, p.d_model)
    calib = data
    if args.calib_data:
        calib = load_csv(_need_file(args.calib_data, "--calib-data"), p.n_tokens, p.d_model)
    th, _ = calibrate_thresholds(p, calib, args.percentile)
    sa = convert(p, th, PsaSchedule(T, 1.0, args.gain), "sa")
    psa = convert(p, th, psa_schedule, "psa")

    results = {}
    for name, m in (("sa", sa), ("psa", psa)):
        logits, rec = infer(m, data.inputs, T, workers=args.workers)
        results[name] = (m, rec, accuracy(logits, data.labels))

    rows = []
    for name in ("sa", "psa"):
        m, rec, acc = results[name]
        rows.extend(metrics_rows(_run_id(args), m, rec, acc, per_layer=False))
    sa_row, psa_row = rows
    rows.append({
        "run_id": _run_id(args),
        "mode": "reduction",
        "T": T,
        "rho": psa.schedule.rho,
        "gain": psa.schedule.gain,
        "layer": "all",
        "mean_spike_count": reduction(sa_row["mean_spike_count"], psa_row["mean_spike_count"]),
        "synops": reduction(sa_row["synops"], psa_row["synops"]),
        "accuracy": sa_row["accuracy"] - psa_row["accuracy"],
    })
    out.add(args.out, metrics_csv(rows))

    if args.report:
        ops = {k: synops(results[k][1], results[k][0]) for k in ("sa", "psa")}
        msc = {k: mean_spike_count(results[k][1]) for k in ("sa", "psa")}
        report = {
            "definitions": [MEAN_SPIKE_DEFINITION, SYNOPS_DEFINITION],
            "T": T,
            "T_qk": psa.schedule.T_qk,
            "rho": psa.schedule.rho,
            "gain": psa.schedule.gain,
            "accuracy": {k: results[k][2] for k in ("sa", "psa")},
            "attention_synops": {k: ops[k].subtotal(ATTENTION_LAYERS) for k in ("sa", "psa")},
            "attention_synops_reduction": reduction(ops["sa"].subtotal(), ops["psa"].subtotal()),
            "total_synops_reduction": reduction(ops["sa"].total, ops["psa"].total),
            "layers": {
                layer: {
                    "fan_out": ops["sa"].formulas[layer],
                    "mean_spike_count": {k: msc[k][layer] for k in ("sa", "psa")},
                    "synops": {k: ops[k].per_layer[layer] for k in ("sa", "psa")},
                }
                for layer in ops["sa"].per_layer
            },
        }
        out.add(args.report, json.dumps(report, indent=2) + "\n")


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="est", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=None,
                        help="random seed (default: $EST_SEED, else 0)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    def data_flags(sp, required=True):
        sp.add_argument("--data", required=required, help="label-first CSV, or IDX images")
        sp.add_argument("--idx-labels", help="IDX label file; makes --data an IDX image file")

    sp = add("gen-data", cmd_gen_data, "write a synthetic Gaussian-blob dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--test-out", help="also write a held-out split of the same size")
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--n", type=int, default=300, help="total samples")
    sp.add_argument("--tokens", type=int, default=4)
    sp.add_argument("--dmodel", type=int, default=8)

    sp = add("train", cmd_train, "train the ReLU-attention ANN with SGD")
    data_flags(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tokens", type=int, default=4)
    sp.add_argument("--dmodel", type=int, default=8)
    sp.add_argument("--dhead", type=int, default=4)
    sp.add_argument("--dff", type=int, default=16)
    sp.add_argument("--blocks", type=int, default=1)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=32)

    sp = add("calibrate", cmd_calibrate, "calibrate IF thresholds from ANN activations")
    sp.add_argument("--ann", required=True)
    data_flags(sp)
    sp.add_argument("--percentile", type=float, default=DEFAULT_PERCENTILE)
    sp.add_argument("--out", required=True)

    sp = add("convert", cmd_convert, "bind ANN weights and thresholds into an SNN model")
    sp.add_argument("--ann", required=True)
    sp.add_argument("--calib", help="calibration report from `est calibrate`")
    data_flags(sp, required=False)
    sp.add_argument("--percentile", type=float, default=DEFAULT_PERCENTILE)
    sp.add_argument("--report", help="write the calibration report here (with --data)")
    sp.add_argument("--mode", choices=("sa", "psa"), default="sa")
    sp.add_argument("--timesteps", type=int, default=64)
    sp.add_argument("--rho", type=float, default=0.5)
    sp.add_argument("--gain", choices=("auto", "fixed"), default="auto")
    sp.add_argument("--out", required=True)

    for name, fn, help_ in (("infer", cmd_infer, "run SNN inference and write metrics"),
                            ("sweep", cmd_sweep, "metrics for a list of time budgets")):
        sp = add(name, fn, help_)
        sp.add_argument("--snn", required=True)
        data_flags(sp)
        if name == "infer":
            sp.add_argument("--timesteps", type=int, default=None)
            sp.add_argument("--heatmap", help="write the score firing-rate matrix here")
        else:
            sp.add_argument("--timesteps", default=None,
                            help="comma list (default: 2,4,8,16,32,64,128,256)")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--run-id", default=None)
        sp.add_argument("--out", required=True)

    sp = add("compare", cmd_compare, "SA vs PSA on identical data")
    sp.add_argument("--ann", required=True)
    data_flags(sp)
    sp.add_argument("--calib-data", help="calibration CSV (default: --data)")
    sp.add_argument("--percentile", type=float, default=DEFAULT_PERCENTILE)
    sp.add_argument("--timesteps", type=int, default=64)
    sp.add_argument("--rho", type=float, default=0.5)
    sp.add_argument("--gain", choices=("auto", "fixed"), default="auto")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--run-id", default=None)
    sp.add_argument("--report", help="per-layer JSON report")
    sp.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Outputs()
    try:
        if args.seed is None:
            args.seed = default_seed()
        args.func(args, out)
        out.commit()
    except ConfigError as exc:
        out.discard()
        print(f"est: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstError, OSError, ValueError, json.JSONDecodeError) as exc:
        out.discard()
        print(f"est: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except BaseException:
        out.discard()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
