"""Operator command line: dataset synthesis, training, evaluation, gradient
checking, and ablation sweeps.

Machine-readable newline-delimited JSON goes to stdout; human summaries go
to stderr.  Exit codes: 0 success, 1 validation error, 2 numeric failure
(non-finite values), 3 gradient-check tolerance failure.

Run configuration schema (JSON, unknown keys rejected at every level)::

    {
      "model": { ... ModelConfig fields except seed ... },
      "optimizer": {"lr": 0.01, "momentum": 0.9, "weight_decay": 1e-4,
                    "batch_size": 8, "epochs": 30},
      "data": "path/to/train-dataset",
      "val_data": "path/to/val-dataset",   # optional
      "augment": true,                      # optional, default true
      "seed": 0
    }
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .data import SynthSpec, class_pixel_stats, generate, load_dataset, save_dataset
from .errors import ConfigError, NumericError, VqsegError
from .gradcheck import run_composed_checks, run_op_checks
from .network import ModelConfig, SegModel
from .rng import CounterRng
from .train import evaluate, load_checkpoint, save_checkpoint, train

ABLATE_AXES = ("K", "dim", "heads", "fusion", "depth")


class CliUsageError(ConfigError):
    """Bad command-line usage; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(f"{message}\n{self.format_usage()}")


def _emit(event: dict):
    print(json.dumps(event, sort_keys=True), flush=True)


def _say(message: str):
    print(message, file=sys.stderr, flush=True)


# -- run configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    model: ModelConfig
    lr: float
    momentum: float
    weight_decay: float
    batch_size: int
    epochs: int
    data: str
    val_data: str | None
    augment: bool
    seed: int


def _reject_unknown(payload: dict, allowed: set, where: str):
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def parse_run_config(path, require_data: bool = True) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    payload = json.loads(path.read_text())
    _reject_unknown(payload, {"model", "optimizer", "data", "val_data", "augment", "seed"},
                    "run config")
    for key in ("model", "optimizer", "seed"):
        if key not in payload:
            raise ConfigError(f"run config missing required key '{key}'")
    model_payload = dict(payload["model"])
    if "seed" in model_payload:
        raise ConfigError("set the seed at the top level, not inside 'model'")
    opt = dict(payload["optimizer"])
    _reject_unknown(opt, {"lr", "momentum", "weight_decay", "batch_size", "epochs"},
                    "optimizer")
    for key in ("lr", "epochs", "batch_size"):
        if key not in opt:
            raise ConfigError(f"optimizer config missing required key '{key}'")
    if opt["lr"] <= 0:
        raise ConfigError("lr must be > 0 for training")
    data = payload.get("data")
    if require_data:
        if not data:
            raise ConfigError("run config missing required key 'data'")
        if not Path(data).exists():
            raise ConfigError(f"dataset path does not exist: {data}")
    val_data = payload.get("val_data")
    if val_data and not Path(val_data).exists():
        raise ConfigError(f"val dataset path does not exist: {val_data}")
    model = ModelConfig.from_dict({**model_payload, "seed": payload["seed"]})
    model.validate()
    return RunConfig(
        model=model,
        lr=float(opt["lr"]),
        momentum=float(opt.get("momentum", 0.9)),
        weight_decay=float(opt.get("weight_decay", 1e-4)),
        batch_size=int(opt["batch_size"]),
        epochs=int(opt["epochs"]),
        data=data,
        val_data=val_data,
        augment=bool(payload.get("augment", True)),
        seed=int(payload["seed"]),
    )


# -- commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"spec file not found: {spec_path}")
    payload = json.loads(spec_path.read_text())
    _reject_unknown(payload, set(SynthSpec.__dataclass_fields__), "synth spec")
    spec = SynthSpec(**payload)
    samples = generate(spec)
    save_dataset(samples, args.out, spec)
    stats = class_pixel_stats(samples, spec.num_classes)
    _emit({"event": "synth", "out": str(args.out), "count": len(samples), **stats})
    _say(f"wrote {len(samples)} samples to {args.out}")
    _say(f"class pixel fractions: {[round(f, 4) for f in stats['fraction_per_class']]}")
    return 0


def _train_run(run: RunConfig, out_dir: Path, emit=True) -> tuple[SegModel, list]:
    samples, _ = load_dataset(run.data)
    val_samples = None
    if run.val_data:
        val_samples, _ = load_dataset(run.val_data)
    model = SegModel(run.model)
    rng = CounterRng(run.seed ^ 0x5EED)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = []

    def on_epoch(report, model_, rng_):
        save_checkpoint(out_dir / f"epoch_{report.epoch:03d}", model_, report.epoch, rng_)
        row = {
            "epoch": report.epoch,
            "total": report.total,
            "seg": report.seg,
            "quant": report.quant,
            "codebook_perplexity": report.codebook_perplexity,
            "val_dsc": report.val_dsc,
        }
        log.append(row)
        if emit:
            _emit({"event": "epoch", **row})
            _emit({"event": "codebook_stats", "epoch": report.epoch,
                   **report.codebook_stats})
            _say(f"epoch {report.epoch}: total {report.total:.4f} "
                 f"(seg {report.seg:.4f}, quant {report.quant:.4f})")

    train(
        model, samples,
        epochs=run.epochs, batch_size=run.batch_size, lr=run.lr,
        momentum=run.momentum, weight_decay=run.weight_decay,
        use_augment=run.augment, val_samples=val_samples,
        rng=rng, on_epoch=on_epoch,
    )
    save_checkpoint(out_dir / "final", model, step=run.epochs, rng=rng)
    (out_dir / "train_log.json").write_text(
        json.dumps({"epochs": log}, indent=2, sort_keys=True) + "\n"
    )
    return model, log


def cmd_train(args) -> int:
    run = parse_run_config(args.config)
    _train_run(run, Path(args.out))
    _say(f"final checkpoint: {Path(args.out) / 'final'}")
    return 0


def _write_report(report: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _summarize_report(report: dict):
    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    _say(f"cases: {report['cases']}  mean DSC: {fmt(report['mean_dsc'])}  "
         f"mean HD95: {fmt(report['mean_hd95'])}")
    _say(f"mean IoU: {fmt(report['mean_iou'])}  SE: {fmt(report['mean_se'])}  "
         f"SP: {fmt(report['mean_sp'])}  ACC: {fmt(report['mean_acc'])}")
    for cls, v in report["per_class_dsc"].items():
        if cls != "0":
            _say(f"  class {cls} DSC: {fmt(v)}")


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    samples, _ = load_dataset(args.data)
    report = evaluate(model, samples)
    report_with_provenance = {"checkpoint": str(args.checkpoint), "data": str(args.data),
                              **report}
    _write_report(report_with_provenance, Path(args.report))
    _emit({"event": "eval", "report": str(args.report),
           "mean_dsc": report["mean_dsc"], "mean_hd95": report["mean_hd95"]})
    _summarize_report(report)
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed
    if args.config:
        seed = parse_run_config(args.config, require_data=False).seed
    failures = 0
    report = run_op_checks(eps=args.eps, instances=args.instances, seed=seed)
    for name, err in report.items():
        ok = err < args.tolerance
        failures += not ok
        _emit({"event": "gradcheck", "op": name, "max_rel_error": err,
               "tolerance": args.tolerance, "pass": ok})
        _say(f"{'PASS' if ok else 'FAIL'} {name:<28} {err:.3e} (tol {args.tolerance:g})")
    composed = run_composed_checks(eps=args.eps, seed=seed)
    for name, err in composed.items():
        ok = err < args.composed_tolerance
        failures += not ok
        _emit({"event": "gradcheck", "op": name, "max_rel_error": err,
               "tolerance": args.composed_tolerance, "pass": ok})
        _say(f"{'PASS' if ok else 'FAIL'} {name:<28} {err:.3e} "
             f"(tol {args.composed_tolerance:g})")
    if failures:
        _say(f"{failures} gradient check(s) exceeded tolerance")
        return 3
    _say("all gradient checks passed")
    return 0


# -- ablation ---------------------------------------------------------------------


def _heads_value(value: str) -> tuple[int, int]:
    match = re.fullmatch(r"(\d+)s(\d+)h", value)
    if not match:
        raise ConfigError(f"heads value '{value}' must look like '8s2h'")
    return int(match.group(1)), int(match.group(2))


def _apply_axis(model: ModelConfig, axis: str, value: str) -> ModelConfig:
    payload = model.to_dict()
    if axis == "K":
        payload["codebook_size"] = int(value)
    elif axis == "dim":
        payload["dim"] = int(value)
    elif axis == "heads":
        payload["cross_heads"], payload["refine_heads"] = _heads_value(value)
    elif axis == "fusion":
        if value not in ("full", "fusion"):
            raise ConfigError(f"fusion axis values are 'full' or 'fusion', got '{value}'")
        payload["use_cross_attention"] = value == "full"
    elif axis == "depth":
        depth = int(value)
        if depth < 1:
            raise ConfigError(f"depth must be >= 1, got {value}")
        chans = list(model.encoder_channels)
        while len(chans) < depth:
            chans.append(chans[-1] * 2)
        payload["encoder_channels"] = chans[:depth]
    else:  # pragma: no cover - argparse choices guard this
        raise ConfigError(f"unknown axis '{axis}'; valid axes: {', '.join(ABLATE_AXES)}")
    config = ModelConfig.from_dict(payload)
    config.validate()
    return config


def _run_ablate_point(packed: tuple) -> dict:
    config_path, out_dir, axis, value = packed
    run = parse_run_config(config_path)
    run = RunConfig(**{**run.__dict__, "model": _apply_axis(run.model, axis, value)})
    point_dir = Path(out_dir) / axis / value
    model, log = _train_run(run, point_dir, emit=False)
    eval_data = run.val_data or run.data
    samples, _ = load_dataset(eval_data)
    report = evaluate(model, samples)
    _write_report({"axis": axis, "value": value, **report}, point_dir / "report.json")
    last = log[-1] if log else {}
    return {
        "axis": axis,
        "value": value,
        "final_total": last.get("total"),
        "final_seg": last.get("seg"),
        "final_quant": last.get("quant"),
        "codebook_perplexity": last.get("codebook_perplexity"),
        "mean_dsc": report["mean_dsc"],
        "mean_hd95": report["mean_hd95"],
        "mean_iou": report["mean_iou"],
        "mean_se": report["mean_se"],
        "mean_sp": report["mean_sp"],
        "mean_acc": report["mean_acc"],
    }


def cmd_ablate(args) -> int:
    parse_run_config(args.config)  # validate before any training
    if args.axis == "fusion" and not args.values:
        values = ["full", "fusion"]
    elif args.values:
        values = [v.strip() for v in args.values.split(",") if v.strip()]
    else:
        raise CliUsageError(f"--values is required for axis '{args.axis}'")
    jobs = [(args.config, args.out, args.axis, v) for v in values]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_run_ablate_point, jobs))
    else:
        rows = [_run_ablate_point(job) for job in jobs]
    consolidated = {"axis": args.axis, "rows": rows}
    _write_report(consolidated, Path(args.out) / "ablation_report.json")
    for row in rows:
        _emit({"event": "ablate_point", **row})

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    _say(f"ablation over {args.axis}:")
    _say(f"{'value':<10} {'mean DSC':>10} {'mean HD95':>10} {'final total':>12}")
    for row in rows:
        _say(f"{row['value']:<10} {fmt(row['mean_dsc']):>10} "
             f"{fmt(row['mean_hd95']):>10} {fmt(row['final_total']):>12}")
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="vqseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON SynthSpec file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="path for the JSON metric report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check every backward rule")
    p.add_argument("--config", default=None, help="optional run config supplying the seed")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--composed-tolerance", type=float, default=1e-4)
    p.add_argument("--instances", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep one architecture axis")
    p.add_argument("--axis", required=True, choices=ABLATE_AXES)
    p.add_argument("--values", default=None,
                   help="comma-separated values (e.g. '64,256' or '2s2h,8s2h')")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", type=int, default=1,
                   help="worker processes (>1 keeps per-point determinism)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NumericError as exc:
        _say(f"numeric failure: {exc}")
        return 2
    except VqsegError as exc:
        _say(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
