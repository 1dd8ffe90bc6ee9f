"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 I/O or file format, 3 config/checkpoint
mismatch, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import GcdDataset, SyntheticSpec, generate_synthetic, load_gcdf, save_gcdf
from .errors import ConfigError, DataError, DimensionError, FormatError, NumericError, ParameterError
from .evaluation import (
    clustering_accuracy,
    evaluate_model,
    kl_neuron_analysis,
    kmeans,
    norm_ratio_diagnostic,
)
from .gradcheck import TOLERANCE, run_gradient_suite
from .heads import ExpansionLayer, GcdModel
from .numerics import RngState
from .trainer import TrainConfig, TrainLog, run_stage1, run_stage2, run_stage3

log = logging.getLogger("conceptgcd")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- helpers -----------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(path, payload) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"config {args.config} must hold a flat JSON object")
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values[key] = _parse_value(raw)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    try:
        return TrainConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_data(args) -> GcdDataset:
    return load_gcdf(args.data, args.known, args.novel)


def load_model(path) -> GcdModel:
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return GcdModel.from_tensors(load_checkpoint(path))


def _expect_stage(model: GcdModel, stage: int, path) -> None:
    if model.stage != stage:
        raise ConfigError(f"{path} is a stage-{model.stage} checkpoint, expected stage {stage}")


def write_manifest(path, command: str, cfg: TrainConfig | None, inputs: list, outputs: dict, metrics: dict) -> None:
    manifest = {
        "tool": "conceptgcd",
        "version": __version__,
        "command": command,
        "config": cfg.to_dict() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "metrics": metrics,
    }
    write_json_atomic(path, manifest)


def _manifest_path(args, default_base) -> Path:
    return Path(args.manifest) if getattr(args, "manifest", None) else Path(str(default_base) + ".manifest.json")


# -- commands ---------------------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    spec = SyntheticSpec(
        n_known=args.known,
        n_novel=args.novel,
        input_dim=args.dim,
        samples_per_class=args.per_class,
        center_scale=args.center_scale,
        noise_sigma=args.noise,
        label_ratio=args.label_ratio,
    )
    ds = generate_synthetic(spec, RngState(args.seed))
    save_gcdf(ds, args.out)
    info = {"path": str(args.out), "n_samples": ds.n_samples, "n_visible": int(ds.visible.sum())}
    write_manifest(
        _manifest_path(args, args.out), "gen-data", None, [],
        {"data": args.out}, {**info, "spec": dataclasses.asdict(spec), "seed": args.seed},
    )
    return info


def _train_stage(args, stage: int) -> dict:
    cfg = build_config(args)
    ds = load_data(args)
    inputs = [args.data]
    ckpts = list(getattr(args, "ckpt_in", None) or [])
    need = {1: 0, 2: 1, 3: 2}[stage]
    if len(ckpts) != need:
        raise UsageError(f"stage{stage} needs {need} --ckpt-in path(s), got {len(ckpts)}")
    models = [load_model(p) for p in ckpts]
    for i, (p, mdl) in enumerate(zip(ckpts, models)):
        _expect_stage(mdl, i + 1, p)
        inputs.append(p)
    train_log = TrainLog(args.log)
    if stage == 1:
        result = run_stage1(ds, cfg, train_log)
    elif stage == 2:
        result = run_stage2(models[0], ds, cfg, train_log)
    else:
        result = run_stage3(models[0], models[1], ds, cfg, train_log)
    save_checkpoint(args.ckpt_out, result.model.to_tensors())
    report = evaluate_model(result.model, ds).to_dict()
    metrics = {"final_epoch": result.history[-1] if result.history else None, "eval": report}
    outputs = {"checkpoint": args.ckpt_out}
    if args.log:
        outputs["log"] = args.log
    write_manifest(_manifest_path(args, args.ckpt_out), f"stage{stage}", cfg, inputs, outputs, metrics)
    return {"checkpoint": str(args.ckpt_out), "eval": report}


def _eval_report(model: GcdModel, ds: GcdDataset, method: str, seed: int) -> tuple[dict, np.ndarray]:
    idx = ds.unlabeled_indices
    if method == "kmeans":
        preds = kmeans(model.features(ds.features[idx]), ds.n_classes, RngState(seed))
    else:
        preds = model.predict(ds.features[idx])
    report = clustering_accuracy(preds, ds.gt_labels[idx], ds.n_known, ds.n_classes).to_dict()
    report.update({"method": method, "stage": model.stage})
    if isinstance(model.head, ExpansionLayer):
        nr = norm_ratio_diagnostic(model.raw_features(ds.features), model.head.split_m)
        report["norm_ratio"] = dataclasses.asdict(nr)
    return report, preds


def cmd_eval(args) -> dict:
    ds = load_data(args)
    idx = ds.unlabeled_indices
    inputs = [args.data]
    if args.preds:
        preds = np.asarray(json.loads(Path(args.preds).read_text()), dtype=np.int64)
        if preds.shape != idx.shape:
            raise DataError(f"{args.preds} holds {preds.size} predictions, data has {idx.size} unlabeled samples")
        report = clustering_accuracy(preds, ds.gt_labels[idx], ds.n_known, ds.n_classes).to_dict()
        report["method"] = "given"
        inputs.append(args.preds)
    elif args.ckpt:
        model = load_model(args.ckpt)
        report, preds = _eval_report(model, ds, args.method, args.seed)
        inputs.append(args.ckpt)
    else:
        raise UsageError("eval needs --ckpt or --preds")
    write_json_atomic(args.report, report)
    if args.rows_csv:
        with open(args.rows_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "gt_label", "prediction"])
            for i, g, p in zip(idx, ds.gt_labels[idx], preds):
                w.writerow([int(i), int(g), int(p)])
    write_manifest(_manifest_path(args, args.report), "eval", None, inputs, {"report": args.report}, report)
    return report


def _layer_features(model: GcdModel, x: np.ndarray, layer: str) -> np.ndarray:
    return model.encode(x) if layer == "encoder" else model.features(x)


def cmd_analyze_kl(args) -> dict:
    ds = load_data(args)
    if args.samples < 2 or args.samples > ds.n_samples:
        raise UsageError(f"--samples must lie in [2, {ds.n_samples}]")
    probe = np.sort(RngState(args.seed).choice(ds.n_samples, args.samples))
    x = ds.features[probe]
    a, b = load_model(args.ckpt_a), load_model(args.ckpt_b)
    hist = kl_neuron_analysis(_layer_features(a, x, args.layer), _layer_features(b, x, args.layer))
    report = {**hist.to_dict(), "layer": args.layer, "samples": args.samples, "seed": args.seed}
    if args.report:
        write_json_atomic(args.report, report)
        write_manifest(
            _manifest_path(args, args.report), "analyze-kl", None,
            [args.data, args.ckpt_a, args.ckpt_b], {"report": args.report}, {"counts": hist.counts},
        )
    return {k: report[k] for k in ("bins", "counts", "n_neurons")}


def cmd_grad_check(args) -> dict:
    errors = {k: float(v) for k, v in run_gradient_suite(args.seed).items()}
    failed = sorted(k for k, v in errors.items() if not v < TOLERANCE)
    report = {"tolerance": TOLERANCE, "max_relative_error": errors, "failed": failed}
    if args.report:
        write_json_atomic(args.report, report)
    if failed:
        print(json.dumps(report, indent=2))
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return report


def cmd_dump_features(args) -> dict:
    ds = load_data(args)
    model = load_model(args.ckpt)
    feats = _layer_features(model, ds.features, args.layer).astype(np.float32).astype(np.float64)
    out = GcdDataset(feats, ds.gt_labels, ds.visible, ds.n_known, ds.n_novel)
    save_gcdf(out, args.out)
    write_manifest(
        _manifest_path(args, args.out), "dump-features", None,
        [args.data, args.ckpt], {"features": args.out}, {"shape": list(feats.shape)},
    )
    return {"path": str(args.out), "shape": list(feats.shape)}


def cmd_pipeline(args) -> dict:
    """All three stages plus evaluation, writing every artifact into ``--out-dir``."""
    cfg = build_config(args)
    ds = load_data(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    s1 = run_stage1(ds, cfg, TrainLog(out / "stage1.jsonl"))
    save_checkpoint(out / "stage1.gcdc", s1.model.to_tensors())
    s2 = run_stage2(s1.model, ds, cfg, TrainLog(out / "stage2.jsonl"))
    save_checkpoint(out / "stage2.gcdc", s2.model.to_tensors())
    s3 = run_stage3(s1.model, s2.model, ds, cfg, TrainLog(out / "stage3.jsonl"))
    save_checkpoint(out / "stage3.gcdc", s3.model.to_tensors())
    for name, model in (("stage1", s1.model), ("stage2", s2.model), ("stage3", s3.model)):
        results[name] = _eval_report(model, ds, "head", cfg.seed)[0]
    results["stage1_kmeans"] = _eval_report(s1.model, ds, "kmeans", cfg.seed)[0]
    if args.with_baseline:
        base = run_stage2(s1.model, ds, dataclasses.replace(cfg, gl_depth=0), TrainLog(out / "baseline.jsonl"))
        save_checkpoint(out / "baseline.gcdc", base.model.to_tensors())
        results["baseline"] = _eval_report(base.model, ds, "head", cfg.seed)[0]
    write_json_atomic(out / "report.json", results)
    outputs = {p.name: p for p in sorted([*out.glob("*.gcdc"), *out.glob("stage*.jsonl"), *out.glob("baseline.jsonl")])}
    outputs["report"] = out / "report.json"
    write_manifest(out / "manifest.json", "pipeline", cfg, [args.data], outputs, results)
    return {k: {m: v.get(m) for m in ("acc_all", "acc_known", "acc_novel")} for k, v in results.items()}


# -- argument parsing ------------------------------------------------------------------------


def _add_data(p) -> None:
    p.add_argument("--data", required=True, help="GCDF feature file")
    p.add_argument("--known", type=int, default=None, help="number of known classes (inferred if omitted)")
    p.add_argument("--novel", type=int, default=None, help="number of novel classes (inferred if omitted)")


def _add_config(p) -> None:
    p.add_argument("--config", help="flat JSON file with TrainConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conceptgcd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic benchmark as GCDF")
    p.add_argument("--known", type=int, default=20)
    p.add_argument("--novel", type=int, default=20)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--center-scale", type=float, default=SyntheticSpec.center_scale)
    p.add_argument("--noise", type=float, default=SyntheticSpec.noise_sigma)
    p.add_argument("--label-ratio", type=float, default=SyntheticSpec.label_ratio)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_gen_data)

    for stage in (1, 2, 3):
        p = sub.add_parser(f"stage{stage}", help=f"run training stage {stage}")
        _add_data(p)
        _add_config(p)
        if stage > 1:
            p.add_argument("--ckpt-in", nargs="+", required=True, help="stage-1 (and stage-2) checkpoints")
        p.add_argument("--ckpt-out", required=True)
        p.add_argument("--log", help="JSON-lines training log")
        p.add_argument("--manifest")
        p.set_defaults(func=lambda a, s=stage: _train_stage(a, s))

    p = sub.add_parser("pipeline", help="run all stages and evaluation")
    _add_data(p)
    _add_config(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--with-baseline", action="store_true", help="also train the classifier-only baseline")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="clustering accuracy on the unlabeled split")
    _add_data(p)
    p.add_argument("--ckpt")
    p.add_argument("--preds", help="JSON list of predictions for the unlabeled samples, in index order")
    p.add_argument("--method", choices=("head", "kmeans"), default="head")
    p.add_argument("--seed", type=int, default=0, help="k-means seed")
    p.add_argument("--report", required=True)
    p.add_argument("--rows-csv", help="per-sample CSV of ground truth and predictions")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-kl", help="minimum KL divergence between neuron response distributions")
    _add_data(p)
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layer", choices=("encoder", "features"), default="encoder")
    p.add_argument("--report")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_analyze_kl)

    p = sub.add_parser("grad-check", help="finite-difference check of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-features", help="write model features as GCDF")
    _add_data(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", choices=("encoder", "features"), default="features")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as exc:
        print(f"parameter error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
