"""``steerdepth`` command line: generate, train, eval, sweep, gradcheck.

Exit codes: 0 success, 1 validation error, 2 runtime failure,
3 property or gradient-check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autograd as ag
from . import gradsuite
from .evaluate import (
    METRICS,
    REGIONS,
    check_properties,
    model_predictor,
    oracle_predictor,
    region_report,
    write_metrics_csv,
)
from .runconfig import ConfigError, RunConfig
from .scenegen import (
    SampleFormatError,
    SceneConfigError,
    generate_dataset,
    load_dataset,
    write_pgm,
)
from .stereonet import ModelConfigError, StereoNet
from .train import DivergenceError, TrainSettings, load_model, train

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

# Trained-model property thresholds used when require_properties is set.
PROPERTY_LIMITS = {"monotonicity_violation_rate": 0.10, "determinism": 0.90, "diversity_coverage": 0.80}


class ValidationError(ValueError):
    pass


def _prepare_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ValidationError("--out is required")
    out = Path(cfg.out)
    if out.exists() and any(out.iterdir()):
        if not cfg.force:
            raise ValidationError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_dataset(cfg: RunConfig) -> Path:
    if not cfg.dataset:
        raise ValidationError("--dataset is required")
    root = Path(cfg.dataset)
    if not (root / "manifest.json").is_file():
        raise ValidationError(f"no dataset manifest under {root}")
    return root


def _require_checkpoint(cfg: RunConfig) -> Path:
    if not cfg.checkpoint:
        raise ValidationError("--checkpoint is required")
    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    if not (path.parent / "model_config.json").is_file():
        raise ValidationError(f"model_config.json missing beside {path}")
    return path


def cmd_generate(cfg: RunConfig) -> int:
    scene = cfg.scene_config()
    out = _prepare_out(cfg)
    cfg.snapshot(out)
    manifest = generate_dataset(scene, out, cfg.n_samples, cfg.seed, cfg.split)
    print(f"wrote {manifest.count} {cfg.split} samples to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    root = _require_dataset(cfg)
    model_cfg = cfg.model_config()
    out = _prepare_out(cfg)
    cfg.snapshot(out)
    _, samples = load_dataset(root)
    model = StereoNet(model_cfg)
    settings = TrainSettings(
        steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, lr_final_ratio=cfg.lr_final_ratio,
        rho=cfg.rho, lambda_seg=cfg.lambda_seg, use_masking=cfg.use_masking,
        checkpoint_every=cfg.checkpoint_every, seed=cfg.seed,
    )
    t0 = time.perf_counter()
    every = max(1, cfg.steps // 20)

    def progress(step: int, loss: float) -> None:
        if step % every == 0 or step == cfg.steps:
            print(f"step {step}/{cfg.steps} loss {loss:.4f} ({time.perf_counter() - t0:.0f}s)", flush=True)

    train(model, samples, settings, out, progress)
    print(f"checkpoint: {out / 'model.stdp'}")
    return EXIT_OK


def evaluate_to(out: Path, cfg: RunConfig, samples, names, predictor, model_hash: str | None) -> dict[str, Any]:
    report = region_report(predictor, samples, cfg.c_values, names, cfg.workers)
    write_metrics_csv(report, out / "metrics.csv")
    grid = np.linspace(0.0, 1.0, cfg.c_grid_points)
    props = check_properties(predictor, samples, grid, workers=cfg.workers)
    summary = {
        "note": "toy renderer has no occlusions; there is no Non-Occ/All split",
        "regions": list(REGIONS),
        "metrics": list(METRICS),
        "grid": report.grid(),
        "properties": props.to_json(),
        "predictor": "oracle" if cfg.oracle else "model",
        "model_config_hash": model_hash,
        "run_config_hash": cfg.digest(),
        "samples": len(samples),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _property_failures(props: dict[str, Any]) -> list[str]:
    failed = []
    if props["monotonicity_violation_rate"] is not None and \
            props["monotonicity_violation_rate"] >= PROPERTY_LIMITS["monotonicity_violation_rate"]:
        failed.append("monotonicity")
    if props["determinism"] is not None and props["determinism"] < PROPERTY_LIMITS["determinism"]:
        failed.append("determinism")
    if props["diversity_coverage"] is not None and \
            props["diversity_coverage"] < PROPERTY_LIMITS["diversity_coverage"]:
        failed.append("diversity")
    return failed


def cmd_eval(cfg: RunConfig) -> int:
    root = _require_dataset(cfg)
    model = None
    if not cfg.oracle:
        model = load_model(_require_checkpoint(cfg))
    out = _prepare_out(cfg)
    cfg.snapshot(out)
    manifest, samples = load_dataset(root)
    names = [manifest.sample_dir(i).name for i in range(manifest.count)]
    predictor = oracle_predictor if model is None else model_predictor(model)
    summary = evaluate_to(out, cfg, samples, names, predictor, None if model is None else model.cfg.digest())
    for region in REGIONS:
        for c, cell in summary["grid"][region].items():
            if cell.get("absent"):
                print(f"{region:20s} c={c:<4s} absent")
            else:
                print(f"{region:20s} c={c:<4s} " + " ".join(f"{m}={cell[m]:.3f}" for m in METRICS))
    props = summary["properties"]
    print(json.dumps({k: props[k] for k in ("determinism", "monotonicity_violation_rate", "diversity_coverage")}))
    if cfg.require_properties:
        failed = _property_failures(props)
        if failed:
            print(f"property checks failed: {', '.join(failed)}", file=sys.stderr)
            return EXIT_CHECK
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    model = load_model(_require_checkpoint(cfg))
    root = _require_dataset(cfg)
    out = _prepare_out(cfg)
    cfg.snapshot(out)
    manifest, samples = load_dataset(root)
    rows = []
    for i, sample in enumerate(samples[: cfg.sweep_samples]):
        for c in cfg.c_list:
            with ag.no_grad():
                pred = model.forward(sample.left, sample.right, c)
            disp = pred.disparity.data[0]
            d = out / manifest.sample_dir(i).name / f"c_{c:g}"
            d.mkdir(parents=True, exist_ok=True)
            disp.astype("<f4").tofile(d / "disp_pred.f32")
            write_pgm(d / "disp_pred.pgm", disp / model.cfg.d_max)
            if pred.seg_logits is not None:
                seg = 1.0 / (1.0 + np.exp(-pred.seg_logits.data[0]))
                seg.astype("<f4").tofile(d / "seg_pred.f32")
                write_pgm(d / "seg_pred.pgm", seg)
            (d / "meta.json").write_text(json.dumps({
                "c": c, "model_config_hash": model.cfg.digest(), "shape": list(disp.shape),
                "sample_seed": sample.meta.get("seed"),
            }, indent=2, sort_keys=True) + "\n")
            rows.append({
                "sample": manifest.sample_dir(i).name,
                "c": f"{c:g}",
                "mean_transmissive_disparity": repr(float(disp[sample.mask].mean())) if sample.mask.any() else "",
                "mean_opaque_disparity": repr(float(disp[~sample.mask].mean())) if (~sample.mask).any() else "",
            })
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} predictions to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = gradsuite.run_all(trials=cfg.gradcheck_trials, seed=cfg.seed)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    if cfg.out:
        out = _prepare_out(cfg)
        cfg.snapshot(out)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


COMMAND_FUNCS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def _c_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steerdepth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMAND_FUNCS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--force", action="store_true", default=None, help="replace a non-empty output directory")
        p.add_argument("--workers", type=int)
        if name in ("train", "eval", "sweep"):
            p.add_argument("--dataset")
        if name in ("eval", "sweep"):
            p.add_argument("--checkpoint")
        if name == "generate":
            p.add_argument("--n-samples", dest="n_samples", type=int)
            p.add_argument("--split", choices=["train", "val", "test"])
        if name == "train":
            p.add_argument("--steps", type=int)
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--rho", type=float)
            p.add_argument("--lambda-seg", dest="lambda_seg", type=float)
            for toggle in ("cmoe", "dci", "seg-head"):
                dest = f"use_{toggle.replace('-', '_')}"
                p.add_argument(f"--{toggle}", dest=dest, action="store_true", default=None)
                p.add_argument(f"--no-{toggle}", dest=dest, action="store_false")
        if name == "eval":
            p.add_argument("--oracle", action="store_true", default=None)
            p.add_argument("--require-properties", dest="require_properties", action="store_true", default=None)
        if name == "sweep":
            p.add_argument("--c-list", dest="c_list", type=_c_list)
        if name == "gradcheck":
            p.add_argument("--trials", dest="gradcheck_trials", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if v is not None and k != "config"}
    try:
        cfg = RunConfig.from_file(args.config, overrides)
        return COMMAND_FUNCS[cfg.command](cfg)
    except (ConfigError, ValidationError, SceneConfigError, ModelConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, SampleFormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
