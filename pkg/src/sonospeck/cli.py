"""Command-line surface.

Subcommands: simulate, train, denoise, evaluate, sweep-variance,
sweep-lambda, gradcheck, bench, info. Every experiment output is plain
CSV; every command echoes its effective config so runs are reproducible
from the log. Exit codes: 0 success, 1 validation error, 2
runtime/numerical error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .config import SCHEMA, RunConfig, build_config
from .errors import NumericalError, TrainingError, ValidationError
from .imgio import load_image, save_image
from .losses import median_filter2d
from .metrics import bench_throughput, epi, mean_mscore_for_params, mscore, psnr
from .model import (EXPECTED_PARAM_COUNT, build_rpn, despeckle, load_checkpoint,
                    mac_count, save_checkpoint, Checkpoint)
from .speckle import SpeckleSpec, make_scene, trigamma
from .tensor import Tensor, no_grad
from .training import TrainConfig, select_target_variance, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_IO = 3


def _worker_count() -> int:
    cap = os.environ.get("SONOSPECK_THREADS")
    if cap:
        try:
            n = int(cap)
        except ValueError:
            raise ValidationError(f"SONOSPECK_THREADS must be an integer, got {cap!r}")
        if n < 1:
            raise ValidationError("SONOSPECK_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; bad flags are validation
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    p.add_argument("--config", help="key = value config file")
    for key in keys:
        _, _, _, desc = SCHEMA[key]
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="V", help=desc)


def _config_from_args(args, keys) -> RunConfig:
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    cfg = build_config(getattr(args, "config", None), overrides)
    for line in cfg.echo_lines():
        print(line)
    return cfg


def _list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".pgm"))
    if not files:
        raise ValidationError(f"no .png/.pgm images found in {directory}")
    return files


# ---------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    keys = ["scene_kind", "scene_size", "scene_contrast", "scene_count", "looks",
            "seed", "output_dir"]
    cfg = _config_from_args(args, keys)
    out = Path(cfg["output_dir"] or "scenes")
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i in range(cfg["scene_count"]):
            scene_seed = cfg["seed"] + i
            scene = make_scene(cfg["scene_kind"], cfg["scene_size"],
                               cfg["scene_contrast"], cfg["looks"], scene_seed)
            clean_path = out / f"clean_{i:04d}.png"
            noisy_path = out / f"noisy_{i:04d}.png"
            save_image(clean_path, scene.clean)
            save_image(noisy_path, scene.noisy)
            fh.write(json.dumps({
                "id": i, "clean_path": clean_path.name, "noisy_path": noisy_path.name,
                "looks": cfg["looks"], "seed": scene_seed,
            }) + "\n")
    print(f"wrote {cfg['scene_count']} scene pairs and manifest to {out}")
    return EXIT_OK


def _load_corpus(corpus_dir, prefix="noisy") -> list[Tensor]:
    files = [p for p in _list_images(corpus_dir) if p.name.startswith(prefix)]
    if not files:
        files = _list_images(corpus_dir)
    return [load_image(p) for p in files]


def cmd_train(args) -> int:
    keys = ["corpus_dir", "output_dir", "target_looks", "target_variance",
            "beta0", "horizon", "gamma", "lambda", "sigma_edge", "median_window", "eps",
            "patch_size", "batch_size", "epochs", "learning_rate", "weight_decay",
            "adam_beta1", "adam_beta2", "adam_eps", "augment_prob", "augment_looks",
            "seed", "checkpoint_every", "deterministic", "steps_per_epoch"]
    cfg = _config_from_args(args, keys)
    if not cfg["corpus_dir"]:
        raise ValidationError("corpus_dir is required for train")
    corpus = _load_corpus(cfg["corpus_dir"])
    train_cfg = cfg.train_config()
    if args.no_augment:
        train_cfg = replace(train_cfg, augment_prob=0.0)
    out = Path(cfg["output_dir"] or "run")
    result = train(corpus, train_cfg, cfg.loss_config(), cfg.speckle_spec(), out_dir=out)
    final = result.checkpoints[-1] if result.checkpoints else None
    print(f"trained {train_cfg.epochs} epochs; metrics at {result.metrics_path}; "
          f"final checkpoint {final}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    keys = ["checkpoint", "output_dir", "eps"]
    cfg = _config_from_args(args, keys)
    if not cfg["checkpoint"]:
        raise ValidationError("checkpoint is required for denoise")
    params = load_checkpoint(cfg["checkpoint"]).params
    inp = Path(args.input)
    files = [inp] if inp.is_file() else _list_images(inp)
    out = Path(cfg["output_dir"] or "denoised")
    out.mkdir(parents=True, exist_ok=True)

    def run_one(path: Path):
        y = load_image(path)
        with no_grad():
            x_hat, r = despeckle(params, y, cfg["eps"])
        save_image(out / path.name, x_hat)
        rd = r.data
        return (path.name, float(rd.mean()), float(rd.var()), float(np.abs(rd).max()))

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        rows = list(pool.map(run_one, files))
    stats_path = out / "residual_stats.csv"
    with open(stats_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "r_mean", "r_var", "r_absmax"])
        w.writerows(sorted(rows))
    print(f"denoised {len(files)} images into {out} (residual stats: {stats_path})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    keys = ["looks", "block_size", "tol_enl", "tol_mu", "output_dir"]
    cfg = _config_from_args(args, keys)
    noisy_files = _list_images(args.noisy)
    denoised_dir = Path(args.denoised)
    clean_dir = Path(args.clean) if args.clean else None
    out = Path(cfg["output_dir"] or ".")
    out.mkdir(parents=True, exist_ok=True)

    def run_one(path: Path):
        noisy = load_image(path)
        denoised_path = denoised_dir / path.name
        if not denoised_path.exists():
            raise ValidationError(f"no denoised counterpart for {path.name}")
        den = load_image(denoised_path)
        rep = mscore(noisy, den, cfg["looks"], cfg["block_size"], cfg["tol_enl"], cfg["tol_mu"])
        row = [path.name, repr(rep.m_value), rep.n_blocks_selected,
               repr(epi(noisy, den, "horizontal")), repr(epi(noisy, den, "vertical"))]
        if clean_dir is not None:
            clean_path = clean_dir / path.name.replace("noisy", "clean")
            if not clean_path.exists():
                clean_path = clean_dir / path.name
            row.append(repr(psnr(load_image(clean_path), den)))
        return row

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        rows = list(pool.map(run_one, noisy_files))
    csv_path = out / "evaluation.csv"
    header = ["image_id", "m_value", "n_selected", "epi_hd", "epi_vd"]
    if clean_dir is not None:
        header.append("psnr")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(sorted(rows))
    print(f"evaluation written to {csv_path}")
    return EXIT_OK


def cmd_sweep_variance(args) -> int:
    keys = ["corpus_dir", "output_dir", "beta0", "horizon", "gamma", "lambda",
            "sigma_edge", "median_window", "eps", "patch_size", "batch_size",
            "learning_rate", "weight_decay", "augment_prob", "augment_looks", "seed",
            "steps_per_epoch", "block_size", "tol_enl", "tol_mu"]
    cfg = _config_from_args(args, keys)
    if not cfg["corpus_dir"]:
        raise ValidationError("corpus_dir is required for sweep-variance")
    corpus = _load_corpus(cfg["corpus_dir"])
    spec, rows = select_target_variance(
        corpus, cfg.train_config(), cfg.loss_config(),
        val_fraction=args.val_fraction,
        looks_range=(args.looks_min, args.looks_max),
        sweep_epochs=args.sweep_epochs,
    )
    out = Path(cfg["output_dir"] or ".")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "variance_sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["looks", "sigma2_tgt", "mean_mscore"])
        for row in rows:
            w.writerow([row["looks"], repr(row["sigma2_tgt"]), repr(row["mean_mscore"])])
    print(f"selected looks = {spec.looks:g} (sigma2_tgt = {spec.sigma2_tgt:.4f}); "
          f"table at {csv_path}")
    return EXIT_OK


def cmd_sweep_lambda(args) -> int:
    keys = ["corpus_dir", "output_dir", "target_looks", "target_variance", "beta0",
            "horizon", "gamma", "sigma_edge", "median_window", "eps", "patch_size",
            "batch_size", "epochs", "learning_rate", "weight_decay", "augment_prob",
            "augment_looks", "seed", "steps_per_epoch", "block_size", "tol_enl", "tol_mu"]
    cfg = _config_from_args(args, keys)
    if not cfg["corpus_dir"]:
        raise ValidationError("corpus_dir is required for sweep-lambda")
    lambdas = [float(x) for x in args.lambdas.split(",") if x]
    if not lambdas:
        raise ValidationError("empty lambda grid")
    corpus = _load_corpus(cfg["corpus_dir"])
    spec = cfg.speckle_spec()
    rows = []
    for lam in lambdas:
        loss_cfg = cfg.loss_config().with_lambda(lam)
        result = train(corpus, cfg.train_config(), loss_cfg, spec, out_dir=None)
        m = mean_mscore_for_params(result.params, [img.data for img in corpus],
                                   nominal_looks=spec.looks,
                                   block_size=cfg["block_size"],
                                   tol_enl=cfg["tol_enl"], tol_mu=cfg["tol_mu"])
        rows.append((lam, m))
        print(f"lambda = {lam:g}: mean M = {m:.4f}")
    out = Path(cfg["output_dir"] or ".")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "lambda_sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "mean_mscore"])
        for lam, m in rows:
            w.writerow([repr(lam), repr(m)])
    print(f"table at {csv_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gc.full_suite(seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_bench(args) -> int:
    params = build_rpn(args.seed)
    rep = bench_throughput(params, args.height, args.width, args.iterations)
    print(f"input {rep.height}x{rep.width}, {rep.iterations} iterations")
    print(f"throughput: {rep.images_per_sec:.2f} images/sec on {rep.hardware}")
    print(f"analytic MACs per image: {rep.macs / 1e9:.3f} G")
    return EXIT_OK


def cmd_info(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"checkpoint: {args.checkpoint}")
    print(f"parameters: {ckpt.params.count()}")
    print(f"epoch: {ckpt.epoch}")
    if ckpt.speckle:
        print(f"speckle: looks = {ckpt.speckle.get('looks'):g}, "
              f"sigma2_tgt = {ckpt.speckle.get('sigma2_tgt'):.6f}")
    if ckpt.loss_config:
        pairs = ", ".join(f"{k} = {v:g}" for k, v in sorted(ckpt.loss_config.items()))
        print(f"loss config: {pairs}")
    print(f"optimizer state: {'present' if ckpt.optimizer else 'absent'}")
    return EXIT_OK


def cmd_new(args) -> int:
    params = build_rpn(args.seed)
    save_checkpoint(args.checkpoint, Checkpoint(params=params, epoch=0))
    print(f"wrote fresh (identity) checkpoint with {params.count()} parameters "
          f"to {args.checkpoint}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sonospeck",
                     description="Self-supervised despeckling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[], help="generate synthetic scene pairs")
    _add_config_flags(p, ["scene_kind", "scene_size", "scene_contrast", "scene_count",
                          "looks", "seed", "output_dir"])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a despeckler on a noisy corpus")
    _add_config_flags(p, ["corpus_dir", "output_dir", "target_looks", "target_variance",
                          "beta0", "horizon", "gamma", "lambda", "sigma_edge",
                          "median_window", "eps", "patch_size", "batch_size", "epochs",
                          "learning_rate", "weight_decay", "adam_beta1", "adam_beta2",
                          "adam_eps", "augment_prob", "augment_looks", "seed",
                          "checkpoint_every", "deterministic", "steps_per_epoch"])
    p.add_argument("--no-augment", action="store_true",
                   help="disable speckle augmentation (ablation)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="despeckle images with a checkpoint")
    p.add_argument("input", help="image file or directory")
    _add_config_flags(p, ["checkpoint", "output_dir", "eps"])
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("evaluate", help="score denoised images against their noisy input")
    p.add_argument("--noisy", required=True, help="directory of noisy inputs")
    p.add_argument("--denoised", required=True, help="directory of despeckled outputs")
    p.add_argument("--clean", help="optional directory of clean references (adds PSNR)")
    _add_config_flags(p, ["looks", "block_size", "tol_enl", "tol_mu", "output_dir"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-variance", help="select the target variance on a validation split")
    p.add_argument("--looks-min", type=int, default=4)
    p.add_argument("--looks-max", type=int, default=20)
    p.add_argument("--sweep-epochs", type=int, default=30)
    p.add_argument("--val-fraction", type=float, default=0.1)
    _add_config_flags(p, ["corpus_dir", "output_dir", "beta0", "horizon", "gamma",
                          "lambda", "sigma_edge", "median_window", "eps", "patch_size",
                          "batch_size", "learning_rate", "weight_decay", "augment_prob",
                          "augment_looks", "seed", "steps_per_epoch", "block_size",
                          "tol_enl", "tol_mu"])
    p.set_defaults(func=cmd_sweep_variance)

    p = sub.add_parser("sweep-lambda", help="train across a structural-weight grid")
    p.add_argument("--lambdas", default="0.01,0.05,0.5,5.0",
                   help="comma-separated structural weights")
    _add_config_flags(p, ["corpus_dir", "output_dir", "target_looks", "target_variance",
                          "beta0", "horizon", "gamma", "sigma_edge", "median_window",
                          "eps", "patch_size", "batch_size", "epochs", "learning_rate",
                          "weight_decay", "augment_prob", "augment_looks", "seed",
                          "steps_per_epoch", "block_size", "tol_enl", "tol_mu"])
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="inference throughput and MAC accounting")
    p.add_argument("--height", type=int, default=160)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("info", help="inspect a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("new", help="write a fresh identity-despeckler checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_new)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
