"""Experiment harnesses: evaluation, method comparison, and ablation grids.

Every report embeds its full config echo plus a content digest of the
input manifest, carries no timestamps, and is written both as JSON and
as a CSV table, so identical (config, seed) reruns are bit-identical
and plots are regenerated from records rather than hand-copied.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .baselines import interpolation_inpaint
from .errors import CheckpointError, ConfigError
from .masking import apply_mask, center_mask, partition, upsample_mask
from .metrics import EvalConfig, MetricsReport, evaluate_pairs
from .phantom import CALCIUM_THRESHOLD_HU, manifest_digest
from .training import (
    RunSpec,
    inpaint,
    load_checkpoint,
    run_training,
    smallest_covering_center_cube,
)
from .volume import WindowSpec, window_normalize

log = logging.getLogger(__name__)


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def _eval_config(cfg: dict) -> EvalConfig:
    window = WindowSpec(**cfg.get("window", {}))
    ev = cfg.get("eval", {})
    return EvalConfig(
        window=window,
        lumen_threshold=ev.get("lumen_threshold", EvalConfig().lumen_threshold),
        ssim_window=ev.get("ssim_window", EvalConfig().ssim_window),
        peak=ev.get("peak", EvalConfig().peak),
    )


def make_model_repair(checkpoint_path, window: WindowSpec, threshold_hu: float, token_edge: int):
    """Repair callable backed by a trained network's inpainting path."""
    if checkpoint_path is None:
        raise CheckpointError("method 'model' needs a checkpoint path (--checkpoint)")
    model, _ = load_checkpoint(checkpoint_path)
    model.eval()

    def repair(corrupted, rec):
        return inpaint(
            model, corrupted, calcium_threshold_hu=threshold_hu, window=window,
            token_edge=token_edge,
        ).repaired.values

    return repair


def make_interp_repair(window: WindowSpec, threshold_hu: float, token_edge: int):
    """Repair callable using cubic-spline filling of the same center-cube mask."""

    def repair(corrupted, rec):
        normalized = window_normalize(corrupted, window)
        calcium = corrupted.values >= threshold_hu
        if not calcium.any():
            return normalized.values
        grid = partition(normalized.dims[0], token_edge)
        cube = smallest_covering_center_cube(grid, calcium)
        voxel_mask = upsample_mask(center_mask(grid, cube))
        return interpolation_inpaint(normalized.values, voxel_mask)

    return repair


def make_identity_repair(window: WindowSpec):
    """No-op repair: the normalized corrupted patch itself (corruption floor)."""

    def repair(corrupted, rec):
        return window_normalize(corrupted, window).values

    return repair


def build_repair(method: str, cfg: dict, checkpoint=None):
    window = WindowSpec(**cfg.get("window", {}))
    threshold = cfg.get("calcium_threshold_hu", CALCIUM_THRESHOLD_HU)
    token_edge = cfg.get("masking", {}).get("token_edge", 4)
    if method == "model":
        return make_model_repair(checkpoint, window, threshold, token_edge)
    if method == "interp":
        return make_interp_repair(window, threshold, token_edge)
    if method == "none":
        return make_identity_repair(window)
    raise ConfigError(f"unknown repair method {method!r} (expected model|interp|none)")


def run_evaluate(cfg: dict, method: str, checkpoint=None, out_dir=None) -> MetricsReport:
    """Score one repair method on the manifest's test pairs; writes report files."""
    manifest = cfg["manifest"]
    repair = build_repair(method, cfg, checkpoint)
    report = evaluate_pairs(manifest, repair, _eval_config(cfg), method=method)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_json(out_dir / f"report_{method}.json")
        report.write_csv(out_dir / f"report_{method}.csv")
    return report


def _write_table(path, columns: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        w.writerows(rows)


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _agg_cell(report: MetricsReport) -> dict:
    return {k: report.aggregates[k] for k in ("psnr_db", "ssim", "dsc", "hd95_mm")}


def run_compare(cfg: dict, out_dir=None) -> dict:
    """Three-way comparison: interpolation vs scratch vs pretrained-finetuned."""
    out_dir = Path(out_dir or cfg.get("out_dir", "compare_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    payload_rows = {}
    methods = [
        ("interp", "interp", None),
        ("scratch_finetuned", "model", cfg.get("scratch_checkpoint")),
        ("pretrained_finetuned", "model", cfg.get("pretrained_checkpoint")),
    ]
    for label, method, ckpt in methods:
        if method == "model" and ckpt is None:
            raise CheckpointError(f"compare config missing checkpoint for {label}")
        report = evaluate_pairs(
            cfg["manifest"], build_repair(method, cfg, ckpt), _eval_config(cfg), method=label
        )
        payload_rows[label] = {"aggregates": _agg_cell(report), "samples": report.samples}
        agg = report.aggregates
        rows.append(
            [
                label,
                _cell(agg["psnr_db"]["mean"]),
                _cell(agg["ssim"]["mean"]),
                _cell(agg["dsc"]["mean"]),
                _cell(agg["hd95_mm"]["mean"]),
            ]
        )
    payload = {
        "kind": "compare",
        "config": cfg,
        "manifest_digest": manifest_digest(cfg["manifest"]),
        "rows": payload_rows,
    }
    _write_json(out_dir / "compare.json", payload)
    _write_table(out_dir / "compare.csv", ["method", "PSNR", "SSIM", "DSC", "HD95_mm"], rows)
    return payload


def _cell(x) -> str:
    return "identical" if x is None else f"{x:.4f}"


def _run_spec_from(cfg: dict, overrides: dict) -> RunSpec:
    base = {
        "manifest": cfg["manifest"],
        "window": cfg.get("window", {}),
        "model": cfg.get("model", {}),
        "loss": cfg.get("loss", {}),
        "masking": cfg.get("masking", {}),
    }
    base.update(overrides)
    return RunSpec.from_dict(base)


def _finetune_and_eval(cfg: dict, init_ckpt, seed: int, fraction: float, out_dir: Path, tag: str) -> dict:
    """One grid unit: finetune (or scratch) then evaluate; returns aggregates."""
    spec = _run_spec_from(
        cfg,
        {
            "mode": "finetune" if init_ckpt is not None else "scratch",
            "init_checkpoint": str(init_ckpt) if init_ckpt is not None else None,
            "seed": seed,
            "label_fraction": fraction,
            "out_dir": str(out_dir / tag),
            "optimizer": cfg.get("finetune_optimizer", {}),
        },
    )
    result = run_training(spec)
    report = evaluate_pairs(
        cfg["manifest"],
        build_repair("model", cfg, result.checkpoint),
        _eval_config(cfg),
        method=tag,
    )
    return {
        "tag": tag,
        "seed": seed,
        "fraction": fraction,
        "init": "pretrained" if init_ckpt is not None else "scratch",
        "final_val_mse": result.final_val_mse,
        "aggregates": _agg_cell(report),
        "median_psnr_db": report.aggregates["psnr_db"]["median"],
    }


def _pretrain_once(cfg: dict, ratio: float, seed: int, out_dir: Path, tag: str):
    masking = dict(cfg.get("masking", {}))
    masking["ratio"] = ratio
    spec = _run_spec_from(
        cfg,
        {
            "mode": "pretrain",
            "seed": seed,
            "out_dir": str(out_dir / tag),
            "optimizer": cfg.get("pretrain_optimizer", {}),
            "masking": masking,
        },
    )
    return run_training(spec)


def _run_units(units: list[tuple], jobs: int) -> list[dict]:
    """Run grid units serially or in a process pool; output order is fixed."""
    if jobs <= 1:
        return [_finetune_and_eval(*u) for u in units]
    import multiprocessing as mp

    with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn")) as pool:
        return list(pool.map(_unit_star, units))


def _unit_star(u):
    return _finetune_and_eval(*u)


def run_ablate_mask_ratio(cfg: dict, out_dir=None, jobs: int = 1) -> dict:
    """Pretrain + finetune + evaluate per masking ratio; emits a ratio table."""
    out_dir = Path(out_dir or cfg.get("out_dir", "ablation_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    ratios = cfg.get("ratios", [0.2, 0.4, 0.6, 0.75, 0.8])
    seeds = cfg.get("seeds", [1, 2, 3])
    base_seed = cfg.get("base_seed", 0)

    results = []
    for ratio in ratios:
        if ratio >= 1.0:
            results.append(
                {
                    "ratio": ratio,
                    "error": "rejected: masking ratio 1.0 leaves no visible context to reconstruct from",
                }
            )
            continue
        tag = f"rho{int(round(ratio * 100)):03d}"
        pre = _pretrain_once(cfg, ratio, base_seed, out_dir, f"pre_{tag}")
        units = [
            (cfg, pre.checkpoint, seed, 1.0, out_dir, f"ft_{tag}_s{seed}") for seed in seeds
        ]
        cells = _run_units(units, jobs)
        medians = [c["median_psnr_db"] for c in cells]
        results.append(
            {
                "ratio": ratio,
                "seeds": seeds,
                "per_seed": cells,
                "median_psnr_db": float(np.median(medians)),
                "median_ssim": float(np.median([c["aggregates"]["ssim"]["median"] for c in cells])),
                "median_dsc": float(np.median([c["aggregates"]["dsc"]["median"] for c in cells])),
                "median_hd95_mm": float(
                    np.median([c["aggregates"]["hd95_mm"]["median"] for c in cells])
                ),
            }
        )
        log.info("ablation ratio %.2f done", ratio)

    payload = {
        "kind": "ablate_mask_ratio",
        "config": cfg,
        "manifest_digest": manifest_digest(cfg["manifest"]),
        "results": results,
    }
    _write_json(out_dir / "ablation.json", payload)
    rows = []
    for r in results:
        if "error" in r:
            rows.append([f"{r['ratio']:.2f}", "rejected", "", "", ""])
        else:
            rows.append(
                [
                    f"{r['ratio']:.2f}",
                    f"{r['median_psnr_db']:.4f}",
                    f"{r['median_ssim']:.4f}",
                    f"{r['median_dsc']:.4f}",
                    f"{r['median_hd95_mm']:.4f}",
                ]
            )
    _write_table(out_dir / "ablation.csv", ["ratio", "PSNR", "SSIM", "DSC", "HD95_mm"], rows)
    return payload


def run_data_efficiency(cfg: dict, out_dir=None, jobs: int = 1) -> dict:
    """Finetune at several label fractions from pretrained vs scratch inits."""
    out_dir = Path(out_dir or cfg.get("out_dir", "data_efficiency_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    fractions = cfg.get("fractions", [0.1, 0.25, 0.5, 1.0])
    seeds = cfg.get("seeds", [1, 2, 3])

    pre_ckpt = cfg.get("pretrain_checkpoint")
    if pre_ckpt is None:
        ratio = cfg.get("masking", {}).get("ratio", 0.6)
        pre = _pretrain_once(cfg, ratio, cfg.get("base_seed", 0), out_dir, "pretrain")
        pre_ckpt = pre.checkpoint

    units, labels = [], []
    for fraction in fractions:
        for init_name, init in (("pretrained", pre_ckpt), ("scratch", None)):
            for seed in seeds:
                tag = f"{init_name}_f{int(round(fraction * 100)):03d}_s{seed}"
                units.append((cfg, init, seed, fraction, out_dir, tag))
                labels.append((fraction, init_name, seed))
    cells = _run_units(units, jobs)

    grid = {}
    for (fraction, init_name, seed), cell in zip(labels, cells):
        key = f"{init_name}@{fraction}"
        grid.setdefault(
            key, {"fraction": fraction, "init": init_name, "per_seed": [], "seeds": []}
        )
        grid[key]["per_seed"].append(cell["median_psnr_db"])
        grid[key]["seeds"].append(seed)
    rows = []
    for key, cell in grid.items():
        vals = np.asarray(cell["per_seed"], dtype=float)
        cell["median_psnr_db"] = float(np.median(vals))
        cell["min_psnr_db"] = float(vals.min())
        cell["max_psnr_db"] = float(vals.max())
        rows.append(
            [
                cell["init"],
                f"{cell['fraction']:.2f}",
                f"{cell['median_psnr_db']:.4f}",
                f"{cell['min_psnr_db']:.4f}",
                f"{cell['max_psnr_db']:.4f}",
            ]
        )

    payload = {
        "kind": "data_efficiency",
        "config": cfg,
        "manifest_digest": manifest_digest(cfg["manifest"]),
        "cells": grid,
        "runs": cells,
    }
    _write_json(out_dir / "data_efficiency.json", payload)
    _write_table(
        out_dir / "data_efficiency.csv",
        ["init", "fraction", "median_PSNR", "min_PSNR", "max_PSNR"],
        rows,
    )
    return payload
