"""Command-line entry point for the full pipeline.

Subcommands: phantom-gen, pretrain, finetune, evaluate, compare,
ablate-mask-ratio, data-efficiency. Every command is reproducible from
(config file, seed); reports embed their config echo and the manifest
digest. VOXMAE_OUT_ROOT sets the default output root.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import experiments
from .errors import ConfigError, VoxmaeError
from .phantom import CalciumSpec, PhantomSpec, build_dataset, read_manifest
from .training import RunSpec, finetune, pretrain

log = logging.getLogger("voxmae")


def _out_root() -> Path:
    return Path(os.environ.get("VOXMAE_OUT_ROOT", "."))


def _resolve_out(arg_out, default_name: str) -> Path:
    if arg_out is not None:
        return Path(arg_out)
    return _out_root() / default_name


def _load_cfg(args) -> dict:
    if args.config is None:
        return {}
    return experiments.load_config_file(args.config)


def cmd_phantom_gen(args) -> int:
    cfg = _load_cfg(args)
    spec = PhantomSpec(**{k: _tupled(v) for k, v in cfg.get("phantom", {}).items()})
    calcium = CalciumSpec(**cfg.get("calcium", {}))
    out = _resolve_out(args.out, "dataset")
    manifest = build_dataset(
        n_healthy=args.n_healthy,
        n_calcified=args.n_calcified,
        out_dir=out,
        spec=spec,
        calcium=calcium,
        base_seed=args.seed,
        patch_edge=cfg.get("patch_edge", 32),
        healthy_val_fraction=cfg.get("healthy_val_fraction", 0.125),
        calcified_test_fraction=cfg.get("calcified_test_fraction", 0.4),
    )
    header, records = read_manifest(manifest)
    print(f"manifest: {manifest}")
    print(f"healthy: {header['counts']['healthy']}  calcified: {header['counts']['calcified']}")
    return 0


def _tupled(v):
    return tuple(v) if isinstance(v, list) else v


def _run_spec(args, mode: str) -> RunSpec:
    cfg = _load_cfg(args)
    cfg.setdefault("mode", mode)
    if args.manifest is not None:
        cfg["manifest"] = args.manifest
    if "manifest" not in cfg:
        raise ConfigError("a dataset manifest is required (--manifest or config key)")
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["out_dir"] = str(_resolve_out(args.out, f"{mode}_run"))
    return RunSpec.from_dict(cfg)


def cmd_pretrain(args) -> int:
    spec = _run_spec(args, "pretrain")
    result = pretrain(spec, resume_from=args.resume)
    print(f"checkpoint: {result.checkpoint}")
    print(f"val masked-MSE: first {result.first_val_mse:.6f}  final {result.final_val_mse:.6f}")
    return 0


def cmd_finetune(args) -> int:
    mode = "finetune" if args.init is not None else "scratch"
    spec = _run_spec(args, mode)
    if args.label_fraction is not None:
        spec.label_fraction = args.label_fraction
    result = finetune(spec, init_checkpoint=args.init)
    print(f"checkpoint: {result.checkpoint}")
    print(f"val masked-MSE: first {result.first_val_mse:.6f}  final {result.final_val_mse:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    if args.manifest is not None:
        cfg["manifest"] = args.manifest
    if "manifest" not in cfg:
        raise ConfigError("a dataset manifest is required (--manifest or config key)")
    out = _resolve_out(args.out, "evaluate_out")
    report = experiments.run_evaluate(cfg, args.method, checkpoint=args.checkpoint, out_dir=out)
    agg = report.aggregates
    print(f"method: {args.method}  pairs: {len(report.samples)}")
    for name in ("psnr_db", "ssim", "dsc", "hd95_mm"):
        mean = agg[name]["mean"]
        print(f"  {name}: {'identical' if mean is None else f'{mean:.4f}'}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    payload = experiments.run_compare(cfg, out_dir=args.out)
    print(f"report: {Path(args.out or cfg.get('out_dir', 'compare_out')) / 'compare.csv'}")
    for label, row in payload["rows"].items():
        psnr = row["aggregates"]["psnr_db"]["mean"]
        print(f"  {label}: PSNR {'identical' if psnr is None else f'{psnr:.2f}'} dB")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    payload = experiments.run_ablate_mask_ratio(cfg, out_dir=args.out, jobs=args.jobs)
    for row in payload["results"]:
        if "error" in row:
            print(f"  ratio {row['ratio']:.2f}: {row['error']}")
        else:
            print(f"  ratio {row['ratio']:.2f}: median PSNR {row['median_psnr_db']:.2f} dB")
    return 0


def cmd_data_efficiency(args) -> int:
    cfg = _load_cfg(args)
    payload = experiments.run_data_efficiency(cfg, out_dir=args.out, jobs=args.jobs)
    for key, cell in payload["cells"].items():
        print(f"  {key}: median PSNR {cell['median_psnr_db']:.2f} dB")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxmae",
        description="Masked pretraining and calcium-artifact inpainting on synthetic vessel patches.",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="run seed override")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel independent runs")
        if manifest:
            p.add_argument("--manifest", help="dataset manifest path")

    p = sub.add_parser("phantom-gen", help="generate a synthetic patch dataset")
    common(p, manifest=False)
    p.add_argument("--n-healthy", type=int, required=True)
    p.add_argument("--n-calcified", type=int, required=True)
    p.set_defaults(func=cmd_phantom_gen, seed=0)

    p = sub.add_parser("pretrain", help="self-supervised masked pretraining")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="center-mask finetuning (scratch when no --init)")
    common(p)
    p.add_argument("--init", help="pretrained checkpoint to start from")
    p.add_argument("--label-fraction", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score one repair method on test pairs")
    common(p)
    p.add_argument("--method", choices=["model", "interp", "none"], required=True)
    p.add_argument("--checkpoint", help="model checkpoint (method=model)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="interp vs scratch vs pretrained comparison table")
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate-mask-ratio", help="masking-ratio ablation grid")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("data-efficiency", help="label-fraction x init grid")
    common(p)
    p.set_defaults(func=cmd_data_efficiency)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except VoxmaeError as e:
        print(f"error ({type(e).__name__}): {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
