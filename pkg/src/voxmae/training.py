"""Training loops (masked pretraining and center-mask finetuning) and inference.

Determinism contract: every stochastic choice (data order, augmentation,
mask draw, model init) derives from (run seed, stream tag, epoch, index)
via SeedSequence, so epochs are stateless; resuming from a checkpoint
reproduces the loss trace of an uninterrupted run, and reruns with the
same seed are bit-reproducible in serial mode.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError, DataError, TrainingDivergedError
from .losses import LossConfig, masked_mse, total_loss
from .masking import (
    PatchFrame,
    TokenGridSpec,
    TokenMask,
    apply_mask,
    center_mask,
    partition,
    random_mask,
    upsample_mask,
    vessel_aware_mask,
)
from .model import DenseUnet, DenseUnetConfig, build_model, reconstruct
from .phantom import CALCIUM_THRESHOLD_HU, Centerline, read_manifest, record_centerline
from .volume import Volume, WindowSpec, window_normalize

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# SeedSequence stream tags
_ORDER, _AUG, _MASK, _INIT = 1, 2, 3, 4
_VAL_MASK_TAG = 0x564C  # fixed stream, independent of the run seed


def _stream_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW with cosine decay and linear warm-up."""

    lr: float = 1.5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_epochs: int = 5
    epochs: int = 100
    batch_size: int = 16
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = final only

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"warmup epochs {self.warmup_epochs} outside [0, {self.epochs}]")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class MaskingConfig:
    strategy: str = "random"  # random | vessel
    ratio: float = 0.6
    beta: float = 0.7
    token_edge: int = 4
    center_cube: int = 4

    def __post_init__(self):
        if self.strategy not in ("random", "vessel"):
            raise ConfigError(f"unknown masking strategy {self.strategy!r}")


@dataclass
class RunSpec:
    """Everything one training run needs; loadable from a YAML/JSON mapping."""

    mode: str  # pretrain | finetune | scratch
    manifest: str
    out_dir: str
    seed: int = 0
    label_fraction: float = 1.0
    init_checkpoint: str | None = None
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    window: WindowSpec = field(default_factory=WindowSpec)
    model: DenseUnetConfig = field(default_factory=DenseUnetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune", "scratch"):
            raise ConfigError(f"unknown run mode {self.mode!r}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError(f"label fraction must be in (0, 1], got {self.label_fraction}")
        if self.mode == "scratch" and self.init_checkpoint is not None:
            raise ConfigError("scratch mode forbids an init checkpoint")

    @classmethod
    def from_dict(cls, data: dict) -> "RunSpec":
        data = dict(data)
        sections = (
            ("masking", MaskingConfig),
            ("window", WindowSpec),
            ("model", DenseUnetConfig),
            ("loss", LossConfig),
            ("optimizer", OptimizerConfig),
        )
        try:
            for key, sub in sections:
                if key in data and isinstance(data[key], dict):
                    section = dict(data[key])
                    if "betas" in section:
                        section["betas"] = tuple(section["betas"])
                    data[key] = sub(**section)
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"bad run config: {e}") from e

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: OptimizerConfig, steps_per_epoch: int) -> float:
    """Learning rate at a global step: linear warm-up, then cosine decay.

    The cosine reaches exactly 0 at the last step (index total - 1).
    """
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        return cfg.lr * step / warmup
    span = max(total - 1 - warmup, 1)
    progress = min(max((step - warmup) / span, 0.0), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def augment(
    values: np.ndarray,
    centerline: Centerline | None,
    rng: np.random.Generator,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> tuple[np.ndarray, Centerline | None]:
    """Random 90-degree rotation about z plus a random z-axis flip.

    The centerline (patch-local mm, same spacing) is transformed
    consistently; rotations require isotropic in-plane spacing.
    """
    p = values.shape[0]
    if values.shape != (p, p, p):
        raise ValueError(f"augment expects a cubic patch, got {values.shape}")
    k = int(rng.integers(0, 4))
    flip = bool(rng.random() < 0.5)
    if k and not math.isclose(spacing[1], spacing[2]):
        raise ValueError(f"in-plane rotation needs sy == sx, got {spacing[1:]}")

    out = values
    if k:
        out = np.rot90(out, k, axes=(1, 2))
    if flip:
        out = out[::-1]
    out = np.ascontiguousarray(out)

    if centerline is None:
        return out, None

    ez, ey, ex = (p * s for s in spacing)

    def tf(pts: np.ndarray) -> np.ndarray:
        z, y, x = pts[:, 0].copy(), pts[:, 1].copy(), pts[:, 2].copy()
        if k == 1:  # index (y', x') = (P-1-x, y)
            y, x = ex - x, y
        elif k == 2:
            y, x = ey - y, ex - x
        elif k == 3:
            y, x = x, ey - y
        if flip:
            z = ez - z
        return np.stack([z, y, x], axis=1)

    return out, centerline.transformed(tf)


@dataclass
class _PatchSet:
    """Normalized patches plus their centerlines, loaded eagerly."""

    values: np.ndarray  # (N, P, P, P) float32 in [0, 1]
    centerlines: list[Centerline]
    ids: list[str]
    spacing: tuple[float, float, float]

    def __len__(self) -> int:
        return len(self.ids)


def _load_patchset(manifest_path, records, file_key: str, window: WindowSpec) -> _PatchSet:
    from .volume import load_volume

    base = Path(manifest_path).parent
    values, centerlines, ids = [], [], []
    spacing = None
    for rec in records:
        vol = load_volume(base / rec["files"][file_key])
        norm = window_normalize(vol, window)
        values.append(norm.values)
        centerlines.append(record_centerline(rec))
        ids.append(rec["id"])
        spacing = vol.spacing
    if not values:
        raise DataError("no samples matched the requested role/split")
    return _PatchSet(
        values=np.stack(values), centerlines=centerlines, ids=ids, spacing=spacing
    )


def save_checkpoint(path, model: DenseUnet, optimizer=None, epoch: int = 0, run_config: dict | None = None) -> None:
    """Serialize model parameters (and optimizer state for resumption)."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "run_config": run_config,
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: DenseUnetConfig | None = None):
    """Load a checkpoint; verifies version and parameter shapes against config.

    Returns (model, payload). The model is rebuilt from the stored config
    unless an expected config is given, in which case shapes must agree.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path}: not a voxmae checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {payload['format_version']} "
            f"unsupported (expected {CHECKPOINT_VERSION})"
        )
    config = DenseUnetConfig(**payload["model_config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"{path}: checkpoint config {config} incompatible with run config {expected_config}"
        )
    model = DenseUnet(config)
    state = payload["model_state"]
    own = model.state_dict()
    for name, tensor in own.items():
        if name not in state:
            raise CheckpointError(f"{path}: checkpoint missing tensor {name}")
        if state[name].shape != tensor.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tuple(state[name].shape)}, "
                f"model expects {tuple(tensor.shape)}"
            )
    model.load_state_dict(state)
    return model, payload


def _draw_mask(spec: RunSpec, grid: TokenGridSpec, cl: Centerline, spacing, epoch: int, idx: int) -> TokenMask:
    if spec.mode in ("finetune", "scratch"):
        return center_mask(grid, spec.masking.center_cube)
    rng = _stream_rng(spec.seed, _MASK, epoch, idx)
    if spec.masking.strategy == "vessel":
        frame = PatchFrame(origin=(0, 0, 0), spacing=spacing)
        return vessel_aware_mask(grid, cl, frame, spec.masking.ratio, spec.masking.beta, rng)
    return random_mask(grid, spec.masking.ratio, rng)


def _assemble_batch(spec: RunSpec, data: _PatchSet, indices, grid: TokenGridSpec, epoch: int):
    inputs, targets, masks = [], [], []
    for idx in indices:
        idx = int(idx)
        rng_aug = _stream_rng(spec.seed, _AUG, epoch, idx)
        values, cl = augment(data.values[idx], data.centerlines[idx], rng_aug, data.spacing)
        token_mask = _draw_mask(spec, grid, cl, data.spacing, epoch, idx)
        voxel_mask = upsample_mask(token_mask)
        masked = apply_mask(values, token_mask)
        if spec.model.use_mask_channel:
            inputs.append(np.stack([masked, voxel_mask.astype(np.float32)]))
        else:
            inputs.append(masked[None])
        targets.append(values)
        masks.append(voxel_mask)
    x = torch.from_numpy(np.stack(inputs)).to(memory_format=torch.channels_last_3d)
    y = torch.from_numpy(np.stack(targets))
    m = torch.from_numpy(np.stack(masks))
    return x, y, m


def _val_masks(spec: RunSpec, grid: TokenGridSpec, data: _PatchSet) -> list[TokenMask]:
    """Fixed per-sample validation masks, comparable across runs and epochs."""
    masks = []
    for idx in range(len(data)):
        if spec.mode in ("finetune", "scratch"):
            masks.append(center_mask(grid, spec.masking.center_cube))
        elif spec.masking.strategy == "vessel":
            frame = PatchFrame(origin=(0, 0, 0), spacing=data.spacing)
            masks.append(
                vessel_aware_mask(
                    grid,
                    data.centerlines[idx],
                    frame,
                    spec.masking.ratio,
                    spec.masking.beta,
                    _stream_rng(_VAL_MASK_TAG, idx),
                )
            )
        else:
            masks.append(random_mask(grid, spec.masking.ratio, _stream_rng(_VAL_MASK_TAG, idx)))
    return masks


def _validate(model: DenseUnet, spec: RunSpec, data: _PatchSet, masks: list[TokenMask], batch: int) -> float:
    model.eval()
    losses, weights = [], []
    with torch.no_grad():
        for start in range(0, len(data), batch):
            idxs = range(start, min(start + batch, len(data)))
            inputs, targets, vmasks = [], [], []
            for i in idxs:
                voxel_mask = upsample_mask(masks[i])
                masked = apply_mask(data.values[i], masks[i])
                if spec.model.use_mask_channel:
                    inputs.append(np.stack([masked, voxel_mask.astype(np.float32)]))
                else:
                    inputs.append(masked[None])
                targets.append(data.values[i])
                vmasks.append(voxel_mask)
            x = torch.from_numpy(np.stack(inputs)).to(memory_format=torch.channels_last_3d)
            pred = model(x)[:, 0]
            mse = masked_mse(pred, torch.from_numpy(np.stack(targets)), torch.from_numpy(np.stack(vmasks)))
            losses.append(float(mse))
            weights.append(len(vmasks))
    model.train()
    return float(np.average(losses, weights=weights))


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    epochs_run: int
    steps: int
    first_val_mse: float
    final_val_mse: float


def _select_records(spec: RunSpec, records: list[dict]):
    if spec.mode == "pretrain":
        train = [r for r in records if r["role"] == "healthy" and r["split"] == "train"]
        val = [r for r in records if r["role"] == "healthy" and r["split"] == "val"]
        key = "clean"
    else:
        pairs = [r for r in records if r["role"] == "calcified_pair" and r["split"] == "train"]
        n_use = math.ceil(round(spec.label_fraction * len(pairs), 9))
        train = pairs[:n_use]
        # held-out healthy val patches, center-masked, gauge cube reconstruction
        val = [r for r in records if r["role"] == "healthy" and r["split"] == "val"]
        key = "clean"
    if not train:
        raise DataError(f"manifest has no training samples for mode {spec.mode!r}")
    return train, val, key


def run_training(spec: RunSpec, resume_from=None) -> TrainResult:
    """Execute one training run per the spec; returns paths and val losses.

    ``finetune`` mode initializes from ``spec.init_checkpoint``; ``scratch``
    is the same loop with random init. Aborts with diagnostics if the loss
    becomes non-finite.
    """
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = spec.optimizer
    torch.manual_seed(int(_stream_rng(spec.seed, _INIT).integers(2**62)))

    header, records = read_manifest(spec.manifest)
    train_recs, val_recs, file_key = _select_records(spec, records)
    train_set = _load_patchset(spec.manifest, train_recs, file_key, spec.window)
    val_set = _load_patchset(spec.manifest, val_recs, "clean", spec.window) if val_recs else None

    p = spec.model.patch_edge
    if train_set.values.shape[1:] != (p, p, p):
        raise DataError(
            f"dataset patches are {train_set.values.shape[1:]}, model expects {(p, p, p)}"
        )
    grid = partition(p, spec.masking.token_edge)

    if spec.mode == "finetune":
        if spec.init_checkpoint is None:
            raise ConfigError("finetune mode requires an init checkpoint (or use scratch mode)")
        model, _ = load_checkpoint(spec.init_checkpoint, expected_config=spec.model)
    else:
        model = build_model(spec.model, seed=int(_stream_rng(spec.seed, _INIT, 1).integers(2**31)))
    model = model.to(memory_format=torch.channels_last_3d)
    model.train()

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, betas=cfg.betas
    )

    start_epoch = 0
    if resume_from is not None:
        resumed, payload = load_checkpoint(resume_from, expected_config=spec.model)
        model.load_state_dict(resumed.state_dict())
        model = model.to(memory_format=torch.channels_last_3d)
        if payload["optimizer_state"] is None:
            raise CheckpointError(f"{resume_from} holds no optimizer state, cannot resume")
        optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"]

    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    val_masks = _val_masks(spec, grid, val_set) if val_set is not None else None
    log_path = out_dir / "train_log.jsonl"
    log_file = open(log_path, "a" if resume_from is not None else "w")

    first_val = math.nan
    final_val = math.nan
    global_step = start_epoch * steps_per_epoch
    t0 = time.monotonic()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = _stream_rng(spec.seed, _ORDER, epoch).permutation(n)
            epoch_losses = []
            for start in range(0, n, cfg.batch_size):
                batch_idx = order[start : start + cfg.batch_size]
                x, y, m = _assemble_batch(spec, train_set, batch_idx, grid, epoch)
                lr = lr_at(global_step, cfg, steps_per_epoch)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                pred = model(x)[:, 0]
                loss, mse, edge = total_loss(pred, y, m, spec.loss)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {global_step} (epoch {epoch}): "
                        f"lr={lr:.3e} mse={float(mse):.6g} edge={float(edge):.6g}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                log_file.write(
                    json.dumps(
                        {
                            "type": "step",
                            "step": global_step,
                            "epoch": epoch,
                            "lr": lr,
                            "mse": float(mse),
                            "edge": float(edge),
                            "total": float(loss),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                epoch_losses.append(float(loss))
                global_step += 1

            val_mse = (
                _validate(model, spec, val_set, val_masks, cfg.batch_size)
                if val_set is not None
                else math.nan
            )
            if epoch == start_epoch:
                first_val = val_mse
            final_val = val_mse
            log_file.write(
                json.dumps(
                    {
                        "type": "epoch",
                        "epoch": epoch,
                        "step": global_step,
                        "train_total": float(np.mean(epoch_losses)),
                        "val_mse": val_mse,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
            log_file.flush()
            log.info(
                "%s epoch %d/%d  train %.5f  val %.5f  (%.1fs)",
                spec.mode,
                epoch + 1,
                cfg.epochs,
                float(np.mean(epoch_losses)),
                val_mse,
                time.monotonic() - t0,
            )
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_ep{epoch + 1:04d}.pt",
                    model,
                    optimizer,
                    epoch + 1,
                    spec.to_dict(),
                )
    finally:
        log_file.close()

    final_path = out_dir / "checkpoint_final.pt"
    save_checkpoint(final_path, model, optimizer, cfg.epochs, spec.to_dict())
    return TrainResult(
        checkpoint=final_path,
        log_path=log_path,
        epochs_run=cfg.epochs - start_epoch,
        steps=global_step,
        first_val_mse=first_val,
        final_val_mse=final_val,
    )


def pretrain(spec: RunSpec, resume_from=None) -> TrainResult:
    if spec.mode != "pretrain":
        raise ConfigError(f"pretrain called with mode {spec.mode!r}")
    return run_training(spec, resume_from=resume_from)


def finetune(spec: RunSpec, init_checkpoint=None) -> TrainResult:
    """Finetune from a pretrained checkpoint, or from scratch when none given."""
    if init_checkpoint is not None:
        spec.mode = "finetune"
        spec.init_checkpoint = str(init_checkpoint)
    elif spec.init_checkpoint is None:
        spec.mode = "scratch"
    else:
        spec.mode = "finetune"
    return run_training(spec)


@dataclass
class InpaintResult:
    repaired: Volume  # normalized
    status: str  # repaired | no_calcium
    cube_tokens: int | None
    mask: TokenMask | None


def smallest_covering_center_cube(grid: TokenGridSpec, calcium_voxels: np.ndarray) -> int:
    """Smallest C whose centered C^3 token cube covers every calcium voxel."""
    t = grid.token_edge
    g = grid.grid_edge
    tokens = np.unique(np.argwhere(calcium_voxels) // t, axis=0)
    for c in range(1, g + 1):
        lo = (g - c) // 2
        if np.all((tokens >= lo) & (tokens < lo + c)):
            return c
    return g


def inpaint(
    model: DenseUnet,
    corrupted: Volume,
    calcium_threshold_hu: float = CALCIUM_THRESHOLD_HU,
    window: WindowSpec = WindowSpec(),
    token_edge: int = 4,
) -> InpaintResult:
    """Detect calcium, center-mask it, reconstruct, and composite.

    The mask is the smallest token-aligned center cube covering the
    super-threshold region; visible voxels pass through unchanged. When no
    voxel reaches the threshold the normalized input is returned as-is.
    """
    normalized = window_normalize(corrupted, window)
    calcium = corrupted.values >= calcium_threshold_hu
    if not calcium.any():
        return InpaintResult(repaired=normalized, status="no_calcium", cube_tokens=None, mask=None)

    grid = partition(normalized.dims[0], token_edge)
    cube = smallest_covering_center_cube(grid, calcium)
    mask = center_mask(grid, cube)
    voxel_mask = upsample_mask(mask)
    masked = apply_mask(normalized.values, mask)
    recon = reconstruct(model, masked, voxel_mask)
    composite = np.where(voxel_mask, recon, normalized.values).astype(np.float32)
    return InpaintResult(
        repaired=Volume(composite, corrupted.spacing, normalized=True),
        status="repaired",
        cube_tokens=cube,
        mask=mask,
    )
