"""Reconstruction quality metrics: PSNR, SSIM, Dice, and HD95.

PSNR/SSIM grade voxel intensities against the clean ground truth;
Dice and HD95 grade the geometry of the segmented lumen. SSIM uses
uniform cubic windows with population statistics, shrinking the window
at volume borders. HD95 extracts 6-connectivity surface voxels and
takes the max of the two directed 95th-percentile surface distances
(linear-interpolated percentile) in mm.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .phantom import manifest_digest, read_manifest
from .volume import Volume, WindowSpec, load_volume, window_normalize

DEFAULT_LUMEN_THRESHOLD = 0.30  # halfway between wall and lumen under phantom defaults


def _as_values(vol) -> np.ndarray:
    return vol.values if isinstance(vol, Volume) else np.asarray(vol)


def psnr(pred, target, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf when the inputs are identical."""
    p, t = _as_values(pred), _as_values(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((p.astype(np.float64) - t.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _box_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the clipped cubic window at each position, via integral images."""
    s = arr.astype(np.float64)
    for axis in range(3):
        c = np.cumsum(s, axis=axis)
        n = arr.shape[axis]
        hi = np.minimum(np.arange(n) + radius, n - 1)
        lo = np.arange(n) - radius - 1
        upper = np.take(c, hi, axis=axis)
        lower = np.where(
            (lo >= 0).reshape([-1 if a == axis else 1 for a in range(3)]),
            np.take(c, np.maximum(lo, 0), axis=axis),
            0.0,
        )
        s = upper - lower
    return s


def _window_counts(shape, radius: int) -> np.ndarray:
    per_axis = [
        np.minimum(np.arange(n) + radius, n - 1) - np.maximum(np.arange(n) - radius, 0) + 1
        for n in shape
    ]
    return per_axis[0][:, None, None] * per_axis[1][None, :, None] * per_axis[2][None, None, :]


def ssim(pred, target, window_edge: int = 7, peak: float = 1.0) -> float:
    """Mean structural similarity over all voxel positions.

    Windows are uniform cubes of the given odd edge, shrunk where they
    would cross the volume border; statistics are population (divide by
    the window count). Stabilizers follow the standard (0.01 * peak)^2
    and (0.03 * peak)^2.
    """
    p, t = _as_values(pred).astype(np.float64), _as_values(target).astype(np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if window_edge % 2 != 1 or window_edge < 1:
        raise ValueError(f"window edge must be odd and positive, got {window_edge}")
    if any(window_edge > n for n in p.shape):
        raise ValueError(f"window edge {window_edge} exceeds volume dims {p.shape}")
    r = window_edge // 2
    counts = _window_counts(p.shape, r)
    mu_p = _box_sum(p, r) / counts
    mu_t = _box_sum(t, r) / counts
    var_p = _box_sum(p * p, r) / counts - mu_p**2
    var_t = _box_sum(t * t, r) / counts - mu_t**2
    cov = _box_sum(p * t, r) / counts - mu_p * mu_t
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2 * mu_p * mu_t + c1) * (2 * cov + c2)
    den = (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    return float(np.mean(num / den))


def segment_lumen(vol, threshold: float = DEFAULT_LUMEN_THRESHOLD) -> np.ndarray:
    """Threshold segmentation of the bright lumen on normalized intensities."""
    return _as_values(vol) >= threshold


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|a&b| / (|a| + |b|); two empty masks count as 1.0."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """(M, 3) indices of foreground voxels with a 6-neighbor outside the mask."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return np.argwhere(m & ~interior)


def _percentile_linear(values: np.ndarray, q: float) -> float:
    """q-th percentile with linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 1:
        return float(v[0])
    pos = (q / 100.0) * (v.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, v.size - 1)
    frac = pos - lo
    return float(v[lo] * (1.0 - frac) + v[hi] * frac)


def hd95(a: np.ndarray, b: np.ndarray, spacing) -> float:
    """95th-percentile symmetric surface distance in mm."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any():
        raise ValueError("mask 'a' is empty")
    if not b.any():
        raise ValueError("mask 'b' is empty")
    sp = np.asarray(spacing, dtype=np.float64)
    surf_a = surface_voxels(a) * sp
    surf_b = surface_voxels(b) * sp
    d_ab = cKDTree(surf_b).query(surf_a)[0]
    d_ba = cKDTree(surf_a).query(surf_b)[0]
    return max(_percentile_linear(d_ab, 95.0), _percentile_linear(d_ba, 95.0))


@dataclass(frozen=True)
class EvalConfig:
    window: WindowSpec = WindowSpec()
    lumen_threshold: float = DEFAULT_LUMEN_THRESHOLD
    ssim_window: int = 7
    peak: float = 1.0


@dataclass
class MetricsReport:
    """Per-sample and aggregate metric records for one repair method."""

    method: str
    samples: list[dict]
    aggregates: dict
    config: dict
    manifest_digest: str
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "PSNR", "SSIM", "DSC", "HD95_mm"])
            agg = self.aggregates
            w.writerow(
                [
                    self.method,
                    _fmt(agg["psnr_db"]["mean"]),
                    _fmt(agg["ssim"]["mean"]),
                    _fmt(agg["dsc"]["mean"]),
                    _fmt(agg["hd95_mm"]["mean"]),
                ]
            )


def _fmt(x) -> str:
    return "identical" if x is None else f"{x:.4f}"


def aggregate(values: list) -> dict:
    """mean/std/median over finite entries; counts flagged (None) ones."""
    finite = [v for v in values if v is not None and math.isfinite(v)]
    flagged = len(values) - len(finite)
    if not finite:
        return {"mean": None, "std": None, "median": None, "n": 0, "flagged": flagged}
    arr = np.asarray(finite, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "median": float(np.median(arr)),
        "n": len(finite),
        "flagged": flagged,
    }


def evaluate_pairs(manifest_path, repair, config: EvalConfig = EvalConfig(), method: str = "method") -> MetricsReport:
    """Repair every test pair and score it against the clean ground truth.

    ``repair`` is a callable (corrupted: Volume[HU], record) -> normalized
    (P, P, P) array. Geometric metrics run on thresholded lumen masks; a
    pair whose repaired or clean lumen mask is empty gets hd95 = None.
    """
    manifest_path = Path(manifest_path)
    header, records = read_manifest(manifest_path)
    base = manifest_path.parent
    pairs = [r for r in records if r["role"] == "calcified_pair" and r["split"] == "test"]
    if not pairs:
        raise DataError(f"manifest {manifest_path} has no test calcified pairs")

    samples = []
    for rec in pairs:
        clean = load_volume(base / rec["files"]["clean"])
        corrupted = load_volume(base / rec["files"]["corrupted"])
        clean_n = window_normalize(clean, config.window).values
        repaired = np.asarray(repair(corrupted, rec), dtype=np.float32)
        if repaired.shape != clean_n.shape:
            raise DataError(f"repair for {rec['id']} returned shape {repaired.shape}")

        p = psnr(repaired, clean_n, config.peak)
        identical = math.isinf(p)
        s = ssim(repaired, clean_n, config.ssim_window, config.peak)
        lumen_pred = segment_lumen(repaired, config.lumen_threshold)
        lumen_true = segment_lumen(clean_n, config.lumen_threshold)
        d = dice(lumen_pred, lumen_true)
        if lumen_pred.any() and lumen_true.any():
            h = hd95(lumen_pred, lumen_true, clean.spacing)
        else:
            h = None
        samples.append(
            {
                "id": rec["id"],
                "psnr_db": None if identical else p,
                "identical": identical,
                "ssim": s,
                "dsc": d,
                "hd95_mm": h,
            }
        )

    aggregates = {
        "psnr_db": aggregate([s["psnr_db"] for s in samples]),
        "ssim": aggregate([s["ssim"] for s in samples]),
        "dsc": aggregate([s["dsc"] for s in samples]),
        "hd95_mm": aggregate([s["hd95_mm"] for s in samples]),
    }
    return MetricsReport(
        method=method,
        samples=samples,
        aggregates=aggregates,
        config={
            "window": asdict(config.window),
            "lumen_threshold": config.lumen_threshold,
            "ssim_window": config.ssim_window,
            "peak": config.peak,
            "dice_both_empty": 1.0,
            "percentile": "linear interpolation",
        },
        manifest_digest=manifest_digest(manifest_path),
    )
