"""Synthetic vessel phantoms with known centerlines and simulated calcification.

Stands in for a clinical dataset: every generated patch comes with its
centerline, and calcified patches come as (clean, corrupted) pairs with
a known super-threshold calcium region, so pixel-wise ground truth
exists for evaluation. All generators are pure functions of
(spec, seed); datasets use per-sample derived seeds so serial and
parallel builds are byte-identical.

Coordinates follow the array convention: points are (z, y, x) in mm,
voxel centers sit at (index + 0.5) * spacing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .errors import DataError
from .volume import Volume, extract_patch, save_volume

MANIFEST_VERSION = 1
CALCIUM_THRESHOLD_HU = 500.0  # standard high-attenuation cutoff used across the pipeline


@dataclass
class Centerline:
    """Ordered 3D polyline with a per-point lumen radius."""

    points: np.ndarray  # (N, 3) mm, (z, y, x)
    radii: np.ndarray  # (N,) mm

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).ravel()
        if len(self.points) < 2:
            raise ValueError("centerline needs at least 2 points")
        if len(self.radii) != len(self.points):
            raise ValueError("radii count must match point count")
        if np.any(self.radii <= 0):
            raise ValueError("radii must be positive")
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(steps == 0):
            raise ValueError("consecutive centerline points must be distinct")

    @property
    def arc_lengths(self) -> np.ndarray:
        """Cumulative arc length at each point, starting at 0."""
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    @property
    def length(self) -> float:
        return float(self.arc_lengths[-1])

    def point_at(self, arc: float) -> tuple[np.ndarray, float]:
        """Interpolated (point, radius) at an arc-length position."""
        arcs = self.arc_lengths
        if not 0.0 <= arc <= arcs[-1]:
            raise ValueError(f"arc length {arc} outside centerline extent [0, {arcs[-1]:.3f}]")
        pt = np.array([np.interp(arc, arcs, self.points[:, a]) for a in range(3)])
        r = float(np.interp(arc, arcs, self.radii))
        return pt, r

    def resample(self, step: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Linear resampling at a uniform arc step; returns (points, radii, arcs)."""
        arcs = self.arc_lengths
        n = max(2, int(np.ceil(arcs[-1] / step)) + 1)
        s = np.linspace(0.0, arcs[-1], n)
        pts = np.stack([np.interp(s, arcs, self.points[:, a]) for a in range(3)], axis=1)
        radii = np.interp(s, arcs, self.radii)
        return pts, radii, s

    def transformed(self, fn) -> "Centerline":
        """New centerline with ``fn`` applied to the (N, 3) point array."""
        return Centerline(points=fn(self.points.copy()), radii=self.radii.copy())


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and intensity model for one synthetic vessel volume."""

    dims: tuple[int, int, int] = (56, 56, 56)
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)
    lumen_hu: float = 350.0  # contrast-enhanced blood pool, below the calcium threshold
    wall_hu: float = 60.0
    background_mean_hu: float = 40.0
    background_sigma_hu: float = 20.0
    wall_thickness_mm: float = 0.6
    curvature_scale: float = 0.15  # control-point jitter as a fraction of volume extent
    radius_range: tuple[float, float] = (1.0, 2.5)
    control_points: tuple[int, int] = (4, 8)

    def __post_init__(self):
        if self.radius_range[0] <= 0 or self.radius_range[1] < self.radius_range[0]:
            raise ValueError(f"invalid radius range {self.radius_range}")
        if self.background_sigma_hu < 0:
            raise ValueError("background sigma must be >= 0")

    @property
    def extent_mm(self) -> np.ndarray:
        return np.array(self.dims, dtype=float) * np.array(self.spacing, dtype=float)


@dataclass(frozen=True)
class CalciumSpec:
    """Simulated calcification: bright blob + Gaussian blooming + overshoot."""

    peak_hu: float = 900.0
    radius_mm: float = 1.5
    blur_sigma_mm: float = 0.6
    overshoot: float = 1.5  # inflates the apparent (super-threshold) volume
    arc_offset_mm: float | None = None  # None = centerline midpoint
    threshold_hu: float = CALCIUM_THRESHOLD_HU

    def __post_init__(self):
        if self.peak_hu <= self.threshold_hu:
            raise ValueError(
                f"plaque peak {self.peak_hu} must exceed detection threshold {self.threshold_hu}"
            )
        if self.blur_sigma_mm < 0:
            raise ValueError("blur sigma must be >= 0")
        if self.overshoot < 1.0:
            raise ValueError("overshoot factor must be >= 1")


def _voxel_centers_mm(dims, spacing) -> list[np.ndarray]:
    return [(np.arange(d) + 0.5) * s for d, s in zip(dims, spacing)]


def generate_centerline(spec: PhantomSpec, rng: np.random.Generator) -> Centerline:
    """Sample a smooth vessel centerline staying clear of the volume boundary.

    A cubic spline is fit through jittered control points spread along the
    volume's longest axis; jitter shrinks and is retried until every sampled
    point keeps at least the maximum lumen radius away from all six faces.
    With curvature_scale = 0 the curve is a straight line along that axis.
    """
    extent = spec.extent_mm
    margin = spec.radius_range[1]
    lo, hi = np.full(3, margin), extent - margin
    if np.any(hi <= lo):
        raise DataError(
            f"volume extent {tuple(extent)} mm too small for margin {margin} mm"
        )
    axis = int(np.argmax(extent))
    n_ctrl = int(rng.integers(spec.control_points[0], spec.control_points[1] + 1))
    t_ctrl = np.linspace(lo[axis], hi[axis], n_ctrl)
    jitter = rng.uniform(-1.0, 1.0, size=(n_ctrl, 3))
    radii_ctrl = rng.uniform(*spec.radius_range, size=n_ctrl)

    step = 0.5 * min(spec.spacing)
    for shrink in (1.0, 0.5, 0.25, 0.1, 0.0):
        ctrl = np.empty((n_ctrl, 3))
        scale = spec.curvature_scale * shrink
        for a in range(3):
            if a == axis:
                ctrl[:, a] = t_ctrl + jitter[:, a] * scale * (hi[a] - lo[a]) * 0.25
            else:
                mid = 0.5 * (lo[a] + hi[a])
                ctrl[:, a] = mid + jitter[:, a] * scale * (hi[a] - lo[a]) * 0.5
        ctrl = np.clip(ctrl, lo, hi)
        chord = np.concatenate(
            [[0.0], np.cumsum(np.linalg.norm(np.diff(ctrl, axis=0), axis=1))]
        )
        if np.any(np.diff(chord) == 0):
            continue
        spline = CubicSpline(chord, ctrl, axis=0)
        r_spline = CubicSpline(chord, radii_ctrl)
        n = max(2, int(np.ceil(chord[-1] / step)) + 1)
        s = np.linspace(0.0, chord[-1], n)
        pts = spline(s)
        radii = np.clip(r_spline(s), *spec.radius_range)
        if np.all(pts >= lo) and np.all(pts <= hi):
            return Centerline(points=pts, radii=radii)
    raise DataError(f"could not fit a centerline with margin {margin} mm inside {tuple(extent)} mm")


def rasterize_vessel(
    cl: Centerline, spec: PhantomSpec, rng: np.random.Generator
) -> Volume:
    """Paint the tube into a HU volume: lumen, wall shell, noisy background.

    The lumen boundary gets a linear partial-volume blend over one voxel;
    outside the wall shell the volume is Gaussian background noise.
    """
    dims, spacing = spec.dims, spec.spacing
    axes_mm = _voxel_centers_mm(dims, spacing)
    zz, yy, xx = np.meshgrid(*axes_mm, indexing="ij")
    centers = np.stack([zz, yy, xx], axis=-1).reshape(-1, 3)

    pts, radii, _ = cl.resample(step=0.25 * min(spacing))
    dist, nearest = cKDTree(pts).query(centers)
    dist = dist.reshape(dims)
    r = radii[nearest].reshape(dims)

    half_voxel = 0.5 * float(np.mean(spacing))
    values = rng.normal(spec.background_mean_hu, spec.background_sigma_hu, size=dims)
    wall_outer = r + max(spec.wall_thickness_mm, half_voxel)
    values[dist <= wall_outer] = spec.wall_hu
    blend = np.clip((dist - (r - half_voxel)) / (2 * half_voxel), 0.0, 1.0)
    in_blend = dist <= r + half_voxel
    values[in_blend] = (
        spec.lumen_hu * (1.0 - blend[in_blend]) + spec.wall_hu * blend[in_blend]
    )
    return Volume(values.astype(np.float32), spacing, normalized=False)


def inject_calcification(
    vol: Volume,
    cl: Centerline,
    spec: CalciumSpec,
    rng: np.random.Generator,
) -> tuple[Volume, np.ndarray, Volume]:
    """Add a blooming calcium blob; returns (corrupted, calcium_region, clean).

    The blob has a flat core and a linear radial falloff, is blurred by the
    configured Gaussian (the halo), and scaled by the overshoot factor so the
    super-threshold region inflates beyond the nominal plaque. The plaque
    center is jittered transversally by up to a quarter of the local lumen
    radius to emulate eccentric plaques.
    """
    arc = spec.arc_offset_mm if spec.arc_offset_mm is not None else 0.5 * cl.length
    center, local_r = cl.point_at(arc)  # raises if beyond extent
    offset = rng.uniform(-1.0, 1.0, size=3)
    norm = np.linalg.norm(offset)
    if norm > 0:
        center = center + offset / norm * rng.uniform(0.0, 0.25 * local_r)

    dims, spacing = vol.dims, vol.spacing
    axes_mm = _voxel_centers_mm(dims, spacing)
    zz, yy, xx = np.meshgrid(*axes_mm, indexing="ij")
    d = np.sqrt((zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2)

    core = 0.5 * spec.radius_mm
    falloff = np.clip((spec.radius_mm - d) / (spec.radius_mm - core), 0.0, 1.0)
    blob = spec.peak_hu * falloff

    sigma_vox = [spec.blur_sigma_mm / s for s in spacing]
    halo = gaussian_filter(blob, sigma=sigma_vox) if spec.blur_sigma_mm > 0 else blob
    corrupted_values = vol.values.astype(np.float64) + spec.overshoot * halo
    corrupted = Volume(corrupted_values.astype(np.float32), spacing, normalized=False)
    calcium_region = corrupted.values >= spec.threshold_hu
    return corrupted, calcium_region, vol.copy()


def derived_rng(base_seed: int, *key: int) -> np.random.Generator:
    """Per-sample generator; stable hash of (base_seed, key) via SeedSequence."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((base_seed, *key))))


def _patch_centerline(cl: Centerline, origin, spacing, patch_edge: int) -> Centerline:
    """Re-base a centerline into patch-local mm coordinates, trimming far points."""
    shift = np.array(origin, dtype=float) * np.array(spacing, dtype=float)
    pts = cl.points - shift
    extent = patch_edge * np.array(spacing, dtype=float)
    pad = 2.0 * float(cl.radii.max())
    keep = np.all((pts >= -pad) & (pts <= extent + pad), axis=1)
    # never trim below 2 points; fall back to the full rebased polyline
    if keep.sum() < 2:
        keep[:] = True
    return Centerline(points=pts[keep], radii=cl.radii[keep])


def _nearest_voxel(point_mm, spacing) -> tuple[int, int, int]:
    return tuple(int(np.floor(p / s)) for p, s in zip(point_mm, spacing))


def build_dataset(
    n_healthy: int,
    n_calcified: int,
    out_dir,
    spec: PhantomSpec = PhantomSpec(),
    calcium: CalciumSpec = CalciumSpec(),
    base_seed: int = 0,
    patch_edge: int = 32,
    healthy_val_fraction: float = 0.125,
    calcified_test_fraction: float = 0.4,
) -> Path:
    """Generate a patch dataset and write its manifest; returns the manifest path.

    Healthy patches are centered on the centerline midpoint; calcified pairs
    are centered on the plaque, store both clean and corrupted volumes, and
    are guaranteed to contain super-threshold calcium. Splits are assigned
    deterministically by index: the tail of the healthy list is val, the tail
    of the calcified list is test.
    """
    if n_healthy < 0 or n_calcified < 0:
        raise ValueError("sample counts must be >= 0")
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)

    n_val = int(round(n_healthy * healthy_val_fraction))
    n_test = int(round(n_calcified * calcified_test_fraction))
    records = []

    for i in range(n_healthy):
        rng = derived_rng(base_seed, 0, i)
        cl = generate_centerline(spec, rng)
        vol = rasterize_vessel(cl, spec, rng)
        center_pt, _ = cl.point_at(0.5 * cl.length)
        patch = extract_patch(vol, _nearest_voxel(center_pt, spec.spacing), patch_edge)
        rel = f"volumes/h{i:05d}.vxma"
        save_volume(patch.volume, out_dir / rel)
        local_cl = _patch_centerline(cl, patch.origin, spec.spacing, patch_edge)
        records.append(
            {
                "id": f"h{i:05d}",
                "role": "healthy",
                "split": "val" if i >= n_healthy - n_val else "train",
                "seed": [base_seed, 0, i],
                "files": {"clean": rel},
                "centerline": {
                    "points": local_cl.points.tolist(),
                    "radii": local_cl.radii.tolist(),
                },
            }
        )

    for j in range(n_calcified):
        rng = derived_rng(base_seed, 1, j)
        cl = generate_centerline(spec, rng)
        vol = rasterize_vessel(cl, spec, rng)
        arc = cl.length * float(rng.uniform(0.4, 0.6))
        cspec = CalciumSpec(
            peak_hu=calcium.peak_hu,
            radius_mm=calcium.radius_mm,
            blur_sigma_mm=calcium.blur_sigma_mm,
            overshoot=calcium.overshoot,
            arc_offset_mm=arc,
            threshold_hu=calcium.threshold_hu,
        )
        corrupted, region, clean = inject_calcification(vol, cl, cspec, rng)
        if not region.any():
            raise DataError(f"calcified sample {j} produced no super-threshold voxel")
        # center the patch on the calcium blob so the center-cube mask covers it
        idx = np.argwhere(region)
        center_vox = tuple(int(v) for v in np.round(idx.mean(axis=0)))
        clean_patch = extract_patch(clean, center_vox, patch_edge)
        corr_patch = extract_patch(corrupted, center_vox, patch_edge)
        rel_clean = f"volumes/c{j:05d}_clean.vxma"
        rel_corr = f"volumes/c{j:05d}_corr.vxma"
        save_volume(clean_patch.volume, out_dir / rel_clean)
        save_volume(corr_patch.volume, out_dir / rel_corr)
        local_cl = _patch_centerline(cl, clean_patch.origin, spec.spacing, patch_edge)
        records.append(
            {
                "id": f"c{j:05d}",
                "role": "calcified_pair",
                "split": "test" if j >= n_calcified - n_test else "train",
                "seed": [base_seed, 1, j],
                "files": {"clean": rel_clean, "corrupted": rel_corr},
                "centerline": {
                    "points": local_cl.points.tolist(),
                    "radii": local_cl.radii.tolist(),
                },
                "calcium": asdict(cspec),
            }
        )

    header = {
        "type": "header",
        "version": MANIFEST_VERSION,
        "base_seed": base_seed,
        "patch_edge": patch_edge,
        "counts": {"healthy": n_healthy, "calcified": n_calcified},
        "splits": {
            "healthy_val": n_val,
            "calcified_test": n_test,
        },
        "phantom": asdict(spec),
        "calcium": asdict(calcium),
    }
    manifest_path = out_dir / "manifest.jsonl"
    try:
        with open(manifest_path, "w") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as e:
        raise DataError(f"failed writing manifest {manifest_path}: {e}") from e
    return manifest_path


def read_manifest(path) -> tuple[dict, list[dict]]:
    """Parse a manifest file into (header, sample records)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"manifest is empty: {path}")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSONL: {e}") from e
    if header.get("type") != "header":
        raise DataError(f"manifest {path} missing header record")
    return header, records


def manifest_digest(path) -> str:
    """Content digest of a manifest file, embedded in every report."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def record_centerline(rec: dict) -> Centerline:
    """Centerline of a manifest record, in patch-local mm coordinates."""
    cl = rec["centerline"]
    return Centerline(points=np.array(cl["points"]), radii=np.array(cl["radii"]))
