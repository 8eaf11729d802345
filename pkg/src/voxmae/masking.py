"""Token partitioning and masking strategies.

A patch of edge P is split into non-overlapping cubic tokens of edge T.
Masking decisions are made per token (True = masked/removed) and
upsampled back to voxels when applied. Three strategies are provided:
uniform random (pretraining), vessel-aware (biases masked tokens onto
the lumen as contiguous runs along the centerline), and a deterministic
center cube (finetuning / targeted inpainting).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import Centerline
from .volume import Patch

MASK_FILL_VALUE = 0.0  # masked voxels are zeroed, matching the multiplicative corruption


@dataclass(frozen=True)
class TokenGridSpec:
    """Partition of a cubic patch into G^3 tokens."""

    patch_edge: int
    token_edge: int

    def __post_init__(self):
        if self.token_edge < 1:
            raise ValueError(f"token edge must be >= 1, got {self.token_edge}")
        if self.patch_edge % self.token_edge != 0:
            raise ValueError(
                f"token edge {self.token_edge} does not divide patch edge {self.patch_edge}"
            )

    @property
    def grid_edge(self) -> int:
        return self.patch_edge // self.token_edge

    @property
    def token_count(self) -> int:
        return self.grid_edge**3


@dataclass
class TokenMask:
    """Per-token masking decisions over a grid (True = masked)."""

    grid: TokenGridSpec
    decisions: np.ndarray  # (G, G, G) bool

    def __post_init__(self):
        self.decisions = np.asarray(self.decisions, dtype=bool)
        g = self.grid.grid_edge
        if self.decisions.shape != (g, g, g):
            raise ValueError(
                f"decisions shape {self.decisions.shape} does not match grid edge {g}"
            )

    @property
    def masked_indices(self) -> np.ndarray:
        """Flat indices of masked tokens (row-major over the token grid)."""
        return np.flatnonzero(self.decisions.ravel())

    @property
    def masked_count(self) -> int:
        return int(self.decisions.sum())

    @property
    def ratio(self) -> float:
        return self.masked_count / self.grid.token_count


@dataclass(frozen=True)
class PatchFrame:
    """Maps patch voxel indices to the parent volume's mm coordinates."""

    origin: tuple[int, int, int]  # patch corner, parent voxel index
    spacing: tuple[float, float, float]  # (sz, sy, sx) mm

    @classmethod
    def from_patch(cls, patch: Patch) -> "PatchFrame":
        return cls(origin=patch.origin, spacing=patch.volume.spacing)

    def token_centers_mm(self, grid: TokenGridSpec) -> np.ndarray:
        """(N, 3) mm coordinates of token-cube centers, row-major token order."""
        g, t = grid.grid_edge, grid.token_edge
        ax = [
            (self.origin[a] + np.arange(g) * t + t / 2.0) * self.spacing[a]
            for a in range(3)
        ]
        zz, yy, xx = np.meshgrid(*ax, indexing="ij")
        return np.stack([zz, yy, xx], axis=-1).reshape(-1, 3)


def partition(patch_edge: int, token_edge: int) -> TokenGridSpec:
    """Build the token grid spec; rejects non-divisible edges."""
    return TokenGridSpec(patch_edge=patch_edge, token_edge=token_edge)


def _mask_from_flat(grid: TokenGridSpec, flat_indices: np.ndarray) -> TokenMask:
    g = grid.grid_edge
    decisions = np.zeros(grid.token_count, dtype=bool)
    decisions[flat_indices] = True
    return TokenMask(grid=grid, decisions=decisions.reshape(g, g, g))


def random_mask(grid: TokenGridSpec, ratio: float, rng: np.random.Generator) -> TokenMask:
    """Mask exactly floor(ratio * N) tokens, uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"masking ratio must be in [0, 1], got {ratio}")
    n_masked = int(np.floor(ratio * grid.token_count))
    chosen = rng.permutation(grid.token_count)[:n_masked]
    return _mask_from_flat(grid, chosen)


def vessel_aware_mask(
    grid: TokenGridSpec,
    centerline: Centerline,
    frame: PatchFrame,
    ratio: float,
    beta: float,
    rng: np.random.Generator,
) -> TokenMask:
    """Mask floor(ratio * N) tokens, biased onto the vessel.

    A token is a vessel token when its center lies within the local lumen
    radius plus one token edge of the centerline. min(floor(beta * ratio * N),
    |vessel tokens|) of the masked tokens are vessel tokens chosen as one
    contiguous arc-length run; the rest are drawn uniformly from the
    remaining tokens. beta = 0 (or a patch with no vessel tokens) falls
    back to plain random masking on the same rng.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"masking ratio must be in [0, 1], got {ratio}")

    n_total = int(np.floor(ratio * grid.token_count))
    quota = int(np.floor(beta * ratio * grid.token_count))
    if quota == 0:
        return random_mask(grid, ratio, rng)

    centers = frame.token_centers_mm(grid)
    samples, sample_radii, sample_arcs = centerline.resample(step=0.25)
    from scipy.spatial import cKDTree

    dist, nearest = cKDTree(samples).query(centers)
    token_mm = grid.token_edge * float(np.mean(frame.spacing))
    vessel = dist <= sample_radii[nearest] + token_mm
    vessel_idx = np.flatnonzero(vessel)
    if vessel_idx.size == 0:
        return random_mask(grid, ratio, rng)

    quota = min(quota, vessel_idx.size, n_total)
    # order vessel tokens by arc length of their nearest centerline point,
    # then take one contiguous run starting at a random offset
    order = vessel_idx[np.argsort(sample_arcs[nearest[vessel_idx]], kind="stable")]
    start = int(rng.integers(0, order.size - quota + 1))
    run = order[start : start + quota]

    remaining = np.setdiff1d(np.arange(grid.token_count), run, assume_unique=False)
    n_rest = n_total - quota
    rest = rng.permutation(remaining.size)[:n_rest]
    return _mask_from_flat(grid, np.concatenate([run, remaining[rest]]))


def center_mask(grid: TokenGridSpec, cube_tokens: int) -> TokenMask:
    """Mask the deterministic C^3 token cube at the grid center."""
    g = grid.grid_edge
    if not 1 <= cube_tokens <= g:
        raise ValueError(f"center cube of {cube_tokens} tokens exceeds grid edge {g}")
    lo = (g - cube_tokens) // 2
    decisions = np.zeros((g, g, g), dtype=bool)
    sl = slice(lo, lo + cube_tokens)
    decisions[sl, sl, sl] = True
    return TokenMask(grid=grid, decisions=decisions)


def upsample_mask(mask: TokenMask) -> np.ndarray:
    """Replicate each token decision over its T^3 voxel block; (P, P, P) bool."""
    t = mask.grid.token_edge
    out = mask.decisions
    for axis in range(3):
        out = np.repeat(out, t, axis=axis)
    return out


def apply_mask(values: np.ndarray, mask: TokenMask) -> np.ndarray:
    """Zero out masked voxels of a normalized patch: X * Upsample(visibility)."""
    values = np.asarray(values)
    p = mask.grid.patch_edge
    if values.shape != (p, p, p):
        raise ValueError(f"patch shape {values.shape} does not match grid edge {p}")
    voxel_mask = upsample_mask(mask)
    return np.where(voxel_mask, np.float32(MASK_FILL_VALUE), values)
