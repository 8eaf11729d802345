"""Non-learning inpainting baseline: separable cubic-spline filling.

Masked voxels are predicted independently along each axis by fitting a
natural cubic spline to the visible samples of the 1D line through the
voxel, then averaging the axes' predictions. Lines sharing a visibility
pattern are fitted in one vectorized spline call. Lines with fewer than
two visible samples fall back to nearest-visible fill.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import distance_transform_edt


def interpolation_inpaint(values: np.ndarray, voxel_mask: np.ndarray) -> np.ndarray:
    """Fill masked voxels by 3-axis-averaged cubic-spline interpolation.

    Visible voxels pass through bit-identically; filled values are clamped
    to [0, 1]. Raises when the mask covers the entire patch.
    """
    values = np.asarray(values, dtype=np.float32)
    mask = np.asarray(voxel_mask, dtype=bool)
    if values.shape != mask.shape:
        raise ValueError(f"shape mismatch: {values.shape} vs {mask.shape}")
    if mask.all():
        raise ValueError("cannot interpolate a fully-masked patch")
    if not mask.any():
        return values.copy()

    acc = np.zeros(values.shape, dtype=np.float64)
    hits = np.zeros(values.shape, dtype=np.int32)
    for axis in range(3):
        pred, got = _interp_along_axis(values, mask, axis)
        acc += np.where(got, pred, 0.0)
        hits += got
    out = values.copy()
    filled = mask & (hits > 0)
    out[filled] = np.clip(acc[filled] / hits[filled], 0.0, 1.0).astype(np.float32)

    leftover = mask & (hits == 0)
    if leftover.any():
        # lines were fully masked on all three axes: copy the nearest visible voxel
        _, idx = distance_transform_edt(mask, return_indices=True)
        out[leftover] = values[tuple(i[leftover] for i in idx)]
    return out


def _interp_along_axis(values, mask, axis):
    """Per-line spline predictions along one axis.

    Returns (pred, got), both full volume shape; got marks masked voxels
    for which this axis produced a value.
    """
    v = np.moveaxis(values, axis, -1)
    m = np.moveaxis(mask, axis, -1)
    shape = v.shape
    n = shape[-1]
    lines_v = v.reshape(-1, n).astype(np.float64)
    lines_m = m.reshape(-1, n)

    pred = np.zeros_like(lines_v)
    got = np.zeros_like(lines_m)

    # group lines by identical visibility pattern so each pattern costs one fit
    needs = lines_m.any(axis=1)
    groups: dict[bytes, list[int]] = {}
    for i in np.flatnonzero(needs):
        groups.setdefault(lines_m[i].tobytes(), []).append(i)

    coords = np.arange(n, dtype=np.float64)
    for pattern, rows in groups.items():
        line_mask = np.frombuffer(pattern, dtype=bool)
        visible = ~line_mask
        n_vis = int(visible.sum())
        rows = np.asarray(rows)
        if n_vis == 0:
            continue
        if n_vis == 1:
            pred[rows[:, None], np.flatnonzero(line_mask)[None, :]] = lines_v[
                rows, np.flatnonzero(visible)[0]
            ][:, None]
        else:
            spline = CubicSpline(
                coords[visible], lines_v[rows][:, visible], axis=1, bc_type="natural"
            )
            fill = spline(coords[line_mask])
            pred[rows[:, None], np.flatnonzero(line_mask)[None, :]] = fill
        got[rows[:, None], np.flatnonzero(line_mask)[None, :]] = True

    pred = np.moveaxis(pred.reshape(shape), -1, axis)
    got = np.moveaxis(got.reshape(shape), -1, axis)
    return pred, got
