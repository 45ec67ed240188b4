"""Sliding-window volumetric prediction and label postprocessing.

Windows of ``c_in`` slices walk the z axis with stride one; every output
slice's class probabilities are accumulated at its global z position and
averaged over its coverage count.  Averaging happens in probability space,
then labels are taken per-voxel by argmax with ties broken toward the lower
class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import model as M
from .tensor import Tensor, no_grad
from .volume import DataError, Volume

_SIX_CONN = ndimage.generate_binary_structure(3, 1)


@dataclass
class ProbVolume:
    """Per-voxel class probabilities plus per-slice prediction multiplicity."""

    probs: np.ndarray  # (Z, classes, Y, X) float32
    spacing: tuple
    coverage: np.ndarray  # (Z,) int


def _pad_inplane(vox):
    z, y, x = vox.shape
    if y < 16 or x < 16:
        raise DataError(f"in-plane extents must be at least 16, got {y}x{x}")
    py = (-y) % 16
    px = (-x) % 16
    if py or px:
        vox = np.pad(vox, ((0, 0), (0, py), (0, px)), mode="reflect")
    return vox, y, x


def sliding_window_predict(model: M.Model, volume: Volume, batch_size=8) -> ProbVolume:
    """Predict a whole preprocessed volume with overlap averaging.

    The volume is edge-replicated by one slice per end so every original
    slice receives at least one prediction; in-plane extents not divisible
    by 16 are reflect-padded and cropped back.  Accumulation runs in float64
    in window order, so repeated runs are bit-identical.
    """
    cfg = model.config
    vox, orig_y, orig_x = _pad_inplane(volume.voxels.astype(np.float32, copy=False))
    nz = vox.shape[0]
    if nz + 2 < cfg.c_in:
        raise DataError(f"volume has {nz} slices, need at least {cfg.c_in - 2}")
    padded = np.pad(vox, ((1, 1), (0, 0), (0, 0)), mode="edge")
    starts = list(range(0, padded.shape[0] - cfg.c_in + 1))

    acc = np.zeros((nz, cfg.classes, vox.shape[1], vox.shape[2]), dtype=np.float64)
    coverage = np.zeros(nz, dtype=int)
    with no_grad():
        for at in range(0, len(starts), batch_size):
            chunk = starts[at : at + batch_size]
            batch = np.stack([padded[z0 : z0 + cfg.c_in] for z0 in chunk])
            probs = M.forward_batch(model, Tensor(batch)).data
            for i, z0 in enumerate(chunk):
                for k in range(cfg.c_out):
                    z = z0 + k  # window start in padded coords == first output slice in original coords
                    acc[z] += probs[i, k]
                    coverage[z] += 1
    acc /= coverage[:, None, None, None]
    acc /= acc.sum(axis=1, keepdims=True)
    return ProbVolume(
        probs=acc[:, :, :orig_y, :orig_x].astype(np.float32),
        spacing=volume.spacing,
        coverage=coverage,
    )


def argmax_labels(prob_volume: ProbVolume) -> Volume:
    """Per-voxel argmax; exact ties resolve to the lower class index."""
    labels = prob_volume.probs.argmax(axis=1).astype(np.uint8)
    return Volume(voxels=labels, spacing=prob_volume.spacing)


def largest_component(mask) -> np.ndarray:
    """Retain only the largest 6-connected component of a binary 3D mask.

    Ties go to the component whose first voxel comes earliest in scan order.
    An empty mask is returned unchanged.
    """
    mask = np.asarray(mask, dtype=bool)
    labeled, n = ndimage.label(mask, structure=_SIX_CONN)
    if n == 0:
        return mask.copy()
    sizes = np.bincount(labeled.ravel())[1:]
    keep = int(sizes.argmax()) + 1  # argmax returns the first (earliest-seeded) maximum
    return labeled == keep


def postprocess(labels: Volume) -> Volume:
    """Keep one organ component and drop lesion voxels outside it.

    The component analysis runs on the organ+lesion union, since lesions lie
    inside the organ anatomically and would otherwise split it.
    """
    vox = labels.voxels
    union = vox > 0
    keep = largest_component(union)
    out = np.where(keep, vox, 0).astype(np.uint8)
    return Volume(voxels=out, spacing=labels.spacing)
