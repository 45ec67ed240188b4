"""Dice-family losses over multi-slice predictions.

All losses consume class probabilities of shape ``[c_out, classes, H, W]``
(or batched ``[N, c_out, classes, H, W]``) against one-hot targets of the
same shape, and return differentiable scalar tensors.  Batched inputs are
reduced by averaging the per-stack losses.

Slice indices in the pairwise terms are 1-based: the pair (m, n) with
1 <= m < n <= c_out couples the m-th and n-th output slices and carries
weight 1/(n - m).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

# Stabilizer added to numerator and denominator of every Dice-style ratio;
# a class absent from both prediction and target then scores a perfect 1.
EPSILON = 1e-6

_SPATIAL = (-2, -1)


def _prepare(probs, labels):
    """Normalize inputs to 5D tensors [N, c_out, classes, H, W] and validate."""
    if not isinstance(probs, Tensor):
        probs = Tensor(probs)
    if isinstance(labels, Tensor):
        labels_data = labels.data
    else:
        labels_data = np.asarray(labels)
    if probs.data.shape != labels_data.shape:
        raise ValueError(f"probs shape {probs.data.shape} != labels shape {labels_data.shape}")
    if probs.data.ndim == 4:
        probs = probs.reshape((1,) + probs.shape)
        labels_data = labels_data[None]
    elif probs.data.ndim != 5:
        raise ValueError(f"expected 4D or 5D inputs, got {probs.data.ndim}D")
    onehot = (labels_data == 0) | (labels_data == 1)
    if not onehot.all() or not np.all(labels_data.sum(axis=2) == 1):
        raise ValueError("labels must be exactly one-hot along the class axis")
    labels = Tensor(labels_data.astype(probs.dtype, copy=False))
    return probs, labels


def _dice_terms(probs, labels):
    """Per-(stack, slice, class) Dice ratios, shape [N, c_out, classes]."""
    num = (probs * labels).sum(axis=_SPATIAL) * 2.0 + EPSILON
    den = (probs * probs).sum(axis=_SPATIAL) + (labels * labels).sum(axis=_SPATIAL) + EPSILON
    return num / den


def dice_loss(probs, labels):
    """Three-class soft Dice loss summed over classes and output slices.

    Perfect prediction attains exactly ``-classes * c_out`` under the epsilon
    convention.
    """
    probs, labels = _prepare(probs, labels)
    n = probs.shape[0]
    return _dice_terms(probs, labels).sum() * (-1.0 / n)


def _pair_core(probs, labels, m, n):
    c_out = probs.shape[1]
    if not 1 <= m < n <= c_out:
        raise ValueError(f"need 1 <= m < n <= c_out={c_out}, got ({m}, {n})")
    ps = probs[:, m - 1] + probs[:, n - 1]
    gs = labels[:, m - 1] + labels[:, n - 1]
    num = (ps * gs).sum(axis=_SPATIAL) * 2.0 + EPSILON
    den = (ps * ps).sum(axis=_SPATIAL) + (gs * gs).sum(axis=_SPATIAL) + EPSILON
    batch = probs.shape[0]
    return (num / den).sum() * (-1.0 / batch)


def pairwise_dice(probs, labels, m, n):
    """Dice loss of the union of output slices m and n (1-based, m < n).

    The summed fields p_m + p_n and g_m + g_n may exceed 1; no clipping is
    applied.
    """
    probs, labels = _prepare(probs, labels)
    return _pair_core(probs, labels, m, n)


def pair_weights(c_out):
    """Distance weights w_{m,n} = 1/(n - m) for every pair 1 <= m < n <= c_out."""
    if c_out < 2:
        raise ValueError("pairwise coupling needs at least 2 output slices")
    return {(m, n): 1.0 / (n - m) for m in range(1, c_out) for n in range(m + 1, c_out + 1)}


def lambda_weight(c_out):
    """Coupling weight: c_out divided by the total pair weight.

    The denominator normalizes the pair weights to one while the numerator
    scales supervision with the number of output slices.
    """
    return c_out / sum(pair_weights(c_out).values())


@dataclass
class DcdBreakdown:
    """Densely connected Dice value with its per-pair decomposition."""

    total: Tensor
    pair_terms: dict
    pair_weights: dict


def dcd_loss(probs, labels):
    """Weighted sum of pairwise Dice losses over all output-slice pairs."""
    probs, labels = _prepare(probs, labels)
    weights = pair_weights(probs.shape[1])
    terms = {}
    total = None
    for (m, n), w in weights.items():
        p = _pair_core(probs, labels, m, n)
        terms[(m, n)] = float(p)
        contrib = p * w
        total = contrib if total is None else total + contrib
    return DcdBreakdown(total=total, pair_terms=terms, pair_weights=weights)


@dataclass
class LossValue:
    """Total training objective with its component breakdown."""

    total: Tensor
    dice: Tensor
    dcd: Tensor | None
    lam: float
    pair_terms: dict
    pair_weights: dict

    def as_floats(self):
        out = {"total": float(self.total), "dice": float(self.dice), "lambda": self.lam}
        out["dcd"] = float(self.dcd) if self.dcd is not None else None
        return out


def total_loss(probs, labels, include_dcd=True):
    """Combined objective: Dice plus lambda-weighted densely connected Dice.

    With ``include_dcd=False`` (ablation) the total equals the Dice loss
    exactly and the pair breakdown is empty.
    """
    probs, labels = _prepare(probs, labels)
    n = probs.shape[0]
    dice = _dice_terms(probs, labels).sum() * (-1.0 / n)
    if not include_dcd:
        return LossValue(total=dice, dice=dice, dcd=None, lam=0.0, pair_terms={}, pair_weights={})
    c_out = probs.shape[1]
    lam = lambda_weight(c_out)
    weights = pair_weights(c_out)
    terms = {}
    dcd = None
    for (m, n), w in weights.items():
        p = _pair_core(probs, labels, m, n)
        terms[(m, n)] = float(p)
        contrib = p * w
        dcd = contrib if dcd is None else dcd + contrib
    total = dice + dcd * lam
    return LossValue(total=total, dice=dice, dcd=dcd, lam=lam, pair_terms=terms, pair_weights=weights)
