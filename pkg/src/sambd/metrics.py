"""Segmentation evaluation metrics, spacing-aware, with aggregation.

Per binary mask pair: Dice, volume overlap error, signed relative volume
difference, and the symmetric surface-distance family (mean, max, RMS) in
millimeters.  Aggregation distinguishes the per-case mean Dice from the
pooled "global" Dice computed as if all volumes were stacked into one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .volume import Volume

LIVER = "liver"
TUMOR = "tumor"
CLASS_MASKS = {LIVER: lambda v: v >= 1, TUMOR: lambda v: v == 2}


def _counts(pred_mask, ref_mask):
    if pred_mask.shape != ref_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {ref_mask.shape}")
    a = int(pred_mask.sum())
    b = int(ref_mask.sum())
    i = int(np.logical_and(pred_mask, ref_mask).sum())
    return a, b, i


def dice(pred_mask, ref_mask):
    """2|A n B| / (|A| + |B|); both masks empty scores 1, exactly one empty scores 0."""
    a, b, i = _counts(pred_mask, ref_mask)
    if a + b == 0:
        return 1.0
    return 2.0 * i / (a + b)


def voe(pred_mask, ref_mask):
    """Volume overlap error 1 - |A n B| / |A u B|; empty union scores 0."""
    a, b, i = _counts(pred_mask, ref_mask)
    union = a + b - i
    if union == 0:
        return 0.0
    return 1.0 - i / union


def rvd(pred_mask, ref_mask):
    """Signed relative volume difference (|pred| - |ref|) / |ref|; None for empty reference."""
    a, b, _ = _counts(pred_mask, ref_mask)
    if b == 0:
        return None
    return (a - b) / b


def dice_global(case_mask_pairs):
    """Dice over pooled voxel counts, as if all cases formed one long volume."""
    pairs = list(case_mask_pairs)
    if not pairs:
        raise ValueError("need at least one case")
    total_i = total_ab = 0
    for pred_mask, ref_mask in pairs:
        a, b, i = _counts(pred_mask, ref_mask)
        total_i += i
        total_ab += a + b
    if total_ab == 0:
        return 1.0
    return 2.0 * total_i / total_ab


# -- surface distances ------------------------------------------------------------


def surface_points(mask, spacing):
    """Millimeter coordinates of voxels with a face neighbor outside the mask.

    The volume border counts as outside; returns an (n, 3) array of (x, y, z)
    voxel centers scaled by spacing, in scan order.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("surface of an empty mask is undefined")
    padded = np.pad(mask, 1)
    interior = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    surf = mask & ~interior
    zz, yy, xx = np.nonzero(surf)
    sx, sy, sz = spacing
    return np.column_stack([xx * sx, yy * sy, zz * sz]).astype(np.float64)


def _directed_min_dists_brute(src, dst):
    # chunked exact nearest distances, reference for the tree-based path
    out = np.empty(len(src))
    step = max(1, int(2e6 / max(len(dst), 1)))
    for at in range(0, len(src), step):
        chunk = src[at : at + step]
        d2 = ((chunk[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        out[at : at + step] = np.sqrt(d2.min(axis=1))
    return out


def surface_distances(pred_mask, ref_mask, spacing, method="kdtree"):
    """Symmetric surface distances (assd, msd, rmsd) in mm.

    Pools nearest-opposite-surface distances from both directions; ``msd`` is
    the symmetric Hausdorff distance.  Returns None if either mask is empty.
    ``method="brute"`` is the O(S1*S2) reference implementation.
    """
    pred_mask = np.asarray(pred_mask, dtype=bool)
    ref_mask = np.asarray(ref_mask, dtype=bool)
    if not pred_mask.any() or not ref_mask.any():
        return None
    p = surface_points(pred_mask, spacing)
    r = surface_points(ref_mask, spacing)
    if method == "kdtree":
        d_pr = cKDTree(r).query(p)[0]
        d_rp = cKDTree(p).query(r)[0]
    elif method == "brute":
        d_pr = _directed_min_dists_brute(p, r)
        d_rp = _directed_min_dists_brute(r, p)
    else:
        raise ValueError(f"unknown method {method!r}")
    d = np.concatenate([d_pr, d_rp])
    return float(d.mean()), float(d.max()), float(np.sqrt((d**2).mean()))


# -- per-case + aggregate reporting ---------------------------------------------------


@dataclass
class ClassMetrics:
    dice: float
    voe: float
    rvd: float | None
    assd_mm: float | None
    msd_mm: float | None
    rmsd_mm: float | None


def case_metrics(pred: Volume, ref: Volume) -> dict:
    """All metrics for the organ (labels >= 1) and lesion (label == 2) classes."""
    if pred.voxels.shape != ref.voxels.shape:
        raise ValueError(f"prediction {pred.voxels.shape} and reference {ref.voxels.shape} disagree")
    out = {}
    for cls, to_mask in CLASS_MASKS.items():
        pm = to_mask(pred.voxels)
        rm = to_mask(ref.voxels)
        sd = surface_distances(pm, rm, ref.spacing)
        assd, msd, rmsd = sd if sd is not None else (None, None, None)
        out[cls] = ClassMetrics(
            dice=dice(pm, rm),
            voe=voe(pm, rm),
            rvd=rvd(pm, rm),
            assd_mm=assd,
            msd_mm=msd,
            rmsd_mm=rmsd,
        )
    return out


@dataclass
class ClassAggregate:
    dice_per_case_mean: float
    dice_per_case_sd: float
    dice_global: float
    voe_mean: float
    rvd_mean: float | None
    assd_mean: float | None
    msd_mean: float | None
    rmsd_mean: float | None
    n_cases: int


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(per_case: dict, mask_pairs: dict) -> dict:
    """Aggregate per-case metrics; ``mask_pairs`` feeds the pooled global Dice.

    ``per_case`` maps case id -> {class -> ClassMetrics}; ``mask_pairs`` maps
    class -> list of (pred_mask, ref_mask).  Means over cases skip missing
    (None) values; the per-case Dice never goes missing.
    """
    out = {}
    case_ids = sorted(per_case)
    for cls in CLASS_MASKS:
        dices = [per_case[cid][cls].dice for cid in case_ids]
        out[cls] = ClassAggregate(
            dice_per_case_mean=float(np.mean(dices)),
            dice_per_case_sd=float(np.std(dices)),
            dice_global=dice_global(mask_pairs[cls]),
            voe_mean=float(np.mean([per_case[cid][cls].voe for cid in case_ids])),
            rvd_mean=_mean_or_none([per_case[cid][cls].rvd for cid in case_ids]),
            assd_mean=_mean_or_none([per_case[cid][cls].assd_mm for cid in case_ids]),
            msd_mean=_mean_or_none([per_case[cid][cls].msd_mm for cid in case_ids]),
            rmsd_mean=_mean_or_none([per_case[cid][cls].rmsd_mm for cid in case_ids]),
            n_cases=len(case_ids),
        )
    return out


def _fmt(v):
    return "na" if v is None else f"{v:.6f}"


def format_report(per_case: dict, aggregates: dict, missing=()) -> str:
    """Stable-ordered text report: per-case rows then an aggregate block."""
    lines = ["case\tclass\tdice\tvoe\trvd\tassd_mm\tmsd_mm\trmsd_mm"]
    for cid in sorted(per_case):
        for cls in (LIVER, TUMOR):
            m = per_case[cid][cls]
            lines.append(
                "\t".join(
                    [cid, cls, _fmt(m.dice), _fmt(m.voe), _fmt(m.rvd), _fmt(m.assd_mm), _fmt(m.msd_mm), _fmt(m.rmsd_mm)]
                )
            )
    lines.append("")
    lines.append("# aggregate")
    for cls in (LIVER, TUMOR):
        a = aggregates[cls]
        lines.append(
            f"{cls}\tdice_per_case={_fmt(a.dice_per_case_mean)}+/-{_fmt(a.dice_per_case_sd)}"
            f"\tdice_global={_fmt(a.dice_global)}\tvoe={_fmt(a.voe_mean)}"
            f"\trvd={_fmt(a.rvd_mean)}\tassd={_fmt(a.assd_mean)}"
            f"\tmsd={_fmt(a.msd_mean)}\trmsd={_fmt(a.rmsd_mean)}\tn={a.n_cases}"
        )
    for cid in missing:
        lines.append(f"# missing prediction: {cid}")
    return "\n".join(lines) + "\n"


# -- paired significance test -----------------------------------------------------------


def _betacf(a, b, x):
    # continued fraction for the incomplete beta function (Lentz's method)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def _betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t, df):
    """Survival function of the t distribution, P(T > t)."""
    x = df / (df + t * t)
    p_two = _betainc(df / 2.0, 0.5, x)
    return p_two / 2.0 if t >= 0 else 1.0 - p_two / 2.0


def paired_ttest(scores_a, scores_b):
    """Paired t statistic with n-1 dof and its two-sided p-value.

    Zero-variance differences are degenerate: identical lists return (0, 1),
    a constant nonzero shift returns (+/-inf, 0).
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1D and equally long")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * t_sf(abs(t), n - 1)
    return float(t), float(min(p, 1.0))
