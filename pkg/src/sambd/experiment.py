"""Experiment orchestration: dataset generation, training, evaluation, ablation.

All artifacts are a pure function of (config, seed): weight initialization,
sample ordering and augmentation run on separate rng streams derived from
the experiment seed, so every decoder variant in an ablation sees identical
data in identical order.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as ME
from .inference import argmax_labels, postprocess, sliding_window_predict
from .losses import lambda_weight, total_loss
from .model import (
    MULTI_BRANCH,
    SINGLE_BRANCH,
    Model,
    ModelConfig,
    build_model,
    forward_batch,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import OptimState, sgd_momentum_step
from .volume import (
    DataError,
    PhantomConfig,
    TrainingSample,
    Volume,
    gen_phantom,
    augment,
    hu_window,
    read_svol,
    resample_z,
    write_svol,
)


class NumericError(Exception):
    """Training diverged (non-finite loss)."""


def worker_count():
    """Worker cap for parallel per-case evaluation (SAMBD_THREADS env var)."""
    return max(1, int(os.environ.get("SAMBD_THREADS", os.cpu_count() or 1)))


def _derive_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# -- dataset ------------------------------------------------------------------


@dataclass
class DatasetConfig:
    n_train: int = 40
    n_val: int = 10
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "phantom" in d:
            p = dict(d["phantom"])
            for key in ("dims", "thickness_choices", "tumor_count", "tumor_radius_mm", "intensity_means"):
                if key in p:
                    p[key] = tuple(p[key])
            if "organ_axes_frac" in p:
                p["organ_axes_frac"] = tuple(tuple(pair) for pair in p["organ_axes_frac"])
            d["phantom"] = PhantomConfig(**p)
        return cls(**d)


def write_phantom_dataset(out_dir, config: DatasetConfig):
    """Generate and store all cases plus a manifest; fully seeded."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    total = config.n_train + config.n_val
    for i in range(total):
        case_id = f"case_{i:03d}"
        pc = replace(config.phantom, seed=_derive_seed(config.seed, i))
        try:
            ph = gen_phantom(pc)
        except ValueError as exc:
            raise DataError(f"{case_id}: {exc}") from exc
        img_name = f"{case_id}_img.svol"
        lab_name = f"{case_id}_lab.svol"
        write_svol(ph.intensity, out_dir / img_name)
        write_svol(ph.label, out_dir / lab_name)
        cases.append(
            {
                "id": case_id,
                "split": "train" if i < config.n_train else "val",
                "intensity": img_name,
                "label": lab_name,
                "thickness_mm": ph.thickness_mm,
            }
        )
    manifest = {"version": 1, "seed": config.seed, "cases": cases}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    for case in manifest.get("cases", []):
        case["intensity"] = str(base / case["intensity"])
        case["label"] = str(base / case["label"])
    return manifest


# -- experiment config -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything one training run depends on.

    ``md``/``sab``/``dcd`` are the ablation switches: multi-branch decoder,
    slice attention, and the pairwise-coupling loss term.  The model config
    carries the architectural widths; ``resample_z_mm=None`` keeps each
    case's native slice thickness.  ``epochs`` defaults to the desk-scale 20;
    the full-scale training protocol uses 80.
    """

    manifest: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    md: bool = True
    sab: bool = True
    dcd: bool = True
    epochs: int = 20
    lr0: float = 1e-3
    lr_decay: float = 0.9
    momentum: float = 0.9
    batch_size: int = 4
    samples_per_epoch: int = 200
    crop: int = 64
    hu_lo: float = -200.0
    hu_hi: float = 250.0
    resample_z_mm: float | None = None
    seed: int = 0

    def validate(self):
        if self.sab and not self.md:
            raise ValueError("the slice attention flag requires the multi-branch flag")
        if self.dcd and self.model.c_out < 2:
            raise ValueError("the pairwise coupling loss needs at least 2 output slices")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.samples_per_epoch < 1:
            raise ValueError("epochs, batch_size and samples_per_epoch must be >= 1")
        if self.crop % 16 != 0:
            raise ValueError("crop size must be divisible by 16")
        self.model.validate()

    def effective_model(self) -> ModelConfig:
        if self.md:
            return replace(self.model, variant=MULTI_BRANCH, use_sab=self.sab, width_multiplier=1)
        return replace(self.model, variant=SINGLE_BRANCH, use_sab=False)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class RunRecord:
    """Per-epoch loss breakdown and artifact locations of one training run."""

    epochs: list
    lam: float
    wall_time_s: float
    checkpoint: str
    n_train_cases: int
    n_windows: int

    def to_dict(self):
        return asdict(self)


# -- training -----------------------------------------------------------------------


def _load_split(config: ExperimentConfig, split):
    manifest = load_manifest(config.manifest)
    cases = [c for c in manifest["cases"] if c["split"] == split]
    out = []
    for case in cases:
        intensity = hu_window(read_svol(case["intensity"]), config.hu_lo, config.hu_hi)
        label = read_svol(case["label"])
        if config.resample_z_mm is not None and intensity.spacing[2] > config.resample_z_mm:
            intensity = resample_z(intensity, config.resample_z_mm)
            label = resample_z(label, config.resample_z_mm)
        out.append((case["id"], intensity, label))
    return out


def train(config: ExperimentConfig, out_dir, log=print) -> RunRecord:
    """SGD-with-momentum over randomly augmented slice windows.

    The learning rate at epoch k is exactly lr0 * lr_decay**k; a checkpoint
    is written after every epoch and the final state to ``final.ckpt``.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    cases = _load_split(config, "train")
    if not cases:
        raise DataError(f"manifest {config.manifest} has no training cases")
    c_in = config.model.c_in
    c_out = config.model.c_out
    index = []
    for ci, (_, ivol, _) in enumerate(cases):
        nz = ivol.voxels.shape[0]
        if nz < c_in:
            continue
        index.extend((ci, z0) for z0 in range(nz - c_in + 1))
    if not index:
        raise DataError("no training windows: volumes are thinner than c_in")

    model = build_model(config.effective_model(), seed=_derive_seed(config.seed, 0))
    state = OptimState(lr=config.lr0, momentum=config.momentum)
    rng_data = np.random.default_rng([config.seed, 1])
    rng_aug = np.random.default_rng([config.seed, 2])
    lam = lambda_weight(c_out) if config.dcd else 0.0

    epoch_records = []
    for epoch in range(config.epochs):
        state.lr = config.lr0 * config.lr_decay**epoch
        order = rng_data.permutation(len(index))[: min(config.samples_per_epoch, len(index))]
        sums = {"total": 0.0, "dice": 0.0, "dcd": 0.0}
        n_steps = 0
        for at in range(0, len(order), config.batch_size):
            picks = order[at : at + config.batch_size]
            samples = []
            for i in picks:
                ci, z0 = index[i]
                _, ivol, lvol = cases[ci]
                raw = TrainingSample(
                    stack=ivol.voxels[z0 : z0 + c_in],
                    labels=lvol.voxels[z0 + 1 : z0 + 1 + c_out],
                    z0=z0 + 1,
                )
                samples.append(augment(raw, rng_aug, crop=config.crop))
            stacks = np.stack([s.stack for s in samples])
            targets = np.stack([s.one_hot(config.model.classes) for s in samples])
            model.zero_grad()
            probs = forward_batch(model, stacks)
            lv = total_loss(probs, targets, include_dcd=config.dcd)
            value = float(lv.total)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {n_steps}, lr {state.lr:.3e}"
                )
            lv.total.backward()
            sgd_momentum_step(model.params, state)
            sums["total"] += value
            sums["dice"] += float(lv.dice)
            sums["dcd"] += float(lv.dcd) if lv.dcd is not None else 0.0
            n_steps += 1
        rec = {
            "epoch": epoch,
            "lr": state.lr,
            "total": sums["total"] / n_steps,
            "dice": sums["dice"] / n_steps,
        }
        if config.dcd:
            rec["dcd"] = sums["dcd"] / n_steps
        epoch_records.append(rec)
        save_checkpoint(model, out_dir / f"epoch_{epoch:03d}.ckpt")
        if log:
            parts = [f"epoch {epoch:3d}", f"lr {rec['lr']:.6f}", f"total {rec['total']:+.4f}", f"dice {rec['dice']:+.4f}"]
            if config.dcd:
                parts.append(f"dcd {rec['dcd']:+.4f}")
            log("  ".join(parts))

    final = out_dir / "final.ckpt"
    save_checkpoint(model, final)
    record = RunRecord(
        epochs=epoch_records,
        lam=lam,
        wall_time_s=time.perf_counter() - t_start,
        checkpoint=str(final),
        n_train_cases=len(cases),
        n_windows=len(index),
    )
    (out_dir / "run.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    return record


# -- inference + evaluation ------------------------------------------------------------


def predict_volume(model: Model, intensity: Volume, hu_lo=-200.0, hu_hi=250.0, resample_z_mm=None, batch_size=8):
    """Window -> (optional z-resample) -> sliding-window predict -> argmax -> postprocess."""
    pre = hu_window(intensity, hu_lo, hu_hi)
    if resample_z_mm is not None and pre.spacing[2] > resample_z_mm:
        pre = resample_z(pre, resample_z_mm)
    pv = sliding_window_predict(model, pre, batch_size=batch_size)
    labels = postprocess(argmax_labels(pv))
    return labels, pv


def evaluate_predictions(triples):
    """Per-case metrics and aggregates for (case_id, prediction, reference) triples."""
    triples = list(triples)

    def one(tr):
        cid, pred, ref = tr
        return cid, ME.case_metrics(pred, ref)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        per_case = dict(pool.map(one, triples))
    mask_pairs = {
        cls: [(to_mask(pred.voxels), to_mask(ref.voxels)) for _, pred, ref in triples]
        for cls, to_mask in ME.CLASS_MASKS.items()
    }
    return per_case, ME.aggregate(per_case, mask_pairs)


# -- ablation harness --------------------------------------------------------------------


VARIANT_FLAGS = {
    "single_1x": {"md": False, "sab": False, "dcd": False, "width": 1},
    "single_cx": {"md": False, "sab": False, "dcd": False, "width": None},  # None -> c_out
    "md": {"md": True, "sab": False, "dcd": False, "width": 1},
    "md_sab": {"md": True, "sab": True, "dcd": False, "width": 1},
    "md_dcd": {"md": True, "sab": False, "dcd": True, "width": 1},
    "md_sab_dcd": {"md": True, "sab": True, "dcd": True, "width": 1},
}

DEFAULT_VARIANTS = list(VARIANT_FLAGS)


def variant_config(base: ExperimentConfig, variant, seed) -> ExperimentConfig:
    flags = VARIANT_FLAGS[variant]
    width = flags["width"] if flags["width"] is not None else base.model.c_out
    model = replace(base.model, width_multiplier=width)
    return replace(base, model=model, md=flags["md"], sab=flags["sab"], dcd=flags["dcd"], seed=seed)


def ablate(base: ExperimentConfig, seeds, out_dir, variants=None, log=print):
    """Train every decoder variant on identical data orderings and compare.

    Produces a comparison table over {per-case Dice, global Dice, VOE} per
    class, per-seed tumor improvements of the full model over the
    width-matched single-branch baseline, and their paired t-test.
    """
    variants = list(variants) if variants else list(DEFAULT_VARIANTS)
    unknown = [v for v in variants if v not in VARIANT_FLAGS]
    if unknown:
        raise ValueError(f"unknown variants: {unknown}; choose from {sorted(VARIANT_FLAGS)}")
    if base.resample_z_mm is not None:
        raise ValueError("ablation scores at each case's native grid; resample_z_mm must stay unset")
    seeds = list(seeds)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    val_cases = _load_split(base, "val")
    if not val_cases:
        raise DataError("manifest has no validation cases")
    results = {}
    for variant in variants:
        results[variant] = {}
        for seed in seeds:
            cfg = variant_config(base, variant, seed)
            run_dir = out_dir / variant / f"seed_{seed}"
            if log:
                log(f"[{variant} seed={seed}] training")
            record = train(cfg, run_dir, log=None)
            model = load_checkpoint(record.checkpoint)
            triples = []
            for cid, ivol, lvol in val_cases:
                pred = predict_preprocessed(model, ivol, cfg.resample_z_mm)
                triples.append((cid, pred, lvol))
            per_case, aggregates = evaluate_predictions(triples)
            case_ids = sorted(per_case)
            results[variant][seed] = {
                "run_dir": str(run_dir),
                "case_ids": case_ids,
                "tumor_dice": [per_case[cid][ME.TUMOR].dice for cid in case_ids],
                "liver_dice": [per_case[cid][ME.LIVER].dice for cid in case_ids],
                "aggregates": {cls: asdict(agg) for cls, agg in aggregates.items()},
            }
            if log:
                t = results[variant][seed]["aggregates"][ME.TUMOR]["dice_per_case_mean"]
                l = results[variant][seed]["aggregates"][ME.LIVER]["dice_per_case_mean"]
                log(f"[{variant} seed={seed}] liver dice {l:.4f}  tumor dice {t:.4f}")

    summary = _summarize_ablation(results, variants, seeds)
    (out_dir / "ablation.json").write_text(json.dumps({"results": results, "summary": summary}, indent=2, sort_keys=True) + "\n")
    table = format_ablation_table(results, summary, variants, seeds)
    (out_dir / "table.txt").write_text(table)
    if log:
        log(table)
    return results, summary


def predict_preprocessed(model: Model, intensity: Volume, resample_z_mm=None, batch_size=8):
    """Predict an already-windowed ([0, 1]) intensity volume."""
    pre = intensity
    if resample_z_mm is not None and pre.spacing[2] > resample_z_mm:
        pre = resample_z(pre, resample_z_mm)
    pv = sliding_window_predict(model, pre, batch_size=batch_size)
    return postprocess(argmax_labels(pv))


def _summarize_ablation(results, variants, seeds):
    summary = {"variants": {}, "seeds": seeds}
    for variant in variants:
        per_seed_tumor = [float(np.mean(results[variant][s]["tumor_dice"])) for s in seeds]
        per_seed_liver = [float(np.mean(results[variant][s]["liver_dice"])) for s in seeds]
        summary["variants"][variant] = {
            "tumor_dice_per_seed": per_seed_tumor,
            "tumor_dice_mean": float(np.mean(per_seed_tumor)),
            "tumor_dice_sd": float(np.std(per_seed_tumor)) if len(seeds) > 1 else None,
            "liver_dice_mean": float(np.mean(per_seed_liver)),
        }
    full, base = "md_sab_dcd", "single_cx"
    if full in results and base in results:
        deltas = [
            float(np.mean(results[full][s]["tumor_dice"]) - np.mean(results[base][s]["tumor_dice"]))
            for s in seeds
        ]
        pooled_full = [d for s in seeds for d in results[full][s]["tumor_dice"]]
        pooled_base = [d for s in seeds for d in results[base][s]["tumor_dice"]]
        comparison = {
            "full": full,
            "baseline": base,
            "per_seed_delta": deltas,
            "median_delta": float(np.median(deltas)),
            "n_pairs": len(pooled_full),
        }
        if len(pooled_full) >= 2:
            t, p = ME.paired_ttest(pooled_full, pooled_base)
            comparison.update(t_statistic=t, p_two_sided=p)
            comparison["significant_at_0.05"] = bool(p < 0.05)
        else:
            comparison.update({"t_statistic": None, "p_two_sided": None, "significant_at_0.05": None})
        summary["comparison"] = comparison
    return summary


def _cell(mean, sd):
    return f"{mean:.4f}" if sd is None else f"{mean:.4f}+/-{sd:.4f}"


def format_ablation_table(results, summary, variants, seeds):
    header = ["variant", "md", "sab", "dcd"]
    for cls in (ME.LIVER, ME.TUMOR):
        header += [f"{cls}_dice_pc", f"{cls}_dice_gl", f"{cls}_voe"]
    rows = [header]
    multi_seed = len(seeds) > 1
    for variant in variants:
        flags = VARIANT_FLAGS[variant]
        row = [variant] + ["x" if flags[k] else "-" for k in ("md", "sab", "dcd")]
        for cls in (ME.LIVER, ME.TUMOR):
            pc = [results[variant][s]["aggregates"][cls]["dice_per_case_mean"] for s in seeds]
            gl = [results[variant][s]["aggregates"][cls]["dice_global"] for s in seeds]
            ve = [results[variant][s]["aggregates"][cls]["voe_mean"] for s in seeds]
            row.append(_cell(float(np.mean(pc)), float(np.std(pc)) if multi_seed else None))
            row.append(f"{float(np.mean(gl)):.4f}")
            row.append(f"{float(np.mean(ve)):.4f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    if "comparison" in summary:
        c = summary["comparison"]
        lines.append("")
        lines.append(f"{c['full']} vs {c['baseline']} (tumor dice per case):")
        lines.append(f"  per-seed delta: {['%+.4f' % d for d in c['per_seed_delta']]}  median {c['median_delta']:+.4f}")
        if c["t_statistic"] is not None:
            lines.append(
                f"  paired t-test: t={c['t_statistic']:.4f}  p={c['p_two_sided']:.4f}"
                f"  significant(0.05)={c['significant_at_0.05']}"
            )
        else:
            lines.append(f"  paired t-test: not defined for {c['n_pairs']} pair(s)")
    return "\n".join(lines) + "\n"
