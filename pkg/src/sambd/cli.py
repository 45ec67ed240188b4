"""Command-line entry point: phantom | train | infer | eval | ablate.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiment import (
    DEFAULT_VARIANTS,
    DatasetConfig,
    ExperimentConfig,
    NumericError,
    ablate,
    evaluate_predictions,
    load_manifest,
    predict_volume,
    train,
    write_phantom_dataset,
)
from .metrics import format_report
from .model import load_checkpoint
from .volume import DataError, read_svol, write_svol


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc


def _experiment_config(args):
    raw = _read_json(args.config)
    try:
        config = ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad experiment config {args.config}: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if not config.manifest:
        raise DataError("experiment config must set 'manifest'")
    config.manifest = str((Path(args.config).parent / config.manifest).resolve())
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return config


def cmd_phantom(args):
    if args.config:
        try:
            config = DatasetConfig.from_dict(_read_json(args.config))
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad phantom config {args.config}: {exc}") from exc
    else:
        config = DatasetConfig()
    if args.seed is not None:
        config.seed = args.seed
    manifest = write_phantom_dataset(args.out, config)
    print(f"wrote {config.n_train} train / {config.n_val} val cases")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args):
    config = _experiment_config(args)
    record = train(config, args.out)
    print(f"finished {len(record.epochs)} epochs in {record.wall_time_s:.1f}s")
    print(f"checkpoint: {record.checkpoint}")
    return 0


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    volume = read_svol(args.volume)
    labels, pv = predict_volume(
        model,
        volume,
        hu_lo=args.window[0],
        hu_hi=args.window[1],
        resample_z_mm=args.resample_z,
        batch_size=args.batch_size,
    )
    write_svol(labels, args.out)
    sidecar = {
        "checkpoint": str(args.checkpoint),
        "source": str(args.volume),
        "window": list(args.window),
        "resample_z_mm": args.resample_z,
        "dims": list(labels.dims),
        "spacing_mm": list(labels.spacing),
        "coverage": pv.coverage.tolist(),
    }
    Path(str(args.out) + ".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    manifest = load_manifest(args.manifest)
    cases = [c for c in manifest["cases"] if args.split in ("all", c["split"])]
    if not cases:
        raise DataError(f"no cases with split {args.split!r} in {args.manifest}")
    triples = []
    missing = []
    for case in cases:
        pred_path = Path(args.pred_dir) / f"{case['id']}.svol"
        if not pred_path.exists():
            missing.append(case["id"])
            continue
        triples.append((case["id"], read_svol(pred_path), read_svol(case["label"])))
    if not triples:
        raise DataError("no predictions found for any manifest case")
    per_case, aggregates = evaluate_predictions(triples)
    report = format_report(per_case, aggregates, missing=missing)
    if args.out:
        Path(args.out).write_text(report)
        print(f"wrote {args.out}")
    else:
        print(report, end="")
    if missing:
        print(f"missing predictions for {len(missing)} case(s): {', '.join(missing)}", file=sys.stderr)
        return 2
    return 0


def cmd_ablate(args):
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise UsageError("need at least one seed")
    variants = [v for v in args.variants.split(",") if v != ""] if args.variants else None
    config = _experiment_config(args)
    try:
        ablate(config, seeds, args.out, variants=variants)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"ablation artifacts in {args.out}")
    return 0


def build_parser():
    parser = _Parser(prog="sambd", description="Slice-aware multi-branch segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic anisotropic dataset")
    p.add_argument("--config", help="dataset config JSON (defaults apply if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True, help="input intensity volume (.svol)")
    p.add_argument("--out", required=True, help="output label volume (.svol)")
    p.add_argument("--window", type=float, nargs=2, default=(-200.0, 250.0), metavar=("LO", "HI"))
    p.add_argument("--resample-z", type=float, default=None, metavar="MM",
                   help="resample slices thicker than MM to MM before prediction")
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--pred-dir", required=True, help="directory holding <case_id>.svol predictions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "all"])
    p.add_argument("--out", default=None, help="report path (stdout if omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare decoder/loss variants")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated experiment seeds")
    p.add_argument("--variants", default=None,
                   help=f"comma-separated subset of {','.join(DEFAULT_VARIANTS)}")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
