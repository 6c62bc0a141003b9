"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, ablate, neg-probe.
Machine-parseable JSON goes to stdout; human-readable progress goes to
stderr. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .attributes import save_attribute_table
from .datagen import SynthConfig, generate_dataset, load_manifest, save_manifest
from .metrics import append_metrics_csv, evaluate
from .trainer import (
    TrainConfig,
    load_train_config,
    run_ablation,
    run_negative_descriptor_probe,
    train,
)
from .verification import run_gradcheck

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_synth_config(path: str) -> SynthConfig:
    obj = json.loads(Path(path).read_text())
    fields = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(obj) - fields
    if unknown:
        raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
    return SynthConfig(**obj)


def _cmd_gen_data(args) -> int:
    cfg = _load_synth_config(args.config) if args.config else SynthConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_m = generate_dataset(cfg, "train")
    test_m = generate_dataset(cfg, "test")
    save_manifest(train_m, out / "train.jsonl")
    save_manifest(test_m, out / "test.jsonl")
    save_attribute_table(train_m.attribute_table, out / "attributes.json")
    _log(f"wrote {len(train_m.samples)} train / {len(test_m.samples)} test samples to {out}")
    return EXIT_OK


def _load_split(data_dir: str, split: str):
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}")
    return load_manifest(path)


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    train_m = _load_split(args.data, "train")
    test_m = _load_split(args.data, "test")
    record = train(train_m, cfg, test_manifest=test_m, out_dir=args.out, log=True)
    scorer = "global" if cfg.global_contrastive else "token"
    from .encoders import load_params
    params, _, _ = load_params(record.checkpoint_path)
    report = evaluate(params, test_m, scorer=scorer)
    append_metrics_csv(Path(args.out) / "metrics.csv", "train-final",
                       record.config_hash, report)
    print(json.dumps({"config_hash": record.config_hash,
                      "checkpoint": record.checkpoint_path,
                      "final_eval": report.to_dict()}, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    from .encoders import load_params
    params, meta, _ = load_params(ckpt)
    test_m = _load_split(args.data, "test")
    report = evaluate(params, test_m, scorer=args.scorer)
    config_hash = meta.get("config_hash", "")
    append_metrics_csv(ckpt.parent / "metrics.csv", "eval", config_hash, report)
    print(json.dumps({"config_hash": config_hash,
                      "scorer": args.scorer,
                      "report": report.to_dict()}, sort_keys=True))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, batch_size=args.batch_size)
    print(json.dumps(report.to_json_dict(), sort_keys=True))
    for name, err in report.errors.items():
        _log(f"{name}: max rel err {err:.3e} "
             f"{'PASS' if err <= report.tolerance else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def _cmd_ablate(args) -> int:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    train_m = _load_split(args.data, "train")
    test_m = _load_split(args.data, "test")
    rows = run_ablation(train_m, test_m, cfg, out_dir="ablation_runs", log=True)
    print(json.dumps([r.to_json_dict() for r in rows], sort_keys=True))
    _log("wrote ablation_runs/ablation.csv")
    return EXIT_OK


def _cmd_neg_probe(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    test_m = _load_split(args.data, "test")
    result = run_negative_descriptor_probe(ckpt, test_m, num_neg=args.num_neg)
    print(json.dumps(result.to_json_dict(), sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualfocus",
        description="desk-scale cross-modal retrieval experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic manifests")
    p.add_argument("--config", help="SynthConfig JSON file (defaults used if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="TrainConfig JSON file (defaults used if omitted)")
    p.add_argument("--data", required=True, help="directory with train/test manifests")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scorer", choices=("token", "global"), default="token")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=3)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the six-component ablation table")
    p.add_argument("--config", help="base TrainConfig JSON file")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("neg-probe", help="append negative descriptors to queries")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--num-neg", type=int, default=2)
    p.set_defaults(fn=_cmd_neg_probe)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION
    except (RuntimeError, FloatingPointError) as exc:
        _log(f"runtime failure: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
