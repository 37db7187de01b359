"""Command-line interface for the full pipeline.

Typical flow:

    apneafusion synth --studies 40 --epochs-per-study 120 --seed 7 --out raw/
    apneafusion prepare --in raw/ --out prepared/
    apneafusion pretrain --data prepared/ --config cfg.json --out run/
    apneafusion train-fusion --data prepared/ --pretrained run/ --out run/
    apneafusion evaluate --data prepared/ --ckpt run/ --scenario both:ratio=0.3,snr=20 \
        --report report.json
    apneafusion report --runs reports/ --out table.csv
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from ..corrupt import CorruptionSpec, corrupt_dataset, write_corruption_log
from ..dataio import (
    load_bundle,
    load_dataset,
    make_folds,
    prepare_bundle,
    save_bundle,
    save_dataset,
    synth_dataset,
)
from ..trainer import (
    TrainConfig,
    load_models,
    pretrain_unimodal,
    save_fused,
    save_pretrained,
    train_fusion,
    write_training_log,
)
from .gradchecks import run_gradcheck
from .scenarios import apply_scenario, grid_csv_rows, parse_scenario, run_scenario


def _cmd_synth(args) -> int:
    bundles = synth_dataset(args.studies, args.epochs_per_study, args.apnea_rate,
                            args.seed, args.separability)
    save_dataset(bundles, args.out)
    print(f"wrote {len(bundles)} studies to {args.out}")
    return 0


def _cmd_prepare(args) -> int:
    bundles = load_dataset(getattr(args, "in"))
    for b in bundles:
        prepared = prepare_bundle(b)
        save_bundle(prepared, Path(args.out) / prepared.study_id)
    print(f"prepared {len(bundles)} studies into {args.out}")
    return 0


def _cmd_corrupt(args) -> int:
    bundles = load_dataset(getattr(args, "in"))
    spec = CorruptionSpec(mode=args.mode, omission_ratio=args.omission_ratio,
                          target_snr_db=args.snr_db,
                          noise_occurrence_chance=args.noise_chance, seed=args.seed)
    corrupted, log = corrupt_dataset(bundles, spec)
    save_dataset(corrupted, args.out)
    log_path = args.log or (Path(args.out) / "corruption_log.jsonl")
    write_corruption_log(log, log_path)
    print(f"corrupted {len(bundles)} studies ({len(log)} affected triples), "
          f"log at {log_path}")
    return 0


def _load_train_bundles(data_dir, plan, fold):
    return [load_bundle(Path(data_dir) / sid) for sid in plan.train_ids(fold)]


def _cmd_pretrain(args) -> int:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundles = load_dataset(args.data)
    plan = make_folds([b.study_id for b in bundles], k=config.folds, seed=config.seed)
    (out / "folds.json").write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True))
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))

    by_id = {b.study_id: b for b in bundles}
    if args.corrupt_train:
        scenario = parse_scenario(args.corrupt_train)
        corrupted = apply_scenario(bundles, scenario, config.seed)
        by_id = {b.study_id: b for b in corrupted}
        print(f"training on corrupted data: {scenario.descriptor()}")

    for fold in range(plan.k):
        train = [by_id[sid] for sid in plan.train_ids(fold)]
        models, history = pretrain_unimodal(train, config)
        fold_dir = out / f"fold_{fold}"
        save_pretrained(fold_dir / "pretrained", models, config)
        write_training_log(fold_dir / "training_log.csv", history, [])
        print(f"fold {fold}: pretrained {len(models)} modality models "
              f"on {len(train)} studies")
    return 0


def _cmd_train_fusion(args) -> int:
    pre_root = Path(args.pretrained)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan_dict = json.loads((pre_root / "folds.json").read_text())
    if not (out / "folds.json").exists():
        (out / "folds.json").write_text(json.dumps(plan_dict, indent=1, sort_keys=True))
    from ..dataio import FoldPlan

    plan = FoldPlan.from_dict(plan_dict)
    for fold in range(plan.k):
        models, _, config = load_models(pre_root / f"fold_{fold}" / "pretrained")
        train = _load_train_bundles(args.data, plan, fold)
        if args.corrupt_train:
            scenario = parse_scenario(args.corrupt_train)
            train = apply_scenario(train, scenario, config.seed)
        aaf_model, history = train_fusion(train, models, config)
        save_fused(out / f"fold_{fold}" / "fused", models, aaf_model, config)
        log_path = out / f"fold_{fold}" / "fusion_log.csv"
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss_fusion"])
            for row in history:
                writer.writerow([row["epoch"], row["loss_fusion"]])
        print(f"fold {fold}: fusion BCE {history[0]['loss_fusion']:.4f} -> "
              f"{history[-1]['loss_fusion']:.4f}")
    return 0


def _cmd_evaluate(args) -> int:
    scenario = parse_scenario(args.scenario)
    report = run_scenario(scenario, args.data, args.ckpt, seed=args.seed,
                          f1_threshold=args.f1_threshold)
    report.save(args.report)
    print(f"{report.scenario}: AUROC {report.mean['auroc']:.4f} "
          f"(+-{report.std['auroc']:.4f}), F1 {report.mean['f1']:.4f} "
          f"(+-{report.std['f1']:.4f}) over {len(report.folds)} folds")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck()
    failures = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max rel err {r.max_rel_err:.3e} (tol {r.tol:g})")
        if not r.passed:
            failures.append(r.name)
    if failures:
        print(f"{len(failures)} gradient check(s) failed: {', '.join(failures)}")
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def _cmd_report(args) -> int:
    runs = Path(args.runs)
    reports = [json.loads(p.read_text()) for p in sorted(runs.glob("*.json"))]
    if not reports:
        print(f"no report JSON files under {runs}", file=sys.stderr)
        return 1
    rows = grid_csv_rows(reports)
    fields = ["missing_ratio", "snr_db", "auroc_mean", "auroc_std",
              "auroc_mean_x100", "auroc_std_x100"]
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} grid rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apneafusion",
        description="Multimodal sleep-apnea detection with anomaly-aware fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic PSG dataset")
    p.add_argument("--studies", type=int, required=True)
    p.add_argument("--epochs-per-study", type=int, required=True)
    p.add_argument("--apnea-rate", type=float, default=0.5)
    p.add_argument("--separability", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("prepare", help="resample/filter/epoch a raw dataset")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("corrupt", help="apply omission/noise to a prepared dataset")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["omit", "noise", "both"], required=True)
    p.add_argument("--omission-ratio", type=float, default=0.0)
    p.add_argument("--snr-db", type=float, default=30.0)
    p.add_argument("--noise-chance", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None, help="corruption log path (JSONL)")
    p.set_defaults(func=_cmd_corrupt)

    p = sub.add_parser("pretrain", help="step 1: unimodal pretraining per fold")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="TrainConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--corrupt-train", default=None,
                   help="scenario string to corrupt training data (extension)")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train-fusion", help="step 2: train the fusion head")
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corrupt-train", default=None,
                   help="scenario string to corrupt training data (extension)")
    p.set_defaults(func=_cmd_train_fusion)

    p = sub.add_parser("evaluate", help="run one scenario over all test folds")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenario", required=True,
                   help="clean | missing:ratio=R | noisy:snr=S | "
                        "both:ratio=R,snr=S | ablate:modalities=EEG+EOG")
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--f1-threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate report JSONs into a grid CSV")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
