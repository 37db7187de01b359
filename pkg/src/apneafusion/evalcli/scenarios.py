"""Corruption scenarios over test folds and the resulting metric reports.

A scenario names one test-time degradation: ``clean``, ``missing@ratio``,
``noisy@snr``, ``both@(ratio,snr)``, or ``ablate@modality-set``. Models are
trained on clean folds; the scenario corrupts test folds only. Reports are a
pure function of (data, checkpoints, scenario, seed) apart from the recorded
wall-clock runtime.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..corrupt import CorruptionSpec, ablate_modalities, corrupt_dataset
from ..dataio import FoldPlan, load_bundle
from ..rng import stable_seed
from ..sigprep import MODALITIES
from ..trainer import load_models, score_epochs
from .metrics import auroc, binarize, f1


@dataclass
class Scenario:
    kind: str                      # clean | missing | noisy | both | ablate
    ratio: float = 0.0
    snr_db: float = 0.0
    noise_chance: float = 1.0
    modalities: tuple = ()

    def __post_init__(self):
        if self.kind not in ("clean", "missing", "noisy", "both", "ablate"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "ablate":
            unknown = set(self.modalities) - set(MODALITIES)
            if unknown:
                raise ValueError(f"unknown modalities {sorted(unknown)}")
            if not self.modalities:
                raise ValueError("ablate scenario needs modalities")

    def descriptor(self) -> str:
        if self.kind == "clean":
            return "clean"
        if self.kind == "missing":
            return f"missing@{self.ratio:g}"
        if self.kind == "noisy":
            return f"noisy@{self.snr_db:g}"
        if self.kind == "both":
            return f"both@({self.ratio:g},{self.snr_db:g})"
        return "ablate@" + "+".join(self.modalities)


def parse_scenario(text: str) -> Scenario:
    """Parse ``kind[:key=value,...]``, e.g. ``both:ratio=0.3,snr=20``."""
    kind, _, rest = text.strip().partition(":")
    kwargs = {}
    if rest:
        for item in rest.split(","):
            key, _, value = item.partition("=")
            if not value:
                raise ValueError(f"malformed scenario parameter {item!r}")
            kwargs[key.strip()] = value.strip()
    known = {"ratio", "snr", "chance", "modalities"}
    unknown = set(kwargs) - known
    if unknown:
        raise ValueError(f"unknown scenario parameters {sorted(unknown)}")
    return Scenario(
        kind=kind,
        ratio=float(kwargs.get("ratio", 0.0)),
        snr_db=float(kwargs.get("snr", 0.0)),
        noise_chance=float(kwargs.get("chance", 1.0)),
        modalities=tuple(kwargs["modalities"].split("+")) if "modalities" in kwargs else (),
    )


def apply_scenario(bundles, scenario: Scenario, seed: int):
    """Corrupt a list of prepared bundles per the scenario; clean is identity."""
    if scenario.kind == "clean":
        return list(bundles)
    if scenario.kind == "ablate":
        return [ablate_modalities(b, set(scenario.modalities))[0] for b in bundles]
    mode = {"missing": "omit", "noisy": "noise", "both": "both"}[scenario.kind]
    spec = CorruptionSpec(mode=mode, omission_ratio=scenario.ratio,
                          target_snr_db=scenario.snr_db,
                          noise_occurrence_chance=scenario.noise_chance, seed=seed)
    out, _ = corrupt_dataset(bundles, spec)
    return out


@dataclass
class MetricsReport:
    scenario: str
    folds: list
    mean: dict
    std: dict
    seed: int
    runtime_s: float
    f1_threshold: float = 0.5

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "folds": self.folds, "mean": self.mean,
                "std": self.std, "seed": self.seed, "runtime_s": self.runtime_s,
                "f1_threshold": self.f1_threshold}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def load_fold_bundles(data_dir, plan: FoldPlan, fold: int):
    return [load_bundle(Path(data_dir) / sid) for sid in plan.test_ids(fold)]


def run_scenario(scenario: Scenario, data_dir, ckpt_root, seed: int = 0,
                 f1_threshold: float = 0.5) -> MetricsReport:
    """Evaluate the fused model on every fold's corrupted test split."""
    ckpt_root = Path(ckpt_root)
    plan = FoldPlan.from_dict(json.loads((ckpt_root / "folds.json").read_text()))
    t0 = time.perf_counter()
    fold_rows = []
    for fold in range(plan.k):
        models, aaf_model, config = load_models(ckpt_root / f"fold_{fold}" / "fused")
        if aaf_model is None:
            raise FileNotFoundError(f"fold {fold}: fused checkpoint missing AAF head")
        test = load_fold_bundles(data_dir, plan, fold)
        corrupted = apply_scenario(test, scenario, stable_seed(seed, "scenario", fold))
        scores, labels = score_epochs(models, aaf_model, corrupted, config)
        fold_rows.append({"f1": f1(binarize(scores, f1_threshold), labels),
                          "auroc": auroc(scores, labels)})
    runtime = time.perf_counter() - t0
    mean = {k: float(np.mean([r[k] for r in fold_rows])) for k in ("f1", "auroc")}
    std = {k: float(np.std([r[k] for r in fold_rows])) for k in ("f1", "auroc")}
    return MetricsReport(scenario.descriptor(), fold_rows, mean, std, seed,
                         runtime, f1_threshold)


def grid_csv_rows(reports) -> list:
    """Table rows (missing_ratio x snr_db) from a pile of reports."""
    rows = []
    for rep in reports:
        desc = rep["scenario"] if isinstance(rep, dict) else rep.scenario
        mean = rep["mean"] if isinstance(rep, dict) else rep.mean
        std = rep["std"] if isinstance(rep, dict) else rep.std
        ratio = snr = ""
        if desc.startswith("missing@"):
            ratio = desc.split("@")[1]
        elif desc.startswith("noisy@"):
            snr = desc.split("@")[1]
        elif desc.startswith("both@"):
            ratio, snr = desc[len("both@("):-1].split(",")
        elif desc == "clean":
            ratio, snr = "0", ""
        else:
            continue  # ablations do not fit the ratio x snr grid
        rows.append({"missing_ratio": ratio, "snr_db": snr,
                     "auroc_mean": mean["auroc"], "auroc_std": std["auroc"],
                     "auroc_mean_x100": 100 * mean["auroc"],
                     "auroc_std_x100": 100 * std["auroc"]})
    rows.sort(key=lambda r: (r["missing_ratio"], r["snr_db"]))
    return rows
