"""Metrics and experiment harnesses.

Counting MAE over a split, loss-term ablations (diversity off, prototype-to-
feature off) with distance tables and localization rates, and the K and tau
sweeps. Every harness trains all its runs on one dataset and asserts the
manifest hash stayed the same.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import Dataset
from .interp import (GroupDistanceStats, global_top_patches,
                     intra_group_distances, patch_peak,
                     export_prototype_gallery, _similarity_stack)
from .model import CountModel, FeatureExtractor, ModelConfig
from .training import TrainConfig, compute_features, pretrain_extractor, train

EVAL_CSV_HEADER = ("sample_id", "true_count", "predicted_count", "abs_error")
ABLATION_CSV_HEADER = ("variant", "seed", "mae", "cell_min", "cell_avg",
                       "bg_min", "bg_avg", "cell_rate", "bg_rate",
                       "manifest_hash")
SWEEP_K_CSV_HEADER = ("k", "seed", "mae")
SWEEP_TAU_CSV_HEADER = ("tau", "seed", "mae")

VARIANTS = ("full", "no_diversity", "no_proto_feature")


# -- reports -------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-image counting errors over one split plus their mean."""

    rows: list[tuple[int, float, float, float]]  # (id, true, predicted, abs err)
    mae: float
    seed: int
    config: dict[str, str] = field(default_factory=dict)


@dataclass
class AblationReport:
    """One trained variant: its MAE, prototype spread, and localization rates.

    cell_rate and bg_rate are the fractions of cell and background prototypes
    whose top-1 global patch peaks on above-median GT density; for background
    prototypes that is the failure direction.
    """

    variant: str
    seed: int
    mae: float
    distances: GroupDistanceStats
    cell_rate: float
    bg_rate: float
    manifest_hash: str


# -- MAE -----------------------------------------------------------------------


def _predicted_counts(model, samples, features=None, batch: int = 16) -> np.ndarray:
    from .tensor import Tensor, no_grad
    preds = []
    with no_grad():
        if features is None:
            for start in range(0, len(samples), batch):
                x = np.stack([s.image for s in samples[start:start + batch]])
                preds.append(np.atleast_1d(model.forward(Tensor(x)).density.data.sum(axis=(-2, -1))))
        else:
            for start in range(0, features.shape[0], batch):
                part = Tensor(features[start:start + batch])
                preds.append(np.atleast_1d(model.forward_from_features(part).density.data.sum(axis=(-2, -1))))
    return np.concatenate(preds)


def mae(model, samples, features=None, seed: int = 0,
        config: dict[str, str] | None = None) -> EvalReport:
    """Mean absolute counting error over ``samples``, one row per image."""
    if not samples:
        raise ValueError("mae: empty split")
    preds = _predicted_counts(model, samples, features)
    rows = []
    for sample, pred in zip(samples, preds):
        true = float(len(sample.annotation))
        rows.append((sample.sample_id, true, float(pred), abs(float(pred) - true)))
    value = float(np.mean([r[3] for r in rows]))
    return EvalReport(rows, value, seed, dict(config or {}))


def constant_predictor_mae(value: float, counts) -> float:
    """MAE of always predicting ``value`` against the given true counts."""
    arr = np.asarray(list(counts), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("constant_predictor_mae: no counts")
    return float(np.abs(arr - value).mean())


def constant_baseline_mae(dataset: Dataset) -> float:
    """MAE on the test split of always predicting the train-mean count."""
    train_counts = [len(s.annotation) for s in dataset.train]
    test_counts = [len(s.annotation) for s in dataset.test]
    return constant_predictor_mae(float(np.mean(train_counts)), test_counts)


def write_eval_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(EVAL_CSV_HEADER)
        for sid, true, pred, err in report.rows:
            writer.writerow([sid, repr(true), repr(pred), repr(err)])
    with open(f"{path}.config.txt", "w") as f:
        f.write(f"mae = {report.mae!r}\nseed = {report.seed}\n")
        for key in sorted(report.config):
            f.write(f"{key} = {report.config[key]}\n")


# -- localization --------------------------------------------------------------


def localization_rates(model: CountModel, dataset: Dataset,
                       features=None, q: float = 99) -> tuple[float, float]:
    """Fraction of (cell, background) prototypes whose top-1 global patch
    peaks where GT density exceeds the per-image median."""
    patches = global_top_patches(model, dataset, k=1, q=q, features=features)
    sims = _similarity_stack(model, dataset.train, features)
    by_id = {s.sample_id: n for n, s in enumerate(dataset.train)}
    k_cell = model.config.k_cell
    hits = []
    for proto, boxes in enumerate(patches):
        box = boxes[0]
        n = by_id[box.image_id]
        h, w = patch_peak(box, sims[n, proto])
        gt = dataset.train[n].density_gt
        hits.append(bool(gt[h, w] > np.median(gt)))
    cell = hits[:k_cell]
    bg = hits[k_cell:]
    return (sum(cell) / len(cell) if cell else 0.0,
            sum(bg) / len(bg) if bg else 0.0)


# -- ablation ------------------------------------------------------------------


def variant_loss_config(base, variant: str):
    """The variant's LossConfig: identical to base except for zeroed lambdas."""
    if variant == "full":
        return replace(base)
    if variant == "no_diversity":
        return replace(base, lambda3=0.0)
    if variant == "no_proto_feature":
        return replace(base, lambda2=0.0)
    raise ValueError(f"unknown ablation variant {variant!r}")


def _shared_extractor(dataset: Dataset, config: TrainConfig,
                      extractor: FeatureExtractor | None):
    if extractor is None:
        extractor, _ = pretrain_extractor(dataset, config)
    if not extractor.frozen:
        raise ValueError("harness extractor must be frozen")
    return extractor


def run_ablation(dataset: Dataset, config: TrainConfig, seeds=(0, 1, 2, 3, 4),
                 model_config: ModelConfig | None = None,
                 extractor: FeatureExtractor | None = None,
                 variants=VARIANTS, out_dir=None,
                 feature_cache=None) -> list[AblationReport]:
    """Train every variant at every seed on the same dataset and extractor.

    Variants differ only in the lambdas zeroed out of the base loss config.
    Emits per-run reports plus a distance table averaging both prototype
    groups' min and mean pairwise distances over seeds.
    """
    model_config = model_config or ModelConfig()
    extractor = _shared_extractor(dataset, config, extractor)
    if feature_cache is None:
        feature_cache = compute_features(extractor, dataset.train)
    test_features = compute_features(extractor, dataset.test)

    reports = []
    for seed in seeds:
        for variant in variants:
            run_config = replace(config, seed=seed,
                                 loss=variant_loss_config(config.loss, variant))
            model = CountModel(model_config, extractor, seed=seed)
            model, _ = train(model, dataset, run_config,
                             feature_cache=feature_cache)
            report = mae(model, dataset.test, features=test_features, seed=seed)
            cell_rate, bg_rate = localization_rates(model, dataset,
                                                    features=feature_cache)
            stats = intra_group_distances(model.prototype_layer.prototypes,
                                          model_config.k_cell, model_config.k_bg)
            reports.append(AblationReport(variant, seed, report.mae, stats,
                                          cell_rate, bg_rate,
                                          dataset.manifest_hash))
    hashes = {r.manifest_hash for r in reports}
    if len(hashes) > 1:
        raise RuntimeError(f"ablation runs saw different manifests: {hashes}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_ablation_csv(reports, os.path.join(out_dir, "ablation.csv"))
        with open(os.path.join(out_dir, "distance_table.txt"), "w") as f:
            f.write(format_distance_table(reports))
    return reports


def write_ablation_csv(reports, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_CSV_HEADER)
        for r in reports:
            d = r.distances
            writer.writerow([r.variant, r.seed, repr(r.mae),
                             repr(d.cell_min), repr(d.cell_avg),
                             repr(d.bg_min), repr(d.bg_avg),
                             repr(r.cell_rate), repr(r.bg_rate),
                             r.manifest_hash])


def format_distance_table(reports) -> str:
    """Per-variant prototype distance table, seed-averaged:
    Minimum/Average columns for the cell and background groups."""
    lines = [f"{'variant':<18} {'cell min':>9} {'cell avg':>9} "
             f"{'bg min':>9} {'bg avg':>9}"]
    seen = []
    for r in reports:
        if r.variant not in seen:
            seen.append(r.variant)
    for variant in seen:
        rows = [r.distances for r in reports if r.variant == variant]
        lines.append(f"{variant:<18} "
                     f"{np.mean([d.cell_min for d in rows]):>9.4f} "
                     f"{np.mean([d.cell_avg for d in rows]):>9.4f} "
                     f"{np.mean([d.bg_min for d in rows]):>9.4f} "
                     f"{np.mean([d.bg_avg for d in rows]):>9.4f}")
    return "\n".join(lines) + "\n"


# -- sweeps --------------------------------------------------------------------


def sweep_k(dataset: Dataset, config: TrainConfig, k_values=(2, 4, 6, 8),
            seeds=(0, 1, 2, 3, 4), extractor: FeatureExtractor | None = None,
            out_dir=None, feature_cache=None) -> list[tuple[int, int, float]]:
    """Train one model per total prototype count K per seed, equal group
    split, and report test MAE rows (K, seed, MAE)."""
    for k in k_values:
        if k < 2 or k % 2:
            raise ValueError(f"sweep_k: K values must be even and >= 2, got {k}")
    extractor = _shared_extractor(dataset, config, extractor)
    if feature_cache is None:
        feature_cache = compute_features(extractor, dataset.train)
    test_features = compute_features(extractor, dataset.test)

    rows = []
    for k in k_values:
        model_config = ModelConfig(k_cell=k // 2, k_bg=k // 2)
        for seed in seeds:
            model = CountModel(model_config, extractor, seed=seed)
            model, _ = train(model, dataset, replace(config, seed=seed),
                             feature_cache=feature_cache)
            report = mae(model, dataset.test, features=test_features, seed=seed)
            rows.append((k, seed, report.mae))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_sweep_csv(os.path.join(out_dir, "sweep_k.csv"),
                         SWEEP_K_CSV_HEADER, rows)
    return rows


def sweep_tau(dataset: Dataset, config: TrainConfig,
              tau_values=(0.0, 0.4, 0.8), seeds=(0,),
              model_config: ModelConfig | None = None,
              extractor: FeatureExtractor | None = None,
              out_dir=None, feature_cache=None,
              gallery_k: int = 3) -> list[tuple[float, int, float]]:
    """Retrain per diversity threshold tau and emit a patch gallery per run
    for qualitative comparison, plus MAE rows (tau, seed, MAE)."""
    model_config = model_config or ModelConfig()
    extractor = _shared_extractor(dataset, config, extractor)
    if feature_cache is None:
        feature_cache = compute_features(extractor, dataset.train)
    test_features = compute_features(extractor, dataset.test)

    rows = []
    for tau in tau_values:
        for seed in seeds:
            run_config = replace(config, seed=seed,
                                 loss=replace(config.loss, tau_cell=tau,
                                              tau_bg=tau))
            model = CountModel(model_config, extractor, seed=seed)
            model, _ = train(model, dataset, run_config,
                             feature_cache=feature_cache)
            report = mae(model, dataset.test, features=test_features, seed=seed)
            rows.append((tau, seed, report.mae))
            if out_dir:
                gallery = os.path.join(out_dir, f"tau_{tau:g}_seed{seed}")
                export_prototype_gallery(model, dataset, gallery, k=gallery_k,
                                         features=feature_cache)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_sweep_csv(os.path.join(out_dir, "sweep_tau.csv"),
                         SWEEP_TAU_CSV_HEADER, rows)
    return rows


def _write_sweep_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0], row[1], repr(row[2])])
