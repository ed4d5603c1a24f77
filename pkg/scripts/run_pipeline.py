"""End-to-end pipeline on a synthetic dataset.

Generates data, pretrains and freezes the extractor, trains the prototype
model, then writes the evaluation CSV and the patch gallery. Everything
lands under --out:

    data/          images, annotations, density maps, manifest
    extractor/     frozen extractor weights and pretraining curve
    run/           checkpoints, history.csv, projections.csv
    eval.csv       per-image counting errors
    gallery/       top-k patches, previews, similarity maps

Default configuration matches the package defaults (128x128 scenes,
counts 5-80, K=4+4). Expect roughly 2-3 minutes on one core.
"""

import argparse
import os
import time

from protodensity.config import build_run_config, write_resolved_config
from protodensity.datagen import generate_dataset, load_dataset
from protodensity.evaluate import constant_baseline_mae, mae, write_eval_csv
from protodensity.interp import export_prototype_gallery
from protodensity.model import CountModel, save_extractor
from protodensity.training import compute_features, pretrain_extractor, train


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output root directory")
    parser.add_argument("--config", help="dotted-key config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        default=[], help="override one config key")
    parser.add_argument("--n-train", type=int, default=100)
    parser.add_argument("--n-test", type=int, default=50)
    parser.add_argument("--gallery-k", type=int, default=3)
    return parser.parse_args()


def main():
    args = parse_args()
    config = build_run_config(args.config, args.set)
    write_resolved_config(config, args.out, {"command": "run_pipeline"})

    data_dir = os.path.join(args.out, "data")
    t0 = time.perf_counter()
    generate_dataset(config.scene, args.n_train, args.n_test, data_dir)
    dataset = load_dataset(data_dir)
    print(f"[{time.perf_counter() - t0:6.1f}s] generated "
          f"{args.n_train}+{args.n_test} samples")

    extractor, history = pretrain_extractor(dataset, config.train)
    save_extractor(extractor, os.path.join(args.out, "extractor"))
    print(f"[{time.perf_counter() - t0:6.1f}s] pretrained extractor, "
          f"mse {history[0]:.4f} -> {history[-1]:.4f}")

    features = compute_features(extractor, dataset.train)
    model = CountModel(config.model, extractor, seed=config.train.seed)
    model, train_history = train(model, dataset, config.train,
                                 out_dir=os.path.join(args.out, "run"),
                                 feature_cache=features)
    print(f"[{time.perf_counter() - t0:6.1f}s] trained {train_history.epochs} "
          f"epochs, {len(train_history.projections)} projections")

    report = mae(model, dataset.test, seed=config.train.seed)
    write_eval_csv(report, os.path.join(args.out, "eval.csv"))
    baseline = constant_baseline_mae(dataset)
    print(f"[{time.perf_counter() - t0:6.1f}s] test MAE {report.mae:.3f} "
          f"(train-mean baseline {baseline:.3f})")

    export_prototype_gallery(model, dataset, os.path.join(args.out, "gallery"),
                             k=args.gallery_k, features=features)
    print(f"[{time.perf_counter() - t0:6.1f}s] wrote gallery to "
          f"{os.path.join(args.out, 'gallery')}")


if __name__ == "__main__":
    main()
