"""Command line entry point for the full pipeline.

Subcommands: gen-data, pretrain, train, eval, explain, ablate, sweep-k,
sweep-tau, gradcheck. Exit code 0 on success, 1 on usage or validation
errors, 2 on runtime failures. Heavy imports happen after flag parsing so
``--threads`` can cap the BLAS pool before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

SEED_ENV = "PROTODENSITY_SEED"

_THREAD_ENV = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS")


class UsageError(Exception):
    """Bad command line; carries the message to print before exiting 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- small parsers -------------------------------------------------------------


def _int_list(raw: str) -> list[int]:
    try:
        return [int(p) for p in raw.split(",") if p.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {raw!r}") from exc


def _float_list(raw: str) -> list[float]:
    try:
        return [float(p) for p in raw.split(",") if p.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {raw!r}") from exc


def _loc(raw: str) -> tuple[int, int]:
    parts = _int_list(raw)
    if len(parts) != 2:
        raise UsageError(f"--loc expects H,W, got {raw!r}")
    return parts[0], parts[1]


def _load_run_config(args) -> "RunConfig":
    from .config import build_run_config

    config = build_run_config(getattr(args, "config", None),
                              getattr(args, "set", None) or ())
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        from dataclasses import replace
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
        config = type(config)(replace(config.scene, seed=seed), config.model,
                              replace(config.train, seed=seed))
    return config


def _echo(config, out_dir, **extra) -> None:
    from .config import write_resolved_config

    write_resolved_config(config, out_dir,
                          {k: str(v) for k, v in extra.items()})


def _load_frozen_extractor(path):
    from .model import load_extractor

    return load_extractor(path) if path else None


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .datagen import generate_dataset

    config = _load_run_config(args)
    _echo(config, args.out, command="gen-data", n_train=args.n_train,
          n_test=args.n_test)
    manifest = generate_dataset(config.scene, args.n_train, args.n_test, args.out)
    print(f"wrote {args.n_train}+{args.n_test} samples, manifest {manifest}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    import csv

    from .datagen import load_dataset
    from .model import save_extractor
    from .training import pretrain_extractor

    config = _load_run_config(args)
    dataset = load_dataset(args.data)
    extractor, history = pretrain_extractor(dataset, config.train)
    save_extractor(extractor, args.out)
    _echo(config, args.out, command="pretrain", data=args.data)
    with open(os.path.join(args.out, "pretrain_history.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("epoch", "mse"))
        for epoch, mse in enumerate(history):
            writer.writerow([epoch, repr(mse)])
    print(f"pretrained extractor: mse {history[0]:.6f} -> {history[-1]:.6f}, "
          f"saved to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .datagen import load_dataset
    from .model import CountModel, load_extractor
    from .training import train

    config = _load_run_config(args)
    dataset = load_dataset(args.data)
    extractor = load_extractor(args.extractor)
    _echo(config, args.out, command="train", data=args.data,
          extractor=args.extractor)
    model = CountModel(config.model, extractor, seed=config.train.seed)
    model, history = train(model, dataset, config.train, out_dir=args.out)
    last = history.val_mae[-1] if history.val_mae else float("nan")
    print(f"trained {history.epochs} epochs, "
          f"{len(history.projections)} projections, final val MAE {last:.3f}")
    return EXIT_OK


def _model_snapshot(model) -> dict[str, str]:
    c = model.config
    return {"model.k_cell": str(c.k_cell), "model.k_bg": str(c.k_bg),
            "model.d": str(c.d), "model.epsilon": repr(c.epsilon)}


def cmd_eval(args) -> int:
    from .datagen import load_dataset
    from .evaluate import mae, write_eval_csv
    from .model import load_checkpoint

    model = load_checkpoint(args.model)
    dataset = load_dataset(args.data)
    report = mae(model, dataset.test, config=_model_snapshot(model))
    write_eval_csv(report, args.out)
    print(f"test MAE {report.mae:.4f} over {len(report.rows)} images -> {args.out}")
    return EXIT_OK


def cmd_explain(args) -> int:
    from .datagen import load_dataset
    from .interp import (explain_location, export_prototype_gallery,
                         write_explanation_csv)
    from .model import load_checkpoint

    model = load_checkpoint(args.model)
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    patches = export_prototype_gallery(model, dataset, args.out,
                                       k=args.global_k, q=args.percentile)
    print(f"wrote {sum(len(p) for p in patches)} patches for "
          f"{len(patches)} prototypes to {args.out}")
    if args.image is not None:
        if args.loc is None:
            raise UsageError("--image requires --loc H,W")
        by_id = {s.sample_id: s for s in dataset.all_samples}
        if args.image not in by_id:
            raise UsageError(f"no sample with id {args.image} in {args.data}")
        h, w = args.loc
        explanation = explain_location(model, by_id[args.image].image, h, w)
        path = os.path.join(args.out,
                            f"explanation_img{args.image:04d}_h{h}w{w}.csv")
        write_explanation_csv(explanation, path)
        print(f"density at ({h},{w}) = {explanation.density:.6f} -> {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .datagen import load_dataset
    from .evaluate import run_ablation, variant_loss_config

    config = _load_run_config(args)
    dataset = load_dataset(args.data)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    for variant in variants:
        variant_loss_config(config.train.loss, variant)
    _echo(config, args.out, command="ablate", data=args.data,
          variants=",".join(variants), seeds=args.seeds)
    reports = run_ablation(dataset, config.train, seeds=_int_list(args.seeds),
                           model_config=config.model,
                           extractor=_load_frozen_extractor(args.extractor),
                           variants=variants, out_dir=args.out)
    for r in reports:
        print(f"{r.variant:<17} seed {r.seed}: MAE {r.mae:.3f} "
              f"min dist cell {r.distances.cell_min:.4f} bg {r.distances.bg_min:.4f}")
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    from .datagen import load_dataset
    from .evaluate import sweep_k

    config = _load_run_config(args)
    dataset = load_dataset(args.data)
    _echo(config, args.out, command="sweep-k", data=args.data, k=args.k,
          seeds=args.seeds)
    rows = sweep_k(dataset, config.train, k_values=_int_list(args.k),
                   seeds=_int_list(args.seeds),
                   extractor=_load_frozen_extractor(args.extractor),
                   out_dir=args.out)
    for k, seed, value in rows:
        print(f"K={k} seed {seed}: MAE {value:.3f}")
    return EXIT_OK


def cmd_sweep_tau(args) -> int:
    from .datagen import load_dataset
    from .evaluate import sweep_tau

    config = _load_run_config(args)
    dataset = load_dataset(args.data)
    _echo(config, args.out, command="sweep-tau", data=args.data, tau=args.tau,
          seeds=args.seeds)
    rows = sweep_tau(dataset, config.train, tau_values=_float_list(args.tau),
                     seeds=_int_list(args.seeds), model_config=config.model,
                     extractor=_load_frozen_extractor(args.extractor),
                     out_dir=args.out)
    for tau, seed, value in rows:
        print(f"tau={tau:g} seed {seed}: MAE {value:.3f}")
    return EXIT_OK


GRADCHECK_TOLERANCE = 1e-5


def run_gradcheck_suite(trials: int = 20, seed: int = 0) -> dict[str, float]:
    """Max finite-difference relative error per component over random small
    instances (B=2, K=4, d=8, 6x6 maps)."""
    import numpy as np

    from . import tensor as T
    from .losses import (LossConfig, density_loss, diversity_loss,
                         proto_feature_loss, total_loss)
    from .model import similarity_from_distance
    from .tensor import Tensor, conv1x1, gradcheck_rel_error, sigmoid, tsum

    rng = np.random.default_rng([seed, 17])
    b, k, d, hw = 2, 4, 8, 6
    worst: dict[str, float] = {}

    def record(name: str, err: float) -> None:
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(trials):
        pred = rng.normal(size=(b, hw, hw))
        gt = np.abs(rng.normal(size=(b, hw, hw)))
        record("density_loss", gradcheck_rel_error(
            lambda t: density_loss(t, Tensor(gt)), pred,
            _grad_of(lambda t: density_loss(t, Tensor(gt)), pred)))

        dist = np.abs(rng.normal(size=(b, k, hw, hw))) + 0.05
        record("proto_feature_loss", gradcheck_rel_error(
            lambda t: proto_feature_loss(t, Tensor(gt), 2, 2), dist,
            _grad_of(lambda t: proto_feature_loss(t, Tensor(gt), 2, 2), dist)))

        protos = rng.uniform(0.05, 1.0, size=(k, d))
        record("diversity_loss", gradcheck_rel_error(
            lambda t: diversity_loss(t, 2, 2, 0.1, 0.1), protos,
            _grad_of(lambda t: diversity_loss(t, 2, 2, 0.1, 0.1), protos)))

        config = LossConfig(tau_cell=0.1, tau_bg=0.1)
        record("total_loss", gradcheck_rel_error(
            lambda t: total_loss(Tensor(pred), Tensor(gt), t, Tensor(protos),
                                 2, 2, config)[0], dist,
            _grad_of(lambda t: total_loss(Tensor(pred), Tensor(gt), t,
                                          Tensor(protos), 2, 2, config)[0], dist)))

        feats = rng.normal(size=(b, d, hw, hw))
        weight = rng.normal(size=(d, d)) * 0.4
        theta = rng.normal(size=(1, k)) * 0.1

        def end_to_end(t):
            processed = sigmoid(conv1x1(t, Tensor(weight)))
            distances = T.distance_map(processed, Tensor(protos))
            sims = similarity_from_distance(distances, 1e-4)
            return tsum(conv1x1(sims, Tensor(theta)))

        record("count_through_model", gradcheck_rel_error(
            end_to_end, feats, _grad_of(end_to_end, feats)))
    return worst


def _grad_of(scalar_fn, at):
    from .tensor import Tensor

    leaf = Tensor(at, requires_grad=True)
    scalar_fn(leaf).backward()
    return leaf.grad


def cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(trials=args.trials)
    failed = False
    for name, err in results.items():
        print(f"{name:<22} max rel err {err:.3e}")
        failed = failed or err > GRADCHECK_TOLERANCE
    if failed:
        print(f"FAIL: some gradients exceed {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all gradients within {GRADCHECK_TOLERANCE:g}")
    return EXIT_OK


# -- wiring --------------------------------------------------------------------


def _add_config_flags(parser) -> None:
    parser.add_argument("--config", help="dotted-key config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")


def build_parser() -> _Parser:
    parser = _Parser(prog="protodensity",
                     description="Prototype-based density-map cell counting.")
    parser.add_argument("--threads", type=int, metavar="N",
                        help="cap BLAS/worker threads")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=100)
    p.add_argument("--n-test", type=int, default=50)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain and freeze the extractor")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the counting model")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--extractor", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="counting MAE on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="patch galleries and explanations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--global-k", type=int, default=3, dest="global_k")
    p.add_argument("--percentile", type=float, default=99)
    p.add_argument("--image", type=int, help="sample id to explain")
    p.add_argument("--loc", type=_loc, help="feature location H,W")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="loss-term ablation runs")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extractor", help="pretrained extractor (else pretrain)")
    p.add_argument("--variants", default="full,no_diversity,no_proto_feature")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-k", help="prototype-count sweep")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extractor")
    p.add_argument("--k", default="2,4,6,8")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("sweep-tau", help="diversity-threshold sweep")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extractor")
    p.add_argument("--tau", default="0,0.4,0.8")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_sweep_tau)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            for name in _THREAD_ENV:
                os.environ[name] = str(args.threads)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage() + "a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
