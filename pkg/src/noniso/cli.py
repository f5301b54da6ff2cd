"""Command line entry point: ``noniso <command> [flags]``.

Exit codes: 0 ok, 1 verification or training failure, 2 usage error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import inspect
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import FormatError, NonisoError, ParameterError, ValidationError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("NONISO_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"NONISO_SEED must be an integer, got {env!r}") from None


def _config(args):
    from .pipeline import TrainConfig, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    over = {}
    for flag, key in (("epochs", "epochs"), ("ae_epochs", "ae_epochs"), ("k", "k"), ("kind", "kind"),
                      ("n", "n_predict"), ("argmin", "argmin"), ("delta", "delta")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    over["seed"] = _seed(args)
    return cfg.with_(**over).validate()


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump(obj, path: Path | None):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is not None:
        path.write_text(text)
    sys.stdout.write(text)


def _load_data(args):
    from .data import load_dataset

    if not args.data:
        raise UsageError("--data is required")
    return load_dataset(args.data)


def _check_data_matches(ds, cfg):
    if ds.config.to_dict() != cfg.data.to_dict():
        raise ValidationError("dataset config differs from the run config's data section")


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args):
    from .data import make_dataset, save_dataset

    cfg = _config(args)
    out = _out_dir(args)
    ds = make_dataset(cfg.data, cfg.seed)
    save_dataset(ds, out)
    _dump({"train": len(ds.train), "val": len(ds.val), "test": len(ds.test),
           "mean_velocity": ds.test.mean_velocity, "noise_bound": cfg.data.noise_bound()}, None)
    return EXIT_OK


def cmd_schedule(args):
    from .data import make_chain_skeleton
    from .schedule import make_schedule, validate_schedule, write_schedule_csv
    from .skeleton import correlation_for_skeleton, load_skeleton

    sk = load_skeleton(args.skeleton) if args.skeleton else make_chain_skeleton(args.joints)
    corr = correlation_for_skeleton(sk, base=args.correlation, norm_kind=args.norm)
    s = make_schedule(corr, T=args.T, kind=args.kind)
    rep = validate_schedule(s)
    if args.out:
        write_schedule_csv(s, args.out)
    _dump({"kind": s.kind, "T": s.T, "J": s.J, "passed": rep.passed,
           "checks": [{"name": c.name, "max_violation": c.max_violation, "passed": c.passed} for c in rep.checks]},
          None)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_verify(args):
    from .verify import SUITES

    names = list(SUITES) if args.suite == "all" else [args.suite]
    seed = _seed(args)
    results = []
    for name in names:
        fn = SUITES[name]
        params = inspect.signature(fn).parameters
        kw = {}
        if "seed" in params:
            kw["seed"] = seed
        if args.samples is not None and "samples" in params:
            kw["samples"] = args.samples
        if args.tol is not None:
            kw["cov_tol" if "cov_tol" in params else "tol"] = args.tol
        results.append(fn(**kw))
    report = {"passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
    failed = [(r.suite, c) for r in results for c in r.checks if not c.passed]
    for suite, c in failed[:20]:
        sys.stderr.write(f"FAIL {suite}: {c.name} violation={c.violation:.3e} tol={c.tol:.1e} {c.detail}\n")
    _dump(report, Path(args.out) if args.out else None)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_train_ae(args):
    from .pipeline import reconstruction_l1, save_autoencoder, train_autoencoder

    cfg = _config(args)
    ds = _load_data(args)
    _check_data_matches(ds, cfg)
    out = _out_dir(args)
    r = train_autoencoder(cfg, ds.train)
    save_autoencoder(out / "autoencoder.nitg", r.model)
    summary = {"losses": r.losses, "max_lengths": r.lengths, "val_l1_clean": reconstruction_l1(r.model, ds.val)}
    _dump(summary, out / "autoencoder_log.json")
    return EXIT_OK


def cmd_train_diff(args):
    from .pipeline import load_autoencoder, save_latent_model, train_denoiser

    cfg = _config(args)
    ds = _load_data(args)
    _check_data_matches(ds, cfg)
    out = _out_dir(args)
    if not args.ae:
        raise UsageError("--ae is required")
    ae = load_autoencoder(args.ae, cfg)
    r = train_denoiser(cfg, ds.train, ae)
    if r.ae_hash_before != r.ae_hash_after:
        raise NonisoError("autoencoder weights changed during denoiser training")
    save_latent_model(out / "denoiser.nitg", r.model)
    _dump({"losses": r.losses, "autoencoder_sha256": r.ae_hash_before}, out / "denoiser_log.json")
    return EXIT_OK


def _load_model(args, cfg):
    from .pipeline import load_autoencoder, load_latent_model

    if not args.ae or not args.denoiser:
        raise UsageError("--ae and --denoiser are required")
    return load_latent_model(args.denoiser, load_autoencoder(args.ae, cfg), cfg)


def cmd_predict(args):
    from .data import load_motion, save_predictions
    from .pipeline import predict

    cfg = _config(args)
    model = _load_model(args, cfg)
    if args.past:
        past, _ = load_motion(args.past)
        past = past.astype(np.float64)[None]
    else:
        past = _load_data(args).test.past
    preds = predict(model, past, cfg.n_predict, cfg.seed, threads=args.threads)
    if not args.out:
        raise UsageError("--out is required")
    save_predictions(args.out, preds.reshape(-1, *preds.shape[2:]), cfg.data.frame_rate)
    _dump({"segments": int(preds.shape[0]), "samples": int(preds.shape[1]), "path": args.out}, None)
    return EXIT_OK


def _grouped_predictions(args, split):
    from .data import load_predictions

    if not args.pred:
        raise UsageError("--pred is required")
    flat = load_predictions(args.pred).astype(np.float64)
    S = len(split)
    if flat.shape[0] % S:
        raise ValidationError(f"{flat.shape[0]} motions cannot be split evenly over {S} segments")
    return flat.reshape(S, flat.shape[0] // S, *flat.shape[1:])


def cmd_evaluate(args):
    from .pipeline import evaluate

    cfg = _config(args)
    ds = _load_data(args)
    out = _out_dir(args)
    preds = _grouped_predictions(args, ds.test)
    rep = evaluate(preds, ds.test, cfg, reference=args.reference)
    (out / "metrics.json").write_text(rep.to_json())
    rep.write_segments_csv(out / "segments.csv")
    sys.stdout.write(rep.to_json())
    return EXIT_OK


def cmd_curves(args):
    from .pipeline import write_curves

    cfg = _config(args)
    ds = _load_data(args)
    out = _out_dir(args)
    paths = write_curves(out, _grouped_predictions(args, ds.test), cfg)
    _dump(paths, None)
    return EXIT_OK


def cmd_demo(args):
    from .pipeline import run_demo

    cfg = _config(args)
    out = _out_dir(args)
    res = run_demo(out, cfg, threads=args.threads)
    _dump({"metrics": res.report.to_dict(), "zero_velocity": res.baseline.to_dict(),
           "wall_clock": res.manifest.wall_clock}, None)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="noniso", description="Nonisotropic skeleton diffusion toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: $NONISO_SEED or 0)")
        sp.add_argument("--out", default=None, help="output path or directory")
        if config:
            sp.add_argument("--config", default=None, help="JSON run config")
        return sp

    def training(sp):
        sp.add_argument("--epochs", type=int, default=None, help="denoiser epochs")
        sp.add_argument("--ae-epochs", dest="ae_epochs", type=int, default=None, help="autoencoder epochs")
        sp.add_argument("--k", type=int, default=None, help="relaxation candidates per step")
        sp.add_argument("--kind", default=None, help="schedule kind (blend, pure_iso, pure_noniso, discarded)")
        sp.add_argument("--argmin", choices=("motion", "latent"), default=None, help="candidate selection space")

    def data_model(sp):
        sp.add_argument("--data", default=None, help="dataset directory")
        sp.add_argument("--ae", default=None, help="autoencoder checkpoint")
        sp.add_argument("--denoiser", default=None, help="denoiser checkpoint")

    sp = common(sub.add_parser("gen-data", help="generate the synthetic dataset"))
    sp.set_defaults(fn=cmd_gen_data)

    sp = common(sub.add_parser("schedule", help="inspect and check a noise schedule"), config=False)
    sp.add_argument("--joints", type=int, default=7, help="chain length when no skeleton file is given")
    sp.add_argument("--skeleton", default=None, help="skeleton JSON file")
    sp.add_argument("--T", type=int, default=10, help="diffusion steps")
    sp.add_argument("--kind", default="blend", help="schedule kind")
    sp.add_argument("--correlation", default="adjacency", choices=("adjacency", "closure", "closure_hub", "identity"))
    sp.add_argument("--norm", default="spectral", help="correlation normalisation")
    sp.set_defaults(fn=cmd_schedule)

    sp = common(sub.add_parser("verify", help="run oracle verification suites"), config=False)
    sp.add_argument("--suite", default="all",
                    choices=("forward", "posterior", "isotropic", "schedule", "gradients", "metrics", "all"))
    sp.add_argument("--samples", type=int, default=None, help="Monte Carlo samples for the forward suite")
    sp.add_argument("--tol", type=float, default=None, help="override every suite tolerance")
    sp.set_defaults(fn=cmd_verify)

    sp = common(sub.add_parser("train-ae", help="train the motion autoencoder"))
    sp.add_argument("--data", default=None, help="dataset directory")
    training(sp)
    sp.set_defaults(fn=cmd_train_ae)

    sp = common(sub.add_parser("train-diff", help="train the latent denoiser"))
    data_model(sp)
    training(sp)
    sp.set_defaults(fn=cmd_train_diff)

    sp = common(sub.add_parser("predict", help="sample futures"))
    data_model(sp)
    sp.add_argument("--past", default=None, help="single observed motion (NIMO); default: test split")
    sp.add_argument("--n", type=int, default=None, help="futures per past")
    sp.add_argument("--threads", type=int, default=1, help="parallel rollout workers")
    sp.set_defaults(fn=cmd_predict)

    sp = common(sub.add_parser("evaluate", help="metrics for a prediction set"))
    sp.add_argument("--data", default=None, help="dataset directory")
    sp.add_argument("--pred", default=None, help="prediction set (NIPR)")
    sp.add_argument("--delta", type=float, default=None, help="multimodal ground-truth threshold")
    sp.add_argument("--reference", default="skeleton", choices=("skeleton", "gt_median"),
                    help="reference bone lengths for body realism")
    sp.set_defaults(fn=cmd_evaluate)

    sp = common(sub.add_parser("curves", help="validity and delta-APD curves as CSV"))
    sp.add_argument("--data", default=None, help="dataset directory")
    sp.add_argument("--pred", default=None, help="prediction set (NIPR)")
    sp.set_defaults(fn=cmd_curves)

    sp = common(sub.add_parser("demo", help="gen-data, train-ae, train-diff, predict, evaluate, curves"))
    training(sp)
    sp.add_argument("--n", type=int, default=None, help="futures per past")
    sp.add_argument("--threads", type=int, default=1, help="parallel rollout workers")
    sp.set_defaults(fn=cmd_demo)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"noniso: {exc}\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        sys.stderr.write(f"noniso {args.command}: {exc}\n")
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        sys.stderr.write(f"noniso {args.command}: I/O error: {exc}\n")
        return EXIT_IO
    except (ValidationError, ParameterError) as exc:
        sys.stderr.write(f"noniso {args.command}: invalid input: {exc}\n")
        return EXIT_USAGE
    except NonisoError as exc:
        sys.stderr.write(f"noniso {args.command}: {exc}\n")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
