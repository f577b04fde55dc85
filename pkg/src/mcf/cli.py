"""Command-line entry point: ``mcf {gen-synth,train,eval,predict,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 check failure.
"""

from __future__ import annotations

import argparse
import datetime
import logging
import os
import sys
import time

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, load_run_config
from .gradcheck import model_suite, primitive_suite
from .model import McfModel, check_geometry
from .tensor import DimensionError, break_gradient
from .training import TrainConfig, evaluate, fit, predict

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("mcf")


class DataError(RuntimeError):
    pass


def _atomic_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def display_name(field):
    """``d_fg`` -> ``d_FG``, ``t_pe`` -> ``T_PE``."""
    kind, stream = field.split("_")
    return f"{'T' if kind == 't' else kind}_{stream.upper()}"


def _load_bundle(path):
    try:
        return D.read_bundle(path)
    except OSError as err:
        raise DataError(f"cannot read bundle {path}: {err}") from None
    except D.BundleError as err:
        raise DataError(f"{path}: [{err.code}] {err}") from None


# -- gen-synth ---------------------------------------------------------------------
def cmd_gen_synth(args):
    geometry = args.geometry
    overrides = {k: getattr(args, k) for k in ("t_pe", "d_pe", "t_fg", "d_fg", "t_vs", "d_vs")
                 if getattr(args, k) is not None}
    if overrides:
        base = dict(D.FULL_GEOMETRY if geometry == "full" else D.TOY_GEOMETRY)
        geometry = {**base, **overrides}
    try:
        spec = D.SyntheticSpec(mode=args.mode, n_samples=args.n, noise_sigma=args.noise_sigma,
                               signal_strength=args.signal_strength, seed=args.seed,
                               geometry=geometry, n_disc=args.n_disc)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if args.n == 0:
        log.warning("n = 0: writing an empty bundle")
    bundle = D.gen_synthetic(spec)
    size = D.write_bundle(args.out, bundle)
    h = bundle.header
    print(f"wrote {args.out}: {h.sample_count} samples, {size} bytes, task={h.task_name}, "
          f"n_disc={h.n_disc}, seed={args.seed}")
    print("geometry: " + " ".join(f"{k}={v}" for k, v in h.geometry.items()))
    return EXIT_OK


# -- train -------------------------------------------------------------------------
def cmd_train(args):
    run = load_run_config(args.config, args.preset, args.seed, args.out)
    if not run.train_bundle:
        raise ConfigError("train_bundle is required")
    if not run.out:
        raise ConfigError("an output directory is required (--out or 'out = ...')")
    for key in ("train_bundle", "val_bundle"):
        path = getattr(run, key)
        if path and not os.path.exists(path):
            raise ConfigError(f"{key}: no such file {path}")
    train_set = _load_bundle(run.train_bundle)
    val_set = _load_bundle(run.val_bundle) if run.val_bundle else None
    h = train_set.header
    if val_set is not None:
        v = val_set.header
        diff = [display_name(k) for k in h.geometry if h.geometry[k] != v.geometry[k]]
        if v.task != h.task or v.n_disc != h.n_disc:
            diff.insert(0, "task/n_disc")
        if diff:
            raise DataError(f"validation bundle differs from training bundle in {', '.join(diff)}")
    config = run.model_config(h.geometry, task=h.task_name, n_disc=h.n_disc)
    if len(train_set) == 0:
        raise DataError("training bundle is empty")
    model = McfModel(config)
    # nothing is written until every check above has passed
    os.makedirs(run.out, exist_ok=True)
    t0 = time.time()
    history = fit(model, train_set, val_set, run.train,
                  log=lambda r: log.info("epoch %d lr=%.3e train=%.5f val=%.5f %s", r.epoch, r.lr,
                                         r.train_loss, r.val_loss, r.metrics))
    save_checkpoint(model, os.path.join(run.out, "checkpoint"))
    stamp = None if args.no_timestamp else datetime.datetime.now().isoformat(timespec="seconds")
    _atomic_text(os.path.join(run.out, "history.jsonl"), history.to_text(stamp))
    print(f"trained {len(history.records)} epochs in {time.time() - t0:.1f}s; "
          f"best epoch {history.best_epoch}; checkpoint in {os.path.join(run.out, 'checkpoint')}")
    return EXIT_OK


# -- eval / predict ----------------------------------------------------------------
def _checkpoint_and_bundle(args):
    if not os.path.isdir(args.checkpoint):
        raise ConfigError(f"no checkpoint directory {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    bundle = _load_bundle(args.bundle)
    c, h = model.config, bundle.header
    for name in D.GEOMETRY_FIELDS:
        if getattr(c, name) != getattr(h, name):
            raise DataError(f"{display_name(name)}: bundle has {getattr(h, name)}, checkpoint expects {getattr(c, name)}")
    if h.task_name != c.task or h.n_disc != c.n_disc:
        raise DataError(f"task: bundle is {h.task_name}/{h.n_disc}, checkpoint is {c.task}/{c.n_disc}")
    if len(bundle):
        check_geometry(c, bundle.batch(np.arange(1)))
    return model, bundle


def cmd_eval(args):
    model, bundle = _checkpoint_and_bundle(args)
    _, report = evaluate(model, bundle, TrainConfig())
    text = report.to_text()
    if args.out:
        _atomic_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args):
    model, bundle = _checkpoint_and_bundle(args)
    disc, cont = predict(model, bundle)
    lines = []
    for i in range(len(bundle)):
        if cont is None:
            z = disc[i] - disc[i].max()
            probs = np.exp(z) / np.exp(z).sum()
            lines.append(f"{i}\t{int(np.argmax(disc[i]))}\t" + " ".join(f"{p:.6f}" for p in probs))
        else:
            probs = 1.0 / (1.0 + np.exp(-disc[i].astype(np.float64)))
            lines.append(f"{i}\t" + " ".join(f"{p:.6f}" for p in probs) + "\t"
                         + " ".join(f"{v:.6f}" for v in cont[i]))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        _atomic_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------------
def cmd_gradcheck(args):
    variant = {"toy-mha": "mha", "toy-sag": "sag"}.get(args.preset or "toy-mha")
    if variant is None:
        raise ConfigError("gradcheck runs at the toy geometry; use --preset toy-mha or toy-sag")
    tol = args.tol
    t0 = time.time()
    failed = []
    fault = break_gradient(1.01) if args.break_gradient else None
    if fault:
        fault.__enter__()
    try:
        for name, report in primitive_suite(seed=args.seed):
            ok = report.passed(tol)
            print(f"{'PASS' if ok else 'FAIL'} primitive {name:<24s} max_rel={report.max_rel_error:.3e}")
            if not ok:
                failed += [f"{name}:{c.name}" for c in report.failures(tol)]
        report = model_suite(variant, args.task, seed=args.seed, max_entries=args.max_entries)
    finally:
        if fault:
            fault.__exit__(None, None, None)
    for line, check in zip(report.lines(), report.checks):
        print(f"{'PASS' if check.rel_error < tol else 'FAIL'} model {line}")
    failed += [f"model:{c.name}" for c in report.failures(tol)]
    print(f"{'PASS' if not failed else 'FAIL'}: max model rel error {report.max_rel_error:.3e}, "
          f"{time.time() - t0:.1f}s")
    if failed:
        print("failing tensors: " + ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mcf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic feature bundle")
    g.add_argument("--mode", choices=("xor", "linear"), default="xor")
    g.add_argument("--n", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-sigma", type=float, default=1.0)
    g.add_argument("--signal-strength", type=float, default=2.0)
    g.add_argument("--n-disc", type=int, default=0, help="linear mode class count (default 26)")
    g.add_argument("--geometry", choices=("full", "toy"), default="full")
    for name in ("t_pe", "d_pe", "t_fg", "d_fg", "t_vs", "d_vs"):
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train a model from a run configuration")
    t.add_argument("--config")
    t.add_argument("--preset")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--no-timestamp", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint on a bundle"),
                                 ("predict", cmd_predict, "write per-sample predictions")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--bundle", required=True)
        e.add_argument("--out")
        e.set_defaults(func=func)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    c.add_argument("--preset", default="toy-mha")
    c.add_argument("--task", choices=("multilabel_cont", "single_label"), default="multilabel_cont")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--max-entries", type=int, default=None)
    c.add_argument("--break-gradient", action="store_true",
                   help="scale matmul gradients by 1.01 (the check must then fail)")
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, D.BundleError, DimensionError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
