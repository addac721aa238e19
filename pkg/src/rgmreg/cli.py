"""Command-line entry point: ``rgmreg {generate,train,register,eval,ablate}``.

Exit codes: 0 success, 1 bad input (arguments, config, files), 2 runtime abort.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import PROTOCOLS, XYZFormatError, load_dataset, load_transform, load_xyz, save_xyz, write_dataset
from .geometry import apply_transform
from .network import RGMNet
from .pipeline import (
    METHODS,
    FixedCorrespondenceModel,
    dump_correspondences,
    evaluate,
    register_icp,
    register_rgm,
    write_metrics_csv,
)
from .training import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    train,
    write_log,
)

log = logging.getLogger("rgmreg")

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 1, 2
LEARNED = ("rgm", "rgm_var1", "rgm_var2")
CHECKPOINT_NAME = "model.rgmw"
LOG_NAME = "train_log.csv"


class InputError(Exception):
    pass


class RunAbort(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _setup_logging():
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("RGM_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def _resolve(args, extra=None):
    overrides = dict(kv.split("=", 1) for kv in args.set or [] if "=" in kv)
    bad = [kv for kv in args.set or [] if "=" not in kv]
    if bad:
        raise InputError(f"--set expects key=value, got {bad}")
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    for key in ("seed", "jobs", "iters"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    cfg = RunConfig.load(args.config, overrides)
    if cfg.run.iters < 1:
        raise InputError("--iters must be >= 1")
    log.info("resolved config:\n%s", cfg.text().rstrip())
    print(f"config checksum {cfg.checksum()}")
    return cfg


def _load_split(data_dir, split, required=True):
    if not (Path(data_dir) / "manifest.txt").exists():
        raise InputError(f"no dataset found in {data_dir} (missing manifest.txt)")
    samples = load_dataset(data_dir, split)
    if required and not samples:
        raise InputError(f"dataset {data_dir} has no {split!r} samples")
    return samples


def _load_model(path):
    if not path:
        return None
    if not Path(path).exists():
        raise InputError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    cfg = _resolve(args, {"protocol": args.protocol})
    out = Path(args.out or cfg.run.data_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InputError(f"{out} exists and is not empty (use --force to overwrite)")
    manifest = write_dataset(out, cfg.dataset)
    n = sum(cfg.dataset.split_size(s) for s in ("train", "val", "test"))
    print(f"wrote {n} samples to {out} ({manifest.name})")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve(args, {"data_dir": args.data, "out_dir": args.out, "epochs": args.epochs})
    samples = _load_split(cfg.run.data_dir, "train")
    val = _load_split(cfg.run.data_dir, "val", required=False)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = 0
    if args.resume:
        model, echo = load_checkpoint(args.resume)
        start = int(echo.get("epoch", 0))
        log.info("resuming from %s at epoch %d", args.resume, start)
    else:
        model = RGMNet(cfg.model)
    result = train(model, samples, cfg.train, val_samples=val, start_epoch=start)
    write_log(out / LOG_NAME, result.history, append=bool(args.resume))
    if result.diverged:
        raise RunAbort("training diverged (non-finite loss); checkpoint not written")
    epoch = result.history[-1].epoch if result.history else start
    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(model, ckpt, {"epoch": epoch, "config_checksum": cfg.checksum()})
    last = result.history[-1] if result.history else None
    print(f"trained to epoch {epoch}; checkpoint {ckpt}"
          + (f"; final loss {last.mean_loss:.6g}" if last else ""))
    return EXIT_OK


def _print_transform(T):
    print("R")
    for row in T.R:
        print(" ".join(f"{v: .9f}" for v in row))
    print("t")
    print(" ".join(f"{v: .9f}" for v in T.t))


def cmd_register(args):
    cfg = _resolve(args, {"method": args.method, "checkpoint": args.checkpoint})
    X, Y = load_xyz(args.source), load_xyz(args.target)
    method = cfg.run.method
    if method == "icp":
        result = register_icp(X, Y)
    elif method == "oracle":
        # pairs point i with point i, for clouds stored in corresponding order
        if len(X) != len(Y):
            raise InputError("oracle registration needs clouds of equal size")
        result = register_rgm(X, Y, FixedCorrespondenceModel(np.eye(len(X))), cfg.run.iters)
    elif method in LEARNED:
        model = _load_model(cfg.run.checkpoint)
        if model is None:
            raise InputError(f"method {method} needs --checkpoint")
        K = model.config.K
        if len(X) <= K or len(Y) <= K:
            raise InputError(f"clouds need more than K={K} points (got {len(X)} and {len(Y)})")
        variant = {"rgm": None, "rgm_var1": "ais_variant", "rgm_var2": "fullconnect_edges"}[method]
        result = register_rgm(X, Y, model, cfg.run.iters, variant)
    else:
        raise InputError(f"register supports {LEARNED + ('icp', 'oracle')}, not {method!r}")
    _print_transform(result.transform)
    if result.degenerate:
        print("warning: stopped early on a degenerate correspondence set")
    if args.gt:
        from .geometry import ccd, mae_rotation, mae_translation, mie_rotation, mie_translation
        G, T = load_transform(args.gt), result.transform
        print(f"mie_r_deg {mie_rotation(G.R, T.R):.6g} mie_t {mie_translation(G.t, T.t):.6g} "
              f"mae_r_deg {mae_rotation(G.R, T.R)[0]:.6g} mae_t {mae_translation(G.t, T.t):.6g} "
              f"ccd {ccd(apply_transform(T, X), Y):.6g}")
    if args.aligned:
        save_xyz(args.aligned, apply_transform(result.transform, X))
    return EXIT_OK


def _summary_line(method, s):
    return (f"{method}: recall {s['recall']:.4f} mie_r_deg {s['mie_r_deg']:.6g} mie_t {s['mie_t']:.6g} "
            f"mae_r_deg {s['mae_r_deg']:.6g} mae_t {s['mae_t']:.6g} ccd {s['ccd']:.6g} "
            f"precision {s['precision']:.4f}")


def _run_eval(method, samples, model, cfg, out):
    report = evaluate(samples, method, model, iters=cfg.run.iters, jobs=cfg.run.jobs)
    write_metrics_csv(out / f"metrics_{method}.csv", report)
    if cfg.run.dump_images:
        dump_correspondences(out / f"correspondences_{method}.pgm", report)
    return report.summary()


def cmd_eval(args):
    cfg = _resolve(args, {"data_dir": args.data, "out_dir": args.out, "method": args.method,
                          "checkpoint": args.checkpoint, "dump_images": args.dump_images or None})
    method = cfg.run.method
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; expected one of {METHODS}")
    model = _load_model(cfg.run.checkpoint) if method in LEARNED else None
    if method in LEARNED and model is None:
        raise InputError(f"method {method} needs trained weights (--checkpoint)")
    samples = _load_split(cfg.run.data_dir, args.split)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    print(_summary_line(method, _run_eval(method, samples, model, cfg, out)))
    return EXIT_OK


ABLATION_COLUMNS = ["method", "mie_r_deg", "mie_t", "mae_r_deg", "mae_t", "ccd", "recall", "precision"]


def cmd_ablate(args):
    cfg = _resolve(args, {"data_dir": args.data, "out_dir": args.out, "checkpoint": args.checkpoint,
                          "dump_images": args.dump_images or None})
    base = _load_model(cfg.run.checkpoint)
    if base is None:
        raise InputError("ablate needs --checkpoint (a full model)")
    models = {"rgm": base, "rgm_var1": _load_model(args.var1) or base, "rgm_var2": _load_model(args.var2) or base}
    samples = _load_split(cfg.run.data_dir, args.split)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], []
    for method in LEARNED:
        try:
            s = _run_eval(method, samples, models[method], cfg, out)
        except Exception as exc:  # keep going so the other rows still get reported
            log.error("%s failed: %s", method, exc)
            failed.append(method)
            continue
        rows.append([method] + [s[k] for k in ABLATION_COLUMNS[1:]])
        print(_summary_line(method, s))
    with open(out / "ablation.csv", "w") as fh:
        fh.write(",".join(ABLATION_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join([r[0]] + [repr(float(v)) for v in r[1:]]) + "\n")
    print(f"{'method':<10}" + "".join(f"{c:>11}" for c in ABLATION_COLUMNS[1:]))
    for r in rows:
        print(f"{r[0]:<10}" + "".join(f"{v:>11.4g}" for v in r[1:]))
    if failed:
        raise RunAbort(f"ablation incomplete: {', '.join(failed)} failed")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, help="evaluation worker threads")
    common.add_argument("--iters", type=int, help="registration iterations (>= 1)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p = _Parser(prog="rgmreg", description="Rigid point cloud registration by deep graph matching.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a procedural dataset")
    g.add_argument("--out", help="dataset directory (default: data_dir)")
    g.add_argument("--protocol", choices=PROTOCOLS)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a model on a generated dataset")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--out", help="run directory for checkpoint and log")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue training from a checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", parents=[common], help="register one pair of xyz files")
    r.add_argument("source")
    r.add_argument("target")
    r.add_argument("--checkpoint")
    r.add_argument("--method", choices=LEARNED + ("icp", "oracle"))
    r.add_argument("--gt", help="ground-truth 3x4 transform file; prints metrics")
    r.add_argument("--aligned", help="write the transformed source here")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("eval", parents=[common], help="evaluate one method on a dataset split")
    e.add_argument("--data")
    e.add_argument("--out")
    e.add_argument("--method", choices=METHODS)
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--dump-images", action="store_true", help="write correspondence matrices as PGM")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="compare rgm, rgm_var1 and rgm_var2")
    a.add_argument("--data")
    a.add_argument("--out")
    a.add_argument("--checkpoint", help="full model weights")
    a.add_argument("--var1", help="separately trained ais_variant weights (optional)")
    a.add_argument("--var2", help="separately trained fullconnect_edges weights (optional)")
    a.add_argument("--split", default="test", choices=("train", "val", "test"))
    a.add_argument("--dump-images", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError, XYZFormatError, CheckpointError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RunAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
