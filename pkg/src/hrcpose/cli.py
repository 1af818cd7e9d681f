"""Command-line entry point: ``hrc <command> [options]``.

Configuration is resolved in order: built-in defaults, ``HRC_SEED`` (seeds
only), the ``--config`` JSON file, then ``--set section.key=value``
overrides. Sections are ``gen``, ``model``, ``train``, ``cl`` and ``eval``;
``cl.lambda`` is the weight of the per-task term. Every output is
accompanied by ``<output>.config.json`` holding the resolved configuration.

Exit codes: 0 success, 1 usage or configuration error, 2 data or IO error,
3 numeric check failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import evalkit, hrcl, trainer, verify
from .encoder import ModelConfig, predict
from .errors import ConfigError, HRCError
from .evalkit import EvalConfig
from .synthdata import GenConfig, generate_split, read_dataset, write_dataset

log = logging.getLogger("hrcpose")

SECTIONS = {
    "gen": GenConfig,
    "model": ModelConfig,
    "train": trainer.TrainConfig,
    "cl": hrcl.CLConfig,
    "eval": EvalConfig,
}
# config-file spelling -> dataclass field
ALIASES = {("cl", "lambda"): "lam"}
FIXED = {("gen", "categories")}
SEED_KEYS = (("gen", "seed"), ("train", "seed"), ("eval", "seed"))


class UsageError(ConfigError):
    pass


# ------------------------------------------------------------------ config


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _resolve_key(section, key):
    if section not in SECTIONS:
        raise UsageError(f"unknown config section {section!r} (expected one of {sorted(SECTIONS)})")
    name = ALIASES.get((section, key), key)
    if name not in _field_names(SECTIONS[section]) or (section, name) in FIXED or name == "lam" and key != "lambda":
        raise UsageError(f"unknown config key {section}.{key}")
    return name


def _coerce(section, name, value):
    default = {f.name: f for f in dataclasses.fields(SECTIONS[section])}[name].default
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise UsageError(f"{section}.{name} expects true/false, got {value!r}")
    if isinstance(default, (int, float)) and not isinstance(value, (int, float)) or isinstance(value, bool):
        raise UsageError(f"{section}.{name} expects a number, got {value!r}")
    if isinstance(default, int) and isinstance(value, float):
        if not value.is_integer():
            raise UsageError(f"{section}.{name} expects an integer, got {value!r}")
        value = int(value)
    if isinstance(default, tuple) and not isinstance(value, (list, tuple)):
        raise UsageError(f"{section}.{name} expects a list, got {value!r}")
    return value


def default_config():
    out = {}
    for section, cls in SECTIONS.items():
        vals = {}
        for f in dataclasses.fields(cls):
            if (section, f.name) in FIXED:
                continue
            v = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            vals[f.name] = v
        out[section] = vals
    return out


def _jsonable(x):
    if isinstance(x, tuple):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    return x


def resolve_config(config_path=None, overrides=(), env=None):
    """Merged configuration as ``{section: {field: value}}`` (JSON-ready)."""
    env = os.environ if env is None else env
    cfg = default_config()
    if env.get("HRC_SEED") not in (None, ""):
        try:
            seed = int(env["HRC_SEED"])
        except ValueError:
            raise UsageError(f"HRC_SEED must be an integer, got {env['HRC_SEED']!r}") from None
        for section, key in SEED_KEYS:
            cfg[section][key] = seed
    if config_path:
        try:
            with open(config_path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {config_path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object of sections")
        for section, vals in data.items():
            if section not in SECTIONS:
                raise UsageError(f"unknown config section {section!r}")
            if not isinstance(vals, dict):
                raise UsageError(f"config section {section!r} must be an object")
            for key, value in vals.items():
                name = _resolve_key(section, key)
                cfg[section][name] = _coerce(section, name, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        name = _resolve_key(section, key)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg[section][name] = _coerce(section, name, value)
    return _jsonable(cfg)


def build_configs(resolved):
    """Instantiate the config dataclasses; invalid values raise ConfigError."""
    out = {}
    for section, cls in SECTIONS.items():
        try:
            out[section] = cls(**resolved[section])
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {section} config: {exc}") from None
    return out


def public_config(resolved):
    """Resolved config with ``cl.lam`` spelled ``cl.lambda`` as in config files."""
    out = json.loads(json.dumps(resolved))
    out["cl"]["lambda"] = out["cl"].pop("lam")
    return out


# ------------------------------------------------------------------ outputs


class Outputs:
    """Tracks files written by a command so partial results can be removed."""

    def __init__(self):
        self.paths = []

    def add(self, path):
        self.paths.append(path)
        return path

    def sidecar(self, path, resolved, command, extra=None):
        doc = {"command": command, "config": public_config(resolved)}
        if extra:
            doc.update(extra)
        side = self.add(f"{path}.config.json")
        with open(side, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def cleanup(self):
        for p in self.paths:
            try:
                os.remove(p)
            except OSError:
                pass


# ------------------------------------------------------------------ commands


def _load(path):
    try:
        return read_dataset(path)
    except OSError as exc:
        raise HRCError(f"cannot read dataset {path}: {exc.strerror}") from None


def cmd_gen_data(args, resolved, cfgs, out: Outputs):
    gen = cfgs["gen"]
    samples = generate_split(gen, args.split)
    write_dataset(samples, out.add(args.out))
    out.sidecar(args.out, resolved, "gen-data", {"split": args.split})
    log.info("wrote %d samples to %s", len(samples), args.out)
    return 0


def cmd_train(args, resolved, cfgs, out: Outputs):
    data = _load(args.data)
    if not data:
        raise HRCError(f"dataset {args.data} is empty")
    model_cfg = cfgs["model"]
    if data[0].points.shape[0] != model_cfg.n_points:
        raise ConfigError(
            f"dataset has {data[0].points.shape[0]} points per sample but model.n_points is {model_cfg.n_points}"
        )
    state = None
    if args.resume:
        state, _ = trainer.load_checkpoint(args.resume)
        if state.params.config != model_cfg:
            raise ConfigError("resumed checkpoint was trained with a different model config")
    rows = []
    every = max(1, cfgs["train"].steps // 20)

    def progress(step, br):
        if step % every == 0:
            log.info("step %d  loss %.5f  (cl_R %.4f  cl_t %.4f  basic %.4f)", step,
                     br["loss_total"], br["loss_cl_R"], br["loss_cl_t"], br["loss_basic"])

    state = trainer.train(data, model_cfg, cfgs["cl"], cfgs["train"], cfgs["gen"], state=state,
                          log_rows=rows, progress=progress)
    extra = {"config": public_config(resolved)}
    trainer.save_checkpoint(state, out.add(args.out), extra=extra)
    log_path = args.log or f"{args.out}.log.csv"
    trainer.write_log(rows, out.add(log_path))
    out.sidecar(args.out, resolved, "train", {"data": os.path.basename(args.data)})
    log.info("saved checkpoint %s after %d steps (lr %.3g)", args.out, state.step, state.scheduler.lr)
    return 0


def cmd_eval(args, resolved, cfgs, out: Outputs):
    state, _ = trainer.load_checkpoint(args.checkpoint)
    data = _load(args.data)
    if not data:
        raise HRCError(f"dataset {args.data} is empty")
    poses, fR, ft, diag = predict(state.params, data)
    if diag:
        log.warning("%d predictions needed the orthonormal fallback", len(diag))
    report, scatter = evalkit.build_report(
        poses, data, {"R": fR, "t": ft}, cfgs["gen"].categories, cfgs["eval"], public_config(resolved)
    )
    out.paths += [f"{args.out}_metrics.csv"] + [f"{args.out}_scatter_{b}.csv" for b in evalkit.BRANCHES]
    evalkit.export_report(report, scatter, args.out)
    out.sidecar(f"{args.out}_metrics.csv", resolved, "eval",
                {"checkpoint": os.path.basename(args.checkpoint), "data": os.path.basename(args.data)})
    m = report.mean
    log.info("10deg5cm %.3f  IoU50 %.3f  Pearson R %s  t %s", m["p_10deg_5cm"], m["iou_50"],
             _short(m["pearson_R"]), _short(m["pearson_t"]))
    return 0


def _short(v):
    return "undefined" if v is None else f"{v:.3f}"


def cmd_embed(args, resolved, cfgs, out: Outputs):
    state, _ = trainer.load_checkpoint(args.checkpoint)
    data = _load(args.data)
    _, fR, ft, _ = predict(state.params, data)
    d = fR.shape[1]
    with open(out.add(args.out), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "category"] + [f"f_R_{i}" for i in range(d)] + [f"f_t_{i}" for i in range(d)])
        for i, s in enumerate(data):
            w.writerow([i, s.category] + [repr(float(x)) for x in fR[i]] + [repr(float(x)) for x in ft[i]])
    out.sidecar(args.out, resolved, "embed", {"checkpoint": os.path.basename(args.checkpoint)})
    return 0


def cmd_grad_check(args, resolved, cfgs, out: Outputs):
    res = verify.grad_check(n_coords=args.coords, seed=cfgs["train"].seed, cl_cfg=cfgs["cl"])
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_checked} coordinates")
    if res.worst:
        print(f"worst: {res.worst[0]}[{res.worst[1]}] analytic {res.worst[2]:.10g} numeric {res.worst[3]:.10g}")
    return 0 if res.max_rel_error < args.tol else 3


def cmd_oracle_check(args, resolved, cfgs, out: Outputs):
    res = verify.oracle_check(n_batches=args.batches, seed=cfgs["train"].seed)
    rnc = verify.rnc_check(seed=cfgs["train"].seed)
    print(f"oracle: max |diff| {res.max_abs_diff:.3e} over {res.n_comparisons} losses in {res.n_batches} batches")
    print(f"single-category task loss vs RnC: max |diff| {rnc:.3e}")
    ok = res.max_abs_diff < args.tol and rnc < args.tol
    return 0 if ok else 3


def cmd_report(args, resolved, cfgs, out: Outputs):
    reports = {}
    for item in args.inputs:
        label, path = item.split("=", 1) if "=" in item else (os.path.basename(item), item)
        try:
            reports[label] = evalkit.read_metrics(path)
        except OSError as exc:
            raise HRCError(f"cannot read {path}: {exc.strerror}") from None
        except ValueError as exc:
            raise HRCError(str(exc)) from None
    header, rows = evalkit.comparison_table(reports)
    widths = [max(len(str(h)), 10) for h in header]
    widths[0] = max([len(header[0])] + [len(r[0]) for r in rows])
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [("-" if v is None else f"{v:.4f}").ljust(w) for v, w in zip(r[1:], widths[1:])]
        print("  ".join(cells))
    if args.out:
        with open(out.add(args.out), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([r[0]] + ["" if v is None else repr(float(v)) for v in r[1:]])
    return 0


# ------------------------------------------------------------------ parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with gen/model/train/cl/eval sections")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable), applied after --config")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")

    p = _Parser(prog="hrc", description="Hierarchical ranking contrastive pose lab.",
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("gen-data", parents=[common], formatter_class=fmt, help="generate a synthetic dataset (JSONL)")
    s.add_argument("--out", required=True, help="output JSONL path")
    s.add_argument("--split", choices=("train", "test"), default="train", help="which split to write")

    s = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train and write a checkpoint")
    s.add_argument("--data", required=True, help="training dataset JSONL")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", default=None, help="training CSV (default: <out>.log.csv)")
    s.add_argument("--resume", default=None, help="checkpoint to continue from")

    s = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="evaluation dataset JSONL")
    s.add_argument("--out", required=True, help="output prefix for <prefix>_metrics.csv and scatter CSVs")

    s = sub.add_parser("embed", parents=[common], formatter_class=fmt, help="export global embeddings as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("grad-check", parents=[common], formatter_class=fmt,
                       help="finite-difference check of the full training graph")
    s.add_argument("--coords", type=int, default=120, help="number of random parameter coordinates")
    s.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")

    s = sub.add_parser("oracle-check", parents=[common], formatter_class=fmt,
                       help="compare the losses with a brute-force implementation")
    s.add_argument("--batches", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-10, help="maximum absolute difference")

    s = sub.add_parser("report", parents=[common], formatter_class=fmt,
                       help="merge metrics CSVs into one comparison table")
    s.add_argument("inputs", nargs="+", metavar="[LABEL=]METRICS_CSV")
    s.add_argument("--out", default=None, help="write the table as CSV")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "grad-check": cmd_grad_check,
    "oracle-check": cmd_oracle_check,
    "report": cmd_report,
}


def parse_args(argv):
    return build_parser().parse_args(argv)


def execute(args, env=None):
    """Run a parsed command; returns the exit code."""
    out = Outputs()
    try:
        resolved = resolve_config(args.config, args.overrides, env)
        cfgs = build_configs(resolved)
        log.info("resolved config: %s", json.dumps(public_config(resolved), sort_keys=True))
        return COMMANDS[args.command](args, resolved, cfgs, out)
    except HRCError as exc:
        out.cleanup()
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        out.cleanup()
        log.error("%s", exc)
        return 2
    except BaseException:
        out.cleanup()
        raise


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return execute(args)


if __name__ == "__main__":
    sys.exit(main())
