"""Command-line entry point: ``unic <command> ...``.

Every command writes one JSON manifest next to its outputs. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import glob
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields

from . import __version__
from .datagen import ShapeGridSpec, load_dataset, make_dataset, save_dataset
from .encoder import EncoderConfig
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, FormatError
from .evalkit import (ProbeTask, curves_gnuplot, curves_report, curves_to_csv, extract_features,
                      halving_grid, knn_probe, linear_probe, utility_scan, _probe_rows)
from .plan import load_plan, plan_to_ini
from .teachers import RECIPES, encoder_from_arrays, make_teacher, save_teacher
from .checkpoint import load_checkpoint
from .trainer import EPOCHS_FILE, FINAL_CHECKPOINT, METRICS_FILE, distill

log = logging.getLogger("unic")

TRAIN_FILE = "train.unicdat"
EVAL_FILE = "eval.unicdat"
USAGE_ERRORS = (ConfigError,)
RUNTIME_ERRORS = (FormatError, ContractError, DimensionError, DivergenceError, FileNotFoundError, OSError)


# ---------------------------------------------------------------- helpers

def read_ini_section(path, section):
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    if not cp.has_section(section):
        raise ConfigError(f"{path} has no [{section}] section")
    return dict(cp.items(section))


def coerce_fields(cls, items, section):
    types = {f.name for f in fields(cls)}
    defaults = asdict(cls())
    out = {}
    for k, v in items.items():
        if k not in types:
            raise ConfigError(f"unknown key {k!r} in [{section}]")
        kind = type(defaults[k])
        try:
            out[k] = kind(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{k}: {v!r}") from exc
    return out


def load_spec(path) -> ShapeGridSpec:
    return ShapeGridSpec(**coerce_fields(ShapeGridSpec, read_ini_section(path, "data"), "data"))


def load_split(data_dir, split):
    path = os.path.join(data_dir, TRAIN_FILE if split == "train" else EVAL_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    return load_dataset(path)


def parse_grid(text, cast=float):
    try:
        return [cast(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}") from exc


def write_manifest(path, command, started, artifacts, config=None, config_path=None, seed=None, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "config_path": os.path.abspath(config_path) if config_path else None,
        "config": config,
        "seed": seed,
        "artifacts": [os.path.abspath(a) for a in artifacts],
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    started = time.time()
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec = ShapeGridSpec(**{**spec.to_dict(), "seed": args.seed})
    os.makedirs(args.out, exist_ok=True)
    paths = []
    for split, name in (("train", TRAIN_FILE), ("eval", EVAL_FILE)):
        path = os.path.join(args.out, name)
        save_dataset(make_dataset(spec, split), path)
        paths.append(path)
        print(f"wrote {path}")
    write_manifest(os.path.join(args.out, "manifest.json"), "gen-data", started, paths,
                   config=spec.to_dict(), config_path=args.spec, seed=spec.seed)
    return 0


def teacher_settings(args):
    kind = {"cls": "cls_specialist", "patch": "patch_specialist"}[args.kind]
    settings = {"dim": 32, "heads": 4, "mlp_ratio": 4, "seed": 0, "batch_size": 64, "weight_decay": 0.03}
    settings.update(RECIPES[kind])
    if args.config:
        for k, v in read_ini_section(args.config, "teacher").items():
            if k not in settings:
                raise ConfigError(f"unknown key {k!r} in [teacher]")
            settings[k] = type(settings[k])(v)
    for k in settings:
        v = getattr(args, k, None)
        if v is not None:
            settings[k] = v
    return kind, settings


def cmd_train_teacher(args):
    started = time.time()
    kind, s = teacher_settings(args)
    train = load_split(args.data, "train")
    eval_set = load_split(args.data, "eval")
    spec = train.spec
    config = EncoderConfig(image_size=spec.image_size, channels=spec.channels, patch_size=spec.cell_pixels,
                           dim=s["dim"], depth=s["depth"], heads=s["heads"], mlp_ratio=s["mlp_ratio"],
                           seed=s["seed"])
    bundle = make_teacher(kind, train, eval_set, config, epochs=s["epochs"], batch_size=s["batch_size"],
                          lr=s["lr"], weight_decay=s["weight_decay"], warmup_epochs=s["warmup_epochs"],
                          seed=s["seed"])
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_teacher(bundle, args.out)
    acc = bundle.metrics["eval_accuracy"]
    print(f"{kind} eval accuracy {acc:.4f}")
    write_manifest(args.out + ".manifest.json", "train-teacher", started, [args.out],
                   config={"kind": kind, **s}, config_path=args.config, seed=s["seed"],
                   extra={"eval_accuracy": acc})
    return 0


def parse_overrides(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def cmd_distill(args):
    started = time.time()
    plan = load_plan(args.config, parse_overrides(args.set))
    result = distill(plan, resume_from=args.resume, max_steps=args.max_steps)
    out = plan.output
    artifacts = [os.path.join(out, n) for n in ("plan.ini", METRICS_FILE, EPOCHS_FILE, FINAL_CHECKPOINT)]
    artifacts += sorted(glob.glob(os.path.join(out, "step_*.ckpt")))
    last = result.epoch_rows[-1] if result.epoch_rows else {}
    print(f"distilled {len(result.epoch_rows)} epochs into {out}; final loss {last.get('loss', float('nan')):.5f}")
    write_manifest(os.path.join(out, "manifest.json"), "distill", started, artifacts,
                   config=plan_to_ini(plan), config_path=args.config, seed=plan.seed)
    return 0


def cmd_probe(args):
    started = time.time()
    enc = encoder_from_arrays(load_checkpoint(args.ckpt))
    train = load_split(args.data, "train")
    eval_set = load_split(args.data, "eval")
    trx, tr_y = extract_features(enc, train, args.source)
    evx, ev_y = extract_features(enc, eval_set, args.source)
    task = ProbeTask(args.source, args.source, train, eval_set, max_train_rows=args.max_train_rows)
    trx, tr_y = _probe_rows(task, trx, tr_y, seed=args.seed)
    acc, l2 = linear_probe(trx, tr_y, evx, ev_y, seed=args.seed, return_l2=True)
    result = {"ckpt": os.path.abspath(args.ckpt), "source": args.source, "linear": acc, "l2": l2,
              "train_rows": int(len(tr_y))}
    print(f"linear probe ({args.source}) top-1 {acc:.4f} (l2={l2:g})")
    if args.knn:
        if args.knn > len(tr_y):
            raise ConfigError(f"k={args.knn} exceeds {len(tr_y)} training rows")
        result["knn"] = knn_probe(trx, tr_y, evx, ev_y, k=args.knn)
        result["k"] = args.knn
        print(f"k-NN probe ({args.source}, k={args.knn}) top-1 {result['knn']:.4f}")
    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.ckpt))[0]
    path = os.path.join(out_dir, f"probe_{stem}_{args.source}.json")
    with open(path, "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(os.path.join(out_dir, f"probe_{stem}_{args.source}.manifest.json"), "probe", started, [path],
                   config={"source": args.source, "knn": args.knn, "max_train_rows": args.max_train_rows},
                   seed=args.seed)
    return 0


def model_names(paths):
    stems = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    names = []
    for p, s in zip(paths, stems):
        if stems.count(s) > 1:
            s = f"{os.path.basename(os.path.dirname(os.path.abspath(p)))}/{s}"
        names.append(s)
    if len(set(names)) != len(names):
        raise ConfigError("checkpoint names are ambiguous; pass distinct files")
    return names


def cmd_analyze(args):
    started = time.time()
    models = {}
    for name, path in zip(model_names(args.ckpts), args.ckpts):
        models[name] = encoder_from_arrays(load_checkpoint(path))
    if args.grid:
        grid = parse_grid(args.grid, float if args.mode == "prune" else int)
    elif args.mode == "prune":
        grid = [i / 10 for i in range(10)]
    else:
        dims = {m.config.dim for m in models.values()}
        grid = halving_grid(min(dims))
    if args.mode == "prune" and any(not 0 <= g <= 1 for g in grid):
        raise ConfigError("pruning ratios must lie in [0, 1]")
    task = ProbeTask(args.source, args.source, load_split(args.data, "train"), load_split(args.data, "eval"),
                     max_train_rows=args.max_train_rows)
    curves = utility_scan(models, args.mode, grid, task)
    os.makedirs(args.out, exist_ok=True)
    paths = {
        "csv": os.path.join(args.out, f"curves_{args.mode}.csv"),
        "report": os.path.join(args.out, f"report_{args.mode}.txt"),
        "gnuplot": os.path.join(args.out, f"curves_{args.mode}.dat"),
    }
    report = curves_report(curves)
    for key, text in (("csv", curves_to_csv(curves)), ("report", report), ("gnuplot", curves_gnuplot(curves))):
        with open(paths[key], "w") as fh:
            fh.write(text)
    print(report, end="")
    write_manifest(os.path.join(args.out, f"manifest_{args.mode}.json"), "analyze", started, list(paths.values()),
                   config={"mode": args.mode, "grid": grid, "source": args.source,
                           "ckpts": [os.path.abspath(p) for p in args.ckpts]})
    return 0


def render_report(run_dir):
    path = os.path.join(run_dir, EPOCHS_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"run directory {run_dir} has no {EPOCHS_FILE}")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError(f"{path} holds no epochs")
    teachers = [k[:-len("_alpha_mean")] for k in rows[0] if k.endswith("_alpha_mean")]
    lines = [f"run: {os.path.abspath(run_dir)}", f"epochs: {len(rows)}", "", "final losses per teacher:"]
    last = rows[-1]
    lines.append(f"  {'teacher':<16}{'cls':>10}{'patch':>10}{'total':>10}")
    for t in teachers:
        lines.append(f"  {t:<16}{float(last[t + '_cls_loss']):>10.4f}{float(last[t + '_patch_loss']):>10.4f}"
                     f"{float(last[t + '_loss']):>10.4f}")
    lines += ["", "alpha utilization per epoch:", "  epoch" + "".join(f"{t:>12}" for t in teachers)]
    for r in rows:
        lines.append(f"  {int(r['epoch']):>5}" + "".join(f"{float(r[t + '_alpha_mean']):>12.3f}" for t in teachers))
    metrics = os.path.join(run_dir, METRICS_FILE)
    if os.path.exists(metrics):
        with open(metrics) as fh:
            kept = [json.loads(line).get("argmax_kept", True) for line in fh if line.strip()]
        lines += ["", f"steps logged: {len(kept)}; argmax teacher kept in {sum(map(bool, kept))} of them"]
    probes = sorted(glob.glob(os.path.join(run_dir, "probe_*.json")))
    probes = [p for p in probes if not p.endswith(".manifest.json")]
    lines += ["", "probes:"]
    if not probes:
        lines.append("  (none)")
    for p in probes:
        with open(p) as fh:
            r = json.load(fh)
        knn = f"  knn@{r['k']} {r['knn']:.4f}" if "knn" in r else ""
        lines.append(f"  {os.path.basename(r['ckpt']):<20}{r['source']:<8}linear {r['linear']:.4f}{knn}")
    return "\n".join(lines) + "\n"


def cmd_report(args):
    started = time.time()
    text = render_report(args.run)
    path = os.path.join(args.run, "report.txt")
    with open(path, "w") as fh:
        fh.write(text)
    print(text, end="")
    write_manifest(os.path.join(args.run, "manifest_report.json"), "report", started, [path])
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="unic", description="Multi-teacher distillation at desk scale.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render train/eval datasets from a spec file")
    g.add_argument("--spec", required=True, help="INI file with a [data] section")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="override the spec seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="train a specialist teacher")
    t.add_argument("--kind", required=True, choices=["cls", "patch"])
    t.add_argument("--data", required=True, help="directory written by gen-data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="INI file with a [teacher] section")
    for name, typ in (("dim", int), ("depth", int), ("heads", int), ("mlp_ratio", int), ("seed", int),
                      ("epochs", int), ("batch_size", int), ("lr", float), ("weight_decay", float),
                      ("warmup_epochs", int)):
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="run multi-teacher distillation from a plan file")
    d.add_argument("--config", required=True, help="plan file")
    d.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a plan key")
    d.add_argument("--resume", help="checkpoint to resume from")
    d.add_argument("--max-steps", type=int, help="stop after this many steps")
    d.set_defaults(func=cmd_distill)

    pr = sub.add_parser("probe", help="linear (and k-NN) probe of a checkpoint")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--source", required=True, choices=["cls", "gap", "patch"])
    pr.add_argument("--knn", type=int, default=0, metavar="K", help="also run a k-NN probe")
    pr.add_argument("--max-train-rows", type=int, default=0, help="subsample probe training rows")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", help="directory for results (default: next to the checkpoint)")
    pr.set_defaults(func=cmd_probe)

    a = sub.add_parser("analyze", help="pruning or PCA utility scans")
    a.add_argument("--mode", required=True, choices=["prune", "pca"])
    a.add_argument("--ckpts", required=True, nargs="+")
    a.add_argument("--data", required=True)
    a.add_argument("--grid", help="comma-separated ratios (prune) or dimensions (pca)")
    a.add_argument("--source", default="cls", choices=["cls", "gap", "patch"])
    a.add_argument("--max-train-rows", type=int, default=0)
    a.add_argument("--out", default="analysis")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="plain-text summary of a distillation run")
    r.add_argument("--run", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"unic {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"unic {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
