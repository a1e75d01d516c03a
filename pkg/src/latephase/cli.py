"""Command-line experiment runner: ``latephase {nqp,train,sweep,flatness,ood}``.

Every subcommand reads an optional TOML config, applies ``--set`` overrides
and the common flags, and writes CSV results plus ``run.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import models
from .config import ExperimentConfig, config_hash, dump_toml, from_dict, load_config
from .data import SCHEMA_VERSION, generate, make_ood
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .metrics import auroc, entropy_batch, flatness_curve, nll_and_accuracy
from .nqp import METHODS, check_contractive, nqp_scaling_experiment, standard_problem_batch
from .numerics import RngStream
from .training import Trainer, build_network, load_model, load_task, save_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
TRAIN_SECTIONS = ("run", "data", "model", "optim", "late", "train")
STREAM_FLATNESS = 13
SWEEP_AXES = {"K": ("late", "K"), "T0": ("late", "T0"), "sigma0": ("late", "sigma0"),
              "gamma_theta": ("late", "gamma_theta"), "seed": ("run", "seed")}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    """CSV with a schema-version comment line; floats in round-trip form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version: {SCHEMA_VERSION}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            values = [row[h] for h in header] if isinstance(row, dict) else list(row)
            writer.writerow([_fmt(v) for v in values])


def read_csv(path):
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def write_run_json(out, command, cfg_hash, started, artifacts, extra=None):
    info = {"command": command, "config_hash": cfg_hash,
            "wall_clock_seconds": round(time.time() - started, 3),
            "artifacts": sorted(str(a) for a in artifacts)}
    info.update(extra or {})
    Path(out, "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _save_config(cfg, out):
    Path(out).mkdir(parents=True, exist_ok=True)
    Path(out, "config.toml").write_text(dump_toml(cfg))


# nqp

def cmd_nqp(cfg: ExperimentConfig):
    started = time.time()
    out = Path(cfg.run.out)
    ncfg = cfg.nqp.validate()
    try:
        check_contractive(standard_problem_batch(ncfg), ncfg.eta)
    except NumericalError as exc:
        raise ConfigError(str(exc)) from None
    h = config_hash(cfg, ("nqp",))
    result = nqp_scaling_experiment(ncfg, jobs=cfg.run.jobs)
    _save_config(cfg, out)
    rows = [{"config_hash": h, "method": r.method, "K": r.K, "seed": r.seed,
             "steady_loss": r.steady_loss, "std": r.std, "n": ncfg.n, "d": ncfg.d,
             "eta": ncfg.eta, "iters": ncfg.iters} for r in result.rows]
    header = ["config_hash", "method", "K", "seed", "steady_loss", "std", "n", "d", "eta", "iters"]
    write_csv(out / "nqp.csv", header, rows)
    slope_rows = [{"config_hash": h, "method": m, "slope": result.slopes[m]} for m in METHODS
                  if m in result.slopes]
    write_csv(out / "nqp_slopes.csv", ["config_hash", "method", "slope"], slope_rows)
    write_run_json(out, "nqp", h, started, [out / "nqp.csv", out / "nqp_slopes.csv"],
                   {"loss": "clean loss of the mean model (noise-free evaluation)"})
    for r in slope_rows:
        print(f"{r['method']:>14s} slope {r['slope']:+.4f}")
    return result


# train

def _final_metrics(trainer: Trainer, label):
    res = trainer.evaluate(trainer.test)
    params, _ = trainer.eval_model()
    return {"model": label, "test_nll": res.nll, "test_acc": res.accuracy,
            "num_parameters": models.num_parameters(params)}


def run_training(cfg: ExperimentConfig, out, resume=False, stop_after_epoch=None):
    """Train the late-phase model (and the base model) and write all artifacts.

    Returns the summary rows, or None when stopped early.
    """
    out = Path(out)
    h = config_hash(cfg, TRAIN_SECTIONS)
    train, test, _, _ = load_task(cfg)
    _save_config(cfg, out)
    runs = [("late", True)] + ([("base", False)] if cfg.train.run_base else [])
    trainers = {}
    for name, late_enabled in runs:
        trainer = Trainer(cfg, train, test, late_enabled=late_enabled)
        ckpt = out / "checkpoint" / name
        if resume and (ckpt / "manifest.json").exists():
            trainer.restore(ckpt)
        trainer.run(stop_after_epoch=stop_after_epoch, checkpoint_dir=ckpt)
        trainers[name] = trainer
    metric_rows = []
    for name, _ in runs:
        for row in trainers[name].rows:
            metric_rows.append({"config_hash": h, "run": name, **row})
    write_csv(out / "metrics.csv", ["config_hash", "run", "epoch", "iteration", "minibatches",
                                    "lr", "train_loss", "test_nll", "test_acc"], metric_rows)
    if not all(t.finished for t in trainers.values()):
        return None
    late = trainers["late"]
    summary = [_final_metrics(late, "collapsed")]
    probs = late.ensemble_proba(test.features)
    ens = nll_and_accuracy(probs, test.labels)
    summary.append({"model": "ensemble", "test_nll": ens.nll, "test_acc": ens.accuracy,
                    "num_parameters": late.partition.K * summary[0]["num_parameters"]})
    params, buffers = late.eval_model()
    save_model(out / "model" / "collapsed", late.spec, params, buffers, {"K": late.partition.K}, h)
    if "base" in trainers:
        base = trainers["base"]
        summary.append(_final_metrics(base, "base"))
        params, buffers = base.eval_model()
        save_model(out / "model" / "base", base.spec, params, buffers, {"K": 1}, h)
    for row in summary:
        row["config_hash"] = h
    write_csv(out / "summary.csv", ["config_hash", "model", "test_nll", "test_acc", "num_parameters"],
              summary)
    return summary


def cmd_train(cfg: ExperimentConfig, resume=False, stop_after_epoch=None):
    started = time.time()
    out = Path(cfg.run.out)
    models.build_late_partition(build_network(cfg, cfg.data.features, cfg.data.classes))
    summary = run_training(cfg, out, resume, stop_after_epoch)
    h = config_hash(cfg, TRAIN_SECTIONS)
    artifacts = [out / "metrics.csv"] + ([out / "summary.csv"] if summary else [])
    write_run_json(out, "train", h, started, artifacts, {"finished": summary is not None})
    if summary:
        for row in summary:
            print(f"{row['model']:>10s} acc {row['test_acc']:.4f} nll {row['test_nll']:.4f}")
    return summary


# sweep

def sweep_points(cfg: ExperimentConfig):
    axes = [(name, list(getattr(cfg.sweep, name))) for name in SWEEP_AXES
            if getattr(cfg.sweep, name)]
    if not axes:
        raise ConfigError("sweep grid is empty; set at least one of sweep.K/T0/sigma0/gamma_theta/seed")
    points = []
    for values in itertools.product(*[v for _, v in axes]):
        point = dict(zip([a for a, _ in axes], values))
        changes = {}
        for name, value in point.items():
            section, key = SWEEP_AXES[name]
            changes.setdefault(section, {})[key] = value
        pcfg = from_dict(changes, from_dict(cfg.to_dict()))
        points.append((point, pcfg))
    return [a for a, _ in axes], points


def _sweep_worker(args):
    cfg_dict, out = args
    cfg = from_dict(cfg_dict)
    summary = run_training(cfg, out)
    Path(out, "done").write_text("ok\n")
    return summary


def cmd_sweep(cfg: ExperimentConfig):
    started = time.time()
    out = Path(cfg.run.out)
    axes, points = sweep_points(cfg)
    _save_config(cfg, out)
    todo = []
    locations = []
    for point, pcfg in points:
        h = config_hash(pcfg, TRAIN_SECTIONS)
        pdir = out / "points" / h
        pcfg.run = replace(pcfg.run, out=str(pdir))
        locations.append((point, h, pdir))
        if not (pdir / "done").exists():
            todo.append((pcfg.to_dict(), str(pdir)))
    if cfg.run.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.jobs) as pool:
            list(pool.map(_sweep_worker, todo))
    else:
        for item in todo:
            _sweep_worker(item)
    run_rows = []
    for point, h, pdir in locations:
        for row in read_csv(pdir / "summary.csv"):
            entry = {name: point.get(name, "") for name in SWEEP_AXES}
            entry.update({"point_hash": h, "model": row["model"],
                          "test_acc": float(row["test_acc"]), "test_nll": float(row["test_nll"])})
            run_rows.append(entry)
    sweep_hash = config_hash(cfg, TRAIN_SECTIONS + ("sweep",))
    for r in run_rows:
        r["config_hash"] = sweep_hash
    header = ["config_hash"] + list(SWEEP_AXES) + ["point_hash", "model", "test_acc", "test_nll"]
    write_csv(out / "sweep_runs.csv", header, run_rows)
    agg = aggregate_sweep(run_rows, [a for a in axes if a != "seed"])
    for r in agg:
        r["config_hash"] = sweep_hash
    agg_header = (["config_hash"] + [a for a in axes if a != "seed"]
                  + ["model", "metric", "n_runs", "mean", "std"])
    write_csv(out / "sweep_aggregate.csv", agg_header, agg)
    write_run_json(out, "sweep", sweep_hash, started,
                   [out / "sweep_runs.csv", out / "sweep_aggregate.csv"],
                   {"points": len(points), "skipped": len(points) - len(todo)})
    return agg


def aggregate_sweep(run_rows, group_axes):
    """Mean and sample std over the seed axis for each grid point and model."""
    groups = {}
    for r in run_rows:
        key = tuple(r[a] for a in group_axes) + (r["model"],)
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        rows = groups[key]
        for metric in ("test_acc", "test_nll"):
            vals = np.array([r[metric] for r in rows])
            entry = dict(zip(group_axes, key[:-1]))
            entry.update({"model": key[-1], "metric": metric, "n_runs": len(vals),
                          "mean": float(vals.mean()),
                          "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0})
            out.append(entry)
    return out


# flatness and ood

def _train_dir(cfg, section_checkpoint):
    src = Path(section_checkpoint or cfg.run.out)
    if not (src / "config.toml").exists() or not (src / "model").exists():
        raise FileNotFoundError(f"no trained run found in {src}")
    return src


def _load_models(src, names=("base", "collapsed")):
    found = {}
    for name in names:
        path = src / "model" / name
        if (path / "manifest.json").exists():
            found[name] = load_model(path)
    if not found:
        raise FileNotFoundError(f"no model checkpoints in {src / 'model'}")
    return found


def cmd_flatness(cfg: ExperimentConfig):
    started = time.time()
    src = _train_dir(cfg, cfg.flatness.checkpoint)
    train_cfg = load_config(src / "config.toml")
    train, _, _, _ = load_task(train_cfg)
    out = Path(cfg.run.out)
    h = config_hash(cfg, ("flatness",)) + ":" + config_hash(train_cfg, TRAIN_SECTIONS)
    rows = []
    for name, (spec, params, buffers, _) in sorted(_load_models(src).items()):
        keys = sorted(params)
        w = models.flatten(params, keys)

        def loss_at(v, spec=spec, params=params, buffers=buffers, keys=keys):
            p = models.unflatten(v, params, keys)
            return models.eval_loss(spec, p, buffers, train.features, train.labels)

        curve = flatness_curve(loss_at, w, cfg.flatness.sigmas, cfg.flatness.n_samples,
                               RngStream(cfg.run.seed, STREAM_FLATNESS))
        for p in curve.points:
            rows.append({"config_hash": h, "model": name, "sigma_z": p.sigma_z,
                         "delta_loss": p.mean, "std": p.std, "n_samples": p.n_samples})
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "flatness.csv", ["config_hash", "model", "sigma_z", "delta_loss", "std",
                                     "n_samples"], rows)
    write_run_json(out, "flatness", h, started, [out / "flatness.csv"])
    return rows


def ood_sets(train_cfg: ExperimentConfig, ood_cfg, scaler, spec):
    """In-distribution evaluation draw, far novel-cluster set and zero-shift null set."""
    n = ood_cfg.n
    id_eval = scaler.apply(generate(spec, draw=1, n=n))
    far = scaler.apply(make_ood(spec, shift=ood_cfg.far_shift, novel_cluster=True, n=n, seed=1,
                                spread=ood_cfg.spread))
    null = scaler.apply(make_ood(spec, shift=0.0, n=n, seed=2))
    return id_eval, {"far": far, "null": null}


def cmd_ood(cfg: ExperimentConfig):
    started = time.time()
    src = _train_dir(cfg, cfg.ood.checkpoint)
    train_cfg = load_config(src / "config.toml")
    train, test, spec, scaler = load_task(train_cfg)
    id_eval, sets = ood_sets(train_cfg, cfg.ood, scaler, spec)
    out = Path(cfg.run.out)
    h = config_hash(cfg, ("ood",)) + ":" + config_hash(train_cfg, TRAIN_SECTIONS)

    scorers = {}
    for name, (mspec, params, buffers, _) in sorted(_load_models(src).items()):
        scorers[name] = (lambda x, s=mspec, p=params, b=buffers: models.predict_proba(s, p, b, x))
    ckpt = src / "checkpoint" / "late"
    if not (ckpt / "manifest.json").exists():
        raise FileNotFoundError(f"no late-phase checkpoint in {ckpt}")
    late = Trainer(train_cfg, train, test).restore(ckpt)
    scorers["ensemble"] = late.ensemble_proba

    rows, score_rows = [], []
    for name in sorted(scorers):
        h_id = entropy_batch(scorers[name](id_eval.features))
        for set_name in sorted(sets):
            h_ood = entropy_batch(scorers[name](sets[set_name].features))
            roc = auroc(h_ood, h_id)
            rows.append({"config_hash": h, "model": name, "ood_set": set_name, "auroc": roc.auroc,
                         "n_ood": roc.n_pos, "n_id": roc.n_neg, "ties": roc.ties,
                         "mean_entropy_ood": float(h_ood.mean()),
                         "mean_entropy_id": float(h_id.mean())})
            score_rows.extend({"model": name, "set": set_name, "entropy": float(v)} for v in h_ood)
        score_rows.extend({"model": name, "set": "in_distribution", "entropy": float(v)} for v in h_id)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ood.csv", ["config_hash", "model", "ood_set", "auroc", "n_ood", "n_id", "ties",
                                "mean_entropy_ood", "mean_entropy_id"], rows)
    write_csv(out / "ood_scores.csv", ["model", "set", "entropy"], score_rows)
    write_run_json(out, "ood", h, started, [out / "ood.csv", out / "ood_scores.csv"],
                   {"entropy": "natural log"})
    for r in rows:
        print(f"{r['model']:>10s} {r['ood_set']:>5s} auroc {r['auroc']:.4f}")
    return rows


# entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="latephase", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="global seed (run.seed)")
    common.add_argument("--out", help="output directory (run.out)")
    common.add_argument("--jobs", type=int, help="worker processes (default $LATEPHASE_JOBS or 1)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config value")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("nqp", parents=[common], help="1/K steady-state scaling on the noisy quadratic")
    p = sub.add_parser("train", parents=[common], help="train base and late-phase classifiers")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")
    p.add_argument("--stop-after-epoch", type=int, help="checkpoint and stop after this epoch")
    sub.add_parser("sweep", parents=[common], help="grid over K, T0, sigma0, gamma_theta, seed")
    sub.add_parser("flatness", parents=[common], help="flatness curves of a trained run")
    sub.add_parser("ood", parents=[common], help="entropy AUROC of a trained run")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.overrides)
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.out is not None:
        run = replace(run, out=args.out)
    jobs = args.jobs
    if jobs is None and "LATEPHASE_JOBS" in os.environ:
        try:
            jobs = int(os.environ["LATEPHASE_JOBS"])
        except ValueError:
            raise ConfigError("LATEPHASE_JOBS must be an integer") from None
    if jobs is not None:
        if jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        run = replace(run, jobs=jobs)
    cfg.run = run
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "nqp":
            cmd_nqp(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume, stop_after_epoch=args.stop_after_epoch)
        elif args.command == "sweep":
            cmd_sweep(cfg)
        elif args.command == "flatness":
            cmd_flatness(cfg)
        else:
            cmd_ood(cfg)
    except (ConfigError, DataError, DimensionError, FileNotFoundError) as exc:
        print(f"latephase: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"latephase: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
