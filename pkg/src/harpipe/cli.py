"""Config-driven command-line front end.

Commands: synth-gen, run, ablate, limited, intensity-study, export-embeddings,
eval. Configuration comes from a JSON file (--config) with flag overrides;
--print-config dumps the fully resolved configuration and exits without
computing. Run directories are content-addressed by a hash of the resolved
configuration so a rerun with identical inputs lands in the same directory
and differing inputs can never silently overwrite each other.

Environment: SELFHAR_LOG in {error, info, debug} controls log verbosity.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import baselines, datakit, evalkit, pipeline
from . import model as md
from .errors import ConfigurationError, HarpipeError
from .pipeline import PipelineConfig, PipelineKind

log = logging.getLogger("harpipe")

DEFAULT_SWEEP_N = [2, 5, 10, 50, 100]
DEFAULT_SEEDS = [0, 1, 2, 3, 4]


def configure_logging():
    level_name = os.environ.get("SELFHAR_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigurationError(
            f"SELFHAR_LOG must be one of {sorted(levels)}, got '{level_name}'")
    logging.basicConfig(level=levels[level_name],
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# configuration loading
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "data": {
        "labeled": "synthetic:",
        "unlabeled": None,
        "synthetic": {},
        "split": {},
        "weights": None,
    },
    "pipeline": {},
    "protocol": "standard",
    "seeds": DEFAULT_SEEDS,
    "n_per_class_list": DEFAULT_SWEEP_N,
    "intensity_target_size": None,
    "out": "runs",
}


def load_config(args):
    """Merge defaults <- config file <- command-line flags."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config is not None:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_config = json.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file is not valid JSON: {exc}")
        for key, value in file_config.items():
            if key not in config and key != "pipeline":
                raise ConfigurationError(f"unknown config field '{key}'")
            if isinstance(value, dict) and isinstance(config.get(key), dict):
                config[key].update(value)
            else:
                config[key] = value
    if args.seed is not None:
        config["pipeline"]["seed"] = args.seed
    if args.out is not None:
        config["out"] = args.out
    config["jobs"] = args.jobs
    return config


def validate_config(config, command):
    """Field-level validation before any computation starts."""
    data = config["data"]
    if not data.get("labeled"):
        raise ConfigurationError("data.labeled: a labeled source is required")
    if config["protocol"] not in ("standard", "linear", "both"):
        raise ConfigurationError(
            f"protocol: must be standard, linear, or both, got '{config['protocol']}'")
    pipe = pipeline_config(config)  # raises with field context on bad values
    if command in ("run",) and pipe.kind != PipelineKind.FULLY_SUPERVISED:
        if not _has_unlabeled_source(data):
            raise ConfigurationError(
                f"data.unlabeled: required for configuration '{pipe.kind.value}'")
    if command in ("ablate", "limited", "intensity-study"):
        if not _has_unlabeled_source(data):
            raise ConfigurationError(f"data.unlabeled: required for {command}")
    if command in ("eval", "export-embeddings") and not data.get("weights"):
        raise ConfigurationError(f"data.weights: required for {command}")
    return config


def _has_unlabeled_source(data):
    if data.get("unlabeled"):
        return True
    if str(data.get("labeled", "")).startswith("synthetic:"):
        synth = {**data.get("synthetic", {})}
        return synth.get("unlabeled_users", 0) > 0
    return False


def pipeline_config(config):
    try:
        return PipelineConfig.from_dict(config.get("pipeline", {}))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"pipeline: {exc}")


def config_hash(config):
    canonical = {k: v for k, v in config.items() if k != "jobs"}
    blob = json.dumps(canonical, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def run_dir(config, command):
    path = os.path.join(config["out"], f"{command}-{config_hash(config)}")
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def load_labeled_and_unlabeled(config):
    data = config["data"]
    if str(data["labeled"]).startswith("synthetic:"):
        synth = datakit.SynthConfig(**data.get("synthetic", {}))
        labeled, unlabeled = datakit.synthesize(synth)
    else:
        labeled = datakit.build_dataset(datakit.ingest_csv(data["labeled"]))
        unlabeled = None
    if data.get("unlabeled") and not str(data["unlabeled"]).startswith("synthetic:"):
        recs = datakit.ingest_csv(data["unlabeled"])
        unlabeled = datakit.build_dataset(recs, role="U")
        unlabeled.label_vocabulary = list(labeled.label_vocabulary)
    return labeled, unlabeled


def prepare_splits(config):
    """Split by users and z-normalize everything with training statistics."""
    labeled, unlabeled = load_labeled_and_unlabeled(config)
    spec = datakit.SplitSpec(**config["data"].get("split", {}))
    train, val, test = datakit.split_by_users(labeled, spec)
    train, stats = datakit.znormalize(train, train)
    val = datakit.apply_normalization(val, stats)
    test = datakit.apply_normalization(test, stats)
    if unlabeled is not None:
        unlabeled = datakit.apply_normalization(unlabeled, stats)
    return train, val, test, unlabeled, stats


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_table(path, rows, fieldnames):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _parallel_map(fn, items, jobs):
    if jobs <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_gen(config, args):
    synth = datakit.SynthConfig(**config["data"].get("synthetic", {}))
    out = run_dir(config, "synth-gen")
    labeled, unlabeled = datakit.synthesize(synth)
    datakit.export_csv(labeled, os.path.join(out, "labeled.csv"))
    if len(unlabeled):
        datakit.export_csv(unlabeled, os.path.join(out, "unlabeled.csv"))
    _write_json(os.path.join(out, "synth_config.json"), synth.to_dict())
    log.info("wrote %d labeled / %d unlabeled windows to %s",
             len(labeled), len(unlabeled), out)
    return out


def cmd_run(config, args):
    pipe = pipeline_config(config)
    train, val, test, unlabeled, stats = prepare_splits(config)
    out = run_dir(config, "run")
    result = pipeline.run_configuration(pipe, train, val, test,
                                        unlabeled=unlabeled, out_dir=out)
    _write_json(os.path.join(out, "normalization.json"), stats.to_dict())
    if config["protocol"] in ("linear", "both"):
        core = result.student if result.student is not None else result.final
        report, _, _ = evalkit.linear_evaluate(core, train, val, test,
                                               schedule=pipe.schedule,
                                               seed=pipe.seed,
                                               n_resamples=pipe.n_resamples)
        _write_json(os.path.join(out, "linear_report.json"), report.to_dict())
    log.info("run complete: weighted F1 %.4f -> %s",
             result.report.weighted_f1, out)
    return out


def _ablation_cell(task):
    kind, seed, protocol, base, splits = task
    train, val, test, unlabeled = splits
    pipe = PipelineConfig.from_dict({**base.to_dict(), "kind": kind.value,
                                     "seed": seed})
    result = pipeline.run_configuration(pipe, train, val, test, unlabeled=unlabeled)
    if protocol == "linear":
        core = result.student if result.student is not None else result.final
        report, _, _ = evalkit.linear_evaluate(core, train, val, test,
                                               schedule=pipe.schedule, seed=seed,
                                               n_resamples=pipe.n_resamples)
    else:
        report = result.report
    return report.weighted_f1, report.intervals["weighted_f1"]


def cmd_ablate(config, args):
    base = pipeline_config(config)
    train, val, test, unlabeled, _ = prepare_splits(config)
    splits = (train, val, test, unlabeled)
    seeds = config["seeds"]
    protocols = ["standard", "linear"]
    out = run_dir(config, "ablate")
    rows = []
    for kind in PipelineKind:
        for protocol in protocols:
            cells = _parallel_map(
                _ablation_cell,
                [(kind, seed, protocol, base, splits) for seed in seeds],
                config["jobs"])
            scores = [c[0] for c in cells]
            rows.append({
                "configuration": kind.value,
                "protocol": protocol,
                "seeds": json.dumps(seeds),
                "mean_weighted_f1": f"{np.mean(scores):.9g}",
                "std_weighted_f1": f"{np.std(scores):.9g}",
                "ci_lo_first_seed": f"{cells[0][1][0]:.9g}",
                "ci_hi_first_seed": f"{cells[0][1][1]:.9g}",
                "per_seed_scores": json.dumps([round(s, 9) for s in scores]),
            })
            log.info("ablation %s/%s mean weighted F1 %.4f",
                     kind.value, protocol, np.mean(scores))
    fieldnames = list(rows[0])
    _write_table(os.path.join(out, "ablation.csv"), rows, fieldnames)
    _write_json(os.path.join(out, "ablation.json"), rows)
    return out


def cmd_limited(config, args):
    base = pipeline_config(config)
    train, val, test, unlabeled, _ = prepare_splits(config)
    full_train = datakit.Dataset.concatenate([train, val])
    rows = pipeline.limited_data_sweep(base, full_train, test, unlabeled,
                                       config["n_per_class_list"],
                                       config["seeds"])
    out = run_dir(config, "limited")
    table = [{
        "n_per_class": row["n_per_class"],
        "configuration": row["kind"],
        "mean_weighted_f1": f"{row['mean']:.9g}",
        "std_weighted_f1": f"{row['std']:.9g}",
        "per_seed_scores": json.dumps([round(s, 9) for s in row["scores"]]),
    } for row in rows]
    _write_table(os.path.join(out, "limited.csv"), table, list(table[0]))
    _write_json(os.path.join(out, "limited.json"), table)
    return out


def cmd_intensity_study(config, args):
    base = pipeline_config(config)
    train, val, test, unlabeled, _ = prepare_splits(config)
    if unlabeled is None or len(unlabeled) == 0:
        raise ConfigurationError("data.unlabeled: intensity study needs unlabeled data")
    target = config["intensity_target_size"] or len(unlabeled) // 3
    out = run_dir(config, "intensity-study")
    rows = []

    def metrics_row(name, report):
        data = report.to_dict()
        row = {"unlabeled_subset": name}
        for metric in ("weighted_f1", "macro_f1", "kappa"):
            row[metric] = f"{data[metric]['point']:.9g}"
            row[f"{metric}_ci_lo"] = f"{data[metric]['ci_lo']:.9g}"
            row[f"{metric}_ci_hi"] = f"{data[metric]['ci_hi']:.9g}"
        return row

    supervised = PipelineConfig.from_dict(
        {**base.to_dict(), "kind": "fully_supervised"})
    result = pipeline.run_configuration(supervised, train, val, test)
    rows.append(metrics_row("none_fully_supervised", result.report))
    selfhar = PipelineConfig.from_dict({**base.to_dict(), "kind": "selfhar"})
    for mode in ("inactive", "balanced", "active"):
        subset = datakit.subset_by_intensity(unlabeled, mode, target)
        result = pipeline.run_configuration(selfhar, train, val, test,
                                            unlabeled=subset)
        rows.append(metrics_row(mode, result.report))
        log.info("intensity %s (n=%d): weighted F1 %.4f", mode, target,
                 result.report.weighted_f1)
    _write_table(os.path.join(out, "intensity.csv"), rows, list(rows[0]))
    _write_json(os.path.join(out, "intensity.json"), rows)
    return out


def cmd_export_embeddings(config, args):
    params, _ = md.load_weights(config["data"]["weights"])
    labeled, _ = load_labeled_and_unlabeled(config)
    labeled, _ = datakit.znormalize(labeled, labeled)
    out = run_dir(config, "export-embeddings")
    path = os.path.join(out, "embeddings.csv")
    evalkit.export_embeddings(params, labeled, path)
    log.info("wrote %d embeddings to %s", len(labeled), path)
    return out


def cmd_eval(config, args):
    params, _ = md.load_weights(config["data"]["weights"])
    labeled, _ = load_labeled_and_unlabeled(config)
    labeled, _ = datakit.znormalize(labeled, labeled)
    pipe = pipeline_config(config)
    report = evalkit.evaluate_model(params, labeled,
                                    n_resamples=pipe.n_resamples, seed=pipe.seed)
    out = run_dir(config, "eval")
    _write_json(os.path.join(out, "report.json"), report.to_dict())
    log.info("weighted F1 %.4f on %d windows", report.weighted_f1, len(labeled))
    return out


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "limited": cmd_limited,
    "intensity-study": cmd_intensity_study,
    "export-embeddings": cmd_export_embeddings,
    "eval": cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="harpipe",
        description="Teacher-student semi-supervised HAR experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="JSON config file")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the pipeline seed")
        cmd.add_argument("--jobs", type=int, default=1,
                         help="parallel workers for independent cells")
        cmd.add_argument("--out", default=None, help="output root directory")
        cmd.add_argument("--print-config", action="store_true",
                         help="print the resolved config and exit")
    return parser


def main(argv=None):
    try:
        configure_logging()
        args = build_parser().parse_args(argv)
        config = load_config(args)
        validate_config(config, args.command)
        if args.print_config:
            print(json.dumps({k: v for k, v in config.items() if k != "jobs"},
                             indent=2, sort_keys=True))
            return 0
        out = COMMANDS[args.command](config, args)
        log.debug("artifacts in %s", out)
        return 0
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except HarpipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
