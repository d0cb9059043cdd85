"""Command-line entry point: ``segloc <subcommand> [flags]``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from typing import List, Optional


from .config import ConfigError, apply_config, flatten, read_config
from .nn.train import TrainConfig

log = logging.getLogger("segloc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    min_views: int = 8
    max_views: int = 16


@dataclass(frozen=True)
class EvalConfig:
    rank_bins: int = 5
    localize_every: int = 3
    local_radius: float = 30.0
    k: int = 25
    attention_samples: int = 40
    dilation: int = 5
    overlays: int = 4


def _experiment_default():
    from .pipeline import ExperimentConfig
    return ExperimentConfig()


@dataclass(frozen=True)
class RunConfig:
    experiment: object = field(default_factory=_experiment_default)
    train: TrainConfig = TrainConfig()
    dataset: DatasetConfig = DatasetConfig()
    eval: EvalConfig = EvalConfig()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="segloc", description="Context-aware LiDAR segment description and loop closure")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True, model=False):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--config", default=None, help="key = value file")
        if data:
            sp.add_argument("--data", default=None, help="dataset directory written by synth")
        if model:
            sp.add_argument("--model", default=None, help="checkpoint; default DATA/../train/model.segnet")

    s = sub.add_parser("synth", help="simulate a world and three drives")
    common(s, data=False)
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--archive", action="store_true", help="also write the CSV scan archive")
    s = sub.add_parser("train", help="train the descriptor network")
    common(s)
    s.add_argument("--epochs", type=int, default=None)
    s = sub.add_parser("describe", help="descriptors of every query observation")
    common(s, model=True)
    s = sub.add_parser("localize", help="loop closures of the query drive")
    common(s, model=True)
    s.add_argument("--policy", choices=["25nn", "1nn"], default="1nn")
    s.add_argument("--k", type=int, default=None)
    s = sub.add_parser("attention", help="ScoreCam heatmaps and attention scores")
    common(s, model=True)
    s = sub.add_parser("evaluate", help="rank, closure and attention report")
    common(s, model=True)
    s.add_argument("--k", type=int, default=None)
    s = sub.add_parser("selftest", help="run the oracle suites")
    common(s, data=False)
    return p


def _run_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        values = read_config(args.config)
        cfg, used = apply_config(cfg, values)
        unknown = sorted(set(values) - used)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if args.seed is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, seed=args.seed), train=replace(cfg.train, seed=args.seed))
    if getattr(args, "width", None) is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, width=args.width))
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    if getattr(args, "k", None) is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, k=args.k))
    return cfg


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n} is required for {args.command}")


def _write_manifest(out, args, cfg: RunConfig, extra=None):
    m = {"command": args.command, "config": flatten(cfg), "threads": args.threads}
    for k in ("data", "model", "policy"):
        if getattr(args, k, None) is not None:
            m[k] = getattr(args, k)
    if extra:
        m.update(extra)
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(m, f, indent=1, sort_keys=True)
        f.write("\n")


def _model_path(args):
    if args.model:
        return args.model
    return os.path.join(os.path.dirname(os.path.normpath(args.data)), "train", "model.segnet")


def _load(args):
    from .nn.model import load_checkpoint
    from .pipeline import load_experiment

    _need(args, "data")
    exp = load_experiment(args.data)
    path = _model_path(args)
    if not os.path.exists(path):
        raise FileNotFoundError(f"model checkpoint {path} not found")
    return exp, load_checkpoint(path)


def cmd_synth(args, cfg: RunConfig):
    from .pipeline import save_experiment, synthesize

    exp = synthesize(cfg.experiment)
    save_experiment(args.out, exp)
    if args.archive:
        _write_archives(args.out, exp)
    _write_manifest(args.out, args, cfg)
    return EXIT_OK


def _write_archives(out, exp):
    """Replay every drive and store its scans in the CSV archive layout."""
    from .pipeline import SEQ_DB, SEQ_QUERY, SEQ_TRAIN
    from .synth import road_trajectory, simulate_scan, write_scan_archive

    cfg = exp.config
    dcfg = {SEQ_TRAIN: cfg.train_drive, SEQ_DB: cfg.db_drive, SEQ_QUERY: cfg.query_drive}
    for s, d in sorted(exp.drives.items()):
        dc = dcfg[s]
        traj = road_trajectory(-cfg.lead, cfg.road_length + 2 * cfg.lead, dc.speed, dc.lateral_offset,
                               weave_amplitude=dc.weave_amplitude)
        scans = [simulate_scan(exp.world, traj, float(t - cfg.period * 0.5), cfg.period, cfg.scan_config(s))
                 for t in d.scan_times]
        write_scan_archive(os.path.join(out, f"drive_{s}", "archive"), scans)


def cmd_train(args, cfg: RunConfig):
    from .nn.model import save_checkpoint
    from .nn.train import intensity_stats, train, write_manifest
    from .pipeline import SEQ_TRAIN, load_experiment, tensors, training_set

    _need(args, "data", "out")
    exp = load_experiment(args.data)
    if SEQ_TRAIN not in exp.drives:
        raise FileNotFoundError("dataset has no training drive")
    vox, views, labels, classes = training_set(exp.drives[SEQ_TRAIN], cfg.dataset.min_views, cfg.dataset.max_views)
    stats = intensity_stats(views)
    res = train(vox, tensors(views, stats), labels, cfg.train, stats=stats)
    res.params.meta["classes"] = ",".join(str(c) for c in classes)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "model.segnet"), res.params)
    write_manifest(os.path.join(args.out, "training.csv"), res.history)
    _write_manifest(args.out, args, cfg, {"n_classes": len(classes), "n_samples": int(len(labels)),
                                          "best_epoch": res.best_epoch, "intensity_stats": list(stats)})
    log.info("best epoch %d of %d", res.best_epoch, cfg.train.epochs)
    return EXIT_OK


def cmd_describe(args, cfg: RunConfig):
    from .pipeline import SEQ_QUERY, describe_observations

    _need(args, "out")
    exp, params = _load(args)
    q = exp.drives[SEQ_QUERY]
    keep, D = describe_observations(params, q)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "descriptors.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["observation", "segment_id", "timestamp", "completeness"] + [f"d{i}" for i in range(D.shape[1])])
        for i, d in zip(keep, D):
            w.writerow([i, int(q.obs_track[i]), repr(q.obs_time(i)), repr(q.completeness(i))]
                       + [repr(float(v)) for v in d])
    _write_manifest(args.out, args, cfg, {"n_descriptors": len(keep)})
    return EXIT_OK


def cmd_localize(args, cfg: RunConfig):
    from .localization import write_closure_log
    from .pipeline import closure_run

    _need(args, "out")
    exp, params = _load(args)
    e = cfg.eval
    closures = closure_run(params, exp, args.policy, e.localize_every, e.local_radius, e.k)
    os.makedirs(args.out, exist_ok=True)
    write_closure_log(os.path.join(args.out, f"closures_{args.policy}.csv"), closures)
    _write_manifest(args.out, args, cfg, {"n_closures": len(closures)})
    return EXIT_OK


def _attention_outputs(out, items, overlays: int):
    from .attention import format_score, overlay_svg, write_heatmap

    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "attention_scores.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["observation", "rank", "score"])
        for it in items:
            w.writerow([it.obs, repr(it.rank), format_score(it.score)])
    for it in items[:overlays]:
        stem = os.path.join(out, f"heatmap_{it.obs:06d}")
        write_heatmap(stem, it.heatmap)
        overlay_svg(stem + ".svg", it.intensity, it.heatmap, it.mask, title=f"obs {it.obs} rank {it.rank:g}")


def cmd_attention(args, cfg: RunConfig):
    from .pipeline import attention_run, rank_run

    _need(args, "out")
    exp, params = _load(args)
    ranks = rank_run(params, exp)
    items = attention_run(params, exp, ranks, cfg.eval.attention_samples, cfg.eval.dilation)
    _attention_outputs(args.out, items, cfg.eval.overlays)
    _write_manifest(args.out, args, cfg, {"n_segments": len(items)})
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig):
    from .evaluation import (ATTENTION_HEADER, RANK_HEADER, attention_vs_rank, closure_stats, emit_report,
                             rank_vs_completeness, svg_histogram, svg_line_plot)
    from .localization import write_closure_log
    from .pipeline import attention_run, closure_run, rank_run

    _need(args, "out")
    exp, params = _load(args)
    e = cfg.eval
    ranks = rank_run(params, exp)
    rows = rank_vs_completeness(ranks.ranks, ranks.completeness, e.rank_bins)
    tables = {"rank_vs_completeness": (RANK_HEADER, rows)}
    closures = {}
    stat_rows = []
    for policy in ("25nn", "1nn"):
        cl = closure_run(params, exp, policy, e.localize_every, e.local_radius, e.k)
        closures[policy] = cl
        st = closure_stats(cl)
        stat_rows.append((policy, st.n_correct, st.n_incorrect, st.mean_error_text()))
    tables["closure_stats"] = (["policy", "n_correct", "n_incorrect", "mean_error_m"], stat_rows)
    items = attention_run(params, exp, ranks, e.attention_samples, e.dilation)
    att_rows, note = attention_vs_rank([it.score for it in items], [it.rank for it in items])
    tables["attention_vs_rank"] = (ATTENTION_HEADER, att_rows)
    centers = [(r[0] + r[1]) / 2 for r in rows]
    plots = {
        "rank_vs_completeness": lambda p: svg_line_plot(
            p, centers, [r[3] for r in rows], "median rank vs completeness", "completeness", "rank",
            band=([r[4] for r in rows], [r[5] for r in rows])),
        "attention_vs_rank": lambda p: svg_line_plot(
            p, [r[0] + 1 for r in att_rows], [r[4] for r in att_rows], "attention score by rank bin",
            "rank bin", "mean attention score"),
    }
    for policy, cl in closures.items():
        errs = [c.error for c in cl]
        plots[f"closure_errors_{policy}"] = (lambda p, errs=errs, policy=policy: svg_histogram(
            p, errs, 20, f"closure error ({policy})", "error [m]"))
        plots[f"closure_timeline_{policy}"] = (lambda p, cl=cl, policy=policy: svg_line_plot(
            p, [c.timestamp for c in cl], [c.error for c in cl], f"closure error over time ({policy})",
            "time [s]", "error [m]"))
    os.makedirs(args.out, exist_ok=True)
    emit_report(args.out, tables, {"command": "evaluate", "config": flatten(cfg), "data": args.data,
                                   "model": _model_path(args), "attention_note": note,
                                   "n_queries": len(ranks.obs)}, plots)
    for policy, cl in closures.items():
        write_closure_log(os.path.join(args.out, f"closures_{policy}.csv"), cl)
    _attention_outputs(os.path.join(args.out, "attention"), items, e.overlays)
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig):
    from .selftest import run_all

    results = run_all(seed=args.seed if args.seed is not None else 0)
    ok = True
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "selftest.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["check", "passed", "detail"])
            w.writerows(results)
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "describe": cmd_describe, "localize": cmd_localize,
            "attention": cmd_attention, "evaluate": cmd_evaluate, "selftest": cmd_selftest}


def _setup_logging():
    level = os.environ.get("SEGLOC_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.command == "synth":
            _need(args, "out")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = _run_config(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_DATA

    from threadpoolctl import threadpool_limits

    from .nn.model import ForwardError
    from .nn.train import TrainingError

    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, TrainingError, ForwardError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
