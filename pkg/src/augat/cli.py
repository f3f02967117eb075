"""``augat`` command line: augment, calibrate-hardness, train, evaluate, grid-search,
sweep-diversity and report.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .advtrain import (TrainingDiverged, TrainReport, adversarial_train, augment_dataset,
                       calibrate_kind, clean_accuracy, evaluate_robustness, final_evaluation,
                       hardness_ratio, stream_key)
from .config import INTEGER_KINDS, ConfigError, RunConfig, default_degree_targets, dump_json
from .data import DataError, read_png, write_png
from .idbh import (ConsecutiveDropPruning, DominancePruning, FixedAugment, IdbhAugment,
                   IdbhSchedule, NoPruning, RobustnessScore, _hardness_vector, grid_search,
                   replay_idbh, sample_idbh, spatial_variant, strength_diversity_sampler,
                   type_diversity_pool)
from .imagecore import RngStream
from .nn import AveragedModel, build_model, load_checkpoint, save_checkpoint
from .transforms import HARDNESS_DEGREES, CalibrationTable, HardnessCalibration, make_spec

log = logging.getLogger("augat")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


def meta_comment(meta: dict, prefix: str = "#") -> str:
    return f"{prefix} seed={meta['seed']} config_hash={meta['config_hash']} version={meta['version']}\n"


def write_csv(path: Path, fields, rows, meta: dict) -> None:
    buf = io.StringIO()
    buf.write(meta_comment(meta))
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    path.write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# augment

def _png_inputs(root: Path) -> list[Path]:
    if root.is_file():
        return [root]
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() == ".png")


def cmd_augment(cfg: RunConfig, input_path, replay=None) -> int:
    """Write an augmented PNG per input plus a manifest of the sampled layer decisions.

    With ``replay`` the decisions come from an earlier manifest instead of the rng.
    """
    src = cfg.require_path("input", input_path)
    if replay is not None:
        manifest_in = json.loads(cfg.require_path("replay", replay).read_text())
        sched = IdbhSchedule.from_dict(manifest_in["schedule"])
        traces = {e["input"]: e["trace"] for e in manifest_in["images"] if "trace" in e}
    else:
        raw = cfg["augmentation"]["schedule"]
        if raw is None:
            raise ConfigError("augment needs augmentation.schedule")
        if isinstance(raw, str):
            raw = json.loads(cfg.require_path("augmentation.schedule", raw).read_text())
        try:
            sched = IdbhSchedule.from_dict(raw)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"augmentation.schedule: {exc}") from exc
        traces = None
    out_dir = cfg.output_dir()
    files = _png_inputs(src)
    if not files:
        raise DataError(f"no PNG files under {src}")

    out_dir.mkdir(parents=True, exist_ok=True)
    base = src if src.is_dir() else src.parent
    entries, failures = [], 0
    for f in files:
        rel = f.relative_to(base).as_posix()
        try:
            img = read_png(f)
            if traces is not None:
                if rel not in traces:
                    raise DataError(f"{rel} has no trace in the replay manifest")
                trace = traces[rel]
            else:
                trace = sample_idbh(sched, img.shape, RngStream(cfg.seed, stream_key("augment", rel)))
            out = replay_idbh(sched, trace, img)
        except (OSError, ValueError) as exc:
            failures += 1
            log.error("%s: %s", rel, exc)
            entries.append({"input": rel, "error": str(exc)})
            continue
        target = out_dir / "images" / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        write_png(out, target)
        entries.append({"input": rel, "output": f"images/{rel}", "trace": trace})
    manifest = {"meta": cfg.meta, "schedule": sched.to_dict(), "images": entries}
    (out_dir / "manifest.json").write_text(dump_json(manifest))
    if failures == len(files):
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate-hardness

RobustnessFn = Callable[[str | None, float | None], float]


def model_robustness_fn(cfg: RunConfig) -> RobustnessFn:
    """Robustness of the configured checkpoint on the (augmented) test split."""
    model = load_checkpoint(cfg.require_path("checkpoint", cfg["checkpoint"]))
    _, test = cfg.load_data()
    attack = cfg.attack("eval")
    seed = cfg.seed

    def robustness(kind, strength):
        data = test
        if kind is not None:
            data = augment_dataset(test, FixedAugment(make_spec(kind, strength)), seed)
        return evaluate_robustness(model, data, attack, seed)

    return robustness


def cmd_calibrate_hardness(cfg: RunConfig, robustness: RobustnessFn | None = None) -> int:
    """Search each kind's strength for every target robustness and write a calibration table.

    ``robustness(kind, strength)`` gives the base model's robustness on the
    test set augmented by ``kind`` at ``strength``; ``(None, None)`` means no
    augmentation. By default it evaluates the configured checkpoint.
    """
    plan = cfg.calibration_plan()
    out_dir = cfg.output_dir()
    if robustness is None:
        cfg.check_data()
        robustness = model_robustness_fn(cfg)
    base = robustness(None, None)
    targets = plan["targets"] or default_degree_targets(base)
    if plan["targets"] is None:
        degrees = list(HARDNESS_DEGREES)
    else:
        degrees = [base / t if t > 0 else math.inf for t in targets]

    entries, rows = {}, []
    for kind in plan["kinds"]:
        lo, hi = plan["bounds"][kind]
        results = calibrate_kind(lambda s, k=kind: robustness(k, s), targets, lo, hi,
                                 plan["tolerance"], plan["max_iterations"],
                                 integer=kind in INTEGER_KINDS)
        levels = tuple((d, r.strength if r.reachable else None) for d, r in zip(degrees, results))
        achieved = tuple(r.achieved if r.reachable else None for r in results)
        entries[kind] = HardnessCalibration(kind, levels, achieved)
        for deg, (d, t, r) in enumerate(zip(degrees, targets, results), start=1):
            rows.append({"kind": kind, "degree": deg, "hardness": d, "target": t,
                         "strength": r.strength, "achieved": r.achieved,
                         "achieved_hardness": None if not r.achieved else base / r.achieved,
                         "iterations": r.iterations, "reachable": r.reachable})

    out_dir.mkdir(parents=True, exist_ok=True)
    table = CalibrationTable(entries)
    (out_dir / "calibration.ini").write_text(meta_comment(cfg.meta, ";") + table.dumps())
    report = {"meta": cfg.meta, "base_robustness": base, "levels": rows}
    (out_dir / "calibration.json").write_text(dump_json(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def run_training(cfg: RunConfig, train, test, augmentation, seed: int | None = None):
    """Build a model and adversarially train it per ``cfg``; returns (final, best, swa, report)."""
    t = cfg.train_settings()
    seed = cfg.seed if seed is None else seed
    model = build_model(train.image_shape, train.class_count, cfg.layers(), seed=seed)
    swa = AveragedModel(model, t["swa_start"]) if t["swa_start"] is not None else None
    final, best, report = adversarial_train(
        model, train, augmentation, cfg.attack("train"), cfg.optimizer(), t["epochs"],
        cfg.attack("track"), t["apply_probability"], test_data=test,
        batch_size=t["batch_size"], seed=seed, eps_warmup_epochs=t["eps_warmup_epochs"], swa=swa)
    swa_model = swa.model() if swa is not None and swa.count else None
    return final, best, swa_model, report


def _validate_training(cfg: RunConfig) -> None:
    cfg.check_data()
    cfg.train_settings()
    cfg.optimizer()
    cfg.layers()
    for name in ("train", "track", "eval"):
        cfg.attack(name)
    cfg.augmentation()


def cmd_train(cfg: RunConfig) -> int:
    _validate_training(cfg)
    out_dir = cfg.output_dir()
    train, test = cfg.load_data()
    final, best, swa_model, report = run_training(cfg, train, test, cfg.augmentation())
    report.meta = cfg.meta
    if cfg["train"]["final_eval"]:
        models = {"best": best, "end": final}
        if swa_model is not None:
            models["swa"] = swa_model
        report.final_eval = final_evaluation(models, test, cfg.attack("eval"), cfg.seed)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.dumps())
    (out_dir / "report.csv").write_text(meta_comment(cfg.meta) + report.dumps_csv())
    save_checkpoint(final, out_dir / "end.ckpt", cfg.meta)
    save_checkpoint(best, out_dir / "best.ckpt", cfg.meta)
    if swa_model is not None:
        save_checkpoint(swa_model, out_dir / "swa.ckpt", cfg.meta)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def cmd_evaluate(cfg: RunConfig) -> int:
    """Clean accuracy and robustness of a checkpoint, plus hardness if an augmentation is set."""
    cfg.check_data()
    ckpt = cfg.require_path("checkpoint", cfg["checkpoint"])
    attack = cfg.attack("eval")
    aug = cfg.augmentation()
    out_dir = cfg.output_dir()
    model = load_checkpoint(ckpt)
    _, test = cfg.load_data()
    doc = {"meta": cfg.meta, "attack": cfg["attack"]["eval"], "count": len(test),
           "clean_accuracy": clean_accuracy(model, test)}
    base = evaluate_robustness(model, test, attack, cfg.seed)
    doc["robustness"] = base
    if aug is not None:
        augmented = evaluate_robustness(model, augment_dataset(test, aug, cfg.seed), attack, cfg.seed)
        h = hardness_ratio(base, augmented)
        doc["hardness"] = {"base_robustness": h.base_robustness,
                           "augmented_robustness": h.augmented_robustness,
                           "hardness": None if math.isnan(h.hardness) else
                           ("inf" if math.isinf(h.hardness) else h.hardness),
                           "unbounded": h.unbounded}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "evaluation.json").write_text(dump_json(doc))
    return EXIT_OK


# ---------------------------------------------------------------------------
# grid search

def synthetic_grid_score(schedule: IdbhSchedule) -> RobustnessScore:
    """A deterministic stand-in evaluator: robustness rises then falls with hardness."""
    v = np.asarray(_hardness_vector(schedule), dtype=np.float64)
    weights = np.array([0.0, 0.02, 0.0, 0.004, 0.01, 0.03, 0.02])
    load = float(v @ weights)
    bias = 0.004 if schedule.color_shape.bias == "ColorBiased" else 0.0
    best = 0.5 - (load - 0.06) ** 2 + bias
    return RobustnessScore(best, best - 0.01, 0.8 - 3 * load, 0.8 - 3 * load - 0.01)


def make_pruning(cfg: RunConfig):
    g = cfg["grid"]
    if g["pruning"] == "none":
        return NoPruning()
    if g["pruning"] == "dominance":
        return DominancePruning(float(g["margin"]))
    if g["pruning"] == "consecutive":
        return ConsecutiveDropPruning(int(g["patience"]))
    raise ConfigError(f"grid.pruning must be none, dominance or consecutive, got {g['pruning']!r}")


def cmd_grid_search(cfg: RunConfig, evaluator=None) -> int:
    """Rank the schedules of a search space; progress is resumable from ``progress.jsonl``."""
    space = cfg.search_space()
    pruning = make_pruning(cfg)
    out_dir = cfg.output_dir()
    kind = cfg["grid"]["evaluator"]
    if evaluator is None:
        if kind == "synthetic":
            evaluator = synthetic_grid_score
        elif kind == "train":
            _validate_training(cfg)
            train, test = cfg.load_data()

            def evaluator(schedule):
                _, _, _, rep = run_training(cfg, train, test, IdbhAugment(schedule))
                return RobustnessScore(rep.best_robustness, rep.end_robustness,
                                       rep.best_accuracy, rep.end_accuracy)
        else:
            raise ConfigError(f"grid.evaluator must be train or synthetic, got {kind!r}")

    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        results = grid_search(space, evaluator, pruning, out_dir / "progress.jsonl",
                              workers=int(cfg["threads"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    fields = ["rank", "scheduleId", "bestRobustness", "endRobustness", "bestAccuracy",
              "endAccuracy", "status", "reason", "dominatedBy"]
    rows = []
    for i, r in enumerate(results, start=1):
        s = r.score
        rows.append({"rank": i if r.status == "evaluated" else "", "scheduleId": r.schedule_id,
                     "bestRobustness": "" if s is None else f"{s.best_robustness:.6f}",
                     "endRobustness": "" if s is None else f"{s.end_robustness:.6f}",
                     "bestAccuracy": "" if s is None else f"{s.best_accuracy:.6f}",
                     "endAccuracy": "" if s is None else f"{s.end_accuracy:.6f}",
                     "status": r.status, "reason": r.reason, "dominatedBy": r.dominated_by or ""})
    write_csv(out_dir / "grid.csv", fields, rows, cfg.meta)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep-diversity

def sweep_settings(cfg: RunConfig, image_shape) -> list[tuple[str, object]]:
    """(label, augmentation) pairs for the configured diversity protocol."""
    plan = cfg.sweep_plan()
    table = cfg.calibration_table()
    protocol = plan["protocol"]
    seed = cfg.seed
    out = []
    try:
        if protocol == "hardness":
            for kind in plan["kinds"]:
                for d in plan["degrees"]:
                    out.append((f"{kind}@{d}", FixedAugment(
                        make_spec(kind, table[kind].strength(int(d))))))
        elif protocol == "type":
            for size in plan["pool_sizes"]:
                rng = RngStream(seed, stream_key("type-pool", size))
                sampler = type_diversity_pool(plan["kinds"], int(plan["degree"]), int(size), rng, table)
                names = "+".join(s.kind.value for s in sampler.specs) or "none"
                out.append((f"pool{size}:{names}", sampler))
        elif protocol == "spatial":
            for kind in plan["kinds"]:
                for s in plan["strengths"]:
                    rng = RngStream(seed, stream_key("spatial", kind, s))
                    out.append((f"{kind}@{s}", spatial_variant(kind, s, rng, image_shape)))
        else:
            for kind in plan["kinds"]:
                for r in plan["ranges"]:
                    rng = RngStream(seed, stream_key("strength", kind, *r))
                    sampler = strength_diversity_sampler(kind, r, table, rng, image_shape)
                    out.append((f"{kind}@{min(r)}-{max(r)}", sampler))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"sweep: {exc}") from exc
    return out


def cmd_sweep_diversity(cfg: RunConfig) -> int:
    """Train one model per protocol setting and tabulate best/end robustness."""
    _validate_training(cfg)
    out_dir = cfg.output_dir()
    train, test = cfg.load_data()
    settings = sweep_settings(cfg, train.image_shape)
    rows, reports = [], {}
    for label, aug in settings:
        _, _, _, rep = run_training(cfg, train, test, aug)
        reports[label] = rep.to_json()
        rows.append({"protocol": cfg["sweep"]["protocol"], "setting": label, **rep.summary()})
    out_dir.mkdir(parents=True, exist_ok=True)
    fields = ["protocol", "setting", "best_epoch", "best_robustness", "end_robustness",
              "best_accuracy", "end_accuracy", "gap"]
    write_csv(out_dir / "sweep.csv", fields, rows, cfg.meta)
    (out_dir / "sweep.json").write_text(dump_json({"meta": cfg.meta, "runs": reports}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# report

def cmd_report(cfg: RunConfig, inputs) -> int:
    """Summarise training report JSON files (or directories holding report.json) into one CSV."""
    paths = []
    for raw in inputs:
        p = cfg.require_path("report input", raw)
        paths.extend(sorted(p.rglob("report.json")) if p.is_dir() else [p])
    if not paths:
        raise ConfigError("no report files found")
    rows = []
    for p in paths:
        try:
            rep = TrainReport.from_json(json.loads(p.read_text()))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{p} is not a training report: {exc}") from exc
        rows.append({"report": p.as_posix(), **rep.csv_row()})
    fields = ["report", *TrainReport.CSV_FIELDS]
    out = cfg["output"]
    if out is None:
        sys.stdout.write(meta_comment(cfg.meta))
        writer = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    else:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out) / "summary.csv", fields, rows, cfg.meta)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augat", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--output", help="output directory")
        p.add_argument("--threads", type=int, help="parallel workers (default 1)")
        p.add_argument("--set", dest="assignments", action="append", default=[],
                       metavar="KEY=VALUE", help="override a dotted config key; VALUE is JSON")
        return p

    p = common(sub.add_parser("augment", help="write augmented PNGs and a replayable manifest"))
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--schedule", help="schedule JSON file")
    p.add_argument("--replay", help="manifest to replay instead of sampling")

    p = common(sub.add_parser("calibrate-hardness", help="map strengths to hardness degrees"))
    p.add_argument("--checkpoint", help="base model trained without augmentation")
    p.add_argument("--kinds", nargs="+")

    p = common(sub.add_parser("train", help="adversarially train a model"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--schedule", help="schedule JSON file")

    p = common(sub.add_parser("evaluate", help="clean and robust accuracy of a checkpoint"))
    p.add_argument("--checkpoint")

    p = common(sub.add_parser("grid-search", help="rank schedules of a search space"))
    p.add_argument("--space", help="search space JSON file")
    p.add_argument("--pruning", choices=["none", "dominance", "consecutive"])
    p.add_argument("--evaluator", choices=["train", "synthetic"])

    p = common(sub.add_parser("sweep-diversity", help="train across a diversity protocol"))
    p.add_argument("--protocol", choices=["hardness", "type", "spatial", "strength"])

    p = common(sub.add_parser("report", help="summarise training reports as CSV"))
    p.add_argument("inputs", nargs="+", help="report.json files or directories")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {"seed": args.seed, "output": args.output, "threads": args.threads}
    for flag, key in (("checkpoint", "checkpoint"), ("epochs", "train.epochs"),
                      ("schedule", "augmentation.schedule"), ("space", "grid.space"),
                      ("pruning", "grid.pruning"), ("evaluator", "grid.evaluator"),
                      ("protocol", "sweep.protocol"), ("kinds", "calibration.kinds")):
        overrides[key] = getattr(args, flag, None)
    return RunConfig.build(args.config, overrides, args.assignments)


def dispatch(args) -> int:
    cfg = config_from_args(args)
    cfg.seed  # validates the seed before anything else
    if args.command == "augment":
        return cmd_augment(cfg, args.input, args.replay)
    if args.command == "calibrate-hardness":
        return cmd_calibrate_hardness(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "evaluate":
        return cmd_evaluate(cfg)
    if args.command == "grid-search":
        return cmd_grid_search(cfg)
    if args.command == "sweep-diversity":
        return cmd_sweep_diversity(cfg)
    return cmd_report(cfg, args.inputs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
