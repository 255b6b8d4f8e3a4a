"""Command-line pipeline: gen-data, train, mine, eval.

One declarative TOML config drives every command; missing keys take the
defaults below, and the fully filled ("effective") config is echoed into
every output file so results stay traceable to their settings. All commands
are pure functions of (config, input files): re-running overwrites outputs
byte-identically.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric abort.
The BEVMINE_LOG_LEVEL environment variable sets log verbosity (only).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .detector import config_digest, load_checkpoint, prediction_from_features, save_checkpoint
from .eval import evaluate_detector, pseudo_label_quality
from .geometry import AnchorGrid
from .mining import (
    MiningConfig,
    dynamic_threshold,
    labels_to_record,
    load_label_dump,
    merge_labels,
    mfm,
    nas,
    save_label_dump,
    sfm,
)
from .scenes import SceneFormatError, SceneGenParams, generate_scene, load_scenes, sample_sparse_labels, save_scenes
from .trainer import (
    TrainAbort,
    TrainerConfig,
    apply_ablation,
    clamp_sigma,
    pretrain_static_teacher,
    run_training,
    save_run_log,
    scene_features,
    scene_sparse_pairs,
    select_inference_model,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ABORT = 3


class UsageError(Exception):
    """Bad flags or a bad config file."""


class DataError(Exception):
    """Input files missing, unreadable, malformed, or mismatched."""


_DEFAULTS = {
    "seed": 0,
    "paths": {
        "out_dir": "out",
        "train_scenes": "data/train.jsonl",
        "val_scenes": "data/val.jsonl",
    },
    "scenes": {
        "extent": 40.0,
        "objects_min": 6,
        "objects_max": 12,
        "length_min": 3.6,
        "length_max": 5.0,
        "width_min": 1.7,
        "width_max": 2.2,
        "n_agents": 2,
        "points_per_object": 40.0,
        "clutter_points": 40.0,
        "occlusion_dropout": 0.2,
        "n_train": 250,
        "n_val": 60,
        # default val_seed is seed + 1, filled after overrides
        "val_seed": None,
    },
    "grid": {
        "height_cells": 20,
        "width_cells": 20,
        "cell_size": 2.0,
        # default origin centers the grid on the ego agent
        "origin": None,
        "templates": [[4.2, 1.9, 0.0], [4.2, 1.9, math.pi / 2]],
    },
    "mining": {
        "sigma_st_low": 0.15,
        "sigma_st_high": 0.2,
        "tau": 0.15,
        "tau_nei": 0.6,
        "sweep": [0.15, 0.2, 0.25, 0.3],
    },
    "trainer": {
        "alpha": 0.999,
        "i_max": 600,
        # default i_refine is half of i_max, filled after overrides
        "i_refine": None,
        "batch_size": 4,
        "lr": 0.002,
        "static_pretrain_iters": 300,
        "pseudo_regression": True,
        "inference_model": "dynamic_teacher",
    },
    "eval": {
        "score_threshold": 0.2,
        "nms_tau": 0.15,
        "iou_thresholds": [0.3, 0.5, 0.7],
    },
}


@dataclass(frozen=True)
class RunConfig:
    effective: dict
    seed: int
    out_dir: Path
    train_scenes: Path
    val_scenes: Path
    scene_params: SceneGenParams
    n_train: int
    n_val: int
    val_seed: int
    grid: AnchorGrid
    trainer: TrainerConfig
    sweep: tuple
    score_threshold: float
    nms_tau: float
    iou_thresholds: tuple

    def grid_digest(self) -> str:
        return config_digest(self.effective["grid"])


def _merge(defaults: dict, raw: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in raw.items():
        if key not in defaults:
            raise UsageError(f"unknown config key '{prefix}{key}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config section '{prefix}{key}' must be a table")
            out[key] = _merge(defaults[key], value, prefix=f"{prefix}{key}.")
        else:
            out[key] = value
    return out


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a TOML config file, fill defaults, apply flag overrides, and
    validate every numeric field through its owning component."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from exc
    doc = _merge(_DEFAULTS, raw)
    for dotted, value in (overrides or {}).items():
        section = doc
        *parents, leaf = dotted.split(".")
        for part in parents:
            section = section[part]
        section[leaf] = value
    if doc["trainer"]["i_refine"] is None:
        doc["trainer"]["i_refine"] = max(1, doc["trainer"]["i_max"] // 2)
    if doc["scenes"]["val_seed"] is None:
        doc["scenes"]["val_seed"] = int(doc["seed"]) + 1
    if doc["grid"]["origin"] is None:
        doc["grid"]["origin"] = [
            -doc["grid"]["width_cells"] * doc["grid"]["cell_size"] / 2.0,
            -doc["grid"]["height_cells"] * doc["grid"]["cell_size"] / 2.0,
        ]
    try:
        scene_params = SceneGenParams(
            extent=float(doc["scenes"]["extent"]),
            objects_min=int(doc["scenes"]["objects_min"]),
            objects_max=int(doc["scenes"]["objects_max"]),
            length_range=(float(doc["scenes"]["length_min"]), float(doc["scenes"]["length_max"])),
            width_range=(float(doc["scenes"]["width_min"]), float(doc["scenes"]["width_max"])),
            n_agents=int(doc["scenes"]["n_agents"]),
            points_per_object=float(doc["scenes"]["points_per_object"]),
            clutter_points=float(doc["scenes"]["clutter_points"]),
            occlusion_dropout=float(doc["scenes"]["occlusion_dropout"]),
            seed=int(doc["seed"]),
        )
        grid = AnchorGrid(
            height_cells=int(doc["grid"]["height_cells"]),
            width_cells=int(doc["grid"]["width_cells"]),
            cell_size=float(doc["grid"]["cell_size"]),
            origin=tuple(float(v) for v in doc["grid"]["origin"]),
            templates=tuple(
                (float(t[0]), float(t[1]), float(t[2])) for t in doc["grid"]["templates"]
            ),
        )
        trainer = TrainerConfig(
            mining=MiningConfig(
                sigma_st_low=float(doc["mining"]["sigma_st_low"]),
                sigma_st_high=float(doc["mining"]["sigma_st_high"]),
                tau=float(doc["mining"]["tau"]),
                tau_nei=float(doc["mining"]["tau_nei"]),
            ),
            alpha=float(doc["trainer"]["alpha"]),
            i_max=int(doc["trainer"]["i_max"]),
            i_refine=int(doc["trainer"]["i_refine"]),
            batch_size=int(doc["trainer"]["batch_size"]),
            lr=float(doc["trainer"]["lr"]),
            seed=int(doc["seed"]),
            pseudo_regression=bool(doc["trainer"]["pseudo_regression"]),
            static_pretrain_iters=int(doc["trainer"]["static_pretrain_iters"]),
            inference_model=str(doc["trainer"]["inference_model"]),
        )
        n_train = int(doc["scenes"]["n_train"])
        n_val = int(doc["scenes"]["n_val"])
        if n_train < 0 or n_val < 0:
            raise ValueError("scene counts must be non-negative")
        return RunConfig(
            effective=doc,
            seed=int(doc["seed"]),
            out_dir=Path(doc["paths"]["out_dir"]),
            train_scenes=Path(doc["paths"]["train_scenes"]),
            val_scenes=Path(doc["paths"]["val_scenes"]),
            scene_params=scene_params,
            n_train=n_train,
            n_val=n_val,
            val_seed=int(doc["scenes"]["val_seed"]),
            grid=grid,
            trainer=trainer,
            sweep=tuple(float(s) for s in doc["mining"]["sweep"]),
            score_threshold=float(doc["eval"]["score_threshold"]),
            nms_tau=float(doc["eval"]["nms_tau"]),
            iou_thresholds=tuple(float(t) for t in doc["eval"]["iou_thresholds"]),
        )
    except (TypeError, ValueError, IndexError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _write_json(path, doc) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _load_corpus(path):
    try:
        return load_scenes(path)
    except FileNotFoundError:
        raise DataError(f"scene file not found: {path}") from None
    except SceneFormatError as exc:
        raise DataError(f"scene file {path}: {exc}") from exc


def _load_state(path, digest):
    try:
        return load_checkpoint(path, expected_config_hash=digest)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise DataError(f"checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands.


def _build_split(config: RunConfig, prefix: str, count: int, seed: int):
    params = replace(config.scene_params, seed=seed)
    scenes = []
    for i in range(count):
        scene = replace(generate_scene(params, i), scene_id=f"{prefix}-{i:05d}")
        if scene.gt_boxes:
            scene = sample_sparse_labels(scene, seed=seed)
        scenes.append(scene)
    return scenes


def _split_stats(scenes, path) -> dict:
    n_objects = sum(len(s.gt_boxes) for s in scenes)
    n_labels = sum(1 for s in scenes for a in s.agents if a.sparse_label is not None)
    return {
        "path": str(path),
        "n_scenes": len(scenes),
        "n_objects": n_objects,
        "n_agents": sum(len(s.agents) for s in scenes),
        "sparse_labels": n_labels,
        "sparse_ratio": n_labels / n_objects if n_objects else 0.0,
    }


def cmd_gen_data(config: RunConfig, args) -> int:
    splits = {}
    for prefix, count, seed, path in (
        ("train", config.n_train, config.seed, config.train_scenes),
        ("val", config.n_val, config.val_seed, config.val_scenes),
    ):
        scenes = _build_split(config, prefix, count, seed)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_scenes(path, scenes)
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
        splits[prefix] = _split_stats(scenes, path)
    _write_json(config.out_dir / "manifest.json",
                {"config": config.effective, "splits": splits})
    print(
        f"wrote {splits['train']['n_scenes']} train / {splits['val']['n_scenes']} val scenes, "
        f"manifest at {config.out_dir / 'manifest.json'}"
    )
    return EXIT_OK


def cmd_train(config: RunConfig, args) -> int:
    trainer_config = apply_ablation(config.trainer, args.ablation)
    corpus = _load_corpus(config.train_scenes)
    if not corpus:
        raise DataError(f"training corpus {config.train_scenes} is empty")
    digest = config.grid_digest()
    static_path = Path(args.static_checkpoint) if args.static_checkpoint else (
        config.out_dir / "static_teacher.json"
    )
    if args.pretrain_static:
        static = pretrain_static_teacher(corpus, trainer_config, config.grid)
        static_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(static_path, static, digest)
    else:
        if not static_path.exists():
            raise DataError(
                f"static teacher checkpoint not found: {static_path} "
                f"(pass --pretrain-static to create it)"
            )
        static = _load_state(static_path, digest)
    run = run_training(corpus, static, trainer_config, config.grid)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(config.out_dir / "student.json", run.student, digest)
    save_checkpoint(config.out_dir / "dynamic_teacher.json", run.dynamic_teacher, digest)
    save_run_log(config.out_dir / "run_log.jsonl", run)
    _write_json(
        config.out_dir / "train_report.json",
        {
            "config": config.effective,
            "ablation": args.ablation,
            "iterations": len(run.log),
            "n_optimizer_steps": run.n_optimizer_steps,
            "n_ema_updates": run.n_ema_updates,
            "final_loss": run.log[-1]["loss"] if run.log else None,
            "cell_overlap_violations": sum(r["cell_overlap_violations"] for r in run.log),
            "checkpoints": {
                "static_teacher": str(static_path),
                "student": str(config.out_dir / "student.json"),
                "dynamic_teacher": str(config.out_dir / "dynamic_teacher.json"),
            },
            "run_log": str(config.out_dir / "run_log.jsonl"),
        },
    )
    print(
        f"trained {len(run.log)} iterations (ablation {args.ablation}), "
        f"final loss {run.log[-1]['loss']:.4f}, checkpoints in {config.out_dir}"
    )
    return EXIT_OK


def _mine_corpus(config: RunConfig, scenes, static, dynamic):
    """One-shot mining pass over a corpus; the adapted threshold is computed
    from the whole corpus as a single batch."""
    grid = config.grid
    m = config.trainer.mining
    features = [scene_features(s, grid) for s in scenes]
    sparse = [scene_sparse_pairs(s, grid) for s in scenes]
    static_preds = [prediction_from_features(f, static, grid) for f in features]
    mains = [mfm(p, grid, m.sigma_st_high, m.tau) for p in static_preds]
    sigma_dt = None
    supps = [None] * len(scenes)
    if dynamic is not None and scenes:
        dyn_preds = [prediction_from_features(f, dynamic, grid) for f in features]
        sigma_dt = dynamic_threshold(
            dyn_preds, [[a for a, _ in pairs] for pairs in sparse],
            fallback=m.sigma_st_high,
        )
        supps = [
            sfm(p, grid, clamp_sigma(sigma_dt), m.tau, main)
            for p, main in zip(dyn_preds, mains)
        ]
    records = []
    for i, scene in enumerate(scenes):
        union = mains[i] if supps[i] is None else mains[i].union(supps[i])
        neighbors = nas(union, grid, m.tau_nei)
        labels = merge_labels(sparse[i], union, neighbors, grid,
                              pseudo_regression=config.trainer.pseudo_regression)
        records.append(labels_to_record(scene.scene_id, labels, grid))
    return records, sigma_dt


def cmd_mine(config: RunConfig, args) -> int:
    scenes = _load_corpus(Path(args.scenes) if args.scenes else config.train_scenes)
    digest = config.grid_digest()
    static_path = Path(args.static_checkpoint) if args.static_checkpoint else (
        config.out_dir / "static_teacher.json"
    )
    dynamic_path = Path(args.dynamic_checkpoint) if args.dynamic_checkpoint else (
        config.out_dir / "dynamic_teacher.json"
    )
    static = _load_state(static_path, digest)
    dynamic = _load_state(dynamic_path, digest)
    records, sigma_dt = _mine_corpus(config, scenes, static, dynamic)
    dump_path = config.out_dir / "label_dump.jsonl"
    config.out_dir.mkdir(parents=True, exist_ok=True)
    save_label_dump(dump_path, records)
    scenes_by_id = {s.scene_id: s for s in scenes}
    quality = pseudo_label_quality(records, scenes_by_id, config.grid)
    sweep = []
    grid = config.grid
    m = config.trainer.mining
    features = [scene_features(s, grid) for s in scenes]
    static_preds = [prediction_from_features(f, static, grid) for f in features]
    for sigma in config.sweep:
        rows = [
            labels_to_record(
                scene.scene_id,
                merge_labels(scene_sparse_pairs(scene, grid),
                             mfm(pred, grid, sigma, m.tau), [], grid),
                grid,
            )
            for scene, pred in zip(scenes, static_preds)
        ]
        entry = pseudo_label_quality(rows, scenes_by_id, grid)
        sweep.append({"sigma": sigma, "fpr": entry.fpr, "mpr": entry.mpr, "an": entry.an})
    _write_json(
        config.out_dir / "mine_summary.json",
        {
            "config": config.effective,
            "dump_path": str(dump_path),
            "n_scenes": len(scenes),
            "sigma_dt": sigma_dt,
            "dump": quality.to_dict(),
            "sweep": sweep,
        },
    )
    print(
        f"mined {quality.counts['pseudo']} pseudo labels over {len(scenes)} scenes "
        f"(fpr {quality.fpr:.3f}, mpr {quality.mpr:.3f}), dump at {dump_path}"
    )
    return EXIT_OK


def cmd_eval(config: RunConfig, args) -> int:
    scenes = _load_corpus(Path(args.scenes) if args.scenes else config.val_scenes)
    if not scenes:
        raise DataError("evaluation corpus is empty")
    checkpoint = Path(args.checkpoint) if args.checkpoint else (
        config.out_dir / "dynamic_teacher.json"
    )
    state = _load_state(checkpoint, config.grid_digest())
    report = evaluate_detector(
        state, scenes, config.grid,
        iou_thresholds=config.iou_thresholds,
        score_threshold=config.score_threshold,
        nms_tau=config.nms_tau,
    )
    doc = {
        "config": config.effective,
        "checkpoint": str(checkpoint),
        "detection": report.to_dict(),
    }
    if args.dump:
        try:
            records = load_label_dump(args.dump)
        except FileNotFoundError:
            raise DataError(f"label dump not found: {args.dump}") from None
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        scenes_by_id = {s.scene_id: s for s in scenes}
        try:
            quality = pseudo_label_quality(records, scenes_by_id, config.grid)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        doc["pseudo_quality"] = quality.to_dict()
    out_path = Path(args.out) if args.out else config.out_dir / "eval_report.json"
    _write_json(out_path, doc)
    ap = report.ap
    print(
        "AP " + " ".join(f"@{t:g}={ap[t]:.4f}" for t in sorted(ap))
        + f" over {len(scenes)} scenes, report at {out_path}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing.


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="bevmine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate seeded train/val scene corpora")
    gen.add_argument("--config", required=True, help="TOML config file")

    train = sub.add_parser("train", help="run the staged training loop")
    train.add_argument("--config", required=True)
    train.add_argument("--ablation", default="full",
                       choices=["baseline", "mfm-only", "mfm-nas", "full", "no-stt"])
    train.add_argument("--pretrain-static", action="store_true",
                       help="pretrain the static teacher on sparse labels first")
    train.add_argument("--static-checkpoint", default=None,
                       help="path to an existing static teacher checkpoint")
    train.add_argument("--i-max", type=int, default=None, help="override trainer.i_max")
    train.add_argument("--i-refine", type=int, default=None, help="override trainer.i_refine")
    train.add_argument("--seed", type=int, default=None, help="override the run seed")

    mine = sub.add_parser("mine", help="one-shot mining pass for auditing")
    mine.add_argument("--config", required=True)
    mine.add_argument("--scenes", default=None, help="scene file (default: train corpus)")
    mine.add_argument("--static-checkpoint", default=None)
    mine.add_argument("--dynamic-checkpoint", default=None)

    ev = sub.add_parser("eval", help="evaluate a checkpoint, write a metrics report")
    ev.add_argument("--config", required=True)
    ev.add_argument("--scenes", default=None, help="scene file (default: val corpus)")
    ev.add_argument("--checkpoint", default=None,
                    help="detector checkpoint (default: out_dir/dynamic_teacher.json)")
    ev.add_argument("--dump", default=None,
                    help="also re-score this pseudo-label dump against the corpus")
    ev.add_argument("--out", default=None, help="report path (default: out_dir/eval_report.json)")
    return parser


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "i_max", None) is not None:
        # the half-of-i_max default for i_refine is filled after overrides,
        # so it tracks an overridden i_max automatically
        out["trainer.i_max"] = args.i_max
    if getattr(args, "i_refine", None) is not None:
        out["trainer.i_refine"] = args.i_refine
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    return out


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "mine": cmd_mine,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BEVMINE_LOG_LEVEL", "WARNING"))
    try:
        args = build_parser().parse_args(argv)
        config = load_run_config(args.config, _overrides(args))
        return _COMMANDS[args.command](config, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
