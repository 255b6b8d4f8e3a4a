"""Staged dual teacher-student training.

Warm-up iterations mine the frozen static teacher at a low threshold;
refinement iterations raise that threshold and add dynamic-teacher mining
under a per-batch adapted threshold. The student takes the optimizer steps,
the dynamic teacher only ever moves by EMA. A two-phase variant trains the
refinement student from scratch against a frozen warm-up teacher.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .detector import (
    AdamMemory,
    DetectorState,
    encode,
    fuse_max,
    head_backward,
    head_features,
    init_state,
    optimizer_step,
    prediction_from_features,
    project_feature,
    supervised_loss_detailed,
)
from .geometry import GLOBAL_FRAME, AnchorGrid, transform_box
from .mining import (
    EMPTY_POSITIVES,
    LabelSet,
    MiningConfig,
    PositiveSet,
    assign_sparse_anchor,
    dynamic_threshold,
    merge_labels,
    mfm,
    nas,
    sfm,
)
from .scenes import Scene

WARM_UP = "warm_up"
REFINEMENT = "refinement"

# sigma_dt must stay a usable threshold even if every gathered score rounds
# to 0.0 or 1.0.
_SIGMA_EPS = 1e-9


class TrainAbort(RuntimeError):
    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainerConfig:
    mining: MiningConfig = field(default_factory=MiningConfig)
    alpha: float = 0.999
    i_max: int = 600
    i_refine: int = 300
    batch_size: int = 4
    lr: float = 0.002
    seed: int = 0
    pseudo_regression: bool = True
    disable_mfm: bool = False
    disable_sfm: bool = False
    disable_nas: bool = False
    disable_stt: bool = False
    static_pretrain_iters: int = 300
    inference_model: str = "dynamic_teacher"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.i_max < 1:
            raise ValueError("i_max must be positive")
        if not 0 < self.i_refine <= self.i_max:
            raise ValueError("need 0 < i_refine <= i_max")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.static_pretrain_iters < 0:
            raise ValueError("static_pretrain_iters must be non-negative")
        if self.inference_model not in ("dynamic_teacher", "student"):
            raise ValueError("inference_model must be 'dynamic_teacher' or 'student'")


@dataclass(frozen=True)
class TrainRun:
    student: DetectorState
    dynamic_teacher: DetectorState
    static_teacher: DetectorState
    log: tuple[dict, ...]
    n_optimizer_steps: int
    n_ema_updates: int


def ema_update(theta_dt: DetectorState, theta_s: DetectorState, iter: int, alpha: float) -> DetectorState:
    """Two-branch EMA: a 1/iter ramp (running mean of students) until
    1 - 1/iter reaches alpha, then a fixed-alpha moving average."""
    if iter < 1:
        raise ValueError("iteration count starts at 1")
    if theta_dt.layout() != theta_s.layout():
        raise ValueError("parameter layouts differ")
    ramp = 1.0 - 1.0 / iter
    coeff = ramp if ramp < alpha else alpha
    return theta_dt.with_params(coeff * theta_dt.params + (1.0 - coeff) * theta_s.params)


# ---------------------------------------------------------------------------
# Per-scene forward plumbing, cached across iterations.


def scene_features(scene: Scene, grid: AnchorGrid) -> np.ndarray:
    """Fused collaborative feature rows for the scene's ego agent
    (agents[0]); other agents' maps are projected into the ego frame."""
    ego = scene.agents[0]
    ego_map = encode(ego, grid)
    projected = [
        project_feature(encode(agent, grid), agent.pose, ego.pose)
        for agent in scene.agents[1:]
    ]
    return head_features(fuse_max(ego_map, projected))


def scene_sparse_pairs(scene: Scene, grid: AnchorGrid) -> list[tuple[int, object]]:
    """(anchor, ego-frame gt box) for every agent's sparse label whose box
    center falls inside the ego grid; all agents' labels pool into the ego
    frame."""
    ego = scene.agents[0]
    pairs = []
    seen = set()
    for agent in scene.agents:
        if agent.sparse_label is None:
            continue
        box = transform_box(scene.box_by_id(agent.sparse_label), GLOBAL_FRAME, ego.pose)
        if not grid.contains_point(box.cx, box.cy):
            continue
        anchor = assign_sparse_anchor(box, grid)
        if anchor in seen:
            continue
        seen.add(anchor)
        pairs.append((anchor, box))
    return pairs


class _SceneCache:
    """Static per-scene artifacts: fused features, static-teacher mining at
    both thresholds, sparse anchors, and the warm-up label set."""

    def __init__(self, corpus: Sequence[Scene], static_teacher: DetectorState,
                 config: TrainerConfig, grid: AnchorGrid):
        self.grid = grid
        self.config = config
        self.features = [scene_features(s, grid) for s in corpus]
        self.sparse = [scene_sparse_pairs(s, grid) for s in corpus]
        if config.disable_mfm:
            self.static_low = [EMPTY_POSITIVES] * len(corpus)
            self.static_high = [EMPTY_POSITIVES] * len(corpus)
        else:
            static_preds = [
                prediction_from_features(f, static_teacher, grid) for f in self.features
            ]
            m = config.mining
            self.static_low = [mfm(p, grid, m.sigma_st_low, m.tau) for p in static_preds]
            self.static_high = [mfm(p, grid, m.sigma_st_high, m.tau) for p in static_preds]
        self._warm_labels: dict[int, LabelSet] = {}

    def warm_labels(self, si: int) -> LabelSet:
        if si not in self._warm_labels:
            positives = self.static_low[si]
            neighbors = [] if self.config.disable_nas else nas(
                positives, self.grid, self.config.mining.tau_nei
            )
            self._warm_labels[si] = merge_labels(
                self.sparse[si], positives, neighbors, self.grid,
                pseudo_regression=self.config.pseudo_regression,
            )
        return self._warm_labels[si]


def _batch_step(cache: _SceneCache, batch, labels_per_scene, student, memory,
                config: TrainerConfig, iteration: int):
    """Mean loss/gradient over the batch, one Adam step on the student."""
    grid = cache.grid
    total = 0.0
    terms_sum = {"cls": 0.0, "reg": 0.0, "dir": 0.0}
    grad_sum = np.zeros_like(student.params)
    for si, labels in zip(batch, labels_per_scene):
        pred = prediction_from_features(cache.features[si], student, grid)
        loss, grad, terms = supervised_loss_detailed(pred, labels, grid)
        total += loss
        for k in terms_sum:
            terms_sum[k] += terms[k]
        grad_sum += head_backward(cache.features[si], grad)
    n = len(batch)
    mean_loss = total / n
    if not math.isfinite(mean_loss):
        raise TrainAbort(iteration, f"non-finite loss {mean_loss}")
    student, memory = optimizer_step(
        student, grad_sum / n, memory, lr=config.lr
    )
    mean_terms = {k: v / n for k, v in terms_sum.items()}
    return student, memory, mean_loss, mean_terms


def _count_sources(labels_per_scene) -> dict:
    counts = {"sparse": 0, "pseudo_main": 0, "pseudo_supp": 0, "neighbor": 0}
    for labels in labels_per_scene:
        for k, v in labels.count_by_source().items():
            counts[k] += v
    return counts


def pretrain_static_teacher(corpus: Sequence[Scene], config: TrainerConfig,
                            grid: AnchorGrid) -> DetectorState:
    """Train a fresh detector on the sparse labels alone."""
    state = init_state(grid, [config.seed, 11])
    if config.static_pretrain_iters == 0 or not corpus:
        return state
    features = [scene_features(s, grid) for s in corpus]
    labels = [
        merge_labels(scene_sparse_pairs(s, grid), EMPTY_POSITIVES, [], grid)
        for s in corpus
    ]
    rng = np.random.default_rng([config.seed, 13])
    memory = AdamMemory.zeros(state.params.size)
    n = len(corpus)
    for it in range(config.static_pretrain_iters):
        batch = sorted(rng.choice(n, size=min(config.batch_size, n), replace=False).tolist())
        total = 0.0
        grad_sum = np.zeros_like(state.params)
        for si in batch:
            pred = prediction_from_features(features[si], state, grid)
            loss, grad, _ = supervised_loss_detailed(pred, labels[si], grid)
            total += loss
            grad_sum += head_backward(features[si], grad)
        if not math.isfinite(total):
            raise TrainAbort(it, f"non-finite pretrain loss {total}")
        state, memory = optimizer_step(state, grad_sum / len(batch), memory, lr=config.lr)
    return state


def clamp_sigma(sigma: float) -> float:
    return min(max(sigma, _SIGMA_EPS), 1.0 - _SIGMA_EPS)


def train(corpus: Sequence[Scene], static_teacher: DetectorState,
          config: TrainerConfig, grid: AnchorGrid) -> TrainRun:
    """The staged loop: warm-up below i_refine, refinement from i_refine on.
    Iterations are logged 0-based, so the stage flag flips exactly at
    i_refine and i_refine == i_max never refines; the EMA ramp counts from 1."""
    if not corpus:
        raise ValueError("corpus is empty")
    cache = _SceneCache(corpus, static_teacher, config, grid)
    student = init_state(grid, [config.seed, 21])
    dynamic = student
    memory = AdamMemory.zeros(student.params.size)
    rng = np.random.default_rng([config.seed, 7])
    n = len(corpus)
    m = config.mining
    log = []
    n_opt = 0
    n_ema = 0
    for it in range(config.i_max):
        batch = sorted(rng.choice(n, size=min(config.batch_size, n), replace=False).tolist())
        refinement = it >= config.i_refine
        sigma_dt = None
        violations = 0
        if not refinement:
            labels_per_scene = [cache.warm_labels(si) for si in batch]
        else:
            labels_per_scene = []
            dyn_preds = [
                prediction_from_features(cache.features[si], dynamic, grid) for si in batch
            ]
            if not config.disable_sfm:
                sigma_dt = dynamic_threshold(
                    dyn_preds,
                    [[anchor for anchor, _ in cache.sparse[si]] for si in batch],
                    fallback=m.sigma_st_high,
                )
            for si, dyn_pred in zip(batch, dyn_preds):
                r_main = cache.static_high[si]
                if config.disable_sfm:
                    r_supp = EMPTY_POSITIVES
                else:
                    r_supp = sfm(dyn_pred, grid, clamp_sigma(sigma_dt), m.tau, r_main)
                violations += len(
                    r_main.cells(grid.anchors_per_cell) & r_supp.cells(grid.anchors_per_cell)
                )
                union = r_main.union(r_supp)
                neighbors = [] if config.disable_nas else nas(union, grid, m.tau_nei)
                labels_per_scene.append(
                    merge_labels(cache.sparse[si], union, neighbors, grid,
                                 pseudo_regression=config.pseudo_regression)
                )
        student, memory, mean_loss, mean_terms = _batch_step(
            cache, batch, labels_per_scene, student, memory, config, it
        )
        n_opt += 1
        dynamic = ema_update(dynamic, student, it + 1, config.alpha)
        n_ema += 1
        log.append(
            {
                "iter": it,
                "stage": REFINEMENT if refinement else WARM_UP,
                "loss": mean_loss,
                "loss_terms": mean_terms,
                "sigma_dt": sigma_dt,
                "counts": _count_sources(labels_per_scene),
                "cell_overlap_violations": violations,
                "optimized": "student",
                "ema_target": "dynamic_teacher",
            }
        )
    return TrainRun(
        student=student,
        dynamic_teacher=dynamic,
        static_teacher=static_teacher,
        log=tuple(log),
        n_optimizer_steps=n_opt,
        n_ema_updates=n_ema,
    )


def train_no_stt(corpus: Sequence[Scene], static_teacher: DetectorState,
                 config: TrainerConfig, grid: AnchorGrid) -> TrainRun:
    """Two separately trained phases instead of the staged loop: a full
    warm-up run first, whose EMA teacher is then frozen as an auxiliary
    teacher; a second student starts from scratch and mines it with SFM,
    while the frozen teacher receives no further updates."""
    phase1_cfg = replace(config, disable_stt=False, i_max=config.i_refine,
                         i_refine=config.i_refine, disable_sfm=True)
    phase1 = train(corpus, static_teacher, phase1_cfg, grid)
    aux_teacher = phase1.dynamic_teacher

    cache = _SceneCache(corpus, static_teacher, config, grid)
    student = init_state(grid, [config.seed, 22])
    memory = AdamMemory.zeros(student.params.size)
    rng = np.random.default_rng([config.seed, 8])
    n = len(corpus)
    m = config.mining
    log = list(phase1.log)
    n_opt = phase1.n_optimizer_steps
    aux_preds = [prediction_from_features(f, aux_teacher, grid) for f in cache.features]
    for it in range(config.i_max - config.i_refine):
        batch = sorted(rng.choice(n, size=min(config.batch_size, n), replace=False).tolist())
        sigma_dt = None
        if not config.disable_sfm:
            sigma_dt = dynamic_threshold(
                [aux_preds[si] for si in batch],
                [[anchor for anchor, _ in cache.sparse[si]] for si in batch],
                fallback=m.sigma_st_high,
            )
        labels_per_scene = []
        violations = 0
        for si in batch:
            r_main = cache.static_high[si]
            if config.disable_sfm:
                r_supp = EMPTY_POSITIVES
            else:
                r_supp = sfm(aux_preds[si], grid, clamp_sigma(sigma_dt), m.tau, r_main)
            violations += len(
                r_main.cells(grid.anchors_per_cell) & r_supp.cells(grid.anchors_per_cell)
            )
            union = r_main.union(r_supp)
            neighbors = [] if config.disable_nas else nas(union, grid, m.tau_nei)
            labels_per_scene.append(
                merge_labels(cache.sparse[si], union, neighbors, grid,
                             pseudo_regression=config.pseudo_regression)
            )
        student, memory, mean_loss, mean_terms = _batch_step(
            cache, batch, labels_per_scene, student, memory, config,
            config.i_refine + it,
        )
        n_opt += 1
        log.append(
            {
                "iter": config.i_refine + it,
                "stage": "second_phase",
                "loss": mean_loss,
                "loss_terms": mean_terms,
                "sigma_dt": sigma_dt,
                "counts": _count_sources(labels_per_scene),
                "cell_overlap_violations": violations,
                "optimized": "student",
                "ema_target": None,
            }
        )
    return TrainRun(
        student=student,
        dynamic_teacher=aux_teacher,
        static_teacher=static_teacher,
        log=tuple(log),
        n_optimizer_steps=n_opt,
        n_ema_updates=phase1.n_ema_updates,
    )


def run_training(corpus: Sequence[Scene], static_teacher: DetectorState,
                 config: TrainerConfig, grid: AnchorGrid) -> TrainRun:
    if config.disable_stt:
        return train_no_stt(corpus, static_teacher, config, grid)
    return train(corpus, static_teacher, config, grid)


def select_inference_model(run: TrainRun, which: str = "dynamic_teacher") -> DetectorState:
    if which == "dynamic_teacher":
        return run.dynamic_teacher
    if which == "student":
        return run.student
    raise ValueError(f"unknown inference model '{which}'")


# ---------------------------------------------------------------------------
# Ablation presets.

ABLATIONS = {
    "baseline": {"disable_mfm": True, "disable_sfm": True, "disable_nas": True,
                 "inference_model": "student"},
    "mfm-only": {"disable_sfm": True, "disable_nas": True},
    "mfm-nas": {"disable_sfm": True},
    "full": {},
    "no-stt": {"disable_stt": True, "inference_model": "student"},
}


def apply_ablation(config: TrainerConfig, name: str) -> TrainerConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation '{name}', expected one of {sorted(ABLATIONS)}")
    return replace(config, **ABLATIONS[name])


def save_run_log(path, run: TrainRun) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in run.log:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")
