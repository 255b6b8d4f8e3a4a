"""Staged training loop, EMA update, ablation presets."""

import json
import math

import numpy as np
import pytest

import bevmine.trainer as trainer_mod
from bevmine.detector import init_state
from bevmine.geometry import GLOBAL_FRAME, AnchorGrid, BoxBEV, Pose2D
from bevmine.mining import assign_sparse_anchor
from bevmine.scenes import Agent, Scene, SceneGenParams, generate_scene, sample_sparse_labels
from bevmine.trainer import (
    ABLATIONS,
    REFINEMENT,
    WARM_UP,
    TrainAbort,
    TrainerConfig,
    apply_ablation,
    ema_update,
    pretrain_static_teacher,
    run_training,
    save_run_log,
    scene_sparse_pairs,
    select_inference_model,
    train,
)

TEMPLATES = ((4.2, 1.9, 0.0), (4.2, 1.9, math.pi / 2))


def make_grid(h=20, w=20, cell=2.0):
    return AnchorGrid(
        height_cells=h,
        width_cells=w,
        cell_size=cell,
        origin=(-w * cell / 2, -h * cell / 2),
        templates=TEMPLATES,
    )


@pytest.fixture(scope="module")
def grid():
    return make_grid()


@pytest.fixture(scope="module")
def corpus(grid):
    params = SceneGenParams(extent=40.0, objects_min=4, objects_max=7, n_agents=2,
                            points_per_object=40.0, clutter_points=20.0, seed=100)
    return [sample_sparse_labels(generate_scene(params, i), seed=200) for i in range(8)]


@pytest.fixture(scope="module")
def static_teacher(corpus, grid):
    config = TrainerConfig(seed=5, static_pretrain_iters=60, batch_size=4)
    return pretrain_static_teacher(corpus, config, grid)


class TestEmaUpdate:
    def setup_method(self):
        g = make_grid(h=3, w=3)
        self.dt = init_state(g, 0)
        self.s = init_state(g, 1)

    def test_first_iteration_copies_student_exactly(self):
        out = ema_update(self.dt, self.s, 1, alpha=0.999)
        assert np.array_equal(out.params, self.s.params)

    def test_second_iteration_is_even_blend(self):
        out = ema_update(self.dt, self.s, 2, alpha=0.999)
        assert np.array_equal(out.params, 0.5 * self.dt.params + 0.5 * self.s.params)

    def test_alpha_branch_after_ramp(self):
        # 1 - 1/10000 = 0.9999 >= alpha, so the fixed coefficient applies
        alpha = 0.999
        out = ema_update(self.dt, self.s, 10_000, alpha=alpha)
        assert np.array_equal(out.params, alpha * self.dt.params + (1.0 - alpha) * self.s.params)

    def test_ramp_phase_equals_running_mean(self):
        g = make_grid(h=3, w=3)
        students = [init_state(g, k) for k in range(1, 10)]
        dt = init_state(g, 99)
        for k, s in enumerate(students, start=1):
            dt = ema_update(dt, s, k, alpha=0.999)
        mean = np.mean(np.stack([s.params for s in students]), axis=0)
        assert np.allclose(dt.params, mean, rtol=0.0, atol=1e-9)

    def test_frozen_student_contracts_by_alpha_per_step(self):
        alpha = 0.99
        dt, s = self.dt, self.s
        norm0 = np.linalg.norm(dt.params - s.params)
        steps = 100
        for k in range(steps):
            dt = ema_update(dt, s, 10_000 + k, alpha=alpha)
        ratio = np.linalg.norm(dt.params - s.params) / (alpha**steps * norm0)
        assert abs(ratio - 1.0) < 1e-12

    def test_rejects_iteration_below_one(self):
        with pytest.raises(ValueError):
            ema_update(self.dt, self.s, 0, alpha=0.999)

    def test_rejects_layout_mismatch(self):
        # the head is shared across cells, so only the per-cell anchor count
        # changes the parameter layout
        single = AnchorGrid(height_cells=3, width_cells=3, cell_size=2.0,
                            origin=(-3.0, -3.0), templates=(TEMPLATES[0],))
        other = init_state(single, 2)
        with pytest.raises(ValueError):
            ema_update(self.dt, other, 5, alpha=0.999)


class TestConfigValidation:
    def test_refine_boundary_must_fit(self):
        with pytest.raises(ValueError):
            TrainerConfig(i_max=10, i_refine=11)
        with pytest.raises(ValueError):
            TrainerConfig(i_max=10, i_refine=0)

    def test_alpha_must_be_open_interval(self):
        with pytest.raises(ValueError):
            TrainerConfig(alpha=1.0)

    def test_inference_model_names(self):
        with pytest.raises(ValueError):
            TrainerConfig(inference_model="oracle")


class TestScenePlumbing:
    def test_sparse_pairs_pool_all_agents_and_dedupe(self, grid):
        box = BoxBEV(3.0, 1.0, 4.2, 1.9, 0.2)
        ego = Agent(agent_id=0, pose=GLOBAL_FRAME, points=[[3.0, 1.0]], sparse_label=0)
        other = Agent(agent_id=1, pose=Pose2D(5.0, 0.0, 0.0), points=[[-2.0, 1.0]],
                      sparse_label=0)
        scene = Scene(scene_id="s", agents=(ego, other), gt_boxes=((box, 0),))
        pairs = scene_sparse_pairs(scene, grid)
        assert len(pairs) == 1
        anchor, local = pairs[0]
        assert anchor == assign_sparse_anchor(box, grid)
        assert (local.cx, local.cy) == (3.0, 1.0)

    def test_sparse_pairs_skip_labels_outside_ego_grid(self, grid):
        near = BoxBEV(0.0, 0.0, 4.2, 1.9, 0.0)
        far = BoxBEV(60.0, 0.0, 4.2, 1.9, 0.0)
        ego = Agent(agent_id=0, pose=GLOBAL_FRAME, points=[[0.0, 0.0]], sparse_label=1)
        scene = Scene(scene_id="s", agents=(ego,), gt_boxes=((near, 0), (far, 1)))
        assert scene_sparse_pairs(scene, grid) == []

    def test_pretrain_zero_iterations_returns_initialization(self, corpus, grid):
        config = TrainerConfig(seed=7, static_pretrain_iters=0)
        state = pretrain_static_teacher(corpus, config, grid)
        assert np.array_equal(state.params, init_state(grid, [7, 11]).params)


@pytest.fixture(scope="module")
def staged_run(corpus, static_teacher, grid):
    config = TrainerConfig(seed=3, i_max=8, i_refine=4, batch_size=4, static_pretrain_iters=60)
    return config, train(corpus, static_teacher, config, grid)


class TestStagedLoop:
    def test_stage_flips_exactly_at_boundary(self, staged_run):
        config, run = staged_run
        assert [r["iter"] for r in run.log] == list(range(config.i_max))
        stages = [r["stage"] for r in run.log]
        assert stages == [WARM_UP] * 4 + [REFINEMENT] * 4

    def test_dynamic_threshold_only_in_refinement(self, staged_run):
        _, run = staged_run
        for record in run.log:
            if record["stage"] == WARM_UP:
                assert record["sigma_dt"] is None
            else:
                assert isinstance(record["sigma_dt"], float)
                assert 0.0 < record["sigma_dt"] < 1.0

    def test_supplementary_labels_only_in_refinement(self, staged_run):
        _, run = staged_run
        for record in run.log:
            if record["stage"] == WARM_UP:
                assert record["counts"]["pseudo_supp"] == 0
        assert sum(r["counts"]["sparse"] for r in run.log) > 0

    def test_update_targets_are_logged(self, staged_run):
        _, run = staged_run
        assert all(r["optimized"] == "student" for r in run.log)
        assert all(r["ema_target"] == "dynamic_teacher" for r in run.log)

    def test_counters_and_frozen_static_teacher(self, staged_run, static_teacher):
        config, run = staged_run
        assert run.n_optimizer_steps == config.i_max
        assert run.n_ema_updates == config.i_max
        assert np.array_equal(run.static_teacher.params, static_teacher.params)

    def test_cell_overlap_violations_are_zero(self, staged_run):
        _, run = staged_run
        assert all(r["cell_overlap_violations"] == 0 for r in run.log)

    def test_boundary_at_end_means_no_refinement(self, corpus, static_teacher, grid):
        config = TrainerConfig(seed=3, i_max=5, i_refine=5, batch_size=4)
        run = train(corpus, static_teacher, config, grid)
        assert all(r["stage"] == WARM_UP for r in run.log)
        assert all(r["sigma_dt"] is None for r in run.log)
        assert sum(r["counts"]["pseudo_supp"] for r in run.log) == 0

    def test_bit_identical_reruns(self, corpus, static_teacher, grid, staged_run):
        config, first = staged_run
        second = train(corpus, static_teacher, config, grid)
        assert np.array_equal(first.student.params, second.student.params)
        assert np.array_equal(first.dynamic_teacher.params, second.dynamic_teacher.params)
        assert json.dumps(first.log, sort_keys=True) == json.dumps(second.log, sort_keys=True)

    def test_aborts_on_non_finite_loss(self, corpus, static_teacher, grid, monkeypatch):
        original = trainer_mod.supervised_loss_detailed

        def poisoned(pred, labels, grid_):
            _, grad, terms = original(pred, labels, grid_)
            return math.inf, grad, terms

        monkeypatch.setattr(trainer_mod, "supervised_loss_detailed", poisoned)
        config = TrainerConfig(seed=3, i_max=4, i_refine=2, batch_size=2)
        with pytest.raises(TrainAbort) as excinfo:
            train(corpus, static_teacher, config, grid)
        assert excinfo.value.iteration == 0

    def test_empty_corpus_rejected(self, static_teacher, grid):
        with pytest.raises(ValueError):
            train([], static_teacher, TrainerConfig(), grid)


class TestAblations:
    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError):
            apply_ablation(TrainerConfig(), "everything")

    def test_full_preset_changes_nothing(self):
        config = TrainerConfig(seed=9)
        assert apply_ablation(config, "full") == config

    def test_preset_names(self):
        assert set(ABLATIONS) == {"baseline", "mfm-only", "mfm-nas", "full", "no-stt"}

    def test_baseline_trains_on_sparse_only(self, corpus, static_teacher, grid):
        config = apply_ablation(
            TrainerConfig(seed=3, i_max=4, i_refine=2, batch_size=4), "baseline"
        )
        run = run_training(corpus, static_teacher, config, grid)
        for record in run.log:
            counts = record["counts"]
            assert counts["pseudo_main"] == 0
            assert counts["pseudo_supp"] == 0
            assert counts["neighbor"] == 0
            assert counts["sparse"] > 0
            assert record["sigma_dt"] is None
        assert select_inference_model(run, config.inference_model) is run.student

    def test_mfm_only_never_mines_supplementary(self, corpus, static_teacher, grid):
        config = apply_ablation(
            TrainerConfig(seed=3, i_max=6, i_refine=3, batch_size=4), "mfm-only"
        )
        run = run_training(corpus, static_teacher, config, grid)
        assert sum(r["counts"]["pseudo_supp"] for r in run.log) == 0
        assert sum(r["counts"]["neighbor"] for r in run.log) == 0
        assert all(r["sigma_dt"] is None for r in run.log)
        assert sum(r["counts"]["pseudo_main"] for r in run.log) > 0

    def test_no_stt_runs_two_phases(self, corpus, static_teacher, grid):
        config = apply_ablation(
            TrainerConfig(seed=3, i_max=6, i_refine=3, batch_size=4), "no-stt"
        )
        run = run_training(corpus, static_teacher, config, grid)
        stages = [r["stage"] for r in run.log]
        assert stages == [WARM_UP] * 3 + ["second_phase"] * 3
        assert [r["iter"] for r in run.log] == list(range(6))
        # the frozen teacher receives no EMA updates in the second phase
        assert run.n_ema_updates == 3
        assert all(r["ema_target"] is None for r in run.log[3:])
        assert run.n_optimizer_steps == 6

    def test_select_inference_model_rejects_unknown(self, staged_run):
        _, run = staged_run
        assert select_inference_model(run, "dynamic_teacher") is run.dynamic_teacher
        with pytest.raises(ValueError):
            select_inference_model(run, "oracle")


class TestRunLog:
    def test_log_round_trips_as_jsonl(self, staged_run, tmp_path):
        _, run = staged_run
        path = tmp_path / "run.jsonl"
        save_run_log(path, run)
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == len(run.log)
        for record in records:
            assert {"iter", "stage", "loss", "loss_terms", "sigma_dt", "counts",
                    "cell_overlap_violations", "optimized", "ema_target"} <= set(record)
