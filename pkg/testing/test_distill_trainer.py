"""Training state, the per-mode objective and full runs."""

import json
import math
from pathlib import Path

import jsonlines
import numpy as np
import pytest
import torch

from distill_trainer import (
    METRICS_FILE,
    REPORT_FILE,
    MissingTeacherError,
    NonFiniteLossError,
    build_training_state,
    compare_modes,
    effective_weights,
    load_teacher,
    pretrain_teacher,
    run_experiment,
    train_step,
)
from experiment_config import MODES, load_config, with_overrides
from kd_datasets import DatasetFormatError, LabeledBatch, build_datasets, make_loader, write_cifar_binary
from kd_diagnostics import eval_top1
from kd_losses import NonFiniteLogitsError
from staged_backbones import freeze, load_backbone, parameter_checksum, read_checkpoint

CPU = torch.device("cpu")
CONFIGS_DIR = Path(__file__).resolve().parent.parent / "configs"


def _first_batch(cfg) -> LabeledBatch:
    splits = build_datasets(cfg.dataset)
    return next(iter(make_loader(splits.train, cfg.batch_size, cfg.seed, shuffle=True)))


def _state(cfg, mode=None, **overrides):
    if mode is not None:
        overrides["mode"] = mode
    cfg = with_overrides(cfg, overrides) if overrides else cfg
    teacher = load_teacher(cfg, CPU, torch.float64)
    return cfg, build_training_state(cfg, teacher, CPU, torch.float64)


def _optimised(state):
    return [p for group in state.optimizer.param_groups for p in group["params"]]


class TestEffectiveWeights:
    @pytest.mark.parametrize(
        "mode,expected",
        [
            ("ce_only", (0.0, 0.0)),
            ("kd_only", (0.0, 0.3)),
            ("mse_only", (0.2, 0.0)),
            ("hybrid_kd_mse", (0.2, 0.3)),
            ("unikd", (0.2, 0.3)),
            ("fdp_only", (0.2, 0.3)),
        ],
    )
    def test_mode_table(self, micro_config, mode, expected):
        cfg = with_overrides(micro_config, {"mode": mode, "loss.alpha": 0.2, "loss.beta": 0.3})
        weights = effective_weights(cfg)
        assert (weights.alpha, weights.beta) == expected


class TestTrainingState:
    def test_distillation_modes_need_a_teacher(self, micro_config):
        cfg = with_overrides(micro_config, {"mode": "unikd"})
        with pytest.raises(MissingTeacherError):
            build_training_state(cfg, None)

    def test_missing_checkpoint_file(self, micro_config, tmp_path):
        cfg = with_overrides(micro_config, {"mode": "kd_only", "teacher.checkpoint": str(tmp_path / "absent.safetensors")})
        with pytest.raises(MissingTeacherError, match="pretrain-teacher"):
            load_teacher(cfg, CPU, torch.float64)

    def test_ce_only_without_teacher_optimises_only_the_student(self, micro_config):
        state = build_training_state(micro_config, None)
        assert set(state.student_side()) == {"backbone."}
        assert {id(p) for p in _optimised(state)} == {id(p) for p in state.student.parameters()}

    @pytest.mark.parametrize("mode", MODES)
    def test_optimizer_never_sees_teacher_parameters(self, distill_config, mode):
        _, state = _state(distill_config, mode)
        teacher_ids = {id(p) for p in state.teacher.parameters()}
        assert teacher_ids.isdisjoint(id(p) for p in _optimised(state))
        assert all(not p.requires_grad for p in state.teacher.parameters())

    def test_unikd_shares_one_head_and_optimises_both_fusions(self, distill_config):
        _, state = _state(distill_config, "unikd")
        optimised = {id(p) for p in _optimised(state)}
        for module in (state.student_fusion, state.teacher_fusion, state.head):
            assert all(id(p) in optimised for p in module.parameters())
        assert set(state.student_side()) == {"backbone.", "aff.student.", "aff.teacher.", "fdp."}

    def test_ce_only_with_teacher_reports_without_training_the_extras(self, distill_config):
        _, state = _state(distill_config, "ce_only")
        optimised = {id(p) for p in _optimised(state)}
        assert state.head is not None
        assert all(id(p) not in optimised for p in state.head.parameters())

    def test_mode_specific_modules(self, distill_config):
        _, mse = _state(distill_config, "hybrid_kd_mse")
        assert mse.regressors is not None and mse.head is None
        _, fdp = _state(distill_config, "fdp_only")
        assert fdp.adapter is not None and fdp.student_fusion is None
        _, kd = _state(distill_config, "kd_only")
        assert set(kd.student_side()) == {"backbone."}

    def test_train_keeps_the_teacher_frozen(self, distill_config):
        _, state = _state(distill_config, "unikd")
        state.train()
        assert state.student.training and state.head.training
        assert not state.teacher.training
        state.eval()
        assert not state.student.training

    def test_auxiliary_modules_depend_only_on_the_seed(self, distill_config):
        _, first = _state(distill_config, "unikd")
        _, second = _state(distill_config, "unikd")
        for (name, a), (_, b) in zip(first.head.state_dict().items(), second.head.state_dict().items()):
            assert torch.equal(a, b), name

    def test_scheduler_milestones_follow_epoch_budget(self, distill_config):
        _, state = _state(distill_config, "unikd", epochs=4)
        assert sorted(state.scheduler.milestones) == [2, 3]


class TestTrainStep:
    def test_ce_only_total_is_ce(self, micro_config):
        state = build_training_state(micro_config, None)
        breakdown = train_step(_first_batch(micro_config), state, micro_config)
        assert breakdown.fl == 0.0 and breakdown.logits_kl == 0.0
        assert breakdown.total == breakdown.ce
        assert state.step == 1

    def test_ce_only_reports_teacher_terms(self, distill_config):
        cfg, state = _state(distill_config, "ce_only")
        breakdown = train_step(_first_batch(cfg), state, cfg)
        assert breakdown.fl > 0 and breakdown.logits_kl > 0
        assert breakdown.total == breakdown.ce

    def test_self_distillation_is_a_fixed_point(self, distill_config):
        """Zero distillation loss for a student copied from its teacher.

        Holds with every module in eval mode. In train mode the student's
        batch norm normalises with batch statistics while the frozen teacher
        keeps its running ones, so step 0 of a run shows small nonzero terms.
        """
        cfg, state = _state(distill_config, "unikd", **{"student.init_from_teacher": True})
        state.eval()
        breakdown = train_step(_first_batch(cfg), state, cfg)
        assert abs(breakdown.fl) <= 1e-10
        assert abs(breakdown.logits_kl) <= 1e-10

    def test_step_is_bit_reproducible(self, distill_config):
        cfg, first = _state(distill_config, "unikd")
        _, second = _state(distill_config, "unikd")
        batch = _first_batch(cfg)
        assert train_step(batch, first, cfg) == train_step(batch, second, cfg)
        for a, b in zip(first.student.parameters(), second.student.parameters()):
            assert torch.equal(a, b)

    def test_breakdown_recombines(self, distill_config):
        cfg, state = _state(distill_config, "unikd")
        breakdown = train_step(_first_batch(cfg), state, cfg)
        assert abs(breakdown.total - breakdown.recombined()) <= 1e-9

    def test_hybrid_reports_both_terms(self, distill_config):
        cfg, state = _state(distill_config, "hybrid_kd_mse")
        breakdown = train_step(_first_batch(cfg), state, cfg)
        assert breakdown.fl > 0 and breakdown.logits_kl > 0

    def test_mode_terms(self, distill_config):
        batch = _first_batch(distill_config)
        cfg, kd = _state(distill_config, "kd_only")
        assert train_step(batch, kd, cfg).fl == 0.0
        cfg, mse = _state(distill_config, "mse_only")
        assert train_step(batch, mse, cfg).logits_kl == 0.0
        cfg, fdp = _state(distill_config, "fdp_only")
        assert train_step(batch, fdp, cfg).fl > 0

    def test_every_optimised_parameter_receives_gradient(self, distill_config):
        cfg, state = _state(distill_config, "unikd")
        state.train()
        named = {
            id(param): prefix + name
            for prefix, module in state.student_side().items()
            for name, param in module.named_parameters()
        }
        touched = set()
        loader = make_loader(build_datasets(cfg.dataset).train, cfg.batch_size, cfg.seed, shuffle=True)
        for epoch in range(3):
            loader.set_epoch(epoch)
            for batch in loader:
                train_step(batch, state, cfg)
                touched |= {id(p) for p in _optimised(state) if p.grad is not None and p.grad.abs().sum() > 0}
                if state.step >= 10:
                    break
            if state.step >= 10:
                break
        untouched = [named[id(p)] for p in _optimised(state) if id(p) not in touched]
        assert untouched == []

    def test_teacher_is_untouched_by_training(self, distill_config):
        cfg, state = _state(distill_config, "unikd")
        before = parameter_checksum(state.teacher)
        state.train()
        for _ in range(3):
            train_step(_first_batch(cfg), state, cfg)
        assert parameter_checksum(state.teacher) == before

    def test_non_finite_input_is_reported(self, micro_config):
        state = build_training_state(micro_config, None)
        batch = _first_batch(micro_config)
        images = batch.images.clone()
        images[0, 0, 0, 0] = math.nan
        with pytest.raises(NonFiniteLossError) as excinfo:
            train_step(LabeledBatch(images, batch.labels), state, micro_config)
        assert excinfo.value.component == "ce"
        assert excinfo.value.step == 0

    def test_diverging_fusion_is_reported_as_fl(self, distill_config):
        cfg, state = _state(distill_config, "unikd")
        with torch.no_grad():
            state.student_fusion.pairs[0].expander.weight.fill_(math.inf)
        with pytest.raises(NonFiniteLossError) as excinfo:
            train_step(_first_batch(cfg), state, cfg)
        assert excinfo.value.component == "fl"
        assert excinfo.value.step == 0

    def test_diverging_teacher_logits_are_reported_as_logits_kl(self, distill_config):
        cfg, state = _state(distill_config, "kd_only")
        with torch.no_grad():
            state.teacher.fc.weight.fill_(math.inf)
        with pytest.raises(NonFiniteLossError) as excinfo:
            train_step(_first_batch(cfg), state, cfg)
        assert excinfo.value.component == "logits_kl"
        assert isinstance(excinfo.value.__cause__, NonFiniteLogitsError)


class TestRunExperiment:
    def test_smoke(self, distill_config):
        report = run_experiment(distill_config)
        out_dir = Path(distill_config.out_dir)
        assert len(report.epochs) == 1
        assert 0.0 <= report.best_val_top1 <= 100.0
        assert (out_dir / REPORT_FILE).is_file()
        assert (out_dir / "config.json").is_file()
        saved = json.loads((out_dir / REPORT_FILE).read_text())
        assert saved["best_val_top1"] == report.best_val_top1

        with jsonlines.open(out_dir / METRICS_FILE) as reader:
            records = list(reader)
        steps = [r for r in records if "val_top1" not in r]
        assert [r["step"] for r in steps] == [0, 1, 2, 3]
        assert all(set(r) == {"step", "epoch", "ce", "fl", "logits_kl", "total"} for r in steps)
        assert "val_top5" in records[-1]

    def test_teacher_checksum_is_recorded_and_unchanged(self, distill_config, micro_teacher_checkpoint):
        report = run_experiment(distill_config)
        teacher, _ = load_backbone(micro_teacher_checkpoint)
        freeze(teacher)
        assert report.teacher_checksum == parameter_checksum(teacher)

    def test_best_checkpoint_reproduces_best_accuracy(self, distill_config):
        cfg = with_overrides(distill_config, {"epochs": 2})
        report = run_experiment(cfg)
        _, tensors = read_checkpoint(report.checkpoint_path)
        assert any(name.startswith("aff.student.") for name in tensors)
        assert any(name.startswith("fdp.") for name in tensors)
        val = build_datasets(cfg.dataset).val
        assert eval_top1(report.checkpoint_path, val, batch_size=cfg.batch_size) == report.best_val_top1

    def test_metrics_are_deterministic(self, distill_config, tmp_path):
        first = run_experiment(with_overrides(distill_config, {"out_dir": str(tmp_path / "a")}))
        second = run_experiment(with_overrides(distill_config, {"out_dir": str(tmp_path / "b")}))
        assert Path(first.metrics_path).read_text() == Path(second.metrics_path).read_text()

    def test_log_every_thins_step_records(self, distill_config):
        report = run_experiment(with_overrides(distill_config, {"log_every": 2}))
        with jsonlines.open(report.metrics_path) as reader:
            steps = [r["step"] for r in reader if "val_top1" not in r]
        assert steps == [0, 2]

    def test_empty_training_split_is_a_dataset_error(self, micro_config, tmp_path):
        val_path = write_cifar_binary(tmp_path / "val.bin", np.zeros((4, 3, 32, 32), dtype=np.uint8), fine_labels=[0, 1, 0, 1])
        train_path = tmp_path / "train.bin"
        train_path.write_bytes(b"")
        cfg = with_overrides(
            micro_config,
            {
                "dataset.kind": "cifar-binary",
                "dataset.input_size": 32,
                "dataset.train_path": str(train_path),
                "dataset.val_path": str(val_path),
            },
        )
        with pytest.raises(DatasetFormatError, match="training split is empty"):
            run_experiment(cfg)
        assert not (Path(cfg.out_dir) / METRICS_FILE).exists()

    def test_missing_teacher_fails_before_training(self, micro_config):
        with pytest.raises(MissingTeacherError):
            run_experiment(with_overrides(micro_config, {"mode": "kd_only"}))

    def test_pretrain_teacher_writes_a_teacher_architecture_checkpoint(self, micro_teacher_checkpoint):
        header, _ = read_checkpoint(micro_teacher_checkpoint)
        assert header.architecture == "resnet_micro"
        assert header.class_count == 2


def test_compare_modes(distill_config):
    comparison = compare_modes(distill_config, ["ce_only", "kd_only"], [0, 1])
    assert set(comparison.modes) == {"ce_only", "kd_only"}
    assert all(len(summary.best_val_top1) == 2 for summary in comparison.modes.values())
    assert comparison.teacher_top1 is not None
    saved = json.loads((Path(distill_config.out_dir) / "compare.json").read_text())
    assert saved["seeds"] == [0, 1]
    assert (Path(distill_config.out_dir) / "kd_only" / "seed1" / REPORT_FILE).is_file()


@pytest.mark.slow
def test_teacher_checksum_holds_over_a_hundred_steps(distill_config, micro_teacher_checkpoint):
    # 32 samples in batches of 8: four steps per epoch
    report = run_experiment(with_overrides(distill_config, {"epochs": 25}))
    with jsonlines.open(report.metrics_path) as reader:
        assert max(record["step"] for record in reader) == 100
    teacher, _ = load_backbone(micro_teacher_checkpoint)
    freeze(teacher)
    assert report.teacher_checksum == parameter_checksum(teacher)


@pytest.mark.slow
def test_directional_ordering_on_synthetic_data(tmp_path):
    cfg = load_config(CONFIGS_DIR / "directional.json", {"out_dir": str(tmp_path / "compare")})
    teacher_report = pretrain_teacher(with_overrides(cfg, {"out_dir": str(tmp_path / "teacher"), "epochs": 10}))
    assert teacher_report.best_val_top1 >= 90.0

    cfg = with_overrides(cfg, {"teacher.checkpoint": teacher_report.checkpoint_path})
    comparison = compare_modes(cfg, ["unikd", "hybrid_kd_mse", "ce_only"], [0, 1, 2, 3, 4])
    unikd = comparison.modes["unikd"].mean
    assert unikd > comparison.modes["ce_only"].mean
    assert unikd >= comparison.modes["hybrid_kd_mse"].mean - 0.5
