"""
多网络编排与嫁接屏障测试
"""
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import constant_network, tiny_architecture
from datasets import DatasetConfig
from distill import DistillConfig
from exceptions import ConfigError, ProtocolError, TrainingError
from export_manager import read_events, read_metrics
from graft import GraftConfig
from nn_core import Network
from optimizer import TrainerConfig
from orchestrator import (
    LR_FACTORS, ExperimentConfig, ExperimentRunner, GraftBarrierState, barrier_graft, diversified_trainers,
    diversify, run_experiment,
)

BASE = TrainerConfig(epochs=2, batch_size=16)
CONV_PARAMS = ("layer0.weight", "layer0.bias", "layer3.weight", "layer3.bias")


def experiment(num_students=2, num_teachers=0, graft=None, trainers=None, **kwargs):
    count = num_students + num_teachers
    return ExperimentConfig(
        num_students=num_students,
        num_teachers=num_teachers,
        trainers=trainers or diversified_trainers(BASE, count),
        graft=graft or GraftConfig(),
        architecture=tiny_architecture(),
        **kwargs,
    )


def assert_same_parameters(a, b, names=None):
    for name in names or a.parameters():
        np.testing.assert_array_equal(a.parameters()[name], b.parameters()[name])


class TestDiversify:
    """超参数区分"""

    def test_first_network_keeps_base(self):
        base = TrainerConfig(seed=7, learning_rate=0.05)
        assert diversify(base, 0) == replace(base, shuffle_seed=base.loader_seed)

    def test_distinct_settings(self):
        configs = diversified_trainers(TrainerConfig(seed=7), 6)
        assert len({(c.seed, c.learning_rate) for c in configs}) == 6
        assert [c.loader_seed for c in configs] == [7, 8, 9, 10, 11, 12]
        assert configs[3].learning_rate == pytest.approx(0.05 * LR_FACTORS[3])


class TestBarrierGraft:
    """嫁接屏障"""

    def test_constant_ring(self):
        nets = [constant_network(v) for v in (1.0, 2.0, 3.0)]
        events = barrier_graft(nets, GraftConfig(), epoch=2)
        assert len(events) == 6
        assert [(e.network_id, e.source_network) for e in events[::2]] == [(0, 2), (1, 0), (2, 1)]
        for net, expected in zip(nets, (2.0, 1.5, 2.5)):
            for name in CONV_PARAMS:
                assert np.all(net.parameters()[name] == expected)
        assert np.all(nets[0].parameters()["layer7.weight"] == 1.0)

    def test_two_networks_meet(self, architecture):
        nets = [Network(architecture, seed=1), Network(architecture, seed=2)]
        events = barrier_graft(nets, GraftConfig())
        assert_same_parameters(nets[0], nets[1], CONV_PARAMS)
        alphas = {e.network_id: e.alpha for e in events if e.layer_name == "layer0"}
        assert alphas[0] + alphas[1] == pytest.approx(1.0, abs=1e-15)
        assert not np.array_equal(nets[0].parameters()["layer7.weight"], nets[1].parameters()["layer7.weight"])

    def test_identical_students_unchanged(self, architecture):
        nets = [Network(architecture, seed=5) for _ in range(3)]
        before = nets[0].snapshot()
        barrier_graft(nets, GraftConfig())
        for net in nets:
            for name, tensor in net.parameters().items():
                np.testing.assert_array_equal(tensor, before[name])

    def test_iteration_mismatch(self, architecture):
        nets = [Network(architecture, seed=1), Network(architecture, seed=2)]
        with pytest.raises(ProtocolError):
            barrier_graft(nets, GraftConfig(), iterations=[3, 4])

    def test_single_student(self, network):
        assert barrier_graft([network], GraftConfig(), iterations=[3]) == []

    def test_snapshots_read_only(self, architecture):
        nets = [Network(architecture, seed=1), Network(architecture, seed=2)]
        state = GraftBarrierState.capture(nets)
        assert not state.done
        with pytest.raises(ValueError):
            state.snapshots[0]["layer0.weight"][0, 0, 0, 0] = 1.0
        assert nets[0].parameters()["layer0.weight"].flags.writeable


class TestRunExperiment:
    """完整实验"""

    def test_single_network_has_no_events(self, tiny_datasets):
        result = run_experiment(experiment(num_students=1), datasets=tiny_datasets)
        assert result.events == []
        assert [(m.epoch, m.network_id) for m in result.metrics] == [(0, 0), (1, 0)]
        assert result.iterations == 6
        assert 0.0 <= result.evaluation_accuracy <= 1.0

    def test_graft_events_and_files(self, tiny_datasets, tmp_path):
        cfg = experiment(
            metrics_path=str(tmp_path / "metrics.csv"),
            events_path=str(tmp_path / "events.jsonl"),
            checkpoint_dir=str(tmp_path / "ckpt"),
        )
        result = run_experiment(cfg, datasets=tiny_datasets)
        assert len(result.events) == 8
        assert {e.epoch for e in result.events} == {0, 1}
        assert len(read_events(cfg.events_path)) == 8
        metrics = read_metrics(cfg.metrics_path)
        assert [(m.epoch, m.network_id) for m in metrics] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert {k: len(v) for k, v in result.checkpoints.items()} == {0: 2, 1: 2}
        assert sorted((tmp_path / "ckpt").iterdir())[0].name == "net0_epoch000.ckpt"

    def test_deterministic_and_schedule_independent(self, tiny_datasets, tmp_path):
        paths = []
        for i, parallel in enumerate((True, True, False)):
            path = str(tmp_path / f"m{i}.csv")
            run_experiment(experiment(metrics_path=path, use_parallel=parallel), datasets=tiny_datasets)
            paths.append(path)
        contents = [Path(p).read_bytes() for p in paths]
        assert contents[0] == contents[1] == contents[2]

    def test_disabled_grafting_matches_single_network(self, tiny_datasets):
        single = run_experiment(experiment(num_students=1), datasets=tiny_datasets)
        for graft in (GraftConfig(enabled=False), GraftConfig(graft_period_iters=1000)):
            pair = run_experiment(experiment(graft=graft), datasets=tiny_datasets)
            assert pair.events == []
            assert_same_parameters(single.networks[0], pair.networks[0])

    def test_identical_configs_stay_identical(self, tiny_datasets):
        result = run_experiment(experiment(trainers=[BASE, BASE]), datasets=tiny_datasets)
        assert len(result.events) == 8
        assert all(e.alpha == 0.5 for e in result.events)
        assert_same_parameters(result.networks[0], result.networks[1])

    def test_teacher_never_grafted(self, tiny_datasets):
        result = run_experiment(experiment(num_students=2, num_teachers=1), datasets=tiny_datasets)
        assert {e.network_id for e in result.events} == {0, 1}
        assert {e.source_network for e in result.events} == {0, 1}
        roles = {m.network_id: m.role for m in result.metrics}
        assert roles == {0: "student", 1: "student", 2: "teacher"}

    @pytest.mark.parametrize("use_parallel", [False, True])
    def test_students_read_teacher_after_segment(self, tiny_datasets, use_parallel):
        runner = ExperimentRunner(experiment(num_students=2, num_teachers=1, use_parallel=use_parallel), datasets=tiny_datasets)
        teacher = runner.teachers[0]
        seen = []

        def recording(trainer):
            original = trainer.run_iterations

            def run(count, teachers=None):
                copy = teachers[0]
                same = all(
                    np.array_equal(copy.parameters()[name], tensor)
                    for name, tensor in teacher.network.parameters().items()
                )
                seen.append((trainer.network_id, trainer.iteration + count, teacher.iteration, same, copy is teacher.network))
                original(count, teachers)
            return run

        for student in runner.students:
            student.run_iterations = recording(student)
        runner.run()

        assert sorted(s[0] for s in seen) == [0, 0, 1, 1]
        for _, student_end, teacher_iteration, same, shared in seen:
            assert teacher_iteration == student_end
            assert same and not shared

    @pytest.mark.parametrize("source", ["noise", "internal"])
    def test_single_network_self_grafting(self, tiny_datasets, source):
        result = run_experiment(experiment(num_students=1, graft=GraftConfig(scion_source=source)), datasets=tiny_datasets)
        assert result.events == []
        assert len(result.metrics) == 2

    def test_max_iterations_truncates(self, tiny_datasets):
        result = run_experiment(experiment(num_students=1, max_iterations=4), datasets=tiny_datasets)
        assert result.iterations == 4
        assert [m.epoch for m in result.metrics] == [0, 1]

    def test_trainer_failure(self, tiny_datasets, tmp_path):
        cfg = experiment(metrics_path=str(tmp_path / "metrics.csv"))
        runner = ExperimentRunner(cfg, datasets=tiny_datasets)
        original = runner.trainers[1].run_iterations
        calls = []

        def failing(count, teachers=None):
            calls.append(count)
            if len(calls) > 1:
                raise RuntimeError("boom")
            original(count, teachers)

        runner.trainers[1].run_iterations = failing
        with pytest.raises(TrainingError) as exc:
            runner.run()
        assert exc.value.network_id == 1
        assert isinstance(exc.value.original_error, RuntimeError)
        assert [m.epoch for m in read_metrics(cfg.metrics_path)] == [0, 0]


class TestGraftingPlus:
    """嫁接 + 蒸馏（1 教师 + 2 学生）"""

    @pytest.mark.parametrize("seed", [0, 4])
    def test_students_learn(self, seed):
        cfg = ExperimentConfig(
            num_students=2,
            num_teachers=1,
            trainers=diversified_trainers(TrainerConfig(seed=seed, epochs=8), 3),
            distill=DistillConfig(temperature=2.0),
            dataset=DatasetConfig(samples_per_class=100, seed=seed),
            seed=seed,
        )
        result = run_experiment(cfg)
        assert result.final_test_accuracy[0] > 0.5
        assert result.final_test_accuracy[1] > 0.5
        assert any(0.05 < e.alpha < 0.95 for e in result.events)


class TestExperimentConfig:
    """实验配置校验"""

    def test_mixed_batch_sizes(self):
        with pytest.raises(ConfigError):
            experiment(trainers=[BASE, replace(BASE, batch_size=8)])

    def test_no_students(self):
        with pytest.raises(ConfigError):
            experiment(num_students=0, trainers=[BASE])

    def test_trainer_count(self):
        with pytest.raises(ConfigError):
            experiment(num_students=2, trainers=[BASE])

    def test_graft_period_must_divide_epoch(self, tiny_datasets):
        with pytest.raises(ConfigError):
            run_experiment(experiment(graft=GraftConfig(graft_period_iters=2)), datasets=tiny_datasets)

    def test_graft_period_multiple_of_epoch(self, tiny_datasets):
        result = run_experiment(experiment(graft=GraftConfig(graft_period_iters=6)), datasets=tiny_datasets)
        assert {e.epoch for e in result.events} == {1}

    def test_architecture_mismatch(self, tiny_datasets):
        cfg = experiment()
        cfg.architecture = dict(tiny_architecture(), input_shape=[1, 6, 6])
        with pytest.raises(ConfigError):
            run_experiment(cfg, datasets=tiny_datasets)
