"""
多网络训练编排器

K 个学生（外加可选的 M 个教师）并行训练，每 N_T 次迭代在嫁接屏障处同步:
先对所有学生拍快照，再让学生 k 用学生 k−1 的快照嫁接（学生 0 取学生 K−1）。
有教师时学生的损失为 CE + KD，教师只用交叉熵并且从不参与嫁接；每段先推进教师，学生再读取教师的段末副本。
"""
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint import CheckpointStore, load_checkpoint
from criteria import conv_weights, network_information
from datasets import Dataset, DatasetConfig, iterations_per_epoch, load_datasets
from diagnostics import DEFAULT_THRESHOLDS, invalid_filter_ratio
from distill import DistillConfig
from exceptions import ConfigError, ProtocolError, TrainingError
from export_manager import EpochMetrics, EventWriter, MetricsWriter
from graft import GraftConfig, GraftEvent, ScionSource, graft_pair, internal_graft_network, noise_graft
from logger import get_logger
from nn_core import Network, ParameterDict, small_convnet
from optimizer import TrainerConfig
from trainer import Trainer, evaluate_network
from utils import derive_seed, format_duration

logger = get_logger()

# 各网络学习率的缩放因子，按 k 循环取用
LR_FACTORS = (1.0, 0.9, 1.1, 0.8, 1.2, 0.7, 1.3, 0.6)

ProgressCallback = Callable[[int, int], None]


def diversify(base: TrainerConfig, k: int) -> TrainerConfig:
    """
    第 k 个网络的超参数 λ_k

    初始化种子与数据加载种子各偏移 k，学习率乘以 LR_FACTORS[k]。
    """
    return replace(
        base,
        seed=base.seed + k,
        shuffle_seed=base.loader_seed + k,
        learning_rate=base.learning_rate * LR_FACTORS[k % len(LR_FACTORS)],
    )


def diversified_trainers(base: TrainerConfig, count: int) -> List[TrainerConfig]:
    return [diversify(base, k) for k in range(count)]


@dataclass
class ExperimentConfig:
    """一次实验的全部设置；trainers 依次为 K 个学生和 M 个教师"""
    num_students: int = 2
    num_teachers: int = 0
    trainers: List[TrainerConfig] = field(default_factory=list)
    graft: GraftConfig = field(default_factory=GraftConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    architecture: Dict[str, Any] = field(default_factory=small_convnet)
    teacher_architecture: Optional[Dict[str, Any]] = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    max_iterations: Optional[int] = None
    metrics_path: Optional[str] = None
    metrics_format: str = "csv"
    events_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    checkpoint_every: int = 1
    seed: int = 0
    thresholds: List[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    teacher_checkpoints: List[str] = field(default_factory=list)
    max_workers: Optional[int] = None
    use_parallel: bool = True

    def __post_init__(self):
        if not self.trainers:
            self.trainers = diversified_trainers(TrainerConfig(seed=self.seed), self.num_students + self.num_teachers)
        self.validate()

    @property
    def num_networks(self) -> int:
        return self.num_students + self.num_teachers

    def validate(self) -> None:
        if self.num_students < 1:
            raise ConfigError("学生数 K 必须 >= 1", config_key="experiment.num_students")
        if self.num_teachers < 0:
            raise ConfigError("教师数 M 必须 >= 0", config_key="experiment.num_teachers")
        if len(self.trainers) != self.num_networks:
            raise ConfigError(
                f"训练配置数 {len(self.trainers)} 与 K + M = {self.num_networks} 不一致",
                config_key="trainers"
            )
        if len({t.batch_size for t in self.trainers}) != 1:
            raise ConfigError("所有网络必须使用相同的 batch_size", config_key="trainers.batch_size")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigError("max_iterations 必须 >= 1", config_key="experiment.max_iterations")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every 必须 >= 1", config_key="output.checkpoint_every")
        if self.teacher_checkpoints and len(self.teacher_checkpoints) != self.num_teachers:
            raise ConfigError("teacher_checkpoints 数量必须等于教师数 M", config_key="distill.teacher_checkpoints")
        if any(t < 0 for t in self.thresholds):
            raise ConfigError("阈值必须 >= 0", config_key="output.thresholds")

    @property
    def batch_size(self) -> int:
        return self.trainers[0].batch_size

    def metric_thresholds(self) -> List[float]:
        return sorted(set(DEFAULT_THRESHOLDS) | {float(t) for t in self.thresholds})


@dataclass
class GraftBarrierState:
    """屏障时刻所有学生的只读快照；快照全部拍完之后才修改任何网络"""
    snapshots: List[ParameterDict]
    completed: List[bool]

    @classmethod
    def capture(cls, networks: Sequence[Network]) -> "GraftBarrierState":
        snapshots = []
        for net in networks:
            snap = net.snapshot()
            for tensor in snap.values():
                tensor.setflags(write=False)
            snapshots.append(snap)
        return cls(snapshots=snapshots, completed=[False] * len(networks))

    @property
    def done(self) -> bool:
        return all(self.completed)


def barrier_graft(
    students: Sequence[Network],
    cfg: GraftConfig,
    epoch: int = 0,
    iterations: Optional[Sequence[int]] = None
) -> List[GraftEvent]:
    """
    轮转外部嫁接

    Args:
        students: 全部学生网络（按编号）
        cfg: 嫁接配置
        epoch: 记录到事件中的 epoch
        iterations: 各学生当前的迭代计数，必须全部相同

    Returns:
        所有 GraftEvent，按接收方编号、层顺序排列

    Raises:
        ProtocolError: 学生不在同一迭代
    """
    if iterations is not None:
        if len(iterations) != len(students):
            raise ProtocolError(f"迭代计数数量 {len(iterations)} 与学生数 {len(students)} 不一致")
        if len(set(iterations)) > 1:
            raise ProtocolError(f"学生到达屏障时迭代计数不一致: {list(iterations)}")
    if len(students) < 2:
        return []

    state = GraftBarrierState.capture(students)
    count = len(students)
    events: List[GraftEvent] = []
    for k, net in enumerate(students):
        source = (k - 1) % count
        events.extend(graft_pair(net, state.snapshots[source], cfg, epoch=epoch, source_network=source, network_id=k))
        state.completed[k] = True
    return events


@dataclass
class ExperimentResult:
    metrics: List[EpochMetrics] = field(default_factory=list)
    events: List[GraftEvent] = field(default_factory=list)
    final_test_accuracy: Dict[int, float] = field(default_factory=dict)
    checkpoints: Dict[int, List[str]] = field(default_factory=dict)
    networks: List[Network] = field(default_factory=list)
    evaluation_network: int = 0
    iterations: int = 0
    duration_seconds: float = 0.0

    @property
    def evaluation_accuracy(self) -> float:
        return self.final_test_accuracy[self.evaluation_network]

    def metrics_for(self, network_id: int) -> List[EpochMetrics]:
        return [m for m in self.metrics if m.network_id == network_id]


class ExperimentRunner:
    """按段推进所有训练器，在段边界执行嫁接与指标记录"""

    def __init__(
        self,
        cfg: ExperimentConfig,
        datasets: Optional[Tuple[Dataset, Dataset]] = None,
        progress_callback: Optional[ProgressCallback] = None
    ):
        self.cfg = cfg
        self.train, self.test = datasets if datasets is not None else load_datasets(cfg.dataset)
        self.progress_callback = progress_callback

        self.iterations_per_epoch = iterations_per_epoch(len(self.train), cfg.batch_size)
        epochs = max(t.epochs for t in cfg.trainers)
        self.max_iterations = cfg.max_iterations or epochs * self.iterations_per_epoch
        self.total_epochs = -(-self.max_iterations // self.iterations_per_epoch)
        self.graft_period = cfg.graft.graft_period_iters or self.iterations_per_epoch
        self._check_graft_period()

        self.trainers = self._build_trainers()
        self.students = self.trainers[:cfg.num_students]
        self.teachers = self.trainers[cfg.num_students:]
        self.thresholds = cfg.metric_thresholds()

    def _check_graft_period(self) -> None:
        ipe = self.iterations_per_epoch
        n_t = self.graft_period
        if n_t <= self.max_iterations and ipe % n_t and n_t % ipe:
            raise ConfigError(
                f"graft_period_iters={n_t} 与每个 epoch 的迭代数 {ipe} 不能整除",
                config_key="graft.graft_period_iters"
            )

    def _build_network(self, architecture: Dict[str, Any], seed: int) -> Network:
        net = Network(architecture, seed=seed)
        if net.input_shape != self.train.image_shape:
            raise ConfigError(
                f"网络输入 {net.input_shape} 与数据形状 {self.train.image_shape} 不一致",
                config_key="architecture.input_shape"
            )
        if net.num_classes != self.train.num_classes:
            raise ConfigError(
                f"网络输出 {net.num_classes} 类与数据集 {self.train.num_classes} 类不一致",
                config_key="architecture.num_classes"
            )
        return net

    def _build_trainers(self) -> List[Trainer]:
        cfg = self.cfg
        trainers = []
        for k, tcfg in enumerate(cfg.trainers):
            is_teacher = k >= cfg.num_students
            architecture = cfg.teacher_architecture if is_teacher and cfg.teacher_architecture else cfg.architecture
            net = self._build_network(architecture, tcfg.seed)
            frozen = False
            if is_teacher and cfg.teacher_checkpoints:
                net.load_parameters(load_checkpoint(cfg.teacher_checkpoints[k - cfg.num_students]))
                frozen = True
            trainers.append(Trainer(
                network_id=k,
                network=net,
                config=tcfg,
                dataset=self.train,
                role="teacher" if is_teacher else "student",
                distill=cfg.distill,
                frozen=frozen,
            ))
        return trainers

    # ------------------------------------------------------------------

    def run(self) -> ExperimentResult:
        cfg = self.cfg
        start = time.time()
        logger.info(
            f"开始实验: K={cfg.num_students} M={cfg.num_teachers} 接穗={cfg.graft.scion_source.value} "
            f"准则={cfg.graft.criterion.value} N_T={self.graft_period} N_max={self.max_iterations}"
        )

        result = ExperimentResult(networks=[t.network for t in self.trainers])
        metrics_writer = MetricsWriter(cfg.metrics_path, cfg.metrics_format) if cfg.metrics_path else None
        event_writer = EventWriter(cfg.events_path) if cfg.events_path else None
        store = CheckpointStore(cfg.checkpoint_dir) if cfg.checkpoint_dir else None

        use_pool = cfg.use_parallel and len(self.trainers) > 1
        pool = ThreadPoolExecutor(max_workers=cfg.max_workers or len(self.trainers)) if use_pool else None
        epoch_events: List[GraftEvent] = []
        n = 0
        try:
            while n < self.max_iterations:
                stop = min(
                    (n // self.graft_period + 1) * self.graft_period,
                    (n // self.iterations_per_epoch + 1) * self.iterations_per_epoch,
                    self.max_iterations,
                )
                self._run_segment(stop - n, pool)
                n = stop
                epoch = (n - 1) // self.iterations_per_epoch

                if n % self.graft_period == 0 and cfg.graft.enabled:
                    events = self._graft(epoch, n)
                    epoch_events.extend(events)
                    result.events.extend(events)
                    if event_writer and events:
                        event_writer.write_many(events)

                if n % self.iterations_per_epoch == 0 or n == self.max_iterations:
                    records = self._epoch_metrics(epoch, epoch_events)
                    result.metrics.extend(records)
                    if metrics_writer:
                        for record in records:
                            metrics_writer.write(record)
                    if store and ((epoch + 1) % cfg.checkpoint_every == 0 or n == self.max_iterations):
                        for trainer in self.trainers:
                            path = store.save(trainer.network_id, epoch, trainer.network.parameters())
                            result.checkpoints.setdefault(trainer.network_id, []).append(path)
                    self._log_epoch(epoch, records)
                    epoch_events = []
                    if self.progress_callback:
                        self.progress_callback(epoch + 1, self.total_epochs)
        except TrainingError as e:
            logger.error(f"实验中止，已写出的指标保留: {e}", exc_info=True)
            raise
        finally:
            if pool is not None:
                pool.shutdown(wait=True)
            if metrics_writer:
                metrics_writer.close()
            if event_writer:
                event_writer.close()

        for trainer in self.trainers:
            result.final_test_accuracy[trainer.network_id] = evaluate_network(trainer.network, self.test)[1]
        result.iterations = n
        result.duration_seconds = time.time() - start
        logger.info(
            f"实验完成，用时 {format_duration(result.duration_seconds)}，"
            f"评估网络 net{result.evaluation_network} 测试准确率 {result.evaluation_accuracy:.4f}"
        )
        return result

    def _run_segment(self, count: int, pool: Optional[ThreadPoolExecutor]) -> None:
        """
        所有训练器各推进 count 次迭代

        有共同训练的教师时分两步: 教师先推进本段，随后学生读取教师在段末的冻结副本，
        学生的软目标因此始终来自训练过至少一段的教师。
        """
        if not self.teachers:
            self._advance([(t, None) for t in self.trainers], count, pool)
            return
        self._advance([(t, None) for t in self.teachers], count, pool)
        frozen_teachers = [t.network.copy() for t in self.teachers]
        self._advance([(t, frozen_teachers) for t in self.students], count, pool)

    def _advance(
        self,
        jobs: Sequence[Tuple[Trainer, Optional[List[Network]]]],
        count: int,
        pool: Optional[ThreadPoolExecutor]
    ) -> None:
        if pool is None:
            for trainer, teachers in jobs:
                try:
                    trainer.run_iterations(count, teachers)
                except TrainingError:
                    raise
                except Exception as e:
                    raise TrainingError("训练器失败", network_id=trainer.network_id, original_error=e)
            return

        futures = [pool.submit(trainer.run_iterations, count, teachers) for trainer, teachers in jobs]
        wait(futures)
        # 按网络编号检查，保证报告的失败与调度顺序无关
        for (trainer, _), future in zip(jobs, futures):
            error = future.exception()
            if isinstance(error, TrainingError):
                raise error
            if error is not None:
                raise TrainingError("训练器失败", network_id=trainer.network_id, original_error=error)

    def _graft(self, epoch: int, iteration: int) -> List[GraftEvent]:
        cfg = self.cfg
        source = cfg.graft.scion_source
        students = [t.network for t in self.students]

        if source is ScionSource.EXTERNAL:
            events = barrier_graft(students, cfg.graft, epoch=epoch, iterations=[t.iteration for t in self.students])
            if events:
                alphas = np.array([e.alpha for e in events])
                logger.info(f"嫁接屏障 iteration={iteration}: {len(events)} 层，α 均值 {alphas.mean():.4f}")
            return events

        for k, net in enumerate(students):
            if source is ScionSource.NOISE:
                modified = noise_graft(net, epoch, cfg.graft, derive_seed(cfg.seed, k, epoch))
                logger.debug(f"net{k} 噪声嫁接 {len(modified)} 个滤波器")
            else:
                pairs = internal_graft_network(net, cfg.graft)
                logger.debug(f"net{k} 内部嫁接 {sum(len(p) for p in pairs.values())} 对滤波器")
        return []

    def _epoch_metrics(self, epoch: int, events: Sequence[GraftEvent]) -> List[EpochMetrics]:
        records = []
        histogram = self.cfg.graft.histogram
        for trainer in self.trainers:
            net = trainer.network
            train_loss, train_acc = trainer.epoch_stats()
            _, test_acc = evaluate_network(net, self.test)
            ratios = {}
            if conv_weights(net):
                ratios = {t: invalid_filter_ratio(net, t) for t in self.thresholds}
            alphas = [e.alpha for e in events if e.network_id == trainer.network_id]
            records.append(EpochMetrics(
                epoch=epoch,
                network_id=trainer.network_id,
                train_loss=train_loss,
                train_accuracy=train_acc,
                test_accuracy=test_acc,
                effective_lr=trainer.optimizer.learning_rate(epoch),
                invalid_ratio_at=ratios,
                network_entropy=network_information(net, histogram),
                mean_alpha=float(np.mean(alphas)) if alphas else 0.5,
                role=trainer.role,
            ))
        return records

    def _log_epoch(self, epoch: int, records: Sequence[EpochMetrics]) -> None:
        summary = ", ".join(f"net{r.network_id}={r.test_accuracy:.3f}" for r in records)
        logger.info(f"epoch {epoch + 1}/{self.total_epochs} 测试准确率: {summary}")


def run_experiment(
    cfg: ExperimentConfig,
    progress_callback: Optional[ProgressCallback] = None,
    datasets: Optional[Tuple[Dataset, Dataset]] = None
) -> ExperimentResult:
    """
    运行一次完整实验

    Args:
        cfg: 实验配置
        progress_callback: 每个 epoch 结束时调用 (已完成 epoch 数, 总 epoch 数)
        datasets: 预先加载的 (train, test)，为 None 时按 cfg.dataset 加载

    Returns:
        ExperimentResult；网络 0 为指定的评估网络

    Raises:
        TrainingError: 任一训练器失败（已写出的指标保留）
    """
    return ExperimentRunner(cfg, datasets=datasets, progress_callback=progress_callback).run()
