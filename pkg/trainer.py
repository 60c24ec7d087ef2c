"""
单网络训练器

每个训练器独占自己的 Network、优化器和数据加载顺序；
编排器按段调用 run_iterations，在段与段之间执行嫁接屏障。
"""
from typing import Optional, Sequence, Tuple

import numpy as np

from datasets import Batch, Dataset, LoaderConfig, epoch_batches, iterations_per_epoch
from distill import DistillConfig, student_total_loss_and_grad, teacher_average, temperature_softmax
from exceptions import TrainingError, ValidationError
from logger import get_logger
from nn_core import Network, cross_entropy_loss
from optimizer import SGD, TrainerConfig

logger = get_logger()

ROLES = ("student", "teacher")
EVAL_CHUNK = 256


class Trainer:
    """
    训练一个网络

    学生在有教师时使用 CE + kd_weight·KD，教师只用交叉熵。
    frozen=True 的训练器（预训练教师）只推进迭代计数，不更新参数。
    """

    def __init__(
        self,
        network_id: int,
        network: Network,
        config: TrainerConfig,
        dataset: Dataset,
        role: str = "student",
        distill: Optional[DistillConfig] = None,
        frozen: bool = False
    ):
        if role not in ROLES:
            raise ValidationError(f"未知的角色: {role}", field="role", value=role)
        self.network_id = network_id
        self.network = network
        self.config = config
        self.dataset = dataset
        self.role = role
        self.distill = distill or DistillConfig()
        self.frozen = frozen

        self.optimizer = SGD(config)
        self.loader = LoaderConfig(
            shuffle_seed=config.loader_seed,
            batch_size=config.batch_size,
            augment=config.augment,
        )
        self.iterations_per_epoch = iterations_per_epoch(len(dataset), config.batch_size)
        self.iteration = 0

        self._batches: Sequence[Batch] = []
        self._loss_sum = 0.0
        self._correct = 0
        self._seen = 0

    @property
    def epoch(self) -> int:
        """当前（或下一个待执行迭代所在的）epoch"""
        return self.iteration // self.iterations_per_epoch

    def learning_rate(self) -> float:
        return self.optimizer.learning_rate(self.epoch)

    def run_iterations(self, count: int, teachers: Optional[Sequence[Network]] = None) -> None:
        """连续执行 count 次迭代；teachers 为冻结的教师网络（只调用 predict）"""
        for _ in range(count):
            self.train_step(teachers)

    def train_step(self, teachers: Optional[Sequence[Network]] = None) -> float:
        """执行一次迭代，返回该批次的交叉熵"""
        epoch, position = divmod(self.iteration, self.iterations_per_epoch)
        if position == 0:
            self._batches = epoch_batches(self.dataset, self.loader, epoch)
            self._loss_sum = 0.0
            self._correct = 0
            self._seen = 0
            logger.debug(f"net{self.network_id} 开始 epoch {epoch}")
        images, labels = self._batches[position]

        if self.frozen:
            self.iteration += 1
            return 0.0

        logits = self.network.forward(images)
        teacher_avg = None
        if teachers:
            tau = self.distill.temperature
            teacher_avg = teacher_average([temperature_softmax(t.predict(images), tau) for t in teachers])
        total, ce, _, grad = student_total_loss_and_grad(logits, labels, teacher_avg, self.distill)
        if not np.isfinite(total):
            raise TrainingError(f"损失不是有限值 (iteration={self.iteration})", network_id=self.network_id)

        grads = self.network.backward(grad)
        self.optimizer.step(self.network.parameters(), grads, epoch)

        n = labels.size
        self._loss_sum += ce * n
        self._correct += int((logits.argmax(axis=1) == labels).sum())
        self._seen += n
        self.iteration += 1
        return ce

    def epoch_stats(self) -> Tuple[float, float]:
        """当前 epoch 已处理样本上的 (平均交叉熵, 训练准确率)"""
        if self._seen == 0:
            return 0.0, 0.0
        return self._loss_sum / self._seen, self._correct / self._seen

    def evaluate(self, dataset: Dataset) -> Tuple[float, float]:
        """在 dataset 上返回 (平均交叉熵, 准确率)，不写任何缓存"""
        return evaluate_network(self.network, dataset)


def evaluate_network(network: Network, dataset: Dataset) -> Tuple[float, float]:
    loss_sum = 0.0
    correct = 0
    for start in range(0, len(dataset), EVAL_CHUNK):
        images = dataset.images[start:start + EVAL_CHUNK]
        labels = dataset.labels[start:start + EVAL_CHUNK]
        logits = network.predict(images)
        loss_sum += cross_entropy_loss(logits, labels) * labels.size
        correct += int((logits.argmax(axis=1) == labels).sum())
    return loss_sum / len(dataset), correct / len(dataset)
