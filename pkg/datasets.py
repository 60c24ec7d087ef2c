"""
数据集模块

桌面规模实验用的合成图像生成器、CSV 小数据集读写，
以及由 (shuffle_seed, epoch) 唯一决定的批次划分。
"""
import csv
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from exceptions import ConfigError, DatasetError, DatasetParseError
from logger import get_logger
from utils import derive_seed

logger = get_logger()

Batch = Tuple[np.ndarray, np.ndarray]

PIXEL_MAX = 255.0
PAD_CROP = 4


@dataclass(frozen=True)
class NormalizationStats:
    """逐通道均值 / 标准差（只由训练集计算）"""
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    @classmethod
    def from_images(cls, images: np.ndarray) -> "NormalizationStats":
        mean = images.mean(axis=(0, 2, 3))
        std = images.std(axis=(0, 2, 3))
        # 常数通道不缩放
        std = np.where(std > 0, std, 1.0)
        return cls(mean=tuple(float(m) for m in mean), std=tuple(float(s) for s in std))

    def apply(self, images: np.ndarray) -> np.ndarray:
        if len(self.mean) != images.shape[1]:
            raise DatasetError(f"归一化统计量通道数 {len(self.mean)} 与图像通道数 {images.shape[1]} 不一致")
        mean = np.asarray(self.mean)[None, :, None, None]
        std = np.asarray(self.std)[None, :, None, None]
        return (images - mean) / std


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    带标签的图像集合

    构造后不可变（底层数组设为只读），所有训练器可以并发读取。
    """
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    normalization: Optional[NormalizationStats] = None

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"图像必须是 [N, C, H, W]，得到 {images.ndim} 维")
        if images.shape[0] < 1:
            raise DatasetError("数据集为空")
        if labels.shape != (images.shape[0],):
            raise DatasetError(f"标签数量 {labels.shape} 与图像数量 {images.shape[0]} 不一致")
        if self.num_classes < 1:
            raise DatasetError(f"类别数必须 >= 1，得到 {self.num_classes}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DatasetError(f"标签超出范围 [0, {self.num_classes})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        c, h, w = self.images.shape[1:]
        return (int(c), int(h), int(w))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.normalization)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class LoaderConfig:
    shuffle_seed: int = 0
    batch_size: int = 32
    augment: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size 必须 >= 1", config_key="batch_size")


# ----------------------------------------------------------------------
# 合成数据
# ----------------------------------------------------------------------

def _class_patterns(num_classes: int, image_size: int, channels: int) -> np.ndarray:
    """每个类别一个高斯斑点，中心均匀分布在以图像中心为圆心、半径 S/4 的圆上"""
    centre = (image_size - 1) / 2.0
    radius = image_size / 4.0
    sigma = image_size / 8.0
    rows, cols = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    patterns = np.zeros((num_classes, channels, image_size, image_size))
    for k in range(num_classes):
        angle = 2.0 * np.pi * k / num_classes
        cy = centre + radius * np.sin(angle)
        cx = centre + radius * np.cos(angle)
        blob = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma ** 2))
        patterns[k] = blob[None, :, :]
    return patterns


def generate_synthetic(
    num_classes: int,
    samples_per_class: int,
    image_size: int,
    seed: int,
    channels: int = 1,
    amplitude: float = 2.0,
    noise_std: float = 1.0
) -> Dataset:
    """
    生成类条件高斯斑点图像

    类别 k 的图像 = amplitude · 第 k 个斑点模板 + N(0, noise_std²) 像素噪声，
    样本顺序由 seed 打乱。

    Args:
        num_classes: 类别数
        samples_per_class: 每类样本数
        image_size: 图像边长 S
        seed: 随机种子，相同种子得到逐位相同的数据集
        channels: 通道数
        amplitude: 斑点峰值
        noise_std: 像素噪声标准差

    Returns:
        Dataset
    """
    if min(num_classes, samples_per_class, image_size, channels) < 1:
        raise ConfigError("合成数据参数必须为正", config_key="dataset")
    rng = np.random.default_rng(seed)
    patterns = _class_patterns(num_classes, image_size, channels)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.standard_normal((labels.size, channels, image_size, image_size)) * noise_std
    images = amplitude * patterns[labels] + noise
    order = rng.permutation(labels.size)
    return Dataset(images[order], labels[order], num_classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """按固定种子随机划分训练集 / 测试集"""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction 必须在 (0, 1) 内", config_key="test_fraction")
    n_test = int(round(len(ds) * test_fraction))
    if n_test < 1 or n_test >= len(ds):
        raise DatasetError(f"样本数 {len(ds)} 不足以按 {test_fraction} 划分")
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


# ----------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------

def load_csv_images(
    path: str,
    num_classes: int,
    image_shape: Sequence[int],
    stats: Optional[NormalizationStats] = None,
    normalize: bool = True
) -> Dataset:
    """
    读取 CSV 图像数据集

    每行: 标签, 随后 C·H·W 个 [0, 255] 像素值。像素缩放到 [0, 1]，
    再按逐通道均值 / 标准差归一化。测试集应传入训练集的 stats。

    Args:
        path: CSV 路径
        num_classes: 类别数
        image_shape: (C, H, W)
        stats: 归一化统计量；为 None 时由本文件计算（即本文件是训练集）
        normalize: 是否归一化

    Raises:
        DatasetParseError: 行格式错误（带行号）
        DatasetError: 标签越界、文件为空或无法读取
    """
    shape = tuple(int(d) for d in image_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"image_shape 必须是 [C, H, W]，得到 {list(image_shape)}", config_key="image_shape")
    width = int(np.prod(shape))

    labels: List[int] = []
    rows: List[List[float]] = []
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            for line_number, row in enumerate(csv.reader(f), start=1):
                if not row or all(not cell.strip() for cell in row):
                    continue
                if len(row) != width + 1:
                    raise DatasetParseError(
                        f"需要 {width + 1} 列，得到 {len(row)} 列", line_number=line_number, path=str(path)
                    )
                try:
                    label = int(row[0])
                    pixels = [float(cell) for cell in row[1:]]
                except ValueError:
                    raise DatasetParseError("存在非数值字段", line_number=line_number, path=str(path))
                if not 0 <= label < num_classes:
                    raise DatasetError(f"第 {line_number} 行标签 {label} 超出范围 [0, {num_classes})", path=str(path))
                if min(pixels) < 0 or max(pixels) > PIXEL_MAX:
                    raise DatasetParseError("像素值超出 [0, 255]", line_number=line_number, path=str(path))
                labels.append(label)
                rows.append(pixels)
    except OSError as e:
        raise DatasetError(f"无法读取数据文件: {e}", path=str(path))

    if not rows:
        raise DatasetError("数据文件中没有样本", path=str(path))

    images = np.asarray(rows, dtype=np.float64).reshape((-1,) + shape) / PIXEL_MAX
    if normalize:
        stats = stats or NormalizationStats.from_images(images)
        images = stats.apply(images)
    logger.debug(f"已读取 {len(rows)} 个样本: {path}")
    return Dataset(images, np.asarray(labels), num_classes, stats if normalize else None)


def save_csv_images(ds: Dataset, path: str) -> str:
    """写出 CSV 数据集；像素按 [0, 1] 解释，截断后量化到 0..255 的整数"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.rint(np.clip(ds.images, 0.0, 1.0) * PIXEL_MAX).astype(np.int64)
    flat = pixels.reshape(len(ds), -1)
    try:
        with open(target, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            for label, row in zip(ds.labels, flat):
                writer.writerow([int(label)] + row.tolist())
    except OSError as e:
        raise DatasetError(f"无法写入数据文件: {e}", path=str(target))
    return str(target)


# ----------------------------------------------------------------------
# 批次
# ----------------------------------------------------------------------

def epoch_permutation(num_samples: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """(shuffle_seed, epoch) 的纯函数"""
    return np.random.default_rng(derive_seed(shuffle_seed, epoch)).permutation(num_samples)


def _augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """随机水平翻转 + 四周补 4 后随机裁剪回原尺寸"""
    n, _, h, w = images.shape
    flips = rng.random(n) < 0.5
    out = np.where(flips[:, None, None, None], images[..., ::-1], images)
    padded = np.pad(out, ((0, 0), (0, 0), (PAD_CROP, PAD_CROP), (PAD_CROP, PAD_CROP)))
    offsets = rng.integers(0, 2 * PAD_CROP + 1, size=(n, 2))
    return np.stack([
        padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offsets)
    ])


def epoch_batches(ds: Dataset, cfg: LoaderConfig, epoch: int) -> List[Batch]:
    """
    一个 epoch 的有序批次列表

    每个样本恰好出现一次，最后一个不足 batch_size 的批次保留。
    """
    order = epoch_permutation(len(ds), cfg.shuffle_seed, epoch)
    aug_rng = np.random.default_rng(derive_seed(cfg.shuffle_seed, epoch, 1)) if cfg.augment else None
    batches: List[Batch] = []
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        images = ds.images[idx]
        if aug_rng is not None:
            images = _augment(images, aug_rng)
        batches.append((images, ds.labels[idx]))
    return batches


def iterations_per_epoch(num_samples: int, batch_size: int) -> int:
    return -(-num_samples // batch_size)


# ----------------------------------------------------------------------
# 配置驱动的加载
# ----------------------------------------------------------------------

@dataclass
class DatasetConfig:
    """数据来源描述（配置文件的 dataset 段）"""
    source: str = "synthetic"
    num_classes: int = 4
    image_size: int = 8
    channels: int = 1
    samples_per_class: int = 250
    amplitude: float = 2.0
    noise_std: float = 1.0
    test_fraction: float = 0.2
    seed: int = 0
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    image_shape: List[int] = field(default_factory=list)

    SOURCES = ("synthetic", "csv")

    def __post_init__(self):
        if self.source not in self.SOURCES:
            raise ConfigError(f"未知的数据来源: {self.source}", config_key="dataset.source")
        if self.source == "csv" and not self.train_path:
            raise ConfigError("csv 数据来源需要 train_path", config_key="dataset.train_path")
        if not self.image_shape:
            self.image_shape = [self.channels, self.image_size, self.image_size]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DatasetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"未知的数据集配置项: {sorted(unknown)}", config_key=f"dataset.{sorted(unknown)[0]}")
        return cls(**dict(data))


def load_datasets(cfg: DatasetConfig) -> Tuple[Dataset, Dataset]:
    """按配置返回 (train, test)；归一化统计量只取自训练集"""
    if cfg.source == "synthetic":
        full = generate_synthetic(
            cfg.num_classes, cfg.samples_per_class, cfg.image_size, cfg.seed,
            channels=cfg.channels, amplitude=cfg.amplitude, noise_std=cfg.noise_std,
        )
        train, test = train_test_split(full, cfg.test_fraction, cfg.seed)
    else:
        assert cfg.train_path is not None
        raw_train = load_csv_images(cfg.train_path, cfg.num_classes, cfg.image_shape, normalize=False)
        if cfg.test_path:
            raw_test = load_csv_images(cfg.test_path, cfg.num_classes, cfg.image_shape, normalize=False)
        else:
            raw_train, raw_test = train_test_split(raw_train, cfg.test_fraction, cfg.seed)
        stats = NormalizationStats.from_images(raw_train.images)
        train = Dataset(stats.apply(raw_train.images), raw_train.labels, cfg.num_classes, stats)
        test = Dataset(stats.apply(raw_test.images), raw_test.labels, cfg.num_classes, stats)

    logger.info(f"数据集就绪: 训练 {len(train)} / 测试 {len(test)}，类别 {cfg.num_classes}")
    return train, test
