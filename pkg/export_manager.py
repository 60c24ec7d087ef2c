"""
导出管理器

训练指标（CSV / JSON lines，逐 epoch 追加并刷新）、嫁接事件流、
滤波器普查结果的导出，以及两份指标文件的对比。
"""
import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Dict, Iterable, List, Mapping, Optional, Sequence

from diagnostics import DEFAULT_THRESHOLDS, FilterCensus
from exceptions import ExportError
from graft import GraftEvent
from logger import get_logger
from utils import threshold_label

logger = get_logger()

METRICS_VERSION_LINE = "# graftnet-metrics v1"
FORMATS = ("csv", "jsonl")
FORMAT_ALIASES = {"csv": "csv", "json-lines": "jsonl", "jsonl": "jsonl", "json": "jsonl"}

METRICS_COLUMNS = [
    "epoch",
    "network_id",
    "train_loss",
    "train_accuracy",
    "test_accuracy",
    "effective_lr",
    *[f"invalid_ratio_{threshold_label(t)}" for t in DEFAULT_THRESHOLDS],
    "network_entropy",
    "mean_alpha",
]

CENSUS_COLUMNS = [
    "threshold", "invalid_ratio", "partition_mode", "total",
    "valid_count", "invalid_count", "valid_average_l1", "invalid_average_l1",
]
FILTER_COLUMNS = ["threshold", "layer", "index", "l1_norm", "valid"]


def normalize_format(fmt: str) -> str:
    try:
        return FORMAT_ALIASES[fmt.lower()]
    except KeyError:
        raise ExportError(f"不支持的格式: {fmt}（可选 csv / json-lines）")


@dataclass
class EpochMetrics:
    """单个网络在一个 epoch 结束（嫁接之后）时的度量"""
    epoch: int
    network_id: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    effective_lr: float
    invalid_ratio_at: Dict[float, float] = field(default_factory=dict)
    network_entropy: float = 0.0
    mean_alpha: float = 0.5
    role: str = "student"

    def to_row(self) -> List[Any]:
        ratios = [self.invalid_ratio_at.get(t, "") for t in DEFAULT_THRESHOLDS]
        return [
            self.epoch, self.network_id, self.train_loss, self.train_accuracy,
            self.test_accuracy, self.effective_lr, *ratios, self.network_entropy, self.mean_alpha,
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "network_id": self.network_id,
            "role": self.role,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "effective_lr": self.effective_lr,
            "invalid_ratio_at": {threshold_label(t): r for t, r in sorted(self.invalid_ratio_at.items())},
            "network_entropy": self.network_entropy,
            "mean_alpha": self.mean_alpha,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EpochMetrics":
        return cls(
            epoch=int(data["epoch"]),
            network_id=int(data["network_id"]),
            train_loss=float(data["train_loss"]),
            train_accuracy=float(data["train_accuracy"]),
            test_accuracy=float(data["test_accuracy"]),
            effective_lr=float(data["effective_lr"]),
            invalid_ratio_at={float(k): float(v) for k, v in data.get("invalid_ratio_at", {}).items()},
            network_entropy=float(data["network_entropy"]),
            mean_alpha=float(data["mean_alpha"]),
            role=str(data.get("role", "student")),
        )

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> "EpochMetrics":
        ratios = {}
        for t in DEFAULT_THRESHOLDS:
            cell = row[f"invalid_ratio_{threshold_label(t)}"]
            if cell != "":
                ratios[t] = float(cell)
        return cls(
            epoch=int(row["epoch"]),
            network_id=int(row["network_id"]),
            train_loss=float(row["train_loss"]),
            train_accuracy=float(row["train_accuracy"]),
            test_accuracy=float(row["test_accuracy"]),
            effective_lr=float(row["effective_lr"]),
            invalid_ratio_at=ratios,
            network_entropy=float(row["network_entropy"]),
            mean_alpha=float(row["mean_alpha"]),
        )


# ----------------------------------------------------------------------
# 指标写入 / 读取
# ----------------------------------------------------------------------

class MetricsWriter:
    """
    指标文件的唯一写者

    每写一条记录就刷新，异常终止后文件在任意 epoch 边界都可重新解析。
    append=True 且文件已有内容时不重复写表头。
    """

    def __init__(self, path: str, fmt: str = "csv", append: bool = False):
        self.path = Path(path)
        self.format = normalize_format(fmt)
        has_content = append and self.path.exists() and self.path.stat().st_size > 0
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            handle = open(self.path, "a" if append else "w", encoding="utf-8", newline="")
        except OSError as e:
            raise ExportError(f"无法打开指标文件: {e}", output_path=str(self.path))
        self._file: Optional[IO[str]] = handle
        self._csv = csv.writer(handle, lineterminator="\n") if self.format == "csv" else None
        if self._csv is not None and not has_content:
            handle.write(METRICS_VERSION_LINE + "\n")
            self._csv.writerow(METRICS_COLUMNS)
            self._flush()

    def write(self, record: EpochMetrics) -> None:
        if self._file is None:
            raise ExportError("指标文件已关闭", output_path=str(self.path))
        try:
            if self._csv is not None:
                self._csv.writerow(record.to_row())
            else:
                self._file.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
            self._flush()
        except OSError as e:
            raise ExportError(f"写入指标失败: {e}", output_path=str(self.path))

    def _flush(self) -> None:
        assert self._file is not None
        self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def export_metrics(records: Iterable[EpochMetrics], path: str, fmt: str = "csv") -> str:
    """把一串 EpochMetrics 写成新文件；空序列得到只有表头的 CSV"""
    count = 0
    with MetricsWriter(path, fmt) as writer:
        for record in records:
            writer.write(record)
            count += 1
    logger.info(f"成功导出 {count} 条指标到: {path}")
    return str(path)


def read_metrics(path: str) -> List[EpochMetrics]:
    """
    读取 CSV 或 JSON lines 指标文件

    跳过 "#" 注释行；最后一行若被截断（异常终止）则忽略。
    """
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            text = f.read()
    except OSError as e:
        raise ExportError(f"无法读取指标文件: {e}", output_path=str(path))

    lines = [line for line in text.split("\n") if line.strip() and not line.startswith("#")]
    if not lines:
        return []
    truncated_tail = not text.endswith("\n")

    records: List[EpochMetrics] = []
    if lines[0].lstrip().startswith("{"):
        for i, line in enumerate(lines):
            try:
                records.append(EpochMetrics.from_dict(json.loads(line)))
            except (ValueError, KeyError) as e:
                if i == len(lines) - 1 and truncated_tail:
                    logger.warning(f"忽略被截断的最后一行: {path}")
                    break
                raise ExportError(f"指标文件第 {i + 1} 条记录无效: {e}", output_path=str(path))
        return records

    reader = csv.DictReader(io.StringIO("\n".join(lines) + "\n"))
    missing = set(METRICS_COLUMNS) - set(reader.fieldnames or [])
    if missing:
        raise ExportError(f"指标文件缺少列: {sorted(missing)}", output_path=str(path))
    rows = list(reader)
    for i, row in enumerate(rows):
        try:
            if None in row or any(row[c] is None for c in METRICS_COLUMNS):
                raise ValueError("列数不正确")
            records.append(EpochMetrics.from_row(row))
        except (ValueError, TypeError) as e:
            if i == len(rows) - 1 and truncated_tail:
                logger.warning(f"忽略被截断的最后一行: {path}")
                break
            raise ExportError(f"指标文件第 {i + 1} 行无效: {e}", output_path=str(path))
    return records


# ----------------------------------------------------------------------
# 对比
# ----------------------------------------------------------------------

@dataclass
class MetricsComparison:
    network_id: int
    rows: List[Dict[str, Any]] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


COMPARISON_COLUMNS = [
    "epoch", "test_accuracy_a", "test_accuracy_b", "delta_test_accuracy",
    "delta_train_loss", "delta_invalid_ratio_1e-3", "delta_network_entropy",
]


def compare_metrics(a: Sequence[EpochMetrics], b: Sequence[EpochMetrics], network_id: int = 0) -> MetricsComparison:
    """
    逐 epoch 比较两次实验中同一网络的指标（差值均为 b − a）

    只比较两边都有的 epoch；summary 给出最终与最佳测试准确率。
    """
    left = {m.epoch: m for m in a if m.network_id == network_id}
    right = {m.epoch: m for m in b if m.network_id == network_id}
    comparison = MetricsComparison(network_id=network_id)
    for epoch in sorted(set(left) & set(right)):
        ma, mb = left[epoch], right[epoch]
        ratio_a = ma.invalid_ratio_at.get(DEFAULT_THRESHOLDS[0], 0.0)
        ratio_b = mb.invalid_ratio_at.get(DEFAULT_THRESHOLDS[0], 0.0)
        comparison.rows.append({
            "epoch": epoch,
            "test_accuracy_a": ma.test_accuracy,
            "test_accuracy_b": mb.test_accuracy,
            "delta_test_accuracy": mb.test_accuracy - ma.test_accuracy,
            "delta_train_loss": mb.train_loss - ma.train_loss,
            "delta_invalid_ratio_1e-3": ratio_b - ratio_a,
            "delta_network_entropy": mb.network_entropy - ma.network_entropy,
        })

    def final(series: Mapping[int, EpochMetrics]) -> Optional[float]:
        return series[max(series)].test_accuracy if series else None

    def best(series: Mapping[int, EpochMetrics]) -> Optional[float]:
        return max(m.test_accuracy for m in series.values()) if series else None

    fa, fb = final(left), final(right)
    comparison.summary = {
        "network_id": network_id,
        "epochs_compared": len(comparison.rows),
        "final_test_accuracy_a": fa,
        "final_test_accuracy_b": fb,
        "final_delta": None if fa is None or fb is None else fb - fa,
        "best_test_accuracy_a": best(left),
        "best_test_accuracy_b": best(right),
    }
    return comparison


def render_comparison(comparison: MetricsComparison, fmt: str = "csv") -> str:
    if normalize_format(fmt) == "jsonl":
        return json.dumps({"rows": comparison.rows, "summary": comparison.summary}, ensure_ascii=False, indent=2) + "\n"
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=COMPARISON_COLUMNS, lineterminator='\n')
    writer.writeheader()
    writer.writerows(comparison.rows)
    return buffer.getvalue()


# ----------------------------------------------------------------------
# 普查
# ----------------------------------------------------------------------

def _ratio_for(census: FilterCensus, ratios: Mapping[float, float]) -> Optional[float]:
    """ranked 普查的 threshold 是无效比例，不对应任何阈值比例"""
    if census.partition_mode == "ranked":
        return None
    return ratios.get(census.threshold)


def render_census(
    censuses: Sequence[FilterCensus],
    ratios: Mapping[float, float],
    fmt: str = "csv",
    per_filter: bool = False,
    extra: Optional[Mapping[str, Any]] = None
) -> str:
    """
    普查结果的文本表示

    CSV: 每个阈值一行汇总；per_filter 时改为每个 (阈值, 滤波器) 一行。
    JSON: 汇总、比例和附加信息放在一个对象里。
    """
    if normalize_format(fmt) == "jsonl":
        payload: Dict[str, Any] = dict(extra or {})
        payload["thresholds"] = [
            dict(c.summary(), invalid_ratio=_ratio_for(c, ratios)) for c in censuses
        ]
        if per_filter:
            payload["filters"] = [
                {"threshold": c.threshold, "layer": r.layer, "index": r.index, "l1_norm": r.l1_norm, "valid": r.valid}
                for c in censuses for r in c.records
            ]
        return json.dumps(payload, ensure_ascii=False, indent=2) + "\n"

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    if per_filter:
        writer.writerow(FILTER_COLUMNS)
        for c in censuses:
            for r in c.records:
                writer.writerow([c.threshold, r.layer, r.index, r.l1_norm, int(r.valid)])
    else:
        writer.writerow(CENSUS_COLUMNS)
        for c in censuses:
            s = c.summary()
            ratio = _ratio_for(c, ratios)
            writer.writerow([
                c.threshold, "" if ratio is None else ratio, s["partition_mode"], s["total"],
                s["valid_count"], s["invalid_count"],
                "" if s["valid_average_l1"] is None else s["valid_average_l1"],
                "" if s["invalid_average_l1"] is None else s["invalid_average_l1"],
            ])
    return buffer.getvalue()


def write_text(text: str, output_path: str) -> str:
    """把渲染好的报告写入文件"""
    try:
        target = Path(output_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
    except OSError as e:
        raise ExportError(f"写入报告失败: {e}", output_path=str(output_path))
    logger.info(f"成功导出报告到: {output_path}")
    return str(output_path)


def export_census(
    censuses: Sequence[FilterCensus],
    ratios: Mapping[float, float],
    output_path: str,
    fmt: str = "csv",
    per_filter: bool = False,
    extra: Optional[Mapping[str, Any]] = None
) -> str:
    return write_text(render_census(censuses, ratios, fmt, per_filter, extra), output_path)


# ----------------------------------------------------------------------
# 嫁接事件
# ----------------------------------------------------------------------

class EventWriter:
    """嫁接事件的 JSON lines 流，每条刷新"""

    def __init__(self, path: str):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file: Optional[IO[str]] = open(self.path, 'w', encoding='utf-8', newline='')
        except OSError as e:
            raise ExportError(f"无法打开事件文件: {e}", output_path=str(self.path))

    def write_many(self, events: Iterable[GraftEvent]) -> None:
        if self._file is None:
            raise ExportError("事件文件已关闭", output_path=str(self.path))
        try:
            for event in events:
                self._file.write(json.dumps(event.to_dict(), ensure_ascii=False) + "\n")
            self._file.flush()
        except OSError as e:
            raise ExportError(f"写入事件失败: {e}", output_path=str(self.path))

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> "EventWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_events(path: str) -> List[Dict[str, Any]]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]
    except (OSError, ValueError) as e:
        raise ExportError(f"无法读取事件文件: {e}", output_path=str(path))
