"""
导出管理器测试
"""
import csv
import json

import pytest

from diagnostics import filter_census
from exceptions import ExportError
from export_manager import (
    METRICS_COLUMNS, METRICS_VERSION_LINE, EpochMetrics, EventWriter, MetricsWriter, compare_metrics,
    export_metrics, read_events, read_metrics, render_census, render_comparison, write_text,
)
from graft import GraftEvent
from utils import threshold_label


def make_record(epoch, network_id=0, accuracy=0.5, loss=1.0):
    return EpochMetrics(
        epoch=epoch,
        network_id=network_id,
        train_loss=loss,
        train_accuracy=accuracy,
        test_accuracy=accuracy,
        effective_lr=0.1,
        invalid_ratio_at={1e-3: 0.0, 1e-1: 0.25},
        network_entropy=3.5,
        mean_alpha=0.6,
    )


def data_lines(path):
    with open(path, encoding="utf-8") as f:
        return [line for line in f.read().split("\n") if line and not line.startswith("#")]


class TestThresholdLabel:
    """阈值列名"""

    def test_labels(self):
        assert threshold_label(1e-3) == "1e-3"
        assert threshold_label(0.1) == "1e-1"
        assert threshold_label(2.5e-4) == "2.5e-4"


class TestMetricsFile:
    """指标文件"""

    def test_empty_stream_has_header(self, tmp_path):
        path = export_metrics([], str(tmp_path / "m.csv"))
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0] == METRICS_VERSION_LINE
        assert lines[1].split(",") == METRICS_COLUMNS
        assert len(lines) == 2
        assert read_metrics(path) == []

    def test_exact_columns(self):
        assert METRICS_COLUMNS == [
            "epoch", "network_id", "train_loss", "train_accuracy", "test_accuracy", "effective_lr",
            "invalid_ratio_1e-3", "invalid_ratio_1e-1", "network_entropy", "mean_alpha",
        ]

    def test_hundred_records(self, tmp_path):
        records = [make_record(e // 2, e % 2) for e in range(100)]
        path = export_metrics(records, str(tmp_path / "m.csv"))
        assert len(data_lines(path)) == 101

    def test_csv_round_trip(self, tmp_path):
        records = [make_record(e, accuracy=0.1 * e) for e in range(5)]
        path = export_metrics(records, str(tmp_path / "m.csv"))
        assert read_metrics(path) == records

    def test_jsonl_round_trip(self, tmp_path):
        records = [make_record(e, network_id=1) for e in range(3)]
        records[1].role = "teacher"
        path = export_metrics(records, str(tmp_path / "m.jsonl"), fmt="json-lines")
        first = json.loads(data_lines(path)[0])
        assert first["invalid_ratio_at"] == {"1e-3": 0.0, "1e-1": 0.25}
        assert read_metrics(path) == records

    def test_truncated_last_line_ignored(self, tmp_path):
        path = export_metrics([make_record(e) for e in range(3)], str(tmp_path / "m.csv"))
        with open(path, encoding="utf-8") as f:
            text = f.read()
        last = text.rstrip("\n").split("\n")[-1]
        with open(path, "w", encoding="utf-8") as f:
            f.write(text[:len(text) - 1 - len(last) // 2])
        assert [m.epoch for m in read_metrics(path)] == [0, 1]

    def test_corrupt_middle_line(self, tmp_path):
        path = tmp_path / "m.csv"
        export_metrics([make_record(e) for e in range(3)], str(path))
        lines = path.read_text(encoding="utf-8").split("\n")
        lines[3] = "x,y"
        path.write_text("\n".join(lines), encoding="utf-8")
        with pytest.raises(ExportError):
            read_metrics(str(path))

    def test_append_does_not_repeat_header(self, tmp_path):
        path = str(tmp_path / "m.csv")
        with MetricsWriter(path) as writer:
            writer.write(make_record(0))
        with MetricsWriter(path, append=True) as writer:
            writer.write(make_record(1))
        lines = data_lines(path)
        assert len(lines) == 3
        assert [m.epoch for m in read_metrics(path)] == [0, 1]

    def test_each_record_is_flushed(self, tmp_path):
        path = str(tmp_path / "m.csv")
        writer = MetricsWriter(path)
        writer.write(make_record(0))
        assert len(read_metrics(path)) == 1
        writer.close()

    def test_bad_format(self, tmp_path):
        with pytest.raises(ExportError):
            MetricsWriter(str(tmp_path / "m.xml"), fmt="xml")

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x", encoding="utf-8")
        with pytest.raises(ExportError) as exc:
            MetricsWriter(str(blocker / "m.csv"))
        assert exc.value.output_path.endswith("m.csv")


class TestComparison:
    """指标对比"""

    def test_deltas_are_b_minus_a(self):
        a = [make_record(e, accuracy=0.5, loss=1.0) for e in range(3)]
        b = [make_record(e, accuracy=0.75, loss=0.5) for e in range(2)]
        b.append(make_record(0, network_id=1, accuracy=0.0))
        comparison = compare_metrics(a, b)
        assert [row["epoch"] for row in comparison.rows] == [0, 1]
        assert all(row["delta_test_accuracy"] == 0.25 for row in comparison.rows)
        assert all(row["delta_train_loss"] == -0.5 for row in comparison.rows)
        assert comparison.summary["final_test_accuracy_a"] == 0.5
        assert comparison.summary["final_test_accuracy_b"] == 0.75
        assert comparison.summary["final_delta"] == 0.25
        assert comparison.summary["epochs_compared"] == 2

    def test_render(self):
        comparison = compare_metrics([make_record(0)], [make_record(0, accuracy=1.0)])
        rows = list(csv.DictReader(render_comparison(comparison).splitlines()))
        assert float(rows[0]["delta_test_accuracy"]) == 0.5
        payload = json.loads(render_comparison(comparison, fmt="json"))
        assert payload["summary"]["final_delta"] == 0.5

    def test_missing_network(self):
        comparison = compare_metrics([make_record(0)], [make_record(0)], network_id=3)
        assert comparison.rows == []
        assert comparison.summary["final_delta"] is None


class TestCensusReport:
    """普查报告"""

    @pytest.fixture
    def censuses(self, network):
        return [filter_census(network, t) for t in (1e-3, 1e-1)]

    def test_csv_summary(self, censuses):
        text = render_census(censuses, {1e-3: 0.0, 1e-1: 0.2})
        rows = list(csv.DictReader(text.splitlines()))
        assert [float(r["threshold"]) for r in rows] == [1e-3, 1e-1]
        assert rows[1]["invalid_ratio"] == "0.2"
        assert all(r["partition_mode"] == "threshold" and r["total"] == "10" for r in rows)

    def test_csv_per_filter(self, censuses):
        rows = list(csv.DictReader(render_census(censuses, {}, per_filter=True).splitlines()))
        assert len(rows) == 20
        assert rows[0]["layer"] == "layer0" and rows[0]["index"] == "0"

    def test_json(self, censuses):
        payload = json.loads(render_census(censuses, {1e-3: 0.0}, fmt="json", per_filter=True, extra={"checkpoint": "a"}))
        assert payload["checkpoint"] == "a"
        assert payload["thresholds"][0]["invalid_ratio"] == 0.0
        assert payload["thresholds"][1]["invalid_ratio"] is None
        assert len(payload["filters"]) == 20

    def test_write_text(self, tmp_path):
        path = write_text("a,b\n", str(tmp_path / "out" / "census.csv"))
        with open(path, encoding="utf-8") as f:
            assert f.read() == "a,b\n"


class TestEvents:
    """嫁接事件流"""

    def test_write_and_read(self, tmp_path):
        events = [
            GraftEvent(epoch=0, layer_name="layer0", alpha=0.6, H_self=2.0, H_other=1.0, source_network=1, network_id=0),
            GraftEvent(epoch=0, layer_name="layer3", alpha=0.4, H_self=1.0, H_other=2.0, source_network=0, network_id=1),
        ]
        path = str(tmp_path / "events.jsonl")
        with EventWriter(path) as writer:
            writer.write_many(events)
        assert read_events(path) == [e.to_dict() for e in events]

    def test_unreadable(self, tmp_path):
        with pytest.raises(ExportError):
            read_events(str(tmp_path / "missing.jsonl"))
