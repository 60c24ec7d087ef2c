#!/usr/bin/env python3
"""
graftnet 命令行

子命令:
- train       按实验配置文件训练（嫁接 / 嫁接+蒸馏）
- analyze     对检查点做无效滤波器普查
- graft-demo  对两个检查点做一次层级嫁接
- compare     比较两份指标文件
- gradcheck   对结构描述做有限差分梯度检查

退出码: 0 成功，1 配置或用法错误，2 运行时失败。
"""

import argparse
import json
import sys
from typing import Any, Dict, Optional, Sequence

import numpy as np

from logger import get_logger

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class _ArgumentParser(argparse.ArgumentParser):
    """用法错误时打印用法到标准错误并以 1 退出"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: 错误: {message}\n")


class GraftNetCLI:
    """命令行界面"""

    def __init__(self):
        self.log = get_logger()

    def run(self, args: argparse.Namespace) -> int:
        """运行 CLI 命令"""
        handlers = {
            'train': self.train,
            'analyze': self.analyze,
            'graft-demo': self.graft_demo,
            'compare': self.compare,
            'gradcheck': self.gradcheck,
        }
        handler = handlers.get(args.command)
        if handler is None:
            self.create_parser().print_help(sys.stderr)
            return EXIT_CONFIG
        return handler(args)

    # ------------------------------------------------------------------
    # train
    # ------------------------------------------------------------------

    def train(self, args: argparse.Namespace) -> int:
        """运行一次实验"""
        from config_manager import ConfigManager
        from orchestrator import run_experiment

        manager = ConfigManager(args.config)
        cfg = manager.build_experiment_config(out_dir=args.out, seed_override=args.seed)
        out_dir = manager.output_dir(args.out)
        if manager.get("output", "save_config"):
            manager.save_config(str(out_dir / "config.json"))

        print(f"开始训练: K={cfg.num_students} M={cfg.num_teachers}，输出目录 {out_dir}")

        def progress(epoch: int, total: int):
            if not args.quiet:
                print(f"  epoch {epoch}/{total}")

        result = run_experiment(cfg, progress_callback=progress)

        print("\n训练完成:")
        for network_id, accuracy in sorted(result.final_test_accuracy.items()):
            role = "学生" if network_id < cfg.num_students else "教师"
            marker = " (评估网络)" if network_id == result.evaluation_network else ""
            print(f"  net{network_id} [{role}] 测试准确率 {accuracy:.4f}{marker}")
        print(f"  嫁接事件: {len(result.events)}")
        if cfg.metrics_path:
            print(f"  指标文件: {cfg.metrics_path}")
        if cfg.checkpoint_dir:
            print(f"  检查点目录: {cfg.checkpoint_dir}")
        return EXIT_OK

    # ------------------------------------------------------------------
    # analyze
    # ------------------------------------------------------------------

    def analyze(self, args: argparse.Namespace) -> int:
        """无效滤波器比例与有效 / 无效滤波器普查"""
        from checkpoint import load_checkpoint
        from criteria import HistogramSpec, network_information
        from diagnostics import (
            SWEEP_THRESHOLDS, baseline_partition, filter_census, invalid_filter_ratio, ranked_census,
        )
        from export_manager import render_census, write_text
        from utils import parse_float_list

        if args.sweep:
            thresholds = list(SWEEP_THRESHOLDS)
        else:
            thresholds = parse_float_list(args.thresholds, field="thresholds")
        params = load_checkpoint(args.checkpoint)
        baseline = load_checkpoint(args.partition_from) if args.partition_from else None

        censuses = []
        ratios: Dict[float, float] = {}
        for threshold in thresholds:
            partition = None
            if baseline is not None:
                partition = baseline_partition(filter_census(baseline, threshold))
            censuses.append(filter_census(params, threshold, partition))
            ratios[threshold] = invalid_filter_ratio(params, threshold)
        if args.rank_fraction is not None:
            censuses.append(ranked_census(params, args.rank_fraction))

        entropy = network_information(params, HistogramSpec(bin_count=args.bins))
        self.log.info(f"{args.checkpoint}: 网络信息量 {entropy:.6f} nats")
        extra = {"checkpoint": str(args.checkpoint), "network_entropy": entropy}
        if args.partition_from:
            extra["partition_from"] = str(args.partition_from)
        if args.rank_fraction is not None:
            extra["rank_fraction"] = args.rank_fraction

        text = render_census(censuses, ratios, args.format, per_filter=args.per_filter, extra=extra)
        if args.out:
            write_text(text, args.out)
            print(f"报告已导出到: {args.out}")
        else:
            sys.stdout.write(text)
        return EXIT_OK

    # ------------------------------------------------------------------
    # graft-demo
    # ------------------------------------------------------------------

    def graft_demo(self, args: argparse.Namespace) -> int:
        """用 other 检查点嫁接 self 检查点，输出事件与嫁接后的检查点"""
        from checkpoint import load_checkpoint, save_checkpoint
        from config_manager import ConfigManager
        from graft import GraftConfig, graft_pair

        section = dict(ConfigManager(args.config).config["graft"])
        for key in ("criterion", "A", "c", "bin_count", "alpha_clamp_epsilon"):
            value = getattr(args, key)
            if value is not None:
                section[key] = value
        if args.graft_dense:
            section["graft_dense"] = True
        cfg = GraftConfig.from_dict(section)

        params = load_checkpoint(args.self_checkpoint)
        other = load_checkpoint(args.other_checkpoint)
        events = graft_pair(params, other, cfg, epoch=0, source_network=1, network_id=0)
        save_checkpoint(params, args.out)

        lines = [json.dumps(event.to_dict(), ensure_ascii=False) for event in events]
        if args.events:
            from export_manager import write_text
            write_text("\n".join(lines) + ("\n" if lines else ""), args.events)
        else:
            for line in lines:
                print(line)
        print(f"嫁接后的检查点: {args.out}", file=sys.stderr)
        return EXIT_OK

    # ------------------------------------------------------------------
    # compare
    # ------------------------------------------------------------------

    def compare(self, args: argparse.Namespace) -> int:
        """逐 epoch 比较两份指标文件"""
        from export_manager import compare_metrics, read_metrics, render_comparison, write_text

        comparison = compare_metrics(read_metrics(args.baseline), read_metrics(args.candidate), args.network_id)
        text = render_comparison(comparison, args.format)
        if args.out:
            write_text(text, args.out)
        else:
            sys.stdout.write(text)

        summary = comparison.summary
        print("\n对比摘要:", file=sys.stderr)
        for key, value in summary.items():
            shown = f"{value:.4f}" if isinstance(value, float) else value
            print(f"  {key}: {shown}", file=sys.stderr)
        return EXIT_OK

    # ------------------------------------------------------------------
    # gradcheck
    # ------------------------------------------------------------------

    @staticmethod
    def _load_architecture(path: str) -> Dict[str, Any]:
        from exceptions import ConfigError

        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"无法读取结构描述: {e}", config_key="architecture")
        if isinstance(data, dict) and "layers" in data:
            return data
        if isinstance(data, dict) and isinstance(data.get("architecture"), dict):
            return data["architecture"]
        raise ConfigError("文件中没有结构描述（需要 layers 或 architecture 字段）", config_key="architecture")

    def gradcheck(self, args: argparse.Namespace) -> int:
        """随机批次上的有限差分梯度检查"""
        from gradient_check import gradient_check
        from nn_core import Network

        net = Network(self._load_architecture(args.architecture), seed=args.seed)
        rng = np.random.default_rng(args.seed)
        batch = rng.standard_normal((args.samples,) + net.input_shape)
        labels = rng.integers(0, net.num_classes, size=args.samples)

        report = gradient_check(net, batch, labels, tolerance=args.tolerance, epsilon=args.epsilon)
        print(report.format_table())
        if report.flagged:
            print(f"超出容差的参数: {', '.join(report.flagged)}", file=sys.stderr)
            if args.strict:
                return EXIT_RUNTIME
        return EXIT_OK

    # ------------------------------------------------------------------

    @staticmethod
    def create_parser() -> argparse.ArgumentParser:
        """创建命令行解析器"""
        parser = _ArgumentParser(
            prog='graftnet',
            description='graftnet - 多网络滤波器嫁接训练与诊断',
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
示例:
  python main.py train --config k2.json --out runs/k2 --seed 3
  python main.py analyze --checkpoint runs/k2/checkpoints/net0_epoch029.ckpt --thresholds 1e-3,1e-1
  python main.py analyze --checkpoint runs/k2/checkpoints/net0_epoch029.ckpt --rank-fraction 0.25
  python main.py graft-demo a.ckpt b.ckpt --out grafted.ckpt
  python main.py compare runs/base/metrics.csv runs/k2/metrics.csv
  python main.py gradcheck --architecture arch.json
            """
        )
        parser.add_argument('--log-level', default=None, help='日志级别（DEBUG/INFO/WARNING/ERROR）')

        subparsers = parser.add_subparsers(dest='command', help='命令')

        # train
        train_parser = subparsers.add_parser('train', help='按实验配置训练')
        train_parser.add_argument('--config', help='实验配置文件（JSON），缺省使用内置桌面规模配置')
        train_parser.add_argument('--out', help='输出目录（覆盖 output.dir）')
        train_parser.add_argument('--seed', type=int, help='全局种子（覆盖 experiment.seed）')
        train_parser.add_argument('-q', '--quiet', action='store_true', help='不打印逐 epoch 进度')

        # analyze
        analyze_parser = subparsers.add_parser('analyze', help='检查点的无效滤波器普查')
        analyze_parser.add_argument('--checkpoint', required=True, help='GRAFTCKPT1 检查点')
        analyze_parser.add_argument('--thresholds', default='1e-3,1e-1', help='逗号分隔的 l1 阈值（默认: 1e-3,1e-1）')
        analyze_parser.add_argument('-f', '--format', choices=['csv', 'json'], default='csv', help='输出格式（默认: csv）')
        analyze_parser.add_argument('-o', '--out', help='输出文件路径（缺省输出到标准输出）')
        analyze_parser.add_argument('--partition-from', help='基线检查点：沿用其有效 / 无效划分')
        analyze_parser.add_argument('--rank-fraction', type=float, help='追加一行按 l1 排名的普查：每层最小的该比例滤波器记为无效')
        analyze_parser.add_argument('--per-filter', action='store_true', help='输出每个滤波器的记录')
        analyze_parser.add_argument('--sweep', action='store_true', help='使用完整阈值扫描 1e-4..1（忽略 --thresholds）')
        analyze_parser.add_argument('--bins', type=int, default=256, help='网络信息量的直方图 bin 数')

        # graft-demo
        demo_parser = subparsers.add_parser('graft-demo', help='对两个检查点做一次层级嫁接')
        demo_parser.add_argument('self_checkpoint', help='接收方检查点')
        demo_parser.add_argument('other_checkpoint', help='接穗方检查点')
        demo_parser.add_argument('--out', required=True, help='嫁接后的检查点路径')
        demo_parser.add_argument('--config', help='实验配置文件，读取其中的 graft 节')
        demo_parser.add_argument('--criterion', choices=['entropy', 'l1'], help='信息量准则')
        demo_parser.add_argument('--A', type=float, dest='A', help='系数 A')
        demo_parser.add_argument('--c', type=float, dest='c', help='系数 c')
        demo_parser.add_argument('--bins', type=int, dest='bin_count', help='直方图 bin 数')
        demo_parser.add_argument('--epsilon', type=float, dest='alpha_clamp_epsilon', help='α 截断 ε')
        demo_parser.add_argument('--graft-dense', action='store_true', help='同时嫁接全连接层')
        demo_parser.add_argument('--events', help='把嫁接事件写入该 JSON lines 文件')

        # compare
        compare_parser = subparsers.add_parser('compare', help='比较两份指标文件')
        compare_parser.add_argument('baseline', help='基线指标文件')
        compare_parser.add_argument('candidate', help='对比指标文件')
        compare_parser.add_argument('--network-id', type=int, default=0, help='比较的网络编号（默认: 0）')
        compare_parser.add_argument('-f', '--format', choices=['csv', 'json'], default='csv', help='输出格式（默认: csv）')
        compare_parser.add_argument('-o', '--out', help='输出文件路径')

        # gradcheck
        grad_parser = subparsers.add_parser('gradcheck', help='有限差分梯度检查')
        grad_parser.add_argument('--architecture', required=True, help='结构描述 JSON（或含 architecture 节的配置）')
        grad_parser.add_argument('--samples', type=int, default=4, help='随机样本数（默认: 4）')
        grad_parser.add_argument('--seed', type=int, default=0, help='随机种子')
        grad_parser.add_argument('--tolerance', type=float, default=1e-5, help='相对误差容差（默认: 1e-5）')
        grad_parser.add_argument('--epsilon', type=float, default=1e-6, help='差分步长（默认: 1e-6）')
        grad_parser.add_argument('--strict', action='store_true', help='有参数超出容差时以 2 退出')

        return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """解析参数并运行，返回退出码"""
    from exceptions import ConfigError, GraftNetError, ValidationError

    parser = GraftNetCLI.create_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG

    cli = GraftNetCLI()
    if args.log_level:
        cli.log.set_level(args.log_level)
    try:
        return cli.run(args)
    except KeyboardInterrupt:
        print("\n已取消", file=sys.stderr)
        return 130
    except (ConfigError, ValidationError) as e:
        print(f"配置错误: {e.format_message()}", file=sys.stderr)
        return EXIT_CONFIG
    except GraftNetError as e:
        cli.log.error(f"运行失败: {e.format_message()}")
        print(f"错误: {e.format_message()}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        cli.log.error(f"未预期的错误: {e}", exc_info=True)
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    """主入口"""
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
