"""
配置管理模块

实验配置文件为 JSON（分节: experiment / architecture / dataset / trainer /
trainers / graft / distill / output），与 DEFAULT_CONFIG 深度合并后
构建经过校验的 ExperimentConfig。
"""
import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from datasets import DatasetConfig
from distill import DistillConfig
from exceptions import ConfigError, GraftNetError
from graft import GraftConfig
from logger import get_logger
from nn_core import small_convnet
from optimizer import TrainerConfig
from orchestrator import ExperimentConfig, diversified_trainers

logger = get_logger()


class ConfigManager:
    """配置管理器"""

    DEFAULT_CONFIG: Dict[str, Any] = {
        # 实验规模与调度
        "experiment": {
            "num_students": 2,
            "num_teachers": 0,
            "seed": 0,              # 第 k 个网络的种子为 seed + k
            "max_iterations": None,  # None: epochs × 每 epoch 迭代数
            "diversify": True,       # trainers 为空时按 k 区分学习率与数据顺序
            "use_parallel": True,
            "max_workers": None,
        },

        # 学生网络结构
        "architecture": small_convnet(),

        # 数据
        "dataset": {
            "source": "synthetic",
            "num_classes": 4,
            "image_size": 8,
            "channels": 1,
            "samples_per_class": 250,
            "amplitude": 2.0,
            "noise_std": 1.0,
            "test_fraction": 0.2,
            "seed": 0,
            "train_path": None,
            "test_path": None,
            "image_shape": [],   # csv 数据: [C, H, W]
        },

        # 基础训练超参数（种子由 experiment.seed 决定）
        "trainer": {
            "learning_rate": 0.05,
            "momentum": 0.9,
            "weight_decay": 5e-4,
            "batch_size": 32,
            "epochs": 30,
            "lr_decay_factor": 0.1,
            "lr_decay_period_epochs": 20,
            "augment": False,
        },

        # 可选: 每个网络单独覆盖的训练项，长度须为 K + M
        "trainers": [],

        # 嫁接
        "graft": {
            "scion_source": "external",
            "criterion": "entropy",
            "A": 0.4,
            "c": 5.0,
            "bin_count": 256,
            "invalid_threshold_gamma": 0.1,
            "noise_decay_a": 0.9,
            "graft_period_iters": None,  # None: 每个 epoch 一次
            "alpha_clamp_epsilon": 0.05,
            "enabled": True,
            "graft_dense": False,
            "internal_mode": "additive",
        },

        # 蒸馏（M >= 1 时生效）
        "distill": {
            "temperature": 2.0,
            "kd_weight": 1.0,
            "teacher_architecture": None,
            "teacher_checkpoints": [],
        },

        # 输出
        "output": {
            "dir": "runs/default",
            "metrics_file": "metrics.csv",
            "metrics_format": "csv",
            "events_file": "graft_events.jsonl",
            "checkpoint_dir": "checkpoints",
            "checkpoint_every": 1,
            "thresholds": [1e-3, 1e-1],
            "save_config": True,
        },
    }

    def __init__(self, config_path: Optional[str] = None):
        self.config_path = config_path
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """加载配置文件并与默认配置合并"""
        config = copy.deepcopy(self.DEFAULT_CONFIG)
        if self.config_path is None:
            return config
        if not os.path.exists(self.config_path):
            raise ConfigError(f"配置文件不存在: {self.config_path}", config_key="config")
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                user_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件不是合法的 JSON: 第 {e.lineno} 行 {e.msg}", config_key="config")
        except OSError as e:
            raise ConfigError(f"无法读取配置文件: {e}", config_key="config")
        if not isinstance(user_config, dict):
            raise ConfigError("配置文件顶层必须是对象", config_key="config")

        unknown = set(user_config) - set(config)
        if unknown:
            raise ConfigError(f"未知的配置节: {sorted(unknown)}", config_key=sorted(unknown)[0])
        # architecture 整体替换，其他节逐键合并
        for section, value in user_config.items():
            if section == "architecture" or not isinstance(config[section], dict):
                config[section] = value
            elif not isinstance(value, dict):
                raise ConfigError(f"配置节 {section} 必须是对象", config_key=section)
            else:
                config[section] = self._merge(config[section], value, section)
        logger.debug(f"已加载配置: {self.config_path}")
        return config

    @staticmethod
    def _merge(base: Dict[str, Any], override: Mapping[str, Any], section: str) -> Dict[str, Any]:
        unknown = set(override) - set(base)
        if unknown:
            raise ConfigError(f"配置节 {section} 中存在未知项: {sorted(unknown)}", config_key=f"{section}.{sorted(unknown)[0]}")
        merged = dict(base)
        merged.update(override)
        return merged

    def save_config(self, path: str) -> str:
        """把生效的配置写为 JSON（缩进 2）"""
        target = Path(path)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, 'w', encoding='utf-8') as f:
                json.dump(self.config, f, ensure_ascii=False, indent=2)
        except OSError as e:
            raise ConfigError(f"保存配置文件失败: {e}", config_key="output.dir")
        return str(target)

    def get(self, section: str, key: str, default: Any = None) -> Any:
        """获取配置项"""
        return self.config.get(section, {}).get(key, default)

    def set(self, section: str, key: str, value: Any) -> None:
        """设置配置项"""
        if section not in self.config or not isinstance(self.config[section], dict):
            raise ConfigError(f"未知的配置节: {section}", config_key=section)
        self.config[section][key] = value

    def get_all(self) -> Dict[str, Any]:
        """获取所有配置"""
        return copy.deepcopy(self.config)

    def output_dir(self, out_dir: Optional[str] = None) -> Path:
        return Path(out_dir or self.config["output"]["dir"])

    def _trainer_configs(self, seed: int, count: int) -> List[TrainerConfig]:
        base_section = dict(self.config["trainer"])
        base_section["seed"] = seed
        base = TrainerConfig.from_dict(base_section)
        overrides = self.config["trainers"]
        if not isinstance(overrides, list):
            raise ConfigError("trainers 必须是列表", config_key="trainers")
        if not overrides:
            if self.config["experiment"]["diversify"]:
                return diversified_trainers(base, count)
            return [base.with_overrides(seed=seed + k) for k in range(count)]
        if len(overrides) != count:
            raise ConfigError(f"trainers 需要 {count} 项，得到 {len(overrides)} 项", config_key="trainers")
        configs = []
        for k, item in enumerate(overrides):
            if not isinstance(item, dict):
                raise ConfigError("trainers 的每一项必须是对象", config_key=f"trainers[{k}]")
            merged = dict(base_section, seed=seed + k)
            merged.update(item)
            configs.append(TrainerConfig.from_dict(merged))
        return configs

    def build_experiment_config(
        self,
        out_dir: Optional[str] = None,
        seed_override: Optional[int] = None
    ) -> ExperimentConfig:
        """
        构建 ExperimentConfig

        Args:
            out_dir: 覆盖 output.dir
            seed_override: 覆盖 experiment.seed

        Raises:
            ConfigError: 任一配置项无效
        """
        cfg = self.config
        exp = cfg["experiment"]
        out = cfg["output"]
        distill_section = dict(cfg["distill"])
        seed = int(exp["seed"] if seed_override is None else seed_override)
        if seed_override is not None:
            exp["seed"] = seed
        directory = self.output_dir(out_dir)

        try:
            num_students = int(exp["num_students"])
            num_teachers = int(exp["num_teachers"])
            return ExperimentConfig(
                num_students=num_students,
                num_teachers=num_teachers,
                trainers=self._trainer_configs(seed, num_students + num_teachers),
                graft=GraftConfig.from_dict(cfg["graft"]),
                distill=DistillConfig(
                    temperature=distill_section["temperature"],
                    kd_weight=distill_section["kd_weight"],
                ),
                architecture=cfg["architecture"],
                teacher_architecture=distill_section["teacher_architecture"],
                dataset=DatasetConfig.from_dict(cfg["dataset"]),
                max_iterations=exp["max_iterations"],
                metrics_path=str(directory / out["metrics_file"]) if out["metrics_file"] else None,
                metrics_format=out["metrics_format"],
                events_path=str(directory / out["events_file"]) if out["events_file"] else None,
                checkpoint_dir=str(directory / out["checkpoint_dir"]) if out["checkpoint_dir"] else None,
                checkpoint_every=int(out["checkpoint_every"]),
                seed=seed,
                thresholds=[float(t) for t in out["thresholds"]],
                teacher_checkpoints=list(distill_section["teacher_checkpoints"] or []),
                max_workers=exp["max_workers"],
                use_parallel=bool(exp["use_parallel"]),
            )
        except ConfigError:
            raise
        except GraftNetError as e:
            raise ConfigError(e.format_message(), config_key="config")
        except (TypeError, ValueError) as e:
            raise ConfigError(f"配置值无效: {e}", config_key="config")
