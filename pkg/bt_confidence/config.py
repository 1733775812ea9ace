"""
运行配置

YAML 文档分为 model / training / decode / confidence / pipeline 五个部分。
解析顺序：内置默认值 ← 配置文件 ← --set 覆盖 ← 命令行专用参数，结果原样写入实验 manifest。
"""

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import yaml

from .confidence import MeasureConfig
from .decode import DecodeConfig
from .errors import ConfigError
from .model import ModelConfig
from .pipeline import PipelineSpec, default_output_dir
from .training import TrainingConfig

logger = logging.getLogger(__name__)

SECTIONS = ("model", "training", "decode", "confidence", "pipeline")
PIPELINE_DEFAULTS = {
    "train_source": None,
    "train_target": None,
    "target_monolingual": None,
    "source_monolingual": None,
    "test_sets": {},
    "run_name": "run",
    "generation": "search",
    "ratio": "1:1",
    "iterations": 1,
    "fine_tune": False,
    "seed": 1,
    "bpe_merges": 500,
    "joint_bpe": False,
    "max_mono_len": 64,
    "mono_limit": None,
    "eval_decode": DecodeConfig().to_dict(),
    "reverse_training": None,
    "threads": 1,
}


def default_config() -> Dict:
    """全部可配置项及其默认值"""
    model = ModelConfig(src_vocab_size=8, tgt_vocab_size=8).to_dict()
    del model["src_vocab_size"], model["tgt_vocab_size"]
    training = TrainingConfig(sentence_confidence=True, word_confidence=True).to_dict()
    pipeline = copy.deepcopy(PIPELINE_DEFAULTS)
    pipeline["output_dir"] = default_output_dir()
    return {
        "model": model,
        "training": training,
        "decode": DecodeConfig().to_dict(),
        "confidence": MeasureConfig().to_dict(),
        "pipeline": pipeline,
    }


def deep_merge(base: Dict, override: Dict) -> Dict:
    """递归合并两个字典，返回新字典（override 优先）"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and merged[key]:
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(text: str) -> Dict:
    """
    解析 "section.key=value"，value 按 YAML 标量解析（数字、布尔、null、列表）

    Raises:
        ConfigError: 格式错误
    """
    if "=" not in text:
        raise ConfigError(f"覆盖项格式应为 section.key=value，当前为 {text!r}")
    dotted, raw = text.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if len(keys) < 2:
        raise ConfigError(f"覆盖项需要指明所属部分，例如 training.max_steps=100，当前为 {text!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"无法解析覆盖值 {raw!r}: {exc}") from exc
    result: Dict = {}
    node = result
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value
    return result


def _check_sections(config: Dict, source: str):
    unknown = set(config) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{source} 中有未知的部分: {sorted(unknown)}（可选 {', '.join(SECTIONS)}）")
    for section, value in config.items():
        if value is not None and not isinstance(value, dict):
            raise ConfigError(f"{source} 中的 {section} 必须是映射")


def load_config_file(path: Union[str, Path]) -> Dict:
    """读取 YAML 配置文件，空文件视为空配置"""
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件 {path} 的顶层必须是映射")
    _check_sections(data, str(path))
    return {k: v or {} for k, v in data.items()}


def resolve_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                   extra: Optional[Dict] = None) -> Dict:
    """
    合并默认值、配置文件与命令行覆盖

    Args:
        path: YAML 配置文件（可选）
        overrides: --set 给出的 "section.key=value" 列表
        extra: 命令行专用参数换算出的覆盖（最高优先级）

    Returns:
        完整解析后的配置字典
    """
    resolved = default_config()
    if path is not None:
        resolved = deep_merge(resolved, load_config_file(path))
        logger.debug(f"已读取配置文件 {path}")
    for text in overrides:
        layer = parse_override(text)
        _check_sections(layer, f"--set {text}")
        resolved = deep_merge(resolved, layer)
    if extra:
        _check_sections(extra, "命令行参数")
        resolved = deep_merge(resolved, extra)
    return resolved


@dataclass
class RunConfig:
    """一次命令行调用：子命令、配置文件、覆盖项、主种子与解析结果"""
    command: str
    config_path: Optional[str] = None
    overrides: List[str] = field(default_factory=list)
    seed: Optional[int] = None
    extra: Dict = field(default_factory=dict)
    resolved: Dict = field(init=False)

    def __post_init__(self):
        extra = copy.deepcopy(self.extra)
        if self.seed is not None:
            for section, key in (("training", "seed"), ("decode", "seed"), ("pipeline", "seed")):
                extra.setdefault(section, {})[key] = self.seed
        self.resolved = resolve_config(self.config_path, self.overrides, extra)

    @property
    def master_seed(self) -> int:
        return int(self.resolved["pipeline"]["seed"])

    def model_config(self, src_vocab_size: int, tgt_vocab_size: int) -> ModelConfig:
        return ModelConfig.from_dict(dict(self.resolved["model"], src_vocab_size=src_vocab_size,
                                          tgt_vocab_size=tgt_vocab_size))

    def training_config(self) -> TrainingConfig:
        return TrainingConfig.from_dict(self.resolved["training"])

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig.from_dict(self.resolved["decode"])

    def measure_config(self) -> MeasureConfig:
        return MeasureConfig.from_dict(self.resolved["confidence"])

    def pipeline_spec(self) -> PipelineSpec:
        """
        由解析结果构造 PipelineSpec

        Raises:
            ConfigError: 缺少语料路径或字段非法
        """
        section = dict(self.resolved["pipeline"])
        missing = [k for k in ("train_source", "train_target", "target_monolingual") if not section.get(k)]
        if missing:
            raise ConfigError(f"pipeline 部分缺少语料路径: {missing}")
        return PipelineSpec.from_dict(dict(
            section,
            model=dict(self.resolved["model"]),
            training=dict(self.resolved["training"]),
            decode=dict(self.resolved["decode"]),
            measure=dict(self.resolved["confidence"]),
        ))

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)
