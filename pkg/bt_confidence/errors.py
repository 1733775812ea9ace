"""
异常定义模块

工具包内所有可预期的失败都从 BtConfidenceError 派生，CLI 据此输出单行错误信息
"""


class BtConfidenceError(Exception):
    """工具包异常基类"""


class ConfigError(BtConfidenceError, ValueError):
    """超参数非法或配置互相矛盾"""


class DimensionError(BtConfidenceError, ValueError):
    """张量形状不匹配"""


class VocabError(BtConfidenceError, ValueError):
    """词表外的 id 或超长序列"""


class DataError(BtConfidenceError, ValueError):
    """语料为空、文件未对齐、缺少置信度记录等数据问题"""


class CheckpointError(BtConfidenceError):
    """检查点版本或配置不匹配"""


class TrainingDivergedError(BtConfidenceError):
    """训练损失出现 NaN/Inf，携带最后一个正常的检查点"""

    def __init__(self, message: str, checkpoint=None, step: int = 0):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


class StageError(BtConfidenceError):
    """流水线某一阶段失败"""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
