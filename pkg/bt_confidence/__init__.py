"""
bt_confidence: 基于模型不确定性的回译置信度工具包

numpy 上的自动微分与 Transformer、MC Dropout 置信度度量、置信度加权训练与回译流水线。
"""

from .confidence import ConfidenceRecord, MeasureConfig, MeasureKind, score_corpus
from .data import BpeModel, SentencePair, TextCodec, Vocab, apply_bpe, learn_bpe, undo_bpe
from .decode import DecodeConfig, DecodeMode, beam_decode, greedy_decode, sample_decode
from .errors import (BtConfidenceError, CheckpointError, ConfigError, DataError, DimensionError, StageError,
                     TrainingDivergedError, VocabError)
from .evaluation import bleu, paired_bootstrap
from .model import ModelCheckpoint, ModelConfig
from .pipeline import ExperimentManifest, PipelineSpec, generate_synthetic, run_back_translation
from .training import TrainingConfig, train_mle

__version__ = "0.1.0"
