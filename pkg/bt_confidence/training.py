"""
训练模块

最大似然训练，并在真实 + 合成混合语料上支持两种置信度用法：
    句级：每个合成句对的损失乘以句级置信度
    词级：词级置信度向量作为 c 调制所有以源端位置为键的注意力
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .data import BOS, EOS, Corpus, SentencePair, TextCodec, batch_by_tokens, pad_batch
from .errors import ConfigError, DataError, TrainingDivergedError
from .model import ModelCheckpoint, ModelConfig, TransformerParams, forward_batch, init_params, sentence_nll
from .numerics import AdamState, GradTape, InverseSqrtSchedule, RngStream, Tensor, adam_step

logger = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    """
    训练配方

    dropout 与 label_smoothing 在训练时覆盖模型配置中的同名字段，并随检查点保存。
    sentence_confidence / word_confidence 两个开关相互独立，四种组合都合法。
    """
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    lr_scale: float = 1.0
    warmup_steps: int = 200
    label_smoothing: float = 0.1
    dropout: float = 0.1
    batch_tokens: int = 1024
    max_steps: int = 2000
    max_epochs: Optional[int] = None
    seed: int = 1
    sentence_confidence: bool = False
    word_confidence: bool = False
    checkpoint_every: int = 0
    log_every: int = 50
    stop_loss: Optional[float] = None

    def __post_init__(self):
        if self.batch_tokens <= 0:
            raise ConfigError(f"batch_tokens 必须 > 0，当前为 {self.batch_tokens}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps 必须 ≥ 0，当前为 {self.max_steps}")
        if self.max_epochs is not None and self.max_epochs < 0:
            raise ConfigError(f"max_epochs 必须 ≥ 0，当前为 {self.max_epochs}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("dropout 与 label_smoothing 必须在 [0, 1) 内")
        if self.warmup_steps < 1 or self.lr_scale <= 0:
            raise ConfigError("warmup_steps 必须 ≥ 1，lr_scale 必须 > 0")

    @property
    def uses_confidence(self) -> bool:
        return self.sentence_confidence or self.word_confidence

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"TrainingConfig 中有未知字段: {sorted(unknown)}")
        return cls(**d)


@dataclass
class WeightedBatch:
    """
    补齐后的一个批次

    sentence_weights: 每个句对的权重，真实句对恰好为 1
    word_confidence: 可选的 (B, I) 词级置信度，真实句对为全 1，填充位置为 0
    """
    src_ids: np.ndarray
    tgt_in: np.ndarray
    gold: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    sentence_weights: np.ndarray
    word_confidence: Optional[np.ndarray] = None
    pair_ids: Tuple[int, ...] = ()

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def make_batch(pairs: Sequence[SentencePair], sentence_confidence: bool = False,
               word_confidence: bool = False) -> WeightedBatch:
    """
    构造批次：解码器输入为 [BOS] + y，金标准为 y + [EOS]

    Raises:
        DataError: 开启置信度时合成句对缺少置信度记录，或词级向量长度与源句不一致
    """
    if not pairs:
        raise DataError("无法由空句对列表构造批次")
    src_ids, src_mask = pad_batch([p.source for p in pairs])
    tgt_in, _ = pad_batch([[BOS] + list(p.target) for p in pairs])
    gold, tgt_mask = pad_batch([list(p.target) + [EOS] for p in pairs])

    weights = np.ones(len(pairs), dtype=np.float64)
    word = np.zeros(src_ids.shape, dtype=np.float64) if word_confidence else None
    for b, pair in enumerate(pairs):
        record = pair.confidence if pair.is_synthetic else None
        if pair.is_synthetic and (sentence_confidence or word_confidence) and record is None:
            raise DataError(f"合成句对 {pair.pair_id} 缺少置信度记录")
        if sentence_confidence and record is not None:
            weights[b] = record.sentence_confidence
        if word is not None:
            if record is None:
                word[b, :len(pair.source)] = 1.0
            else:
                if len(record.word_confidences) != len(pair.source):
                    raise DataError(f"句对 {pair.pair_id} 的词级置信度长度 {len(record.word_confidences)} "
                                    f"与源句长度 {len(pair.source)} 不一致")
                word[b, :len(pair.source)] = record.word_confidences
    return WeightedBatch(src_ids, tgt_in, gold, src_mask, tgt_mask, weights, word, tuple(p.pair_id for p in pairs))


def weighted_loss(batch: WeightedBatch, params: TransformerParams, config: ModelConfig,
                  rng: Optional[RngStream] = None, training: bool = False) -> Tensor:
    """
    置信度加权的标签平滑交叉熵

    每句的损失先乘以句级权重再求和，最后除以整个批次的非填充 token 数。
    所有权重为 1 且关闭词级置信度时与 smoothed_nll 完全相等。

    Raises:
        DataError: 权重超出 [0, 1]
    """
    w = np.asarray(batch.sentence_weights, dtype=np.float64)
    if np.any(w < 0.0) or np.any(w > 1.0) or not np.all(np.isfinite(w)):
        raise DataError(f"句级权重必须在 [0, 1] 内: {w.tolist()}")
    if batch.n_tokens == 0:
        raise DataError("批次中没有非填充 token")
    logprobs = forward_batch(params, config, batch.src_ids, batch.tgt_in, rng, training, batch.word_confidence)
    per_sentence = sentence_nll(logprobs, batch.gold, config.label_smoothing, batch.tgt_mask)
    return (per_sentence * w.astype(config.dtype)).sum() / float(batch.n_tokens)


# ---------------------------------------------------------------- 语料混合

def parse_ratio(ratio: Union[str, float, Tuple[float, float], Sequence[float]]) -> float:
    """把 "真实:合成" 比例解析为每个真实句对对应的合成句对数"""
    if isinstance(ratio, str):
        parts = ratio.split(":")
        if len(parts) != 2:
            raise ConfigError(f"比例格式应为 '真实:合成'，当前为 {ratio!r}")
        ratio = (float(parts[0]), float(parts[1]))
    if isinstance(ratio, (tuple, list)):
        authentic, synthetic = float(ratio[0]), float(ratio[1])
        if authentic <= 0 or synthetic < 0:
            raise ConfigError(f"比例中真实部分必须 > 0，合成部分必须 ≥ 0: {ratio}")
        return synthetic / authentic
    value = float(ratio)
    if value < 0:
        raise ConfigError(f"合成/真实比例必须 ≥ 0，当前为 {value}")
    return value


def mix_corpora(authentic: Corpus, synthetic: Corpus, ratio=1.0, seed: int = 0, epoch: int = 0,
                require_confidence: bool = False) -> Corpus:
    """
    按比例混合真实与合成语料（每个 epoch 重新洗牌）

    Args:
        ratio: 合成/真实比例，或 "真实:合成" 字符串、(真实, 合成) 元组
        seed: 洗牌种子
        epoch: 当前 epoch，决定洗牌的子流
        require_confidence: 为 True 时所有被选中的合成句对都必须带有置信度记录

    Returns:
        混合后的句对列表；合成部分为空时返回真实语料本身
    """
    per_authentic = parse_ratio(ratio)
    if not synthetic or per_authentic == 0.0:
        return list(authentic)
    rng = RngStream(seed, 7).substream(epoch)
    n_synthetic = len(synthetic) if not authentic else int(round(len(authentic) * per_authentic))
    order = rng.permutation(len(synthetic))
    if n_synthetic <= len(synthetic):
        chosen = [synthetic[i] for i in order[:n_synthetic]]
    else:
        extra = rng.integers(0, len(synthetic), size=n_synthetic - len(synthetic))
        chosen = [synthetic[i] for i in order] + [synthetic[i] for i in extra]
    if require_confidence:
        missing = [p.pair_id for p in chosen if p.confidence is None]
        if missing:
            raise DataError(f"{len(missing)} 个合成句对缺少置信度记录，例如 {missing[:3]}")
    mixed = list(authentic) + chosen
    return [mixed[i] for i in rng.permutation(len(mixed))]


# ---------------------------------------------------------------- 训练器

class Trainer:
    """
    Adam + 预热学习率的训练循环

    每一步的 dropout 随机流由 (seed, step) 决定，因此相同种子与数据顺序会得到逐位相同的检查点。
    """

    def __init__(self, model_config: ModelConfig, training_config: TrainingConfig,
                 src_codec: Optional[TextCodec] = None, tgt_codec: Optional[TextCodec] = None,
                 initial_params: Optional[TransformerParams] = None, progress: bool = True):
        self.config = dataclasses.replace(model_config, dropout=training_config.dropout,
                                          label_smoothing=training_config.label_smoothing)
        self.training_config = training_config
        self.src_codec = src_codec
        self.tgt_codec = tgt_codec
        self.progress = progress
        self.params = initial_params or init_params(self.config, RngStream(training_config.seed, 0))
        self.state = AdamState(beta1=training_config.beta1, beta2=training_config.beta2, eps=training_config.eps)
        self.schedule = InverseSqrtSchedule(self.config.d_model, training_config.warmup_steps,
                                            training_config.lr_scale)
        self.history: List[Dict] = []

    @property
    def step(self) -> int:
        return self.state.step

    def checkpoint(self, metadata: Optional[Dict] = None) -> ModelCheckpoint:
        meta = {"training": self.training_config.to_dict()}
        meta.update(metadata or {})
        return ModelCheckpoint(self.config, dict(self.params), self.src_codec, self.tgt_codec, self.step, meta)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["step", "epoch", "loss", "lr", "n_tokens", "n_pairs"])

    def save_log(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.history_frame().to_csv(path, index=False)

    def _filter(self, pairs: Corpus) -> Corpus:
        limit = self.config.max_len
        kept = [p for p in pairs if 0 < len(p.source) <= limit and len(p.target) <= limit]
        if len(kept) < len(pairs):
            logger.warning(f"跳过 {len(pairs) - len(kept)} 个空的或超过 max_len={limit} 的句对")
        return kept

    def train_step(self, batch: WeightedBatch) -> float:
        """
        执行一步更新并返回损失

        Raises:
            TrainingDivergedError: 损失或梯度出现 NaN/Inf，携带更新前的检查点
        """
        rng = RngStream(self.training_config.seed, 1).substream(self.step)
        with GradTape() as tape:
            loss = weighted_loss(batch, self.params, self.config, rng=rng, training=True)
            grads = tape.gradient(loss, self.params)
        value = loss.item()
        if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            logger.error(f"第 {self.step + 1} 步训练发散 (loss={value})，返回最后一个正常的检查点")
            raise TrainingDivergedError(f"训练在第 {self.step + 1} 步发散 (loss={value})",
                                        checkpoint=self.checkpoint({"diverged": True}), step=self.step)
        self.params = adam_step(self.params, grads, self.state, self.schedule)
        return value

    def fit(self, epoch_source: Callable[[int], Corpus],
            checkpoint_dir: Optional[Union[str, Path]] = None) -> ModelCheckpoint:
        """
        训练直到达到 max_steps / max_epochs（或 stop_loss）

        Args:
            epoch_source: 以 epoch 编号为参数、返回该 epoch 训练语料的函数
            checkpoint_dir: 若给出且 checkpoint_every > 0，定期保存检查点
        """
        tc = self.training_config
        epoch = 0
        bar = tqdm(total=tc.max_steps, desc="训练", disable=not self.progress)
        try:
            while self.step < tc.max_steps and (tc.max_epochs is None or epoch < tc.max_epochs):
                pairs = self._filter(epoch_source(epoch))
                if not pairs:
                    raise DataError("训练语料为空")
                batches = batch_by_tokens(pairs, tc.batch_tokens)
                order = RngStream(tc.seed, 2).substream(epoch).permutation(len(batches))
                epoch_losses = []
                for index in order:
                    if self.step >= tc.max_steps:
                        break
                    batch = make_batch(batches[index], tc.sentence_confidence, tc.word_confidence)
                    lr = self.schedule(self.step + 1)
                    loss = self.train_step(batch)
                    epoch_losses.append(loss)
                    self.history.append({"step": self.step, "epoch": epoch, "loss": loss, "lr": lr,
                                         "n_tokens": batch.n_tokens, "n_pairs": len(batch.pair_ids)})
                    bar.update(1)
                    if tc.log_every and self.step % tc.log_every == 0:
                        logger.info(f"step {self.step}: loss={loss:.4f}, lr={lr:.6f}")
                    if checkpoint_dir and tc.checkpoint_every and self.step % tc.checkpoint_every == 0:
                        self.checkpoint().save(Path(checkpoint_dir) / f"step_{self.step}.npz")
                epoch += 1
                mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
                logger.debug(f"epoch {epoch} 结束: 平均损失 {mean_loss:.4f}")
                if tc.stop_loss is not None and mean_loss < tc.stop_loss:
                    logger.info(f"平均损失 {mean_loss:.4f} 低于 {tc.stop_loss}，提前停止 (step {self.step})")
                    break
        finally:
            bar.close()
        final = self.history[-1]["loss"] if self.history else None
        logger.info(f"训练结束: {self.step} 步, {epoch} 个 epoch, 最后损失 {final}")
        return self.checkpoint({"final_loss": final})


def train_mle(corpus: Corpus, model_config: ModelConfig, training_config: TrainingConfig,
              src_codec: Optional[TextCodec] = None, tgt_codec: Optional[TextCodec] = None,
              initial_params: Optional[TransformerParams] = None, checkpoint_dir=None,
              log_path=None, progress: bool = True) -> ModelCheckpoint:
    """
    在固定语料上做最大似然训练

    Args:
        corpus: 训练句对（可以是已经混合好的真实 + 合成语料）
        initial_params: 微调时的初始参数，默认随机初始化

    Returns:
        最终的 ModelCheckpoint
    """
    if not corpus:
        raise DataError("训练语料为空")
    trainer = Trainer(model_config, training_config, src_codec, tgt_codec, initial_params, progress)
    checkpoint = trainer.fit(lambda epoch: corpus, checkpoint_dir)
    if log_path is not None:
        trainer.save_log(log_path)
    return checkpoint
