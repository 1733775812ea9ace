"""
Transformer 编码器-解码器模型

缩小版的 Transformer，注意力支持可选的词级置信度向量 c：
先计算 softmax(QKᵀ/√D)，再把每一行注意力权重与 c 逐元素相乘（广播到所有查询行），
默认不重新归一化。
"""

import dataclasses
import functools
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numerics as nx
from .data import BOS, PAD, TextCodec
from .errors import CheckpointError, ConfigError, DimensionError, VocabError
from .numerics import RngStream, Tensor

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
CHECKPOINT_FORMAT = "bt-confidence-checkpoint"
CHECKPOINT_VERSION = 1
CONFIDENCE_SITES = ("encoder", "cross")
NEG_INF = -1e9
LN_EPS = 1e-6

TransformerParams = Dict[str, Tensor]


@dataclass
class ModelConfig:
    """模型结构与正则化超参数"""
    src_vocab_size: int
    tgt_vocab_size: int
    d_model: int = 64
    d_ff: int = 128
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    label_smoothing: float = 0.1
    max_len: int = 64
    share_embeddings: bool = False
    confidence_sites: Tuple[str, ...] = CONFIDENCE_SITES
    renormalize_confidence: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        self.confidence_sites = tuple(self.confidence_sites)
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} 不能被 n_heads={self.n_heads} 整除")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout 必须在 [0, 1) 内，当前为 {self.dropout}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing 必须在 [0, 1) 内，当前为 {self.label_smoothing}")
        if min(self.src_vocab_size, self.tgt_vocab_size) < 5:
            raise ConfigError("词表至少需要保留符号之外的一个 token")
        if min(self.n_layers, self.d_ff, self.max_len) < 1:
            raise ConfigError("n_layers、d_ff、max_len 必须为正")
        unknown = set(self.confidence_sites) - set(CONFIDENCE_SITES)
        if unknown:
            raise ConfigError(f"未知的置信度作用位置: {sorted(unknown)}")
        if self.share_embeddings and self.src_vocab_size != self.tgt_vocab_size:
            raise ConfigError("共享词向量要求源端与目标端词表大小相同（请使用联合 BPE）")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"不支持的精度 {self.dtype}")

    def to_dict(self) -> Dict:
        d = dataclasses.asdict(self)
        d["confidence_sites"] = list(self.confidence_sites)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"ModelConfig 中有未知字段: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- 参数初始化

def _param_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    D, F = config.d_model, config.d_ff
    shapes = [("src_embed", (config.src_vocab_size, D))]
    if not config.share_embeddings:
        shapes.append(("tgt_embed", (config.tgt_vocab_size, D)))

    def attn(prefix):
        return [(f"{prefix}.{w}", (D, D)) for w in ("wq", "wk", "wv", "wo")]

    def norm(prefix):
        return [(f"{prefix}.gain", (D,)), (f"{prefix}.bias", (D,))]

    def ff(prefix):
        return [(f"{prefix}.w1", (D, F)), (f"{prefix}.b1", (F,)), (f"{prefix}.w2", (F, D)), (f"{prefix}.b2", (D,))]

    for l in range(config.n_layers):
        p = f"enc.{l}"
        shapes += norm(f"{p}.ln1") + attn(f"{p}.self") + norm(f"{p}.ln2") + ff(f"{p}.ff")
    shapes += norm("enc.ln")
    for l in range(config.n_layers):
        p = f"dec.{l}"
        shapes += (norm(f"{p}.ln1") + attn(f"{p}.self") + norm(f"{p}.ln2") + attn(f"{p}.cross")
                   + norm(f"{p}.ln3") + ff(f"{p}.ff"))
    shapes += norm("dec.ln")
    shapes += [("out.w", (D, config.tgt_vocab_size)), ("out.b", (config.tgt_vocab_size,))]
    return shapes


def init_params(config: ModelConfig, rng: RngStream) -> TransformerParams:
    """
    初始化模型参数

    词向量 ~ N(0, D^-1/2)，矩阵用 Xavier 均匀分布，偏置为 0，层归一化增益为 1。
    """
    params = {}
    dtype = np.dtype(config.dtype)
    for name, shape in _param_shapes(config):
        if name.endswith("_embed"):
            data = rng.normal(shape, scale=config.d_model ** -0.5)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = (rng.random(shape) * 2.0 - 1.0) * limit
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


@functools.lru_cache(maxsize=8)
def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    """正弦位置编码"""
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


# ---------------------------------------------------------------- 注意力

def attention_weights(Q: Tensor, K: Tensor, c: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None,
                      renormalize: bool = False) -> Tensor:
    """
    计算（经置信度调制的）注意力权重

    Args:
        Q: (..., Tq, D) 查询
        K: (..., Tk, D) 键
        c: 可选的词级置信度，最后一维长度必须等于键的个数，按行广播相乘
        bias: 加到打分上的掩码常量（-1e9 表示屏蔽）
        renormalize: 调制后是否按行重新归一化（默认否）

    Raises:
        DimensionError: c 的长度与键的个数不一致
    """
    if c is not None:
        c = np.asarray(c, dtype=Q.dtype)
        if c.ndim == 0 or c.shape[-1] != K.shape[-2]:
            raise DimensionError(f"置信度向量长度 {c.shape} 与键的个数 {K.shape[-2]} 不一致")
    d = Q.shape[-1]
    scores = nx.matmul(Q, nx.swap_last(K)) * (1.0 / np.sqrt(d))
    if bias is not None:
        scores = scores + bias
    weights = nx.softmax(scores, axis=-1)
    if c is not None:
        weights = weights * Tensor(c)
        if renormalize:
            weights = weights / (weights.sum(axis=-1, keepdims=True) + 1e-12)
    return weights


def attention(Q: Tensor, K: Tensor, V: Tensor, c: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None,
              renormalize: bool = False) -> Tensor:
    """缩放点积注意力，c 存在时对注意力权重做广播乘积（见 attention_weights）"""
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"键 {K.shape} 与值 {V.shape} 的行数不一致")
    return nx.matmul(attention_weights(Q, K, c, bias, renormalize), V)


def _layer_norm(params: TransformerParams, prefix: str, x: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + LN_EPS) ** -0.5 * params[f"{prefix}.gain"] + params[f"{prefix}.bias"]


def _feed_forward(params: TransformerParams, prefix: str, x: Tensor) -> Tensor:
    h = nx.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _multi_head(params: TransformerParams, prefix: str, x_q: Tensor, x_kv: Tensor, config: ModelConfig,
                bias: Optional[np.ndarray], confidence: Optional[np.ndarray]) -> Tensor:
    B, Tq, D = x_q.shape
    Tk = x_kv.shape[1]
    H = config.n_heads
    dk = D // H
    q = (x_q @ params[f"{prefix}.wq"]).reshape(B, Tq, H, dk).transpose(0, 2, 1, 3)
    k = (x_kv @ params[f"{prefix}.wk"]).reshape(B, Tk, H, dk).transpose(0, 2, 1, 3)
    v = (x_kv @ params[f"{prefix}.wv"]).reshape(B, Tk, H, dk).transpose(0, 2, 1, 3)
    c = None if confidence is None else confidence[:, None, None, :]
    ctx = attention(q, k, v, c=c, bias=bias, renormalize=config.renormalize_confidence)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Tq, D)
    return ctx @ params[f"{prefix}.wo"]


def _drop(x: Tensor, config: ModelConfig, rng: Optional[RngStream], training: bool) -> Tensor:
    return nx.dropout(x, config.dropout, rng, training)


def _embed(params: TransformerParams, name: str, ids: np.ndarray, config: ModelConfig) -> Tensor:
    T = ids.shape[1]
    pe = positional_encoding(config.max_len + 1, config.d_model)[:T].astype(config.dtype)
    return nx.embedding(params[name], ids) * float(np.sqrt(config.d_model)) + pe


# ---------------------------------------------------------------- 前向计算

def _check_ids(ids: np.ndarray, vocab_size: int, max_len: int, side: str):
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise VocabError(f"{side} 中存在词表外的 id（词表大小 {vocab_size}）")
    if ids.shape[1] > max_len:
        raise VocabError(f"{side} 长度 {ids.shape[1]} 超过 max_len={max_len}")


def encode(params: TransformerParams, config: ModelConfig, src_ids: np.ndarray,
           rng: Optional[RngStream] = None, training: bool = False,
           confidence: Optional[np.ndarray] = None) -> Tensor:
    """
    编码器前向

    Args:
        src_ids: (B, I) 源端 id，右侧用 PAD 补齐
        confidence: 可选 (B, I) 词级置信度；作用于编码器自注意力（若在 confidence_sites 中）

    Returns:
        (B, I, D) 的编码器输出
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    _check_ids(src_ids, config.src_vocab_size, config.max_len, "源端序列")
    bias = np.where(src_ids != PAD, 0.0, NEG_INF)[:, None, None, :].astype(config.dtype)
    c = confidence if "encoder" in config.confidence_sites else None
    x = _drop(_embed(params, "src_embed", src_ids, config), config, rng, training)
    for l in range(config.n_layers):
        p = f"enc.{l}"
        h = _layer_norm(params, f"{p}.ln1", x)
        x = x + _drop(_multi_head(params, f"{p}.self", h, h, config, bias, c), config, rng, training)
        h = _layer_norm(params, f"{p}.ln2", x)
        x = x + _drop(_feed_forward(params, f"{p}.ff", h), config, rng, training)
    return _layer_norm(params, "enc.ln", x)


def decode(params: TransformerParams, config: ModelConfig, memory: Tensor, src_ids: np.ndarray,
           tgt_in: np.ndarray, rng: Optional[RngStream] = None, training: bool = False,
           confidence: Optional[np.ndarray] = None) -> Tensor:
    """
    解码器前向（teacher forcing）

    Args:
        memory: 编码器输出 (B, I, D)
        src_ids: 源端 id，用于构造源端掩码
        tgt_in: (B, J) 以 BOS 开头的解码器输入

    Returns:
        (B, J, V) 每个位置的下一个词的对数概率
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    tgt_in = np.asarray(tgt_in, dtype=np.int64)
    _check_ids(tgt_in, config.tgt_vocab_size, config.max_len + 1, "目标端序列")
    J = tgt_in.shape[1]
    causal = (np.triu(np.ones((J, J)), k=1) * NEG_INF)[None, None].astype(config.dtype)
    src_bias = np.where(src_ids != PAD, 0.0, NEG_INF)[:, None, None, :].astype(config.dtype)
    c = confidence if "cross" in config.confidence_sites else None
    embed_name = "src_embed" if config.share_embeddings else "tgt_embed"
    y = _drop(_embed(params, embed_name, tgt_in, config), config, rng, training)
    for l in range(config.n_layers):
        p = f"dec.{l}"
        h = _layer_norm(params, f"{p}.ln1", y)
        y = y + _drop(_multi_head(params, f"{p}.self", h, h, config, causal, None), config, rng, training)
        h = _layer_norm(params, f"{p}.ln2", y)
        y = y + _drop(_multi_head(params, f"{p}.cross", h, memory, config, src_bias, c), config, rng, training)
        h = _layer_norm(params, f"{p}.ln3", y)
        y = y + _drop(_feed_forward(params, f"{p}.ff", h), config, rng, training)
    y = _layer_norm(params, "dec.ln", y)
    return nx.log_softmax(y @ params["out.w"] + params["out.b"], axis=-1)


def forward_batch(params: TransformerParams, config: ModelConfig, src_ids: np.ndarray, tgt_in: np.ndarray,
                  rng: Optional[RngStream] = None, training: bool = False,
                  confidence: Optional[np.ndarray] = None) -> Tensor:
    """批量前向：返回 (B, J, V) 对数概率"""
    if confidence is not None:
        confidence = np.asarray(confidence, dtype=config.dtype)
        if confidence.shape != np.shape(src_ids):
            raise DimensionError(f"置信度矩阵形状 {confidence.shape} 与源端 {np.shape(src_ids)} 不一致")
    memory = encode(params, config, src_ids, rng, training, confidence)
    return decode(params, config, memory, src_ids, tgt_in, rng, training, confidence)


def forward_logprobs(src: Sequence[int], tgt: Sequence[int], params: TransformerParams, config: ModelConfig,
                     rng: Optional[RngStream] = None, training: bool = False,
                     confidence: Optional[Sequence[float]] = None) -> Tensor:
    """
    单句 teacher forcing 前向，返回 tgt 中每个 token 的 log P(token_j | 前缀, 源句)

    解码器输入为 [BOS] + tgt[:-1]，若要计入结束符，调用方应把 EOS 放在 tgt 末尾。

    Raises:
        VocabError: 空序列、词表外 id 或超长序列
        DimensionError: 置信度向量长度与源句不一致
    """
    if len(src) == 0 or len(tgt) == 0:
        raise VocabError("源端与目标端序列都不能为空")
    if len(tgt) > config.max_len + 1:
        raise VocabError(f"目标端长度 {len(tgt)} 超过 max_len={config.max_len}")
    src_ids = np.asarray([list(src)], dtype=np.int64)
    gold = np.asarray([list(tgt)], dtype=np.int64)
    tgt_in = np.concatenate([[[BOS]], gold[:, :-1]], axis=1)
    c = None
    if confidence is not None:
        c = np.asarray([list(confidence)], dtype=config.dtype)
        if c.shape != src_ids.shape:
            raise DimensionError(f"置信度向量长度 {c.shape[1]} 与源句长度 {src_ids.shape[1]} 不一致")
        if c.min() < 0.0 or c.max() > 1.0:
            raise ConfigError("置信度向量的取值必须在 [0, 1] 内")
    _check_ids(gold, config.tgt_vocab_size, config.max_len + 1, "目标端序列")
    logprobs = forward_batch(params, config, src_ids, tgt_in, rng, training, c)
    return nx.gather_last(logprobs, gold).reshape(len(tgt))


# ---------------------------------------------------------------- 损失

def smoothed_targets(gold: np.ndarray, vocab_size: int, eps: float, dtype=np.float64) -> np.ndarray:
    """(1-ε)·onehot + ε/V 的平滑目标分布"""
    q = np.full(gold.shape + (vocab_size,), eps / vocab_size, dtype=dtype)
    np.put_along_axis(q, gold[..., None], 1.0 - eps + eps / vocab_size, axis=-1)
    return q


def sentence_nll(logprobs: Tensor, gold: np.ndarray, eps: float, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    逐句的标签平滑交叉熵之和

    Args:
        logprobs: (B, J, V) 对数概率
        gold: (B, J) 金标准 id
        eps: 标签平滑系数 ε_ls
        mask: (B, J) 非填充位置

    Returns:
        (B,) 每句的 token 损失之和
    """
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"label_smoothing 必须在 [0, 1) 内，当前为 {eps}")
    gold = np.asarray(gold, dtype=np.int64)
    if gold.shape != logprobs.shape[:-1]:
        raise DimensionError(f"金标准形状 {gold.shape} 与对数概率形状 {logprobs.shape} 不一致")
    q = smoothed_targets(gold, logprobs.shape[-1], eps, logprobs.dtype)
    if mask is not None:
        q = q * np.asarray(mask, dtype=logprobs.dtype)[..., None]
    token_loss = -(logprobs * q).sum(axis=-1)
    return token_loss.sum(axis=-1)


def smoothed_nll(logprobs: Tensor, gold: np.ndarray, eps: float, mask: Optional[np.ndarray] = None) -> Tensor:
    """按非填充 token 数取平均的标签平滑交叉熵；接受 (J, V) 或 (B, J, V)"""
    gold = np.asarray(gold, dtype=np.int64)
    if logprobs.ndim == 2:
        logprobs = logprobs.reshape(1, *logprobs.shape)
        gold = gold[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if mask is None:
        mask = np.ones(gold.shape, dtype=bool)
    n_tokens = float(np.asarray(mask).sum())
    return sentence_nll(logprobs, gold, eps, mask).sum() / n_tokens


# ---------------------------------------------------------------- 检查点

@dataclass
class ModelCheckpoint:
    """带版本号的模型检查点：配置、参数、两侧文本编解码器"""
    config: ModelConfig
    params: TransformerParams
    src_codec: Optional[TextCodec] = None
    tgt_codec: Optional[TextCodec] = None
    step: int = 0
    metadata: Dict = field(default_factory=dict)

    def content_hash(self) -> str:
        """参数内容与配置的哈希（与文件的打包细节无关）"""
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8"))
        for name in sorted(self.params):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def vocab_hashes(self) -> Dict[str, Optional[str]]:
        return {
            "src": self.src_codec.vocab.content_hash() if self.src_codec else None,
            "tgt": self.tgt_codec.vocab.content_hash() if self.tgt_codec else None,
        }

    def save(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "format_version": CHECKPOINT_VERSION,
            "config_version": CONFIG_VERSION,
            "config": self.config.to_dict(),
            "step": self.step,
            "vocab_hashes": self.vocab_hashes(),
            "src_codec": self.src_codec.to_dict() if self.src_codec else None,
            "tgt_codec": self.tgt_codec.to_dict() if self.tgt_codec else None,
            "metadata": self.metadata,
        }
        arrays = {f"param/{name}": t.data for name, t in self.params.items()}
        with open(path, "wb") as f:
            np.savez(f, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        logger.info(f"检查点已保存至: {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelCheckpoint":
        """
        读取检查点

        Raises:
            CheckpointError: 格式、版本或词表哈希不匹配
        """
        with np.load(path, allow_pickle=False) as archive:
            if "__meta__" not in archive.files:
                raise CheckpointError(f"{path} 不是本工具包的检查点")
            meta = json.loads(str(archive["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT or meta.get("format_version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"检查点格式版本不匹配: {meta.get('format')}/{meta.get('format_version')}")
            if meta.get("config_version") != CONFIG_VERSION:
                raise CheckpointError(f"配置版本 {meta.get('config_version')} 与当前版本 {CONFIG_VERSION} 不一致")
            config = ModelConfig.from_dict(meta["config"])
            params = {
                key[len("param/"):]: Tensor(archive[key].copy(), requires_grad=True, name=key[len("param/"):])
                for key in archive.files if key.startswith("param/")
            }
        expected = {name for name, _ in _param_shapes(config)}
        if set(params) != expected:
            raise CheckpointError(f"检查点参数与配置不符: 缺少 {sorted(expected - set(params))[:3]}")
        src_codec = TextCodec.from_dict(meta["src_codec"]) if meta.get("src_codec") else None
        tgt_codec = TextCodec.from_dict(meta["tgt_codec"]) if meta.get("tgt_codec") else None
        ckpt = cls(config, params, src_codec, tgt_codec, meta.get("step", 0), meta.get("metadata", {}))
        for side, stored in (meta.get("vocab_hashes") or {}).items():
            if stored is not None and ckpt.vocab_hashes()[side] != stored:
                raise CheckpointError(f"{side} 词表哈希不一致")
        return ckpt


if __name__ == "__main__":
    cfg = ModelConfig(src_vocab_size=12, tgt_vocab_size=12, d_model=16, d_ff=32, n_layers=1, n_heads=2)
    params = init_params(cfg, RngStream(0))
    lp = forward_logprobs([4, 5, 6], [7, 8, 2], params, cfg)
    print("log P =", lp.data, "句子对数概率 =", lp.data.sum())
