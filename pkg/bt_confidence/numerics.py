"""
数值计算模块

基于 numpy 的稠密张量、反向模式自动微分、可复现的随机 dropout 以及 Adam 优化器。
模型、解码、不确定性估计和训练都在这一层之上计算。
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1

_local = threading.local()


def _tape_stack() -> List["GradTape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["GradTape"]:
    """返回当前线程上处于活动状态的求导带（没有则为 None）"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    不可变的稠密张量

    data 为按行优先存储的 numpy 数组；参数张量 requires_grad=True，
    在活动求导带上由它们计算出的结果会被记录下来用于反向传播。
    """

    __slots__ = ("data", "requires_grad", "name", "_inputs", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._inputs: Tuple["Tensor", ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


TensorLike = Union[Tensor, np.ndarray, float, int]


def _lift(x: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    """把常量包装成张量；常量沿用 like 的精度，避免 float32 被提升为 float64"""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _binary_operands(a: TensorLike, b: TensorLike) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _lift(a, like), _lift(b, like)


def _record(data: np.ndarray, inputs: Tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._vjp = vjp
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原始形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"轴 {axis} 超出 {ndim} 维张量的范围")
    return axis % ndim


# ---------------------------------------------------------------- 基本算子

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _binary_operands(a, b)

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(a.data / b.data, (a, b), vjp)


def neg(x: Tensor) -> Tensor:
    return _record(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _record(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _record(np.where(active, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * active,))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """
    矩阵乘法（支持批量维度广播）

    Raises:
        DimensionError: 内维不一致时，错误信息中包含两个形状
    """
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul 维度不匹配: {a.shape} × {b.shape}")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.matmul(a.data, b.data), (a, b), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(sorted(_normalize_axis(a, x.ndim) for a in axes))
            for a in axes:
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[_normalize_axis(a, x.ndim)] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _check_reduction_axis(x: Tensor, axis: int) -> int:
    axis = _normalize_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise DimensionError(f"在空轴 {axis} 上做归一化: shape={x.shape}")
    return axis


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """沿 axis 的 softmax，先减去最大值保证数值稳定"""
    axis = _check_reduction_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_reduction_axis(x, axis)
    out = x.data - logsumexp(x.data, axis=axis, keepdims=True)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out.astype(x.dtype), (x,), vjp)


def gather_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """按最后一维取出 ids 指定的元素，例如从 (B, J, V) 的对数概率中取出金标准词"""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise DimensionError(f"gather_last 索引形状 {ids.shape} 与 {x.shape} 不匹配")
    out = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, ids[..., None], np.asarray(g)[..., None], axis=-1)
        return (full,)

    return _record(out, (x,), vjp)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """词向量查表；梯度按 id 累加回权重矩阵"""
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _record(weight.data[ids], (weight,), vjp)


def dropout(x: Tensor, rate: float, rng: Optional["RngStream"], training: bool) -> Tensor:
    """
    反向缩放的 dropout

    训练时每个元素以 rate 的概率置零，保留的元素乘以 1/(1-rate)；
    推理时原样返回，因此 MC 采样时不需要再做缩放。

    Raises:
        ConfigError: rate 不在 [0, 1) 内
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout 比例必须在 [0, 1) 内，当前为 {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("训练模式下的 dropout 需要 RngStream")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------- 求导带

class GradTape:
    """
    求导带：按创建顺序记录原始算子

    创建顺序本身就是一个拓扑序，反向传播按逆序遍历，每个节点恰好访问一次。
    """

    def __init__(self):
        self._nodes: List[Tensor] = []
        self._ids: set = set()

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, node: Tensor):
        self._nodes.append(node)
        self._ids.add(id(node))

    def gradient(self, loss: Tensor, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
        """
        从标量损失反向传播

        Args:
            loss: 记录在本求导带上的标量张量
            params: 参数名到参数张量的映射

        Returns:
            每个参数的梯度；不在计算路径上的参数梯度为零，
            损失与所有参数都无关（不在求导带上）时全部为零

        Raises:
            DimensionError: loss 不是标量
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward 需要标量损失，当前形状为 {loss.shape}")
        if id(loss) not in self._ids:
            logger.warning("损失不依赖任何被记录的参数，梯度全部为 0")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for inp, gi in zip(node._inputs, node._vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi

        result = {}
        for name, p in params.items():
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise DimensionError(f"参数 {name} 的梯度形状 {g.shape} 与参数形状 {p.shape} 不一致")
            result[name] = np.asarray(g, dtype=p.dtype)
        return result


def backward(loss: Tensor, params: Dict[str, Tensor], tape: Optional[GradTape] = None) -> Dict[str, np.ndarray]:
    """在给定（默认当前活动的）求导带上计算梯度"""
    tape = tape or active_tape()
    if tape is None:
        raise ConfigError("没有活动的求导带，请在 `with GradTape()` 中计算损失")
    return tape.gradient(loss, params)


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                       indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """
    中心差分数值梯度，仅用于梯度校验

    会临时修改 param.data，结束后恢复原值。indices 为 None 时遍历全部元素，
    否则只计算给定坐标（其余位置为 0）。
    """
    grad = np.zeros_like(param.data)
    coords = indices if indices is not None else list(np.ndindex(*param.shape))
    for idx in coords:
        orig = param.data[idx]
        param.data[idx] = orig + h
        f_plus = fn().item()
        param.data[idx] = orig - h
        f_minus = fn().item()
        param.data[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


# ---------------------------------------------------------------- 随机数

class RngStream:
    """
    基于计数器的随机数流（Philox）

    相同的 (seed, stream_id) 产生相同的序列；substream 派生出独立的子流，
    因此 K 次 MC 前向可以按任意顺序甚至并行计算而结果一致。
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        key = self.seed | (self.stream_id << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def substream(self, *keys: int) -> "RngStream":
        entropy = [self.seed, self.stream_id] + [int(k) & MASK64 for k in keys]
        child = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
        return RngStream(self.seed, int(child))

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self) -> float:
        return float(self._gen.random())

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------- 优化器

@dataclass
class AdamState:
    """Adam 优化器状态：一阶/二阶矩估计与步数"""
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class InverseSqrtSchedule:
    """
    线性预热 + 平方根倒数衰减的学习率

    lr(step) = scale · D^-0.5 · min(step^-0.5, step · warmup^-1.5)，在 step = warmup 时达到峰值。
    """
    d_model: int
    warmup_steps: int = 200
    scale: float = 1.0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps 必须 ≥ 1，当前为 {self.warmup_steps}")

    def __call__(self, step: int) -> float:
        step = max(int(step), 1)
        return self.scale * self.d_model ** -0.5 * min(step ** -0.5, step * self.warmup_steps ** -1.5)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState,
              lr_schedule: Callable[[int], float]) -> Dict[str, Tensor]:
    """
    执行一步带偏差校正的 Adam 更新

    Args:
        params: 当前参数
        grads: 与参数同名同形状的梯度（缺失的按零处理）
        state: 优化器状态，步数加 1
        lr_schedule: 以步数为参数的学习率函数

    Returns:
        更新后的新参数张量（原张量保持不变）
    """
    state.step += 1
    t = state.step
    lr = lr_schedule(t)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"参数 {name} 形状 {p.shape} 与梯度形状 {g.shape} 不一致")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / c1
        v_hat = v / c2
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated[name] = Tensor(new.astype(p.dtype), requires_grad=True, name=name)
    return updated


if __name__ == "__main__":
    w = Tensor([1.0, 2.0], requires_grad=True, name="w")
    with GradTape() as tape:
        loss = (w * w).sum()
        grads = tape.gradient(loss, {"w": w})
    print("loss =", loss.item(), "grad =", grads["w"])
    schedule = InverseSqrtSchedule(d_model=64, warmup_steps=200)
    print("lr@1 = %.6f, lr@200 = %.6f, lr@2000 = %.6f" % (schedule(1), schedule(200), schedule(2000)))
    print("softmax([0, ln 3]) =", softmax(Tensor([0.0, math.log(3.0)])).data)
