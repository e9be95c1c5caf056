# tamt/autodiff.py
"""反向模式自动微分：稠密 float64 张量 + 按前向过程记录的 Tape。

每次前向都在一个新的 ``Tape`` 上重新记录 (define-by-run)。没有激活的 Tape 时
算子只做前向计算，不记录任何节点，评估和有限差分检查都依赖这一点。
"""
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import ndtr

from tamt.errors import (DegenerateVectorError, DimensionError, EmptyLossError,
                         NumericError, TamtError)

LN_EPS = 1e-12
NORM_EPS = 1e-12

_local = threading.local()


# --- 张量 ---

class Tensor:
    def __init__(self, values, requires_grad=False):
        self.data = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'

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
        if isinstance(other, Tensor):
            raise TamtError('division is only defined by a constant')
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


# --- Tape ---

class Node:
    __slots__ = ('op', 'inputs', 'output', 'backward_fn')

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """按执行顺序记录的原语调用；输入总是先于输出出现。"""

    def __init__(self):
        self.nodes = []
        self._produced = set()

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(Node(op, inputs, output, backward_fn))
        self._produced.add(id(output))

    def produced(self, tensor):
        return id(tensor) in self._produced

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False


def _stack():
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def current_tape():
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _emit(op, data, inputs, backward_fn):
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss, tape):
    """把 d(loss)/d(leaf) 累加进每个 requires_grad 叶子的 ``grad``。"""
    if loss.size != 1:
        raise DimensionError(f'backward needs a scalar loss, got shape {loss.shape}')
    if not tape.produced(loss):
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise TamtError('loss was not recorded on the given tape')

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if tape.produced(inp):
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi
            else:
                _accumulate(inp, gi)


def _accumulate(leaf, g):
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64).reshape(leaf.shape)
    else:
        leaf.grad = leaf.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- 逐元素运算 ---

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit('add', a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit('sub', a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit('mul', a.data * b.data, (a, b), _back)


def tensor_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit('sum', np.asarray(out, dtype=np.float64), (a,), _back)


def tensor_mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape):
    return _emit('reshape', a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit('transpose', a.data.transpose(axes), (a,),
                 lambda g: (g.transpose(inverse),))


def index(a, key):
    def _back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _emit('index', np.array(a.data[key], dtype=np.float64), (a,), _back)


def take_rows(weight, ids):
    """按 id 取 ``weight`` 的行 (词嵌入查表)，反向时按行散加。"""
    ids = np.asarray(ids, dtype=np.int64)

    def _back(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _emit('take_rows', weight.data[ids], (weight,), _back)


# --- 矩阵乘法 ---

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f'matmul shape mismatch: {a.shape} vs {b.shape}')

    def _back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit('matmul', np.matmul(a.data, b.data), (a, b), _back)


# --- 非线性 ---

def softmax_rows(x):
    """沿最后一维做 softmax，先减去行最大值。"""
    if np.isnan(x.data).any():
        raise NumericError('softmax input contains NaN')
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit('softmax', y, (x,), _back)


def gelu(x):
    """x·Φ(x)，Φ 为精确的标准正态分布函数。"""
    cdf = ndtr(x.data)
    pdf = np.exp(-0.5 * x.data ** 2) / np.sqrt(2.0 * np.pi)
    return _emit('gelu', x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def layer_norm(x, gain, bias, eps=LN_EPS):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f'layer_norm size mismatch: input {x.shape}, gain {gain.shape}, bias {bias.shape}')
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def _back(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv_std * (gx_hat
                        - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _emit('layer_norm', xhat * gain.data + bias.data, (x, gain, bias), _back)


def dropout(x, p, rng):
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit('dropout', x.data * keep, (x,), lambda g: (g * keep,))


# --- 损失 ---

def cross_entropy(logits, targets, ignore_index=-100):
    """对未忽略位置取负对数 softmax 概率的平均值。"""
    if logits.ndim != 2:
        raise DimensionError(f'cross_entropy expects n x V logits, got {logits.shape}')
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f'cross_entropy: {n} rows vs {targets.shape[0]} targets')
    valid = targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise EmptyLossError('cross_entropy: every position is ignored')
    picked = targets[valid]
    if picked.min() < 0 or picked.max() >= vocab:
        raise DimensionError(f'cross_entropy: target outside [0, {vocab})')

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    rows = np.nonzero(valid)[0]
    loss = -log_p[rows, picked].sum() / count

    def _back(g):
        grad = np.exp(log_p)
        grad[rows, picked] -= 1.0
        grad[~valid] = 0.0
        return (grad * (g / count),)

    return _emit('cross_entropy', np.asarray(loss), (logits,), _back)


def mse(pred, target):
    diff = pred - as_tensor(target)
    return (diff * diff).mean()


def cosine_rows(a, b, eps=NORM_EPS):
    """逐行余弦相似度，输入 n×d，输出长度 n。"""
    if a.shape != b.shape:
        raise DimensionError(f'cosine shape mismatch: {a.shape} vs {b.shape}')
    na = np.sqrt((a.data ** 2).sum(axis=-1))
    nb = np.sqrt((b.data ** 2).sum(axis=-1))
    if (na < eps).any() or (nb < eps).any():
        raise DegenerateVectorError(f'cosine: vector norm below {eps:g}')
    dot = (a.data * b.data).sum(axis=-1)
    cos = dot / (na * nb)

    def _back(g):
        g = g[..., None]
        c = cos[..., None]
        ga = g * (b.data / (na * nb)[..., None] - c * a.data / (na ** 2)[..., None])
        gb = g * (a.data / (na * nb)[..., None] - c * b.data / (nb ** 2)[..., None])
        return ga, gb

    return _emit('cosine', cos, (a, b), _back)


def cosine(a, b, eps=NORM_EPS):
    if a.ndim != 1:
        raise DimensionError(f'cosine expects vectors, got {a.shape}')
    d = a.shape[0]
    return reshape(cosine_rows(reshape(a, (1, d)), reshape(b, (1, d)), eps), ())


# --- 有限差分检查 ---

def grad_check(f, x, h=1e-5, max_entries=None, seed=0):
    """解析梯度与中心差分之间的最大相对误差。

    ``f`` 接收 ``x`` 返回标量张量。``x`` 可以是模型内部的参数张量，此时 ``f``
    直接读取模型即可；检查期间原地扰动 ``x.data`` 并在之后恢复。
    """
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    backward(y, tape)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    x.requires_grad, x.grad = saved_flag, saved_grad

    if not x.data.flags['C_CONTIGUOUS']:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    entries = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        entries = np.sort(np.random.default_rng(seed).choice(flat.size, max_entries, replace=False))

    worst = 0.0
    analytic = analytic.reshape(-1)
    with no_grad():
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
