# tamt/masking.py
"""权重上的二值掩码：二值化、直通估计更新、稀疏度控制、OMP/随机掩码与 Jaccard。"""
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from tamt.autodiff import Tensor
from tamt.errors import CheckpointFormatError, DimensionError, InvalidArgumentError

MASK_MAGIC = b'TAMK'
MASK_FORMAT_VERSION = 1

DEFAULT_ALPHA = 2.0
DEFAULT_THRESHOLD = 0.01


# --- 稀疏度目标 ---

def kept_count(size, sparsity):
    """k = round((1-S)·size)，0.5 向上取整，且至少保留 1 个。"""
    return max(1, int(np.floor((1.0 - sparsity) * size + 0.5)))


@dataclass(frozen=True)
class SparsityTarget:
    sparsity: float
    scope: str = 'local'

    def __post_init__(self):
        if not 0.0 <= self.sparsity < 1.0:
            raise InvalidArgumentError(f'sparsity must lie in [0, 1), got {self.sparsity}')
        if self.scope != 'local':
            raise InvalidArgumentError(f'unsupported sparsity scope {self.scope!r}')

    def kept(self, size):
        return kept_count(size, self.sparsity)


# --- 带掩码的参数 ---

class MaskedParameter:
    """冻结权重 W、实值掩码 M̄ (``scores``)、二值掩码 M 与阈值 φ。

    M 保存在一个持久的叶子张量里，训练掩码时它的 ``grad`` 就是 ∂L/∂M。
    """

    def __init__(self, name, weight):
        self.name = name
        self.weight = Tensor(weight)
        self.mask_tensor = Tensor(np.ones_like(self.weight.data))
        self.scores = np.ones_like(self.weight.data)
        self.threshold = 0.0

    @property
    def shape(self):
        return self.weight.shape

    @property
    def size(self):
        return self.weight.size

    @property
    def mask(self):
        return self.mask_tensor.data

    def effective(self):
        return self.weight * self.mask_tensor

    def set_mask(self, bits):
        bits = np.asarray(bits)
        if bits.shape != self.shape:
            raise DimensionError(f'{self.name}: mask {bits.shape} vs weight {self.shape}')
        self.mask_tensor.data = bits.astype(np.float64)
        self.scores = self.mask_tensor.data.copy()
        self.threshold = 0.5

    def init_scores(self, scores, threshold):
        """按 M̄ >= φ 的有符号规则做第一次二值化。"""
        self.scores = np.array(scores, dtype=np.float64)
        self.threshold = threshold
        self.mask_tensor.data = binarize(self.scores, threshold)

    def bits(self):
        return self.mask > 0.5

    def kept(self):
        return int(self.bits().sum())

    def checksum(self):
        return hashlib.sha256(self.weight.data.tobytes()).hexdigest()

    def __repr__(self):
        return f'<MaskedParameter {self.name} {self.shape} kept={self.kept()}>'


# --- 基本操作 ---

def binarize(scores, threshold):
    return (np.asarray(scores) >= threshold).astype(np.float64)


def _top_k(values, k):
    # 稳定排序：值相同则行优先下标小者在前
    return np.argsort(-values.reshape(-1), kind='stable')[:k]


def ste_step(param, grad_mask, lr):
    """M̄ ← M̄ − η·∂L/∂M，作用于全部位置 (包括当前被剪掉的)。"""
    if lr <= 0:
        raise InvalidArgumentError(f'mask learning rate must be positive, got {lr}')
    if grad_mask is None:
        return
    param.scores -= lr * np.asarray(grad_mask).reshape(param.shape)


def rethreshold(param, target):
    """φ 取 |M̄| 第 k 大的值，恰好保留 k 个位置。"""
    k = target.kept(param.size)
    magnitudes = np.abs(param.scores).reshape(-1)
    order = _top_k(magnitudes, k)
    param.threshold = float(magnitudes[order[-1]])
    bits = np.zeros(param.size, dtype=np.float64)
    bits[order] = 1.0
    param.mask_tensor.data = bits.reshape(param.shape)


def magnitude_bits(weight, target):
    weight = np.asarray(weight)
    bits = np.zeros(weight.size, dtype=bool)
    bits[_top_k(np.abs(weight), target.kept(weight.size))] = True
    return bits.reshape(weight.shape)


def omp_mask(weights, target, seed=0):
    """逐矩阵 (local) 保留 |W| 最大的 k 个权重。"""
    masks = {name: magnitude_bits(w, target) for name, w in weights.items()}
    return SubnetworkCheckpoint(sparsity=target.sparsity, method='OMP', seed=seed, masks=masks)


def omp_init(weights, target, alpha=DEFAULT_ALPHA, threshold=DEFAULT_THRESHOLD):
    """OMP 保留位置的 M̄ 取 α·φ，其余为 0。"""
    _check_init_args(alpha, threshold)
    return {name: np.where(magnitude_bits(w, target), alpha * threshold, 0.0)
            for name, w in weights.items()}


def random_init(shapes, target, seed, alpha=DEFAULT_ALPHA, threshold=DEFAULT_THRESHOLD):
    """随机选取 k 个位置置为 α·φ，用于和 OMP 初始化对比。"""
    _check_init_args(alpha, threshold)
    ckpt = random_mask(shapes, target, seed)
    return {name: np.where(bits, alpha * threshold, 0.0) for name, bits in ckpt.masks.items()}


def _check_init_args(alpha, threshold):
    if alpha < 1:
        raise InvalidArgumentError(f'alpha must be >= 1, got {alpha}')
    if threshold <= 0:
        raise InvalidArgumentError(f'threshold must be positive, got {threshold}')


def random_mask(shapes, target, seed):
    rng = np.random.default_rng(seed)
    masks = {}
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        bits = np.zeros(size, dtype=bool)
        bits[rng.choice(size, target.kept(size), replace=False)] = True
        masks[name] = bits.reshape(shape)
    return SubnetworkCheckpoint(sparsity=target.sparsity, method='RAND', seed=seed, masks=masks)


def jaccard(ckpt_i, ckpt_j):
    """|M_i ∩ M_j| / |M_i ∪ M_j|，在全部矩阵上合并计数；两者皆空时为 1。"""
    if ckpt_i.shapes() != ckpt_j.shapes():
        raise DimensionError('jaccard: checkpoints cover different matrix shapes')
    inter = union = 0
    for name, a in ckpt_i.masks.items():
        b = ckpt_j.masks[name]
        inter += int(np.logical_and(a, b).sum())
        union += int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return inter / union


def mask_distance(ckpt_i, ckpt_j):
    return 1.0 - jaccard(ckpt_i, ckpt_j)


def sparsity_of(ckpt):
    total = sum(m.size for m in ckpt.masks.values())
    kept = sum(int(m.sum()) for m in ckpt.masks.values())
    return 1.0 - kept / total


# --- 子网络检查点 ---

@dataclass
class SubnetworkCheckpoint:
    sparsity: float
    method: str
    seed: int
    masks: dict = field(default_factory=dict)

    def shapes(self):
        return {name: tuple(m.shape) for name, m in self.masks.items()}

    def kept_fraction(self, name=None):
        if name is not None:
            m = self.masks[name]
            return float(m.sum()) / m.size
        return 1.0 - sparsity_of(self)

    def relabel(self, method=None, seed=None):
        return SubnetworkCheckpoint(
            sparsity=self.sparsity,
            method=self.method if method is None else method,
            seed=self.seed if seed is None else seed,
            masks={k: v.copy() for k, v in self.masks.items()})

    def equals(self, other):
        return (self.shapes() == other.shapes()
                and all(np.array_equal(m, other.masks[n]) for n, m in self.masks.items()))

    @classmethod
    def all_ones(cls, shapes, method='FULL', seed=0):
        return cls(sparsity=0.0, method=method, seed=seed,
                   masks={n: np.ones(s, dtype=bool) for n, s in shapes.items()})

    # 文件格式：头部 (magic, 版本, S, 方法, 种子, 矩阵数)，
    # 之后每个矩阵：名字、形状、行优先且字节内低位在前的位图
    def save(self, path):
        with open(path, 'wb') as fh:
            fh.write(MASK_MAGIC)
            fh.write(struct.pack('<Id', MASK_FORMAT_VERSION, float(self.sparsity)))
            _write_str(fh, self.method)
            fh.write(struct.pack('<qI', int(self.seed), len(self.masks)))
            for name, bits in self.masks.items():
                _write_str(fh, name)
                fh.write(struct.pack('<I', bits.ndim))
                fh.write(struct.pack(f'<{bits.ndim}I', *bits.shape))
                fh.write(np.packbits(bits.reshape(-1).astype(np.uint8), bitorder='little').tobytes())

    @classmethod
    def load(cls, path):
        with open(path, 'rb') as fh:
            if fh.read(4) != MASK_MAGIC:
                raise CheckpointFormatError(f'{path}: not a subnetwork checkpoint')
            try:
                version, sparsity = struct.unpack('<Id', read_exact(fh, 12, path))
                if version != MASK_FORMAT_VERSION:
                    raise CheckpointFormatError(f'{path}: unsupported format version {version}')
                method = _read_str(fh, path)
                seed, count = struct.unpack('<qI', read_exact(fh, 12, path))
                masks = {}
                for _ in range(count):
                    name = _read_str(fh, path)
                    (ndim,) = struct.unpack('<I', read_exact(fh, 4, path))
                    shape = struct.unpack(f'<{ndim}I', read_exact(fh, 4 * ndim, path))
                    size = int(np.prod(shape))
                    packed = np.frombuffer(read_exact(fh, (size + 7) // 8, path), dtype=np.uint8)
                    bits = np.unpackbits(packed, count=size, bitorder='little').astype(bool)
                    masks[name] = bits.reshape(shape)
            except (struct.error, ValueError) as exc:
                raise CheckpointFormatError(f'{path}: corrupt subnetwork checkpoint ({exc})') from exc
        return cls(sparsity=sparsity, method=method, seed=seed, masks=masks)


def read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f'{path}: file ends early (wanted {n} bytes, got {len(data)})')
    return data


def _write_str(fh, text):
    raw = text.encode('utf-8')
    fh.write(struct.pack('<H', len(raw)))
    fh.write(raw)


def _read_str(fh, path):
    (n,) = struct.unpack('<H', read_exact(fh, 2, path))
    return read_exact(fh, n, path).decode('utf-8')
