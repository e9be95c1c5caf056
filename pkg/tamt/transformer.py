# tamt/transformer.py
"""缩小版 BERT 编码器：可剪枝矩阵集合 θ₀、MLM 头与下游任务头。"""
import copy
import logging
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from tamt.autodiff import (Tensor, add, dropout, gelu, index, layer_norm, matmul,
                           softmax_rows, take_rows)
from tamt.errors import (CheckpointFormatError, ConfigError, CorpusError, DimensionError,
                         InvalidArgumentError, UnknownTaskError)
from tamt.masking import MaskedParameter, read_exact

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b'TAMW'
WEIGHTS_FORMAT_VERSION = 1

ATTENTION_MASK_BIAS = -1e9
LAYER_MATRICES = ('wq', 'wk', 'wv', 'wao', 'wfi', 'wfo')


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_size: int = 128
    intermediate_size: int = 512
    vocab_size: int = 100
    max_len: int = 128
    dropout_p: float = 0.1
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f'hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}')
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f'dropout_p must lie in [0, 1), got {self.dropout_p}')
        for name in ('num_layers', 'num_heads', 'hidden_size', 'intermediate_size',
                     'vocab_size', 'max_len'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be positive')

    @property
    def head_size(self):
        return self.hidden_size // self.num_heads

    def deterministic(self):
        return replace(self, dropout_p=0.0)

    def to_dict(self):
        return asdict(self)


def prunable_names(config):
    names = ['emb']
    for layer in range(1, config.num_layers + 1):
        names += [f'layer{layer}.{m}' for m in LAYER_MATRICES]
    return names


def prunable_shapes(config):
    d, di = config.hidden_size, config.intermediate_size
    shapes = {'emb': (config.vocab_size, d)}
    for layer in range(1, config.num_layers + 1):
        for m in ('wq', 'wk', 'wv', 'wao'):
            shapes[f'layer{layer}.{m}'] = (d, d)
        shapes[f'layer{layer}.wfi'] = (d, di)
        shapes[f'layer{layer}.wfo'] = (di, d)
    return shapes


@dataclass
class TaskHead:
    kind: str
    weight: Tensor
    bias: Tensor

    def tensors(self):
        return [self.weight, self.bias]


@dataclass
class HiddenStates:
    """layers[0] 为嵌入层输出 H_0，layers[l] 为第 l 层输出，形状 B×|x|×d_H。"""
    layers: list
    attention_mask: np.ndarray = field(repr=False)

    @property
    def final(self):
        return self.layers[-1]


class EncoderModel:
    def __init__(self, config, seed=0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        init = np.random.default_rng(seed)
        d, std = config.hidden_size, config.init_std

        self.prunable = {name: MaskedParameter(name, init.normal(0.0, std, shape))
                         for name, shape in prunable_shapes(config).items()}

        self.aux = {'pos': Tensor(init.normal(0.0, std, (config.max_len, d))),
                    'emb_ln.gain': Tensor(np.ones(d)),
                    'emb_ln.bias': Tensor(np.zeros(d))}
        for layer in range(1, config.num_layers + 1):
            p = f'layer{layer}'
            for b in ('bq', 'bk', 'bv', 'bao', 'bfo'):
                self.aux[f'{p}.{b}'] = Tensor(np.zeros(d))
            self.aux[f'{p}.bfi'] = Tensor(np.zeros(config.intermediate_size))
            for ln in ('ln1', 'ln2'):
                self.aux[f'{p}.{ln}.gain'] = Tensor(np.ones(d))
                self.aux[f'{p}.{ln}.bias'] = Tensor(np.zeros(d))

        # C^mlm 不与 W_Emb 共享
        self.mlm_head = {'mlm.weight': Tensor(init.normal(0.0, std, (d, config.vocab_size))),
                         'mlm.bias': Tensor(np.zeros(config.vocab_size))}
        self.task_heads = {}

    # --- 参数分组 ---

    def weight_tensors(self):
        return [p.weight for p in self.prunable.values()]

    def mask_tensors(self):
        return [p.mask_tensor for p in self.prunable.values()]

    def aux_tensors(self):
        return list(self.aux.values())

    def mlm_tensors(self):
        return list(self.mlm_head.values())

    def task_tensors(self, task_id):
        return self.task_heads[task_id].tensors()

    def all_tensors(self):
        tensors = self.weight_tensors() + self.mask_tensors() + self.aux_tensors() + self.mlm_tensors()
        for head in self.task_heads.values():
            tensors += head.tensors()
        return tensors

    def set_trainable(self, weights=False, masks=False, aux=False, mlm_head=False, task_id=None):
        for t in self.all_tensors():
            t.requires_grad = False
        for t in self.weight_tensors():
            t.requires_grad = weights
        for t in self.mask_tensors():
            t.requires_grad = masks
        for t in self.aux_tensors():
            t.requires_grad = aux
        for t in self.mlm_tensors():
            t.requires_grad = mlm_head
        if task_id is not None:
            for t in self.task_tensors(task_id):
                t.requires_grad = True

    def zero_grad(self):
        for t in self.all_tensors():
            t.grad = None

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)

    # --- 掩码 ---

    def masks(self):
        return {name: p.bits() for name, p in self.prunable.items()}

    def apply_checkpoint(self, ckpt, materialize=False):
        """装载检查点的二值掩码；``materialize`` 时把被剪位置的原始权重置为精确的 0。"""
        if ckpt.shapes() != {n: p.shape for n, p in self.prunable.items()}:
            raise DimensionError('checkpoint matrix shapes do not match the model')
        for name, bits in ckpt.masks.items():
            param = self.prunable[name]
            param.set_mask(bits)
            if materialize:
                param.weight.data = np.where(bits, param.weight.data, 0.0)

    def weights(self):
        return {name: p.weight.data for name, p in self.prunable.items()}

    def weights_checksum(self):
        return {name: p.checksum() for name, p in self.prunable.items()}

    # --- 状态 ---

    def state_dict(self):
        state = {name: p.weight.data.copy() for name, p in self.prunable.items()}
        state.update({name: t.data.copy() for name, t in self.aux.items()})
        state.update({name: t.data.copy() for name, t in self.mlm_head.items()})
        return state

    def load_state_dict(self, state):
        for name, p in self.prunable.items():
            p.weight.data = np.array(state[name], dtype=np.float64)
        for group in (self.aux, self.mlm_head):
            for name, t in group.items():
                t.data = np.array(state[name], dtype=np.float64)

    def mlm_state(self):
        return {name: t.data.copy() for name, t in self.mlm_head.items()}

    def load_mlm_state(self, state):
        for name, t in self.mlm_head.items():
            if name not in state or np.shape(state[name]) != t.shape:
                raise DimensionError(f'MLM head tensor {name} missing or of the wrong shape')
            t.data = np.array(state[name], dtype=np.float64)

    def clone(self):
        return copy.deepcopy(self)

    def add_task_head(self, task_id, kind, num_outputs, seed):
        rng = np.random.default_rng(seed)
        d = self.config.hidden_size
        width = 2 if kind == 'span' else num_outputs
        self.task_heads[task_id] = TaskHead(
            kind, Tensor(rng.normal(0.0, self.config.init_std, (d, width))), Tensor(np.zeros(width)))
        return self.task_heads[task_id]

    def __repr__(self):
        c = self.config
        return (f'<EncoderModel L={c.num_layers} heads={c.num_heads} d_H={c.hidden_size} '
                f'd_I={c.intermediate_size} V={c.vocab_size}>')


# --- 前向 ---

def _linear(x, weight, bias):
    lead = x.shape[:-1]
    y = add(matmul(x.reshape(-1, x.shape[-1]), weight), bias)
    return y.reshape(*lead, weight.shape[-1])


def attention_heads(model, layer, h, key_bias):
    """N_h 个注意力头，拼接后 (尚未乘 W_AO) 返回 B×|x|×d_H。"""
    cfg = model.config
    p, a = f'layer{layer}', model.aux
    batch, length, d = h.shape
    nh, dh = cfg.num_heads, cfg.head_size

    def split(t):
        return t.reshape(batch, length, nh, dh).transpose(0, 2, 1, 3)

    q = split(_linear(h, model.prunable[f'{p}.wq'].effective(), a[f'{p}.bq']))
    k = split(_linear(h, model.prunable[f'{p}.wk'].effective(), a[f'{p}.bk']))
    v = split(_linear(h, model.prunable[f'{p}.wv'].effective(), a[f'{p}.bv']))
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    probs = softmax_rows(add(scores, key_bias))
    ctx = matmul(probs, v)
    return ctx.transpose(0, 2, 1, 3).reshape(batch, length, d)


def _validate_ids(config, token_ids):
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise InvalidArgumentError(f'token ids must be 1-D or 2-D, got shape {ids.shape}')
    if ids.shape[1] > config.max_len:
        raise InvalidArgumentError(f'sequence length {ids.shape[1]} exceeds max_len {config.max_len}')
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InvalidArgumentError(f'token id outside [0, {config.vocab_size})')
    return ids


def encode(model, token_ids, train_mode=False, attention_mask=None):
    cfg = model.config
    ids = _validate_ids(cfg, token_ids)
    batch, length = ids.shape
    if attention_mask is None:
        attention_mask = np.ones((batch, length), dtype=bool)
    attention_mask = np.asarray(attention_mask, dtype=bool).reshape(batch, length)
    p_drop = cfg.dropout_p if train_mode else 0.0
    key_bias = Tensor._wrap(np.where(attention_mask, 0.0, ATTENTION_MASK_BIAS)[:, None, None, :])
    a = model.aux

    h = add(take_rows(model.prunable['emb'].effective(), ids), index(a['pos'], slice(0, length)))
    h = layer_norm(h, a['emb_ln.gain'], a['emb_ln.bias'], cfg.ln_eps)
    h = dropout(h, p_drop, model.rng)
    states = [h]
    for layer in range(1, cfg.num_layers + 1):
        p = f'layer{layer}'
        att = _linear(attention_heads(model, layer, h, key_bias),
                      model.prunable[f'{p}.wao'].effective(), a[f'{p}.bao'])
        att = dropout(att, p_drop, model.rng)
        h = layer_norm(add(h, att), a[f'{p}.ln1.gain'], a[f'{p}.ln1.bias'], cfg.ln_eps)

        inner = gelu(_linear(h, model.prunable[f'{p}.wfi'].effective(), a[f'{p}.bfi']))
        ffn = _linear(inner, model.prunable[f'{p}.wfo'].effective(), a[f'{p}.bfo'])
        ffn = dropout(ffn, p_drop, model.rng)
        h = layer_norm(add(h, ffn), a[f'{p}.ln2.gain'], a[f'{p}.ln2.bias'], cfg.ln_eps)
        states.append(h)
    return HiddenStates(states, attention_mask)


def mlm_logits(model, states):
    return _linear(states.final, model.mlm_head['mlm.weight'], model.mlm_head['mlm.bias'])


def task_logits(model, states, task_id):
    """序列任务取首位 ([CLS]) 表示；span 任务返回 B×|x|×2 的起止 logits。"""
    if task_id not in model.task_heads:
        raise UnknownTaskError(f'no task head registered for {task_id!r}')
    head = model.task_heads[task_id]
    if head.kind == 'span':
        return _linear(states.final, head.weight, head.bias)
    first = index(states.final, (slice(None), 0, slice(None)))
    return _linear(first, head.weight, head.bias)


# --- θ₀ ---

def init_pretrained(config, corpus, steps, seed, batch_size=16, lr=1e-3, mask_prob=0.15,
                    weight_decay=0.01, progress=False):
    """随机初始化 (σ=0.02) 后在语料上做 ``steps`` 步 MLM，得到冻结的 θ₀。"""
    from tqdm import tqdm

    from tamt.autodiff import Tape, backward
    from tamt.optim import AdamW
    from tamt.pretrain import mlm_batch, mlm_loss

    if corpus is None or len(corpus) == 0:
        raise CorpusError('cannot pre-train on an empty corpus')
    if steps < 0:
        raise InvalidArgumentError(f'steps must be >= 0, got {steps}')
    if corpus.vocab_size != config.vocab_size:
        config = replace(config, vocab_size=corpus.vocab_size)
    model = EncoderModel(config, seed)
    if steps == 0:
        return model

    model.set_trainable(weights=True, aux=True, mlm_head=True)
    params = model.weight_tensors() + model.aux_tensors() + model.mlm_tensors()
    opt = AdamW(params, lr=lr, total_steps=steps, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    for step in tqdm(range(steps), desc='pretrain', disable=not progress, leave=False):
        batch = mlm_batch(corpus, batch_size, mask_prob, rng)
        with Tape() as tape:
            loss = mlm_loss(model, batch, train_mode=True)
        opt.zero_grad()
        backward(loss, tape)
        opt.step()
        if (step + 1) % 100 == 0:
            logger.info('init_pretrained step %d: mlm loss %.4f', step + 1, loss.item())
    model.set_trainable()
    return model


# --- 权重文件 ---

_CONFIG_INT_FIELDS = ('num_layers', 'num_heads', 'hidden_size', 'intermediate_size',
                      'vocab_size', 'max_len')
_CONFIG_FLOAT_FIELDS = ('dropout_p', 'init_std', 'ln_eps')


def save_weights(model, path):
    cfg = model.config
    state = model.state_dict()
    with open(path, 'wb') as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack('<I', WEIGHTS_FORMAT_VERSION))
        fh.write(struct.pack('<6I', *(getattr(cfg, f) for f in _CONFIG_INT_FIELDS)))
        fh.write(struct.pack('<3d', *(getattr(cfg, f) for f in _CONFIG_FLOAT_FIELDS)))
        fh.write(struct.pack('<I', len(state)))
        for name, arr in state.items():
            raw = name.encode('utf-8')
            fh.write(struct.pack('<H', len(raw)))
            fh.write(raw)
            fh.write(struct.pack('<I', arr.ndim))
            fh.write(struct.pack(f'<{arr.ndim}I', *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype='<f8').tobytes())


def load_weights(path, seed=0):
    with open(path, 'rb') as fh:
        if fh.read(4) != WEIGHTS_MAGIC:
            raise CheckpointFormatError(f'{path}: not a weight checkpoint')
        try:
            (version,) = struct.unpack('<I', read_exact(fh, 4, path))
            if version != WEIGHTS_FORMAT_VERSION:
                raise CheckpointFormatError(f'{path}: unsupported format version {version}')
            ints = struct.unpack('<6I', read_exact(fh, 24, path))
            floats = struct.unpack('<3d', read_exact(fh, 24, path))
            config = ModelConfig(**dict(zip(_CONFIG_INT_FIELDS, ints)),
                                 **dict(zip(_CONFIG_FLOAT_FIELDS, floats)))
            (count,) = struct.unpack('<I', read_exact(fh, 4, path))
            state = {}
            for _ in range(count):
                (n,) = struct.unpack('<H', read_exact(fh, 2, path))
                name = read_exact(fh, n, path).decode('utf-8')
                (ndim,) = struct.unpack('<I', read_exact(fh, 4, path))
                shape = struct.unpack(f'<{ndim}I', read_exact(fh, 4 * ndim, path))
                size = int(np.prod(shape))
                raw = read_exact(fh, 8 * size, path)
                state[name] = np.frombuffer(raw, dtype='<f8').astype(np.float64).reshape(shape)
        except (struct.error, ValueError) as exc:
            raise CheckpointFormatError(f'{path}: corrupt weight checkpoint ({exc})') from exc
    model = EncoderModel(config, seed)
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointFormatError(f'{path}: missing tensors {sorted(missing)[:3]}')
    model.load_state_dict(state)
    return model


# --- MLM 头文件 ---

def save_mlm_head(state, path):
    """TAMT-MLM 训练过的 C^mlm，与 .mask 文件放在一起。"""
    with open(path, 'wb') as fh:
        np.savez(fh, **state)


def load_mlm_head(path):
    try:
        with np.load(path) as archive:
            return {name: archive[name].astype(np.float64) for name in archive.files}
    except (OSError, ValueError) as exc:
        raise CheckpointFormatError(f'{path}: cannot read MLM head ({exc})') from exc
