# tamt/pretrain.py
"""预训练语料上的子网络搜索：TAMT (MLM / KD / MLM+KD) 与带回卷的 IMP。"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from tqdm import tqdm

from tamt.autodiff import Tape, backward, cosine_rows, cross_entropy, no_grad, take_rows
from tamt.data import IGNORE_INDEX, MASK_ID, NUM_SPECIAL
from tamt.errors import (ConfigError, CorpusError, InvalidArgumentError, ScheduleError, TamtError,
                         TrainingAbortedError)
from tamt.masking import (DEFAULT_ALPHA, DEFAULT_THRESHOLD, SparsityTarget, SubnetworkCheckpoint,
                          kept_count, omp_init, random_init, rethreshold, sparsity_of, ste_step)
from tamt.optim import AdamW, linear_decay
from tamt.transformer import encode, mlm_logits

logger = logging.getLogger(__name__)

OBJECTIVES = ('MLM', 'KD', 'MLM+KD')
EVAL_SEED = 20220101


@dataclass
class PretrainConfig:
    objective: str = 'MLM'
    lr: float = 1e-3
    mask_lr: float = 0.5
    batch_size: int = 16
    max_steps: int = 500
    mlm_mask_prob: float = 0.15
    lambda_mlm: float = None
    lambda_kd: float = None
    seed: int = 0
    eval_every: int = 100
    checkpoint_steps: tuple = ()
    alpha: float = DEFAULT_ALPHA
    threshold: float = DEFAULT_THRESHOLD
    mask_init: str = 'omp'
    weight_decay: float = 0.01
    eval_batch_size: int = 32
    progress: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f'unknown objective {self.objective!r}; expected one of {OBJECTIVES}')
        if not 0.0 < self.mlm_mask_prob < 1.0:
            raise ConfigError(f'mlm_mask_prob must lie in (0, 1), got {self.mlm_mask_prob}')
        if self.mask_init not in ('omp', 'random'):
            raise ConfigError(f'unknown mask_init {self.mask_init!r}')
        defaults = {'MLM': (1.0, 0.0), 'KD': (0.0, 1.0), 'MLM+KD': (0.5, 0.5)}[self.objective]
        if self.lambda_mlm is None:
            self.lambda_mlm = defaults[0]
        if self.lambda_kd is None:
            self.lambda_kd = defaults[1]
        if self.lambda_mlm < 0 or self.lambda_kd < 0 or self.lambda_mlm + self.lambda_kd == 0:
            raise ConfigError('objective weights must be non-negative and not both zero')
        if self.max_steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError('max_steps, batch_size and eval_every must be positive')
        self.checkpoint_steps = tuple(sorted(set(int(s) for s in self.checkpoint_steps)))

    @property
    def uses_mlm(self):
        return self.lambda_mlm > 0

    @property
    def uses_kd(self):
        return self.lambda_kd > 0

    def to_dict(self):
        return asdict(self)


@dataclass
class ImpSchedule:
    total_steps: int
    increments: tuple
    stage_length: int
    stage_lengths: tuple = None

    def __post_init__(self):
        if self.stage_length < 1:
            raise ScheduleError('IMP stage length must be at least one step')
        if len(self.increments) > 10:
            raise ScheduleError('IMP schedule has more than ten pruning events')
        if self.stage_lengths is not None:
            self.stage_lengths = tuple(int(n) for n in self.stage_lengths)
            if len(self.stage_lengths) != max(0, len(self.increments) - 1) \
                    or any(n < 0 for n in self.stage_lengths):
                raise ScheduleError('stage_lengths needs one non-negative length per training stage')

    @classmethod
    def for_target(cls, sparsity, total_steps, increment=0.1):
        if not 0.0 < increment <= 1.0:
            raise ScheduleError(f'increment must lie in (0, 1], got {increment}')
        n_full = int(math.floor(sparsity / increment + 1e-9))
        increments = [increment] * n_full
        remainder = sparsity - n_full * increment
        if remainder > 1e-9:
            increments.append(remainder)
        return cls(total_steps, tuple(increments), max(1, total_steps // 10))

    def levels(self):
        return [float(x) for x in np.cumsum(self.increments)]

    def lengths(self):
        """相邻两次剪枝之间训练的步数。"""
        if self.stage_lengths is not None:
            return list(self.stage_lengths)
        return [self.stage_length] * max(0, len(self.increments) - 1)

    def pruning_steps(self):
        if not self.increments:
            return []
        return [0] + [int(s) for s in np.cumsum(self.lengths())]

    def steps_to_target(self):
        return int(sum(self.lengths()))

    def check_target(self, target):
        reached = self.levels()[-1] if self.increments else 0.0
        if abs(reached - target.sparsity) > 1e-9:
            raise ScheduleError(
                f'schedule reaches sparsity {reached:.4f}, target is {target.sparsity:.4f}')


def matched_budget(sparsity, imp_total_steps, increment=0.1):
    """IMP 到达 ``sparsity`` 所用的步数，TAMT 使用同样的预算。"""
    return ImpSchedule.for_target(sparsity, imp_total_steps, increment).steps_to_target()


# --- 批次 ---

@dataclass
class MLMBatch:
    input_ids: np.ndarray
    targets: np.ndarray
    attention_mask: np.ndarray

    @property
    def num_selected(self):
        return int((self.targets != IGNORE_INDEX).sum())


def pad_sequences(seqs, pad_id=0):
    length = max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def mlm_batch(corpus, batch_size, mask_prob, rng, indices=None):
    """选中 mask_prob 的位置：80% 换成 [MASK]，10% 随机词，10% 不变。"""
    if not 0.0 < mask_prob < 1.0:
        raise InvalidArgumentError(f'mask_prob must lie in (0, 1), got {mask_prob}')
    if len(corpus) == 0:
        raise CorpusError('cannot draw a batch from an empty corpus')
    if indices is None:
        indices = rng.integers(0, len(corpus), batch_size)
    seqs = [corpus.documents[i] for i in indices]
    if min(len(s) for s in seqs) < 2:
        raise CorpusError('sequences must hold at least 2 tokens')
    ids, attention = pad_sequences(seqs)
    maskable = attention & (ids >= NUM_SPECIAL)
    if not maskable.any():
        raise CorpusError('batch has no maskable tokens')

    # 固定的随机数消耗顺序，保证同一种子得到同一批次
    select_draw = rng.random(ids.shape)
    kind_draw = rng.random(ids.shape)
    random_ids = rng.integers(NUM_SPECIAL, corpus.vocab_size, ids.shape)
    forced = rng.integers(0, int(maskable.sum()))

    selected = maskable & (select_draw < mask_prob)
    if not selected.any():
        rows, cols = np.nonzero(maskable)
        selected[rows[forced], cols[forced]] = True

    inputs = ids.copy()
    inputs[selected & (kind_draw < 0.8)] = MASK_ID
    swap = selected & (kind_draw >= 0.8) & (kind_draw < 0.9)
    inputs[swap] = random_ids[swap]
    targets = np.where(selected, ids, IGNORE_INDEX)
    return MLMBatch(inputs, targets, attention)


# --- 损失 ---

def _mlm_from_states(model, states, batch):
    logits = mlm_logits(model, states)
    return cross_entropy(logits.reshape(-1, model.config.vocab_size),
                         batch.targets.reshape(-1), IGNORE_INDEX)


def mlm_loss(model, batch, train_mode=True):
    states = encode(model, batch.input_ids, train_mode, batch.attention_mask)
    return _mlm_from_states(model, states, batch)


def _kd_from_states(teacher_states, student_states):
    # 只对第 1..L 层、非填充位置取 1 - cos 的平均
    valid = np.nonzero(student_states.attention_mask.reshape(-1))[0]
    n_layers = len(student_states.layers) - 1
    total = None
    for t_h, s_h in zip(teacher_states.layers[1:], student_states.layers[1:]):
        d = s_h.shape[-1]
        s_rows = take_rows(s_h.reshape(-1, d), valid)
        t_rows = take_rows(t_h.reshape(-1, d), valid)
        term = (1.0 - cosine_rows(s_rows, t_rows)).sum()
        total = term if total is None else total + term
    return total * (1.0 / (n_layers * len(valid)))


def teacher_states(teacher, batch):
    with no_grad():
        return encode(teacher, batch.input_ids, False, batch.attention_mask)


def kd_loss(teacher, student, batch, train_mode=False):
    if teacher.config.deterministic() != student.config.deterministic():
        raise ConfigError('teacher and student must share one model configuration')
    student_states = encode(student, batch.input_ids, train_mode, batch.attention_mask)
    return _kd_from_states(teacher_states(teacher, batch), student_states)


def objective_loss(student, teacher, batch, cfg, train_mode=True):
    """λ_MLM·MLM + λ_KD·KD，共享一次学生前向；权重为 0 的项不计算。"""
    states = encode(student, batch.input_ids, train_mode, batch.attention_mask)
    loss = None
    if cfg.uses_mlm:
        loss = _mlm_from_states(student, states, batch) * cfg.lambda_mlm
    if cfg.uses_kd:
        kd = _kd_from_states(teacher_states(teacher, batch), states) * cfg.lambda_kd
        loss = kd if loss is None else loss + kd
    return loss


# --- 评估 ---

def eval_pretrain(model, dev_corpus, teacher, batch_size=32, mask_prob=0.15, seed=EVAL_SEED,
                  mlm_head=None):
    """验证集上的 (MLM 损失, KD 损失)，关闭 dropout，结果确定。

    ``model`` 可以是 EncoderModel，也可以是 SubnetworkCheckpoint (此时套在 ``teacher`` 的副本上，
    ``mlm_head`` 给出时换上搜索中训练过的 C^mlm)。
    """
    if dev_corpus is None or len(dev_corpus) == 0:
        raise CorpusError('dev corpus is empty')
    if isinstance(model, SubnetworkCheckpoint):
        ckpt, model = model, teacher.clone()
        model.apply_checkpoint(ckpt)
        if mlm_head is not None:
            model.load_mlm_state(mlm_head)
    rng = np.random.default_rng(seed)
    mlm_sum = kd_sum = 0.0
    mlm_count = kd_count = 0
    with no_grad():
        for start in range(0, len(dev_corpus), batch_size):
            idx = list(range(start, min(start + batch_size, len(dev_corpus))))
            batch = mlm_batch(dev_corpus, len(idx), mask_prob, rng, indices=idx)
            states = encode(model, batch.input_ids, False, batch.attention_mask)
            n_sel = batch.num_selected
            mlm_sum += _mlm_from_states(model, states, batch).item() * n_sel
            mlm_count += n_sel
            n_tok = int(batch.attention_mask.sum())
            kd_sum += _kd_from_states(teacher_states(teacher, batch), states).item() * n_tok
            kd_count += n_tok
    return mlm_sum / mlm_count, kd_sum / kd_count


# --- 训练记录 ---

@dataclass
class TracePoint:
    step: int
    wall_ms: float
    train_loss: float
    dev_mlm_loss: float
    dev_kd_loss: float
    sparsity: float


@dataclass
class SearchResult:
    """``dev_losses`` 与 ``mlm_heads`` 以步数为键，对应 ``checkpoints`` 和最终检查点。"""
    checkpoint: SubnetworkCheckpoint
    trace: list
    checkpoints: dict = field(default_factory=dict)
    wall_ms: dict = field(default_factory=dict)
    pruning_events: list = field(default_factory=list)
    dev_losses: dict = field(default_factory=dict)
    mlm_heads: dict = field(default_factory=dict)

    @property
    def final_step(self):
        return max(self.wall_ms) if self.wall_ms else 0

    @property
    def mlm_head(self):
        return self.mlm_heads.get(self.final_step)


def _model_checkpoint(model, target, method, seed):
    return SubnetworkCheckpoint(sparsity=target.sparsity, method=method, seed=seed,
                                masks=model.masks())


def _trace_point(step, wall_ms, train_loss, model, dev_corpus, teacher, cfg, target, method, seed):
    if dev_corpus is None or len(dev_corpus) == 0:
        dev_mlm = dev_kd = float('nan')
    else:
        dev_mlm, dev_kd = eval_pretrain(model, dev_corpus, teacher, cfg.eval_batch_size,
                                        cfg.mlm_mask_prob)
    sparsity = sparsity_of(_model_checkpoint(model, target, method, seed))
    return TracePoint(step, wall_ms, train_loss, dev_mlm, dev_kd, sparsity)


def init_masks(model, target, cfg):
    if cfg.mask_init == 'omp':
        scores = omp_init(model.weights(), target, cfg.alpha, cfg.threshold)
    else:
        shapes = {n: p.shape for n, p in model.prunable.items()}
        scores = random_init(shapes, target, cfg.seed, cfg.alpha, cfg.threshold)
    for name, param in model.prunable.items():
        param.init_scores(scores[name], cfg.threshold)


def tamt_train(model, theta0, target, cfg, corpus, dev_corpus=None, method=None):
    """冻结权重、只训练掩码。

    ``model`` 是 θ₀ 的副本，掩码按 ``cfg.mask_init`` 初始化；``theta0`` (全 1 掩码) 同时充当 KD 教师。
    每个检查点都附带当时的验证集损失与 C^mlm，二者都取自正在训练的模型。
    """
    method = method or f'TAMT-{cfg.objective}' + ('-RI' if cfg.mask_init == 'random' else '')
    init_masks(model, target, cfg)
    model.reseed(cfg.seed)
    model.set_trainable(masks=True, mlm_head=cfg.uses_mlm)
    before = model.weights_checksum()
    head_opt = None
    if cfg.uses_mlm:
        head_opt = AdamW(model.mlm_tensors(), lr=cfg.lr, total_steps=cfg.max_steps,
                         weight_decay=cfg.weight_decay)

    rng = np.random.default_rng(cfg.seed)
    result = SearchResult(checkpoint=None, trace=[])
    point = _trace_point(0, 0.0, float('nan'), model, dev_corpus, theta0, cfg, target, method, cfg.seed)
    result.trace.append(point)
    if 0 in cfg.checkpoint_steps:
        _keep_checkpoint(result, 0, 0.0, model, target, method, cfg, point)
    train_ms = 0.0
    recent = []
    for step in tqdm(range(1, cfg.max_steps + 1), desc=method, disable=not cfg.progress, leave=False):
        t0 = time.perf_counter()
        batch = mlm_batch(corpus, cfg.batch_size, cfg.mlm_mask_prob, rng)
        with Tape() as tape:
            loss = objective_loss(model, theta0, batch, cfg, train_mode=True)
        value = loss.item()
        recent.append(value)
        if not np.isfinite(value):
            raise TrainingAbortedError(f'{method}: non-finite training loss', step, recent)
        model.zero_grad()
        backward(loss, tape)
        eta = linear_decay(cfg.mask_lr, step - 1, cfg.max_steps)
        for param in model.prunable.values():
            ste_step(param, param.mask_tensor.grad, eta)
            rethreshold(param, target)
        if head_opt is not None:
            head_opt.step()
        train_ms += (time.perf_counter() - t0) * 1000.0

        point = None
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            point = _trace_point(step, train_ms, value, model, dev_corpus, theta0, cfg,
                                 target, method, cfg.seed)
            result.trace.append(point)
            logger.info('%s S=%.2f step %d: loss %.4f dev mlm %.4f dev kd %.4f',
                        method, target.sparsity, step, value, point.dev_mlm_loss, point.dev_kd_loss)
        if step in cfg.checkpoint_steps:
            _keep_checkpoint(result, step, train_ms, model, target, method, cfg, point,
                             dev_corpus, theta0)

    if model.weights_checksum() != before:
        raise TamtError(f'{method}: frozen weights changed during mask training')
    model.set_trainable()
    final = result.trace[-1]
    result.checkpoint = _model_checkpoint(model, target, method, cfg.seed)
    result.wall_ms[cfg.max_steps] = train_ms
    result.dev_losses[cfg.max_steps] = (final.dev_mlm_loss, final.dev_kd_loss)
    result.mlm_heads[cfg.max_steps] = model.mlm_state()
    return result


def _keep_checkpoint(result, step, train_ms, model, target, method, cfg, point, dev_corpus=None,
                     theta0=None):
    result.checkpoints[step] = _model_checkpoint(model, target, method, cfg.seed)
    result.wall_ms[step] = train_ms
    result.mlm_heads[step] = model.mlm_state()
    if point is not None:
        result.dev_losses[step] = (point.dev_mlm_loss, point.dev_kd_loss)
    elif dev_corpus is not None and len(dev_corpus):
        result.dev_losses[step] = eval_pretrain(model, dev_corpus, theta0, cfg.eval_batch_size,
                                                cfg.mlm_mask_prob)
    else:
        result.dev_losses[step] = (float('nan'), float('nan'))


def prune_surviving(model, sparsity):
    """在存活权重里按当前 |W| 逐矩阵剪到 ``sparsity``。"""
    for param in model.prunable.values():
        k = kept_count(param.size, sparsity)
        score = np.where(param.bits(), np.abs(param.weight.data), -1.0).reshape(-1)
        order = np.argsort(-score, kind='stable')[:k]
        bits = np.zeros(param.size, dtype=bool)
        bits[order] = True
        param.set_mask(bits.reshape(param.shape))


def imp_run(theta0, target, sched, cfg, corpus, dev_corpus=None, method='IMP', on_event=None):
    """训练权重一个阶段 → 按幅值剪枝 → 把存活权重回卷到 θ₀，直到达到目标稀疏度。

    ``on_event(step, level, model)`` 在每次剪枝并回卷之后调用。
    """
    sched.check_target(target)
    model = theta0.clone()
    model.reseed(cfg.seed)
    snapshot = theta0.state_dict()
    shapes = {n: p.shape for n, p in model.prunable.items()}
    result = SearchResult(checkpoint=None, trace=[])
    if not sched.increments:
        result.checkpoint = SubnetworkCheckpoint.all_ones(shapes, method, cfg.seed)
        result.checkpoint.sparsity = target.sparsity
        return result

    def prune_and_rewind(step, level):
        prune_surviving(model, level)
        model.load_state_dict(snapshot)
        result.pruning_events.append((step, level))
        logger.info('%s: pruned to %.2f at step %d', method, level, step)
        if on_event is not None:
            on_event(step, level, model)

    levels = sched.levels()
    prune_and_rewind(0, levels[0])
    result.trace.append(_trace_point(0, 0.0, float('nan'), model, dev_corpus, theta0, cfg,
                                     target, method, cfg.seed))

    rng = np.random.default_rng(cfg.seed)
    step, train_ms = 0, 0.0
    recent = []
    for level, length in zip(levels[1:], sched.lengths()):
        if length:
            model.set_trainable(weights=True, aux=True, mlm_head=True)
            params = model.weight_tensors() + model.aux_tensors() + model.mlm_tensors()
            # 每次回卷后重置优化器状态
            opt = AdamW(params, lr=cfg.lr, total_steps=length, weight_decay=cfg.weight_decay)
            for _ in tqdm(range(length), desc=f'{method}@{level:.2f}', disable=not cfg.progress,
                          leave=False):
                t0 = time.perf_counter()
                step += 1
                batch = mlm_batch(corpus, cfg.batch_size, cfg.mlm_mask_prob, rng)
                with Tape() as tape:
                    loss = mlm_loss(model, batch, train_mode=True)
                value = loss.item()
                recent.append(value)
                if not np.isfinite(value):
                    raise TrainingAbortedError(f'{method}: non-finite training loss', step, recent)
                opt.zero_grad()
                backward(loss, tape)
                opt.step()
                train_ms += (time.perf_counter() - t0) * 1000.0
                if step % cfg.eval_every == 0:
                    result.trace.append(_trace_point(step, train_ms, value, model, dev_corpus,
                                                     theta0, cfg, target, method, cfg.seed))
            model.set_trainable()
        prune_and_rewind(step, level)

    final = _trace_point(step, train_ms, recent[-1] if recent else float('nan'), model, dev_corpus,
                         theta0, cfg, target, method, cfg.seed)
    result.trace.append(final)
    result.checkpoint = _model_checkpoint(model, target, method, cfg.seed)
    result.wall_ms[step] = train_ms
    result.dev_losses[step] = (final.dev_mlm_loss, final.dev_kd_loss)
    return result
