# tamt/downstream.py
"""下游微调与评估：固定掩码训练存活权重和任务头，报告验证集上的最好结果。"""
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.stats import pearsonr
from sklearn.metrics import accuracy_score, matthews_corrcoef
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from tamt.autodiff import Tape, Tensor, add, backward, cross_entropy, index, mse, no_grad
from tamt.data import IGNORE_INDEX, Example, Task
from tamt.errors import (ConfigError, CorpusError, DimensionError, InvalidArgumentError,
                         TrainingAbortedError, UnknownTaskError)
from tamt.optim import AdamW
from tamt.pretrain import pad_sequences
from tamt.transformer import ATTENTION_MASK_BIAS, encode, task_logits

logger = logging.getLogger(__name__)

METRICS = ('accuracy', 'matthews', 'pearson', 'f1_span')
CORRELATION_METRICS = ('matthews', 'pearson')


@dataclass
class FineTuneConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 3
    eval_every: int = 50
    seed: int = 0
    train_size: int = None
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    eval_batch_size: int = 64
    span_lr: float = None
    progress: bool = False

    def __post_init__(self):
        if self.lr <= 0 or (self.span_lr is not None and self.span_lr <= 0):
            raise ConfigError(f'fine-tuning lr must be positive, got {self.lr} / {self.span_lr}')
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigError('batch_size, epochs and eval_every must be positive')
        if self.train_size is not None and self.train_size < 1:
            raise ConfigError(f'train_size must be positive, got {self.train_size}')
        self.betas = tuple(self.betas)

    def lr_for(self, task):
        """片段抽取任务可以单独指定学习率。"""
        if task.kind == 'span' and self.span_lr is not None:
            return self.span_lr
        return self.lr

    def to_dict(self):
        return asdict(self)


@dataclass
class FineTuneResult:
    model: object
    best_metric: float
    best_step: int
    history: list = field(default_factory=list)


# --- 编码 ---

def encode_examples(examples, vocab, max_len):
    seqs = []
    for ex in examples:
        ids = vocab.wrap(ex.text, ex.text_b)
        if len(ids) > max_len:
            raise InvalidArgumentError(f'example of length {len(ids)} exceeds max_len {max_len}')
        seqs.append(ids)
    return pad_sequences(seqs)


def _labels(task, examples):
    if task.kind == 'classification':
        return np.array([int(ex.label) for ex in examples], dtype=np.int64)
    if task.kind == 'regression':
        return np.array([float(ex.label) for ex in examples], dtype=np.float64)
    return np.array([tuple(ex.label) for ex in examples], dtype=np.int64).reshape(-1, 2)


def _span_logits(logits, attention_mask, which):
    # 填充位置加上大负数，不参与起止位置的 softmax
    pad_bias = Tensor._wrap(np.where(attention_mask, 0.0, ATTENTION_MASK_BIAS))
    return add(index(logits, (slice(None), slice(None), which)), pad_bias)


def task_loss(model, task, ids, attention_mask, labels, train_mode=True):
    states = encode(model, ids, train_mode, attention_mask)
    logits = task_logits(model, states, task.task_id)
    if task.kind == 'classification':
        return cross_entropy(logits, labels, IGNORE_INDEX)
    if task.kind == 'regression':
        return mse(logits.reshape(-1), labels)
    start = cross_entropy(_span_logits(logits, attention_mask, 0), labels[:, 0])
    end = cross_entropy(_span_logits(logits, attention_mask, 1), labels[:, 1])
    return (start + end) * 0.5


# --- 预测与评估 ---

def predict(model, task, examples, vocab, batch_size=64):
    preds = []
    with no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            ids, attention = encode_examples(chunk, vocab, model.config.max_len)
            states = encode(model, ids, False, attention)
            logits = task_logits(model, states, task.task_id).data
            if task.kind == 'classification':
                preds.extend(int(p) for p in logits.argmax(axis=-1))
            elif task.kind == 'regression':
                preds.extend(float(p) for p in logits.reshape(-1))
            else:
                masked = np.where(attention[..., None], logits, -np.inf)
                for s, e in zip(masked[..., 0].argmax(axis=-1), masked[..., 1].argmax(axis=-1)):
                    preds.append((int(s), int(max(s, e))))
    return preds


def _span_f1(pred, gold):
    overlap = max(0, min(pred[1], gold[1]) - max(pred[0], gold[0]) + 1)
    if overlap == 0:
        return 0.0
    precision = overlap / (pred[1] - pred[0] + 1)
    recall = overlap / (gold[1] - gold[0] + 1)
    return 2 * precision * recall / (precision + recall)


def metric(name, predictions, golds):
    if len(predictions) != len(golds):
        raise DimensionError(f'metric: {len(predictions)} predictions vs {len(golds)} golds')
    if not len(golds):
        raise InvalidArgumentError('metric: no examples')
    if name == 'accuracy':
        return float(accuracy_score(golds, predictions))
    if name == 'matthews':
        # 分母为 0 时 sklearn 返回 0
        return float(matthews_corrcoef(golds, predictions))
    if name == 'pearson':
        p, g = np.asarray(predictions, dtype=float), np.asarray(golds, dtype=float)
        if len(p) < 2 or np.std(p) == 0 or np.std(g) == 0:
            return 0.0
        return float(pearsonr(p, g)[0])
    if name == 'f1_span':
        return float(np.mean([_span_f1(p, g) for p, g in zip(predictions, golds)]))
    raise UnknownTaskError(f'unknown metric {name!r}')


def evaluate(model, task, vocab, batch_size=64):
    preds = predict(model, task, task.dev, vocab, batch_size)
    return metric(task.metric, preds, [ex.label for ex in task.dev])


def normalized_score(metric_name, value):
    """相关系数类指标映射到 [0, 1]：(r+1)/2。"""
    if metric_name in CORRELATION_METRICS:
        return (value + 1.0) / 2.0
    return value


def avg_score(results, expected=None):
    """``results``: task_id -> (metric_name, value)，返回各任务归一化得分的均值。"""
    if expected is not None:
        missing = sorted(set(expected) - set(results))
        if missing:
            raise UnknownTaskError(f'avg_score: missing results for tasks {missing}')
    if not results:
        raise InvalidArgumentError('avg_score: no task results')
    scores = [normalized_score(name, value) for name, value in results.values()]
    return float(np.mean(sorted(scores)))


# --- 训练子集 ---

def subsample(task, n, seed):
    size = len(task.train)
    if not 1 <= n <= size:
        raise InvalidArgumentError(f'subsample size {n} outside [1, {size}]')
    if n == size:
        return task
    indices = np.arange(size)
    chosen = None
    if task.kind == 'classification':
        labels = [ex.label for ex in task.train]
        try:
            chosen, _ = train_test_split(indices, train_size=n, stratify=labels, random_state=seed)
        except ValueError:
            # 某类样本太少无法分层时退回均匀抽样
            logger.warning('subsample: stratified split impossible for %s at n=%d', task.task_id, n)
    if chosen is None:
        chosen = np.random.default_rng(seed).choice(size, n, replace=False)
    train = [task.train[i] for i in sorted(int(i) for i in chosen)]
    return replace(task, train=train, meta={**task.meta, 'train_size': n, 'subsample_seed': seed})


# --- 微调 ---

def fine_tune(ckpt, theta0, task, cfg, vocab):
    """在子网络上微调：掩码固定，被剪位置的权重保持精确的 0。"""
    if not task.train:
        raise CorpusError(f'task {task.task_id}: training set is empty')
    if cfg.train_size is not None and cfg.train_size < len(task.train):
        task = subsample(task, cfg.train_size, cfg.seed)

    model = theta0.clone()
    model.apply_checkpoint(ckpt, materialize=True)
    model.add_task_head(task.task_id, task.kind, task.num_labels, cfg.seed)
    model.reseed(cfg.seed)
    model.set_trainable(weights=True, aux=True, task_id=task.task_id)
    params = model.weight_tensors() + model.aux_tensors() + model.task_tensors(task.task_id)

    ids, attention = encode_examples(task.train, vocab, model.config.max_len)
    labels = _labels(task, task.train)
    steps_per_epoch = int(np.ceil(len(task.train) / cfg.batch_size))
    total_steps = steps_per_epoch * cfg.epochs
    opt = AdamW(params, lr=cfg.lr_for(task), total_steps=total_steps, betas=cfg.betas,
                weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    result = FineTuneResult(model=model, best_metric=-np.inf, best_step=0)
    step = 0
    recent = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(task.train))
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        for idx in tqdm(batches, desc=f'{task.task_id} epoch {epoch + 1}',
                        disable=not cfg.progress, leave=False):
            step += 1
            # 去掉整批共有的尾部填充
            width = int(attention[idx].sum(axis=1).max())
            with Tape() as tape:
                loss = task_loss(model, task, ids[idx, :width], attention[idx, :width],
                                 labels[idx], train_mode=True)
            value = loss.item()
            recent.append(value)
            if not np.isfinite(value):
                raise TrainingAbortedError(f'fine-tune {task.task_id}: non-finite loss', step, recent)
            opt.zero_grad()
            backward(loss, tape)
            opt.step()
            if step % cfg.eval_every == 0 or step == total_steps:
                _record_eval(result, model, task, vocab, cfg, step, value)

    model.set_trainable()
    logger.info('fine-tune %s (%s S=%.2f): best %s %.4f at step %d', task.task_id, ckpt.method,
                ckpt.sparsity, task.metric, result.best_metric, result.best_step)
    return result


def _record_eval(result, model, task, vocab, cfg, step, train_loss):
    score = evaluate(model, task, vocab, cfg.eval_batch_size)
    result.history.append((step, train_loss, score))
    if score > result.best_metric:
        result.best_metric = score
        result.best_step = step
    logger.debug('fine-tune %s step %d: loss %.4f dev %s %.4f', task.task_id, step, train_loss,
                 task.metric, score)


# --- 任务文件 ---

def save_task(task, path):
    """JSON Lines，每行一个样本：split, text, text_b, label，以及任务类型与指标。"""
    rows = []
    for split, examples in (('train', task.train), ('dev', task.dev)):
        for ex in examples:
            label = list(ex.label) if task.kind == 'span' else ex.label
            rows.append({'task_id': task.task_id, 'kind': task.kind, 'metric': task.metric,
                         'num_labels': task.num_labels, 'split': split, 'text': ex.text,
                         'text_b': ex.text_b, 'label': label})
    pd.DataFrame(rows).to_json(path, orient='records', lines=True, force_ascii=False)


def load_task(path, task_id=None):
    frame = pd.read_json(path, orient='records', lines=True, dtype=False)
    required = {'kind', 'metric', 'split', 'text', 'label'}
    if frame.empty or not required <= set(frame.columns):
        raise CorpusError(f'{path}: task file needs columns {sorted(required)}')
    first = frame.iloc[0]
    kind, metric_name = str(first['kind']), str(first['metric'])
    if metric_name not in METRICS:
        raise ConfigError(f'{path}: unknown metric {metric_name!r}')
    splits = {'train': [], 'dev': []}
    for row in frame.itertuples(index=False):
        text_b = getattr(row, 'text_b', None)
        text_b = text_b if isinstance(text_b, str) else None
        label = row.label
        if kind == 'span':
            label = (int(label[0]), int(label[1]))
        elif kind == 'classification':
            label = int(label)
        else:
            label = float(label)
        splits[row.split].append(Example(str(row.text), label, text_b))
    num_labels = int(first['num_labels']) if 'num_labels' in frame.columns else 2
    return Task(task_id or str(first.get('task_id', 'task')), kind, metric_name,
                splits['train'], splits['dev'], num_labels)
