# app/experiment.py
"""实验编排：搜索子网络 → 微调 → 评估，结果写入报告库，按单元断点续跑。"""
import logging
import os
import re
import zlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from app import db
from app import models
from config import dump_config, load_config, resolve_config
from tamt.data import (DEFAULT_TEXT_LEN, build_corpus, leak_check, load_corpus, make_task,
                       save_corpus, task_alphabet)
from tamt.downstream import FineTuneConfig, avg_score, fine_tune, load_task, normalized_score
from tamt.errors import ConfigError, UnknownTaskError
from tamt.masking import (SparsityTarget, SubnetworkCheckpoint, omp_mask, random_mask,
                          sparsity_of)
from tamt.pretrain import (ImpSchedule, PretrainConfig, eval_pretrain, imp_run, matched_budget,
                           tamt_train)
from tamt.transformer import ModelConfig, init_pretrained, load_weights, save_mlm_head, save_weights

logger = logging.getLogger(__name__)

METHOD_PATTERN = re.compile(r'^(OMP|IMP|RAND|FULL|TAMT-(MLM\+KD|MLM|KD)(-RI)?)$')
MAIN_SWEEP = -1
FLOAT_FORMAT = '%.6f'


@dataclass(frozen=True)
class Method:
    name: str
    family: str
    objective: str = None
    mask_init: str = 'omp'


def parse_method(name):
    match = METHOD_PATTERN.match(name)
    if not match:
        raise ConfigError(f'unknown method {name!r}')
    if match.group(2):
        return Method(name, 'TAMT', match.group(2), 'random' if match.group(3) else 'omp')
    return Method(name, name)


# --- 实验描述 ---

@dataclass
class ExperimentSpec:
    name: str
    methods: list
    sparsities: list
    seeds: list
    config: dict
    output_dir: str
    train_sizes: list = field(default_factory=list)
    budget_sparsity: list = field(default_factory=list)
    budget_steps: list = field(default_factory=list)
    repeats: int = 1
    max_workers: int = 1
    theta0_path: str = None

    def __post_init__(self):
        if not self.methods or not self.sparsities or not self.seeds:
            raise ConfigError('an experiment needs at least one method, sparsity and seed')
        for name in self.methods:
            parse_method(name)
        for s in list(self.sparsities) + list(self.budget_sparsity):
            SparsityTarget(s)
        if self.repeats < 1 or self.max_workers < 1:
            raise ConfigError('repeats and max_workers must be positive')
        if self.budget_sparsity and not self.budget_steps:
            raise ConfigError('budget_sparsity needs budget_steps')
        self.budget_steps = sorted(set(int(s) for s in self.budget_steps))
        if self.budget_steps and self.budget_steps[0] < 0:
            raise ConfigError('budget_steps must be non-negative')

    @classmethod
    def from_config(cls, resolved, output_root=None):
        exp = resolved['experiment']
        name = exp['name']
        output_dir = exp['output_dir'] or os.path.join(output_root or 'runs', name)
        return cls(name=name, methods=list(exp['methods']),
                   sparsities=[float(s) for s in exp['sparsities']],
                   seeds=[int(s) for s in exp['seeds']], config=resolved, output_dir=output_dir,
                   train_sizes=[int(n) for n in exp['train_sizes']],
                   budget_sparsity=[float(s) for s in exp['budget_sparsity']],
                   budget_steps=list(exp['budget_steps']),
                   repeats=int(resolved['finetune']['repeats']),
                   max_workers=int(exp['max_workers'] or 1), theta0_path=exp['theta0'])

    @classmethod
    def from_yaml(cls, path, output_root=None):
        return cls.from_config(load_config(path), output_root)

    @classmethod
    def from_dict(cls, raw, output_root=None):
        return cls.from_config(resolve_config(raw), output_root)

    @property
    def pretrain(self):
        return self.config['pretrain']

    def all_methods(self):
        """报告中总是包含 OMP 与全模型基线。"""
        names = list(self.methods)
        if 'OMP' not in names:
            names.insert(0, 'OMP')
        return names

    def model_config(self, vocab_size):
        return ModelConfig(vocab_size=vocab_size, **self.config['model'])

    def mask_lr(self, objective):
        """KD 目标单独一个掩码学习率，MLM 与 MLM+KD 共用另一个。"""
        p = self.pretrain
        return p['mask_lr_kd'] if objective == 'KD' else p['mask_lr_mlm']

    def pretrain_config(self, method, seed, max_steps, checkpoint_steps=(), progress=False):
        p = self.pretrain
        return PretrainConfig(objective=method.objective, lr=p['lr'],
                              mask_lr=self.mask_lr(method.objective),
                              batch_size=p['batch_size'], max_steps=max_steps,
                              mlm_mask_prob=p['mlm_mask_prob'], lambda_mlm=p['lambda_mlm'],
                              lambda_kd=p['lambda_kd'], seed=seed, eval_every=p['eval_every'],
                              checkpoint_steps=checkpoint_steps, alpha=p['alpha'],
                              threshold=p['threshold'], mask_init=method.mask_init,
                              progress=progress)

    def imp_config(self, seed, progress=False):
        p = self.pretrain
        return PretrainConfig(objective='MLM', lr=p['lr'], batch_size=p['batch_size'],
                              max_steps=p['imp_total_steps'], mlm_mask_prob=p['mlm_mask_prob'],
                              seed=seed, eval_every=p['eval_every'], progress=progress)

    def finetune_config(self, seed, train_size=None, progress=False):
        f = self.config['finetune']
        return FineTuneConfig(lr=f['lr'], batch_size=f['batch_size'], epochs=f['epochs'],
                              eval_every=f['eval_every'], seed=seed, train_size=train_size,
                              betas=tuple(f['betas']), weight_decay=f['weight_decay'],
                              span_lr=f['span_lr'], progress=progress)

    def tamt_steps(self, sparsity):
        p = self.pretrain
        if p['max_steps'] is not None:
            return int(p['max_steps'])
        return matched_budget(sparsity, p['imp_total_steps'], p['imp_increment'])


def finetune_seed(seed, repeat, task_id):
    """只由 (种子, 重复序号, 任务) 决定，与方法无关。"""
    digest = zlib.crc32(task_id.encode('utf-8'))
    return int(np.random.SeedSequence([int(seed), int(repeat), digest]).generate_state(1)[0])


# --- 数据与 θ₀ ---

@dataclass
class Workbench:
    theta0: object
    train: object
    dev: object
    tasks: list


def _load_corpora(data, max_len):
    cache = data['cache']
    if cache and os.path.exists(os.path.join(cache, 'train.npz')):
        train = load_corpus(os.path.join(cache, 'train.npz'))
        dev = load_corpus(os.path.join(cache, 'dev.npz'))
        logger.info('Loaded corpus cache from %s', cache)
    else:
        if not data['corpus']:
            raise ConfigError('data.corpus lists no input files')
        train, dev = build_corpus(data['corpus'], max_len, data['dev_fraction'], data['seed'])
        if cache:
            os.makedirs(cache, exist_ok=True)
            save_corpus(train, os.path.join(cache, 'train.npz'))
            save_corpus(dev, os.path.join(cache, 'dev.npz'))
    leaked = leak_check(train, dev)
    if leaked:
        logger.warning('%d dev sequences also occur in the train split', len(leaked))
    return train, dev


def _build_tasks(data, vocab, max_len):
    if data['task_files']:
        return [load_task(path) for path in data['task_files']]
    alphabet = task_alphabet(vocab)
    length = min(DEFAULT_TEXT_LEN, max_len - 3)
    sizes = (data['task_train_size'], data['task_dev_size'])
    return [make_task(family, sizes, data['seed'] + i, alphabet, length)
            for i, family in enumerate(data['task_families'])]


def prepare(spec, progress=False):
    data = spec.config['data']
    max_len = spec.config['model']['max_len']
    train, dev = _load_corpora(data, max_len)
    os.makedirs(spec.output_dir, exist_ok=True)

    theta0_path = spec.theta0_path or os.path.join(spec.output_dir, 'theta0.weights')
    if os.path.exists(theta0_path):
        theta0 = load_weights(theta0_path)
        if theta0.config.vocab_size != train.vocab_size:
            raise ConfigError(f'{theta0_path}: vocabulary size {theta0.config.vocab_size} does not '
                              f'match the corpus ({train.vocab_size})')
    else:
        theta0 = init_pretrained(spec.model_config(train.vocab_size), train,
                                 spec.pretrain['init_steps'], data['seed'],
                                 batch_size=spec.pretrain['batch_size'], lr=spec.pretrain['lr'],
                                 mask_prob=spec.pretrain['mlm_mask_prob'], progress=progress)
        save_weights(theta0, theta0_path)
        logger.info('Saved θ0 to %s', theta0_path)
    return Workbench(theta0, train, dev, _build_tasks(data, train.vocab, max_len))


# --- 搜索 ---

@dataclass
class SearchOutcome:
    method: str
    sparsity: float
    seed: int
    pretrain_steps: int
    checkpoint: SubnetworkCheckpoint
    trace: list
    mlm_dev_loss: float
    kd_dev_loss: float
    wall_ms: float
    mlm_head: dict = None


def _outcome(method, sparsity, seed, steps, ckpt, trace, wall_ms, wb, losses=None, mlm_head=None):
    """``losses`` 为空时在 θ₀ 上套用掩码重新评估。"""
    if losses is None:
        losses = eval_pretrain(ckpt, wb.dev, wb.theta0, mlm_head=mlm_head)
    mlm, kd = losses
    return SearchOutcome(method, sparsity, seed, steps, ckpt, trace, mlm, kd, wall_ms, mlm_head)


def _tamt_outcome(method_name, sparsity, seed, steps, result, at_step, cfg, wb, trace):
    ckpt = result.checkpoints[at_step] if at_step in result.checkpoints else result.checkpoint
    ckpt = ckpt.relabel(method=method_name)
    head = result.mlm_heads.get(at_step) if cfg.uses_mlm else None
    return _outcome(method_name, sparsity, seed, steps, ckpt, trace, result.wall_ms[at_step], wb,
                    losses=result.dev_losses.get(at_step), mlm_head=head)


def search_once(spec, wb, method_name, sparsity, seed, progress=False):
    """主实验中的一个搜索单元。"""
    method = parse_method(method_name)
    logger.info('%s S=%.2f seed %d: search started', method_name, sparsity, seed)
    target = SparsityTarget(sparsity)
    shapes = {n: p.shape for n, p in wb.theta0.prunable.items()}
    if method.family == 'FULL':
        ckpt = SubnetworkCheckpoint.all_ones(shapes, 'FULL', seed)
        return [_outcome('FULL', 0.0, seed, MAIN_SWEEP, ckpt, [], 0.0, wb)]
    if method.family == 'OMP':
        ckpt = omp_mask(wb.theta0.weights(), target, seed)
        return [_outcome(method_name, sparsity, seed, MAIN_SWEEP, ckpt, [], 0.0, wb)]
    if method.family == 'RAND':
        ckpt = random_mask(shapes, target, seed)
        return [_outcome(method_name, sparsity, seed, MAIN_SWEEP, ckpt, [], 0.0, wb)]
    if method.family == 'IMP':
        p = spec.pretrain
        sched = ImpSchedule.for_target(sparsity, p['imp_total_steps'], p['imp_increment'])
        result = imp_run(wb.theta0, target, sched, spec.imp_config(seed, progress), wb.train, wb.dev)
        return [_outcome(method_name, sparsity, seed, MAIN_SWEEP, result.checkpoint, result.trace,
                         sum(result.wall_ms.values()), wb,
                         losses=result.dev_losses.get(result.final_step))]
    cfg = spec.pretrain_config(method, seed, spec.tamt_steps(sparsity), progress=progress)
    result = tamt_train(wb.theta0.clone(), wb.theta0, target, cfg, wb.train, wb.dev, method_name)
    return [_tamt_outcome(method_name, sparsity, seed, MAIN_SWEEP, result, cfg.max_steps, cfg, wb,
                          result.trace)]


def search_budget_tamt(spec, wb, sparsity, seed, progress=False):
    """一次 TAMT-MLM 训练，在每个预算步数处保存检查点。"""
    method = parse_method('TAMT-MLM')
    steps = spec.budget_steps
    cfg = spec.pretrain_config(method, seed, max(steps), checkpoint_steps=steps, progress=progress)
    result = tamt_train(wb.theta0.clone(), wb.theta0, SparsityTarget(sparsity), cfg, wb.train,
                        wb.dev, 'TAMT-MLM')
    return [_tamt_outcome('TAMT-MLM', sparsity, seed, step, result, step, cfg, wb,
                          [p for p in result.trace if p.step <= step])
            for step in steps]


def imp_budget_schedule(sparsity, budget, increment):
    """把 IMP 的训练步数分配到各阶段，使目标稀疏度恰好在第 ``budget`` 步达到。

    余数分给靠前的阶段；``budget`` 为 0 时所有剪枝都在第 0 步完成，不做训练。
    """
    base = ImpSchedule.for_target(sparsity, 10, increment)
    stages = len(base.increments) - 1
    if stages <= 0:
        return base
    share, extra = divmod(int(budget), stages)
    lengths = [share + 1 if i < extra else share for i in range(stages)]
    return ImpSchedule(total_steps=int(budget), increments=base.increments,
                       stage_length=max(1, share), stage_lengths=lengths)


def search_budget_imp(spec, wb, sparsity, seed, budget, progress=False):
    sched = imp_budget_schedule(sparsity, budget, spec.pretrain['imp_increment'])
    result = imp_run(wb.theta0, SparsityTarget(sparsity), sched, spec.imp_config(seed, progress),
                     wb.train, wb.dev)
    # 只有一次剪枝时不训练，步数仍按预算记录
    return [_outcome('IMP', sparsity, seed, int(budget), result.checkpoint, result.trace,
                     sum(result.wall_ms.values()), wb,
                     losses=result.dev_losses.get(result.final_step))]


# --- 断点续跑记录 ---

def _key(method, sparsity, seed, steps):
    return (method, round(float(sparsity), 6), int(seed), int(steps))


def _done_searches(spec_name):
    return {r.key(): r for r in models.SearchRecord.query.filter_by(spec_name=spec_name, status='done')}


def _done_finetunes(spec_name):
    return {r.key() for r in models.FinetuneRecord.query.filter_by(spec_name=spec_name, status='done')}


def _clear(model, spec_name, **key):
    model.query.filter_by(spec_name=spec_name, **key).delete()


def _checkpoint_path(spec, outcome):
    tag = '' if outcome.pretrain_steps == MAIN_SWEEP else f'_step{outcome.pretrain_steps}'
    name = f'{outcome.method}_S{outcome.sparsity:.2f}_seed{outcome.seed}{tag}'
    return os.path.join(spec.output_dir, 'checkpoints', f'{name}.mask'), \
        os.path.join(spec.output_dir, 'traces', f'{name}.csv')


def write_trace_csv(trace, path):
    frame = pd.DataFrame([vars(p) for p in trace],
                         columns=['step', 'wall_ms', 'train_loss', 'dev_mlm_loss', 'dev_kd_loss',
                                  'sparsity'])
    frame.sort_values('step').to_csv(path, index=False, float_format=FLOAT_FORMAT)


def mlm_head_path(ckpt_path):
    """与掩码文件同名的 MLM 头文件。"""
    return os.path.splitext(ckpt_path)[0] + '.head.npz'


def _store_search(spec, outcome):
    ckpt_path, trace_path = _checkpoint_path(spec, outcome)
    os.makedirs(os.path.dirname(ckpt_path), exist_ok=True)
    os.makedirs(os.path.dirname(trace_path), exist_ok=True)
    outcome.checkpoint.save(ckpt_path)
    if outcome.mlm_head is not None:
        save_mlm_head(outcome.mlm_head, mlm_head_path(ckpt_path))
    write_trace_csv(outcome.trace, trace_path)
    _clear(models.SearchRecord, spec.name, method=outcome.method, sparsity=outcome.sparsity,
           seed=outcome.seed, pretrain_steps=outcome.pretrain_steps)
    record = models.SearchRecord(
        spec_name=spec.name, method=outcome.method, sparsity=outcome.sparsity, seed=outcome.seed,
        pretrain_steps=outcome.pretrain_steps, checkpoint_path=ckpt_path,
        mlm_dev_loss=outcome.mlm_dev_loss, kd_dev_loss=outcome.kd_dev_loss,
        wall_ms=outcome.wall_ms, status='done')
    db.session.add(record)
    if outcome.pretrain_steps == MAIN_SWEEP:
        _clear(models.TracePoint, spec.name, method=outcome.method, sparsity=outcome.sparsity,
               seed=outcome.seed)
        db.session.add_all([models.TracePoint(
            spec_name=spec.name, method=outcome.method, sparsity=outcome.sparsity, seed=outcome.seed,
            step=p.step, wall_ms=p.wall_ms, train_loss=_finite(p.train_loss),
            dev_mlm_loss=_finite(p.dev_mlm_loss), dev_kd_loss=_finite(p.dev_kd_loss),
            sparsity_measured=p.sparsity) for p in outcome.trace])
    db.session.commit()
    return record


def _finite(value):
    return None if value is None or not np.isfinite(value) else float(value)


def _store_search_failure(spec, key, error):
    method, sparsity, seed, steps = key
    _clear(models.SearchRecord, spec.name, method=method, sparsity=sparsity, seed=seed,
           pretrain_steps=steps)
    db.session.add(models.SearchRecord(spec_name=spec.name, method=method, sparsity=sparsity,
                                       seed=seed, pretrain_steps=steps, status='failed',
                                       error=str(error)))
    db.session.commit()


# --- 编排 ---

@dataclass
class SearchJob:
    keys: list
    fn: object
    args: tuple


def search_jobs(spec, done):
    jobs = []
    for seed in spec.seeds:
        full_key = _key('FULL', 0.0, seed, MAIN_SWEEP)
        if full_key not in done:
            jobs.append(SearchJob([full_key], search_once, ('FULL', 0.0, seed)))
        for method in spec.all_methods():
            for s in spec.sparsities:
                key = _key(method, s, seed, MAIN_SWEEP)
                if key not in done:
                    jobs.append(SearchJob([key], search_once, (method, s, seed)))
        for s in spec.budget_sparsity:
            keys = [_key('TAMT-MLM', s, seed, b) for b in spec.budget_steps]
            if any(k not in done for k in keys):
                jobs.append(SearchJob(keys, search_budget_tamt, (s, seed)))
            for b in spec.budget_steps:
                key = _key('IMP', s, seed, b)
                if key not in done:
                    jobs.append(SearchJob([key], search_budget_imp, (s, seed, b)))
    return jobs


@dataclass(frozen=True)
class SearchCell:
    """搜索记录的只读快照，可以离开会话交给工作线程。"""
    method: str
    sparsity: float
    seed: int
    pretrain_steps: int
    checkpoint_path: str = None
    error: str = None

    @classmethod
    def of(cls, record):
        return cls(record.method, float(record.sparsity), int(record.seed),
                   int(record.pretrain_steps), record.checkpoint_path, record.error)

    def key(self):
        return _key(self.method, self.sparsity, self.seed, self.pretrain_steps)


@dataclass
class FinetuneJob:
    cell: SearchCell
    task: object
    train_size: int
    repeat: int

    def key(self):
        return self.cell.key() + (self.task.task_id, self.train_size, self.repeat)


def _train_sizes(spec, task):
    full = len(task.train)
    sizes = {full}
    for n in spec.train_sizes:
        if n > full:
            logger.warning('train size %d exceeds %s train set (%d); skipped', n, task.task_id, full)
        elif n >= 1:
            sizes.add(n)
    return sorted(sizes, reverse=True)


def finetune_jobs(spec, wb, searches, done):
    jobs = []
    for record in searches.values():
        cell = SearchCell.of(record)
        # 数据量缩减实验只针对主实验的子网络
        sizes_for = _train_sizes if cell.pretrain_steps == MAIN_SWEEP else \
            (lambda _spec, task: [len(task.train)])
        for task in wb.tasks:
            for n in sizes_for(spec, task):
                for repeat in range(spec.repeats):
                    job = FinetuneJob(cell, task, n, repeat)
                    if job.key() not in done:
                        jobs.append(job)
    return jobs


def run_finetune(spec, wb, job, ckpt_cache):
    logger.debug('fine-tune started: %s on %s, n=%d, repeat %d', job.cell.method, job.task.task_id,
                 job.train_size, job.repeat)
    ckpt = ckpt_cache.get(job.cell.checkpoint_path)
    if ckpt is None:
        ckpt = SubnetworkCheckpoint.load(job.cell.checkpoint_path)
    seed = finetune_seed(job.cell.seed, job.repeat, job.task.task_id)
    size = None if job.train_size == len(job.task.train) else job.train_size
    cfg = spec.finetune_config(seed, size)
    result = fine_tune(ckpt, wb.theta0, job.task, cfg, wb.train.vocab)
    return result.best_metric


def _store_finetune(spec, job, value=None, error=None):
    rec = job.cell
    _clear(models.FinetuneRecord, spec.name, method=rec.method, sparsity=rec.sparsity, seed=rec.seed,
           pretrain_steps=rec.pretrain_steps, task=job.task.task_id, train_size=job.train_size,
           repeat=job.repeat)
    row = models.FinetuneRecord(
        spec_name=spec.name, method=rec.method, sparsity=rec.sparsity, seed=rec.seed,
        pretrain_steps=rec.pretrain_steps, task=job.task.task_id, metric_name=job.task.metric,
        train_size=job.train_size, repeat=job.repeat)
    if error is None:
        row.raw_value = value
        row.value = normalized_score(job.task.metric, value)
        row.status = 'done'
    else:
        row.status = 'failed'
        row.error = str(error)
    db.session.add(row)
    db.session.commit()


def _dispatch(max_workers, jobs, submit, on_done, on_error):
    """工作线程只做计算；写库和写文件都在调用线程里串行完成。"""
    if not jobs:
        return
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {pool.submit(submit, job): job for job in jobs}
        for future in as_completed(futures):
            job = futures[future]
            try:
                result = future.result()
            except Exception as exc:  # noqa: BLE001  单元失败不影响其余单元
                logger.exception('cell failed: %s', exc)
                on_error(job, exc)
            else:
                on_done(job, result)


def run(spec, wb=None, progress=False):
    """执行 (或续跑) 整个实验，返回汇总报告。需要在应用上下文中调用。"""
    os.makedirs(spec.output_dir, exist_ok=True)
    dump_config(spec.config, os.path.join(spec.output_dir, 'resolved_config.yaml'))
    wb = wb or prepare(spec, progress)

    done = _done_searches(spec.name)
    jobs = search_jobs(spec, done)
    logger.info('%s: %d search jobs (%d cells already done)', spec.name, len(jobs), len(done))
    ckpt_cache = {}

    def on_search(job, outcomes):
        for outcome in outcomes:
            record = _store_search(spec, outcome)
            ckpt_cache[record.checkpoint_path] = outcome.checkpoint
            logger.info('%s S=%.2f seed %d steps %d: sparsity %.4f, dev mlm %.4f, dev kd %.4f',
                        outcome.method, outcome.sparsity, outcome.seed, outcome.pretrain_steps,
                        sparsity_of(outcome.checkpoint), outcome.mlm_dev_loss, outcome.kd_dev_loss)

    def on_search_error(job, exc):
        for key in job.keys:
            _store_search_failure(spec, key, exc)

    _dispatch(spec.max_workers, jobs, lambda j: j.fn(spec, wb, *j.args, progress=progress),
              on_search, on_search_error)

    searches = _done_searches(spec.name)
    _mark_orphaned_finetunes(spec, wb)
    ft_jobs = finetune_jobs(spec, wb, searches, _done_finetunes(spec.name))
    logger.info('%s: %d fine-tuning jobs', spec.name, len(ft_jobs))
    _dispatch(spec.max_workers, ft_jobs, lambda j: run_finetune(spec, wb, j, ckpt_cache),
              lambda j, v: _store_finetune(spec, j, value=v),
              lambda j, exc: _store_finetune(spec, j, error=exc))

    report = ExperimentReport.load(spec.name, spec.output_dir)
    report.write_results()
    return report


def _mark_orphaned_finetunes(spec, wb):
    """搜索失败的单元也为每个任务记一条失败的微调记录。"""
    failed = [SearchCell.of(r) for r in
              models.SearchRecord.query.filter_by(spec_name=spec.name, status='failed')]
    for rec in failed:
        for task in wb.tasks:
            for repeat in range(spec.repeats):
                job = FinetuneJob(rec, task, len(task.train), repeat)
                _store_finetune(spec, job, error=f'search failed: {rec.error}')


# --- 报告 ---

SEARCH_COLUMNS = ['method', 'sparsity', 'seed', 'pretrain_steps', 'checkpoint_path', 'mlm_dev_loss',
                  'kd_dev_loss', 'wall_ms', 'status', 'error']
FINETUNE_COLUMNS = ['method', 'sparsity', 'seed', 'pretrain_steps', 'task', 'metric_name', 'value',
                    'raw_value', 'train_size', 'repeat', 'status', 'error']
TRACE_COLUMNS = ['method', 'sparsity', 'seed', 'step', 'wall_ms', 'train_loss', 'dev_mlm_loss',
                 'dev_kd_loss', 'sparsity_measured']


def _frame(rows, columns):
    return pd.DataFrame([{c: getattr(r, c) for c in columns} for r in rows], columns=columns)


@dataclass
class ExperimentReport:
    spec_name: str
    output_dir: str
    searches: pd.DataFrame
    finetunes: pd.DataFrame
    traces: pd.DataFrame

    @classmethod
    def load(cls, spec_name, output_dir):
        q = dict(spec_name=spec_name)
        return cls(spec_name, output_dir,
                   _frame(models.SearchRecord.query.filter_by(**q).all(), SEARCH_COLUMNS),
                   _frame(models.FinetuneRecord.query.filter_by(**q).all(), FINETUNE_COLUMNS),
                   _frame(models.TracePoint.query.filter_by(**q).all(), TRACE_COLUMNS))

    @property
    def failures(self):
        s = self.searches[self.searches.status == 'failed']
        f = self.finetunes[self.finetunes.status == 'failed']
        return pd.concat([s.assign(kind='search'), f.assign(kind='finetune')], ignore_index=True)

    @property
    def ok(self):
        return self.failures.empty

    def done_searches(self, main_only=True):
        frame = self.searches[self.searches.status == 'done']
        if main_only:
            frame = frame[frame.pretrain_steps == MAIN_SWEEP]
        return frame

    def checkpoint(self, row):
        return SubnetworkCheckpoint.load(row['checkpoint_path'])

    def scores(self, train_size=None):
        """每个子网络的 avg score：先按任务平均重复次数，再在任务间取平均。"""
        keys = ['method', 'sparsity', 'seed', 'pretrain_steps']
        ft = self.finetunes[self.finetunes.status == 'done']
        if not ft.empty:
            if train_size is None:
                ft = ft[ft.train_size == ft.groupby('task').train_size.transform('max')]
            else:
                ft = ft[ft.train_size == train_size]
        if ft.empty:
            return pd.DataFrame(columns=keys + ['avg_score'])
        expected = sorted(set(self.finetunes.task))
        per_task = ft.groupby(keys + ['task', 'metric_name'], as_index=False).raw_value.mean()
        rows = []
        for key, group in per_task.groupby(keys):
            results = {r.task: (r.metric_name, r.raw_value) for r in group.itertuples()}
            try:
                rows.append(dict(zip(keys, key), avg_score=avg_score(results, expected)))
            except UnknownTaskError as exc:
                # 缺任务的子网络不计分，否则只在部分任务上取平均
                logger.warning('%s S=%.2f seed %d steps %d left out of scores: %s', *key, exc)
        if not rows:
            return pd.DataFrame(columns=keys + ['avg_score'])
        return pd.DataFrame(rows).sort_values(keys, ignore_index=True)

    def results_frame(self):
        ft = self.finetunes[self.finetunes.status == 'done']
        cols = ['method', 'sparsity', 'seed', 'pretrain_steps', 'task', 'train_size', 'repeat',
                'metric_name', 'value']
        return ft[cols].sort_values(cols[:7], ignore_index=True)

    def write_results(self):
        path = os.path.join(self.output_dir, 'results.csv')
        self.results_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)
        if not self.failures.empty:
            self.failures[['kind', 'method', 'sparsity', 'seed', 'error']].sort_values(
                ['kind', 'method', 'sparsity', 'seed'], ignore_index=True).to_csv(
                os.path.join(self.output_dir, 'failures.csv'), index=False)
        return path

