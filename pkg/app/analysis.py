# app/analysis.py
"""报告导出：损失-得分、迭代预算曲线、掩码相似度、训练数据缩减。全部写成 CSV。"""
import logging
import os

import numpy as np
import pandas as pd
from scipy.stats import pearsonr

from app.experiment import FLOAT_FORMAT, MAIN_SWEEP
from tamt.errors import InvalidArgumentError, TamtError
from tamt.masking import jaccard, mask_distance

logger = logging.getLogger(__name__)

CORRELATION_METHODS = ('OMP', 'RAND', 'TAMT')


def _write(frame, output_dir, name):
    path = os.path.join(output_dir, name)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def correlation(x, y):
    """样本 Pearson 相关系数；少于两个点或有常量序列时为 None。"""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2 or np.std(x) == 0 or np.std(y) == 0:
        return None
    return float(pearsonr(x, y)[0])


def loss_vs_score(report):
    searches = report.searches[report.searches.status == 'done']
    if searches.empty:
        raise TamtError(f'{report.spec_name}: no pre-training records to export')
    keys = ['method', 'sparsity', 'seed', 'pretrain_steps']
    frame = searches[keys + ['mlm_dev_loss', 'kd_dev_loss']].merge(report.scores(), on=keys,
                                                                     how='inner')
    return frame[keys + ['mlm_dev_loss', 'kd_dev_loss', 'avg_score']].sort_values(
        keys, ignore_index=True)


def export_loss_vs_score(report, output_dir=None):
    output_dir = output_dir or report.output_dir
    frame = loss_vs_score(report)
    rows = []
    subsets = {
        'all': frame,
        'omp_rand_tamt': frame[frame.method.str.split('-').str[0].isin(CORRELATION_METHODS)],
    }
    for subset, part in subsets.items():
        for loss in ('mlm_dev_loss', 'kd_dev_loss'):
            rows.append({'subset': subset, 'loss': loss, 'n': len(part),
                         'pearson': correlation(part[loss], part['avg_score'])})
    paths = [_write(frame, output_dir, 'loss_vs_score.csv'),
             _write(pd.DataFrame(rows), output_dir, 'loss_vs_score_correlation.csv')]
    return paths


def budget_curve(report):
    searches = report.searches
    budget = searches[(searches.status == 'done') & (searches.pretrain_steps != MAIN_SWEEP)]
    keys = ['method', 'sparsity', 'seed', 'pretrain_steps']
    frame = budget[keys + ['wall_ms']].merge(report.scores(), on=keys, how='inner')
    return frame[keys + ['wall_ms', 'avg_score']].sort_values(keys, ignore_index=True)


def budget_summary(curve):
    """每个稀疏度：IMP 的最好得分、TAMT 首次达到它的步数与加速比。"""
    rows = []
    mean = curve.groupby(['method', 'sparsity', 'pretrain_steps'], as_index=False).avg_score.mean()
    for sparsity, part in mean.groupby('sparsity'):
        imp = part[part.method == 'IMP']
        tamt = part[part.method == 'TAMT-MLM'].sort_values('pretrain_steps')
        if imp.empty or tamt.empty:
            continue
        best = imp.loc[imp.avg_score.idxmax()]
        reached = tamt[tamt.avg_score >= best.avg_score - 1e-12]
        first = int(reached.pretrain_steps.iloc[0]) if not reached.empty else None
        speedup = None
        if first is not None and first > 0:
            speedup = float(best.pretrain_steps) / first
        rows.append({'sparsity': sparsity, 'imp_best_score': best.avg_score,
                     'imp_best_steps': int(best.pretrain_steps),
                     'imp_total_steps': int(imp.pretrain_steps.max()),
                     'tamt_steps_to_match': first, 'speedup': speedup})
    return pd.DataFrame(rows, columns=['sparsity', 'imp_best_score', 'imp_best_steps',
                                       'imp_total_steps', 'tamt_steps_to_match', 'speedup'])


def export_budget_curve(report, output_dir=None):
    output_dir = output_dir or report.output_dir
    curve = budget_curve(report)
    return [_write(curve, output_dir, 'budget_curve.csv'),
            _write(budget_summary(curve), output_dir, 'budget_summary.csv')]


def similarity_matrix(checkpoints, labels):
    if len(checkpoints) < 2:
        raise InvalidArgumentError('similarity needs at least two checkpoints')
    n = len(checkpoints)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = jaccard(checkpoints[i], checkpoints[j])
    return pd.DataFrame(matrix, index=labels, columns=labels)


def _main_checkpoints(report, sparsity):
    rows = report.done_searches()
    rows = rows[(rows.sparsity - sparsity).abs() < 1e-9].sort_values(['method', 'seed'])
    return [(f'{r.method}/seed{r.seed}', r) for r in rows.itertuples()]


def export_similarity(report, output_dir=None):
    output_dir = output_dir or report.output_dir
    paths = []
    main = report.done_searches()
    for sparsity in sorted(set(main.sparsity)):
        if sparsity == 0.0:
            continue
        entries = _main_checkpoints(report, sparsity)
        if len(entries) < 2:
            continue
        ckpts = [report.checkpoint(r._asdict()) for _, r in entries]
        frame = similarity_matrix(ckpts, [label for label, _ in entries])
        path = os.path.join(output_dir, f'similarity_S{sparsity:.2f}.csv')
        frame.to_csv(path, float_format=FLOAT_FORMAT, index_label='checkpoint')
        paths.append(path)
    paths.append(_write(distance_vs_score(report), output_dir, 'distance_vs_score.csv'))
    return paths


def distance_vs_score(report):
    """每个 TAMT/IMP 子网络到同稀疏度、同种子 OMP 掩码的距离，以及它的 avg score。"""
    searches = report.searches[report.searches.status == 'done']
    omp = {(round(r.sparsity, 6), r.seed): r for r in searches[
        (searches.method == 'OMP') & (searches.pretrain_steps == MAIN_SWEEP)].itertuples()}
    scores = report.scores().set_index(['method', 'sparsity', 'seed', 'pretrain_steps'])
    rows = []
    for r in searches[searches.method.str.startswith(('TAMT', 'IMP'))].itertuples():
        base = omp.get((round(r.sparsity, 6), r.seed))
        key = (r.method, r.sparsity, r.seed, r.pretrain_steps)
        if base is None or key not in scores.index:
            continue
        distance = mask_distance(report.checkpoint(r._asdict()), report.checkpoint(base._asdict()))
        rows.append({'method': r.method, 'sparsity': r.sparsity, 'seed': r.seed,
                     'pretrain_steps': r.pretrain_steps, 'distance_to_omp': distance,
                     'avg_score': float(scores.loc[key, 'avg_score'])})
    columns = ['method', 'sparsity', 'seed', 'pretrain_steps', 'distance_to_omp', 'avg_score']
    return pd.DataFrame(rows, columns=columns).sort_values(columns[:4], ignore_index=True)


def data_reduction(report):
    ft = report.finetunes[(report.finetunes.status == 'done')
                          & (report.finetunes.pretrain_steps == MAIN_SWEEP)]
    columns = ['method', 'sparsity', 'train_size', 'task', 'mean', 'stddev', 'n_seeds']
    if ft.empty:
        return pd.DataFrame(columns=columns)
    per_seed = ft.groupby(['method', 'sparsity', 'train_size', 'task', 'seed'],
                          as_index=False).raw_value.mean()
    grouped = per_seed.groupby(['method', 'sparsity', 'train_size', 'task']).raw_value
    frame = grouped.agg(mean='mean', stddev='std', n_seeds='count').reset_index()
    # 单个种子的标准差记为 0，n_seeds 列标明样本数
    frame['stddev'] = frame['stddev'].fillna(0.0)
    return frame[columns].sort_values(['method', 'sparsity', 'task', 'train_size'],
                                      ascending=[True, True, True, False], ignore_index=True)


def export_data_reduction(report, output_dir=None):
    return _write(data_reduction(report), output_dir or report.output_dir, 'data_reduction.csv')


def export_all(report, output_dir=None):
    output_dir = output_dir or report.output_dir
    os.makedirs(output_dir, exist_ok=True)
    written = {'results': report.write_results()}
    exporters = {'loss_vs_score': export_loss_vs_score, 'budget_curve': export_budget_curve,
                 'similarity': export_similarity, 'data_reduction': export_data_reduction}
    for name, export in exporters.items():
        try:
            written[name] = export(report, output_dir)
        except TamtError as exc:
            logger.warning('%s export skipped: %s', name, exc)
    return written
