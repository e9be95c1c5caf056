# tests/test_experiment.py
import os

import numpy as np
import pandas as pd
import pytest

from app import db, models
from app.analysis import (correlation, data_reduction, export_all, similarity_matrix)
from app.experiment import (FINETUNE_COLUMNS, MAIN_SWEEP, ExperimentReport, ExperimentSpec,
                            SearchCell, _done_finetunes, _done_searches, finetune_jobs,
                            finetune_seed, imp_budget_schedule, mlm_head_path, parse_method,
                            prepare, run, run_finetune, search_jobs)
from tamt.errors import ConfigError, InvalidArgumentError, TrainingAbortedError
from tamt.masking import SparsityTarget, SubnetworkCheckpoint
from tamt.pretrain import eval_pretrain
from tamt.transformer import load_mlm_head
from tests.conftest import toy_experiment


def _spec(corpus_file, tmp_path, **experiment):
    return ExperimentSpec.from_dict(toy_experiment(corpus_file, tmp_path / 'run', **experiment))


class TestMethods:

    @pytest.mark.parametrize('name,family,objective,init', [
        ('OMP', 'OMP', None, 'omp'),
        ('TAMT-MLM', 'TAMT', 'MLM', 'omp'),
        ('TAMT-MLM+KD', 'TAMT', 'MLM+KD', 'omp'),
        ('TAMT-KD-RI', 'TAMT', 'KD', 'random'),
    ])
    def test_parse(self, name, family, objective, init):
        m = parse_method(name)
        assert (m.family, m.objective, m.mask_init) == (family, objective, init)

    @pytest.mark.parametrize('bad', ['TAMT', 'TAMT-NSP', 'omp', 'IMP-RI'])
    def test_reject(self, bad):
        with pytest.raises(ConfigError):
            parse_method(bad)


class TestSpec:

    def test_defaults_fill_in(self, corpus_file, tmp_path):
        spec = _spec(corpus_file, tmp_path)
        assert spec.config['pretrain']['mask_lr_mlm'] == 0.5
        assert spec.config['pretrain']['mask_lr_kd'] == 0.2
        assert spec.config['finetune']['span_lr'] is None
        assert spec.all_methods() == ['OMP']
        assert spec.tamt_steps(0.5) == 4

    @pytest.mark.parametrize('method,mask_lr', [
        ('TAMT-MLM', 0.5), ('TAMT-MLM+KD', 0.5), ('TAMT-KD', 0.2), ('TAMT-KD-RI', 0.2)])
    def test_mask_lr_follows_objective(self, corpus_file, tmp_path, method, mask_lr):
        spec = _spec(corpus_file, tmp_path)
        assert spec.pretrain_config(parse_method(method), 0, 4).mask_lr == mask_lr

    def test_matched_budget_when_max_steps_unset(self, corpus_file, tmp_path):
        raw = toy_experiment(corpus_file, tmp_path)
        raw['pretrain']['max_steps'] = None
        spec = ExperimentSpec.from_dict(raw)
        # imp_total_steps=20：阶段长 2 步，S=0.5 在第 8 步达到
        assert spec.tamt_steps(0.5) == 8

    def test_unknown_keys(self, corpus_file, tmp_path):
        raw = toy_experiment(corpus_file, tmp_path)
        raw['pretrain']['warmup'] = 10
        with pytest.raises(ConfigError, match='warmup'):
            ExperimentSpec.from_dict(raw)
        with pytest.raises(ConfigError):
            ExperimentSpec.from_dict({'optimizer': {}})

    def test_invalid_values(self, corpus_file, tmp_path):
        with pytest.raises(ConfigError):
            _spec(corpus_file, tmp_path, methods=['LTH'])
        with pytest.raises(InvalidArgumentError):
            _spec(corpus_file, tmp_path, sparsities=[1.0])
        with pytest.raises(ConfigError):
            _spec(corpus_file, tmp_path, budget_sparsity=[0.5])

    def test_paper_profile(self, corpus_file, tmp_path):
        raw = toy_experiment(corpus_file, tmp_path)
        del raw['model']
        raw['profile'] = 'paper'
        spec = ExperimentSpec.from_dict(raw)
        assert spec.config['model']['hidden_size'] == 768
        assert spec.config['pretrain']['imp_total_steps'] == 20
        assert spec.config['pretrain']['mask_lr_mlm'] == 5e-5
        assert spec.config['pretrain']['mask_lr_kd'] == 2e-5
        assert spec.pretrain_config(parse_method('TAMT-KD'), 0, 4).mask_lr == 2e-5
        assert spec.config['finetune']['span_lr'] == 3e-5
        assert 'max_len' not in spec.config['finetune']
        assert spec.finetune_config(0).span_lr == 3e-5


class TestSeeds:

    def test_finetune_seed_ignores_method(self):
        assert finetune_seed(0, 0, 'motif') == finetune_seed(0, 0, 'motif')
        assert finetune_seed(0, 0, 'motif') != finetune_seed(0, 1, 'motif')
        assert finetune_seed(0, 0, 'motif') != finetune_seed(0, 0, 'count')

    @pytest.mark.parametrize('budget', [0, 20, 40, 60, 120])
    @pytest.mark.parametrize('sparsity', [0.5, 0.7])
    def test_budget_schedule_reaches_target_at_budget(self, sparsity, budget):
        sched = imp_budget_schedule(sparsity, budget, 0.1)
        assert sched.steps_to_target() == budget
        assert sched.pruning_steps()[-1] == budget
        assert abs(sched.levels()[-1] - sparsity) < 1e-9
        # 各阶段长度至多相差一步
        assert max(sched.lengths()) - min(sched.lengths()) <= 1

    def test_budget_schedule_without_training_stages(self):
        assert imp_budget_schedule(0.1, 40, 0.1).steps_to_target() == 0


class TestRun:

    def test_zero_sparsity_omp_matches_full(self, app, corpus_file, tmp_path):
        spec = _spec(corpus_file, tmp_path, sparsities=[0.0])
        report = run(spec)
        assert report.ok
        ft = report.finetunes.set_index(['method', 'task'])
        for task in ('motif', 'count'):
            assert ft.loc[('OMP', task), 'raw_value'] == ft.loc[('FULL', task), 'raw_value']

    def test_full_sweep_writes_everything(self, app, corpus_file, tmp_path):
        spec = _spec(corpus_file, tmp_path, methods=['OMP', 'RAND', 'IMP', 'TAMT-MLM'],
                     train_sizes=[8])
        report = run(spec)
        assert report.ok
        main = report.done_searches()
        assert sorted(main.method) == ['FULL', 'IMP', 'OMP', 'RAND', 'TAMT-MLM']
        for row in main.itertuples():
            ckpt = SubnetworkCheckpoint.load(row.checkpoint_path)
            if row.method != 'FULL':
                for bits in ckpt.masks.values():
                    assert bits.sum() == SparsityTarget(0.5).kept(bits.size)
        # 5 个子网络 × 2 个任务 × 2 种训练量
        assert len(report.finetunes) == 20
        results = pd.read_csv(os.path.join(spec.output_dir, 'results.csv'))
        assert len(results) == 20
        assert os.path.exists(os.path.join(spec.output_dir, 'resolved_config.yaml'))
        assert os.path.exists(os.path.join(spec.output_dir, 'theta0.weights'))
        assert not report.traces[report.traces.method == 'TAMT-MLM'].empty

    def test_mlm_search_records_loss_of_trained_head(self, app, corpus_file, tmp_path):
        spec = _spec(corpus_file, tmp_path, methods=['TAMT-MLM', 'TAMT-KD'])
        report = run(spec)
        wb = prepare(spec)
        rows = report.done_searches().set_index('method')

        mlm = rows.loc['TAMT-MLM']
        last = report.traces[report.traces.method == 'TAMT-MLM'].sort_values('step').iloc[-1]
        assert mlm.mlm_dev_loss == pytest.approx(last.dev_mlm_loss, rel=1e-12)
        head_path = mlm_head_path(mlm.checkpoint_path)
        assert os.path.exists(head_path)
        ckpt = SubnetworkCheckpoint.load(mlm.checkpoint_path)
        head = load_mlm_head(head_path)
        rebuilt, _ = eval_pretrain(ckpt, wb.dev, wb.theta0, mlm_head=head)
        assert rebuilt == pytest.approx(mlm.mlm_dev_loss, rel=1e-9)
        # θ₀ 的 C^mlm 给出的是另一个数
        stale, _ = eval_pretrain(ckpt, wb.dev, wb.theta0)
        assert stale != pytest.approx(mlm.mlm_dev_loss, rel=1e-9)

        # KD 目标不训练 C^mlm，也不写头文件
        kd = rows.loc['TAMT-KD']
        assert not os.path.exists(mlm_head_path(kd.checkpoint_path))
        assert eval_pretrain(SubnetworkCheckpoint.load(kd.checkpoint_path), wb.dev,
                             wb.theta0)[0] == pytest.approx(kd.mlm_dev_loss, rel=1e-9)

    def test_finetune_jobs_outlive_the_session(self, app, corpus_file, tmp_path):
        spec = _spec(corpus_file, tmp_path)
        run(spec)
        wb = prepare(spec)
        jobs = finetune_jobs(spec, wb, _done_searches(spec.name), set())
        assert jobs and all(isinstance(job.cell, SearchCell) for job in jobs)
        db.session.remove()
        job = next(j for j in jobs if j.cell.method == 'OMP')
        assert job.key()[:4] == ('OMP', 0.5, 0, MAIN_SWEEP)
        assert np.isfinite(run_finetune(spec, wb, job, {}))

    def test_rerun_skips_finished_cells(self, app, corpus_file, tmp_path):
        spec = _spec(corpus_file, tmp_path)
        run(spec)
        ids = sorted(r.id for r in models.FinetuneRecord.query.all())
        wb = prepare(spec)
        assert search_jobs(spec, _done_searches(spec.name)) == []
        assert finetune_jobs(spec, wb, _done_searches(spec.name), _done_finetunes(spec.name)) == []
        run(spec, wb)
        assert sorted(r.id for r in models.FinetuneRecord.query.all()) == ids

    def test_budget_cells(self, app, corpus_file, tmp_path):
        spec = _spec(corpus_file, tmp_path, budget_sparsity=[0.5], budget_steps=[0, 2, 4])
        report = run(spec)
        budget = report.searches[report.searches.pretrain_steps != MAIN_SWEEP]
        assert sorted(zip(budget.method, budget.pretrain_steps)) == [
            ('IMP', 0), ('IMP', 2), ('IMP', 4), ('TAMT-MLM', 0), ('TAMT-MLM', 2), ('TAMT-MLM', 4)]
        # 预算子网络只在完整训练集上微调
        sizes = report.finetunes[report.finetunes.pretrain_steps != MAIN_SWEEP].train_size
        assert set(sizes) == {16}

    def test_failed_cell_is_recorded(self, app, corpus_file, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise TrainingAbortedError('TAMT-MLM: non-finite training loss', 3, [1.0, float('nan')])

        monkeypatch.setattr('app.experiment.tamt_train', boom)
        spec = _spec(corpus_file, tmp_path, methods=['OMP', 'TAMT-MLM'])
        report = run(spec)
        assert not report.ok
        failed = report.failures
        assert set(failed.kind) == {'search', 'finetune'}
        assert 'step=3' in failed[failed.kind == 'search'].error.iloc[0]
        assert os.path.exists(os.path.join(spec.output_dir, 'failures.csv'))
        # 其余单元照常完成
        assert set(report.done_searches().method) == {'FULL', 'OMP'}


class TestReport:

    @staticmethod
    def _report(rows):
        base = dict(sparsity=0.5, seed=0, pretrain_steps=MAIN_SWEEP, train_size=16, repeat=0,
                    status='done', error=None)
        frame = pd.DataFrame([{**base, **row, 'value': row['raw_value']} for row in rows],
                             columns=FINETUNE_COLUMNS)
        return ExperimentReport('toy', '.', pd.DataFrame(), frame, pd.DataFrame())

    def test_cells_missing_a_task_are_left_out(self):
        report = self._report([
            dict(method='OMP', task='motif', metric_name='accuracy', raw_value=0.8),
            dict(method='OMP', task='count', metric_name='accuracy', raw_value=0.4),
            dict(method='RAND', task='motif', metric_name='accuracy', raw_value=0.9),
        ])
        scores = report.scores()
        assert list(scores.method) == ['OMP']
        assert scores.avg_score.iloc[0] == pytest.approx(0.6)

    def test_failed_task_counts_as_missing(self):
        report = self._report([
            dict(method='OMP', task='motif', metric_name='accuracy', raw_value=0.8),
            dict(method='OMP', task='count', metric_name='accuracy', raw_value=None,
                 status='failed', error='boom'),
        ])
        assert report.scores().empty


class TestAnalysis:

    def test_correlation(self):
        assert correlation([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        assert correlation([1], [2]) is None
        assert correlation([1, 1, 1], [1, 2, 3]) is None

    def test_similarity_matrix(self):
        a = SubnetworkCheckpoint(0.5, 'A', 0, {'w': np.array([True, True, False, False])})
        b = SubnetworkCheckpoint(0.5, 'B', 0, {'w': np.array([True, False, True, False])})
        frame = similarity_matrix([a, b], ['a', 'b'])
        assert frame.loc['a', 'a'] == 1.0 and frame.loc['a', 'b'] == frame.loc['b', 'a']
        assert frame.loc['a', 'b'] == pytest.approx(1 / 3)
        with pytest.raises(InvalidArgumentError):
            similarity_matrix([a], ['a'])

    def test_export_all(self, app, corpus_file, tmp_path):
        spec = _spec(corpus_file, tmp_path, methods=['OMP', 'RAND', 'TAMT-MLM'], train_sizes=[8])
        run(spec)
        report = ExperimentReport.load(spec.name, spec.output_dir)
        written = export_all(report)
        assert set(written) == {'results', 'loss_vs_score', 'budget_curve', 'similarity',
                                'data_reduction'}
        sim = pd.read_csv(os.path.join(spec.output_dir, 'similarity_S0.50.csv'),
                          index_col='checkpoint')
        assert (sim.values == sim.values.T).all()
        assert (sim.values.diagonal() == 1.0).all()
        loss = pd.read_csv(os.path.join(spec.output_dir, 'loss_vs_score.csv'))
        assert len(loss) == 4

        reduction = data_reduction(report)
        assert set(reduction.train_size) == {8, 16}
        assert (reduction.stddev == 0.0).all() and (reduction.n_seeds == 1).all()


class TestDeterminism:

    def test_cells_reproduce_from_scratch(self, app, corpus_file, tmp_path):
        first = ExperimentSpec.from_dict(toy_experiment(corpus_file, tmp_path / 'a', name='first',
                                                        methods=['OMP', 'TAMT-KD']))
        second = ExperimentSpec.from_dict(toy_experiment(corpus_file, tmp_path / 'b', name='second',
                                                         methods=['OMP', 'TAMT-KD']))
        a = run(first).results_frame()
        b = run(second).results_frame()
        pd.testing.assert_frame_equal(a, b)

    def test_exports_are_byte_identical(self, app, corpus_file, tmp_path):
        spec = _spec(corpus_file, tmp_path, methods=['OMP', 'RAND'])
        run(spec)
        report = ExperimentReport.load(spec.name, spec.output_dir)
        names = ['results.csv', 'loss_vs_score.csv', 'loss_vs_score_correlation.csv',
                 'similarity_S0.50.csv', 'data_reduction.csv']
        export_all(report)
        before = {n: (tmp_path / 'run' / n).read_bytes() for n in names}
        export_all(ExperimentReport.load(spec.name, spec.output_dir))
        assert {n: (tmp_path / 'run' / n).read_bytes() for n in names} == before
