# app/cli.py
import os
import sys

import click
import yaml

from app import db
from config import load_config, resolve_config
from tamt.errors import TamtError


def _load_spec_config(path, overrides):
    resolved = load_config(path) if path else resolve_config({})
    raw = {k: dict(v) for k, v in resolved.items() if isinstance(v, dict)}
    raw['profile'] = resolved['profile']
    for item in overrides:
        # --set pretrain.mask_lr_mlm=0.25
        key, sep, value = item.partition('=')
        section, dot, name = key.partition('.')
        if not sep or not dot:
            raise click.BadParameter(f'expected section.key=value, got {item!r}', param_hint='--set')
        raw.setdefault(section, {})[name] = yaml.safe_load(value)
    return resolve_config(raw)


def _spec(app, path, overrides):
    from app.experiment import ExperimentSpec

    return ExperimentSpec.from_config(_load_spec_config(path, overrides), app.config['OUTPUT_DIR'])


config_option = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                             help='YAML experiment file.')
set_option = click.option('--set', 'overrides', multiple=True, help='Override one key: section.key=value.')


def register(app):
    @app.cli.command('init-db')
    def init_db_command():
        """创建报告库的表。"""
        with app.app_context():
            db.create_all()
        click.echo(f"Report store ready at {app.config['SQLALCHEMY_DATABASE_URI']}")

    @app.cli.command('pretrain')
    @config_option
    @set_option
    @click.option('--out', 'out_path', type=click.Path(dir_okay=False), help='Where to write θ0.')
    def pretrain_command(config_path, overrides, out_path):
        """在语料上做 MLM 预训练，得到冻结的 θ0。"""
        from app.experiment import prepare

        try:
            spec = _spec(app, config_path, overrides)
            if out_path:
                spec.theta0_path = out_path
            wb = prepare(spec, progress=app.config['PROGRESS'])
        except TamtError as exc:
            raise click.ClickException(str(exc))
        path = spec.theta0_path or os.path.join(spec.output_dir, 'theta0.weights')
        click.echo(f'θ0: {wb.theta0!r} -> {path}')
        click.echo(f'corpus: {len(wb.train)} train / {len(wb.dev)} dev sequences, V={wb.train.vocab_size}')

    @app.cli.command('search')
    @config_option
    @set_option
    @click.option('--method', required=True, help='OMP, IMP, RAND, FULL, TAMT-MLM, TAMT-KD, TAMT-MLM+KD, *-RI.')
    @click.option('--sparsity', type=float, required=True)
    @click.option('--seed', type=int, default=0, show_default=True)
    @click.option('--out', 'out_path', type=click.Path(dir_okay=False), required=True,
                  help='Subnetwork checkpoint (.mask) to write.')
    def search_command(config_path, overrides, method, sparsity, seed, out_path):
        """搜索一个子网络并保存二值掩码。"""
        from app.experiment import mlm_head_path, prepare, search_once, write_trace_csv
        from tamt.transformer import save_mlm_head

        try:
            spec = _spec(app, config_path, overrides)
            wb = prepare(spec, progress=app.config['PROGRESS'])
            outcome = search_once(spec, wb, method, sparsity, seed, progress=app.config['PROGRESS'])[0]
        except TamtError as exc:
            raise click.ClickException(str(exc))
        outcome.checkpoint.save(out_path)
        if outcome.mlm_head is not None:
            save_mlm_head(outcome.mlm_head, mlm_head_path(out_path))
        write_trace_csv(outcome.trace, os.path.splitext(out_path)[0] + '.trace.csv')
        click.echo(f'{method} S={sparsity:.2f} seed={seed}: dev MLM {outcome.mlm_dev_loss:.4f}, '
                   f'dev KD {outcome.kd_dev_loss:.4f} -> {out_path}')

    @app.cli.command('finetune')
    @config_option
    @set_option
    @click.option('--checkpoint', 'ckpt_path', type=click.Path(exists=True, dir_okay=False), required=True)
    @click.option('--task', 'task_name', required=True, help='Task family name or JSONL task file.')
    @click.option('--seed', type=int, default=0, show_default=True)
    @click.option('--train-size', type=int, default=None)
    def finetune_command(config_path, overrides, ckpt_path, task_name, seed, train_size):
        """在一个下游任务上微调子网络，输出验证集最好结果。"""
        from app.experiment import prepare
        from tamt.downstream import fine_tune, load_task
        from tamt.masking import SubnetworkCheckpoint

        try:
            spec = _spec(app, config_path, overrides)
            wb = prepare(spec, progress=app.config['PROGRESS'])
            if os.path.exists(task_name):
                task = load_task(task_name)
            else:
                matches = [t for t in wb.tasks if t.task_id == task_name]
                if not matches:
                    raise click.ClickException(f'unknown task {task_name!r}')
                task = matches[0]
            ckpt = SubnetworkCheckpoint.load(ckpt_path)
            cfg = spec.finetune_config(seed, train_size, progress=app.config['PROGRESS'])
            result = fine_tune(ckpt, wb.theta0, task, cfg, wb.train.vocab)
        except TamtError as exc:
            raise click.ClickException(str(exc))
        click.echo(f'{task.task_id} ({task.metric}): best {result.best_metric:.4f} at step {result.best_step}')

    @app.cli.command('sweep')
    @config_option
    @set_option
    @click.option('--workers', type=int, default=None, help='Parallel cells (default from config).')
    def sweep_command(config_path, overrides, workers):
        """运行完整实验；已完成的单元会被跳过。"""
        from app.experiment import run

        try:
            spec = _spec(app, config_path, overrides)
            spec.max_workers = workers or spec.max_workers or app.config['MAX_WORKERS']
            with app.app_context():
                db.create_all()
                report = run(spec, progress=app.config['PROGRESS'])
        except TamtError as exc:
            raise click.ClickException(str(exc))
        n_failed = len(report.failures)
        click.echo(f'{spec.name}: {len(report.searches)} search records, '
                   f'{len(report.finetunes)} fine-tune records, {n_failed} failures')
        click.echo(f'results: {os.path.join(spec.output_dir, "results.csv")}')
        if n_failed:
            sys.exit(1)

    @app.cli.command('analyze')
    @config_option
    @set_option
    @click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None)
    def analyze_command(config_path, overrides, out_dir):
        """把报告库导出为 CSV。"""
        from app.analysis import export_all
        from app.experiment import ExperimentReport

        try:
            spec = _spec(app, config_path, overrides)
            with app.app_context():
                report = ExperimentReport.load(spec.name, spec.output_dir)
                if report.searches.empty:
                    raise click.ClickException(f'no records for experiment {spec.name!r}')
                written = export_all(report, out_dir)
        except TamtError as exc:
            raise click.ClickException(str(exc))
        for name, paths in written.items():
            for path in paths if isinstance(paths, list) else [paths]:
                click.echo(f'{name}: {path}')
