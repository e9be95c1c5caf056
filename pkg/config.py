# config.py
import os

import yaml
from dotenv import load_dotenv

basedir = os.path.abspath(os.path.dirname(__file__))
load_dotenv(os.path.join(basedir, '.env'))


class Config:
    SQLALCHEMY_DATABASE_URI = os.environ.get('TAMT_DATABASE_URL') or \
        'sqlite:///' + os.path.join(basedir, 'instance', 'tamt.db')
    SQLALCHEMY_TRACK_MODIFICATIONS = False

    LOG_LEVEL = os.environ.get('TAMT_LOG_LEVEL', 'INFO')
    PROGRESS = os.environ.get('TAMT_PROGRESS', '1') != '0'
    OUTPUT_DIR = os.environ.get('TAMT_OUTPUT_DIR') or os.path.join(basedir, 'runs')
    MAX_WORKERS = int(os.environ.get('TAMT_MAX_WORKERS', '1'))

    # 桌面规模的默认超参数；YAML 文件中同名键覆盖这里
    MODEL_DEFAULTS = {
        'num_layers': 4, 'num_heads': 4, 'hidden_size': 128, 'intermediate_size': 512,
        'max_len': 128, 'dropout_p': 0.1, 'init_std': 0.02,
    }
    DATA_DEFAULTS = {
        'corpus': [], 'dev_fraction': 0.1, 'seed': 0, 'cache': None,
        'task_families': ['motif', 'majority', 'pair', 'count', 'span'],
        'task_train_size': 20000, 'task_dev_size': 400, 'task_files': [],
    }
    PRETRAIN_DEFAULTS = {
        'init_steps': 2000, 'lr': 1e-3, 'mask_lr_mlm': 0.5, 'mask_lr_kd': 0.2, 'batch_size': 16,
        'max_steps': None, 'mlm_mask_prob': 0.15, 'alpha': 2.0, 'threshold': 0.01,
        'imp_total_steps': 2000, 'imp_increment': 0.1, 'eval_every': 100, 'lambda_mlm': None, 'lambda_kd': None,
    }
    FINETUNE_DEFAULTS = {
        'lr': 1e-3, 'batch_size': 32, 'epochs': 3, 'eval_every': 50,
        'betas': [0.9, 0.999], 'weight_decay': 0.01, 'repeats': 1, 'span_lr': None,
    }
    EXPERIMENT_DEFAULTS = {
        'name': 'default', 'methods': ['OMP', 'IMP', 'TAMT-MLM', 'TAMT-KD', 'TAMT-MLM+KD', 'RAND'],
        'sparsities': [0.5, 0.7], 'seeds': [0], 'train_sizes': [],
        'budget_sparsity': [], 'budget_steps': [], 'output_dir': None, 'theta0': None,
        'max_workers': None,
    }

    # 原始规模的超参数表，``profile: paper`` 时使用
    PAPER_SCALE = {
        'model': {'num_layers': 12, 'num_heads': 12, 'hidden_size': 768,
                  'intermediate_size': 3072, 'max_len': 512},
        'pretrain': {'lr': 5e-5, 'mask_lr_mlm': 5e-5, 'mask_lr_kd': 2e-5, 'batch_size': 16,
                     'imp_total_steps': 27920, 'eval_every': 1000},
        'finetune': {'lr': 2e-5, 'batch_size': 32, 'epochs': 3, 'span_lr': 3e-5},
    }


class TestConfig(Config):
    TESTING = True
    SQLALCHEMY_DATABASE_URI = 'sqlite://'
    PROGRESS = False
    MAX_WORKERS = 1


SECTIONS = {
    'model': Config.MODEL_DEFAULTS,
    'data': Config.DATA_DEFAULTS,
    'pretrain': Config.PRETRAIN_DEFAULTS,
    'finetune': Config.FINETUNE_DEFAULTS,
    'experiment': Config.EXPERIMENT_DEFAULTS,
}


def resolve_config(raw=None):
    """合并默认值与用户配置，未知的节或键直接报错。"""
    from tamt.errors import ConfigError

    raw = dict(raw or {})
    profile = raw.pop('profile', 'desk')
    if profile not in ('desk', 'paper'):
        raise ConfigError(f'unknown profile {profile!r}')
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f'unknown config sections: {sorted(unknown)}')

    resolved = {}
    for section, defaults in SECTIONS.items():
        merged = dict(defaults)
        if profile == 'paper':
            merged.update({k: v for k, v in Config.PAPER_SCALE.get(section, {}).items() if k in defaults})
        given = raw.get(section) or {}
        if not isinstance(given, dict):
            raise ConfigError(f'config section {section!r} must be a mapping')
        bad = set(given) - set(defaults)
        if bad:
            raise ConfigError(f'unknown keys in section {section!r}: {sorted(bad)}')
        merged.update(given)
        resolved[section] = merged
    resolved['profile'] = profile
    return resolved


def load_config(path):
    from tamt.errors import ConfigError

    try:
        with open(path, encoding='utf-8') as fh:
            raw = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f'cannot read config {path}: {exc}') from exc
    if not isinstance(raw, dict):
        raise ConfigError(f'{path}: top level must be a mapping')
    return resolve_config(raw)


def dump_config(resolved, path):
    with open(path, 'w', encoding='utf-8') as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True, allow_unicode=True)
