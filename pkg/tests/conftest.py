# tests/conftest.py
import numpy as np
import pytest

from app import create_app, db
from config import TestConfig
from tamt.data import build_corpus
from tamt.transformer import EncoderModel, ModelConfig, init_pretrained

WORDS = ['abc', 'bead', 'cafe', 'dig', 'edge', 'fig', 'hide', 'jab', 'gab', 'ice', 'had', 'bid',
         'face', 'jig', 'deaf', 'babe', 'egg', 'head', 'chief', 'fade']


def write_corpus(path, n_docs=40, seed=0):
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        n_words = int(rng.integers(4, 9))
        docs.append(' '.join(WORDS[i] for i in rng.integers(0, len(WORDS), n_words)) + '.')
    path.write_text('\n\n'.join(docs) + '\n', encoding='utf-8')
    return path


def toy_config(vocab_size=20, **overrides):
    params = dict(num_layers=2, num_heads=2, hidden_size=8, intermediate_size=16,
                  vocab_size=vocab_size, max_len=48, dropout_p=0.1, init_std=0.02)
    params.update(overrides)
    return ModelConfig(**params)


def toy_experiment(corpus_file, output_dir, **experiment):
    """几秒内能跑完的实验配置。"""
    exp = dict(name='toy', methods=['OMP'], sparsities=[0.5], seeds=[0],
               output_dir=str(output_dir))
    exp.update(experiment)
    return {
        'model': dict(num_layers=2, num_heads=2, hidden_size=8, intermediate_size=16, max_len=48),
        'data': dict(corpus=[str(corpus_file)], dev_fraction=0.2, task_families=['motif', 'count'],
                     task_train_size=16, task_dev_size=8),
        'pretrain': dict(init_steps=10, batch_size=8, max_steps=4, imp_total_steps=20,
                         eval_every=2),
        'finetune': dict(batch_size=8, epochs=1, eval_every=5),
        'experiment': exp,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def corpus_file(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp('corpus') / 'toy.txt')


@pytest.fixture(scope='session')
def corpora(corpus_file):
    return build_corpus([str(corpus_file)], max_len=48, dev_fraction=0.2, seed=0)


@pytest.fixture(scope='session')
def theta0(corpora):
    train, _ = corpora
    return init_pretrained(toy_config(train.vocab_size), train, steps=30, seed=0)


@pytest.fixture
def model(corpora):
    # 较大的初始化让梯度远离 0，便于有限差分检查
    train, _ = corpora
    return EncoderModel(toy_config(train.vocab_size, init_std=0.3), seed=7)


@pytest.fixture
def app():
    app = create_app(TestConfig)
    with app.app_context():
        db.create_all()
        yield app
        db.session.remove()
        db.drop_all()


@pytest.fixture
def runner(app):
    return app.test_cli_runner()
