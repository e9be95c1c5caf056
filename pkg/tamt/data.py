# tamt/data.py
"""语料读取、字符级分词、训练/验证划分与合成下游任务生成。"""
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from tamt.errors import ConfigError, CorpusError, UnknownTaskError

logger = logging.getLogger(__name__)

PAD_ID, MASK_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ['[PAD]', '[MASK]', '[CLS]', '[SEP]', '[UNK]']
NUM_SPECIAL = len(SPECIAL_TOKENS)
IGNORE_INDEX = -100

CORPUS_CACHE_VERSION = 1


# --- 词表 ---

class Vocab:
    def __init__(self, chars):
        self.tokens = SPECIAL_TOKENS + list(chars)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def from_texts(cls, texts):
        # 按码位排序，同样的训练文件总得到同样的词表
        chars = sorted({ch for text in texts for ch in text})
        return cls(chars)

    @property
    def size(self):
        return len(self.tokens)

    @property
    def chars(self):
        return self.tokens[NUM_SPECIAL:]

    def encode(self, text):
        return [self.index.get(ch, UNK_ID) for ch in text]

    def decode(self, ids):
        return ''.join(self.tokens[i] if i >= NUM_SPECIAL else '' for i in ids)

    def wrap(self, text, text_b=None):
        ids = [CLS_ID] + self.encode(text) + [SEP_ID]
        if text_b is not None:
            ids += self.encode(text_b) + [SEP_ID]
        return ids

    def __len__(self):
        return self.size

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens


@dataclass
class Corpus:
    documents: list
    vocab: Vocab
    split: str = 'train'

    @property
    def vocab_size(self):
        return self.vocab.size

    def __len__(self):
        return len(self.documents)

    def hashes(self):
        return {_sequence_hash(doc) for doc in self.documents}


def _sequence_hash(ids):
    return hashlib.sha1(np.asarray(ids, dtype=np.int64).tobytes()).hexdigest()


# --- 语料构建 ---

def chunk_text(text, max_len):
    """切成不超过 max_len-2 个字符的片段，留出 [CLS] 和 [SEP]。"""
    width = max_len - 2
    if width < 1:
        raise ConfigError(f'max_len must be at least 3, got {max_len}')
    return [text[i:i + width] for i in range(0, len(text), width)]


def read_documents(paths):
    docs = []
    for path in paths:
        with open(path, encoding='utf-8') as fh:
            raw = fh.read()
        # 空行分隔文档
        for block in raw.replace('\r\n', '\n').split('\n\n'):
            block = ' '.join(block.split())
            if block:
                docs.append(block)
    return docs


def build_corpus(paths, max_len, dev_fraction, seed):
    if not 0.0 < dev_fraction < 1.0:
        raise ConfigError(f'dev_fraction must lie in (0, 1), got {dev_fraction}')
    docs = read_documents(paths)
    if not docs:
        raise CorpusError('no text found in the corpus files')

    chunks, seen = [], set()
    for doc in docs:
        for chunk in chunk_text(doc, max_len):
            # 去重后划分，保证验证集文本不出现在训练集中
            if chunk not in seen:
                seen.add(chunk)
                chunks.append(chunk)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(chunks))
    n_dev = int(round(len(chunks) * dev_fraction))
    if len(chunks) > 1:
        n_dev = min(max(n_dev, 1), len(chunks) - 1)
    else:
        n_dev = 0
    dev_idx = sorted(order[:n_dev].tolist())
    train_idx = sorted(order[n_dev:].tolist())

    train_texts = [chunks[i] for i in train_idx]
    dev_texts = [chunks[i] for i in dev_idx]
    vocab = Vocab.from_texts(train_texts)
    train = Corpus([np.array(vocab.wrap(t), dtype=np.int64) for t in train_texts], vocab, 'train')
    dev = Corpus([np.array(vocab.wrap(t), dtype=np.int64) for t in dev_texts], vocab, 'dev')
    logger.info('Built corpus: %d train / %d dev sequences, vocab size %d',
                len(train), len(dev), vocab.size)
    return train, dev


def leak_check(train, dev):
    """同时出现在训练集和验证集中的序列哈希。"""
    return train.hashes() & dev.hashes()


def save_corpus(corpus, path):
    lengths = np.array([len(d) for d in corpus.documents], dtype=np.int64)
    flat = np.concatenate(corpus.documents) if corpus.documents else np.zeros(0, dtype=np.int64)
    np.savez(path, version=np.array(CORPUS_CACHE_VERSION), split=np.array(corpus.split),
             chars=np.array(corpus.vocab.chars, dtype=str), lengths=lengths, ids=flat)


def load_corpus(path):
    with np.load(path, allow_pickle=False) as z:
        if int(z['version']) != CORPUS_CACHE_VERSION:
            raise CorpusError(f'{path}: unsupported corpus cache version {int(z["version"])}')
        vocab = Vocab([str(c) for c in z['chars']])
        bounds = np.cumsum(z['lengths'])[:-1]
        docs = [d.astype(np.int64) for d in np.split(z['ids'], bounds)] if len(z['lengths']) else []
        return Corpus(docs, vocab, str(z['split']))


# --- 合成下游任务 ---

@dataclass
class Example:
    text: str
    label: object
    text_b: str = None


@dataclass
class Task:
    task_id: str
    kind: str
    metric: str
    train: list
    dev: list
    num_labels: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ('classification', 'regression', 'span'):
            raise ConfigError(f'unknown task kind {self.kind!r}')
        if not self.dev:
            raise ConfigError(f'task {self.task_id}: dev set is empty')


DEFAULT_ALPHABET = 'abcdefghij'
DEFAULT_TEXT_LEN = 24


def _random_text(rng, alphabet, n):
    return ''.join(alphabet[i] for i in rng.integers(0, len(alphabet), n))


def _motif_examples(rng, n, alphabet, length):
    # 标签 1 当且仅当文本包含 motif
    motif = alphabet[:3]
    out = []
    for _ in range(n):
        label = int(rng.integers(2))
        text = _random_text(rng, alphabet, length)
        while motif in text:
            text = _random_text(rng, alphabet, length)
        if label:
            pos = int(rng.integers(0, length - len(motif) + 1))
            text = text[:pos] + motif + text[pos + len(motif):]
        out.append(Example(text, label))
    return out


def _majority_examples(rng, n, alphabet, length):
    # 标签 1 当且仅当 alphabet[0] 出现次数多于 alphabet[1]
    a, b, rest = alphabet[0], alphabet[1], alphabet[2:]
    out = []
    for _ in range(n):
        label = int(rng.integers(2))
        ca, cb = sorted(rng.choice(np.arange(1, length // 2), 2, replace=False))
        if label:
            ca, cb = cb, ca
        chars = [a] * int(ca) + [b] * int(cb)
        chars += [rest[i] for i in rng.integers(0, len(rest), length - len(chars))]
        rng.shuffle(chars)
        out.append(Example(''.join(chars), label))
    return out


def _pair_examples(rng, n, alphabet, length):
    # 句对：两段首字符相同则为 1
    half = max(2, length // 2)
    out = []
    for _ in range(n):
        label = int(rng.integers(2))
        first = _random_text(rng, alphabet, half)
        second = _random_text(rng, alphabet, half)
        if label:
            second = first[0] + second[1:]
        else:
            while second[0] == first[0]:
                second = _random_text(rng, alphabet, half)
        out.append(Example(first, label, text_b=second))
    return out


def _count_examples(rng, n, alphabet, length):
    # 回归：alphabet[0] 的出现比例
    target, rest = alphabet[0], alphabet[1:]
    out = []
    for _ in range(n):
        count = int(rng.integers(0, length // 2 + 1))
        chars = [target] * count + [rest[i] for i in rng.integers(0, len(rest), length - count)]
        rng.shuffle(chars)
        out.append(Example(''.join(chars), count / length))
    return out


def _span_examples(rng, n, alphabet, length):
    # 抽取式：定位唯一植入的 motif，标签为编码后序列中的 (start, end) 下标
    motif = alphabet[:3]
    out = []
    for _ in range(n):
        text = _random_text(rng, alphabet, length)
        pos = int(rng.integers(0, length - len(motif) + 1))
        text = text[:pos] + motif + text[pos + len(motif):]
        while text.count(motif) != 1:
            text = _random_text(rng, alphabet, length)
            text = text[:pos] + motif + text[pos + len(motif):]
        start = pos + 1
        out.append(Example(text, (start, start + len(motif) - 1)))
    return out


TASK_FAMILIES = {
    'motif': ('classification', 'accuracy', _motif_examples),
    'majority': ('classification', 'matthews', _majority_examples),
    'pair': ('classification', 'accuracy', _pair_examples),
    'count': ('regression', 'pearson', _count_examples),
    'span': ('span', 'f1_span', _span_examples),
}


def make_task(family, sizes, seed, alphabet=DEFAULT_ALPHABET, length=DEFAULT_TEXT_LEN, task_id=None):
    if family not in TASK_FAMILIES:
        raise UnknownTaskError(f'unknown task family {family!r}')
    if len(alphabet) < 4:
        raise ConfigError('task alphabet needs at least 4 characters')
    kind, metric, generate = TASK_FAMILIES[family]
    n_train, n_dev = sizes
    rng = np.random.default_rng(seed)
    train = generate(rng, n_train, alphabet, length)
    dev = generate(rng, n_dev, alphabet, length)
    num_labels = {'classification': 2, 'regression': 1, 'span': 2}[kind]
    return Task(task_id or family, kind, metric, train, dev, num_labels,
                meta={'family': family, 'alphabet': alphabet, 'length': length, 'seed': seed})


def task_alphabet(vocab, preferred=DEFAULT_ALPHABET):
    """取词表中存在的字符作为任务字母表，避免生成 [UNK]。"""
    present = [ch for ch in preferred if ch in vocab.index]
    if len(present) >= 4:
        return ''.join(present)
    letters = [ch for ch in vocab.chars if ch.isalnum()]
    if len(letters) < 4:
        raise CorpusError('vocabulary has too few alphanumeric characters for synthetic tasks')
    return ''.join(letters[:len(preferred)])
