# tests/test_masking.py
import numpy as np
import pytest

from tamt.errors import CheckpointFormatError, DimensionError, InvalidArgumentError
from tamt.masking import (MaskedParameter, SparsityTarget, SubnetworkCheckpoint, binarize,
                          jaccard, kept_count, mask_distance, omp_init, omp_mask, random_init,
                          random_mask, rethreshold, sparsity_of, ste_step)


def _oracle_top_k(weight, k):
    # 独立实现：按 (-|w|, 下标) 完全排序
    flat = np.abs(weight).reshape(-1)
    order = sorted(range(flat.size), key=lambda i: (-flat[i], i))[:k]
    bits = np.zeros(flat.size, dtype=bool)
    bits[order] = True
    return bits.reshape(weight.shape)


class TestSparsityTarget:

    @pytest.mark.parametrize('size,sparsity,expected', [
        (100, 0.5, 50), (10, 0.25, 8), (7, 0.5, 4), (3, 0.99, 1), (64, 0.0, 64),
    ])
    def test_kept_count(self, size, sparsity, expected):
        assert kept_count(size, sparsity) == expected

    @pytest.mark.parametrize('bad', [-0.1, 1.0, 1.5])
    def test_out_of_range(self, bad):
        with pytest.raises(InvalidArgumentError):
            SparsityTarget(bad)


class TestOmp:

    def test_matches_full_sort_oracle(self, rng):
        for trial in range(100):
            shape = tuple(rng.integers(1, 9, 2))
            w = rng.normal(size=shape)
            if trial % 10 == 0:
                w = np.round(w, 1)  # 人为制造并列
            for s in (0.1, 0.3, 0.5, 0.7, 0.9):
                target = SparsityTarget(s)
                got = omp_mask({'w': w}, target).masks['w']
                np.testing.assert_array_equal(got, _oracle_top_k(w, target.kept(w.size)))

    def test_ties_prefer_lower_index(self):
        w = np.ones((2, 2))
        bits = omp_mask({'w': w}, SparsityTarget(0.5)).masks['w']
        np.testing.assert_array_equal(bits, [[True, True], [False, False]])

    def test_zero_sparsity_keeps_everything(self, rng):
        w = rng.normal(size=(4, 5))
        assert omp_mask({'w': w}, SparsityTarget(0.0)).masks['w'].all()

    def test_init_binarizes_to_omp(self, rng):
        weights = {'a': rng.normal(size=(6, 7)), 'b': rng.normal(size=(5, 3))}
        for s in (0.3, 0.5, 0.7, 0.9):
            target = SparsityTarget(s)
            scores = omp_init(weights, target, alpha=2.0, threshold=0.01)
            ref = omp_mask(weights, target)
            for name in weights:
                np.testing.assert_array_equal(binarize(scores[name], 0.01).astype(bool),
                                              ref.masks[name])

    def test_init_arguments(self, rng):
        with pytest.raises(InvalidArgumentError):
            omp_init({'w': rng.normal(size=(2, 2))}, SparsityTarget(0.5), alpha=0.5)
        with pytest.raises(InvalidArgumentError):
            omp_init({'w': rng.normal(size=(2, 2))}, SparsityTarget(0.5), threshold=0.0)


class TestSte:

    def _param(self, rng, shape=(4, 5)):
        p = MaskedParameter('w', rng.normal(size=shape))
        p.init_scores(rng.normal(size=shape), 0.0)
        return p

    def test_update_moves_scores_against_gradient(self, rng):
        p = self._param(rng)
        before = p.scores.copy()
        grad = rng.normal(size=p.shape)
        ste_step(p, grad, 0.1)
        np.testing.assert_allclose(p.scores, before - 0.1 * grad)

    def test_rethreshold_keeps_exact_count(self, rng):
        p = self._param(rng, (7, 9))
        for s in (0.3, 0.5, 0.7, 0.9):
            target = SparsityTarget(s)
            for _ in range(5):
                ste_step(p, rng.normal(size=p.shape), 0.5)
                rethreshold(p, target)
                assert p.kept() == target.kept(p.size)

    def test_rethreshold_ranks_by_magnitude(self):
        p = MaskedParameter('w', np.ones((1, 4)))
        p.init_scores(np.array([[-3.0, 0.1, 2.0, -0.2]]), 0.01)
        rethreshold(p, SparsityTarget(0.5))
        np.testing.assert_array_equal(p.bits(), [[True, False, True, False]])

    def test_zero_gradient_is_noop(self, rng):
        p = self._param(rng)
        target = SparsityTarget(0.5)
        rethreshold(p, target)
        before = p.mask.copy()
        ste_step(p, np.zeros(p.shape), 0.5)
        ste_step(p, None, 0.5)
        rethreshold(p, target)
        np.testing.assert_array_equal(p.mask, before)

    def test_non_positive_lr(self, rng):
        with pytest.raises(InvalidArgumentError):
            ste_step(self._param(rng), np.zeros((4, 5)), 0.0)


class TestRandomMasks:

    def test_random_mask_counts_and_determinism(self):
        shapes = {'a': (10, 10), 'b': (3, 7)}
        target = SparsityTarget(0.7)
        m1 = random_mask(shapes, target, seed=3)
        m2 = random_mask(shapes, target, seed=3)
        assert m1.equals(m2)
        for name, shape in shapes.items():
            assert m1.masks[name].sum() == target.kept(int(np.prod(shape)))

    def test_random_mask_is_uniform_over_positions(self):
        target = SparsityTarget(0.7)
        trials = 3000
        counts = np.zeros((10, 10))
        for seed in range(trials):
            counts += random_mask({'w': (10, 10)}, target, seed).masks['w']
        freq = counts / trials
        assert np.abs(freq - 0.3).max() < 0.05

    def test_random_init_has_same_support_size_as_omp(self, rng):
        shapes = {'a': (8, 8)}
        scores = random_init(shapes, SparsityTarget(0.5), seed=1)
        assert (binarize(scores['a'], 0.01) > 0).sum() == 32


class TestJaccard:

    def _ckpt(self, bits, method='X'):
        return SubnetworkCheckpoint(sparsity=0.0, method=method, seed=0, masks=bits)

    def test_against_bit_enumeration(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            a = rng.random(n) < rng.random()
            b = rng.random(n) < rng.random()
            inter = sum(1 for i in range(n) if a[i] and b[i])
            union = sum(1 for i in range(n) if a[i] or b[i])
            expected = 1.0 if union == 0 else inter / union
            assert jaccard(self._ckpt({'m': a}), self._ckpt({'m': b})) == expected

    def test_identity_and_disjoint(self):
        a = self._ckpt({'m': np.array([True, False, True])})
        b = self._ckpt({'m': np.array([False, True, False])})
        assert jaccard(a, a) == 1.0
        assert jaccard(a, b) == 0.0
        assert mask_distance(a, b) == 1.0

    def test_pooled_across_matrices(self):
        a = self._ckpt({'x': np.array([True, True]), 'y': np.array([True, False, False])})
        b = self._ckpt({'x': np.array([True, False]), 'y': np.array([True, True, False])})
        # 交集 2，并集 4
        assert jaccard(a, b) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            jaccard(self._ckpt({'m': np.ones(3, bool)}), self._ckpt({'m': np.ones(4, bool)}))


class TestCheckpointFile:

    def test_save_load(self, tmp_path, rng):
        masks = {'emb': rng.random((5, 3)) < 0.5, 'layer1.wq': rng.random((3, 3)) < 0.3}
        ckpt = SubnetworkCheckpoint(sparsity=0.5, method='TAMT-MLM', seed=42, masks=masks)
        path = tmp_path / 'a.mask'
        ckpt.save(path)
        loaded = SubnetworkCheckpoint.load(path)
        assert loaded.equals(ckpt)
        assert (loaded.method, loaded.seed, loaded.sparsity) == ('TAMT-MLM', 42, 0.5)
        assert list(loaded.masks) == ['emb', 'layer1.wq']

    def test_bit_order_is_little_endian(self, tmp_path):
        bits = np.array([[True, False, False, False, False, False, False, False, False]])
        path = tmp_path / 'b.mask'
        SubnetworkCheckpoint(0.0, 'M', 0, {'w': bits}).save(path)
        raw = path.read_bytes()
        assert raw[-2:] == bytes([0b00000001, 0])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'bad.mask'
        path.write_bytes(b'NOPE' + bytes(20))
        with pytest.raises(CheckpointFormatError):
            SubnetworkCheckpoint.load(path)

    @pytest.mark.parametrize('keep', [10, 20, -1])
    def test_truncated_file(self, tmp_path, rng, keep):
        masks = {'emb': rng.random((5, 3)) < 0.5, 'layer1.wq': rng.random((3, 3)) < 0.3}
        path = tmp_path / 'short.mask'
        SubnetworkCheckpoint(sparsity=0.5, method='OMP', seed=0, masks=masks).save(path)
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(CheckpointFormatError, match='ends early'):
            SubnetworkCheckpoint.load(path)

    def test_sparsity_of(self):
        ckpt = SubnetworkCheckpoint(0.5, 'M', 0, {'w': np.array([True, False, False, True])})
        assert sparsity_of(ckpt) == 0.5
        assert ckpt.kept_fraction('w') == 0.5
