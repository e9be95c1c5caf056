# tests/test_transformer.py
import numpy as np
import pytest

from tamt.autodiff import Tensor, grad_check
from tamt.data import PAD_ID
from tamt.errors import CheckpointFormatError, ConfigError, DimensionError, InvalidArgumentError
from tamt.masking import SparsityTarget, SubnetworkCheckpoint, omp_mask
from tamt.pretrain import kd_loss, mlm_batch, mlm_loss
from tamt.transformer import (EncoderModel, attention_heads, encode, init_pretrained, load_weights,
                              mlm_logits, prunable_names, save_weights)
from tests.conftest import toy_config

GRAD_TOL = 1e-3


@pytest.fixture
def batch(corpora):
    train, _ = corpora
    return mlm_batch(train, 4, 0.15, np.random.default_rng(0))


class TestModel:

    def test_prunable_set(self):
        cfg = toy_config()
        names = prunable_names(cfg)
        assert len(names) == 1 + 6 * cfg.num_layers
        assert names[0] == 'emb' and names[-1] == 'layer2.wfo'
        model = EncoderModel(cfg)
        assert model.prunable['layer1.wfi'].shape == (8, 16)
        assert model.prunable['layer1.wfo'].shape == (16, 8)

    def test_heads_must_divide_hidden_size(self):
        with pytest.raises(ConfigError):
            toy_config(num_heads=3)

    def test_encode_shapes(self, model, batch):
        states = encode(model, batch.input_ids, False, batch.attention_mask)
        assert len(states.layers) == model.config.num_layers + 1
        assert states.final.shape == batch.input_ids.shape + (model.config.hidden_size,)
        logits = mlm_logits(model, states)
        assert logits.shape[-1] == model.config.vocab_size

    def test_sequence_too_long(self, model):
        with pytest.raises(InvalidArgumentError):
            encode(model, np.zeros((1, model.config.max_len + 1), dtype=np.int64))

    def test_padding_does_not_leak_into_real_tokens(self, model):
        ids = np.array([[2, 7, 8, 9, 3, PAD_ID, PAD_ID]])
        attention = ids != PAD_ID
        other = ids.copy()
        other[0, 5:] = [10, 11]
        a = encode(model, ids, False, attention).final.data
        b = encode(model, other, False, attention).final.data
        np.testing.assert_allclose(a[0, :5], b[0, :5], atol=1e-12)

    def test_eval_mode_is_deterministic(self, model, batch):
        a = encode(model, batch.input_ids, False, batch.attention_mask).final.data
        b = encode(model, batch.input_ids, False, batch.attention_mask).final.data
        np.testing.assert_array_equal(a, b)

    def test_zero_mask_equals_zero_weight(self, model, batch):
        masked = model.clone()
        bits = np.ones(masked.prunable['layer1.wv'].shape, dtype=bool)
        bits[:, :3] = False
        masked.prunable['layer1.wv'].set_mask(bits)
        zeroed = model.clone()
        zeroed.prunable['layer1.wv'].weight.data[:, :3] = 0.0
        a = encode(masked, batch.input_ids, False, batch.attention_mask).final.data
        b = encode(zeroed, batch.input_ids, False, batch.attention_mask).final.data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_pruned_weight_values_do_not_matter(self, model, batch):
        model.apply_checkpoint(omp_mask(model.weights(), SparsityTarget(0.5)))
        other = model.clone()
        for name in ('emb', 'layer1.wq', 'layer2.wfi'):
            param = other.prunable[name]
            param.weight.data[~param.bits()] += 5.0
        a = encode(model, batch.input_ids, False, batch.attention_mask).final.data
        b = encode(other, batch.input_ids, False, batch.attention_mask).final.data
        assert np.array_equal(a, b)

    def test_absent_token_embedding_row_is_unused(self, model):
        absent = model.config.vocab_size - 1
        ids = np.array([[2, 5, 6, 7, 3]])
        assert absent not in ids
        masked = model.clone()
        bits = np.ones(masked.prunable['emb'].shape, dtype=bool)
        bits[absent] = False
        masked.prunable['emb'].set_mask(bits)
        assert np.array_equal(encode(model, ids).final.data, encode(masked, ids).final.data)

    def test_apply_checkpoint_materializes_zeros(self, model):
        ckpt = omp_mask(model.weights(), SparsityTarget(0.5))
        model.apply_checkpoint(ckpt, materialize=True)
        for name, bits in ckpt.masks.items():
            assert np.all(model.prunable[name].weight.data[~bits] == 0.0)

    def test_apply_checkpoint_shape_mismatch(self, model):
        ckpt = SubnetworkCheckpoint.all_ones({'emb': (2, 2)})
        with pytest.raises(DimensionError):
            model.apply_checkpoint(ckpt)


class TestAttention:

    @pytest.mark.parametrize('num_heads', [1, 2])
    def test_matches_direct_evaluation(self, num_heads):
        model = EncoderModel(toy_config(num_layers=1, num_heads=num_heads, init_std=0.3), seed=2)
        rng = np.random.default_rng(0)
        for b in ('bq', 'bk', 'bv'):
            model.aux[f'layer1.{b}'].data = rng.normal(0.0, 0.3, 8)
        x = rng.normal(size=(1, 3, 8))
        got = attention_heads(model, 1, Tensor._wrap(x), Tensor._wrap(np.zeros((1, 1, 1, 3)))).data

        def proj(w, b):
            return x[0] @ model.prunable[f'layer1.{w}'].weight.data + model.aux[f'layer1.{b}'].data

        q, k, v = proj('wq', 'bq'), proj('wk', 'bk'), proj('wv', 'bv')
        dh = 8 // num_heads
        heads = []
        for i in range(num_heads):
            cols = slice(i * dh, (i + 1) * dh)
            scores = q[:, cols] @ k[:, cols].T / np.sqrt(dh)
            probs = np.exp(scores - scores.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            heads.append(probs @ v[:, cols])
        np.testing.assert_allclose(got[0], np.concatenate(heads, axis=1), rtol=0, atol=1e-10)


class TestGradients:

    @pytest.mark.parametrize('name', ['emb', 'layer1.wq', 'layer1.wao', 'layer2.wfi', 'layer2.wfo'])
    def test_mlm_loss_wrt_mask(self, model, batch, name):
        param = model.prunable[name]
        err = grad_check(lambda _: mlm_loss(model, batch, train_mode=False), param.mask_tensor,
                         max_entries=40)
        assert err < GRAD_TOL

    def test_mlm_loss_wrt_weight_and_aux(self, model, batch):
        loss = lambda _: mlm_loss(model, batch, train_mode=False)  # noqa: E731
        assert grad_check(loss, model.prunable['layer1.wk'].weight, max_entries=30) < GRAD_TOL
        assert grad_check(loss, model.aux['layer2.ln1.gain'], max_entries=8) < GRAD_TOL
        assert grad_check(loss, model.mlm_head['mlm.weight'], max_entries=30) < GRAD_TOL

    def test_kd_loss_wrt_mask(self, model, batch):
        teacher = model.clone()
        model.apply_checkpoint(omp_mask(model.weights(), SparsityTarget(0.5)))
        param = model.prunable['layer1.wfi']
        err = grad_check(lambda _: kd_loss(teacher, model, batch, train_mode=False),
                         param.mask_tensor, max_entries=40)
        assert err < GRAD_TOL


class TestKnowledgeDistillation:

    def test_identical_student_has_zero_loss(self, model, batch):
        assert abs(kd_loss(model, model.clone(), batch).item()) < 1e-12

    def test_matches_direct_evaluation(self, corpora):
        train, _ = corpora
        cfg = toy_config(train.vocab_size, num_layers=1, init_std=0.3)
        teacher = EncoderModel(cfg, seed=3)
        student = teacher.clone()
        student.apply_checkpoint(omp_mask(student.weights(), SparsityTarget(0.6)))
        ids = np.array([[2, 6, 7, 3, PAD_ID], [2, 9, 8, 10, 3]])
        batch = mlm_batch(train, 2, 0.15, np.random.default_rng(0), indices=[0, 1])
        batch.input_ids, batch.attention_mask = ids, ids != PAD_ID

        t = encode(teacher, ids, False, batch.attention_mask).layers[1].data
        s = encode(student, ids, False, batch.attention_mask).layers[1].data
        rows = batch.attention_mask.reshape(-1)
        t, s = t.reshape(-1, cfg.hidden_size)[rows], s.reshape(-1, cfg.hidden_size)[rows]
        cos = (t * s).sum(axis=1) / (np.linalg.norm(t, axis=1) * np.linalg.norm(s, axis=1))
        expected = np.mean(1.0 - cos)
        assert abs(kd_loss(teacher, student, batch).item() - expected) < 1e-10


class TestWeightsFile:

    def test_round_trip(self, model, tmp_path):
        path = tmp_path / 'theta0.weights'
        save_weights(model, path)
        loaded = load_weights(path)
        assert loaded.config == model.config
        for name, arr in model.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[name], arr)

    @pytest.mark.parametrize('keep', [6, 40, -8])
    def test_truncated_file(self, model, tmp_path, keep):
        path = tmp_path / 'theta0.weights'
        save_weights(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:keep])
        with pytest.raises(CheckpointFormatError, match='ends early'):
            load_weights(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'x.weights'
        path.write_bytes(b'XXXX' + bytes(64))
        with pytest.raises(CheckpointFormatError):
            load_weights(path)


class TestInitPretrained:

    def test_zero_steps_is_random_init(self, corpora):
        train, _ = corpora
        cfg = toy_config(vocab_size=999)
        model = init_pretrained(cfg, train, steps=0, seed=5)
        assert model.config.vocab_size == train.vocab_size
        ref = EncoderModel(toy_config(train.vocab_size), seed=5)
        np.testing.assert_array_equal(model.prunable['emb'].weight.data,
                                      ref.prunable['emb'].weight.data)

    def test_training_changes_weights_and_keeps_masks(self, corpora, theta0):
        train, _ = corpora
        ref = EncoderModel(theta0.config, seed=0)
        assert not np.array_equal(theta0.prunable['layer1.wq'].weight.data,
                                  ref.prunable['layer1.wq'].weight.data)
        assert all(p.bits().all() for p in theta0.prunable.values())
