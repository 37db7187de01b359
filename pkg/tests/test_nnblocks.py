"""Transformer backbone: attention oracle, block algebra, encoder/decoder."""

import numpy as np
import pytest

from apneafusion import tensorgrad as tg
from apneafusion.nnblocks import ModalityModel, TransformerConfig, mhsa, transformer_block
from apneafusion.tensorgrad import Tensor, check_gradients


def tiny_cfg(**over):
    base = dict(num_layers=1, num_heads=2, d_model=8, d_ffn_hidden=4,
                d_latent=8, d_cls_hidden=4, dropout_rate=0.25,
                patch_size=16, num_tokens=4)
    base.update(over)
    return TransformerConfig(**base)


@pytest.fixture
def tiny_model():
    return ModalityModel.create(tiny_cfg(), "ECG", np.random.default_rng(0))


def _zero_linear_weights(model):
    """Zero every matrix/bias but keep LayerNorm affine at identity."""
    for name, t in model.params.items():
        if "ln1" in name or "ln2" in name or "/norm/" in name:
            continue
        t.data = np.zeros_like(t.data)


class TestConfig:
    def test_defaults_give_30_tokens_of_128(self):
        cfg = TransformerConfig()
        assert cfg.epoch_samples == 3840
        assert cfg.d_k == 8

    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            TransformerConfig(d_model=30, num_heads=4, d_latent=30)

    def test_latent_must_match_d_model(self):
        with pytest.raises(ValueError):
            TransformerConfig(d_latent=16)


class TestPatchEmbed:
    def test_zero_signal_zero_pos_gives_zero_tokens(self, tiny_model):
        tiny_model.params["modality/ECG/encoder/pos"].data[:] = 0.0
        out = tiny_model.patch_embed(np.zeros(64))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_default_shape_is_30_by_32(self):
        model = ModalityModel.create(TransformerConfig(), "EEG",
                                     np.random.default_rng(1))
        out = model.patch_embed(np.zeros(3840))
        assert out.shape == (1, 30, 32)

    def test_patch_locality(self, tiny_model):
        rng = np.random.default_rng(2)
        x1 = rng.standard_normal(64)
        x2 = x1.copy()
        x2[3 * 16:4 * 16] += 1.0  # perturb only patch 3
        t1 = tiny_model.patch_embed(x1).data[0]
        t2 = tiny_model.patch_embed(x2).data[0]
        diff_rows = np.flatnonzero(np.abs(t1 - t2).max(axis=-1) > 0)
        np.testing.assert_array_equal(diff_rows, [3])

    def test_wrong_length_rejected(self, tiny_model):
        with pytest.raises(tg.ShapeError):
            tiny_model.patch_embed(np.zeros(65))


def _head_weights(params, prefix, num_heads):
    return [(params[f"{prefix}/head{i}/w_key"],
             params[f"{prefix}/head{i}/w_query"],
             params[f"{prefix}/head{i}/w_value"]) for i in range(num_heads)]


def naive_attention(x, heads, w_out, d_k):
    """Direct per-pair summation oracle for multi-head self-attention."""
    n = x.shape[0]
    head_outs = []
    for w_key, w_query, w_value in heads:
        k, q, v = x @ w_key, x @ w_query, x @ w_value
        out = np.zeros((n, d_k))
        for r in range(n):
            logits = np.array([k[r] @ q[c] for c in range(n)]) / np.sqrt(d_k)
            e = np.exp(logits - logits.max())
            p = e / e.sum()
            for c in range(n):
                out[r] += p[c] * v[c]
        head_outs.append(out)
    return np.concatenate(head_outs, axis=-1) @ w_out


class TestMHSA:
    def test_single_token_reduces_to_value_path(self, tiny_model):
        cfg = tiny_model.cfg
        prefix = "modality/ECG/encoder/block0/attn"
        heads = _head_weights(tiny_model.params, prefix, cfg.num_heads)
        w_out = tiny_model.params[f"{prefix}/w_out"]
        x = np.random.default_rng(3).standard_normal((1, 1, cfg.d_model))
        out = mhsa(Tensor(x), heads, w_out, cfg.d_k)
        expected = np.concatenate(
            [x[0] @ wv.data for _, _, wv in heads], axis=-1) @ w_out.data
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)

    def test_permutation_equivariance(self, tiny_model):
        cfg = tiny_model.cfg
        prefix = "modality/ECG/encoder/block0/attn"
        heads = _head_weights(tiny_model.params, prefix, cfg.num_heads)
        w_out = tiny_model.params[f"{prefix}/w_out"]
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 5, cfg.d_model))
        perm = rng.permutation(5)
        out = mhsa(Tensor(x), heads, w_out, cfg.d_k).data[0]
        out_perm = mhsa(Tensor(x[:, perm]), heads, w_out, cfg.d_k).data[0]
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)

    def test_matches_direct_summation_oracle(self, tiny_model):
        cfg = tiny_model.cfg
        prefix = "modality/ECG/encoder/block0/attn"
        heads = _head_weights(tiny_model.params, prefix, cfg.num_heads)
        w_out = tiny_model.params[f"{prefix}/w_out"]
        x = np.random.default_rng(5).standard_normal((4, cfg.d_model))
        got = mhsa(Tensor(x[None]), heads, w_out, cfg.d_k).data[0]
        want = naive_attention(x, [(a.data, b.data, c.data) for a, b, c in heads],
                               w_out.data, cfg.d_k)
        np.testing.assert_allclose(got, want, atol=1e-10)


class TestTransformerBlock:
    def test_zero_weight_collapse_is_double_layernorm(self, tiny_model):
        _zero_linear_weights(tiny_model)
        cfg = tiny_model.cfg
        x = np.random.default_rng(6).standard_normal((1, 4, cfg.d_model))
        out = transformer_block(Tensor(x), tiny_model.params,
                                "modality/ECG/encoder/block0", cfg)
        ones, zeros = Tensor(np.ones(cfg.d_model)), Tensor(np.zeros(cfg.d_model))
        expected = tg.layer_norm(tg.layer_norm(Tensor(x), ones, zeros), ones, zeros)
        np.testing.assert_allclose(out.data, expected.data, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 30])
    def test_shape_preserving(self, tiny_model, n):
        cfg = tiny_model.cfg
        x = np.random.default_rng(7).standard_normal((1, n, cfg.d_model))
        out = transformer_block(Tensor(x), tiny_model.params,
                                "modality/ECG/encoder/block0", cfg)
        assert out.shape == (1, n, cfg.d_model)

    def test_block_gradients_match_finite_differences(self, tiny_model):
        cfg = tiny_model.cfg
        prefix = "modality/ECG/encoder/block0"
        block_params = {k: v for k, v in tiny_model.params.items()
                        if k.startswith(prefix)}
        x = np.random.default_rng(8).standard_normal((1, 3, cfg.d_model))
        w = np.random.default_rng(9).standard_normal((1, 3, cfg.d_model))

        def build():
            out = transformer_block(Tensor(x), tiny_model.params, prefix, cfg)
            return tg.sum_(tg.mul(out, Tensor(w)))

        assert check_gradients(build, block_params) < 1e-4


class TestEncoder:
    def test_latent_shape(self):
        model = ModalityModel.create(TransformerConfig(), "EOG",
                                     np.random.default_rng(10))
        z = model.encode(np.random.default_rng(11).standard_normal(3840))
        assert z.shape == (1, 32)

    def test_eval_mode_deterministic(self, tiny_model):
        x = np.random.default_rng(12).standard_normal(64)
        z1 = tiny_model.encode(x).data
        z2 = tiny_model.encode(x).data
        assert z1.tobytes() == z2.tobytes()

    def test_distinct_inputs_give_distinct_latents(self, tiny_model):
        rng = np.random.default_rng(13)
        for _ in range(100):
            a, b = rng.standard_normal((2, 64))
            za = tiny_model.encode(a).data
            zb = tiny_model.encode(b).data
            assert np.abs(za - zb).max() > 1e-9

    def test_permutation_invariance_with_zero_pos(self, tiny_model):
        cfg = tiny_model.cfg
        tiny_model.params["modality/ECG/encoder/pos"].data[:] = 0.0
        rng = np.random.default_rng(14)
        x = rng.standard_normal(cfg.epoch_samples)
        patches = x.reshape(cfg.num_tokens, cfg.patch_size)
        perm = rng.permutation(cfg.num_tokens)
        z = tiny_model.encode(x).data
        z_perm = tiny_model.encode(patches[perm].reshape(-1)).data
        np.testing.assert_allclose(z_perm, z, atol=1e-10)


class TestDecoder:
    def test_output_length_is_epoch(self):
        model = ModalityModel.create(TransformerConfig(), "CO2",
                                     np.random.default_rng(15))
        z = Tensor(np.random.default_rng(16).standard_normal((1, 32)))
        assert model.decode(z).shape == (1, 3840)

    def test_end_to_end_gradcheck_tiny(self):
        model = ModalityModel.create(tiny_cfg(), "RESP", np.random.default_rng(17))
        x = np.random.default_rng(18).standard_normal(64)

        def build():
            _, xhat = model.autoencode(x)
            d = xhat - Tensor(np.atleast_2d(x))
            return tg.mean(tg.mul(d, d))

        assert check_gradients(build, model.trainable()) < 1e-4

    def test_autoencoder_beats_mean_predictor_on_sinusoids(self):
        """Pretrain on a 0.2 Hz sinusoid family; beat the train-mean baseline."""
        cfg = tiny_cfg(num_layers=1, num_heads=2, d_model=16, d_ffn_hidden=8,
                       d_latent=16, patch_size=64, num_tokens=10, dropout_rate=0.0)
        model = ModalityModel.create(cfg, "RESP", np.random.default_rng(19))
        rng = np.random.default_rng(20)
        fs, freq = 128.0, 0.2
        t = np.arange(cfg.epoch_samples) / fs

        def family(n):
            amp = rng.uniform(0.5, 1.5, size=(n, 1))
            phase = rng.uniform(0, 2 * np.pi, size=(n, 1))
            return amp * np.sin(2 * np.pi * freq * t[None] + phase)

        train, held_out = family(64), family(32)
        params = model.trainable()
        state = tg.AdamState()
        for step in range(600):
            batch = train[(step * 32) % 64:(step * 32) % 64 + 32]
            _, xhat = model.autoencode(batch)
            d = xhat - Tensor(batch)
            loss = tg.mean(tg.mul(d, d))
            tg.zero_grads(params)
            loss.backward()
            tg.adam_step(params, state, lr=3e-3)

        _, rec = model.autoencode(held_out)
        mse_model = float(np.mean((rec.data - held_out) ** 2))
        mse_mean = float(np.mean((train.mean(axis=0)[None] - held_out) ** 2))
        assert mse_model < mse_mean


class TestClassifier:
    def test_zero_weights_give_half(self, tiny_model):
        _zero_linear_weights(tiny_model)
        z = Tensor(np.random.default_rng(21).standard_normal((5, 8)))
        np.testing.assert_array_equal(tiny_model.classify(z).data, 0.5)

    def test_output_strictly_inside_unit_interval(self, tiny_model):
        z = Tensor(np.random.default_rng(22).standard_normal((20, 8)) * 50)
        p = tiny_model.classify(z).data
        assert np.all(p > 0.0) and np.all(p < 1.0)

    def test_learns_separable_latents(self, tiny_model):
        from sklearn.linear_model import LogisticRegression

        rng = np.random.default_rng(23)
        n = 200
        y = (np.arange(n) % 2).astype(float)
        z = rng.standard_normal((n, 8)) + np.where(y[:, None] > 0, 2.0, -2.0)

        oracle = LogisticRegression().fit(z, y)
        assert oracle.score(z, y) > 0.95  # data really is separable

        params = {k: v for k, v in tiny_model.trainable().items()
                  if "/classifier/" in k}
        state = tg.AdamState()
        zt = Tensor(z)
        yt = Tensor(y)
        for _ in range(200):
            p = tiny_model.classify(zt)
            p = tg.clip(p, 1e-7, 1 - 1e-7)
            loss = tg.mean(-(yt * tg.log(p) + (1 - yt) * tg.log(1 - p)))
            tg.zero_grads(params)
            loss.backward()
            tg.adam_step(params, state, lr=1e-2)
        acc = np.mean((tiny_model.classify(zt).data >= 0.5) == (y > 0.5))
        assert acc > 0.95
