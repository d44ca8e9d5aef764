"""Low-rank adapters: identity at init, freezing, dropout gating, merging."""

import numpy as np
import pytest

from tinyembed.errors import AdapterError, ConfigError
from tinyembed.lora import (
    TARGET_NAMES,
    LoraAdapter,
    LoraConfig,
    attach,
    merge,
    trainable_parameters,
)
from tinyembed.model import ModelConfig, TransformerLM
from tinyembed.tensor import Tape, backward
import tinyembed.tensor as T

EOS = 257


def fresh_model(seed=0):
    config = ModelConfig(
        vocab_size=260, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=12
    )
    return TransformerLM(config, np.random.default_rng(seed)), config


def eos_batch(rng, batch=3, width=8):
    tokens = np.full((batch, width), 256, dtype=np.int64)
    eos_positions = np.empty(batch, dtype=np.int64)
    for b in range(batch):
        n = int(rng.integers(3, width + 1))
        tokens[b, : n - 1] = rng.integers(0, 256, size=n - 1)
        tokens[b, n - 1] = EOS
        eos_positions[b] = n - 1
    return tokens, eos_positions


class TestLoraConfig:
    def test_defaults_and_scale(self):
        c = LoraConfig()
        assert (c.rank, c.alpha, c.dropout) == (8, 32.0, 0.1)
        assert c.target_matrices == TARGET_NAMES
        assert c.scale == 4.0

    def test_targets_are_canonicalized(self):
        c = LoraConfig(target_matrices=("W_o", "W_q"))
        assert c.target_matrices == ("W_q", "W_o")

    def test_dict_roundtrip(self):
        c = LoraConfig(rank=4, alpha=8.0, dropout=0.0, target_matrices=("W_v",))
        assert LoraConfig.from_dict(c.to_dict()) == c

    def test_validation(self):
        with pytest.raises(ConfigError):
            LoraConfig(rank=0)
        with pytest.raises(ConfigError):
            LoraConfig(alpha=0.0)
        with pytest.raises(ConfigError):
            LoraConfig(dropout=1.0)
        with pytest.raises(ConfigError):
            LoraConfig(target_matrices=())
        with pytest.raises(ConfigError):
            LoraConfig(target_matrices=("W_q", "W_q"))
        with pytest.raises(ConfigError):
            LoraConfig(target_matrices=("W_z",))


class TestAttach:
    def test_zero_init_means_identical_embeddings(self):
        rng = np.random.default_rng(1)
        tokens, eos = eos_batch(rng)
        model, _ = fresh_model()
        before = model.extract_embedding(tokens, eos).values.copy()
        handle = attach(model, LoraConfig(), np.random.default_rng(9))
        after = handle.extract_embedding(tokens, eos).values
        np.testing.assert_array_equal(after, before)

    def test_base_parameters_are_frozen(self):
        model, _ = fresh_model()
        handle = attach(model, LoraConfig(), np.random.default_rng(0))
        assert all(not p.requires_grad for p in model.params.values())
        rng = np.random.default_rng(2)
        tokens, eos = eos_batch(rng)
        with Tape() as tape:
            emb = handle.extract_embedding(tokens, eos)
            loss = T.mean_all(T.mul(emb, emb))
        backward(tape, loss)
        assert all(p.grad is None for p in model.params.values())

    def test_trainable_parameters_are_exactly_the_adapters(self):
        model, c = fresh_model()
        handle = attach(model, LoraConfig(rank=8), np.random.default_rng(0))
        params = trainable_parameters(handle)
        # 2 layers x 4 projections x (A + B)
        assert len(params) == c.n_layers * 4 * 2
        assert all(".lora_A" in n or ".lora_B" in n for n in params)
        total = sum(p.values.size for p in params.values())
        assert total == c.n_layers * 4 * 2 * 8 * c.d_model  # 8192 for this model

    def test_adapter_gradients_flow_when_b_is_nonzero(self):
        model, _ = fresh_model()
        handle = attach(model, LoraConfig(dropout=0.0), np.random.default_rng(0))
        params = trainable_parameters(handle)
        for name, p in params.items():
            if name.endswith("lora_B"):
                p.values[...] = np.random.default_rng(5).normal(0, 0.02, p.shape)
        rng = np.random.default_rng(3)
        tokens, eos = eos_batch(rng)
        with Tape() as tape:
            emb = handle.extract_embedding(tokens, eos)
            loss = T.mean_all(T.mul(emb, emb))
        backward(tape, loss)
        for name, p in params.items():
            assert p.grad is not None and np.any(p.grad != 0.0), name

    def test_double_attach_is_refused(self):
        model, _ = fresh_model()
        attach(model, LoraConfig(), np.random.default_rng(0))
        with pytest.raises(AdapterError):
            attach(model, LoraConfig(), np.random.default_rng(1))

    def test_rank_must_fit_the_projection(self):
        model, _ = fresh_model()  # d_model 16
        with pytest.raises(ConfigError):
            attach(model, LoraConfig(rank=17), np.random.default_rng(0))

    def test_partial_targets_only_hook_those_projections(self):
        model, _ = fresh_model()
        attach(model, LoraConfig(target_matrices=("W_v",)), np.random.default_rng(0))
        assert set(model.deltas) == {"layers.0.attn.W_v", "layers.1.attn.W_v"}


class TestDropoutGating:
    def test_train_mode_with_dropout_needs_a_generator(self):
        model, _ = fresh_model()
        handle = attach(model, LoraConfig(dropout=0.3), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            handle.train()
        handle.train(np.random.default_rng(1))  # fine with one

    def test_eval_mode_is_deterministic_even_with_dropout_configured(self):
        model, _ = fresh_model()
        handle = attach(model, LoraConfig(dropout=0.5), np.random.default_rng(0))
        for p in trainable_parameters(handle).values():
            p.values[...] = np.random.default_rng(7).normal(0, 0.05, p.shape)
        handle.eval()
        rng = np.random.default_rng(4)
        tokens, eos = eos_batch(rng)
        a = handle.extract_embedding(tokens, eos).values
        b = handle.extract_embedding(tokens, eos).values
        np.testing.assert_array_equal(a, b)

    def test_train_mode_dropout_perturbs_the_forward(self):
        model, _ = fresh_model()
        handle = attach(model, LoraConfig(dropout=0.5), np.random.default_rng(0))
        for p in trainable_parameters(handle).values():
            p.values[...] = np.random.default_rng(7).normal(0, 0.05, p.shape)
        rng = np.random.default_rng(4)
        tokens, eos = eos_batch(rng)
        eval_out = handle.eval().extract_embedding(tokens, eos).values
        handle.train(np.random.default_rng(8))
        train_out = handle.extract_embedding(tokens, eos).values
        assert not np.array_equal(train_out, eval_out)


class TestMerge:
    def test_delta_weight_formula(self):
        rng = np.random.default_rng(6)
        config = LoraConfig(rank=4, alpha=10.0)
        adapter = LoraAdapter(12, 8, config, rng)
        adapter.B.values[...] = rng.normal(size=(8, 4))
        expected = (10.0 / 4.0) * (adapter.B.values @ adapter.A.values).T
        np.testing.assert_allclose(adapter.delta_weight(), expected, atol=0)

    def test_merged_model_reproduces_adapted_embeddings(self):
        model, _ = fresh_model()
        handle = attach(model, LoraConfig(dropout=0.0), np.random.default_rng(3))
        params = trainable_parameters(handle)
        perturb = np.random.default_rng(10)
        for p in params.values():
            p.values[...] = perturb.normal(0, 0.05, p.shape)
        rng = np.random.default_rng(5)
        tokens, eos = eos_batch(rng, batch=4)
        adapted = handle.eval().extract_embedding(tokens, eos).values.copy()
        merged = merge(handle)
        plain = merged.extract_embedding(tokens, eos).values
        assert np.max(np.abs(plain - adapted)) <= 1e-10

    def test_merge_refused_in_training_mode(self):
        model, _ = fresh_model()
        handle = attach(model, LoraConfig(dropout=0.1), np.random.default_rng(0))
        handle.train(np.random.default_rng(1))
        with pytest.raises(AdapterError):
            merge(handle)

    def test_handle_is_consumed_by_merge(self):
        model, _ = fresh_model()
        handle = attach(model, LoraConfig(), np.random.default_rng(0))
        merge(handle.eval())
        rng = np.random.default_rng(2)
        tokens, eos = eos_batch(rng)
        with pytest.raises(AdapterError):
            handle.extract_embedding(tokens, eos)
        with pytest.raises(AdapterError):
            merge(handle)
        with pytest.raises(AdapterError):
            trainable_parameters(handle)

    def test_merge_unfreezes_and_unhooks_the_base(self):
        model, _ = fresh_model()
        merged = merge(attach(model, LoraConfig(), np.random.default_rng(0)).eval())
        assert merged.deltas == {}
        assert all(p.requires_grad for p in merged.params.values())
