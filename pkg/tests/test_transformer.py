"""Trainable denoiser: architecture flags, causality, caching, checkpoints."""

import numpy as np
import pytest
import torch

from conftest import small_spec
from maskfuse.transformer import (
    CapabilityError,
    CheckpointError,
    ar_predict,
    build_transformer,
    load_checkpoint,
    position_coords,
    save_checkpoint,
)
from maskfuse.util import substream
from maskfuse.vocab import ConfigError, JointVocab, ModalityLayout


@pytest.fixture(scope="module")
def world():
    vocab = JointVocab(text_size=8, image_size=2)
    layout = ModalityLayout(2, 2, 4)
    return vocab, layout


def random_tokens(vocab, layout, rng, batch=3, mask_frac=0.4):
    tags = layout.tags
    tokens = np.where(
        tags[None, :] == 0,
        rng.integers(0, vocab.text_size, (batch, layout.length)),
        rng.integers(vocab.image_start, vocab.image_start + vocab.image_size, (batch, layout.length)),
    )
    masked = rng.random((batch, layout.length)) < mask_frac
    tokens[masked] = vocab.mask_id
    return tokens


class TestSpec:
    def test_divisibility_enforced(self, world):
        vocab, layout = world
        with pytest.raises(ConfigError):
            small_spec(vocab, layout, d_model=30, n_heads=4)

    def test_ffn_hidden_is_multiplier(self, world):
        vocab, layout = world
        spec = small_spec(vocab, layout)
        assert spec.ffn_hidden == 4 * spec.d_model

    def test_rope_needs_divisible_head_dim(self, world):
        vocab, layout = world
        with pytest.raises(ConfigError):
            small_spec(vocab, layout, d_model=12, n_heads=2)  # head_dim 6


class TestForward:
    def test_logit_shape(self, world):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout), seed=0)
        tokens = random_tokens(vocab, layout, substream(0, "t"))
        out = model.logits(tokens)
        assert out.shape == (3, layout.length, vocab.total_size)

    def test_invalid_ids_suppressed_to_zero_probability(self, world):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout), seed=0)
        tokens = random_tokens(vocab, layout, substream(1, "t"))
        out = model.logits(tokens)
        probs = np.exp(out - out.max(-1, keepdims=True))
        probs /= probs.sum(-1, keepdims=True)
        text_pos = layout.text_slice.start
        image_ids = list(vocab.modality_range(1))
        assert np.all(probs[:, text_pos, image_ids] == 0.0)

    def test_qk_rows_unit_norm(self, world):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout, qk_norm=True), seed=0)
        tokens = random_tokens(vocab, layout, substream(2, "t"))
        captured = []
        with torch.no_grad():
            model.module(torch.from_numpy(tokens), capture_qk=captured)
        for q, k in captured:
            assert float((q.norm(dim=-1) - 1).abs().max()) < 1e-5
            assert float((k.norm(dim=-1) - 1).abs().max()) < 1e-5

    def test_zero_init_output_uniform_logits(self, world):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout, zero_init_output=True), seed=0)
        tokens = random_tokens(vocab, layout, substream(3, "t"))
        out = model.logits(tokens)
        finite = out > -1e8
        assert np.all(out[finite] == 0.0)

    def test_deterministic_build(self, world):
        vocab, layout = world
        a = build_transformer(small_spec(vocab, layout), seed=9)
        b = build_transformer(small_spec(vocab, layout), seed=9)
        tokens = random_tokens(vocab, layout, substream(4, "t"))
        np.testing.assert_array_equal(a.logits(tokens), b.logits(tokens))

    def test_permutation_equivariance_without_positions(self, world):
        # suppression is a fixed position-indexed mask, so it is disabled too
        vocab, layout = world
        spec = small_spec(
            vocab, layout, use_rope=False, use_modality_embed=False, suppress_invalid=False
        )
        model = build_transformer(spec, seed=5, dtype=torch.float64)
        rng = substream(5, "perm")
        tokens = random_tokens(vocab, layout, rng, batch=1)
        perm = rng.permutation(layout.length)
        base = model.logits(tokens)
        permuted = model.logits(tokens[:, perm])
        np.testing.assert_allclose(permuted, base[:, perm], rtol=1e-9, atol=1e-9)

    def test_sandwich_norm_changes_model(self, world):
        vocab, layout = world
        on = build_transformer(small_spec(vocab, layout, sandwich_norm=True), seed=0)
        off = build_transformer(small_spec(vocab, layout, sandwich_norm=False), seed=0)
        names_on = [n for n, _ in on.module.named_parameters()]
        names_off = [n for n, _ in off.module.named_parameters()]
        assert "blocks.0.ffn_post_norm.weight" in names_on
        assert "blocks.0.ffn_post_norm.weight" not in names_off


class TestPositionCoords:
    def test_image_grid_row_col(self):
        layout = ModalityLayout(2, 3, 2)
        coords = position_coords(layout)
        np.testing.assert_array_equal(
            coords[:6], [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]
        )
        np.testing.assert_array_equal(coords[6:], [[0, 0], [1, 1]])

    def test_flipped_layout(self):
        layout = ModalityLayout(1, 2, 2, image_first=False)
        coords = position_coords(layout)
        np.testing.assert_array_equal(coords, [[0, 0], [1, 1], [0, 0], [0, 1]])


class TestCausal:
    def test_causality_bit_exact(self, world):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout, attention="causal"), seed=1)
        rng = substream(6, "causal")
        x = random_tokens(vocab, layout, rng, batch=1, mask_frac=0.0)[0]
        base = ar_predict(model, x)
        for _ in range(100):
            j = int(rng.integers(0, layout.length))
            perturbed = x.copy()
            choices = [i for i in vocab.modality_range(int(layout.tags[j])) if i != x[j]]
            perturbed[j] = choices[int(rng.integers(0, len(choices)))]
            out = ar_predict(model, perturbed)
            assert np.array_equal(out[: j + 1], base[: j + 1])
            assert not np.array_equal(out[j + 1 :], base[j + 1 :]) or j == layout.length - 1

    def test_empty_prefix_single_row(self, world):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout, attention="causal"), seed=1)
        out = ar_predict(model, np.array([], dtype=np.int64))
        assert out.shape == (1, vocab.total_size)

    def test_full_sequence_row_count(self, world):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout, attention="causal"), seed=1)
        x = random_tokens(vocab, layout, substream(7, "c"), batch=1, mask_frac=0.0)[0]
        assert ar_predict(model, x).shape == (layout.length, vocab.total_size)

    def test_bidirectional_rejects_ar_predict(self, world):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout), seed=1)
        with pytest.raises(CapabilityError):
            ar_predict(model, np.zeros(layout.length, dtype=np.int64))


class TestCache:
    def test_oracle_has_no_cache(self, oracle_2x2):
        assert not oracle_2x2.supports_cache

    def test_causal_has_no_cache(self, world):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout, attention="causal"), seed=0)
        assert not model.supports_cache
        with pytest.raises(CapabilityError):
            model.logits_with_cache(np.zeros((1, layout.length), dtype=np.int64))

    def test_fresh_cache_text_pass_matches_full(self, world):
        # a just-refreshed cache reproduces the full pass on text rows exactly
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout, n_layers=3), seed=2)
        tokens = random_tokens(vocab, layout, substream(8, "cache"))
        full, cache = model.logits_with_cache(tokens)
        text = model.text_logits(tokens, layout, cache)
        np.testing.assert_array_equal(text, full[:, layout.text_slice])


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, world, tmp_path):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout), seed=3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        tokens = random_tokens(vocab, layout, substream(9, "ck"))
        np.testing.assert_array_equal(model.logits(tokens), loaded.logits(tokens))

    def test_bad_magic(self, world, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE!" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload(self, world, tmp_path):
        vocab, layout = world
        model = build_transformer(small_spec(vocab, layout), seed=3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 64])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_spec_preserved(self, world, tmp_path):
        vocab, layout = world
        spec = small_spec(vocab, layout, n_layers=3, sandwich_norm=False)
        model = build_transformer(spec, seed=3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        assert load_checkpoint(path).spec == spec
