import numpy as np
import pytest
import torch

from gradutil import max_rel_grad_error
from pianocover.core import Bar
from pianocover.encoder import (
    CHROMA_CONDITION_DIM,
    ConditionAdapter,
    ConditionBlock,
    EncoderConfig,
    EncoderError,
    adapter_forward,
    extract_condition_features,
)
from pianocover.features import FeatureError, FeatureMatrix, load_features, save_features
from pianocover.fixtures import constant_grid


def constant_chroma_features(n_frames=100, pc=(0, 4, 7), frame_rate=10.0):
    frame = np.zeros(12)
    for c in pc:
        frame[c] = 1.0
    frame /= np.linalg.norm(frame)
    return FeatureMatrix(np.tile(frame, (n_frames, 1)), frame_rate, "midi-synthetic")


class TestExtract:
    def test_silent_bar_is_zero_block(self):
        grid = constant_grid(1)
        feats = FeatureMatrix(np.zeros((30, 12)), 10.0, "midi-synthetic")
        block = extract_condition_features(feats, grid, Bar(0, 0, 4))
        assert block.shape == (4, CHROMA_CONDITION_DIM)
        assert np.all(block == 0.0)

    def test_constant_chroma_gives_identical_vectors(self):
        grid = constant_grid(1)
        feats = constant_chroma_features()
        block = extract_condition_features(feats, grid, Bar(0, 0, 4))
        assert block.shape == (4, 14)
        assert np.allclose(block, block[0])
        assert block[0, 13] > 0.0  # active audio has nonzero log-energy

    def test_onset_strength_zero_for_constant_stream(self):
        grid = constant_grid(1)
        feats = constant_chroma_features()
        block = extract_condition_features(feats, grid, Bar(0, 0, 4))
        assert np.all(block[:, 12] == 0.0)

    def test_imported_embeddings_pass_through(self, tmp_path, rng):
        feats = FeatureMatrix(rng.normal(size=(40, 512)), 10.0, "imported")
        path = tmp_path / "emb.fmx"
        save_features(feats, path)
        loaded = load_features(path)
        grid = constant_grid(1)
        block = extract_condition_features(loaded, grid, Bar(0, 0, 4))
        assert block.shape == (4, 512)
        # beat 0 pools frames 0..4 (0.5 s at 10 fps)
        assert np.allclose(block[0], loaded.frames[0:5].mean(axis=0))

    def test_bar_outside_span_rejected(self):
        grid = constant_grid(4)
        feats = FeatureMatrix(np.zeros((5, 12)), 10.0, "midi-synthetic")  # 0.5 s
        with pytest.raises(FeatureError, match="beyond"):
            extract_condition_features(feats, grid, Bar(3, 12, 16))

    def test_empty_sub_span_pools_to_zero(self):
        grid = constant_grid(1)
        feats = constant_chroma_features(n_frames=6)  # covers 0.6 s = beat 0 + a bit
        block = extract_condition_features(feats, grid, Bar(0, 0, 4))
        assert np.any(block[0] != 0.0)
        assert np.all(block[2:] == 0.0)


def toy_config(**kw):
    defaults = dict(input_dim=14, d_model=16, n_layers=2, n_heads=2, ffn_dim=32)
    defaults.update(kw)
    return EncoderConfig(**defaults)


class TestAdapter:
    def test_output_shape_contract(self, rng):
        adapter = ConditionAdapter(toy_config())
        for n_vectors in (1, 4, 7):
            x = torch.randn(n_vectors, 14)
            out = adapter(x)
            assert out.shape == (n_vectors, 16)

    def test_zero_weights_zero_output(self):
        adapter = ConditionAdapter(toy_config(bias=False))
        with torch.no_grad():
            for p in adapter.parameters():
                p.zero_()
        out = adapter(torch.randn(4, 14))
        assert torch.all(out == 0.0)

    def test_deterministic_given_params(self):
        torch.manual_seed(7)
        adapter = ConditionAdapter(toy_config())
        x = torch.randn(4, 14)
        assert torch.equal(adapter(x), adapter(x))

    def test_dim_mismatch_rejected(self):
        adapter = ConditionAdapter(toy_config())
        with pytest.raises(EncoderError):
            adapter(torch.randn(4, 12))

    def test_config_validation(self):
        with pytest.raises(EncoderError):
            EncoderConfig(d_model=10, n_heads=3)
        with pytest.raises(EncoderError):
            EncoderConfig(input_dim=0)

    def test_gradients_match_finite_differences(self, rng):
        torch.manual_seed(0)
        adapter = ConditionAdapter(toy_config()).double()
        x = torch.randn(4, 14, dtype=torch.float64)
        probe = torch.randn(4, 16, dtype=torch.float64)
        error = max_rel_grad_error(adapter, lambda: (adapter(x) * probe).sum(), rng)
        assert error < 1e-4

    def test_adapter_forward_blocks(self, rng):
        torch.manual_seed(3)
        adapter = ConditionAdapter(toy_config())
        blocks = [
            ConditionBlock(0, rng.normal(size=(4, 14))),
            ConditionBlock(2, rng.normal(size=(3, 14))),
        ]
        out = adapter_forward(adapter, blocks)
        assert [e.bar_index for e in out] == [0, 2]
        assert out[0].vectors.shape == (4, 16)
        assert out[1].vectors.shape == (3, 16)

    def test_extractor_is_frozen_by_construction(self):
        # The extraction path is a pure function of its inputs: no module,
        # no parameters, nothing for an optimizer to touch.
        import inspect

        import pianocover.encoder as enc

        assert not isinstance(extract_condition_features, torch.nn.Module)
        signature = inspect.signature(extract_condition_features)
        assert "params" not in signature.parameters


class TestConditionBlockType:
    def test_requires_2d(self):
        with pytest.raises(EncoderError):
            ConditionBlock(0, np.zeros(14))

    def test_rejects_non_finite(self):
        bad = np.full((4, 14), np.nan)
        with pytest.raises(EncoderError):
            ConditionBlock(0, bad)
