"""
Tests for the detection network and checkpoints.
"""

import numpy as np
import pytest
import torch

from core.errors import CheckpointError, CheckpointVersionError, CorruptCheckpointError, ShapeMismatchError
from models.checkpoint import ModelParams, load_checkpoint, save_checkpoint
from models.unet import (
    ClassifierArmConfig,
    UNetConfig,
    class_forward,
    create_model,
    create_prior_model,
    padded_segment,
    seg_forward,
)


class TestFiberNet:
    """Forward shapes and input checks."""

    def test_segmentation_shape_and_range(self, tiny_model, rng):
        prob = seg_forward(tiny_model, rng.random((32, 32, 3)).astype(np.float32))
        assert prob.shape == (32, 32)
        assert prob.values.min() >= 0.0 and prob.values.max() <= 1.0

    def test_embedding_dimension(self, tiny_model, rng):
        embedding = class_forward(tiny_model, rng.random((32, 32, 3)).astype(np.float32))
        assert embedding.shape == (2,)

    def test_fc256_embedding(self, rng):
        model = create_model(UNetConfig(base_width=4, depth=2),
                             ClassifierArmConfig(fc_sizes=(32, 16), embedding_source='fc256'))
        assert class_forward(model, rng.random((32, 32, 3)).astype(np.float32)).shape == (16,)

    def test_indivisible_patch_rejected(self, tiny_model):
        with pytest.raises(ShapeMismatchError):
            tiny_model(torch.zeros(1, 3, 30, 32))

    def test_classifier_needs_room(self, tiny_model):
        with pytest.raises(ShapeMismatchError):
            tiny_model.embed(torch.zeros(2, 3, 8, 8))

    def test_wrong_channel_count(self, tiny_model):
        with pytest.raises(ShapeMismatchError):
            tiny_model(torch.zeros(1, 1, 32, 32))

    def test_padded_segment_any_size(self, tiny_model, rng):
        out = padded_segment(tiny_model, rng.random((37, 21, 3)).astype(np.float32))
        assert out.shape == (37, 21)

    def test_eval_mode_restored(self, tiny_model, rng):
        tiny_model.train()
        seg_forward(tiny_model, rng.random((16, 16, 3)).astype(np.float32))
        assert tiny_model.training

    def test_prior_model_has_no_classifier(self):
        model = create_prior_model(base_width=4, depth=2)
        assert model.classifier is None
        with pytest.raises(RuntimeError):
            model.embed(torch.zeros(1, 3, 32, 32))

    def test_arm_config_validation(self):
        with pytest.raises(ValueError):
            ClassifierArmConfig(pool_blocks=3)
        with pytest.raises(ValueError):
            UNetConfig(depth=1)


class TestCheckpoint:
    """Save and load of ModelParams."""

    def test_round_trip(self, tiny_model, rng, tmp_path):
        path = save_checkpoint(ModelParams.from_model(tiny_model, {'seed': 3}), tmp_path / 'model.ckpt')
        params = load_checkpoint(path)
        assert params.metadata == {'seed': 3}
        restored = params.build()
        patch = rng.random((16, 16, 3)).astype(np.float32)
        np.testing.assert_allclose(seg_forward(restored, patch).values, seg_forward(tiny_model, patch).values,
                                   rtol=1e-6, atol=1e-6)

    def test_bare_model_accepted(self, tiny_model, tmp_path):
        path = save_checkpoint(tiny_model, tmp_path / 'm.ckpt')
        assert load_checkpoint(path).arm == tiny_model.arm_config

    def test_prior_model_round_trip(self, tmp_path):
        path = save_checkpoint(create_prior_model(base_width=4, depth=2), tmp_path / 'prior.ckpt')
        params = load_checkpoint(path)
        assert params.arm is None
        assert params.build().classifier is None

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / 'absent.ckpt')

    def test_truncated(self, tiny_model, tmp_path):
        path = save_checkpoint(tiny_model, tmp_path / 'm.ckpt')
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_version_mismatch(self, tiny_model, tmp_path):
        params = ModelParams.from_model(tiny_model)
        params.version = 'fiberdetect-ckpt/0'
        path = save_checkpoint(params, tmp_path / 'old.ckpt')
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_structure_hash_detects_tampering(self, tiny_model, tmp_path):
        params = ModelParams.from_model(tiny_model)
        path = tmp_path / 'tampered.ckpt'
        payload = params.to_payload()
        payload['structure_hash'] = '0' * 64
        torch.save(payload, path)
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)
