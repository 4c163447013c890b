"""
Tests for the prediction buffer, pseudo-labels, early stopping and the two training phases.
"""

import json

import numpy as np
import pytest
import torch

from core.domain import LABEL_DENSE, LABEL_MODERATE
from core.errors import ShapeMismatchError, TrainingError
from flows.training_flow import (
    MODEL_CHECKPOINT,
    PRETRAIN_CHECKPOINT,
    TRAIN_LOG_NAME,
    PredictionBuffer,
    Trainer,
    TrainConfig,
    TrainingFlow,
    build_te_targets,
    early_stopping,
    pretrain,
    pseudo_label,
    split_validation,
    te_train,
)
from models.checkpoint import load_checkpoint
from models.unet import ClassifierArmConfig, UNetConfig, create_model
from tools.augmentations import PatchSampler
from tools.tiling import TileSpec


def tiny_config(**overrides):
    values = dict(
        batch_size=2,
        pretrain_epochs=2,
        te_epochs=5,
        patience=5,
        steps_per_epoch=1,
        patch_size=32,
        buffer_downsample=1,
        unet=UNetConfig(base_width=4, depth=2),
        arm=ClassifierArmConfig(fc_sizes=(32, 16)),
        tile=TileSpec(tile_size=64, overlap_px=0),
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def tiny_sections(section_factory, rng):
    """Two charted and two unlabeled 64x64 sections."""
    sections = []
    for i in range(4):
        charting = np.zeros((64, 64), np.uint8)
        charting[10 + i:30 + i, 12:28] = LABEL_DENSE
        charting[40:50, 40:56] = LABEL_MODERATE
        section = section_factory((64, 64), charting=charting, section_id=f's{i:03d}', index=i, rng=rng)
        sections.append(section if i < 2 else section.without_charting())
    return sections


class TestPredictionBuffer:
    """Ring buffer of recent probability maps."""

    def test_depth_never_exceeds_r(self, rng):
        buffer = PredictionBuffer(r=3, downsample=1)
        for epoch in range(1, 8):
            buffer.push('a', epoch, rng.random((8, 8)))
            assert buffer.size('a') <= 3
        assert [e for e, _ in buffer.entries('a')] == [5, 6, 7]

    def test_pseudo_label_matches_mean_then_threshold(self, rng):
        buffer = PredictionBuffer(r=3, downsample=1)
        maps = [rng.random((10, 12)) for _ in range(5)]
        for epoch, values in enumerate(maps, start=1):
            buffer.push('a', epoch, values)
        expected = np.mean(np.stack(maps[-3:]).astype(np.float32), axis=0) >= 0.5
        np.testing.assert_array_equal(pseudo_label(buffer, 0.5, 'a'), expected)

    def test_threshold_is_inclusive(self):
        buffer = PredictionBuffer(r=1, downsample=1)
        buffer.push('a', 1, np.full((2, 2), 0.5))
        assert pseudo_label(buffer, 0.5).all()

    def test_downsampled_storage(self, rng):
        buffer = PredictionBuffer(r=2, downsample=4)
        buffer.push('a', 1, np.ones((10, 13)) * 0.75)
        mean = buffer.mean('a')
        assert mean.shape == (10, 13)
        np.testing.assert_allclose(mean, 0.75)

    def test_epochs_must_increase(self, rng):
        buffer = PredictionBuffer(r=3, downsample=1)
        buffer.push('a', 2, rng.random((4, 4)))
        with pytest.raises(ValueError):
            buffer.push('a', 2, rng.random((4, 4)))

    def test_shape_change_rejected(self, rng):
        buffer = PredictionBuffer(r=3, downsample=1)
        buffer.push('a', 1, rng.random((4, 4)))
        with pytest.raises(ShapeMismatchError):
            buffer.push('a', 2, rng.random((4, 5)))

    def test_empty_buffer(self):
        with pytest.raises(TrainingError):
            PredictionBuffer().mean('missing')
        with pytest.raises(ValueError):
            PredictionBuffer(r=0)

    def test_pseudo_label_needs_section_id_when_ambiguous(self, rng):
        buffer = PredictionBuffer(r=1, downsample=1)
        buffer.push('a', 1, rng.random((4, 4)))
        buffer.push('b', 1, rng.random((4, 4)))
        with pytest.raises(TrainingError):
            pseudo_label(buffer)


class TestEarlyStopping:
    """Patience on the validation loss."""

    def test_flat_losses_stop_after_patience(self):
        history = []
        stopped_at = None
        for epoch in range(1, 10):
            history.append(1.0)
            stop, best = early_stopping(history, patience=3)
            if stop:
                stopped_at = epoch
                break
        assert stopped_at == 4
        assert best == 0

    def test_improving_losses_never_stop(self):
        history = list(np.linspace(1.0, 0.1, 20))
        assert early_stopping(history, patience=3) == (False, 19)

    def test_best_index(self):
        assert early_stopping([3.0, 1.0, 2.0, 2.5], patience=2) == (True, 1)

    def test_empty_history(self):
        with pytest.raises(ValueError):
            early_stopping([], patience=3)


class TestTrainConfig:
    """Validation of training hyper-parameters."""

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.r == 3 and cfg.p_np_epochs == 3
        np.testing.assert_allclose(cfg.learning_rate, 1e-3)

    @pytest.mark.parametrize('kwargs', [
        {'r': 0},
        {'patience': 200},
        {'batch_size': 1},
        {'patch_size': 250},
        {'optimizer': 'sgd'},
        {'learning_rate': -1.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestTargets:
    """Target selection for unlabeled sections."""

    def test_p_np_then_pseudo_label(self, tiny_sections):
        cfg = tiny_config()
        unlabeled = tiny_sections[2:]
        buffer = PredictionBuffer(cfg.r, cfg.buffer_downsample)
        p_np = {}
        for section in unlabeled:
            buffer.push(section.id, 1, np.full(section.shape, 0.9))
            p_np[section.id] = buffer.shrink(np.full(section.shape, 0.9))
            for epoch in (2, 3, 4):
                buffer.push(section.id, epoch, np.full(section.shape, 0.2))
        assert all(t.all() for t in build_te_targets(unlabeled, buffer, p_np, 3, cfg).values())
        assert not any(t.any() for t in build_te_targets(unlabeled, buffer, p_np, 4, cfg).values())

    def test_split_validation(self, tiny_sections, rng):
        charted = tiny_sections[:2]
        train, val = split_validation(charted, 0.1, rng)
        assert len(val) == 1 and len(train) == 1
        assert {s.id for s in train} | {s.id for s in val} == {s.id for s in charted}
        lone_train, lone_val = split_validation(charted[:1], 0.1, rng)
        assert lone_train == lone_val == charted[:1]


class TestTrainer:
    """Optimizer steps."""

    def test_zero_learning_rate_leaves_parameters(self, tiny_sections, rng):
        cfg = tiny_config(learning_rate=0.0)
        model = create_model(cfg.unet, cfg.arm)
        before = {k: v.clone() for k, v in model.named_parameters()}
        trainer = Trainer(model, cfg, rng)
        sampler = PatchSampler(tiny_sections[:2], cfg.patch_size)
        losses = trainer.train_step(sampler.sample(cfg.batch_size, 0.5, rng), sampler)
        assert np.isfinite(losses['loss']) and losses['con_loss'] > 0
        for name, value in model.named_parameters():
            torch.testing.assert_close(value, before[name])

    def test_step_changes_parameters(self, tiny_sections, rng):
        cfg = tiny_config(use_contrastive=False)
        model = create_model(cfg.unet, cfg.arm)
        before = [p.clone() for p in model.parameters()]
        trainer = Trainer(model, cfg, rng)
        sampler = PatchSampler(tiny_sections[:2], cfg.patch_size)
        losses = trainer.train_step(sampler.sample(cfg.batch_size, 0.5, rng), sampler)
        assert losses['con_loss'] == 0.0
        assert any(not torch.equal(a, b) for a, b in zip(before, model.parameters()))

    def test_non_finite_loss_recorded_as_error(self, rng):
        cfg = tiny_config()
        trainer = Trainer(create_model(cfg.unet, cfg.arm), cfg, rng)
        with pytest.raises(TrainingError):
            trainer.record({'phase': 'te', 'epoch': 1, 'loss': float('nan')})


class TestPhases:
    """Pretraining and temporal ensembling on tiny sections."""

    def test_pretrain_history(self, tiny_sections, rng):
        cfg = tiny_config()
        model = create_model(cfg.unet, cfg.arm)
        params, history = pretrain(model, tiny_sections[:1], cfg, rng, val_sections=tiny_sections[1:2])
        assert [h['epoch'] for h in history] == [1, 2]
        assert np.isfinite(params.metadata['best_val_loss'])

    def test_p_np_targets_for_first_epochs(self, tiny_sections, rng):
        """Sentinel predictions: 0.9 on the first TE epoch, 0.1 afterwards."""
        cfg = tiny_config()
        calls = {}

        def predictor(net, section):
            calls[section.id] = calls.get(section.id, 0) + 1
            return np.full(section.shape, 0.9 if calls[section.id] == 1 else 0.1, dtype=np.float32)

        seen = {}

        def hook(epoch, targets):
            seen[epoch] = {k: 'all' if v.all() else ('none' if not v.any() else 'mixed')
                           for k, v in targets.items()}

        model = create_model(cfg.unet, cfg.arm)
        _, history = te_train(model, tiny_sections, cfg, rng, val_sections=tiny_sections[:1],
                              predictor=predictor, target_hook=hook)
        unlabeled_ids = {'s002', 's003'}
        for epoch in (1, 2, 3):
            assert set(seen[epoch]) == unlabeled_ids
            assert set(seen[epoch].values()) == {'all'}
        for epoch in (4, 5):
            assert set(seen[epoch].values()) == {'none'}
        assert [h['target_source'] for h in history] == ['p_np'] * 3 + ['pseudo_label'] * 2
        assert all(h['buffer']['max_depth'] <= cfg.r for h in history)

    def test_early_stop_respects_patience(self, tiny_sections, rng, monkeypatch):
        cfg = tiny_config(te_epochs=8, patience=2)
        monkeypatch.setattr(Trainer, 'validate', lambda self, val: (1.0, None))
        model = create_model(cfg.unet, cfg.arm)
        _, history = te_train(model, tiny_sections, cfg, rng, val_sections=tiny_sections[:1],
                              predictor=lambda net, s: np.full(s.shape, 0.5, dtype=np.float32))
        assert len(history) == 3

    def test_training_flow_writes_outputs(self, tiny_sections, tmp_path):
        cfg = tiny_config(pretrain_epochs=1, te_epochs=2, patience=2)
        flow = TrainingFlow(cfg, tmp_path, seed=0)
        flow.train_sections(tiny_sections)
        assert (tmp_path / PRETRAIN_CHECKPOINT).is_file()
        params = load_checkpoint(tmp_path / MODEL_CHECKPOINT)
        assert params.unet == cfg.unet
        with open(tmp_path / TRAIN_LOG_NAME, 'r', encoding='utf-8') as f:
            phases = [json.loads(line)['phase'] for line in f]
        assert phases == ['pretrain', 'te', 'te']
        assert flow.flow_state['n_unlabeled'] == 2
