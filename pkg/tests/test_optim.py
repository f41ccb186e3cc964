from types import SimpleNamespace

import numpy as np
import pytest

from utils.config import resolve_config
from utils.data_io import read_manifest, synth_generate
from utils.error_handler import ConfigurationError, TrainingDivergedError, UsageError
from utils.network import ModelConfig, build_model
from utils.optim import (ADAM_EPS, AdamState, EpochRecord, TrainHistory, adam_step, lr_at, read_history, train,
                         write_history)
from utils.tensor_core import Tensor

ADAM = SimpleNamespace(beta1=0.9, beta2=0.99, weight_decay=0.0)


def params(*values):
    return {'x': Tensor(np.array(values, dtype=float), requires_grad=True)}


class TestAdamStep:
    def test_first_step_moves_by_lr(self):
        p = params(1.0)
        new, state = adam_step(p, {'x': np.array([1.0])}, AdamState.for_params(p), 0.1, ADAM)
        np.testing.assert_allclose(new['x'].data, [1.0 - 0.1 / (1.0 + ADAM_EPS)], rtol=0, atol=1e-15)
        assert state.t == 1

    def test_does_not_mutate_inputs(self):
        p = params(1.0, 2.0)
        adam_step(p, {'x': np.array([1.0, 1.0])}, AdamState.for_params(p), 0.1, ADAM)
        np.testing.assert_array_equal(p['x'].data, [1.0, 2.0])

    def test_bias_corrected_second_step(self):
        p = params(0.0)
        state = AdamState.for_params(p)
        p, state = adam_step(p, {'x': np.array([1.0])}, state, 0.01, ADAM)
        p, state = adam_step(p, {'x': np.array([-1.0])}, state, 0.01, ADAM)
        m = (0.9 * 0.1 * 1.0 + 0.1 * -1.0) / (1 - 0.9 ** 2)
        v = (0.99 * 0.01 + 0.01) / (1 - 0.99 ** 2)
        expected = -0.01 / (1 + ADAM_EPS) - 0.01 * m / (np.sqrt(v) + ADAM_EPS)
        np.testing.assert_allclose(p['x'].data, [expected], rtol=1e-12)

    def test_decoupled_weight_decay(self):
        p = params(2.0)
        cfg = SimpleNamespace(beta1=0.9, beta2=0.99, weight_decay=0.5)
        new, _ = adam_step(p, {'x': np.array([0.0])}, AdamState.for_params(p), 0.1, cfg)
        np.testing.assert_allclose(new['x'].data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_zero_gradient_leaves_parameters(self):
        p = params(1.5, -2.0, 0.0)
        new, state = adam_step(p, {'x': np.zeros(3)}, AdamState.for_params(p), 0.1, ADAM)
        np.testing.assert_array_equal(new['x'].data, [1.5, -2.0, 0.0])
        assert state.t == 1

    def test_missing_gradient_is_zero(self):
        p = params(3.0)
        new, _ = adam_step(p, {}, AdamState.for_params(p), 0.1, ADAM)
        np.testing.assert_array_equal(new['x'].data, [3.0])

    def test_shape_mismatch(self):
        p = params(1.0, 2.0)
        with pytest.raises(UsageError):
            adam_step(p, {'x': np.ones(3)}, AdamState.for_params(p), 0.1, ADAM)

    def test_learning_rate_must_be_positive(self):
        p = params(1.0)
        with pytest.raises(UsageError):
            adam_step(p, {'x': np.ones(1)}, AdamState.for_params(p), 0.0, ADAM)

    def test_keeps_parameter_precision(self):
        p = {'x': Tensor._wrap(np.ones(2, dtype=np.float32), requires_grad=True)}
        new, _ = adam_step(p, {'x': np.ones(2, dtype=np.float32)}, AdamState.for_params(p), 0.1, ADAM)
        assert new['x'].data.dtype == np.float32


class TestSchedule:
    def test_market_schedule(self):
        cfg = resolve_config({'preset': 'market'})
        assert lr_at(0, cfg) == 5e-4
        assert lr_at(149, cfg) == 5e-4
        assert lr_at(150, cfg) == pytest.approx(5e-5)
        assert lr_at(199, cfg) == pytest.approx(5e-5)
        assert lr_at(200, cfg) == pytest.approx(5e-6)

    def test_cuhk03_starts_higher(self):
        assert lr_at(0, resolve_config({'preset': 'cuhk03'})) == 1e-3

    def test_monotone_non_increasing(self):
        cfg = resolve_config({})
        rates = [lr_at(e, cfg) for e in range(cfg.epochs)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))


class TestHistory:
    def test_wall_time_left_out(self, tmp_path):
        history = TrainHistory([EpochRecord(epoch=0, lr=1e-3, ce_G=1.0, tri_G=0.5, ce_L=1.0, tri_L=0.25,
                                            total=2.75, triplets=3.0, steps=2, erasing=False, wall_time=9.9)])
        path = tmp_path / 'history.jsonl'
        write_history(str(path), history)
        rows = read_history(str(path))
        assert rows == [{'epoch': 0, 'lr': 1e-3, 'ce_G': 1.0, 'tri_G': 0.5, 'ce_L': 1.0, 'tri_L': 0.25,
                         'total': 2.75, 'triplets': 3.0, 'steps': 2, 'erasing': False}]


@pytest.fixture
def lite_run(tmp_path):
    manifest = synth_generate(str(tmp_path / 'data'), num_ids=4, per_id=2, cams=2, size=(8, 4),
                              noise=0.05, seed=0, k_p=2)
    cfg = resolve_config({'preset': 'lite', 'progress': 'false'})
    return cfg, manifest


def fresh_model(cfg, num_ids=2):
    return build_model(ModelConfig.from_run_config(cfg, num_ids=num_ids), seed=cfg.seed)


class TestTrainer:
    def test_trains_and_records_epochs(self, lite_run):
        cfg, manifest = lite_run
        seen = []
        model, history = train(fresh_model(cfg), read_manifest(manifest), cfg, on_epoch=seen.append)
        assert len(history) == cfg.epochs == len(seen)
        assert [r.epoch for r in history.records] == list(range(cfg.epochs))
        assert all(np.isfinite(r.total) for r in history.records)
        assert history.records[0].steps == 2
        assert [r.erasing for r in history.records] == [False, True]

    def test_bit_reproducible(self, lite_run, tmp_path):
        cfg, manifest = lite_run
        first, h1 = train(fresh_model(cfg), read_manifest(manifest), cfg)
        second, h2 = train(fresh_model(cfg), read_manifest(manifest), cfg)
        for name in first.params:
            np.testing.assert_array_equal(first.params[name].data, second.params[name].data)
        write_history(str(tmp_path / 'a.jsonl'), h1)
        write_history(str(tmp_path / 'b.jsonl'), h2)
        assert (tmp_path / 'a.jsonl').read_bytes() == (tmp_path / 'b.jsonl').read_bytes()

    def test_parameters_change(self, lite_run):
        cfg, manifest = lite_run
        start = fresh_model(cfg)
        trained, _ = train(start, read_manifest(manifest), cfg)
        assert not np.array_equal(trained.params['head.FCG1.weight'].data, start.params['head.FCG1.weight'].data)

    def test_periodic_checkpoints(self, lite_run, tmp_path):
        cfg, manifest = lite_run
        cfg = cfg.with_values(checkpoint_every=1)
        train(fresh_model(cfg), read_manifest(manifest), cfg, checkpoint_dir=str(tmp_path))
        assert (tmp_path / 'epoch_0001.ccac').exists() and (tmp_path / 'epoch_0002.ccac').exists()

    def test_class_count_must_match(self, lite_run):
        cfg, manifest = lite_run
        with pytest.raises(ConfigurationError):
            train(fresh_model(cfg, num_ids=3), read_manifest(manifest), cfg)

    def test_too_few_identities(self, lite_run):
        cfg, manifest = lite_run
        cfg = cfg.with_values(v=4, batch=4)
        with pytest.raises(ConfigurationError):
            train(fresh_model(cfg), read_manifest(manifest), cfg)

    def test_non_finite_loss_stops_training(self, lite_run):
        cfg, manifest = lite_run
        dataset = read_manifest(manifest)
        for i in dataset.indices('train'):
            dataset._cache[i] = np.full((8, 4, 3), np.nan)
        with pytest.raises(TrainingDivergedError) as excinfo:
            train(fresh_model(cfg), dataset, cfg)
        assert excinfo.value.epoch == 0 and excinfo.value.step == 0
