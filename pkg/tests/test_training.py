import math
from dataclasses import replace

import numpy as np
import pytest

from xyz_scgan import losses as L
from xyz_scgan import training
from xyz_scgan.config import ConfigError
from xyz_scgan.imaging import PairSpec, degrade, make_pair, synthetic_corpus
from xyz_scgan.losses import TrainingDivergence
from xyz_scgan.networks import Generator
from xyz_scgan.store import RunStore
from xyz_scgan.tensor import DimensionError, NumericError, Parameter, Tensor
from xyz_scgan.training import (RMSprop, TrainConfig, TrainLog, ablation_run, held_out_psnr, lr_schedule,
                                rmsprop_step, train)
from xyz_scgan.utils import seed_streams


class TestRmsprop:

    def test_zero_gradient_leaves_params(self):
        p, s = np.array([0.3, -1.2]), np.zeros(2)
        rmsprop_step([p], [np.zeros(2)], [s], lr=0.1)
        np.testing.assert_array_equal(p, [0.3, -1.2])
        np.testing.assert_array_equal(s, 0)

    def test_first_step(self):
        p, s = np.zeros(1), np.zeros(1)
        rmsprop_step([p], [np.ones(1)], [s], lr=0.1, decay=0.9, eps=0.0)
        assert s[0] == pytest.approx(0.1)
        assert p[0] == pytest.approx(-0.316228, abs=1e-6)

    def test_scalar_recurrence_on_a_parabola(self):
        p, s = np.ones(1), np.zeros(1)
        trace = []
        for _ in range(150):
            rmsprop_step([p], [2 * p], [s], lr=0.01)
            trace.append(p[0])
        assert trace[99] == pytest.approx(0.087587, abs=1e-5)
        assert abs(trace[-1]) < 0.05

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rmsprop_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], lr=0.1)
        with pytest.raises(DimensionError):
            rmsprop_step([np.zeros(2)], [], [np.zeros(2)], lr=0.1)

    def test_optimizer_skips_frozen_params(self):
        a = Parameter([1.0], name='a', dtype=np.float64)
        b = Parameter([1.0], name='b', learnable=False, dtype=np.float64)
        opt = RMSprop([a, b], lr=0.1)
        a.grad[:] = 1.0
        b.grad[:] = 1.0
        opt.step()
        assert a.data[0] < 1.0 and b.data[0] == 1.0

    def test_non_finite_gradient(self):
        a = Parameter([1.0], name='a', dtype=np.float64)
        opt = RMSprop([a])
        a.grad[:] = np.nan
        with pytest.raises(NumericError, match='a'):
            opt.step()


class TestSchedule:

    def test_switch(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == 5e-4
        assert lr_schedule(19, cfg) == 5e-4
        assert lr_schedule(20, cfg) == 1e-4

    def test_switch_at_zero(self):
        cfg = TrainConfig(switch_epoch=0)
        assert lr_schedule(0, cfg) == 1e-4

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, TrainConfig())


class TestConfig:

    def test_defaults_are_valid(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 8 and cfg.rmsprop_decay == 0.9
        assert [k for k, _, _ in cfg.overrides()] == ['batch_size']

    def test_from_file(self, tiny_config_file):
        cfg = TrainConfig.from_file(tiny_config_file, seed=9, epochs=None)
        assert cfg.scale == 2 and cfg.d_channels == (8, 16)
        assert cfg.log_wall_time is False
        assert cfg.seed == 9 and cfg.epochs == 1

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match='learning_rate'):
            TrainConfig.from_options({'learning_rate': '0.1'})

    @pytest.mark.parametrize('key, value', [
        ('batch_size', 'eight'), ('learn_robust', 'maybe'), ('rmsprop_decay', '1.0'),
        ('lr_initial', '0'), ('content_loss', 'l1'), ('scale', '3'), ('crop_size', '100'),
    ])
    def test_bad_values(self, key, value):
        with pytest.raises(ConfigError):
            TrainConfig.from_options({key: value})

    def test_crop_below_discriminator_minimum(self):
        with pytest.raises(ConfigError, match='discriminator minimum 61'):
            TrainConfig(crop_size=32, scale=2)

    def test_checkpoint_config_names_the_loss_only_for_robust(self, tiny_cfg):
        assert 'loss' in tiny_cfg().checkpoint_config()
        assert 'loss' not in tiny_cfg(content_loss='mse').checkpoint_config()


class TestTrainLog:

    def _row(self, it):
        return dict(iter=it, epoch=0, d_loss=1.0, g_loss=0.5, adv=-0.7, content=0.1, perceptual=0.01,
                    tv=3.0, lr=5e-4, alpha=1.0, c=0.1, wall_ms=0)

    def test_csv(self):
        log = TrainLog()
        log.append(**self._row(1))
        lines = log.to_csv_text().splitlines()
        assert lines[0] == ','.join(TrainLog.columns)
        assert lines[1].split(',')[:3] == ['1', '0', '1.0']

    def test_iterations_must_increase(self):
        log = TrainLog()
        log.append(**self._row(2))
        with pytest.raises(ValueError):
            log.append(**self._row(2))


class TestTrain:

    def test_one_iteration(self, tiny_cfg, small_corpus):
        res = train(tiny_cfg(), small_corpus)
        assert res.iterations == 1 and len(res.log) == 1
        row = res.log.rows[0]
        assert all(math.isfinite(v) for v in row)
        assert res.log.column('alpha')[0] == pytest.approx(1.0, abs=5e-3)

    def test_same_seed_same_log(self, tiny_cfg, small_corpus):
        cfg = tiny_cfg(max_iterations=2)
        a, b = train(cfg, small_corpus), train(cfg, small_corpus)
        assert a.log.to_csv_text() == b.log.to_csv_text()
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes(), n

    def test_other_seed_other_log(self, tiny_cfg, small_corpus):
        a = train(tiny_cfg(seed=1), small_corpus)
        b = train(tiny_cfg(seed=2), small_corpus)
        assert a.log.to_csv_text() != b.log.to_csv_text()

    def test_threads_do_not_change_the_log(self, tiny_cfg, small_corpus):
        a = train(tiny_cfg(), small_corpus)
        b = train(tiny_cfg(threads=3), small_corpus)
        assert a.log.to_csv_text() == b.log.to_csv_text()

    def test_mse_arm(self, tiny_cfg, small_corpus):
        res = train(tiny_cfg(content_loss='mse'), small_corpus)
        assert res.robust is None
        assert res.log.column('alpha') == [0.0] and res.log.column('c') == [0.0]
        assert not any(n.startswith('loss.') for n, _ in res.named_parameters())

    def test_paranoid_isolation(self, tiny_cfg, small_corpus):
        res = train(tiny_cfg(paranoid=True), small_corpus)
        assert res.iterations == 1

    def test_isolation_check_catches_a_leak(self):
        p = Parameter([1.0], name='head.weight', dtype=np.float64)
        p.grad[:] = 0.5
        with pytest.raises(training.IsolationError, match='head.weight'):
            training._assert_zero_grads([p], 'generator')

    def test_divergence_names_the_term(self, tiny_cfg, small_corpus, monkeypatch):
        monkeypatch.setattr(L, 'tv_loss', lambda x: Tensor(np.asarray(np.nan)))
        with pytest.raises(TrainingDivergence) as e:
            train(tiny_cfg(), small_corpus)
        assert e.value.term == 'tv'

    def test_image_smaller_than_crop(self, tiny_cfg):
        with pytest.raises(ValueError, match='smaller than crop'):
            train(tiny_cfg(), synthetic_corpus(2, size=24, seed=0))

    def test_empty_corpus(self, tiny_cfg):
        with pytest.raises(ValueError, match='empty'):
            train(tiny_cfg(), [])

    def test_checkpoints_and_log_on_disk(self, tiny_cfg, small_corpus, tmp_path):
        cfg = tiny_cfg(epochs=2, iterations_per_epoch=1, max_iterations=0)
        store = RunStore(tmp_path / 'run')
        res = train(cfg, small_corpus, store)
        assert [e for e, _ in store.all()] == [1, 2]
        assert res.checkpoints == [p for _, p in store.all()]
        ck = store.load(expected_config=cfg.checkpoint_config())
        assert 'loss.theta_alpha' in ck.params
        np.testing.assert_array_equal(ck.params['g.tail.bias'].data,
                                      res.generator.params['tail.bias'].data.astype(np.float32))
        text = open(store.log_path).read().splitlines()
        assert len(text) == 3
        header = open(store.path(store.header_name)).read()
        assert 'desk-scale override: batch_size = 2 (reference run: 64)' in header

    def test_overrides_are_logged(self, tiny_cfg, small_corpus, caplog):
        with caplog.at_level('WARNING', logger='xyz_scgan.training'):
            train(tiny_cfg(), small_corpus)
        assert any('crop_size = 32' in r.getMessage() for r in caplog.records)


def _eval_set(n, seed):
    rs = []
    for name, img in synthetic_corpus(n, size=32, seed=seed):
        lr, hr = degrade(img, 2)
        rs.append((name, lr, hr))
    return rs


class TestAblation:

    def test_two_arms(self, tiny_cfg, small_corpus):
        report = ablation_run(tiny_cfg(), small_corpus, {'synthA': _eval_set(2, 5)})
        assert list(report.arms) == ['Adaptive robust loss', 'MSE']
        lines = report.to_text().splitlines()
        assert lines[0].split() == ['Loss', 'Scale', 'synthA']
        assert lines[2].startswith('Adaptive robust loss') and lines[3].startswith('MSE')
        assert 'reference' not in report.to_text()

    def test_control_arm_is_identical(self, tiny_cfg, small_corpus):
        cfg = tiny_cfg()
        report = ablation_run(cfg, small_corpus, {'synthA': _eval_set(2, 5)}, cfg_b=cfg)
        table = report.table()
        assert list(table) == ['Adaptive robust loss', 'Adaptive robust loss (control)']
        assert table['Adaptive robust loss'] == table['Adaptive robust loss (control)']

    def test_arms_must_differ_only_in_content_loss(self, tiny_cfg, small_corpus):
        with pytest.raises(ConfigError, match='batch_size'):
            ablation_run(tiny_cfg(), small_corpus, {}, cfg_b=tiny_cfg(content_loss='mse', batch_size=1))

    def test_stores_per_arm(self, tiny_cfg, small_corpus, tmp_path):
        ablation_run(tiny_cfg(), small_corpus, {'synthA': _eval_set(1, 5)},
                     store_factory=lambda label: RunStore(tmp_path / label.split()[0].lower()))
        assert RunStore(tmp_path / 'adaptive').latest()[0] == 1
        assert RunStore(tmp_path / 'mse').latest()[0] == 1


@pytest.mark.slow
def test_desk_run_improves_held_out_psnr():
    corpus = synthetic_corpus(32, size=64, seed=100)
    held = synthetic_corpus(1, size=64, seed=200)[0][1]
    pair = make_pair(held, PairSpec(scale=2, crop_size=32, rng_seed=0))
    gains, final_content, first_content = [], [], []
    for seed in (0, 1, 2):
        cfg = TrainConfig(scale=2, batch_size=4, crop_size=32, n_sc_blocks=1, base_channels=8, pool_rate=4,
                          d_channels=(8, 16), perceptual_channels=(4, 8), perceptual_tap=2, dtype='float64',
                          lr_initial=2e-3, lr_after=2e-3, max_iterations=200, epochs=1000, seed=seed,
                          log_wall_time=False, log_every=50)
        untrained = Generator(cfg.generator_config(), seed=seed_streams(seed, 3)[0], dtype=cfg.np_dtype)
        before = held_out_psnr(untrained, [pair])
        res = train(cfg, corpus)
        assert res.iterations == 200
        assert all(math.isfinite(v) for row in res.log.rows for v in row)
        gains.append(held_out_psnr(res.generator, [pair]) - before)
        first_content.append(res.log.column('content')[0])
        final_content.append(res.log.column('content')[-1])
    assert np.median(gains) >= 3.0
    assert np.median(final_content) < np.median(first_content)
    again = train(replace(cfg, seed=2), corpus)
    assert again.log.to_csv_text() == res.log.to_csv_text()
