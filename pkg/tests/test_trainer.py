import math
from dataclasses import replace

import numpy as np
import pytest

from addressloc.align import EncoderParams, Vocab, make_batch, save_checkpoint, total_loss_and_grads
from addressloc.geodata import split_dataset
from addressloc.trainer import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    lr_at,
    make_batches,
    train,
)
from helpers import make_sample

FAST = dict(epochs=3, batch_size=16, embed_dim=8, token_dim=8)


@pytest.fixture(scope="module")
def city_split(small_city):
    _, ds = small_city
    return ds, split_dataset(ds, 0)


class TestSchedule:
    def test_endpoints_exact(self):
        assert lr_at(0, 900, 2.4e-5, 2.4e-8) == 2.4e-5
        assert lr_at(900, 900, 2.4e-5, 2.4e-8) == 2.4e-8

    def test_midpoint_is_mean(self):
        assert lr_at(450, 900, 2.4e-5, 2.4e-8) == pytest.approx((2.4e-5 + 2.4e-8) / 2, rel=1e-12)

    def test_monotone(self):
        lrs = [lr_at(s, 50, 1.0, 0.1) for s in range(51)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("step,total", [(0, 0), (-1, 10), (11, 10)])
    def test_bad_steps(self, step, total):
        with pytest.raises(ValueError):
            lr_at(step, total, 1.0, 0.1)


class TestBatches:
    samples = [make_sample(f"L{i:03d}") for i in range(100)]

    def test_hundred_by_thirty_two(self):
        batches = make_batches(self.samples, 32, 0, 0)
        assert [len(b) for b in batches] == [32, 32, 32]
        ids = [s.location_id for b in batches for s in b]
        assert len(set(ids)) == 96

    def test_seeded_and_epoch_dependent(self):
        key = lambda bs: [s.location_id for b in bs for s in b]  # noqa: E731
        assert key(make_batches(self.samples, 32, 0, 0)) == key(make_batches(self.samples, 32, 0, 0))
        assert key(make_batches(self.samples, 32, 0, 0)) != key(make_batches(self.samples, 32, 1, 0))

    def test_no_singletons(self):
        assert all(len(b) == 33 for b in make_batches(self.samples, 33, 0, 0))

    @pytest.mark.parametrize("bs", [0, 1, 101])
    def test_bad_sizes(self, bs):
        with pytest.raises(ValueError):
            make_batches(self.samples, bs, 0, 0)


def test_adam_matches_hand_steps():
    a = (1.0, 10.0)
    x = np.array([1.0, -2.0])
    state = AdamState.zeros(2)
    hand = [1.0, -2.0]
    m, v = [0.0, 0.0], [0.0, 0.0]
    lr, b1, b2, eps = 0.1, 0.9, 0.98, 1e-8
    for t in range(1, 4):
        x = adam_step(x, np.array([a[0] * x[0], a[1] * x[1]]), state, lr, b1, b2, eps)
        for i in range(2):
            g = a[i] * hand[i]
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            hand[i] -= lr * (m[i] / (1 - b1**t)) / (math.sqrt(v[i] / (1 - b2**t)) + eps)
        assert x == pytest.approx(hand, rel=1e-12)
    assert state.step == 3


class TestTrain:
    def test_loss_decreases(self, city_split):
        ds, sp = city_split
        _, log = train(ds, sp, TrainConfig(**FAST, lr_scale=3000))
        assert log.epochs[-1]["l_address"] < log.epochs[0]["l_address"]

    def test_bit_identical_repeat(self, city_split, tmp_path):
        ds, sp = city_split
        cfg = TrainConfig(**FAST)
        p1, log1 = train(ds, sp, cfg)
        p2, log2 = train(ds, sp, cfg)
        save_checkpoint(p1, ds.vocabulary, tmp_path / "a.npz")
        save_checkpoint(p2, ds.vocabulary, tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
        assert log1.records() == log2.records()

    def test_full_freeze_only_moves_temperature(self, city_split):
        ds, sp = city_split
        cfg = TrainConfig(**FAST, freeze_image=True, freeze_text=True)
        init = EncoderParams.init(ds.feature_dim, len(ds.vocabulary), 8, 8, 0)
        out, _ = train(ds, sp, cfg, init=init)
        for key in ("image_proj", "image_bias", "token_table", "text_proj", "text_bias"):
            assert np.array_equal(getattr(out, key), getattr(init, key))
        assert out.log_temp != init.log_temp

    def test_frozen_text_untouched_under_address_loss(self, city_split):
        ds, sp = city_split
        cfg = TrainConfig(**FAST, use_caption=False, use_geography=False, freeze_text=True)
        init = EncoderParams.init(ds.feature_dim, len(ds.vocabulary), 8, 8, 0)
        out, _ = train(ds, sp, cfg, init=init)
        assert np.array_equal(out.token_table, init.token_table)
        assert np.array_equal(out.text_proj, init.text_proj)
        assert not np.array_equal(out.image_proj, init.image_proj)

    def test_final_losses_replay(self, city_split):
        ds, sp = city_split
        cfg = TrainConfig(**FAST)
        params, log = train(ds, sp, cfg)
        samples = ds.select(sp.train)
        vocab = Vocab(ds.vocabulary)
        comps = [
            total_loss_and_grads(make_batch(b, vocab), params, cfg.loss_weights(), grads=False).components()
            for b in make_batches(samples, cfg.batch_size, cfg.epochs - 1, cfg.seed)
        ]
        for key in comps[0]:
            assert abs(np.mean([c[key] for c in comps]) - log.final[key]) <= 1e-12

    def test_non_finite_aborts_with_location(self, city_split):
        ds, sp = city_split
        init = EncoderParams.init(ds.feature_dim, len(ds.vocabulary), 8, 8, 0)
        init.image_bias[0] = np.nan
        with pytest.raises(TrainingError, match="epoch 0, batch 0"):
            train(ds, sp, TrainConfig(**FAST), init=init)

    def test_empty_train_split(self, city_split):
        ds, sp = city_split
        with pytest.raises(TrainingError):
            train(ds, replace(sp, train=()), TrainConfig(**FAST))


@pytest.mark.parametrize("bad", [dict(batch_size=1), dict(epochs=0), dict(lr_start=1e-8, lr_end=1e-5),
                                 dict(lr_end=0.0), dict(geo_target="flipped")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)
