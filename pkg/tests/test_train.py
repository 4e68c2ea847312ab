import math

import numpy as np
import numpy.testing as npt
import pytest

from hbformer.config import RunConfig
from hbformer.data import stack, synth_dataset
from hbformer.losses import bce_loss, dice_loss
from hbformer.model import HBFormer
from hbformer.tensor import Tensor, no_grad
from hbformer.train import (
    DEFAULT_SEEDS,
    NumericalError,
    eval_threads,
    evaluate,
    predict,
    train_loop,
    train_seed,
)

MICRO = dict(img_size=32, widths=(4, 8, 16, 32), depths=(2, 2, 2, 2), heads=(1, 2, 2, 4),
             window_size=2, effn_ratio=2)


def micro_run(**changes):
    return RunConfig(**{**MICRO, "total_steps": 4, "batch_size": 2, **changes})


def chance_loss(masks, num_classes):
    """BCE at zero logits plus soft Dice with every probability at one half."""
    n = masks.size
    dice = []
    for c in range(1, num_classes):
        t = int((masks == c).sum())
        dice.append((2 * 0.5 * t + 1) / (0.5 * n + t + 1))
    return math.log(2) + 1 - float(np.mean(dice))


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(4, 32, seed=0, min_tumors=1)


class TestDefaults:
    def test_seed_list(self):
        assert DEFAULT_SEEDS == (3407, 8261, 10993)
        assert RunConfig().seeds == DEFAULT_SEEDS

    def test_eval_threads_env(self, monkeypatch):
        monkeypatch.setenv("HBFORMER_THREADS", "3")
        assert eval_threads() == 3
        monkeypatch.setenv("HBFORMER_THREADS", "junk")
        assert eval_threads() == 1


class TestInitialLoss:
    def test_near_chance_level(self):
        cfg = RunConfig()
        data = synth_dataset(4, 64, seed=0)
        images, masks = stack(data)
        model = HBFormer(cfg.model_config(), np.random.default_rng(3407))
        with no_grad():
            logits = model(Tensor(images))
        labels = masks.astype(np.int64)
        estimate = chance_loss(masks, 3)
        dice = float(dice_loss(logits, labels).data)
        bce = float(bce_loss(logits, labels).data)
        assert abs(dice - (estimate - math.log(2))) < 0.05
        assert abs(bce + dice - estimate) < 0.3


class TestTraining:
    def test_loss_decreases(self, tiny_data):
        result = train_seed(micro_run(total_steps=30, lr=0.05, augment=False), tiny_data, 0)
        assert len(result.losses) == 30
        assert np.mean(result.losses[-5:]) < np.mean(result.losses[:5])

    def test_deterministic(self, tiny_data):
        a = train_seed(micro_run(), tiny_data, 7)
        b = train_seed(micro_run(), tiny_data, 7)
        assert a.losses == b.losses
        assert abs(a.final_loss - b.final_loss) < 1e-7
        for (n, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
            assert x.tobytes() == y.tobytes(), n

    def test_seeds_differ(self, tiny_data):
        assert train_seed(micro_run(), tiny_data, 1).losses != train_seed(micro_run(), tiny_data, 2).losses

    def test_non_finite_loss_stops_with_good_weights(self, tiny_data):
        bad = [s for s in synth_dataset(2, 32, seed=1)]
        bad[0].image[...] = np.nan
        with pytest.raises(NumericalError) as info:
            train_seed(micro_run(augment=False, batch_size=2), bad, 0)
        assert info.value.step == 0
        fresh = HBFormer(micro_run().model_config(), np.random.default_rng(0))
        for (n, x), (_, y) in zip(info.value.model.state_dict().items(), fresh.state_dict().items()):
            npt.assert_array_equal(x, y, err_msg=n)

    def test_train_loop_returns_one_entry_per_seed(self, tiny_data):
        out = train_loop(micro_run(total_steps=1), tiny_data, seeds=(0, 1))
        assert len(out) == 2
        assert all(report.seed == s for (_, report), s in zip(out, (0, 1)))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_seed(micro_run(), [], 0)


class TestEvaluate:
    def test_restores_training_flag_and_counts(self, tiny_data):
        model = HBFormer(micro_run().model_config(), 0)
        report, masks = evaluate(model, tiny_data, batch_size=3)
        assert model.training
        assert report.count == 4 and len(masks) == 4
        assert masks[0].shape == (32, 32) and masks[0].dtype == np.uint8

    def test_threads_do_not_change_results(self, tiny_data):
        model = HBFormer(micro_run().model_config(), 0)
        r1, m1 = evaluate(model, tiny_data, batch_size=1, threads=1)
        r4, m4 = evaluate(model, tiny_data, batch_size=1, threads=4)
        assert r1.per_class_dsc == r4.per_class_dsc
        for a, b in zip(m1, m4):
            npt.assert_array_equal(a, b)

    def test_predict_is_argmax(self, tiny_data):
        model = HBFormer(micro_run().model_config(), 0).eval()
        images, _ = stack(tiny_data[:2])
        with no_grad():
            logits = model(Tensor(images)).numpy()
        npt.assert_array_equal(predict(model, images), logits.argmax(axis=1))
