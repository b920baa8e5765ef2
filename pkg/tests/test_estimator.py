import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bev2dsup import BoxFineTuner
from bev2dsup.errors import ConfigError
from bev2dsup.finetune import ToyDetector, evaluate, finetune, metric_config_for
from bev2dsup.scenegen import NoiseConfig


def test_params_round_trip():
    est = BoxFineTuner(lr=2.0, epochs=3, mix_ratio=0.25)
    params = est.get_params()
    assert params["lr"] == 2.0 and params["epochs"] == 3 and params["mix_ratio"] == 0.25
    est.set_params(epochs=5)
    assert est.epochs == 5
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_train_config_mirrors_params():
    config = BoxFineTuner(lr=1.5, epochs=2, cosine=False, seed=9).train_config()
    assert (config.lr, config.epochs, config.cosine, config.seed) == (1.5, 2, False, 9)


def test_unfitted_raises(small_dataset):
    with pytest.raises(NotFittedError):
        BoxFineTuner().predict(small_dataset)


def test_fit_rejects_non_dataset():
    with pytest.raises(ConfigError):
        BoxFineTuner().fit([1, 2, 3])


def test_fit_matches_functional_api(small_dataset):
    noise = NoiseConfig(dims_bias=0.1)
    est = BoxFineTuner(epochs=2, noise=noise, init_seed=5).fit(small_dataset)
    det = ToyDetector.initialize(small_dataset, noise, 5)
    history = finetune(det, small_dataset, est.train_config())
    assert [r.total for r in est.history_] == [r.total for r in history]
    scenes = small_dataset.split("only2d")
    assert est.score(small_dataset) == pytest.approx(evaluate(det, scenes, metric_config_for(small_dataset)).NDS)
    preds = est.predict(small_dataset)
    assert sorted(preds) == sorted(s.id for s in scenes)
    for s in scenes:
        np.testing.assert_array_equal([b.params for b in preds[s.id]], [b.params for b in det.boxes(s.id)])


def test_fit_keeps_initial_detector(small_dataset):
    det = ToyDetector.initialize(small_dataset)
    est = BoxFineTuner(epochs=1).fit(small_dataset, det)
    sid = small_dataset.scenes[0].id
    np.testing.assert_array_equal(est.initial_detector_.effective_params(sid), det.effective_params(sid))
    assert est.history_[0].report.NDS == pytest.approx(evaluate(det, small_dataset.split("only2d"), est.metric_config_).NDS)
