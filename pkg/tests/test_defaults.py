"""Default hyperparameters match the published training setup."""

from hiergeo import geocell as gc
from hiergeo import inference as inf
from hiergeo.config import RunConfig
from hiergeo.model import ModelConfig


def test_partition_thresholds():
    assert gc.DEFAULT_T_MAX == (25000, 10000, 5000, 2000, 1000, 750, 500)
    assert gc.DEFAULT_T_MIN == 50


def test_optimizer_and_schedule():
    cfg = RunConfig()
    assert (cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay) == (0.01, 0.9, 1e-4)
    assert cfg.optim.milestones == [4, 8, 12, 13, 14, 15] and cfg.optim.gamma == 0.5
    assert (cfg.train.epochs, cfg.train.batch_size) == (40, 512)


def test_decoder_shape():
    cfg = ModelConfig([1] * 7)
    assert cfg.H == 7 and cfg.S == 16
    assert (cfg.N + cfg.E, cfg.E) == (8, 2)


def test_distance_thresholds():
    assert inf.THRESHOLDS_KM == (1.0, 25.0, 200.0, 750.0, 2500.0)
    assert inf.THRESHOLD_NAMES == ("street", "city", "region", "country", "continent")
