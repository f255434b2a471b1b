"""One-sample problem behind the golden model file."""

import numpy as np

from poisoncert.data import Dataset
from poisoncert.encode import build
from poisoncert.interval import AUXILIARY, big_m_tables, propagate
from poisoncert.objectives import ObjectiveSpec
from poisoncert.threat import ThreatModel
from poisoncert.train import HINGE, Params, TrainConfig


def tiny_model():
    ds = Dataset([[0.5]], [1.0], [[0.25]], [1.0], batch_size=1, epochs=1, name="tiny")
    cfg = TrainConfig(0.5, HINGE, Params([np.array([[0.0]])], [np.array([0.0])]))
    tm = ThreatModel(n=1, label_flip=True)
    bs = propagate(cfg, ds, tm, None, AUXILIARY)
    return build(cfg, ds, tm, ObjectiveSpec(), big_m_tables(bs)), (ds, cfg, tm)
