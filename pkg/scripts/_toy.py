"""Shared toy setup for the experiment scripts."""

from est.ann import init_params, train_sgd
from est.converter import calibrate_thresholds
from est.data import gen_synthetic, split


def toy_model(seed: int = 42):
    data = gen_synthetic(200, 3, 4, 8, seed=seed)
    train, test = split(data, 0.5, seed=seed)
    p = init_params(4, 8, 4, 3, d_ff=16, seed=seed)
    p = train_sgd(p, train, epochs=200, lr=0.05, seed=seed)
    th, _ = calibrate_thresholds(p, train)
    return p, train, test, th
