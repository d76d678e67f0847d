import numpy as np
import pytest

from est.ann import init_params, predict, train_sgd
from est.data import gen_synthetic
from est.errors import ConfigError, DivergenceError


def test_epochs_zero_rejected():
    data = gen_synthetic(2, 2, 2, 3, seed=0)
    with pytest.raises(ConfigError):
        train_sgd(init_params(2, 3, 2, 2, seed=0), data, epochs=0, lr=0.1, seed=0)


def test_nonpositive_lr_rejected():
    data = gen_synthetic(2, 2, 2, 3, seed=0)
    with pytest.raises(ConfigError):
        train_sgd(init_params(2, 3, 2, 2, seed=0), data, epochs=1, lr=0.0, seed=0)


def test_reaches_95_percent_on_blobs(toy):
    acc = (predict(toy["params"], toy["train"].inputs).argmax(1) == toy["train"].labels).mean()
    assert acc >= 0.95


def test_same_seed_bit_identical():
    data = gen_synthetic(10, 3, 4, 8, seed=3)
    p0 = init_params(4, 8, 4, 3, seed=3)
    a = train_sgd(p0, data, epochs=5, lr=0.05, seed=11)
    b = train_sgd(p0, data, epochs=5, lr=0.05, seed=11)
    for (_, wa), (_, wb) in zip(a.named_tensors(), b.named_tensors()):
        assert wa.tobytes() == wb.tobytes()


def test_does_not_mutate_input_params():
    data = gen_synthetic(5, 2, 2, 3, seed=0)
    p0 = init_params(2, 3, 2, 2, seed=0)
    before = p0.fingerprint()
    train_sgd(p0, data, epochs=2, lr=0.05, seed=0)
    assert p0.fingerprint() == before


def test_full_batch_loss_non_increasing_with_small_lr():
    data = gen_synthetic(20, 3, 4, 8, seed=7)
    history = []
    train_sgd(init_params(4, 8, 4, 3, seed=7), data, epochs=60, lr=0.01, seed=0,
              batch_size=None, history=history)
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
    assert history[-1] < history[0]


def test_divergence_names_epoch():
    data = gen_synthetic(5, 2, 2, 3, seed=0)
    p = init_params(2, 3, 2, 2, seed=0)
    p.W_cls[0, 0] = np.nan
    with np.errstate(all="ignore"), pytest.raises(DivergenceError, match="epoch 1"):
        train_sgd(p, data, epochs=3, lr=0.1, seed=0)
