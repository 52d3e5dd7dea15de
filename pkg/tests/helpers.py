"""Shared fixtures for the test-suite: a two-layer toy network and toy samples."""

import numpy as np

from cect_forge import tensor as T
from cect_forge.loss import LossConfig, TrainingSample, composite_loss
from cect_forge.tensor import Tensor


def toy_params(rng, hidden=2):
    return {
        "w1": rng.normal(0, 0.7, size=(hidden, 1, 3, 3)),
        "gamma": rng.uniform(0.5, 1.5, size=hidden),
        "beta": rng.normal(0, 0.3, size=hidden),
        "w2": rng.normal(0, 0.7, size=(1, hidden, 3, 3)),
        "b2": rng.normal(0, 0.1, size=1),
    }


def toy_forward(p: dict, x: np.ndarray):
    """conv3x3 -> batch norm (train) -> relu -> conv3x3; returns (pred, pre-relu activations)."""
    hidden = p["w1"].shape[0]
    h = T.conv2d(Tensor(x), p["w1"])
    h = T.batch_norm(h, p["gamma"], p["beta"], np.zeros(hidden), np.ones(hidden), True)
    pre = h.data
    return T.conv2d(T.relu(h), p["w2"], p["b2"]), pre


def toy_sample(rng, n=2, size=4, v_th=0.3):
    heart = np.zeros((n, size, size))
    heart[:, 1:, :size - 1] = 1
    chambers = heart * (rng.random((n, size, size)) < 0.5)
    target = v_th + rng.normal(0, 0.1, size=(n, size, size))
    ct = rng.normal(0.3, 0.1, size=(n, size, size))
    return TrainingSample(ct, target, chambers, heart)


def toy_loss_fn(sample: TrainingSample, params: dict, cfg: LossConfig, wrt: str):
    """Scalar loss as a function of one toy parameter (as a Tensor)."""
    names = list(params)

    def f(t):
        p = {k: (t if k == wrt else Tensor(v)) for k, v in params.items()}
        pred, _ = toy_forward(p, sample.ct[:, None])
        weights = [p["w1"], p["w2"]]
        loss, _ = composite_loss(pred, sample, weights, cfg)
        return loss

    assert wrt in names
    return f
