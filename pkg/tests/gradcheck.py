"""Central finite-difference check of the analytic batch gradients."""

from dataclasses import dataclass

import numpy as np

from catdiv.train import batch_loss

STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7


@dataclass
class TensorCheck:
    name: str
    n: int
    n_bad: int
    max_abs: float
    max_rel: float  # over entries that are not near zero


def numeric_gradient(params, batch, config, name, step=STEP):
    arr = params.tensors[name]
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + step
        up = batch_loss(params, batch, config, with_grads=False).loss
        arr[idx] = old - step
        down = batch_loss(params, batch, config, with_grads=False).loss
        arr[idx] = old
        out[idx] = (up - down) / (2 * step)
    return out


def check_gradients(params, batch, config):
    grads = batch_loss(params, batch, config).grads
    results = []
    for name, arr in params.tensors.items():
        analytic = grads.full(name, arr.shape)
        numeric = numeric_gradient(params, batch, config, name)
        err = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = np.where(scale > 0, err / np.where(scale > 0, scale, 1), 0.0)
        bad = (err > ABS_TOL) & (rel > REL_TOL)
        far = err > ABS_TOL
        results.append(TensorCheck(name, arr.size, int(bad.sum()), float(err.max()),
                                   float(rel[far].max()) if far.any() else 0.0))
    return results
