"""Central finite-difference checks for the layer kernels and the full network."""

from __future__ import annotations

import numpy as np

# Gradients smaller than this are compared absolutely. Conv biases feeding a
# batch-norm have an exact gradient of zero; their finite differences are pure
# roundoff (~1e-9) and would otherwise give relative errors near 1.
ERROR_FLOOR = 1e-4


def relative_error(analytic, numeric, floor: float = ERROR_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f, x: np.ndarray, step: float) -> np.ndarray:
    """d f() / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def check_model_gradients(model, x: np.ndarray, weights: np.ndarray, step: float = 1e-6) -> dict:
    """Max relative error per parameter for the loss ``sum(weights * model(x))``.

    ``model`` should be in float64 and training mode. Batch-norm running
    statistics are restored after every evaluation so they cannot drift.
    """
    saved = {k: v.copy() for k, v in model.buffers.items()}

    def loss():
        out = float(np.sum(model.forward(x) * weights))
        for k, v in saved.items():
            model.buffers[k][...] = v
        return out

    loss()
    analytic = {k: v.copy() for k, v in model.backward(weights).items()}
    model._cache = None
    return {
        name: float(relative_error(analytic[name], numeric_gradient(loss, p, step)).max())
        for name, p in model.params.items()
    }
