"""Shared test oracles, kept independent of the code paths they verify."""

import numpy as np


def central_difference(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Elementwise central finite-difference gradient of scalar f at x.

    Evaluates f(x +- step * e_i) directly; deliberately knows nothing about
    the tape-based backward pass it is used to check.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise error relative to the gradient's own scale.

    Normalizing by the max-norm of the gradients (not each element's own
    magnitude) keeps near-zero elements from drowning the comparison in
    finite-difference truncation noise while still catching any formula
    error, which would show up at O(1) on this metric.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def model_loss_fn(params, tokens, name):
    """Closure evaluating the LM loss as a function of one named parameter.

    Writes the probe value into the live parameter for the evaluation and
    always restores the pristine weights afterwards, so repeated probes all
    measure the loss surface at the same base point.
    """
    from evoedit import autodiff as ad
    from evoedit.model import lm_loss

    tensor = params[name]
    pristine = tensor.data.copy()

    def f(x):
        tensor.data[...] = x
        try:
            with ad.no_grad():
                return float(lm_loss(params, tokens).data)
        finally:
            tensor.data[...] = pristine

    return f
