"""
Central-difference gradient checks for the numeric core.

These helpers compare the gradients ``GradientContext.backward`` returns
with numerical derivatives of the same loss, evaluated without recording.
"""

import logging
from typing import Callable, Dict, Sequence

import numpy as np

from vtprune.core.numeric import GradientContext, Matrix

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3


def finite_difference(
    func: Callable[[np.ndarray], float],
    x0: np.ndarray,
    eps: float = DEFAULT_STEP,
) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Args:
        func: Maps an array shaped like ``x0`` to a float
        x0: Point of evaluation (left untouched)
        eps: Step size

    Returns:
        np.ndarray: Gradient with the shape of ``x0``
    """
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    x = x0.copy()
    for index in np.ndindex(*x0.shape):
        x[index] = x0[index] + eps
        f_plus = func(x)
        x[index] = x0[index] - eps
        f_minus = func(x)
        x[index] = x0[index]
        grad[index] = (f_plus - f_minus) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest |a - n| / max(1, |a|, |n|) over all entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


def analytic_gradients(
    build_loss: Callable[..., Matrix], leaves: Sequence[Matrix]
) -> Dict[Matrix, np.ndarray]:
    """Run ``build_loss(*leaves)`` under a fresh context and backpropagate."""
    ctx = GradientContext()
    ctx.watch(*leaves)
    with ctx:
        loss = build_loss(*leaves)
    return ctx.backward(loss)


def check_gradients(
    build_loss: Callable[..., Matrix],
    leaves: Sequence[Matrix],
    eps: float = DEFAULT_STEP,
) -> float:
    """
    Compare recorded gradients with central differences.

    Args:
        build_loss: Deterministic function of the leaves returning a 1x1 loss
        leaves: Matrices to differentiate against
        eps: Finite-difference step

    Returns:
        float: Maximum relative error over every entry of every leaf
    """
    grads = analytic_gradients(build_loss, leaves)
    worst = 0.0
    for position, leaf in enumerate(leaves):

        def evaluate(values: np.ndarray, position=position) -> float:
            args = list(leaves)
            args[position] = Matrix(values)
            return build_loss(*args).item()

        numeric = finite_difference(evaluate, leaf.data, eps)
        error = max_relative_error(grads[leaf], numeric)
        logger.debug("leaf %d: max relative error %.3e", position, error)
        worst = max(worst, error)
    return worst
