import os

import numpy as np

from logging_config import logger


PRESET_KINDS = ("zero", "constant", "sine", "gaussian")


# time factor c0 + c1 t + c2 t^2 + ...
def time_polynomial(coefficients, t):
    return sum(c * t**i for i, c in enumerate(coefficients))


# product of sin(k pi x_i) over the axes of a (nodes, d) coordinate array
def sine_product(x, modes=1):
    x = np.atleast_2d(x)
    return np.prod(np.sin(modes * np.pi * x), axis=1)


def gaussian_bump(x, center, width):
    x = np.atleast_2d(x)
    center = np.asarray(center, dtype=float)
    r2 = np.sum((x - center[: x.shape[1]]) ** 2, axis=1)
    return np.exp(-r2 / (2.0 * width**2))


def make_preset(spec):
    """
    Build a callable g(x, t) from a named analytic preset.

    Args:
        spec (dict): {"kind": one of PRESET_KINDS, ...kind specific keys}.
            constant: "value".
            sine: "amplitude", "modes", "time_poly" (coefficients in t).
            gaussian: "amplitude", "center", "width", "time_poly".

    Returns:
        callable: g(x, t) with x of shape (nodes, d), returning (nodes,).
    """
    kind = spec.get("kind", "zero")
    amplitude = float(spec.get("amplitude", 1.0))
    time_poly = list(spec.get("time_poly", [1.0]))

    if kind == "zero":
        return lambda x, t: np.zeros(np.atleast_2d(x).shape[0])
    if kind == "constant":
        value = float(spec.get("value", 1.0))
        return lambda x, t: np.full(np.atleast_2d(x).shape[0], value)
    if kind == "sine":
        modes = int(spec.get("modes", 1))
        return lambda x, t: amplitude * sine_product(x, modes) * time_polynomial(time_poly, t)
    if kind == "gaussian":
        center = spec.get("center", [0.5, 0.5, 0.5])
        width = float(spec.get("width", 0.1))
        if width <= 0:
            raise ValueError(f"gaussian width must be > 0, got {width}")
        return lambda x, t: amplitude * gaussian_bump(x, center, width) * time_polynomial(time_poly, t)
    raise ValueError(f"Unknown preset kind '{kind}', expected one of {PRESET_KINDS}")


def observed_orders(errors, sizes):
    """Pairwise log-ratio orders for errors measured at decreasing sizes."""
    errors = np.asarray(errors, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    return np.log(errors[:-1] / errors[1:]) / np.log(sizes[:-1] / sizes[1:])


def richardson_extrapolate(coarse, fine, ratio=2.0, order=2):
    factor = ratio**order
    return (factor * fine - coarse) / (factor - 1.0)


def relative_error(value, reference):
    return abs(value - reference) / abs(reference)


def ensure_directory(path):
    """Ensure the output directory exists, create it if it doesn't"""
    if not os.path.exists(path):
        os.makedirs(path)
        logger.info(f"Created output directory: {path}")
    return path
