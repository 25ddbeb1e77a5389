"""Exact (erf-based) GELU and its derivatives."""

import math

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_pdf(x):
    x = np.asarray(x)
    # keep float32 inputs in float32
    c = np.asarray(_INV_SQRT_2PI, dtype=np.result_type(x.dtype, np.float32))
    return np.exp(-0.5 * x * x) * c


def gelu(x):
    x = np.asarray(x)
    return x * ndtr(x)


def gelu_prime(x):
    x = np.asarray(x)
    return ndtr(x) + x * normal_pdf(x)


def gelu_second(x):
    x = np.asarray(x)
    return (2.0 - x * x) * normal_pdf(x)
