"""Bell-shaped reward kernels.

Both kernels peak at ``alpha`` for a zero argument. The Gaussian decays
exponentially; the generalized Cauchy kernel decays polynomially and crosses
``alpha / 2`` at ``x = +-sigma`` for every order ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KernelParams:
    alpha: float
    sigma: float
    beta: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if int(self.beta) != self.beta or self.beta < 1:
            raise ValueError(f"beta must be an integer >= 1, got {self.beta}")


def gaussian_kernel(params: KernelParams, x):
    """``alpha * exp(-(x / sigma)^2)``."""
    u = np.asarray(x, dtype=float) / params.sigma
    return params.alpha * np.exp(-u * u)


def cauchy_kernel(params: KernelParams, x):
    """``alpha / ((x / sigma)^(2 beta) + 1)``."""
    u = np.asarray(x, dtype=float) / params.sigma
    with np.errstate(over="ignore"):
        return params.alpha / (np.power(u * u, int(params.beta)) + 1.0)
