"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .tensor import Parameter, Tensor, backward


def finite_diff_check(f: Callable[[], Tensor], p: Parameter, eps: float = 1e-3,
                      sample: Optional[int] = None, rng=None) -> float:
    """Compare the analytic gradient of ``f`` w.r.t. ``p`` against central differences.

    ``f`` must rebuild its graph on every call and return a scalar tensor.
    Returns the maximum over checked components of
    ``|analytic - central| / max(1, |analytic|)``. When ``sample`` is given,
    only that many randomly chosen components are probed, which keeps the
    check tractable on whole networks.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    p.zero_grad()
    loss = f()
    backward(loss)
    analytic = p.grad.copy()

    flat = p.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        if rng is None:
            rng = np.random.default_rng(0)
        indices = rng.choice(n, size=sample, replace=False)
    else:
        indices = range(n)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f().item()
        flat[i] = orig - eps
        f_minus = f().item()
        flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        err = abs(float(a_flat[i]) - fd) / max(1.0, abs(float(a_flat[i])))
        if err > worst:
            worst = err
    return worst
