"""Shared oracles for the test-suite."""

import numpy as np

from hetefedrec.model import ScorerParams
from hetefedrec.training import pack_thetas

H = 1e-5


def central_difference(f, params: dict, h: float = H) -> dict:
    """Finite-difference gradient of ``f(params)`` for every array in ``params``."""
    out = {}
    for key, a in params.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = f(params)
            a[idx] = old - h
            down = f(params)
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[key] = g
    return out


def relative_error(analytic: dict, numeric: dict) -> float:
    """Largest absolute difference, scaled by the largest gradient magnitude."""
    diff = max(np.max(np.abs(analytic[k] - numeric[k]), initial=0.0) for k in numeric)
    scale = max(max(np.max(np.abs(analytic[k]), initial=0.0), np.max(np.abs(numeric[k]), initial=0.0)) for k in numeric)
    return diff / max(scale, 1e-8)


def random_client_params(rng, widths, tier, num_items, scale=0.5):
    """Local parameter dict of a ``tier`` client with perturbed biases."""
    n = widths[tier]
    thetas = []
    for w in widths[: tier + 1]:
        th = ScorerParams.init(w, rng)
        th = th.map(lambda a: a + rng.normal(0, 0.1, a.shape))
        thetas.append(th)
    params = {"u": rng.normal(0, scale, n), "V": rng.normal(0, scale, (num_items, n))}
    return pack_thetas(params, thetas)

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []
