"""Small custom problems used across tests."""

import numpy as np

from mfsmp.problem import ProblemSpec


def _batch(*arrs):
    return np.broadcast_shapes(*[np.shape(a)[:-1] for a in arrs])


def scalar_spec(drift=None, sigma=0.0, gain=0.0, running=None, terminal=None, phi=0.0,
                control_set=(-1.0, 0.0, 1.0), x0=1.0, horizon=1.0, name="custom", derivatives=None):
    """Scalar problem with optional pieces; missing coefficients are zero."""

    def zero_drift(t, x, y, u):
        return np.zeros(_batch(x, y, u) + (1,))

    def zero_cost(t, x, y, u):
        return np.zeros(_batch(x, y, u))

    def zero_terminal(x, y):
        return np.zeros(_batch(x, y))

    def diffusion(t, x, y):
        return np.full(_batch(x, y) + (1, 1), float(sigma))

    g = np.full((1, 1), float(gain))
    p = np.full(1, float(phi))
    return ProblemSpec(
        name=name, state_dim=1, noise_dim=1, control_dim=1, singular_dim=1, horizon=horizon,
        x0=np.array([x0]), drift=drift or zero_drift, diffusion=diffusion,
        singular_gain=lambda t: g, running_cost=running or zero_cost,
        terminal_cost=terminal or zero_terminal, singular_cost=lambda t: p,
        control_set=np.array(control_set, dtype=float)[:, None], derivatives=derivatives or {},
    )
