"""Brute-force reference implementations used as test oracles."""

import numpy as np

from qrcoverage.solver import pinball_loss


def grid_prox(x, rho, tau, points=10_000):
    """Minimize ``pinball(u) + (x - u)^2 / (2 rho)`` over a grid, then over a finer grid.

    The prox moves ``x`` by at most ``rho * max(tau, 1 - tau)``, so the coarse
    grid spans ``[x - rho, x + rho]``; the kink at 0 is added to each grid.
    Returns ``(argmin, min)``.
    """

    def obj(u):
        return pinball_loss(u, tau) + (x - u) ** 2 / (2 * rho)

    lo, hi = x - rho, x + rho
    for _ in range(2):
        grid = np.append(np.linspace(lo, hi, points), 0.0 if lo <= 0.0 <= hi else lo)
        vals = obj(grid)
        k = int(np.argmin(vals))
        h = (hi - lo) / (points - 1)
        lo, hi = grid[k] - h, grid[k] + h
    return float(grid[k]), float(vals[k])
