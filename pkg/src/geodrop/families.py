"""Closed-form metric families used as geometric test beds.

Each family provides the metric itself and, where the geodesic distance is
known in closed form, vectorised volume density and distance functions for
Monte-Carlo ball volumes.
"""

import numpy as np


def euclidean_metric(dim):
    eye = np.eye(dim)
    return lambda theta: eye.copy()


def sphere_metric(theta):
    """Round unit sphere in (polar, azimuth) coordinates: ``diag(1, sin^2 polar)``."""
    s = np.sin(theta[0])
    return np.diag([1.0, s * s])


def sphere_volume_density(points):
    return np.abs(np.sin(points[:, 0]))


def sphere_distance(points, center):
    """Great-circle distance in (polar, azimuth) coordinates."""
    def unit(p):
        p = np.atleast_2d(p)
        return np.stack([np.sin(p[:, 0]) * np.cos(p[:, 1]), np.sin(p[:, 0]) * np.sin(p[:, 1]), np.cos(p[:, 0])], 1)

    cos = np.clip(unit(points) @ unit(center)[0], -1.0, 1.0)
    return np.arccos(cos)


def gaussian_fisher_metric(theta):
    """Fisher metric of N(mu, sigma^2) in (mu, sigma): ``diag(1, 2) / sigma^2``."""
    s2 = theta[1] ** 2
    return np.diag([1.0 / s2, 2.0 / s2])


def gaussian_volume_density(points):
    return np.sqrt(2.0) / points[:, 1] ** 2


def gaussian_distance(points, center):
    """Fisher-Rao distance between univariate Gaussians.

    With ``u = mu / sqrt(2)`` the metric is twice the Poincare half-plane
    metric, so ``d = sqrt(2) * arccosh(1 + |du|^2 / (2 s1 s2))``.
    """
    points = np.atleast_2d(points)
    center = np.asarray(center, dtype=np.float64)
    du = (points[:, 0] - center[0]) / np.sqrt(2.0)
    ds = points[:, 1] - center[1]
    arg = 1.0 + (du * du + ds * ds) / (2.0 * points[:, 1] * center[1])
    return np.sqrt(2.0) * np.arccosh(arg)


def categorical_fisher_metric(eta):
    """Fisher metric of a categorical in natural parameters (last class as reference).

    ``p = softmax(eta, 0)``; the metric is ``diag(p') - p' p'^T`` over the free classes.
    """
    z = np.append(np.asarray(eta, dtype=np.float64), 0.0)
    p = np.exp(z - z.max())
    p /= p.sum()
    q = p[:-1]
    return np.diag(q) - np.outer(q, q)


FAMILIES = {
    "euclidean": euclidean_metric(2),
    "sphere": sphere_metric,
    "gaussian": gaussian_fisher_metric,
}


def ball_half_widths(family, center, r, slack=1.05):
    """Half-widths of a coordinate box containing the geodesic ball of radius ``r``."""
    center = np.asarray(center, dtype=np.float64)
    if family == "sphere":
        lo, hi = center[0] - r, center[0] + r
        if lo <= 0.0 or hi >= np.pi:
            raise ValueError("ball reaches a pole of the chart")
        min_sin = min(np.sin(lo), np.sin(hi), np.sin(center[0]))
        return slack * np.array([r, r / min_sin])
    if family == "gaussian":
        sigma = center[1]
        grow = np.exp(r / np.sqrt(2.0))
        d_mu = np.sqrt(2.0) * np.sqrt(2.0 * sigma * sigma * grow * (np.cosh(r / np.sqrt(2.0)) - 1.0))
        return slack * np.array([d_mu, sigma * (grow - 1.0)])
    if family == "euclidean":
        return slack * np.full(center.size, r)
    raise ValueError(f"no closed-form ball for family {family!r}")
