"""Curvature of three small statistical and geometric families.

Run: python3 demos/curvature_tour.py

Prints Christoffel symbols and scalar curvature for the plane, the unit
sphere and the univariate Gaussian under its Fisher metric, then checks
that a geodesic ball's area tracks the sign of the curvature.
"""

import math

import numpy as np

from geodrop import families, geometry
from geodrop.numerics import make_rng

points = {
    "euclidean": (families.euclidean_metric(2), np.array([0.3, -1.0])),
    "sphere": (families.sphere_metric, np.array([math.pi / 4, 0.0])),
    "gaussian": (families.gaussian_fisher_metric, np.array([0.0, 1.0])),
}

for name, (metric, theta) in points.items():
    report = geometry.curvature_report(metric, theta)
    gamma = geometry.levi_civita(metric, theta)
    print(f"{name:9s} at {theta}: scalar curvature {report.scalar:+.6f}, "
          f"max |Gamma| {np.abs(gamma).max():.4f}, max |T| {np.abs(report.torsion).max():.1e}")

# The Levi-Civita connection is its own dual; a generic connection is not.
metric, theta = points["gaussian"]
lc = geometry.levi_civita_field(metric)
print("Levi-Civita self-duality gap:", np.abs(geometry.dual_connection(metric, lc, theta) - lc(theta)).max())
zero = lambda t: np.zeros((2, 2, 2))
dual = geometry.dual_connection(metric, zero, theta)
print("dual of the zero connection, Gamma*^sigma_{sigma sigma}:", dual[1, 1, 1])

# Positive curvature shrinks geodesic balls, negative curvature inflates them.
r = 0.2
for name in ("sphere", "gaussian"):
    metric, theta = points[name]
    density = getattr(families, f"{name}_volume_density")
    distance = getattr(families, f"{name}_distance")
    ratio, err = geometry.mc_ball_volume_ratio(
        density, distance, theta, r, families.ball_half_widths(name, theta, r), 400_000, make_rng(1)
    )
    series = geometry.volume_ratio(geometry.scalar_curvature(metric, theta), 2, r)
    print(f"{name:9s} ball of radius {r}: Monte Carlo {ratio:.5f} +/- {err:.5f}, series {series:.5f}")
