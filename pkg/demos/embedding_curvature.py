"""How a model family bends inside the space of predictions.

Run: python3 demos/embedding_curvature.py

The second fundamental form of three curves with known bending, then of a
softmax regression embedded through square-root probabilities, where the
induced metric is the Fisher information.
"""

import numpy as np

from geodrop.data import synth_blobs
from geodrop.fim import hessian_split
from geodrop.geometry import second_fundamental_form
from geodrop.models import TrainConfig, fit

curves = {
    "line": (lambda t: np.array([2 * t[0], -t[0], 0.5 * t[0]]), 0.4),
    "parabola at vertex": (lambda t: np.array([t[0], t[0] ** 2]), 0.0),
    "unit circle": (lambda t: np.array([np.cos(t[0]), np.sin(t[0])]), 1.1),
    "circle of radius 3": (lambda t: 3 * np.array([np.cos(t[0] / 3), np.sin(t[0] / 3)]), 1.1),
}
for name, (embed, t) in curves.items():
    print(f"{name:20s} |L| = {second_fundamental_form(embed, np.array([t])).norm:.6f}")

data = synth_blobs(3, 20, 2, 2.0, seed=0)
for hidden in ((), (3,)):
    model = fit(data, TrainConfig(hidden=hidden, epochs=20, lr=0.2, activation="sigmoid")).model
    s = hessian_split(model, data).summary()
    print(f"hidden {hidden or 'none'}: {s['n_coordinates']} coordinates, "
          f"embedding metric vs Fisher {s['pullback_vs_fim_rel']:.1e}, "
          f"loss Hessian vs Fisher {s['nll_hessian_vs_fim_rel']:.1e}, |L| {s['sff_norm']:.3f}")
