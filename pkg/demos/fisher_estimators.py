"""Three Fisher information estimates of one small network.

Run: python3 demos/fisher_estimators.py

Exact class enumeration, Monte Carlo with model-sampled labels and the
Kronecker-factored approximation are computed for a 4-6-3 network, with
the norms used by the dropout sweep.
"""

import numpy as np

from geodrop.data import synth_blobs
from geodrop.fim import exact_fim, fim_norm, kfac_fim, mc_fim
from geodrop.models import TrainConfig, fit
from geodrop.numerics import make_rng

data = synth_blobs(3, 40, 4, 2.0, seed=0)
model = fit(data, TrainConfig(hidden=(6,), epochs=20, lr=0.2, activation="sigmoid")).model
x = data.features

exact = exact_fim(model, x)
print(f"{model.n_params} parameters, {len(x)} inputs")
for name, est in [
    ("exact", exact),
    ("MC x10", mc_fim(model, x, 10, make_rng(0))),
    ("MC x1000", mc_fim(model, x, 1000, make_rng(0))),
    ("K-FAC", kfac_fim(model, x)),
]:
    gap = np.linalg.norm(est.to_dense() - exact.full) / np.linalg.norm(exact.full)
    norms = ", ".join(f"{n} {fim_norm(est, n):.4f}" for n in ("frobenius", "trace", "spectral"))
    print(f"{name:9s} {norms}; relative distance to exact {gap:.3f}")

# K-FAC ignores cross-layer blocks and decorrelates activations from
# gradients, so it stays a biased estimate however many inputs are used.
