"""Fisher information: exact, Monte-Carlo and K-FAC estimates, norms, and
FIM-based regularisers that plug into SGD training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import CapacityError, DegenerateChartError, DomainError
from .geometry import second_fundamental_form
from .models import (
    DropoutMask,
    MlpModel,
    TrainConfig,
    _forward_pass,
    _sgd,
    backprop,
    forward,
    loss_and_grad,
    softmax,
)
from .numerics import Rng, finite_diff_jacobian, kron, kron_matvec, sym_eig

EXACT_FIM_MAX_PARAMS = 2000
PHI_TRAIN_MAX_PARAMS = 200
# above this size, eigenvalues come from LAPACK rather than the Jacobi solver
JACOBI_MAX_DIM = 256


@dataclass
class FimEstimate:
    """A Fisher information estimate.

    ``kind`` is one of ``exact``, ``monte_carlo`` or ``kfac``. Full estimates
    carry ``full``; K-FAC estimates carry one ``(A, G)`` pair per layer whose
    Kronecker product approximates that layer's diagonal block.
    """

    kind: str
    full: Optional[np.ndarray] = None
    blocks: list = field(default_factory=list)
    n_samples: int = 0

    @property
    def dim(self) -> int:
        if self.full is not None:
            return self.full.shape[0]
        return sum(a.shape[0] * g.shape[0] for a, g in self.blocks)

    def to_dense(self) -> np.ndarray:
        if self.full is not None:
            return self.full
        out = np.zeros((self.dim, self.dim))
        start = 0
        for a, g in self.blocks:
            size = a.shape[0] * g.shape[0]
            out[start:start + size, start:start + size] = kron(a, g)
            start += size
        return out

    def quadratic(self, v) -> float:
        """``v^T I v``."""
        v = np.asarray(v, dtype=np.float64)
        if self.full is not None:
            return float(v @ self.full @ v)
        total, start = 0.0, 0
        for a, g in self.blocks:
            size = a.shape[0] * g.shape[0]
            seg = v[start:start + size]
            total += float(seg @ kron_matvec(a, g, seg))
            start += size
        return total

    def min_eigenvalue(self) -> float:
        mats = [self.full] if self.full is not None else [m for pair in self.blocks for m in pair]
        return min(_eigvalsh(m).min() for m in mats)

    def is_psd(self, rtol: float = 1e-8) -> bool:
        mats = [self.full] if self.full is not None else [m for pair in self.blocks for m in pair]
        for m in mats:
            if np.abs(m - m.T).max(initial=0.0) > rtol * max(1.0, np.abs(m).max(initial=0.0)):
                return False
            if _eigvalsh(m).min() < -rtol * max(np.trace(m), np.finfo(float).tiny):
                return False
        return True


def _eigvalsh(m) -> np.ndarray:
    if m.shape[0] <= JACOBI_MAX_DIM:
        return sym_eig(m).eigenvalues
    return np.linalg.eigvalsh(0.5 * (m + m.T))[::-1]


def _class_grads(model, x):
    """Yield (p_y column, per-example grads of log p(y|x)) for every class y."""
    cache = _forward_pass(model, x)
    p = softmax(cache[0][-1])
    eye = np.eye(p.shape[1])
    for y in range(p.shape[1]):
        yield p[:, y], backprop(model, x, eye[y] - p, cache=cache)


def exact_fim(model: MlpModel, inputs) -> FimEstimate:
    """Model Fisher ``mean_x E_{y~p(.|x)}[grad log p  grad log p^T]`` by class enumeration."""
    if model.n_params > EXACT_FIM_MAX_PARAMS:
        raise CapacityError(
            f"exact FIM needs a dense {model.n_params}x{model.n_params} matrix "
            f"(limit {EXACT_FIM_MAX_PARAMS} parameters)"
        )
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    fim = np.zeros((model.n_params, model.n_params))
    for py, g in _class_grads(model, x):
        gw = g * np.sqrt(py)[:, None]
        fim += gw.T @ gw
    fim /= x.shape[0]
    return FimEstimate("exact", full=0.5 * (fim + fim.T), n_samples=x.shape[0])


def _sample_classes(p, rng: Rng):
    u = rng.random(p.shape[0])
    cdf = np.cumsum(p, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), p.shape[1] - 1)


def mc_fim(model: MlpModel, inputs, samples_per_input: int, rng: Rng) -> FimEstimate:
    """Monte-Carlo Fisher with labels drawn from the model's own predictive distribution."""
    if samples_per_input < 1:
        raise ValueError("samples_per_input must be >= 1")
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    cache = _forward_pass(model, x)
    p = softmax(cache[0][-1])
    eye = np.eye(p.shape[1])
    fim = np.zeros((model.n_params, model.n_params))
    for _ in range(samples_per_input):
        y = _sample_classes(p, rng)
        g = backprop(model, x, eye[y] - p, cache=cache)
        fim += g.T @ g
    fim /= x.shape[0] * samples_per_input
    return FimEstimate("monte_carlo", full=0.5 * (fim + fim.T), n_samples=x.shape[0] * samples_per_input)


def kfac_fim(model: MlpModel, inputs, rng: Optional[Rng] = None, labels: str = "exact") -> FimEstimate:
    """K-FAC factors per layer.

    ``A_l`` is the second moment of the bias-augmented layer input, ``G_l`` the
    second moment of the log-likelihood gradient w.r.t. the layer's
    pre-activation. With ``labels="exact"`` the expectation over ``y`` is taken
    by enumerating classes; ``labels="sampled"`` draws one label per input
    from the model (needs ``rng``).
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    n = x.shape[0]
    pre, layer_inputs, acts = _forward_pass(model, x)
    p = softmax(pre[-1])
    k = p.shape[1]

    a_factors = []
    for a in layer_inputs:
        aug = np.hstack([a, np.ones((n, 1))])
        a_factors.append(aug.T @ aug / n)

    if labels == "exact":
        label_sets = [(np.full(n, y), p[:, y]) for y in range(k)]
    elif labels == "sampled":
        if rng is None:
            raise ValueError("sampled K-FAC labels need an rng")
        label_sets = [(_sample_classes(p, rng), np.ones(n))]
    else:
        raise ValueError(f"unknown label mode {labels!r}")

    g_factors = [np.zeros((w, w)) for w in model.layer_sizes[1:]]
    eye = np.eye(k)
    for y, weight in label_sets:
        delta = eye[y] - p
        for l in range(model.n_layers - 1, -1, -1):
            dw = delta * np.sqrt(weight)[:, None]
            g_factors[l] += dw.T @ dw
            if l > 0:
                h = acts[l - 1]
                deriv = (pre[l - 1] > 0) if model.activation == "relu" else h * (1.0 - h)
                delta = (delta @ model.weights[l].T) * deriv
    blocks = [(a, 0.5 * (g + g.T) / n) for a, g in zip(a_factors, g_factors)]
    return FimEstimate("kfac", blocks=blocks, n_samples=n)


def _lambda_max(m) -> float:
    return float(_eigvalsh(m)[0])


def fim_norm(est: FimEstimate, which: str = "frobenius") -> float:
    """Scalar size of a Fisher estimate; K-FAC norms use Kronecker identities."""
    if which not in ("frobenius", "spectral", "trace"):
        raise ValueError(f"unknown norm {which!r}")
    if est.full is not None:
        m = est.full
        if which == "frobenius":
            return float(np.linalg.norm(m))
        if which == "trace":
            return float(np.trace(m))
        return float(np.abs(_eigvalsh(m)).max(initial=0.0))
    if which == "frobenius":
        return math.sqrt(sum(np.sum(a * a) * np.sum(g * g) for a, g in est.blocks))
    if which == "trace":
        return float(sum(np.trace(a) * np.trace(g) for a, g in est.blocks))
    return max(_lambda_max(a) * _lambda_max(g) for a, g in est.blocks)


# ---------------------------------------------------------------------------
# regularisers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhiRegularizer:
    """A penalty ``Phi(I(theta))`` on the Fisher information.

    * ``fim_norm``: ``mu * ||I||`` (norm chosen by ``norm``)
    * ``distill``: ``delta^T I delta``, the quadratic KL to a teacher at ``theta + delta``
    * ``pac_bayes``: ``lam^2 C / (8 n) + log((delta^T I delta + 1/eps) / lam)``
    """

    kind: str = "fim_norm"
    mu: float = 0.0
    norm: str = "frobenius"
    delta: Optional[np.ndarray] = None
    lam: float = 1.0
    C: float = 0.0
    n: int = 1
    eps: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fim_norm", "distill", "pac_bayes"):
            raise ValueError(f"unknown regulariser kind {self.kind!r}")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.kind == "pac_bayes" and not (self.lam > 0 and self.eps > 0 and self.n >= 1):
            raise ValueError("pac_bayes needs lam > 0, eps > 0, n >= 1")
        if self.kind != "fim_norm" and self.delta is None:
            raise ValueError(f"{self.kind} needs a displacement delta")

    @property
    def is_zero(self) -> bool:
        return self.kind == "fim_norm" and self.mu == 0.0


def phi_value(reg: PhiRegularizer, est: FimEstimate, theta=None) -> float:
    if reg.kind == "fim_norm":
        return reg.mu * fim_norm(est, reg.norm)
    delta = np.asarray(reg.delta, dtype=np.float64)
    if delta.shape != (est.dim,):
        raise ValueError(f"delta has shape {delta.shape}, expected ({est.dim},)")
    quad = est.quadratic(delta)
    if reg.kind == "distill":
        return quad
    arg = (quad + 1.0 / reg.eps) / reg.lam
    if arg <= 0.0:
        raise DomainError("pac_bayes: log argument is not positive")
    return reg.lam**2 * reg.C / (8.0 * reg.n) + math.log(arg)


def train_with_phi(
    data: Dataset,
    cfg: TrainConfig,
    mask: Optional[DropoutMask] = None,
    phi_batch: int = 32,
    model: Optional[MlpModel] = None,
) -> np.ndarray:
    """SGD on cross-entropy plus ``cfg.phi`` evaluated on a fixed minibatch.

    The penalty gradient is taken by central finite differences over theta,
    recomputing the exact Fisher of the first ``phi_batch`` examples each
    time; hence the small-model guard.
    """
    reg = cfg.phi
    if reg is None or reg.is_zero:
        return _sgd(data, replace(cfg, dropout_rate=0.0), mask=mask, model=model).params
    sizes = cfg.layer_sizes(data) if model is None else model.layer_sizes
    template = MlpModel.zeros(sizes, cfg.activation)
    if template.n_params > PHI_TRAIN_MAX_PARAMS:
        raise CapacityError(
            f"Phi-regularised training differentiates the Fisher numerically; "
            f"{template.n_params} parameters exceed the limit of {PHI_TRAIN_MAX_PARAMS}"
        )
    x_fix = data.features[:phi_batch]
    kept = None if mask is None else mask.kept

    def phi_of(theta):
        return phi_value(reg, exact_fim(template.with_params(theta), x_fix), theta)

    def extra(theta, _x, _y):
        value = phi_of(theta)
        grad = np.zeros_like(theta)
        steps = 1e-5 * np.maximum(1.0, np.abs(theta))
        for i in range(theta.size):
            if kept is not None and not kept[i]:
                continue
            tp, tm = theta.copy(), theta.copy()
            tp[i] += steps[i]
            tm[i] -= steps[i]
            grad[i] = (phi_of(tp) - phi_of(tm)) / (tp[i] - tm[i])
        return value, grad

    return _sgd(data, replace(cfg, dropout_rate=0.0), mask=mask, model=model, extra_grad=extra).params


# ---------------------------------------------------------------------------
# Fisher information as the first fundamental form of an embedding
# ---------------------------------------------------------------------------

def fisher_embedding(model: MlpModel, inputs, kept=None):
    """Map ``theta -> 2 sqrt(p(y|x_n; theta)) / sqrt(N)`` stacked over inputs and classes.

    Its pullback metric ``J^T J`` is exactly the model-expectation Fisher
    information of ``inputs``. ``kept`` restricts the map to a coordinate
    chart, the remaining parameters frozen at the model's values.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    scale = 2.0 / math.sqrt(x.shape[0])
    base = model.params
    idx = np.arange(base.size) if kept is None else np.flatnonzero(kept)

    def embed(coords):
        theta = base.copy()
        theta[idx] = coords
        return scale * np.sqrt(forward(model.with_params(theta), x)).ravel()

    return embed, base[idx]


def reference_class_chart(model: MlpModel) -> np.ndarray:
    """Coordinates left after pinning the last class's output weights and bias.

    Softmax outputs are unchanged by a common shift of every class's logit, so
    the full parameterisation never has a full-rank Jacobian; fixing one class
    as reference removes that direction.
    """
    kept = np.ones(model.n_params, dtype=bool)
    sw, sb = model.layer_slices()[-1]
    kept[sw].reshape(model.layer_sizes[-2], model.layer_sizes[-1])[:, -1] = False
    kept[sb][-1] = False
    return kept


@dataclass
class HessianSplit:
    """Fisher information next to the objects it is often identified with.

    ``pullback`` is the metric induced by :func:`fisher_embedding`;
    ``nll_hessian`` is the Hessian of the mean labelled cross-entropy;
    ``sff_norm`` is the norm of the embedding's second fundamental form
    (NaN when the chart is degenerate). All matrices live on ``kept``.
    """

    kept: np.ndarray
    fim: np.ndarray
    pullback: np.ndarray
    nll_hessian: np.ndarray
    sff_norm: float

    @staticmethod
    def _rel(a, b) -> float:
        return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))

    @property
    def pullback_gap(self) -> float:
        return self._rel(self.pullback, self.fim)

    @property
    def hessian_gap(self) -> float:
        return self._rel(self.nll_hessian, self.fim)

    def summary(self) -> dict:
        return {
            "n_coordinates": int(self.kept.sum()),
            "fim_frobenius": float(np.linalg.norm(self.fim)),
            "pullback_vs_fim_rel": self.pullback_gap,
            "nll_hessian_vs_fim_rel": self.hessian_gap,
            "sff_norm": self.sff_norm,
        }


def hessian_split(model: MlpModel, data: Dataset, kept=None) -> HessianSplit:
    """Compare the exact Fisher with the embedding metric and the loss Hessian.

    Defaults to the reference-class chart. Toy scale only.
    """
    if model.n_params > PHI_TRAIN_MAX_PARAMS:
        raise CapacityError(f"{model.n_params} parameters exceed the limit of {PHI_TRAIN_MAX_PARAMS}")
    kept = reference_class_chart(model) if kept is None else np.asarray(kept, dtype=bool)
    idx = np.flatnonzero(kept)
    fim = exact_fim(model, data.features).full[np.ix_(idx, idx)]
    embed, coords = fisher_embedding(model, data.features, kept)
    jac = finite_diff_jacobian(embed, coords)
    base = model.params

    def grad_on_chart(c):
        theta = base.copy()
        theta[idx] = c
        return loss_and_grad(model.with_params(theta), data.features, data.labels)[1][idx]

    hess = finite_diff_jacobian(grad_on_chart, coords)
    try:
        sff = second_fundamental_form(embed, coords).norm
    except DegenerateChartError:
        sff = float("nan")
    return HessianSplit(kept, fim, jac.T @ jac, 0.5 * (hess + hess.T), sff)
