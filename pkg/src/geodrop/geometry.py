"""Connections, torsion, curvature, duality and embeddings over metric fields.

A *metric field* is any callable ``theta -> (n, n)`` symmetric positive
definite array; a *connection field* is a callable ``theta -> (n, n, n)``
array ``gamma`` with ``gamma[k, i, j]`` the coefficient of ``d_k`` in
``nabla_{d_i} d_j``. All derivatives are central differences with one
Richardson extrapolation step (``h`` and ``h/2``). Steps are powers of two so
that ``theta +/- h`` is exact whenever ``theta`` has few significant bits.

Index layout of the Riemann tensor follows the component formula

    R[r, i, j, k] = d_i G^r_jk - d_j G^r_ik + G^r_ih G^h_jk - G^r_jh G^h_ik

so the two derivative slots come first and the transported vector last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateChartError, EmptyMaskError, NumericalError, ShapeError, SingularMetricError
from .numerics import sym_eig, sym_sqrt

MetricField = Callable[[np.ndarray], np.ndarray]
ConnectionField = Callable[[np.ndarray], np.ndarray]

DEFAULT_STEP = 2.0**-8


def _steps(theta, h):
    base = DEFAULT_STEP if h is None else h
    scaled = base * np.maximum(1.0, np.abs(theta))
    return 2.0 ** np.round(np.log2(scaled))


def _point(theta):
    return np.atleast_1d(np.asarray(theta, dtype=np.float64))


def _checked(value, what):
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite {what} evaluation")
    return value


def partials(field, theta, h=None) -> np.ndarray:
    """``out[k, ...] = d field / d theta_k`` by Richardson-extrapolated central differences."""
    theta = _point(theta)
    steps = _steps(theta, h)
    out = []
    for k in range(theta.size):
        def central(step):
            tp, tm = theta.copy(), theta.copy()
            tp[k] += step
            tm[k] -= step
            return (_checked(field(tp), "field") - _checked(field(tm), "field")) / (2.0 * step)

        coarse, fine = central(steps[k]), central(0.5 * steps[k])
        out.append((4.0 * fine - coarse) / 3.0)
    return np.stack(out)


def metric_at(metric: MetricField, theta) -> np.ndarray:
    g = _checked(metric(_point(theta)), "metric")
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError(f"metric must be square, got {g.shape}")
    if np.abs(g - g.T).max(initial=0.0) > 1e-12 * max(1.0, np.abs(g).max(initial=0.0)):
        raise ShapeError("metric is not symmetric")
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        raise SingularMetricError(f"metric is not positive definite at {theta}") from None
    return g


def _inverse(g):
    try:
        return np.linalg.inv(g)
    except np.linalg.LinAlgError:
        raise SingularMetricError("metric is singular") from None


def metric_derivatives(metric: MetricField, theta, h=None) -> np.ndarray:
    """``dg[k, i, j] = d_k g_ij``."""
    return partials(metric, theta, h)


# ---------------------------------------------------------------------------
# connections
# ---------------------------------------------------------------------------

def levi_civita(metric: MetricField, theta, h=None) -> np.ndarray:
    """Christoffel symbols ``G^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)``."""
    g = metric_at(metric, theta)
    ginv = _inverse(g)
    dg = metric_derivatives(metric, theta, h)
    # first-kind symbols  low[i, j, l] = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    low = 0.5 * (dg + dg.transpose(1, 0, 2) - dg.transpose(1, 2, 0))
    return np.einsum("kl,ijl->kij", ginv, low)


def levi_civita_field(metric: MetricField, h=None) -> ConnectionField:
    return lambda theta: levi_civita(metric, theta, h)


def _eval_connection(conn, theta):
    return _checked(conn(_point(theta)) if callable(conn) else conn, "connection")


def torsion(conn: ConnectionField, theta) -> np.ndarray:
    """``T^k_ij = G^k_ij - G^k_ji`` in a coordinate frame."""
    gamma = _eval_connection(conn, theta)
    return gamma - gamma.transpose(0, 2, 1)


def riemann(conn: ConnectionField, theta, h=None) -> np.ndarray:
    gamma = _eval_connection(conn, theta)
    dgamma = partials(conn, theta, h)  # dgamma[i, r, j, k] = d_i G^r_jk
    deriv = np.einsum("irjk->rijk", dgamma)
    deriv = deriv - deriv.transpose(0, 2, 1, 3)
    quad = np.einsum("rih,hjk->rijk", gamma, gamma)
    return deriv + quad - quad.transpose(0, 2, 1, 3)


def ricci(conn: ConnectionField, theta, h=None) -> np.ndarray:
    """``Ric_jk = R^i_ijk``."""
    return np.einsum("iijk->jk", riemann(conn, theta, h))


def scalar_curvature(metric: MetricField, theta, h=None) -> float:
    """Scalar curvature ``g^jk R^i_ijk`` of the Levi-Civita connection (unit sphere: +2)."""
    g = metric_at(metric, theta)
    ric = ricci(levi_civita_field(metric, h), theta, h)
    return float(np.einsum("jk,jk->", _inverse(g), ric))


@dataclass(frozen=True)
class CurvatureReport:
    torsion: np.ndarray
    riemann: np.ndarray
    scalar: float


def curvature_report(metric: MetricField, theta, conn: ConnectionField = None, h=None) -> CurvatureReport:
    """Torsion and Riemann tensor of ``conn`` (Levi-Civita by default) plus scalar curvature.

    The scalar is always the metric contraction of the supplied connection's
    curvature; it is the Riemannian scalar curvature only for Levi-Civita.
    """
    g = metric_at(metric, theta)
    conn = levi_civita_field(metric, h) if conn is None else conn
    r = riemann(conn, theta, h)
    scalar = float(np.einsum("jk,iijk->", _inverse(g), r))
    return CurvatureReport(torsion(conn, theta), r, scalar)


def lower(g, gamma) -> np.ndarray:
    """``low[k, i, j] = G_{ki,j} = g_jm G^m_ki``."""
    return np.einsum("jm,mki->kij", g, gamma)


def dual_connection(metric: MetricField, conn: ConnectionField, theta, h=None) -> np.ndarray:
    """The unique connection dual to ``conn`` w.r.t. ``metric`` at ``theta``.

    Lowered form ``G*_{kj,i} = d_k g_ij - G_{ki,j}``, then raised with ``g^{-1}``.
    """
    g = metric_at(metric, theta)
    ginv = _inverse(g)
    dg = metric_derivatives(metric, theta, h)
    diff = dg - lower(g, _eval_connection(conn, theta))  # diff[k, i, j] = G*_{kj,i}
    return np.einsum("mi,kij->mkj", ginv, diff)


def dual_connection_field(metric: MetricField, conn: ConnectionField, h=None) -> ConnectionField:
    return lambda theta: dual_connection(metric, conn, theta, h)


def duality_residual(dg, g, gamma, gamma_dual) -> np.ndarray:
    """``d_k g_ij - G_{ki,j} - G*_{kj,i}`` for given metric derivatives and coefficients."""
    return dg - lower(g, gamma) - lower(g, gamma_dual).transpose(0, 2, 1)


def alpha_connection(conn, dual, alpha: float, theta=None) -> np.ndarray:
    """``(1 + alpha)/2 * dual + (1 - alpha)/2 * conn``.

    ``conn`` and ``dual`` may be arrays or connection fields (evaluated at ``theta``).
    """
    a = _eval_connection(conn, theta)
    b = _eval_connection(dual, theta)
    if a.shape != b.shape:
        raise ShapeError(f"connections differ in shape: {a.shape} vs {b.shape}")
    return 0.5 * (1.0 + alpha) * b + 0.5 * (1.0 - alpha) * a


def alpha_connection_field(conn, dual, alpha: float) -> ConnectionField:
    return lambda theta: alpha_connection(conn, dual, alpha, theta)


# ---------------------------------------------------------------------------
# volumes and submanifolds
# ---------------------------------------------------------------------------

def volume_ratio(scalar: float, n: int, r: float) -> float:
    """Second-order geodesic-ball volume ratio ``1 - R r^2 / (6 (n + 2))``."""
    if r <= 0 or n < 2:
        raise ValueError("volume_ratio needs r > 0 and n >= 2")
    return 1.0 - scalar * r * r / (6.0 * (n + 2))


def euclidean_ball_volume(n: int, r: float) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * r**n


def mc_ball_volume_ratio(volume_density, distance, center, r, half_widths, n_samples, rng, chunk=200_000):
    """Monte-Carlo volume of a geodesic ball divided by the Euclidean ball volume.

    Points are drawn uniformly from the coordinate box ``center +/- half_widths``
    (which must contain the ball). ``volume_density(points)`` returns
    ``sqrt(det g)`` and ``distance(points, center)`` the geodesic distance,
    both vectorised over rows. Returns ``(ratio, standard_error)``.
    """
    center = _point(center)
    half_widths = np.broadcast_to(np.asarray(half_widths, float), center.shape)
    box = float(np.prod(2.0 * half_widths))
    total = total_sq = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        pts = center + rng.uniform(-1.0, 1.0, size=(m, center.size)) * half_widths
        vals = np.where(distance(pts, center) < r, volume_density(pts), 0.0)
        total += vals.sum()
        total_sq += (vals * vals).sum()
        done += m
    mean = total / n_samples
    var = max(total_sq / n_samples - mean * mean, 0.0)
    scale = box / euclidean_ball_volume(center.size, r)
    return mean * scale, math.sqrt(var / n_samples) * scale


def induced_metric(metric: MetricField, mask, theta) -> np.ndarray:
    """Metric restricted to the kept coordinate directions (a principal submatrix)."""
    kept = np.asarray(getattr(mask, "kept", mask), dtype=bool).ravel()
    if not kept.any():
        raise EmptyMaskError("mask keeps no coordinates")
    g = np.asarray(metric(_point(theta)), dtype=np.float64)
    if kept.size != g.shape[0]:
        raise ShapeError(f"mask length {kept.size} does not match metric dimension {g.shape[0]}")
    return g[np.ix_(kept, kept)]


# ---------------------------------------------------------------------------
# second fundamental form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SecondFundamentalForm:
    """Normal part of the ambient Hessian of an embedding.

    ``L[a, i, j]`` is the ambient component ``a`` of ``L(d_i, d_j)``;
    ``eigenvalues`` are those of ``g^{-1/2} (sum_a L^a L^a^T)^{1/2} g^{-1/2}``
    and ``norm`` is their Euclidean length.
    """

    L: np.ndarray
    norm: float
    eigenvalues: np.ndarray
    metric: np.ndarray
    jacobian: np.ndarray


def embedding_jacobian(embed, theta, h=None) -> np.ndarray:
    """``J[a, i] = d embed_a / d theta_i``."""
    return partials(lambda t: np.atleast_1d(embed(t)), theta, h).T


def embedding_hessian(embed, theta, h=None) -> np.ndarray:
    """``H[a, i, j] = d^2 embed_a / d theta_i d theta_j`` (four-point stencil, Richardson)."""
    theta = _point(theta)
    steps = _steps(theta, h)
    n = theta.size

    def f(t):
        return _checked(np.atleast_1d(embed(t)), "embedding")

    def stencil(scale):
        out = None
        for i in range(n):
            for j in range(i, n):
                hi, hj = scale * steps[i], scale * steps[j]
                ei, ej = np.zeros(n), np.zeros(n)
                ei[i], ej[j] = hi, hj
                val = (f(theta + ei + ej) - f(theta + ei - ej) - f(theta - ei + ej) + f(theta - ei - ej)) / (
                    4.0 * hi * hj
                )
                if out is None:
                    out = np.zeros((val.size, n, n))
                out[:, i, j] = out[:, j, i] = val
        return out

    coarse, fine = stencil(1.0), stencil(0.5)
    hess = (4.0 * fine - coarse) / 3.0
    # entries below the stencil's rounding error are indistinguishable from zero;
    # flushing them makes affine embeddings come out exactly flat
    fine_steps = 0.5 * steps
    scale = max(np.abs(f(theta)).max(initial=0.0), np.finfo(float).tiny)
    floor = 64.0 * np.finfo(float).eps * scale / np.outer(fine_steps, fine_steps)
    return np.where(np.abs(hess) <= floor, 0.0, hess)


def second_fundamental_form(embed, theta, h=None, rank_rtol=1e-10) -> SecondFundamentalForm:
    jac = embedding_jacobian(embed, theta, h)
    s = np.linalg.svd(jac, compute_uv=False)
    if s.size < jac.shape[1] or s[0] == 0.0 or s[-1] <= rank_rtol * s[0]:
        raise DegenerateChartError("embedding Jacobian is not of full column rank")
    hess = embedding_hessian(embed, theta, h)
    q, _ = np.linalg.qr(jac)
    normal = hess - np.einsum("ab,bij->aij", q @ q.T, hess)
    g = jac.T @ jac
    gram = np.einsum("aik,ajk->ij", normal, normal)
    shape_op = sym_sqrt(gram)
    g_isqrt = sym_sqrt(g, inverse=True)
    normalized = g_isqrt @ shape_op @ g_isqrt
    eig = sym_eig(0.5 * (normalized + normalized.T)).eigenvalues
    return SecondFundamentalForm(normal, float(np.linalg.norm(eig)), eig, g, jac)
