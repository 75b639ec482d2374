"""f-means, alpha-divergences and alpha-integration of categorical distributions."""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from .errors import DomainError, NumericalError, UnsupportedError

SIMPLEX_TOL = 1e-12


def as_categorical(p, tol=SIMPLEX_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"a categorical must be a non-empty vector, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > tol:
        raise DomainError(f"not a probability vector: {p}")
    return p


def as_weights(w, n=None) -> np.ndarray:
    w = as_categorical(w)
    if n is not None and w.size != n:
        raise ValueError(f"expected {n} weights, got {w.size}")
    return w


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _exponent(alpha):
    return 0.5 * (1.0 - alpha)


def f_alpha(a, alpha: float):
    """``a ** ((1 - alpha)/2)``, or ``log a`` at ``alpha = 1``."""
    a = np.asarray(a, dtype=np.float64)
    if alpha == 1.0:
        if np.any(a <= 0):
            raise DomainError("f_alpha(alpha=1) needs a > 0")
        return np.log(a)
    if np.any(a < 0) or (_exponent(alpha) <= 0 and np.any(a == 0)):
        raise DomainError(f"f_alpha(alpha={alpha}) needs a > 0")
    return a ** _exponent(alpha)


def f_alpha_inv(b, alpha: float):
    b = np.asarray(b, dtype=np.float64)
    if alpha == 1.0:
        return np.exp(b)
    if np.any(b < 0) or (_exponent(alpha) < 0 and np.any(b == 0)):
        raise DomainError(f"f_alpha_inv(alpha={alpha}) is undefined for {b}")
    return b ** (1.0 / _exponent(alpha))


def f_mean(a, b, lam: float, alpha: float, normalized: bool = True):
    """Quasi-arithmetic interpolation ``f^-1((1 - lam) f(a) + lam f(b))``.

    With ``normalized=False`` the result is multiplied by ``2 ** (2 / (1 - alpha))``,
    which diverges at ``alpha = 1``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    m = f_alpha_inv((1.0 - lam) * f_alpha(a, alpha) + lam * f_alpha(b, alpha), alpha)
    if normalized:
        return m
    if alpha == 1.0:
        raise UnsupportedError("the unnormalised f-mean has no finite constant at alpha = 1")
    return 2.0 ** (2.0 / (1.0 - alpha)) * m


def _kl(p, q):
    support = p > 0
    if np.any(q[support] <= 0):
        raise DomainError("KL divergence: q vanishes where p does not")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def alpha_divergence(p, q, alpha: float) -> float:
    """Amari alpha-divergence ``4/(1-a^2) (1 - sum p^((1-a)/2) q^((1+a)/2))``.

    The limits are ``alpha = -1``: ``KL(p || q)`` and ``alpha = +1``: ``KL(q || p)``.
    """
    p, q = as_categorical(p), as_categorical(q)
    if p.shape != q.shape:
        raise ValueError("distributions differ in size")
    if alpha == -1.0:
        return _kl(p, q)
    if alpha == 1.0:
        return _kl(q, p)
    bp, bq = 0.5 * (1.0 - alpha), 0.5 * (1.0 + alpha)
    if (bp < 0 and np.any((p == 0) & (q > 0))) or (bq < 0 and np.any((q == 0) & (p > 0))):
        raise DomainError(f"alpha={alpha}: supports of p and q are incompatible")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where((p > 0) & (q > 0), p**bp * q**bq, 0.0)
    return max(4.0 / (1.0 - alpha * alpha) * (1.0 - terms.sum()), 0.0)


def alpha_integrate(dists, w=None, alpha: float = 1.0) -> np.ndarray:
    """Weighted alpha-integration of categoricals, renormalised onto the simplex.

    Computes ``f^-1(sum_k w_k f(p_k))`` per class and rescales to sum to one,
    which is the minimiser of ``sum_k w_k D_alpha[p_k || q]`` over the simplex.
    ``alpha = -1`` is the arithmetic mixture, ``alpha = 1`` the normalised
    geometric mean.
    """
    dists = np.array([as_categorical(p) for p in dists])
    w = uniform_weights(len(dists)) if w is None else as_weights(w, len(dists))
    if np.count_nonzero(w) == 1:
        return dists[np.flatnonzero(w)[0]].copy()
    if alpha == 1.0:
        if np.any(dists[w > 0] <= 0):
            raise DomainError("geometric integration needs strictly positive probabilities")
        logm = w[w > 0] @ np.log(dists[w > 0])
        m = np.exp(logm - logm.max())
    else:
        beta = _exponent(alpha)
        active = dists[w > 0]
        if beta < 0 and np.any(active <= 0):
            raise DomainError(f"alpha={alpha} integration needs strictly positive probabilities")
        m = (w[w > 0] @ active**beta) ** (1.0 / beta)
    total = m.sum()
    if not np.isfinite(total) or total <= 0:
        raise NumericalError("alpha integration produced no mass")
    return m / total


def _objective(q, dists, w, alpha):
    """``sum_k w_k D_alpha[p_k || q]`` and its gradient in q."""
    if alpha == -1.0:
        val = sum(wk * _kl(p, q) for wk, p in zip(w, dists))
        grad = -(w @ dists) / q
    elif alpha == 1.0:
        logq = np.log(q)
        val = sum(wk * float(q @ (logq - np.log(p))) for wk, p in zip(w, dists))
        grad = logq + 1.0 - w @ np.log(dists)
    else:
        bp, bq = 0.5 * (1.0 - alpha), 0.5 * (1.0 + alpha)
        s = w @ dists**bp
        c = 4.0 / (1.0 - alpha * alpha)
        val = c * (1.0 - float(s @ q**bq))
        grad = -c * bq * s * q ** (bq - 1.0)
    return val, grad


def argmin_weighted_divergence(dists, w=None, alpha: float = 1.0, tol: float = 1e-12) -> np.ndarray:
    """Numerically minimise ``sum_k w_k D_alpha[p_k || q]`` over the simplex.

    Independent check on :func:`alpha_integrate`: BFGS on softmax logits,
    started from the uniform distribution, touching only the divergence.
    """
    dists = np.array([as_categorical(p) for p in dists])
    w = uniform_weights(len(dists)) if w is None else as_weights(w, len(dists))
    k = dists.shape[1]
    if alpha == 1.0 and np.any(dists[w > 0] <= 0):
        raise DomainError("alpha=1 objective needs strictly positive p_k")

    def fun(z):
        z = z - z.max()
        q = np.exp(z)
        q /= q.sum()
        q = np.maximum(q, 1e-300)
        val, g = _objective(q, dists, w, alpha)
        return val, q * (g - q @ g)

    res = minimize(fun, np.zeros(k), jac=True, method="BFGS", options={"gtol": tol, "maxiter": 10_000})
    _, grad = fun(res.x)
    if not np.all(np.isfinite(res.x)) or np.abs(grad).max() > 1e-6:
        raise NumericalError(f"divergence minimisation did not converge: {res.message}")
    z = res.x - res.x.max()
    q = np.exp(z)
    return q / q.sum()


def categorical_from_natural(eta) -> np.ndarray:
    """Categorical with log-odds ``eta`` against the last class."""
    z = np.append(np.asarray(eta, dtype=np.float64), 0.0)
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()


def natural_from_categorical(p) -> np.ndarray:
    p = as_categorical(p)
    if np.any(p <= 0):
        raise DomainError("natural parameters need strictly positive probabilities")
    return np.log(p[:-1]) - np.log(p[-1])
