"""Dense linear algebra, seeded randomness and finite differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError

# Hard cap on the number of entries of a dense product we are willing to build.
MAX_DENSE_ENTRIES = 2**31


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

Rng = np.random.Generator


def make_rng(seed: int, *keys: int) -> Rng:
    """Return a PCG64 generator for ``seed``, optionally split by integer keys.

    The same ``(seed, *keys)`` tuple always yields the same stream, independent
    of how many other streams were created before it. This is what lets trials
    run in any order (or in parallel) and still reproduce bit-for-bit.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# symmetric eigendecomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymEig:
    eigenvalues: np.ndarray  # sorted descending
    eigenvectors: np.ndarray  # columns, orthonormal

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _round_robin(m):
    """Yield the m-1 rounds of disjoint index pairs covering all pairs of range(m).

    ``m`` must be even. Standard circle-method tournament schedule.
    """
    players = list(range(m))
    for _ in range(m - 1):
        half = m // 2
        top, bottom = players[:half], players[half:][::-1]
        yield np.array(top), np.array(bottom)
        players = [players[0]] + [players[-1]] + players[1:-1]


def sym_eig(a, tol: float = 1e-14, max_sweeps: int = 60) -> SymEig:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied in round-robin order so that each round annihilates
    ``n/2`` disjoint off-diagonal entries at once, which keeps every update a
    vectorised row/column operation.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eig expects a square matrix, got shape {a.shape}")
    n = a.shape[0]
    scale = max(np.abs(a).max(initial=0.0), np.finfo(float).tiny)
    if not np.all(np.isfinite(a)):
        raise NumericalError("sym_eig: non-finite matrix entries")
    if np.abs(a - a.T).max(initial=0.0) > 1e-10 * scale:
        raise ShapeError("sym_eig: matrix is not symmetric")
    a = 0.5 * (a + a.T)
    if n == 0:
        return SymEig(np.zeros(0), np.zeros((0, 0)))

    # pad to even size with an isolated dummy index
    m = n + (n % 2)
    if m != n:
        padded = np.zeros((m, m))
        padded[:n, :n] = a
        a = padded
    v = np.eye(m)
    rounds = list(_round_robin(m))
    fro = np.linalg.norm(a)

    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * fro or off == 0.0:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            app, aqq = a[p, p], a[q, q]
            tau = (aqq - app) / (2.0 * apq)
            t = np.sign(tau) / (np.abs(tau) + np.hypot(1.0, tau))
            t[tau == 0.0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # A <- J^T A J with J = [[c, s], [-s, c]] acting on (p, q)
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
    else:
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off > 1e3 * tol * fro:
            raise NumericalError(f"sym_eig: Jacobi did not converge (off-diagonal {off:.3e})")

    w = np.diag(a)[:n]
    v = v[:n, :n]
    order = np.argsort(-w, kind="stable")
    return SymEig(w[order].copy(), v[:, order].copy())


def sym_sqrt(a, inverse: bool = False) -> np.ndarray:
    """Matrix square root (or inverse square root) of a symmetric PSD matrix."""
    eig = sym_eig(a)
    w = np.clip(eig.eigenvalues, 0.0, None)
    if inverse:
        if np.any(w <= 0.0):
            raise NumericalError("sym_sqrt: matrix is singular")
        w = 1.0 / np.sqrt(w)
    else:
        w = np.sqrt(w)
    v = eig.eigenvectors
    return (v * w) @ v.T


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def default_step(x) -> np.ndarray:
    return 1e-5 * np.maximum(1.0, np.abs(np.asarray(x, dtype=np.float64)))


def finite_diff_grad(f, x, h=None) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``h`` may be a scalar or a per-coordinate array; by default
    ``1e-5 * max(1, |x_i|)``.
    """
    x = np.array(x, dtype=np.float64).ravel()
    steps = default_step(x) if h is None else np.broadcast_to(np.asarray(h, float), x.shape)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"finite_diff_grad: non-finite value near coordinate {i}")
        grad[i] = (fp - fm) / (xp[i] - xm[i])
    return grad


def finite_diff_jacobian(f, x, h=None) -> np.ndarray:
    """Central-difference Jacobian of an array-valued function.

    Returns an array of shape ``f(x).shape + (x.size,)``.
    """
    x = np.array(x, dtype=np.float64).ravel()
    steps = default_step(x) if h is None else np.broadcast_to(np.asarray(h, float), x.shape)
    cols = []
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        fp, fm = np.asarray(f(xp), float), np.asarray(f(xm), float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericalError(f"finite_diff_jacobian: non-finite value near coordinate {i}")
        cols.append((fp - fm) / (xp[i] - xm[i]))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# Kronecker products
# ---------------------------------------------------------------------------

def kron(a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows * cols > MAX_DENSE_ENTRIES:
        raise ShapeError(f"kron: result of shape ({rows}, {cols}) is too large")
    return np.kron(a, b)


def kron_matvec(a, b, x) -> np.ndarray:
    """``kron(a, b) @ x`` without materialising the Kronecker product."""
    x = np.asarray(x, dtype=np.float64).reshape(a.shape[1], b.shape[1])
    return (a @ x @ b.T).ravel()
