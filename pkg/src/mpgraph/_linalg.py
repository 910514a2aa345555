"""Small dense linear-algebra helpers shared by distributions and rules.

All matrices handled here are tiny (state dimensions of a few), so the
eigendecomposition-based routines favour determinism and robustness over
speed.
"""

from __future__ import annotations

import numpy as np

EIG_FLOOR = 1e-12


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    return v


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    return m


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def is_symmetric(m: np.ndarray, tol: float = 1e-12) -> bool:
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    return bool(np.max(np.abs(m - m.T)) <= tol * scale) if m.size else True


def _eigh_2x2(a: float, b: float, c: float):
    # analytic symmetric 2x2 eigendecomposition (ascending eigenvalues);
    # the small root comes from the determinant identity lo*hi = det, since
    # half -+ r cancels catastrophically for extreme eigenvalue ratios
    half = 0.5 * (a + c)
    r = np.hypot(0.5 * (a - c), b)
    det = a * c - b * b
    if half >= 0.0:
        hi = half + r
        lo = det / hi if hi != 0.0 else half - r
    else:
        lo = half - r
        hi = det / lo if lo != 0.0 else half + r
    if r == 0.0:
        return np.array([lo, hi]), np.eye(2)
    if b == 0.0:
        q = np.eye(2) if c >= a else np.array([[0.0, 1.0], [1.0, 0.0]])
        return np.array([lo, hi]), q
    # top-eigenvector via whichever residual avoids cancellation:
    # hi - c = (a-c)/2 + r and hi - a = (c-a)/2 + r; one of the two adds
    # same-sign terms
    if a >= c:
        v0, v1 = hi - c, b
    else:
        v0, v1 = b, hi - a
    norm = np.hypot(v0, v1)
    u0, u1 = v0 / norm, v1 / norm
    return np.array([lo, hi]), np.array([[-u1, u0], [u0, u1]])


def floored_eigh(m: np.ndarray, floor: float = EIG_FLOOR):
    """Eigendecomposition of a symmetric matrix with eigenvalues clipped at `floor`."""
    n = m.shape[0]
    if n == 1:
        return np.array([max(float(m[0, 0]), floor)]), np.ones((1, 1))
    if n == 2:
        w, q = _eigh_2x2(float(m[0, 0]), 0.5 * (float(m[0, 1]) + float(m[1, 0])), float(m[1, 1]))
        return np.maximum(w, floor), q
    w, q = np.linalg.eigh(symmetrize(m))
    return np.maximum(w, floor), q


def sym_eigvals(m: np.ndarray) -> np.ndarray:
    n = m.shape[0]
    if n == 1:
        return np.array([float(m[0, 0])])
    if n == 2:
        return _eigh_2x2(float(m[0, 0]), 0.5 * (float(m[0, 1]) + float(m[1, 0])), float(m[1, 1]))[0]
    return np.linalg.eigvalsh(symmetrize(m))


def spd_inverse(m: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    w, q = floored_eigh(m, floor)
    return symmetrize((q / w) @ q.T)


def spd_solve(m: np.ndarray, rhs: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    w, q = floored_eigh(m, floor)
    return (q / w) @ (q.T @ rhs)


def spd_logdet(m: np.ndarray, floor: float = EIG_FLOOR) -> float:
    w, _ = floored_eigh(m, floor)
    return float(np.sum(np.log(w)))


def check_spd(m: np.ndarray, name: str, strict: bool = False, tol: float = 1e-12):
    """Validate symmetry and (semi-)definiteness; returns the symmetrized matrix."""
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not is_symmetric(m, tol):
        raise ValueError(f"{name} is not symmetric within {tol}")
    w = sym_eigvals(m)
    bound = -tol * max(1.0, float(np.max(np.abs(w))))
    if strict:
        if np.any(w <= 0.0):
            raise ValueError(f"{name} must be positive definite (min eig {w.min():.3e})")
    elif np.any(w < bound):
        raise ValueError(f"{name} must be positive semi-definite (min eig {w.min():.3e})")
    return symmetrize(m)
