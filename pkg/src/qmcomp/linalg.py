"""Hermitian eigendecomposition kernel shared by every numerical routine.

All matrix functions (square root, base-2 logarithm, support pseudo-inverse)
are routed through :func:`clamped_eigh` so that tolerance handling lives in
exactly one place.
"""

from __future__ import annotations

import numpy as np

# Eigenvalues below -NEG_EIG_TOL are treated as genuine negativity; values in
# [-NEG_EIG_TOL, 0) are rounding noise and are clamped to 0.
NEG_EIG_TOL = 1e-10
# Eigenvalues at or below SUPPORT_TOL count as kernel directions.
SUPPORT_TOL = 1e-12
# Hermiticity check tolerance for constructed operators.
HERM_TOL = 1e-12


def is_hermitian(mat: np.ndarray, tol: float = HERM_TOL) -> bool:
    """Return True when ``mat`` equals its conjugate transpose within ``tol``."""
    return bool(np.max(np.abs(mat - mat.conj().T)) <= tol)


def clamped_eigh(mat: np.ndarray, require_psd: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompose a Hermitian matrix, clamping tiny negative eigenvalues to 0.

    Returns ``(vals, vecs)`` with ``vals`` ascending.  When ``require_psd`` is
    set, an eigenvalue below ``-NEG_EIG_TOL`` raises ValueError; the clamp
    window ``[-NEG_EIG_TOL, 0)`` is silently zeroed either way.
    """
    herm = 0.5 * (mat + mat.conj().T)
    vals, vecs = np.linalg.eigh(herm)
    if require_psd and vals[0] < -NEG_EIG_TOL:
        raise ValueError(f"matrix is not positive semidefinite: min eigenvalue {vals[0]:.3e}")
    vals = np.where((vals < 0) & (vals >= -NEG_EIG_TOL), 0.0, vals)
    return vals, vecs


def spectral_apply(mat: np.ndarray, fn) -> np.ndarray:
    """Apply a scalar function to the spectrum of a Hermitian PSD matrix."""
    vals, vecs = clamped_eigh(mat, require_psd=True)
    return (vecs * fn(vals)) @ vecs.conj().T


def mat_sqrt(mat: np.ndarray) -> np.ndarray:
    """Principal square root of a PSD matrix.

    Eigenvalues below the eigh noise floor are true zeros here; clearing them
    keeps the sqrt from turning 1e-17 noise into 3e-9 error in trace norms.
    """
    vals, vecs = clamped_eigh(mat, require_psd=True)
    top = max(float(vals[-1]), 0.0)
    vals = np.where(vals > len(vals) * 1e-15 * top, vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.conj().T


def mat_log2_support(mat: np.ndarray) -> np.ndarray:
    """Base-2 logarithm on the support of a PSD matrix; kernel directions map to 0."""
    vals, vecs = clamped_eigh(mat, require_psd=True)
    logs = np.where(vals > SUPPORT_TOL, np.log2(np.maximum(vals, SUPPORT_TOL)), 0.0)
    return (vecs * logs) @ vecs.conj().T


def pinv_sqrt(mat: np.ndarray) -> np.ndarray:
    """Support pseudo-inverse square root: eigenvalues above SUPPORT_TOL invert."""
    vals, vecs = clamped_eigh(mat, require_psd=True)
    inv = np.where(vals > SUPPORT_TOL, 1.0 / np.sqrt(np.maximum(vals, SUPPORT_TOL)), 0.0)
    return (vecs * inv) @ vecs.conj().T


def support_projector(mat: np.ndarray) -> np.ndarray:
    """Orthogonal projector onto the support of a PSD matrix."""
    vals, vecs = clamped_eigh(mat, require_psd=True)
    keep = (vals > SUPPORT_TOL).astype(float)
    return (vecs * keep) @ vecs.conj().T


def kernel_mass(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Mass of ``rho`` outside the support of ``sigma``.

    Used for supp(rho) <= supp(sigma) checks with the spec'd 1e-10 tolerance.
    """
    vals, vecs = clamped_eigh(sigma, require_psd=True)
    ker = vecs[:, vals <= SUPPORT_TOL]
    if ker.shape[1] == 0:
        return 0.0
    return float(np.real(np.trace(ker.conj().T @ rho @ ker)))


def trace_norm(mat: np.ndarray) -> float:
    """Sum of singular values."""
    return float(np.sum(np.linalg.svd(mat, compute_uv=False)))
