"""Truncated Fock-space numerics.

Every matrix here lives in the photon-number basis ``|0>, ..., |N_c>``.
Bipartite operators use A-major ordering: index ``(k, m)`` of
``A (x) B`` maps to ``k * dim_B + m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NotHermitianError

DEFAULT_LOG_FLOOR = 1e-12
DIM_A = 4


@dataclass(frozen=True)
class FockSpace:
    cutoff: int

    def __post_init__(self):
        if int(self.cutoff) != self.cutoff or self.cutoff < 1:
            raise ValueError(f"cutoff must be an integer >= 1, got {self.cutoff!r}")

    @property
    def dim(self) -> int:
        return self.cutoff + 1


@dataclass(frozen=True)
class OperatorSet:
    a: np.ndarray
    q: np.ndarray
    p: np.ndarray
    n: np.ndarray
    d: np.ndarray


@dataclass(frozen=True)
class CoherentState:
    amplitude: complex
    vec: np.ndarray

    @property
    def norm_deficit(self) -> float:
        """Probability mass lost above the cutoff."""
        return float(1.0 - np.vdot(self.vec, self.vec).real)


def annihilation(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1).astype(complex)


def build_operator_set(space: FockSpace) -> OperatorSet:
    """Quadrature operators with vacuum variance 1/2.

    ``q = (a + a^dag)/sqrt(2)``, ``p = i(a^dag - a)/sqrt(2)``, ``n = a^dag a``
    and ``d = q^2 - p^2`` computed from the truncated ``q`` and ``p``.
    """
    a = annihilation(space.dim)
    ad = a.conj().T
    q = (a + ad) / math.sqrt(2)
    p = 1j * (ad - a) / math.sqrt(2)
    n = ad @ a
    d = q @ q - p @ p
    return OperatorSet(a=a, q=q, p=p, n=n, d=d)


def coherent_vector(space: FockSpace, alpha: complex) -> CoherentState:
    """Truncated coherent state; deliberately not renormalized."""
    alpha = complex(alpha)
    vec = np.empty(space.dim, dtype=complex)
    vec[0] = math.exp(-abs(alpha) ** 2 / 2)
    for m in range(1, space.dim):
        vec[m] = vec[m - 1] * alpha / math.sqrt(m)
    return CoherentState(amplitude=alpha, vec=vec)


def coherent_overlap(alpha: complex, beta: complex) -> complex:
    """``<beta|alpha>`` in closed form (no truncation)."""
    alpha, beta = complex(alpha), complex(beta)
    return complex(np.exp(-(abs(alpha) ** 2 + abs(beta) ** 2) / 2 + beta.conjugate() * alpha))


def check_hermitian(M: np.ndarray, tol: float = 1e-10, what: str = "matrix") -> None:
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{what} must be square, got shape {M.shape}")
    dev = np.max(np.abs(M - M.conj().T)) if M.size else 0.0
    if dev > tol:
        raise NotHermitianError(f"{what} is not Hermitian (max |M - M^dag| = {dev:.3e})")


def hermitian_log(M: np.ndarray, floor: float = DEFAULT_LOG_FLOOR) -> np.ndarray:
    """Base-2 matrix logarithm with eigenvalues clamped from below at ``floor``."""
    check_hermitian(M, what="hermitian_log input")
    w, U = np.linalg.eigh(M)
    logw = np.log2(np.maximum(w, floor))
    return (U * logw) @ U.conj().T


def hermitian_sqrt(M: np.ndarray) -> tuple[np.ndarray, float]:
    """PSD square root with negative eigenvalues clamped to zero.

    Returns the root and the clamped (negative) eigenvalue mass.
    """
    check_hermitian(M, what="hermitian_sqrt input")
    w, U = np.linalg.eigh(M)
    clamped = float(-w[w < 0].sum())
    return (U * np.sqrt(np.maximum(w, 0.0))) @ U.conj().T, clamped


def basis_projector(k: int, dim: int = DIM_A) -> np.ndarray:
    if not 0 <= k < dim:
        raise ValueError(f"projector index {k} out of range 0..{dim - 1}")
    P = np.zeros((dim, dim), dtype=complex)
    P[k, k] = 1.0
    return P


def tensor_embed(k: int, O: np.ndarray, dims: tuple[int, int] | None = None) -> np.ndarray:
    """``|k><k|_A (x) O`` in A-major ordering."""
    O = np.asarray(O)
    dim_a = DIM_A if dims is None else dims[0]
    if dims is not None and O.shape != (dims[1], dims[1]):
        raise ValueError(f"operator shape {O.shape} does not match dim_B={dims[1]}")
    return np.kron(basis_projector(k, dim_a), O)


def partial_trace_B(rho: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    dim_a, dim_b = dims
    rho = np.asarray(rho)
    if rho.shape != (dim_a * dim_b, dim_a * dim_b):
        raise ValueError(f"state shape {rho.shape} does not match dims {dims}")
    return np.einsum("imjm->ij", rho.reshape(dim_a, dim_b, dim_a, dim_b))
