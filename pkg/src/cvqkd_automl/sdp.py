"""Small dense complex SDP solver with certified dual bounds.

Solves the primal/dual pair

    minimize   Re Tr(C X)        maximize   b . y
    s.t.       Re Tr(A_i X) = b_i   s.t.    C - sum_i y_i A_i = Z >= 0
               X >= 0

over complex Hermitian ``X`` with an infeasible-start primal-dual
path-following method (HKM search direction, Mehrotra predictor-corrector).
Linearly dependent constraints are removed up front by an SVD of the
constraint map, which also orthonormalizes what remains.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, NumericalFailure

log = logging.getLogger(__name__)


@dataclass
class SDPResult:
    X: np.ndarray
    primal_value: float
    dual_value: float
    raw_dual_value: float
    y: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float

    @property
    def gap(self) -> float:
        return self.primal_value - self.dual_value


def _herm(M):
    return (M + M.conj().T) / 2


class AffineSpectrahedron:
    """The set ``{X >= 0 : Re Tr(A_i X) = b_i}`` in reduced orthonormal form."""

    def __init__(self, observables, targets, rank_tol=1e-10, consistency_tol=1e-9):
        A = np.asarray(observables, dtype=complex)
        b = np.asarray(targets, dtype=float)
        self.n = A.shape[1]
        m = A.shape[0]
        # Re Tr(A_i X) = <vec(A_i^*), vec(X)> with A_i Hermitian.
        Amat = np.hstack([A.reshape(m, -1).real, A.reshape(m, -1).imag])
        U, s, Vt = np.linalg.svd(Amat, full_matrices=False)
        keep = s > rank_tol * s[0]
        U, s, Vt = U[:, keep], s[keep], Vt[keep]
        inconsistency = np.linalg.norm(b - U @ (U.T @ b))
        if inconsistency > consistency_tol:
            raise InfeasibleError(
                f"affine constraints are inconsistent (residual {inconsistency:.2e})",
                certificate=inconsistency,
            )
        nn = self.n * self.n
        self.A = (Vt[:, :nn] + 1j * Vt[:, nn:]).reshape(-1, self.n, self.n)
        self.A = (self.A + self.A.conj().transpose(0, 2, 1)) / 2
        self.b = (U.T @ b) / s
        self.m = self.A.shape[0]
        self._flat = self.A.reshape(self.m, -1)
        self._flat_t = np.ascontiguousarray(self.A.transpose(0, 2, 1).reshape(self.m, -1))
        self._orig = (Amat, b)
        # Express the identity in the constraint span if possible: then the
        # trace is fixed on the feasible set and any y certifies a bound.
        w = self.op(np.eye(self.n))
        resid = np.eye(self.n) - self.adj(w)
        self.trace_coeffs = w if np.max(np.abs(resid)) < 1e-9 else None

    def op(self, X):
        # Tr(A_i X) = sum_ab A_i[b, a] X[a, b]
        return (self._flat_t @ X.ravel()).real

    def adj(self, y):
        return (y @ self._flat).reshape(self.n, self.n)

    def residual(self, X) -> float:
        """Max violation of the original (unreduced) constraints."""
        Amat, b = self._orig
        x = np.concatenate([X.real.ravel(), X.imag.ravel()])
        return float(np.max(np.abs(Amat @ x - b)))

    @property
    def fixed_trace(self) -> float | None:
        if self.trace_coeffs is None:
            return None
        return float(self.b @ self.trace_coeffs)

    def certified_bound(self, C, y) -> float:
        """Lower bound on ``min Re Tr(C X)`` valid for every feasible ``X``."""
        S = _herm(C - self.adj(y))
        lam = np.linalg.eigvalsh(S)[0]
        if self.trace_coeffs is not None:
            return float(self.b @ y + lam * self.fixed_trace)
        return float(self.b @ y) if lam >= 0 else -np.inf


def _inv_chol(X):
    """``L^{-1}`` for the Cholesky factor ``X = L L^dag``."""
    return np.linalg.inv(np.linalg.cholesky(X))


def _max_step(Linv, dX):
    """Largest ``a`` with ``X + a dX >= 0`` given ``Linv`` from ``_inv_chol(X)``."""
    lam = np.linalg.eigvalsh(Linv @ dX @ Linv.conj().T)[0]
    return np.inf if lam >= 0 else -1.0 / lam


def solve_sdp(
    C, feasible_set: AffineSpectrahedron, feas_tol=1e-8, gap_tol=1e-7, max_iter=100, certify=True
) -> SDPResult:
    fs = feasible_set
    n, A, b = fs.n, fs.A, fs.b
    C = _herm(np.asarray(C, dtype=complex))
    Cnorm = np.linalg.norm(C)
    scale = max(1.0, Cnorm)
    X = np.eye(n, dtype=complex)
    if fs.fixed_trace is not None and fs.fixed_trace > 0:
        X *= fs.fixed_trace / n
    Z = np.eye(n, dtype=complex) * scale
    y = np.zeros(fs.m)
    prev = None

    for it in range(1, max_iter + 1):
        Rp = b - fs.op(X)
        Rd = _herm(C - fs.adj(y) - Z)
        mu = np.vdot(X, Z).real / n
        pobj = np.vdot(C, X).real
        dobj = b @ y
        pinf = np.linalg.norm(Rp) / (1 + np.linalg.norm(b))
        dinf = np.linalg.norm(Rd) / (1 + Cnorm)
        # One-sided gap test: a slightly negative raw gap only reflects
        # rounding-level primal infeasibility; the certified bound is
        # recomputed from y alone below.
        if pinf < feas_tol * 0.1 and dinf < feas_tol * 0.1 and pobj - dobj < gap_tol * 0.25 and mu * n < gap_tol * 0.25:
            break

        try:
            LXinv = _inv_chol(X)
            LZinv = _inv_chol(Z)
        except np.linalg.LinAlgError:
            if prev is None:
                raise NumericalFailure("interior-point iterate lost positive definiteness") from None
            X, y, Z = prev
            log.debug("iterate lost definiteness at %d; keeping previous point", it)
            break
        prev = (X, y, Z)
        Zinv = LZinv.conj().T @ LZinv
        # P_j = X A_j Z^{-1}, batched as two large products
        Y = (A.reshape(fs.m * n, n) @ Zinv).reshape(fs.m, n, n)
        P = (X @ Y.transpose(1, 0, 2).reshape(n, fs.m * n)).reshape(n, fs.m, n).transpose(1, 0, 2)
        M = (fs._flat_t @ P.reshape(fs.m, -1).T).real
        M = (M + M.T) / 2
        try:
            Mfac = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            Mfac = None

        def solve_M(r):
            if Mfac is not None:
                return np.linalg.solve(Mfac.T.conj(), np.linalg.solve(Mfac, r))
            return np.linalg.lstsq(M, r, rcond=None)[0]

        XRdZinv = X @ Rd @ Zinv

        def direction(Rc):
            rhs = Rp - fs.op(Rc - XRdZinv)
            dy = solve_M(rhs)
            dZ = _herm(Rd - fs.adj(dy))
            dX = _herm(Rc - X @ dZ @ Zinv)
            return dX, dy, dZ

        # predictor
        dXa, dya, dZa = direction(-X)
        ap = min(1.0, _max_step(LXinv, dXa))
        ad = min(1.0, _max_step(LZinv, dZa))
        mu_aff = np.vdot(X + ap * dXa, Z + ad * dZa).real / n
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3)) if mu > 0 else 0.0
        # corrector
        Rc = sigma * mu * Zinv - X - dXa @ dZa @ Zinv
        dX, dy, dZ = direction(Rc)
        tau = 0.98 if it < 5 else 0.995
        ap = min(1.0, tau * _max_step(LXinv, dX))
        ad = min(1.0, tau * _max_step(LZinv, dZ))
        if min(ap, ad) < 0.2:
            # The second-order term can pin an off-center iterate against the
            # boundary; try a plain direction with at least moderate centering.
            dX2, dy2, dZ2 = direction(max(sigma, 0.3) * mu * Zinv - X)
            ap2 = min(1.0, tau * _max_step(LXinv, dX2))
            ad2 = min(1.0, tau * _max_step(LZinv, dZ2))
            if min(ap2, ad2) > min(ap, ad):
                dX, dy, dZ, ap, ad = dX2, dy2, dZ2, ap2, ad2
        X = X + ap * dX
        y = y + ad * dy
        Z = Z + ad * dZ
        log.debug("it %d pinf %.2e dinf %.2e gap %.2e mu %.2e steps %.3f %.3f", it, pinf, dinf, pobj - dobj, mu, ap, ad)
        if not np.all(np.isfinite(X)) or np.linalg.norm(X) > 1e12:
            raise InfeasibleError("primal iterates diverged; constraint set appears empty")
    else:
        pobj = np.vdot(C, X).real
        raise NumericalFailure(
            f"SDP did not converge in {max_iter} iterations (gap {pobj - b @ y:.2e})",
            achieved=pobj - b @ y,
        )

    X = _herm(X)
    pobj = np.vdot(C, X).real
    cert = fs.certified_bound(C, y) if certify else float(b @ y)
    if pobj - cert > gap_tol:
        raise NumericalFailure(
            f"certified SDP gap {pobj - cert:.2e} exceeds tolerance {gap_tol:.1e}", achieved=pobj - cert
        )
    return SDPResult(
        X=X,
        primal_value=float(pobj),
        dual_value=cert,
        raw_dual_value=float(b @ y),
        y=y,
        iterations=it,
        primal_residual=fs.residual(X),
        dual_residual=float(dinf),
    )


def max_min_eigenvalue(feasible_set: AffineSpectrahedron, feas_tol=1e-8, gap_tol=1e-7):
    """Find the feasible point whose smallest eigenvalue is largest.

    Requires a fixed trace ``tr``.  With ``rho = X + t I`` and
    ``t = (tr - Tr X) / n`` the problem becomes a standard-form SDP in
    ``X >= 0`` minimizing ``Tr X``.  Returns ``(rho, t, t_upper)`` where
    ``t_upper`` bounds the optimum from above via the dual.
    """
    fs = feasible_set
    tr = fs.fixed_trace
    if tr is None:
        raise ValueError("phase-one solve needs a trace-fixing constraint")
    n = fs.n
    eye = np.eye(n)
    trA = np.einsum("kaa->k", fs.A).real
    shifted = fs.A - (trA / n)[:, None, None] * eye[None]
    targets = fs.b - trA * tr / n
    phase1 = AffineSpectrahedron(shifted, targets)
    res = solve_sdp(eye, phase1, feas_tol=feas_tol, gap_tol=gap_tol, certify=False)
    t = (tr - res.primal_value) / n
    t_upper = (tr - res.dual_value) / n
    rho = _herm(res.X + t * eye)
    return rho, float(t), float(t_upper)
