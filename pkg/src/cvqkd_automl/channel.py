"""Gaussian loss + excess-noise channel for the QPSK constellation.

The channel maps a coherent input ``|alpha>`` to a displaced thermal state
with displacement ``sqrt(eta) * alpha`` and thermal photon number
``eta * xi / 2``.  Excess noise ``xi`` is referenced to the channel input,
in shot-noise units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import NumericalFailure
from .fock import coherent_overlap

N_STATES = 4
N_FEATURES = 29
QUADRATURE_TOL = 1e-10

OFFDIAG_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
MOMENT_NAMES = ("q", "p", "n", "d")


def feature_names() -> list[str]:
    names = [f"p{k}_{o}" for o in MOMENT_NAMES for k in range(N_STATES)]
    for i, j in OFFDIAG_PAIRS:
        names += [f"re_gram_{i}{j}", f"im_gram_{i}{j}"]
    names.append("xi")
    return names


@dataclass(frozen=True)
class ProtocolParams:
    amplitude: float
    distance_km: float
    excess_noise: float
    attenuation_db_per_km: float = 0.2
    reconciliation_eff: float = 0.95
    postselection: float = 0.0
    probs: tuple = field(default=(0.25, 0.25, 0.25, 0.25))

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")
        if self.distance_km < 0:
            raise ValueError(f"distance must be non-negative, got {self.distance_km}")
        if self.excess_noise < 0:
            raise ValueError(f"excess noise must be non-negative, got {self.excess_noise}")
        if not 0 < self.reconciliation_eff <= 1:
            raise ValueError(f"reconciliation efficiency must lie in (0, 1], got {self.reconciliation_eff}")
        if self.postselection != 0:
            raise ValueError("only postselection Delta = 0 is supported")
        probs = tuple(float(p) for p in self.probs)
        if len(probs) != N_STATES or min(probs) < 0 or abs(sum(probs) - 1) > 1e-12:
            raise ValueError(f"probs must be 4 non-negative reals summing to 1, got {self.probs}")
        object.__setattr__(self, "probs", probs)

    @property
    def eta(self) -> float:
        return transmittance(self.distance_km, self.attenuation_db_per_km)

    @property
    def thermal_photons(self) -> float:
        return self.eta * self.excess_noise / 2

    def alphas(self) -> np.ndarray:
        return qpsk_alphas(self.amplitude)


@dataclass(frozen=True)
class MomentSet:
    mean_q: np.ndarray
    mean_p: np.ndarray
    mean_n: np.ndarray
    mean_d: np.ndarray

    def as_matrix(self) -> np.ndarray:
        """Rows q, p, n, d; columns k = 0..3."""
        return np.vstack([self.mean_q, self.mean_p, self.mean_n, self.mean_d])


def qpsk_alphas(amplitude: float) -> np.ndarray:
    k = np.arange(N_STATES)
    return amplitude * np.exp(1j * (2 * k * np.pi / 4 + np.pi / 4))


def transmittance(distance_km: float, attenuation_db_per_km: float = 0.2) -> float:
    if distance_km < 0:
        raise ValueError(f"distance must be non-negative, got {distance_km}")
    return 10.0 ** (-attenuation_db_per_km * distance_km / 10.0)


def simulate_moments(params: ProtocolParams) -> MomentSet:
    eta = params.eta
    alphas = params.alphas()
    nbar = params.thermal_photons
    return MomentSet(
        mean_q=math.sqrt(2 * eta) * alphas.real,
        mean_p=math.sqrt(2 * eta) * alphas.imag,
        mean_n=eta * np.abs(alphas) ** 2 + nbar,
        mean_d=2 * eta * (alphas.real**2 - alphas.imag**2),
    )


def gram_matrix(params: ProtocolParams) -> np.ndarray:
    """Alice's reduced state: entry (i, j) is ``sqrt(p_i p_j) <alpha_j|alpha_i>``."""
    alphas = params.alphas()
    sp = np.sqrt(np.asarray(params.probs))
    G = np.empty((N_STATES, N_STATES), dtype=complex)
    for i in range(N_STATES):
        for j in range(N_STATES):
            G[i, j] = sp[i] * sp[j] * coherent_overlap(alphas[i], alphas[j])
    return G


def _wedge_probability(center: complex, width: float, z: int) -> tuple[float, float]:
    """Mass of an isotropic Gaussian (variance ``width/2`` per axis) in wedge ``z``."""
    norm = 1.0 / (math.pi * width)
    r_max = abs(center) + 12.0 * math.sqrt(width)

    def integrand(r, theta):
        dx = r * math.cos(theta) - center.real
        dy = r * math.sin(theta) - center.imag
        return norm * math.exp(-(dx * dx + dy * dy) / width) * r

    return integrate.dblquad(
        integrand, z * math.pi / 2, (z + 1) * math.pi / 2, 0.0, r_max,
        epsabs=QUADRATURE_TOL / 4, epsrel=0.0,
    )


def conditional_distribution(params: ProtocolParams) -> np.ndarray:
    """Heterodyne outcome distribution ``P[x, z] = P(z | x)`` over quadrant wedges.

    Wedge ``z`` covers phases ``[z pi/2, (z+1) pi/2)`` and so contains the
    phase of ``alpha_z``.  Only the ``x = 0`` row is integrated; the others
    follow from the pi/2 rotation symmetry of constellation and wedges.
    """
    width = 1.0 + params.thermal_photons
    center = complex(math.sqrt(params.eta) * params.alphas()[0])
    row = np.empty(N_STATES)
    worst = 0.0
    for z in range(N_STATES):
        row[z], err = _wedge_probability(center, width, z)
        worst = max(worst, err)
    if worst > QUADRATURE_TOL or abs(row.sum() - 1) > 1e-9:
        raise NumericalFailure(
            f"wedge quadrature did not converge (error estimate {worst:.2e}, row sum {row.sum():.12f})",
            achieved=worst,
        )
    return np.array([np.roll(row, x) for x in range(N_STATES)])


def _entropy_bits(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def error_correction_leakage(P: np.ndarray, probs, beta: float) -> float:
    """``H(Z) - beta * I(X;Z)`` in bits."""
    P = np.asarray(P, dtype=float)
    probs = np.asarray(probs, dtype=float)
    pz = probs @ P
    h_z = _entropy_bits(pz)
    h_z_given_x = sum(px * _entropy_bits(row) for px, row in zip(probs, P))
    return h_z - beta * (h_z - h_z_given_x)


def assemble_features(moments: MomentSet, gram: np.ndarray, xi: float, probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    values = (moments.as_matrix() * probs).ravel()
    offdiag = []
    for i, j in OFFDIAG_PAIRS:
        offdiag += [gram[i, j].real, gram[i, j].imag]
    return np.concatenate([values, offdiag, [xi]])


def features_for(params: ProtocolParams) -> np.ndarray:
    return assemble_features(simulate_moments(params), gram_matrix(params), params.excess_noise, params.probs)
