"""Heterodyne key map: wedge POVM, postprocessing map G and pinching Z."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .fock import DIM_A, FockSpace, hermitian_sqrt

N_KEY = 4


def region_operator(space: FockSpace, z: int) -> np.ndarray:
    """``R_z = (1/pi) * integral over wedge z of |zeta><zeta| d^2 zeta``.

    Closed form: ``<m|R_z|n> = Gamma((m+n)/2 + 1) / (2 pi sqrt(m! n!))
    * integral_{z pi/2}^{(z+1) pi/2} exp(i (m - n) theta) d theta``.
    """
    if not 0 <= z < N_KEY:
        raise ValueError(f"key value {z} out of range 0..{N_KEY - 1}")
    m = np.arange(space.dim)
    M, N = np.meshgrid(m, m, indexing="ij")
    radial = np.exp(gammaln((M + N) / 2 + 1) - 0.5 * (gammaln(M + 1) + gammaln(N + 1))) / (2 * math.pi)
    lo, hi = z * math.pi / 2, (z + 1) * math.pi / 2
    k = (M - N).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        angular = np.where(
            k == 0,
            hi - lo,
            (np.exp(1j * k * hi) - np.exp(1j * k * lo)) / (1j * np.where(k == 0, 1, k)),
        )
    R = radial * angular
    return (R + R.conj().T) / 2


@dataclass(frozen=True)
class RegionOperators:
    R: tuple

    @classmethod
    def for_space(cls, space: FockSpace) -> "RegionOperators":
        return cls(R=tuple(region_operator(space, z) for z in range(N_KEY)))

    @property
    def dim_b(self) -> int:
        return self.R[0].shape[0]


@dataclass(frozen=True)
class PostprocessingMap:
    """Kraus operator ``K = sum_z |z>_R (x) I_A (x) sqrt(R_z)``.

    ``blocks[z]`` is ``I_A (x) sqrt(R_z)``; ``K`` stacks them R-major.
    """

    blocks: tuple
    clamped_mass: float

    @property
    def K(self) -> np.ndarray:
        return np.vstack(self.blocks)

    @property
    def dim_in(self) -> int:
        return self.blocks[0].shape[1]


def build_postprocessing_map(regions: RegionOperators) -> PostprocessingMap:
    eye_a = np.eye(DIM_A)
    blocks, clamped = [], 0.0
    for R in regions.R:
        root, lost = hermitian_sqrt(R)
        clamped += lost
        blocks.append(np.kron(eye_a, root))
    return PostprocessingMap(blocks=tuple(blocks), clamped_mass=clamped)


def apply_G(gmap: PostprocessingMap, rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho)
    if rho.shape != (gmap.dim_in, gmap.dim_in):
        raise ValueError(f"state shape {rho.shape} does not match map input dimension {gmap.dim_in}")
    K = gmap.K
    return K @ rho @ K.conj().T


def pinching_Z(sigma: np.ndarray, n_key: int = N_KEY) -> np.ndarray:
    sigma = np.asarray(sigma)
    n = sigma.shape[0] // n_key
    out = np.zeros_like(sigma)
    for z in range(n_key):
        s = slice(z * n, (z + 1) * n)
        out[s, s] = sigma[s, s]
    return out
