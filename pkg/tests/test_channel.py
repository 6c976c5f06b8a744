import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvqkd_automl.channel import (
    N_FEATURES,
    ProtocolParams,
    assemble_features,
    conditional_distribution,
    error_correction_leakage,
    feature_names,
    features_for,
    gram_matrix,
    simulate_moments,
    transmittance,
)
from cvqkd_automl.fock import FockSpace, build_operator_set

from oracles import coherent_fock, displaced_thermal


def test_transmittance_examples():
    assert transmittance(0) == 1.0
    assert transmittance(50, 0.2) == pytest.approx(0.1, rel=1e-14)
    assert transmittance(200, 0.2) == pytest.approx(1e-4, rel=1e-14)
    with pytest.raises(ValueError):
        transmittance(-1)


def test_params_validation():
    with pytest.raises(ValueError):
        ProtocolParams(0.0, 10, 0.01)
    with pytest.raises(ValueError):
        ProtocolParams(0.6, -1, 0.01)
    with pytest.raises(ValueError):
        ProtocolParams(0.6, 10, -0.01)
    with pytest.raises(ValueError):
        ProtocolParams(0.6, 10, 0.01, postselection=0.1)
    with pytest.raises(ValueError):
        ProtocolParams(0.6, 10, 0.01, probs=(0.5, 0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        ProtocolParams(0.6, 10, 0.01, reconciliation_eff=1.2)


def test_moment_examples():
    m = simulate_moments(ProtocolParams(0.66, 0, 0))
    np.testing.assert_allclose(m.mean_d, 0, atol=1e-15)
    assert m.mean_q[0] == pytest.approx(0.66, abs=1e-15)
    m = simulate_moments(ProtocolParams(0.66, 50, 0.02))
    np.testing.assert_allclose(m.mean_n, 0.04456, rtol=1e-12)


def _oracle_moments(params, cutoff=30):
    ops = build_operator_set(FockSpace(cutoff))
    out = []
    for a in params.alphas():
        rho = displaced_thermal(math.sqrt(params.eta) * a, params.thermal_photons, cutoff)
        out.append([np.trace(rho @ O).real for O in (ops.q, ops.p, ops.n, ops.d)])
    return np.array(out).T


@pytest.mark.parametrize("amp,xi,L", [(0.66, 0.02, 50), (1.1, 0.05, 0), (0.3, 0.0, 200), (0.9, 0.03, 10)])
def test_moments_match_fock_oracle(amp, xi, L):
    p = ProtocolParams(amp, L, xi)
    np.testing.assert_allclose(simulate_moments(p).as_matrix(), _oracle_moments(p), atol=1e-6)


def test_gram_examples():
    G = gram_matrix(ProtocolParams(1e-8, 10, 0.01))
    np.testing.assert_allclose(G, 0.25, atol=1e-12)
    G = gram_matrix(ProtocolParams(0.66, 10, 0.01))
    np.testing.assert_allclose(np.diag(G).real, 0.25, atol=1e-15)
    # the quoted 0.10463 rounds 0.25 * exp(-0.8712) = 0.104612...
    assert abs(G[0, 2]) == pytest.approx(0.25 * math.exp(-2 * 0.4356), rel=1e-12)
    assert abs(G[0, 2]) == pytest.approx(0.10463, abs=1e-4)
    alphas = ProtocolParams(0.66, 10, 0.01).alphas()
    fock = 0.25 * np.vdot(coherent_fock(alphas[2], 40), coherent_fock(alphas[0], 40))
    assert abs(G[0, 2] - fock) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1.5), st.lists(st.floats(0.05, 1), min_size=4, max_size=4))
def test_gram_psd_unit_trace(amp, w):
    probs = tuple(np.array(w) / sum(w))
    probs = probs[:3] + (1 - sum(probs[:3]),)
    G = gram_matrix(ProtocolParams(amp, 0, 0, probs=probs))
    assert np.max(np.abs(G - G.conj().T)) < 1e-15
    assert np.linalg.eigvalsh(G)[0] >= -1e-12
    assert np.trace(G).real == pytest.approx(1.0, abs=1e-12)


def test_conditional_rows_and_symmetry():
    P = conditional_distribution(ProtocolParams(0.66, 20, 0.02))
    np.testing.assert_allclose(P.sum(axis=1), 1, atol=1e-9)
    for x in range(4):
        for z in range(4):
            assert P[x, z] == pytest.approx(P[0, (z - x) % 4], abs=1e-8)
        assert P[x, x] == P[x].max()


def test_conditional_vanishing_amplitude_is_uniform():
    P = conditional_distribution(ProtocolParams(1e-9, 0, 0.01))
    np.testing.assert_allclose(P, 0.25, atol=1e-8)


def test_conditional_against_sampling_oracle():
    # Monte-Carlo heterodyne outcomes: complex Gaussian with per-axis variance (1 + nbar)/2
    p = ProtocolParams(0.7, 5, 0.04)
    rng = np.random.default_rng(3)
    n = 400_000
    c = math.sqrt(p.eta) * p.alphas()[1]
    s = math.sqrt((1 + p.thermal_photons) / 2)
    zeta = c + s * (rng.normal(size=n) + 1j * rng.normal(size=n))
    z = np.floor(np.mod(np.angle(zeta), 2 * np.pi) / (np.pi / 2)).astype(int)
    freq = np.bincount(z, minlength=4) / n
    np.testing.assert_allclose(conditional_distribution(p)[1], freq, atol=4e-3)


def test_leakage_examples():
    probs = [0.25] * 4
    assert error_correction_leakage(np.eye(4), probs, 0.95) == pytest.approx(0.1, abs=1e-12)
    assert error_correction_leakage(np.full((4, 4), 0.25), probs, 0.95) == pytest.approx(2.0, abs=1e-12)
    P = conditional_distribution(ProtocolParams(0.66, 30, 0.02))
    h_cond = -sum(0.25 * (row * np.log2(row)).sum() for row in P)
    assert error_correction_leakage(P, probs, 1.0) == pytest.approx(h_cond, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1), min_size=16, max_size=16), st.floats(0.5, 1.0))
def test_leakage_lower_bound(w, beta):
    P = np.array(w).reshape(4, 4)
    P /= P.sum(axis=1, keepdims=True)
    probs = np.full(4, 0.25)
    pz = probs @ P
    h_z = -(pz * np.log2(pz)).sum()
    val = error_correction_leakage(P, probs, beta)
    assert val >= (1 - beta) * h_z - 1e-12
    assert val >= 0


def test_feature_layout():
    p = ProtocolParams(0.66, 25, 0.017)
    f = features_for(p)
    assert f.shape == (N_FEATURES,)
    assert len(feature_names()) == N_FEATURES
    assert f[28] == 0.017
    m = simulate_moments(p)
    np.testing.assert_allclose(f[0:4], m.mean_q / 4)
    np.testing.assert_allclose(f[12:16], 0, atol=1e-15)
    G = gram_matrix(p)
    assert f[16] == G[0, 1].real and f[17] == G[0, 1].imag
    assert f[26] == G[2, 3].real and f[27] == G[2, 3].imag
    np.testing.assert_array_equal(assemble_features(m, G, 0.017, p.probs), f)
