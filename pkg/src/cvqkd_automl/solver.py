"""Two-step key-rate engine.

Step 1 runs Frank-Wolfe on ``f(rho) = D(G(rho) || Z(G(rho)))`` over the
constraint set; its objective is an upper bound on the minimum.  Step 2
linearizes ``f`` at the final iterate and bounds the linear minimum from
below with a dual-feasible SDP certificate, which by convexity lower-bounds
the minimum of ``f``.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from . import channel
from .errors import InfeasibleError, NotHermitianError
from .fock import DIM_A, FockSpace, build_operator_set, coherent_vector, tensor_embed
from .keymap import PostprocessingMap, RegionOperators, build_postprocessing_map
from .sdp import AffineSpectrahedron, SDPResult, max_min_eigenvalue, solve_sdp

log = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5) - 1) / 2


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    ITERATION_CAPPED = "IterationCapped"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class SolverConfig:
    cutoff: int = 12
    max_fw_iterations: int = 300
    fw_gap_tol: float = 1e-6
    log_floor: float = 1e-12
    sdp_feas_tol: float = 1e-8
    sdp_gap_tol: float = 1e-7
    line_search_tol: float = 1e-6

    def __post_init__(self):
        for name in ("fw_gap_tol", "log_floor", "sdp_feas_tol", "sdp_gap_tol", "line_search_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_fw_iterations < 1:
            raise ValueError("max_fw_iterations must be at least 1")
        FockSpace(self.cutoff)

    @property
    def space(self) -> FockSpace:
        return FockSpace(self.cutoff)


@dataclass
class ConstraintSet:
    observables: list
    targets: list
    labels: list
    dim_b: int

    def __len__(self):
        return len(self.targets)

    @cached_property
    def feasible_set(self) -> AffineSpectrahedron:
        return AffineSpectrahedron(np.array(self.observables), np.array(self.targets))

    def residuals(self, rho: np.ndarray) -> np.ndarray:
        return np.array([np.trace(O @ rho).real - t for O, t in zip(self.observables, self.targets)])


def build_constraints(moments: channel.MomentSet, gram: np.ndarray, probs, space: FockSpace) -> ConstraintSet:
    ops = build_operator_set(space)
    dims = (DIM_A, space.dim)
    probs = np.asarray(probs, dtype=float)
    means = moments.as_matrix()
    observables, targets, labels = [], [], []
    for row, (name, op) in enumerate(zip(channel.MOMENT_NAMES, (ops.q, ops.p, ops.n, ops.d))):
        for k in range(DIM_A):
            observables.append(tensor_embed(k, op, dims))
            targets.append(probs[k] * means[row, k])
            labels.append(f"{name}_{k}")
    eye_ab = np.eye(DIM_A * space.dim, dtype=complex)
    observables.append(eye_ab)
    targets.append(1.0)
    labels.append("trace")

    # Tr_B(rho)[i, j] = Tr(rho (|j><i| (x) I_B))
    eye_b = np.eye(space.dim)

    def unit(i, j):
        E = np.zeros((DIM_A, DIM_A), dtype=complex)
        E[i, j] = 1.0
        return E

    for i in range(DIM_A):
        observables.append(np.kron(unit(i, i), eye_b))
        targets.append(gram[i, i].real)
        labels.append(f"trB_{i}{i}")
    for i, j in channel.OFFDIAG_PAIRS:
        re = (unit(j, i) + unit(i, j)) / 2
        im = (unit(j, i) - unit(i, j)) / 2j
        observables += [np.kron(re, eye_b), np.kron(im, eye_b)]
        targets += [gram[i, j].real, gram[i, j].imag]
        labels += [f"trB_re_{i}{j}", f"trB_im_{i}{j}"]
    return ConstraintSet(observables=observables, targets=targets, labels=labels, dim_b=space.dim)


def initial_feasible_state(constraints: ConstraintSet, config: SolverConfig) -> tuple[np.ndarray, float]:
    """Feasible point with maximal minimum eigenvalue; returns ``(rho0, t*)``."""
    rho, t, t_upper = max_min_eigenvalue(
        constraints.feasible_set, feas_tol=config.sdp_feas_tol, gap_tol=config.sdp_gap_tol
    )
    if t_upper < -config.sdp_feas_tol:
        raise InfeasibleError(
            f"no positive semidefinite state meets the constraints (max min-eigenvalue <= {t_upper:.3e})",
            certificate=t_upper,
        )
    if t <= 0:
        raise InfeasibleError(
            f"constraint set has no interior (max min-eigenvalue {t:.3e})", certificate=t
        )
    return rho, t


def _xlogx_bits(w: np.ndarray, floor: float) -> float:
    return float(np.sum(w * np.log2(np.maximum(w, floor))))


def _blocks(gmap: PostprocessingMap, rho: np.ndarray) -> np.ndarray:
    """The diagonal R-blocks of ``G(rho)``, i.e. ``Z(G(rho))`` block by block."""
    A = np.array(gmap.blocks)
    return A @ rho[None] @ A.conj().transpose(0, 2, 1)


def objective_and_gradient(rho: np.ndarray, gmap: PostprocessingMap, config: SolverConfig):
    """``f(rho)`` in bits and its gradient ``G^dag(log G(rho)) - G^dag(log Z(G(rho)))``.

    ``K`` is an isometry (``sum_z R_z = I``), so ``G(rho)`` has the spectrum
    of ``rho`` padded with zeros and ``G^dag(log G(rho)) = log rho``;
    ``Z(G(rho))`` is block diagonal with blocks ``A_z rho A_z^dag``.  Both
    facts reduce every eigendecomposition to the size of ``rho``.
    """
    rho = np.asarray(rho)
    dev = np.max(np.abs(rho - rho.conj().T))
    if dev > 1e-10:
        raise NotHermitianError(f"state is not Hermitian (max deviation {dev:.2e})")
    rho = (rho + rho.conj().T) / 2
    stack = np.concatenate([rho[None], _blocks(gmap, rho)])
    w, U = np.linalg.eigh(stack)
    if w[0, 0] < -1e-9:
        raise ValueError(f"state is not positive semidefinite (min eigenvalue {w[0, 0]:.3e})")
    floor = config.log_floor
    f = _xlogx_bits(w[0], floor) - _xlogx_bits(w[1:], floor)
    logs = (U * np.log2(np.maximum(w, floor))[:, None, :]) @ U.conj().transpose(0, 2, 1)
    A = np.array(gmap.blocks)
    grad = logs[0] - (A.conj().transpose(0, 2, 1) @ logs[1:] @ A).sum(axis=0)
    grad = (grad + grad.conj().T) / 2
    return f, grad


def _objective_only(stack: np.ndarray, floor: float) -> float:
    w = np.linalg.eigvalsh(stack)
    return _xlogx_bits(w[0], floor) - _xlogx_bits(w[1:], floor)


def sdp_linear_minimize(C: np.ndarray, constraints: ConstraintSet, config: SolverConfig) -> SDPResult:
    return solve_sdp(C, constraints.feasible_set, feas_tol=config.sdp_feas_tol, gap_tol=config.sdp_gap_tol)


def golden_section(phi, tol: float) -> tuple[float, float]:
    """Minimize a unimodal ``phi`` on ``[0, 1]``; returns ``(t, phi(t))``."""
    a, b = 0.0, 1.0
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = phi(c), phi(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = phi(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = phi(d)
    return (c, fc) if fc < fd else (d, fd)


@dataclass
class FrankWolfeResult:
    rho: np.ndarray
    objective: float
    gap: float
    iterations: int
    status: Status
    objectives: list = field(default_factory=list)
    gaps: list = field(default_factory=list)
    # Linearization at the final iterate, reused by step 2.
    gradient: np.ndarray | None = None
    linear_sdp: SDPResult | None = None
    max_residual: float = 0.0


def step1_upper_bound(
    constraints: ConstraintSet,
    gmap: PostprocessingMap,
    config: SolverConfig,
    rho0: np.ndarray | None = None,
) -> FrankWolfeResult:
    if rho0 is None:
        rho0, _ = initial_feasible_state(constraints, config)
    rho = rho0
    A = np.array(gmap.blocks)
    Ad = A.conj().transpose(0, 2, 1)
    floor = config.log_floor
    objectives, gaps = [], []
    max_res = constraints.feasible_set.residual(rho)
    status = Status.ITERATION_CAPPED
    for it in range(1, config.max_fw_iterations + 1):
        f, grad = objective_and_gradient(rho, gmap, config)
        sdp = sdp_linear_minimize(grad, constraints, config)
        sigma = sdp.X
        gap = float(np.vdot(grad, rho - sigma).real)
        objectives.append(f)
        gaps.append(gap)
        if gap < config.fw_gap_tol:
            status = Status.CONVERGED
            break
        if it == config.max_fw_iterations:
            break
        stack0 = np.concatenate([rho[None], A @ rho[None] @ Ad])
        stack1 = np.concatenate([sigma[None], A @ sigma[None] @ Ad])
        delta = stack1 - stack0
        t, f_new = golden_section(lambda s: _objective_only(stack0 + s * delta, floor), config.line_search_tol)
        if not f_new < f:
            # The segment gives no decrease at line-search resolution.
            log.debug("Frank-Wolfe stalled at iteration %d (gap %.3e)", it, gap)
            break
        rho = rho + t * (sigma - rho)
        rho = (rho + rho.conj().T) / 2
        max_res = max(max_res, constraints.feasible_set.residual(rho))
    return FrankWolfeResult(
        rho=rho,
        objective=f,
        gap=gap,
        iterations=it,
        status=status,
        objectives=objectives,
        gaps=gaps,
        gradient=grad,
        linear_sdp=sdp,
        max_residual=max_res,
    )


def step2_lower_bound(
    rho: np.ndarray,
    constraints: ConstraintSet,
    gmap: PostprocessingMap,
    config: SolverConfig,
    linearization: tuple | None = None,
) -> float:
    """``f(rho) - Tr(rho grad) + certified min_sigma Tr(sigma grad)``.

    ``linearization`` may pass a precomputed ``(f, grad, sdp_result)`` at
    ``rho`` to avoid solving the same SDP twice.
    """
    if linearization is None:
        f, grad = objective_and_gradient(rho, gmap, config)
        sdp = sdp_linear_minimize(grad, constraints, config)
    else:
        f, grad, sdp = linearization
    return float(f - np.vdot(grad, rho).real + sdp.dual_value)


@dataclass
class KeyRateResult:
    upper_bound_objective: float
    lower_bound_objective: float
    delta_EC: float
    key_rate: float
    fw_iterations: int
    fw_gap: float
    status: Status
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = self.status.value
        return d


@dataclass(frozen=True)
class _Problem:
    space: FockSpace
    gmap: PostprocessingMap


_problem_cache: dict[int, _Problem] = {}


def _problem_for(cutoff: int) -> _Problem:
    if cutoff not in _problem_cache:
        space = FockSpace(cutoff)
        gmap = build_postprocessing_map(RegionOperators.for_space(space))
        _problem_cache[cutoff] = _Problem(space=space, gmap=gmap)
    return _problem_cache[cutoff]


def compute_key_rate(params: channel.ProtocolParams, config: SolverConfig | None = None) -> KeyRateResult:
    config = config or SolverConfig()
    t_start = time.perf_counter()
    prob = _problem_for(config.cutoff)
    moments = channel.simulate_moments(params)
    gram = channel.gram_matrix(params)
    P = channel.conditional_distribution(params)
    delta_ec = channel.error_correction_leakage(P, params.probs, params.reconciliation_eff)
    p_pass = 1.0
    deficits = [coherent_vector(prob.space, np.sqrt(params.eta) * a).norm_deficit for a in params.alphas()]
    diagnostics = {
        "cutoff": config.cutoff,
        "eta": params.eta,
        "cutoff_norm_deficit": max(deficits),
        "region_clamped_mass": prob.gmap.clamped_mass,
        "noise_reference": "input",
    }
    constraints = build_constraints(moments, gram, params.probs, prob.space)
    try:
        rho0, tmin = initial_feasible_state(constraints, config)
    except InfeasibleError as exc:
        diagnostics["infeasibility_certificate"] = exc.certificate
        diagnostics["seconds"] = time.perf_counter() - t_start
        return KeyRateResult(
            upper_bound_objective=math.nan,
            lower_bound_objective=math.nan,
            delta_EC=delta_ec,
            key_rate=0.0,
            fw_iterations=0,
            fw_gap=math.nan,
            status=Status.INFEASIBLE,
            diagnostics=diagnostics,
        )
    fw = step1_upper_bound(constraints, prob.gmap, config, rho0=rho0)
    lower = step2_lower_bound(fw.rho, constraints, prob.gmap, config, (fw.objective, fw.gradient, fw.linear_sdp))
    diagnostics.update(
        {
            "initial_min_eigenvalue": tmin,
            "max_constraint_residual": fw.max_residual,
            "sdp_gap": fw.linear_sdp.gap,
            "sdp_iterations": fw.linear_sdp.iterations,
            "seconds": time.perf_counter() - t_start,
        }
    )
    return KeyRateResult(
        upper_bound_objective=fw.objective,
        lower_bound_objective=lower,
        delta_EC=delta_ec,
        key_rate=max(0.0, lower - p_pass * delta_ec),
        fw_iterations=fw.iterations,
        fw_gap=fw.gap,
        status=fw.status,
        diagnostics=diagnostics,
    )
