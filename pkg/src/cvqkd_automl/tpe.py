"""Sequential model-based optimization with a tree-structured Parzen estimator.

Observed trials are split at a quantile of their objective into a good set
and a bad set.  Each set is turned into a product density ``l`` (good) or
``g`` (bad) over the search space.  Candidates drawn from ``l`` are ranked
by ``l / g``, which orders them the same way as expected improvement.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import KeyRateError

log = logging.getLogger(__name__)

OK = "Ok"
FAILED = "Failed"


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if not self.choices:
            raise ValueError(f"{self.name}: categorical needs at least one choice")
        if len(set(map(repr, self.choices))) != len(self.choices):
            raise ValueError(f"{self.name}: duplicate choices")

    def contains(self, value) -> bool:
        return value in self.choices


@dataclass(frozen=True)
class Uniform:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"{self.name}: need lo < hi, got ({self.lo}, {self.hi})")

    def contains(self, value) -> bool:
        return isinstance(value, (int, float)) and self.lo <= value <= self.hi


@dataclass(frozen=True)
class Conditional:
    """``child`` is present only when parameter ``parent`` equals ``active_value``."""

    parent: str
    active_value: Any
    child: Categorical | Uniform

    @property
    def name(self) -> str:
        return self.child.name


def _leaf(p):
    return p.child if isinstance(p, Conditional) else p


@dataclass(frozen=True)
class SearchSpace:
    parameters: tuple
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "parameters", tuple(self.parameters))
        seen = set()
        for p in self.parameters:
            if p.name in seen:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            if isinstance(p, Conditional) and p.parent not in seen:
                raise ValueError(f"{p.name!r} is conditional on {p.parent!r}, which must come first")
            seen.add(p.name)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.parameters]

    def is_active(self, p, config: dict) -> bool:
        if not isinstance(p, Conditional):
            return True
        parent = next(q for q in self.parameters if q.name == p.parent)
        return self.is_active(parent, config) and config.get(p.parent) == p.active_value

    def validate(self, config: dict) -> None:
        """Check domains and conditional hygiene of ``config``."""
        for p in self.parameters:
            active = self.is_active(p, config)
            if active and p.name not in config:
                raise ValueError(f"active parameter {p.name!r} missing from config")
            if not active and p.name in config:
                raise ValueError(f"inactive parameter {p.name!r} present in config")
            if active and not _leaf(p).contains(config[p.name]):
                raise ValueError(f"{p.name}={config[p.name]!r} outside its domain")
        extra = set(config) - set(self.names)
        if extra:
            raise ValueError(f"unknown parameters {sorted(extra)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        params = []
        for entry in d["parameters"]:
            kind = entry["kind"]
            if kind == "categorical":
                leaf = Categorical(entry["name"], tuple(entry["choices"]))
            elif kind == "uniform":
                leaf = Uniform(entry["name"], float(entry["low"]), float(entry["high"]))
            else:
                raise ValueError(f"unknown parameter kind {kind!r}")
            cond = entry.get("condition")
            params.append(Conditional(cond["parent"], cond["value"], leaf) if cond else leaf)
        return cls(parameters=tuple(params), name=d.get("name", ""))

    def to_dict(self) -> dict:
        out = []
        for p in self.parameters:
            leaf = _leaf(p)
            if isinstance(leaf, Categorical):
                e = {"name": leaf.name, "kind": "categorical", "choices": list(leaf.choices)}
            else:
                e = {"name": leaf.name, "kind": "uniform", "low": leaf.lo, "high": leaf.hi}
            if isinstance(p, Conditional):
                e["condition"] = {"parent": p.parent, "value": p.active_value}
            out.append(e)
        return {"name": self.name, "parameters": out}

    @classmethod
    def load(cls, path) -> "SearchSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))


def bundled_config_path(filename: str) -> Path:
    return Path(str(resources.files("cvqkd_automl") / "configs" / filename))


def bundled_space(which: str) -> SearchSpace:
    """``"heterodyne"`` (three hidden layers) or ``"homodyne"`` (optional fourth)."""
    files = {"heterodyne": "space_heterodyne.json", "homodyne": "space_homodyne.json"}
    if which not in files:
        raise ValueError(f"no bundled space {which!r}; choose from {sorted(files)}")
    return SearchSpace.load(bundled_config_path(files[which]))


@dataclass
class Trial:
    config: dict
    objective: float
    status: str = OK
    error: str = ""

    def to_dict(self) -> dict:
        return {"config": self.config, "objective": self.objective, "status": self.status, "error": self.error}


@dataclass(frozen=True)
class TPEConfig:
    max_trials: int = 10
    n_startup_random: int = 3
    quantile: float = 0.25
    n_ei_candidates: int = 24
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_startup_random < self.max_trials:
            raise ValueError("n_startup_random must be below max_trials")
        if not 0 < self.quantile < 1:
            raise ValueError("quantile must lie in (0, 1)")
        if self.n_ei_candidates < 1:
            raise ValueError("n_ei_candidates must be at least 1")


class AllTrialsFailedError(KeyRateError):
    def __init__(self, history):
        super().__init__(f"all {len(history)} trials failed")
        self.history = history


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_prior(space: SearchSpace, seed=None) -> dict:
    return parzen_density([], space).sample(_rng(seed))


def split_observations(history, quantile: float):
    """Good trials are the ``ceil(quantile * n)`` lowest objectives, ties going to earlier trials."""
    trials = [t for t in history if t.status == OK]
    if not trials:
        raise ValueError("cannot split an empty history")
    n_good = math.ceil(quantile * len(trials))
    order = np.argsort([t.objective for t in trials], kind="stable")
    good = [trials[i] for i in order[:n_good]]
    bad = [trials[i] for i in order[n_good:]]
    return good, bad


class _CategoricalDensity:
    def __init__(self, param: Categorical, values):
        counts = np.ones(len(param.choices))
        for v in values:
            counts[param.choices.index(v)] += 1
        self.param = param
        self.probs = counts / counts.sum()

    def log_pdf(self, value) -> float:
        return float(math.log(self.probs[self.param.choices.index(value)]))

    def sample(self, rng):
        return self.param.choices[int(rng.choice(len(self.probs), p=self.probs))]


class _UniformDensity:
    """Equal-weight mixture of the prior uniform and one truncated Gaussian per observation."""

    def __init__(self, param: Uniform, values):
        lo, hi = param.lo, param.hi
        self.param = param
        mus = np.sort(np.asarray(values, dtype=float))
        n = len(mus)
        if n:
            left = np.diff(np.concatenate([[lo], mus]))
            right = np.diff(np.concatenate([mus, [hi]]))
            sig = np.maximum(left, right)
            sig = np.clip(sig, (hi - lo) / min(100.0, n + 1.0), hi - lo)
        else:
            sig = np.empty(0)
        self.mus, self.sigmas = mus, sig
        # standard-normal CDF at the truncation points; their difference is each kernel's mass
        self.cdf_lo = ndtr((lo - mus) / sig) if n else mus
        self.cdf_hi = ndtr((hi - mus) / sig) if n else mus
        self.mass = self.cdf_hi - self.cdf_lo

    def pdf(self, x):
        lo, hi = self.param.lo, self.param.hi
        x = np.asarray(x, dtype=float)
        inside = (x >= lo) & (x <= hi)
        total = np.where(inside, 1.0 / (hi - lo), 0.0)
        if len(self.mus):
            u = (x[..., None] - self.mus) / self.sigmas
            kern = np.exp(-0.5 * u * u) / (math.sqrt(2 * math.pi) * self.sigmas * self.mass)
            total = total + np.where(inside, kern.sum(axis=-1), 0.0)
        return total / (len(self.mus) + 1)

    def log_pdf(self, value) -> float:
        p = float(self.pdf(value))
        return math.log(p) if p > 0 else -math.inf

    def sample(self, rng):
        k = int(rng.integers(len(self.mus) + 1))
        if k == len(self.mus):
            return float(rng.uniform(self.param.lo, self.param.hi))
        # inverse-CDF draw from the truncated kernel
        u = rng.uniform(self.cdf_lo[k], self.cdf_hi[k])
        x = self.mus[k] + self.sigmas[k] * ndtri(u)
        return float(min(max(x, self.param.lo), self.param.hi))


@dataclass
class Density:
    """Product density over a search space; inactive parameters are neither sampled nor scored."""

    space: SearchSpace
    parts: dict = field(default_factory=dict)

    def log_pdf(self, config: dict) -> float:
        total = 0.0
        for p in self.space.parameters:
            if self.space.is_active(p, config) and p.name in config:
                total += self.parts[p.name].log_pdf(config[p.name])
        return total

    def sample(self, rng) -> dict:
        config = {}
        for p in self.space.parameters:
            if self.space.is_active(p, config):
                config[p.name] = self.parts[p.name].sample(rng)
        return config


def parzen_density(trials, space: SearchSpace) -> Density:
    """Fit per-parameter densities; a conditional child uses only trials where it was active."""
    parts = {}
    for p in space.parameters:
        leaf = _leaf(p)
        values = [t.config[p.name] for t in trials if p.name in t.config and space.is_active(p, t.config)]
        if isinstance(leaf, Categorical):
            parts[p.name] = _CategoricalDensity(leaf, values)
        else:
            parts[p.name] = _UniformDensity(leaf, values)
    return Density(space=space, parts=parts)


def expected_improvement_factor(log_l: float, log_g: float, quantile: float) -> float:
    """``(quantile + (g/l)(1 - quantile))**-1``, proportional to expected improvement."""
    ratio = math.exp(log_g - log_l) if log_g - log_l < 700 else math.inf
    return 1.0 / (quantile + ratio * (1.0 - quantile))


def propose_next(history, space: SearchSpace, cfg: TPEConfig, rng=None) -> dict:
    rng = _rng(cfg.seed if rng is None else rng)
    ok = [t for t in history if t.status == OK]
    if len(history) < cfg.n_startup_random or not ok:
        return sample_prior(space, rng)
    good, bad = split_observations(ok, cfg.quantile)
    l_dens = parzen_density(good, space)
    g_dens = parzen_density(bad, space)
    best, best_score = None, -math.inf
    for _ in range(cfg.n_ei_candidates):
        cand = l_dens.sample(rng)
        score = l_dens.log_pdf(cand) - g_dens.log_pdf(cand)
        if best is None or score > best_score:
            best, best_score = cand, score
    return best


def _evaluate(objective, config) -> Trial:
    try:
        y = float(objective(config))
    except Exception as exc:  # evaluator failures are recorded, not raised
        log.warning("trial failed: %s", exc)
        return Trial(config=config, objective=math.nan, status=FAILED, error=f"{type(exc).__name__}: {exc}")
    if not math.isfinite(y):
        return Trial(config=config, objective=y, status=FAILED, error="non-finite objective")
    return Trial(config=config, objective=y)


def _best(history):
    ok = [t for t in history if t.status == OK]
    if not ok:
        raise AllTrialsFailedError(history)
    return min(ok, key=lambda t: t.objective)


def smbo_run(space: SearchSpace, objective: Callable[[dict], float], cfg: TPEConfig, callback=None):
    """Propose, evaluate and record ``cfg.max_trials`` times; return ``(history, best)``."""
    rng = np.random.default_rng(cfg.seed)
    history: list[Trial] = []
    for i in range(cfg.max_trials):
        config = propose_next(history, space, cfg, rng)
        trial = _evaluate(objective, config)
        history.append(trial)
        log.info("trial %d: %s -> %s", i, trial.status, trial.objective)
        if callback is not None:
            callback(i, trial)
    return history, _best(history)


def random_search(space: SearchSpace, objective, n_trials: int, seed=0):
    rng = np.random.default_rng(seed)
    history = [_evaluate(objective, sample_prior(space, rng)) for _ in range(n_trials)]
    return history, _best(history)


def synthetic_space() -> SearchSpace:
    """Small mixed categorical / continuous / conditional space for benchmarking the sampler."""
    return SearchSpace(
        parameters=(
            Categorical("kind", ("a", "b", "c")),
            Uniform("x", 0.0, 1.0),
            Categorical("level", (1, 2, 3, 4)),
            Conditional("kind", "b", Uniform("y", 0.0, 1.0)),
        ),
        name="synthetic",
    )


def synthetic_objective(config: dict) -> float:
    """Minimum 0 at ``kind=b, x=0.3, level=2, y=0.7``."""
    val = (config["x"] - 0.3) ** 2 + 0.05 * abs(config["level"] - 2)
    if config["kind"] == "b":
        val += (config["y"] - 0.7) ** 2
    else:
        val += 0.1 if config["kind"] == "a" else 0.2
    return val
