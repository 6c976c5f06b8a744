"""Dataset generation, automated search, evaluation reports and benchmarks."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, channel
from .channel import N_FEATURES, ProtocolParams, feature_names
from .errors import KeyRateError, NumericalFailure
from .solver import SolverConfig, Status, compute_key_rate
from .surrogate import (
    EvaluationReport,
    LossHyper,
    MLPArchitecture,
    Preprocessor,
    TrainConfig,
    TrainedModel,
    evaluate_model,
    init_network,
    model_to_dict,
    predict_key_rate,
)
from .surrogate import train as surrogate_train
from .tpe import SearchSpace, TPEConfig, smbo_run

log = logging.getLogger(__name__)

HETERODYNE = "qpsk-heterodyne"
HOMODYNE = "qpsk-homodyne"
PROTOCOLS = (HETERODYNE, HOMODYNE)
META_COLUMNS = ("key_rate", "distance_km", "amplitude", "xi", "protocol", "status", "digest")


class DatasetAuditError(NumericalFailure):
    """Raised when a generated dataset violates the monotonicity audit.

    The offending dataset travels with the error so it can be inspected.
    """

    def __init__(self, message, violations, data=None):
        super().__init__(message)
        self.violations = violations
        self.data = data


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class DatasetSpec:
    noise_intervals: tuple
    samples_per_interval: int
    distance_grid_km: tuple
    amplitude_grid: tuple
    protocol: str = HETERODYNE
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(cutoff=6, max_fw_iterations=40))
    seed: int = 0
    attenuation_db_per_km: float = 0.2
    reconciliation_eff: float = 0.95

    def __post_init__(self):
        intervals = tuple((float(lo), float(hi)) for lo, hi in self.noise_intervals)
        for lo, hi in intervals:
            if not 0 <= lo <= hi:
                raise ValueError(f"bad noise interval ({lo}, {hi})")
        ordered = sorted(intervals)
        for (_, hi), (lo, _) in zip(ordered, ordered[1:]):
            if lo < hi:
                raise ValueError("noise intervals overlap")
        if any(a <= 0 for a in self.amplitude_grid):
            raise ValueError("amplitudes must be positive")
        if any(d < 0 for d in self.distance_grid_km):
            raise ValueError("distances must be non-negative")
        if self.samples_per_interval < 1:
            raise ValueError("samples_per_interval must be at least 1")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol tag {self.protocol!r}")
        object.__setattr__(self, "noise_intervals", intervals)
        object.__setattr__(self, "distance_grid_km", tuple(float(d) for d in self.distance_grid_km))
        object.__setattr__(self, "amplitude_grid", tuple(float(a) for a in self.amplitude_grid))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_intervals"] = [list(iv) for iv in self.noise_intervals]
        d["distance_grid_km"] = list(self.distance_grid_km)
        d["amplitude_grid"] = list(self.amplitude_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        if "solver" in d:
            d["solver"] = SolverConfig(**d["solver"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DatasetSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def spec_hash(self) -> str:
        return hashlib.sha256(_canonical_json(self.to_dict()).encode()).hexdigest()

    def noise_samples(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return np.array([rng.uniform(lo, hi, self.samples_per_interval) for lo, hi in self.noise_intervals]).ravel()

    def grid(self) -> list[tuple[float, float, float]]:
        """Grid points ``(xi, L, alpha)`` in canonical order."""
        return [(float(xi), L, a) for xi in self.noise_samples() for L in self.distance_grid_km for a in self.amplitude_grid]


@dataclass
class DatasetFile:
    features: np.ndarray
    key_rate: np.ndarray
    distance_km: np.ndarray
    amplitude: np.ndarray
    xi: np.ndarray
    protocol: str = HETERODYNE
    status: list = field(default_factory=list)
    digest: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).reshape(-1, N_FEATURES)
        n = len(self.features)
        for name in ("key_rate", "distance_km", "amplitude", "xi"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"column {name} has shape {arr.shape}, expected ({n},)")
            setattr(self, name, arr)
        self.status = list(self.status) or [""] * n
        self.digest = list(self.digest) or [""] * n

    def __len__(self):
        return len(self.key_rate)

    def subset(self, idx) -> "DatasetFile":
        idx = np.asarray(idx, dtype=int)
        return DatasetFile(
            features=self.features[idx],
            key_rate=self.key_rate[idx],
            distance_km=self.distance_km[idx],
            amplitude=self.amplitude[idx],
            xi=self.xi[idx],
            protocol=self.protocol,
            status=[self.status[i] for i in idx],
            digest=[self.digest[i] for i in idx],
            meta=dict(self.meta),
        )

    def save(self, path) -> Path:
        """Write ``path`` (CSV with typed header) and ``path.meta.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = [f"{name}:float" for name in feature_names()]
        header += ["key_rate:float", "distance_km:float", "amplitude:float", "xi:float",
                   "protocol:str", "status:str", "digest:str"]
        lines = [",".join(header)]
        for i in range(len(self)):
            vals = [repr(float(v)) for v in self.features[i]]
            vals += [repr(float(self.key_rate[i])), repr(float(self.distance_km[i])),
                     repr(float(self.amplitude[i])), repr(float(self.xi[i])),
                     self.protocol, self.status[i], self.digest[i]]
            lines.append(",".join(vals))
        path.write_text("\n".join(lines) + "\n")
        meta = dict(self.meta)
        meta["n_rows"] = len(self)
        meta["protocol"] = self.protocol
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetFile":
        path = Path(path)
        lines = path.read_text().splitlines()
        names = [h.split(":")[0] for h in lines[0].split(",")]
        expected = feature_names() + list(META_COLUMNS)
        if names != expected:
            raise ValueError(f"{path}: unexpected columns; expected canonical order {expected}")
        rows = [ln.split(",") for ln in lines[1:] if ln]
        nf = N_FEATURES
        floats = np.array([[float(v) for v in r[: nf + 4]] for r in rows]).reshape(-1, nf + 4)
        protocols = {r[nf + 4] for r in rows}
        if len(protocols) > 1:
            raise ValueError(f"{path}: mixed protocol tags {sorted(protocols)}")
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        protocol = protocols.pop() if protocols else meta.get("protocol", HETERODYNE)
        if np.any(floats[:, nf] <= 0):
            raise ValueError(f"{path}: rows {np.flatnonzero(floats[:, nf] <= 0).tolist()} have non-positive key rate")
        return cls(
            features=floats[:, :nf],
            key_rate=floats[:, nf],
            distance_km=floats[:, nf + 1],
            amplitude=floats[:, nf + 2],
            xi=floats[:, nf + 3],
            protocol=protocol,
            status=[r[nf + 5] for r in rows],
            digest=[r[nf + 6] for r in rows],
            meta=meta,
        )


def _diagnostic_digest(result) -> str:
    # timing is excluded so that the digest is reproducible
    d = {k: v for k, v in result.diagnostics.items() if k != "seconds"}
    d.update(upper=result.upper_bound_objective, lower=result.lower_bound_objective,
             delta_ec=result.delta_EC, iterations=result.fw_iterations)
    return hashlib.sha256(_canonical_json(d).encode()).hexdigest()[:16]


def _solve_point(task):
    index, xi, L, alpha, solver_cfg, attenuation, beta = task
    try:
        params = ProtocolParams(alpha, L, xi, attenuation_db_per_km=attenuation, reconciliation_eff=beta)
        res = compute_key_rate(params, solver_cfg)
    except (KeyRateError, ValueError) as exc:
        return {"index": index, "ok": False, "error": f"{type(exc).__name__}: {exc}"}
    return {
        "index": index,
        "ok": True,
        "key_rate": res.key_rate,
        "status": res.status.value,
        "features": channel.features_for(params),
        "digest": _diagnostic_digest(res),
    }


def audit_monotonicity(data: DatasetFile, tol: float = 0.0) -> list[dict]:
    """Rows whose rate exceeds the rate at the next shorter distance of the same ``(xi, alpha)`` slice."""
    violations = []
    slices: dict = {}
    for i in range(len(data)):
        slices.setdefault((data.xi[i], data.amplitude[i]), []).append(i)
    for (xi, a), idx in slices.items():
        idx = sorted(idx, key=lambda i: data.distance_km[i])
        for prev, cur in zip(idx, idx[1:]):
            if data.key_rate[cur] > data.key_rate[prev] + tol:
                violations.append({"row": cur, "xi": xi, "amplitude": a,
                                   "distance_km": data.distance_km[cur],
                                   "rate": data.key_rate[cur], "rate_shorter": data.key_rate[prev]})
    return violations


def generate_dataset(spec: DatasetSpec, workers: int | None = None, progress_every: int = 0) -> DatasetFile:
    """Solve every grid point of ``spec`` and keep rows with positive key rate.

    Rows come out in grid order whatever the worker count.  Solver
    failures are recorded in the metadata rather than raised.
    """
    if spec.protocol != HETERODYNE:
        raise ValueError(f"no built-in solver for protocol {spec.protocol!r}; supply an external dataset")
    grid = spec.grid()
    tasks = [(i, xi, L, a, spec.solver, spec.attenuation_db_per_km, spec.reconciliation_eff)
             for i, (xi, L, a) in enumerate(grid)]
    workers = workers or os.cpu_count() or 1
    t0 = time.perf_counter()
    results = []
    if workers == 1:
        mapped = map(_solve_point, tasks)
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        mapped = pool.map(_solve_point, tasks, chunksize=max(1, len(tasks) // (8 * workers)))
    try:
        for k, r in enumerate(mapped, 1):
            results.append(r)
            if progress_every and k % progress_every == 0:
                log.info("solved %d/%d points (%.0f s)", k, len(tasks), time.perf_counter() - t0)
    finally:
        if workers != 1:
            pool.shutdown()

    keep = [r for r in results if r["ok"] and r["key_rate"] > 0]
    failures = [{"index": r["index"], "point": list(grid[r["index"]]), "error": r["error"]}
                for r in results if not r["ok"]]
    excluded = sum(1 for r in results if r["ok"] and not r["key_rate"] > 0)
    infeasible = sum(1 for r in results if r["ok"] and r["status"] == Status.INFEASIBLE.value)
    data = DatasetFile(
        features=np.array([r["features"] for r in keep]).reshape(-1, N_FEATURES),
        key_rate=[r["key_rate"] for r in keep],
        distance_km=[grid[r["index"]][1] for r in keep],
        amplitude=[grid[r["index"]][2] for r in keep],
        xi=[grid[r["index"]][0] for r in keep],
        protocol=spec.protocol,
        status=[r["status"] for r in keep],
        digest=[r["digest"] for r in keep],
        meta={
            "spec": spec.to_dict(),
            "spec_hash": spec.spec_hash(),
            "seed": spec.seed,
            "grid_points": len(grid),
            "excluded_nonpositive": excluded,
            "infeasible_points": infeasible,
            "failures": failures,
        },
    )
    violations = audit_monotonicity(data)
    if violations:
        raise DatasetAuditError(f"{len(violations)} rows break monotonicity in distance", violations, data)
    return data


def split_and_standardize(data: DatasetFile, test_fraction: float = 0.05, seed: int = 0):
    """Shuffled disjoint train/test split; the preprocessor sees the training rows only."""
    n = len(data)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_test = int(round(test_fraction * n))
    if n_test == 0 or n_test == n:
        raise ValueError(f"test fraction {test_fraction} on {n} rows leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    train, test = data.subset(train_idx), data.subset(test_idx)
    train.meta["split"] = test.meta["split"] = {"test_fraction": test_fraction, "seed": seed}
    train.meta["row_indices"] = train_idx.tolist()
    test.meta["row_indices"] = test_idx.tolist()
    return train, test, Preprocessor.fit(train.features)


def settings_from_config(config: dict):
    """Map a search configuration to ``(MLPArchitecture, LossHyper, batch_size)``."""
    units, acts, drops = [], [], []
    i = 1
    while f"units_{i}" in config:
        units.append(int(config[f"units_{i}"]))
        acts.append(config[f"activation_{i}"])
        drops.append(float(config[f"dropout_{i}"]))
        i += 1
    if "n_hidden" in config and config["n_hidden"] != len(units):
        raise ValueError(f"config declares {config['n_hidden']} hidden layers but defines {len(units)}")
    arch = MLPArchitecture((N_FEATURES, *units, 1), tuple(acts), tuple(drops))
    arch.check_searchable()
    hyper = LossHyper(float(config["gamma"]), float(config["epsilon"]))
    return arch, hyper, int(config["batch_size"])


def train_from_config(config: dict, train: DatasetFile, preproc: Preprocessor, train_cfg: TrainConfig):
    arch, hyper, batch = settings_from_config(config)
    cfg = replace(train_cfg, batch_size=batch)
    net = init_network(arch, seed=cfg.seed)
    return surrogate_train(net, train.features, train.key_rate, preproc, hyper, cfg)


def run_auto_ml(
    train: DatasetFile,
    space: SearchSpace,
    tpe_cfg: TPEConfig,
    train_cfg: TrainConfig,
    preproc: Preprocessor | None = None,
    run_dir=None,
):
    """TPE search whose objective is the best validation loss of a training run.

    Training is deterministic given its seed, so the best trial's model is
    kept instead of being trained a second time.  Every finished trial is
    appended to ``run_dir/trials.json`` when a run directory is given.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    preproc = preproc or Preprocessor.fit(train.features)
    best: dict = {}

    def objective(config):
        model, loss = train_from_config(config, train, preproc, train_cfg)
        if "loss" not in best or loss < best["loss"]:
            best.update(loss=loss, model=model)
        return loss

    trials_path = Path(run_dir) / "trials.json" if run_dir is not None else None

    def persist(i, trial):
        if trials_path is not None:
            trials_path.parent.mkdir(parents=True, exist_ok=True)
            done = json.loads(trials_path.read_text()) if i else []
            done.append(trial.to_dict())
            trials_path.write_text(json.dumps(done, indent=1, sort_keys=True) + "\n")

    history, best_trial = smbo_run(space, objective, tpe_cfg, callback=persist)
    if best["loss"] != best_trial.objective:
        raise AssertionError("kept model does not belong to the best trial")
    return best["model"], history


def benchmark_speedup(model: TrainedModel, params_list, solver_config: SolverConfig, predict_repeats: int = 200):
    """Wall-clock seconds of the solver and of the surrogate on each point, and their ratio."""
    rows = []
    for params in params_list:
        feats = channel.features_for(params)
        t0 = time.perf_counter()
        res = compute_key_rate(params, solver_config)
        t_solve = time.perf_counter() - t0
        predict_key_rate(model, feats)  # warm-up
        times = []
        for _ in range(predict_repeats):
            t0 = time.perf_counter()
            pred = predict_key_rate(model, feats)
            times.append(time.perf_counter() - t0)
        t_pred = float(np.median(times))
        rows.append({
            "distance_km": params.distance_km,
            "amplitude": params.amplitude,
            "xi": params.excess_noise,
            "cutoff": solver_config.cutoff,
            "solver_seconds": t_solve,
            "predict_seconds": t_pred,
            "ratio": t_solve / t_pred,
            "solver_key_rate": res.key_rate,
            "predicted_key_rate": pred,
        })
    return rows


def rate_curves(model: TrainedModel, xis, distances, amplitude: float, solver_config: SolverConfig):
    """Solver and surrogate key rate against distance for each ``xi``."""
    rows = []
    for xi in xis:
        for L in distances:
            params = ProtocolParams(amplitude, L, xi)
            res = compute_key_rate(params, solver_config)
            rows.append({"xi": xi, "distance_km": L, "amplitude": amplitude,
                         "solver_key_rate": res.key_rate,
                         "predicted_key_rate": predict_key_rate(model, channel.features_for(params))})
    return rows


def _write_csv(path: Path, rows: list[dict]):
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0])
    lines = [",".join(keys)] + [",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def emit_report(model: TrainedModel, test: DatasetFile, benchmark=None, out_dir=None, curves=None) -> EvaluationReport:
    """Evaluate on ``test`` and write plot-ready tables next to ``report.json``."""
    report = evaluate_model(model, test.features, test.key_rate)
    if out_dir is None:
        return report
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hist = [{"bin_lo": lo, "bin_hi": hi, "fraction": f}
            for lo, hi, f in zip(report.bin_edges[:-1], report.bin_edges[1:], report.bin_fractions)]
    _write_csv(out / "deviation_histogram.csv", hist)
    summary = {
        "n_test": report.n,
        "secure_fraction": report.secure_fraction,
        "secure_within_20pct": report.within_20,
        "secure_within_40pct": report.within_40,
        "preprocessing": "z-score features (training split statistics), labels -log10(y)",
        "learning_rate_schedule": "constant",
        "noise_reference": "input-referenced excess noise",
        "architecture": model_to_dict(model)["architecture"],
        "loss": {"gamma": model.hyper.gamma, "epsilon": model.hyper.epsilon},
    }
    if benchmark:
        _write_csv(out / "runtime_ratios.csv", benchmark)
        ratios = [b["ratio"] for b in benchmark]
        summary["runtime"] = {"min_ratio": min(ratios), "median_ratio": float(np.median(ratios)),
                              "max_predict_seconds": max(b["predict_seconds"] for b in benchmark)}
    if curves:
        _write_csv(out / "rate_vs_distance.csv", curves)
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return report


def write_manifest(run_dir, command: str, inputs: dict, outputs: list) -> Path:
    run_dir = Path(run_dir)
    entries = {}
    for name in outputs:
        p = run_dir / name
        if p.exists():
            entries[name] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {"command": command, "inputs": inputs, "outputs": entries, "version": __version__}
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
