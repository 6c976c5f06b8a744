"""Feed-forward key-rate surrogate trained with a security-biased loss.

Labels are transformed as ``y* = -log10(y)``.  With ``e* = y*_pred - y*``,
a positive ``e*`` means the predicted rate lies below the certified one,
i.e. the prediction is secure.  The loss penalizes ``e* < 0`` with slope
about ``1 - gamma`` and tolerates ``0 <= e* <= -log10(epsilon)`` almost for
free, which pulls predictions just below the true rates.
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import N_FEATURES

ACTIVATIONS = ("tanh", "relu", "sigmoid")
BATCH_SIZES = (32, 64, 128, 256)
MAX_DROPOUT = 0.3
SEARCH_HIDDEN_LAYERS = (3, 4)
BIN_WIDTH = 0.05
_BOUNDARY_TOL = 1e-12


@dataclass(frozen=True)
class MLPArchitecture:
    """Layer widths from input to output plus per-hidden-layer activation and dropout."""

    layer_sizes: tuple
    activations: tuple
    dropout_rates: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        acts = tuple(str(a).lower() for a in self.activations)
        drops = tuple(float(d) for d in self.dropout_rates)
        if len(sizes) < 3:
            raise ValueError("need at least one hidden layer")
        if sizes[0] != N_FEATURES or sizes[-1] != 1:
            raise ValueError(f"layer sizes must start at {N_FEATURES} and end at 1, got {sizes}")
        if min(sizes) < 1:
            raise ValueError("layer sizes must be positive")
        n_hidden = len(sizes) - 2
        if len(acts) != n_hidden or len(drops) != n_hidden:
            raise ValueError(f"{n_hidden} hidden layers need as many activations and dropout rates")
        bad = [a for a in acts if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activations {bad}; choose from {ACTIVATIONS}")
        if any(not 0 <= d <= MAX_DROPOUT for d in drops):
            raise ValueError(f"dropout rates must lie in [0, {MAX_DROPOUT}], got {drops}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "dropout_rates", drops)

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    def check_searchable(self) -> None:
        """Searched architectures must have 3 or 4 hidden layers."""
        if self.n_hidden not in SEARCH_HIDDEN_LAYERS:
            raise ValueError(f"searched architectures have 3 or 4 hidden layers, got {self.n_hidden}")


@dataclass(frozen=True)
class LossHyper:
    gamma: float
    epsilon: float

    def __post_init__(self):
        for name in ("gamma", "epsilon"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie strictly inside (0, 1), got {v}")

    @property
    def tolerance(self) -> float:
        """``-log10(epsilon)``: width of the cheap secure band in label units."""
        return -math.log10(self.epsilon)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 200
    learning_rate: float = 1e-3
    validation_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size not in BATCH_SIZES:
            raise ValueError(f"batch size must be one of {BATCH_SIZES}, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation fraction must lie in (0, 1)")


@dataclass
class Preprocessor:
    feature_means: np.ndarray
    feature_stds: np.ndarray

    @classmethod
    def fit(cls, features) -> "Preprocessor":
        X = _as_features(features)
        if len(X) == 0:
            raise ValueError("cannot fit a preprocessor on zero rows")
        means = X.mean(axis=0)
        stds = X.std(axis=0)
        const = stds <= 0
        if const.any():
            warnings.warn(f"constant feature columns {np.flatnonzero(const).tolist()} get std 1", stacklevel=2)
            stds = np.where(const, 1.0, stds)
        return cls(feature_means=means, feature_stds=stds)

    def transform(self, features) -> np.ndarray:
        return (_as_features(features) - self.feature_means) / self.feature_stds

    def inverse_transform(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.feature_stds + self.feature_means

    @staticmethod
    def transform_labels(y) -> np.ndarray:
        return -np.log10(np.asarray(y, dtype=float))

    @staticmethod
    def inverse_labels(y_star) -> np.ndarray:
        return 10.0 ** (-np.asarray(y_star, dtype=float))


def _as_features(features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise ValueError(f"expected {N_FEATURES} features per sample, got shape {np.shape(features)}")
    return X


@dataclass
class Network:
    arch: MLPArchitecture
    weights: list
    biases: list

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def init_network(arch: MLPArchitecture, seed: int) -> Network:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(arch=arch, weights=weights, biases=biases)


def _activate(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic


def _activation_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return a * (1.0 - a)


def _forward_cached(net: Network, X, training: bool, rng):
    h = X
    cache = []
    n_hidden = net.arch.n_hidden
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        if i == n_hidden:
            return z[:, 0], cache
        act = net.arch.activations[i]
        a = _activate(act, z)
        rate = net.arch.dropout_rates[i]
        mask = None
        if training and rate > 0:
            mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
        cache.append((h, z, a, mask))
        h = a if mask is None else a * mask
    raise AssertionError("unreachable")


def forward(net: Network, x, training: bool = False, rng=None) -> np.ndarray | float:
    """Network output ``y*_pred`` for standardized input ``x`` (one sample or a batch).

    With ``training`` set, inverted dropout is applied using ``rng``.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    if training and rng is None:
        rng = np.random.default_rng()
    out, _ = _forward_cached(net, X[None, :] if single else X, training, rng)
    return float(out[0]) if single else out


def secure_loss(predictions, labels, hyper: LossHyper) -> tuple[float, np.ndarray]:
    """Mean security-biased loss and its gradient with respect to ``predictions``.

    At the kinks ``e* = 0`` and ``e* = -log10(epsilon)`` the left-hand
    derivative is used.
    """
    pred = np.asarray(predictions, dtype=float)
    e = pred - np.asarray(labels, dtype=float)
    c = hyper.tolerance
    g = hyper.gamma
    n = e.size
    per = g * (e * e + np.maximum(e, c)) - (1.0 - g) * np.minimum(e, 0.0)
    grad = g * (2.0 * e + (e > c)) - (1.0 - g) * (e <= 0)
    return float(per.sum() / n), grad / n


def backprop(net: Network, X, labels, hyper: LossHyper, training: bool = False, rng=None):
    """Loss and gradients for every weight and bias (same order as ``Network.params``)."""
    out, cache = _forward_cached(net, np.asarray(X, dtype=float), training, rng)
    loss, delta = secure_loss(out, labels, hyper)
    delta = delta[:, None]
    grads = [None] * (2 * len(net.weights))
    last = len(net.weights) - 1
    h_in = cache[-1][2] if cache[-1][3] is None else cache[-1][2] * cache[-1][3]
    grads[2 * last] = h_in.T @ delta
    grads[2 * last + 1] = delta.sum(axis=0)
    back = delta @ net.weights[last].T
    for i in range(last - 1, -1, -1):
        h, z, a, mask = cache[i]
        if mask is not None:
            back = back * mask
        back = back * _activation_grad(net.arch.activations[i], z, a)
        grads[2 * i] = h.T @ back
        grads[2 * i + 1] = back.sum(axis=0)
        if i:
            back = back @ net.weights[i].T
    return loss, grads


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainedModel:
    net: Network
    preproc: Preprocessor
    hyper: LossHyper
    train_config: TrainConfig
    best_epoch: int = 0
    history: dict = field(default_factory=dict)

    @property
    def arch(self) -> MLPArchitecture:
        return self.net.arch


def _check_labels(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=float)
    bad = np.flatnonzero(~(y > 0))
    if bad.size:
        raise ValueError(f"key-rate labels must be positive; offending indices {bad.tolist()}")
    return y


def train(net: Network, features, labels, preproc: Preprocessor, hyper: LossHyper, cfg: TrainConfig):
    """Minibatch Adam on the secure loss; returns the best-validation snapshot and its loss.

    ``features`` are raw (unstandardized); ``labels`` are key rates.  The
    last ``validation_fraction`` of a seeded shuffle is held out.
    """
    y = _check_labels(labels)
    X = preproc.transform(features)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} feature rows but {len(y)} labels")
    if len(y) < 2:
        raise ValueError("need at least two rows to hold out a validation set")
    y_star = Preprocessor.transform_labels(y)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(y))
    n_val = min(len(y) - 1, max(1, int(round(cfg.validation_fraction * len(y)))))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    Xtr, ytr = X[tr_idx], y_star[tr_idx]
    Xval, yval = X[val_idx], y_star[val_idx]

    net = copy.deepcopy(net)
    params = net.params()
    opt = Adam(params, lr=cfg.learning_rate)
    best_loss, best_epoch, best_params = math.inf, 0, None
    train_curve, val_curve = [], []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(ytr))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grads = backprop(net, Xtr[idx], ytr[idx], hyper, training=True, rng=rng)
            opt.step(params, grads)
            total += loss * len(idx)
        train_curve.append(total / len(ytr))
        val_loss, _ = secure_loss(forward(net, Xval), yval, hyper)
        val_curve.append(val_loss)
        if not math.isfinite(val_loss):
            raise FloatingPointError(f"validation loss became {val_loss} at epoch {epoch}")
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_params = [p.copy() for p in params]

    best = Network(arch=net.arch, weights=best_params[0::2], biases=best_params[1::2])
    model = TrainedModel(
        net=best,
        preproc=preproc,
        hyper=hyper,
        train_config=cfg,
        best_epoch=best_epoch,
        history={"train_loss": train_curve, "val_loss": val_curve},
    )
    return model, best_loss


def predict_key_rate(model: TrainedModel, features) -> np.ndarray | float:
    """Key rate ``10**(-y*_pred)`` for one feature vector or a batch."""
    single = np.ndim(features) == 1
    y_star = forward(model.net, model.preproc.transform(features))
    rates = Preprocessor.inverse_labels(y_star)
    return float(rates[0]) if single else rates


@dataclass
class EvaluationReport:
    n: int
    secure_fraction: float
    within_20: float
    within_40: float
    bin_edges: list
    bin_fractions: list
    deviations: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deviations"] = self.deviations.tolist()
        return d


def deviation_histogram(dev, width=BIN_WIDTH):
    """Fractions in right-closed bins ``((k-1) w, k w]`` aligned to multiples of ``w``."""
    dev = np.asarray(dev, dtype=float)
    if dev.size == 0:
        return [], []
    k = np.ceil(dev / width - _BOUNDARY_TOL).astype(int)
    lo, hi = int(k.min()), int(k.max())
    counts = np.bincount(k - lo, minlength=hi - lo + 1)
    edges = [(j - 1) * width for j in range(lo, hi + 2)]
    return edges, (counts / dev.size).tolist()


def evaluate_model(model: TrainedModel, features, key_rates) -> EvaluationReport:
    """Secure fraction and tightness of the surrogate on a held-out set.

    A prediction is secure when it does not exceed the certified rate.  The
    two tightness fractions count secure predictions whose relative deviation
    lies in ``[-0.2, 0]`` and ``[-0.4, 0]`` respectively.
    """
    y_true = _check_labels(key_rates)
    y_pred = np.atleast_1d(predict_key_rate(model, np.atleast_2d(features)))
    return report_from_predictions(y_pred, y_true)


def report_from_predictions(y_pred, y_true) -> EvaluationReport:
    y_pred = np.asarray(y_pred, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    dev = (y_pred - y_true) / y_true
    secure = y_pred <= y_true
    n_sec = int(secure.sum())
    sd = dev[secure]
    w20 = float((sd >= -0.2 - _BOUNDARY_TOL).sum() / n_sec) if n_sec else 0.0
    w40 = float((sd >= -0.4 - _BOUNDARY_TOL).sum() / n_sec) if n_sec else 0.0
    edges, fracs = deviation_histogram(dev)
    return EvaluationReport(
        n=len(y_true),
        secure_fraction=n_sec / len(y_true) if len(y_true) else 0.0,
        within_20=w20,
        within_40=w40,
        bin_edges=edges,
        bin_fractions=fracs,
        deviations=dev,
    )


# serialization


def _encode(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def model_to_dict(model: TrainedModel) -> dict:
    arch = model.arch
    return {
        "format": "cvqkd-surrogate/1",
        "architecture": {
            "layer_sizes": list(arch.layer_sizes),
            "activations": list(arch.activations),
            "dropout_rates": list(arch.dropout_rates),
            "output_activation": "linear",
        },
        "weights": [_encode(W) for W in model.net.weights],
        "biases": [_encode(b) for b in model.net.biases],
        "preprocessor": {
            "feature_means": _encode(model.preproc.feature_means),
            "feature_stds": _encode(model.preproc.feature_stds),
            "label_transform": "-log10",
        },
        "loss": asdict(model.hyper),
        "train_config": asdict(model.train_config),
        "seed": model.train_config.seed,
        "best_epoch": model.best_epoch,
        "history": {k: [float(v) for v in vals] for k, vals in model.history.items()},
    }


def model_from_dict(d: dict) -> TrainedModel:
    a = d["architecture"]
    arch = MLPArchitecture(a["layer_sizes"], a["activations"], a["dropout_rates"])
    net = Network(arch=arch, weights=[_decode(w) for w in d["weights"]], biases=[_decode(b) for b in d["biases"]])
    for W, (i, o) in zip(net.weights, zip(arch.layer_sizes[:-1], arch.layer_sizes[1:])):
        if W.shape != (i, o):
            raise ValueError(f"weight shape {W.shape} does not match architecture ({i}, {o})")
    p = d["preprocessor"]
    return TrainedModel(
        net=net,
        preproc=Preprocessor(_decode(p["feature_means"]), _decode(p["feature_stds"])),
        hyper=LossHyper(**d["loss"]),
        train_config=TrainConfig(**d["train_config"]),
        best_epoch=d.get("best_epoch", 0),
        history=d.get("history", {}),
    )


def dumps_model(model: TrainedModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1) + "\n"


def save_model(model: TrainedModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_model(model))
    return path


def load_model(path) -> TrainedModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def model_digest(model: TrainedModel) -> str:
    return hashlib.sha256(dumps_model(model).encode()).hexdigest()
