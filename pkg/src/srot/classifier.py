"""Feedforward source/target classifier with adversarial regularization.

The network maps a point to softmax probabilities over ``{source, target}``.
Gradients are written out by hand. Training minimizes either the plain
cross-entropy or

    L_AR = omega * CE(f(x), y) + KL(f(x + r_a) || f(x))

where ``r_a`` is the power-iteration estimate of the perturbation of norm
``eta`` that changes the prediction the most, and ``f(x)`` in the KL term is
held fixed (virtual label).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import InvalidArchitecture, InvalidDataset, InvalidParameter
from .measures import ContaminatedDataset, make_rng

SOURCE = 0
TARGET = 1
SIDE_NAMES = ("source", "target")
PROB_CLIP = 1e-15
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ClassifierModel:
    """MLP ``layer_dims[0] -> ... -> 2`` with a softmax head.

    ``weights[k]`` has shape ``(layer_dims[k], layer_dims[k + 1])``.
    """

    layer_dims: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    activation: str = "relu"

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "ClassifierModel":
        Ws = tuple(np.array(p, dtype=np.float64) for p in params[0::2])
        bs = tuple(np.array(p, dtype=np.float64) for p in params[1::2])
        return replace(self, weights=Ws, biases=bs)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def from_flat(self, flat) -> "ClassifierModel":
        flat = np.asarray(flat, dtype=np.float64)
        out, k = [], 0
        for p in self.params():
            out.append(flat[k:k + p.size].reshape(p.shape))
            k += p.size
        return self.with_params(out)

    def checksum(self) -> float:
        return float(np.sum(np.abs(self.flat_params())))


def _check_dims(layer_dims) -> Tuple[int, ...]:
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise InvalidArchitecture("need at least an input and an output layer")
    if dims[-1] != 2:
        raise InvalidArchitecture(f"output layer must have 2 units, got {dims[-1]}")
    if any(d < 1 for d in dims):
        raise InvalidArchitecture("layer sizes must be positive")
    return dims


def init_model(layer_dims, seed: int = 0, activation: str = "relu") -> ClassifierModel:
    """Glorot-uniform weights and zero biases drawn from a seeded generator."""
    dims = _check_dims(layer_dims)
    if activation not in ACTIVATIONS:
        raise InvalidArchitecture(f"unknown activation {activation!r}")
    rng = make_rng(seed)
    Ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return ClassifierModel(dims, tuple(Ws), tuple(bs), activation)


def default_dims(d: int) -> List[int]:
    return [int(d), 128, 128, 2]


# -- forward / backward -------------------------------------------------------

def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, h, kind):
    return z > 0 if kind == "relu" else 1.0 - h * h


def _as_batch(model: ClassifierModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.input_dim:
        raise InvalidParameter(
            f"inputs have {X.shape[1]} columns, model expects {model.input_dim}")
    return X


def _forward_cache(model: ClassifierModel, X):
    hs = [X]
    zs = []
    h = X
    last = model.n_layers - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        zs.append(z)
        h = z if k == last else _act(z, model.activation)
        hs.append(h)
    return zs, hs


def _backward(model: ClassifierModel, zs, hs, dlogits):
    """Backprop ``dL/dlogits``; returns (param grads, dL/dX)."""
    grads = [None] * (2 * model.n_layers)
    delta = dlogits
    for k in range(model.n_layers - 1, -1, -1):
        grads[2 * k] = hs[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        delta = delta @ model.weights[k].T
        if k > 0:
            delta = delta * _act_grad(zs[k - 1], hs[k], model.activation)
    return grads, delta


def logits(model: ClassifierModel, X) -> np.ndarray:
    X = _as_batch(model, X)
    return _forward_cache(model, X)[1][-1]


def forward(model: ClassifierModel, X) -> np.ndarray:
    """Class probabilities, one row per sample, each entry in ``(0, 1)``."""
    p = softmax(logits(model, X), axis=1)
    p = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    return p / p.sum(axis=1, keepdims=True)


def one_hot(y, k: int = 2) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp)
    out = np.zeros((y.size, k))
    out[np.arange(y.size), y] = 1.0
    return out


def _labels(Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = one_hot(Y.astype(np.intp))
    return Y


def ce_grad(model: ClassifierModel, X, Y):
    """Mean cross-entropy and its parameter gradients.

    ``Y`` is either one-hot rows or integer class ids.
    """
    X = _as_batch(model, X)
    Y = _labels(Y)
    zs, hs = _forward_cache(model, X)
    logp = log_softmax(hs[-1], axis=1)
    N = X.shape[0]
    loss = float(-np.sum(Y * logp) / N)
    dlogits = (np.exp(logp) - Y) / N
    grads, _ = _backward(model, zs, hs, dlogits)
    return loss, grads


def _kl_logits(zq, logp):
    """Per-row ``KL(softmax(zq) || p)`` and its gradient in ``zq``."""
    logq = log_softmax(zq, axis=1)
    q = np.exp(logq)
    ell = logq - logp
    kl = np.sum(q * ell, axis=1)
    return kl, q * (ell - kl[:, None])


# -- adversarial direction ----------------------------------------------------

def _unit_rows(v):
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(norms > 0, norms, 1.0)


def vat_directions(model: ClassifierModel, X, eta: float, power_iters: int = 1,
                   xi: float = 1e-6, rng=None, seed: int = 0):
    """Batch version of :func:`vat_direction`.

    Returns ``(R, degenerate)`` where every row of ``R`` has norm ``eta``.
    Rows whose KL gradient vanished at every iteration keep their random
    starting direction and are flagged in ``degenerate``.
    """
    if not eta > 0:
        raise InvalidParameter("eta must be positive")
    if power_iters < 1:
        raise InvalidParameter("power_iters must be >= 1")
    X = _as_batch(model, X)
    rng = make_rng(seed) if rng is None else rng
    logp = log_softmax(logits(model, X), axis=1)
    d = _unit_rows(rng.standard_normal(X.shape))
    moved = np.zeros(X.shape[0], dtype=bool)
    for _ in range(power_iters):
        zs, hs = _forward_cache(model, X + xi * d)
        _, dz = _kl_logits(hs[-1], logp)
        _, g = _backward(model, zs, hs, dz)
        norms = np.linalg.norm(g, axis=1)
        ok = np.isfinite(norms) & (norms > 0)
        d[ok] = g[ok] / norms[ok, None]
        moved |= ok
    R = eta * _unit_rows(d)
    return R, ~moved


def vat_direction(model: ClassifierModel, x, eta: float, power_iters: int = 1,
                  xi: float = 1e-6, seed: int = 0):
    """Adversarial perturbation of norm ``eta`` at a single point.

    Power iteration on the Hessian of ``r -> KL(f(x + r) || f(x))`` at
    ``r = 0``, using a finite difference of step ``xi``.

    Returns
    -------
    r : ndarray of shape (d,)
    degenerate : bool
        True when the gradient was zero at every step; ``r`` is then the
        seeded random starting direction.
    """
    R, flags = vat_directions(model, np.asarray(x, dtype=np.float64)[None, :], eta,
                              power_iters, xi, seed=seed)
    return R[0], bool(flags[0])


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``eta`` is in data units; ``xi=None`` uses ``1e-6`` times the RMS spread
    of the training inputs.
    """

    omega: float = 0.001
    eta: float = 0.25
    power_iters: int = 1
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    mode: str = "AR"
    seed: int = 0
    xi: Optional[float] = None
    optimizer: str = "adam"
    log_every: int = 1

    def __post_init__(self):
        if not self.eta > 0:
            raise InvalidParameter("eta must be positive")
        if self.power_iters < 1:
            raise InvalidParameter("power_iters must be >= 1")
        if self.mode.upper() not in ("CE", "AR"):
            raise InvalidParameter(f"mode must be CE or AR, got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidParameter(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.log_every < 1:
            raise InvalidParameter("lr, epochs and batch_size must be positive")
        object.__setattr__(self, "mode", self.mode.upper())


class Adam:
    """Adam state for a list of parameter arrays."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        step = self.lr / c1
        out = []
        for m, v, p, g in zip(self.m, self.v, params, grads):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            out.append(p - step * m / (np.sqrt(v / c2) + self.eps))
        return out


class SGD:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params, grads):
        return [p - self.lr * g for p, g in zip(params, grads)]


def make_optimizer(config: TrainConfig):
    return Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)


def data_scale(X) -> float:
    X = np.asarray(X, dtype=np.float64)
    s = float(np.sqrt(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1))))
    return s if s > 0 else 1.0


def ar_loss_grad(model: ClassifierModel, X, Y, omega: float, R):
    """``omega * CE + mean KL(f(X + R) || f(X))`` and its parameter gradients."""
    X = _as_batch(model, X)
    Y = _labels(Y)
    N = X.shape[0]
    zs, hs = _forward_cache(model, X)
    logp = log_softmax(hs[-1], axis=1)
    ce = float(-np.sum(Y * logp) / N)
    g_ce, _ = _backward(model, zs, hs, omega * (np.exp(logp) - Y) / N)
    zs_a, hs_a = _forward_cache(model, X + R)
    kl, dz = _kl_logits(hs_a[-1], logp)
    g_kl, _ = _backward(model, zs_a, hs_a, dz / N)
    loss = omega * ce + float(kl.mean())
    return loss, [a + b for a, b in zip(g_ce, g_kl)], ce


def ar_step(model: ClassifierModel, X, Y, config: TrainConfig, optimizer=None, rng=None):
    """One optimizer step on the adversarially regularized loss.

    Returns ``(loss, new_model)``; the loss is evaluated before the step.
    """
    if config.mode != "AR":
        raise InvalidParameter("ar_step needs mode='AR'")
    X = _as_batch(model, X)
    rng = make_rng(config.seed) if rng is None else rng
    xi = config.xi if config.xi is not None else 1e-6 * data_scale(X)
    R, _ = vat_directions(model, X, config.eta, config.power_iters, xi, rng=rng)
    loss, grads, _ = ar_loss_grad(model, X, Y, config.omega, R)
    optimizer = optimizer or make_optimizer(config)
    return loss, model.with_params(optimizer.step(model.params(), grads))


def ce_step(model: ClassifierModel, X, Y, config: TrainConfig, optimizer=None):
    loss, grads = ce_grad(model, X, Y)
    optimizer = optimizer or make_optimizer(config)
    return loss, model.with_params(optimizer.step(model.params(), grads))


def dataset_xy(dataset: ContaminatedDataset):
    """Stack both sides with labels 0 (source) and 1 (target)."""
    X = np.vstack([dataset.source.points, dataset.target.points])
    y = np.concatenate([np.zeros(dataset.source.n, dtype=np.intp),
                        np.ones(dataset.target.n, dtype=np.intp)])
    return X, y


@dataclass
class TrainHistory:
    epoch: List[int] = field(default_factory=list)
    ce_loss: List[float] = field(default_factory=list)
    ar_loss: List[float] = field(default_factory=list)
    accuracy: List[float] = field(default_factory=list)

    def append(self, epoch, ce, ar, acc):
        self.epoch.append(int(epoch))
        self.ce_loss.append(float(ce))
        self.ar_loss.append(float(ar))
        self.accuracy.append(float(acc))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "ce_loss", "ar_loss", "accuracy"])
            for row in zip(self.epoch, self.ce_loss, self.ar_loss, self.accuracy):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _epoch_metrics(model, X, y, config, xi):
    Y = one_hot(y)
    R, _ = vat_directions(model, X, config.eta, config.power_iters, xi,
                          rng=make_rng(config.seed + 7919))
    ar, _, ce = ar_loss_grad(model, X, Y, config.omega, R)
    acc = float(np.mean(np.argmax(logits(model, X), axis=1) == y))
    return ce, ar, acc


def train(model: ClassifierModel, dataset: ContaminatedDataset, config: TrainConfig):
    """Fit the classifier to separate source from target samples.

    Minibatches are drawn from a generator seeded with ``config.seed``.
    History row 0 holds the metrics before training; later rows are logged
    every ``config.log_every`` epochs and at the last epoch.
    """
    if dataset is None or dataset.source.n + dataset.target.n == 0:
        raise InvalidDataset("empty dataset")
    X, y = dataset_xy(dataset)
    if X.shape[1] != model.input_dim:
        raise InvalidDataset(
            f"dataset dimension {X.shape[1]} does not match model input {model.input_dim}")
    Y = one_hot(y)
    xi = config.xi if config.xi is not None else 1e-6 * data_scale(X)
    rng = make_rng(config.seed)
    opt = make_optimizer(config)
    hist = TrainHistory()
    hist.append(0, *_epoch_metrics(model, X, y, config, xi))
    N = X.shape[0]
    bs = min(config.batch_size, N)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(N)
        for start in range(0, N, bs):
            idx = order[start:start + bs]
            if config.mode == "AR":
                R, _ = vat_directions(model, X[idx], config.eta, config.power_iters, xi, rng=rng)
                _, grads, _ = ar_loss_grad(model, X[idx], Y[idx], config.omega, R)
            else:
                _, grads = ce_grad(model, X[idx], Y[idx])
            model = model.with_params(opt.step(model.params(), grads))
        if epoch % config.log_every == 0 or epoch == config.epochs:
            hist.append(epoch, *_epoch_metrics(model, X, y, config, xi))
    return model, hist


def predict_side(model: ClassifierModel, X, assigned=None):
    """Predicted side (0 source, 1 target) and its probability.

    Exact ties go to the ``assigned`` side (default source), so a tie never
    marks a sample as an outlier.
    """
    P = forward(model, X)
    n = P.shape[0]
    if assigned is None:
        assigned = np.zeros(n, dtype=np.intp)
    else:
        assigned = np.broadcast_to(np.asarray(assigned, dtype=np.intp), (n,))
    side = np.where(P[:, 1] > P[:, 0], TARGET, SOURCE)
    tie = P[:, 0] == P[:, 1]
    side = np.where(tie, assigned, side)
    conf = P[np.arange(n), side]
    return side, conf


# -- persistence --------------------------------------------------------------

def save_model(model: ClassifierModel, path, config: Optional[TrainConfig] = None) -> None:
    doc = {
        "layer_dims": list(model.layer_dims),
        "activation": model.activation,
        "params": model.flat_params().tolist(),
        "config": asdict(config) if config is not None else None,
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> Tuple[ClassifierModel, Optional[TrainConfig]]:
    doc = json.loads(Path(path).read_text())
    model = init_model(doc["layer_dims"], 0, doc.get("activation", "relu"))
    model = model.from_flat(np.asarray(doc["params"], dtype=np.float64))
    cfg = TrainConfig(**doc["config"]) if doc.get("config") else None
    return model, cfg
