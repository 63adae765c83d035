"""Deterministic mini-batch SGD with standard or transferred weight decay.

Update on weights: ``w <- w - lr(epoch) * (g + 2*lam*d)`` with ``d = w``
(standard decay) or ``d = T^-1(w)`` (transferred decay). Biases receive the
risk gradient only. With momentum ``m`` the step is
``v <- m*v + lr*(g + 2*lam*d); w <- w - v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import network
from .errors import InvalidArgument
from .params import NetworkSpec, ParamVector
from .transform import hmwi_init, transform_T

DECAY_MODES = ("standard", "transferred", "none")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 128
    lr_initial: float = 0.01
    lr_drops: tuple = ((120, 10.0), (160, 10.0))
    momentum: float = 0.0
    decay: float = 1e-4
    decay_mode: str = "standard"
    seed: int = 0
    shuffle: bool = True
    eval_batch: int = 500

    def __post_init__(self):
        if self.lr_initial <= 0:
            raise InvalidArgument("lr_initial must be positive")
        if self.decay < 0:
            raise InvalidArgument("weight decay must be >= 0")
        if self.decay_mode not in DECAY_MODES:
            raise InvalidArgument(f"decay_mode must be one of {DECAY_MODES}")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        epochs = [e for e, _ in self.lr_drops]
        if epochs != sorted(epochs) or any(d < 1 for _, d in self.lr_drops):
            raise InvalidArgument("lr_drops must be sorted by epoch with divisors >= 1")

    def lr(self, epoch: int) -> float:
        """Learning rate while training epoch ``epoch`` (0-based)."""
        lr = self.lr_initial
        for drop_epoch, divisor in self.lr_drops:
            if epoch >= drop_epoch:
                lr /= divisor
        return lr


@dataclass
class Metrics:
    epoch: list = field(default_factory=list)
    risk: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    error: list = field(default_factory=list)
    batch_risk: list = field(default_factory=list)

    COLUMNS = ("epoch", "risk", "cost", "penalty", "error")

    def record(self, epoch, risk, penalty, decay, error):
        self.epoch.append(epoch)
        self.risk.append(risk)
        self.penalty.append(penalty)
        self.cost.append(risk + decay * penalty)
        self.error.append(error)

    def rows(self):
        return list(zip(self.epoch, self.risk, self.cost, self.penalty, self.error))


def decay_penalty(params: ParamVector, mode: str) -> float:
    """Squared L2 norm of the weights (standard) or of ``T^-1`` of them (transferred)."""
    return float(np.sum(decay_direction(params, mode) ** 2))


def decay_direction(params: ParamVector, mode: str) -> np.ndarray:
    """Half the penalty gradient, as a full-length vector that is zero on biases."""
    if not isinstance(params, ParamVector):
        raise InvalidArgument("decay needs a block-structured ParamVector")
    layout = params.spec.layout
    if mode == "none":
        return np.zeros(layout.size)
    if mode == "standard":
        d = params.flatten()
    elif mode == "transferred":
        d = params.flatten()
        d[layout.id_index] -= 1.0
    else:
        raise InvalidArgument(f"unknown decay mode {mode!r}")
    d[~layout.weight_mask] = 0.0
    return d


def sgd_step(params: ParamVector, grads: ParamVector, config: TrainConfig, epoch: int,
             velocity: np.ndarray | None = None):
    """One SGD update; returns ``(new_params, new_velocity)`` (velocity None without momentum)."""
    if grads.data.shape != params.data.shape:
        raise InvalidArgument("gradient and parameter shapes differ")
    lr = config.lr(epoch)
    direction = grads.data
    if config.decay_mode != "none" and config.decay > 0:
        direction = direction + 2.0 * config.decay * decay_direction(params, config.decay_mode)
    update = lr * direction
    if config.momentum > 0:
        velocity = update if velocity is None else config.momentum * velocity + update
        update = velocity
    return params.replace(data=params.data - update), velocity


def batch_order(seed: int, epoch: int, n: int, shuffle: bool = True) -> np.ndarray:
    """Sample order in an epoch, a pure function of (seed, epoch)."""
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def evaluate(params: ParamVector, spec: NetworkSpec, dataset, chunk: int = 500):
    """Mean cross-entropy and classification error over a dataset."""
    from .engine import softmax_xent_per_sample

    total, wrong = 0.0, 0
    for start in range(0, len(dataset), chunk):
        x = dataset.images[start:start + chunk]
        y = dataset.labels[start:start + chunk]
        logits, _ = network.forward(params, spec, x)
        losses, _ = softmax_xent_per_sample(logits, y)
        total += float(losses.sum())
        wrong += int((logits.argmax(axis=1) != y).sum())
    n = len(dataset)
    return total / n, wrong / n


def _epoch_batches(dataset, config, epoch):
    order = batch_order(config.seed, epoch, len(dataset), config.shuffle)
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def _record(metrics, params, spec, dataset, test, config, epoch):
    risk, _ = evaluate(params, spec, dataset, config.eval_batch)
    error = evaluate(params, spec, test, config.eval_batch)[1] if test is not None else float("nan")
    metrics.record(epoch, risk, decay_penalty(params, config.decay_mode), config.decay, error)


def train(spec: NetworkSpec, params: ParamVector, dataset, config: TrainConfig,
          test=None, on_epoch=None):
    """Train for ``config.epochs`` epochs; metrics row 0 describes the initial parameters.

    ``on_epoch(epoch, params, metrics)`` is called after each recorded row and
    may return True to stop early.
    """
    if len(dataset) == 0:
        raise InvalidArgument("cannot train on an empty dataset")
    params.check_compatible(spec)
    metrics = Metrics()
    _record(metrics, params, spec, dataset, test, config, 0)
    if on_epoch is not None and on_epoch(0, params, metrics):
        return params, metrics
    velocity = None
    for epoch in range(config.epochs):
        for x, y in _epoch_batches(dataset, config, epoch):
            risk, grads = network.backward(params, spec, x, y)
            metrics.batch_risk.append(risk)
            params, velocity = sgd_step(params, grads, config, epoch, velocity)
        _record(metrics, params, spec, dataset, test, config, epoch + 1)
        if on_epoch is not None and on_epoch(epoch + 1, params, metrics):
            break
    return params, metrics


@dataclass
class PairResult:
    plain: ParamVector
    residual: ParamVector
    divergence: np.ndarray  # max |p_t - T(r_t)| for t = 0 .. iterations
    plain_risk: np.ndarray  # mini-batch risk at every iteration
    residual_risk: np.ndarray


def train_equivalent_pair(spec: NetworkSpec, dataset, config: TrainConfig, seed=None,
                          iterations: int | None = None, r0: ParamVector | None = None,
                          p0: ParamVector | None = None) -> PairResult:
    """Train plain p (transferred decay) and residual r (standard decay) side by side.

    ``r0`` defaults to an HMWI draw and ``p0`` to ``T(r0)``. Both runs consume
    the same mini-batch sequence. Stops after ``iterations`` steps or
    ``config.epochs`` epochs, whichever comes first.
    """
    res_spec = spec.with_kind("residual")
    plain_spec = spec.with_kind("plain")
    if r0 is None:
        r0 = hmwi_init(res_spec, config.seed if seed is None else seed)
    if p0 is None:
        p0 = transform_T(r0)
    plain_cfg = _with_mode(config, "transferred")
    res_cfg = _with_mode(config, "standard")
    p, r = p0, r0
    vp = vr = None
    div = [float(np.max(np.abs(p.data - transform_T(r).data)))]
    risk_p, risk_r = [], []
    epochs = config.epochs if iterations is None else max(config.epochs, 1 << 30)
    for epoch in range(epochs):
        for x, y in _epoch_batches(dataset, config, epoch):
            if iterations is not None and len(risk_p) >= iterations:
                break
            lp, gp = network.backward(p, plain_spec, x, y)
            lr_, gr = network.backward(r, res_spec, x, y)
            p, vp = sgd_step(p, gp, plain_cfg, epoch, vp)
            r, vr = sgd_step(r, gr, res_cfg, epoch, vr)
            risk_p.append(lp)
            risk_r.append(lr_)
            div.append(float(np.max(np.abs(p.data - transform_T(r).data))))
        else:
            continue
        break
    return PairResult(p, r, np.asarray(div), np.asarray(risk_p), np.asarray(risk_r))


def _with_mode(config: TrainConfig, mode: str) -> TrainConfig:
    from dataclasses import replace

    return replace(config, decay_mode=mode)
