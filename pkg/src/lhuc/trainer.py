"""Mini-batch SGD training of speaker-independent and SAT-LHUC networks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .model import (
    SI_CLUSTER,
    NetworkParams,
    TransformBank,
    backward,
    forward,
)
from .synth import FrameDataset
from .tensor import mse, softmax_xent

__all__ = [
    "GRANULARITIES",
    "NewbobConfig",
    "TrainConfig",
    "SatConfig",
    "RouteAssignment",
    "NewbobState",
    "EpochRecord",
    "TrainingDivergedError",
    "MissingIdsError",
    "assign_routes",
    "batch_loss",
    "sgd_step",
    "newbob_update",
    "train_si",
    "train_sat",
]

log = logging.getLogger(__name__)

GRANULARITIES = ("frame", "segment", "speaker")


class TrainingDivergedError(FloatingPointError):
    pass


class MissingIdsError(ValueError):
    pass


@dataclass
class NewbobConfig:
    ramp_threshold: float = 0.005
    stop_threshold: float = 0.0005
    holdout_fraction: float = 0.1

    def validate(self):
        if not 0.0 < self.stop_threshold <= self.ramp_threshold < 1.0:
            raise ValueError("newbob thresholds must satisfy 0 < stop <= ramp < 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        return self


@dataclass
class TrainConfig:
    initial_lr: float = 0.08
    batch_size: int = 32
    max_epochs: int = 20
    newbob: NewbobConfig = field(default_factory=NewbobConfig)
    seed: int = 0

    def validate(self):
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        self.newbob.validate()
        return self


@dataclass
class SatConfig:
    gamma: float = 0.5
    granularity: str = "frame"
    seed: int = 0
    transform_lr_scale: float = 1.0

    def validate(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        if not self.transform_lr_scale > 0:
            raise ValueError("transform_lr_scale must be positive")
        return self


@dataclass
class RouteAssignment:
    routes: np.ndarray
    si_fraction: float
    granularity: str


def assign_routes(dataset: FrameDataset, cfg: SatConfig) -> RouteAssignment:
    """Draw per-frame SI/SD routes.

    A frame routed SI goes through cluster 0, otherwise through its own
    speaker's transform. At frame granularity each frame is SI with
    probability ``gamma``. At segment or speaker granularity whole units are
    routed together: units are put in a seeded random order and the prefix
    whose frame count is closest to ``gamma * frames`` is made SI.
    """
    cfg.validate()
    n = len(dataset)
    rng = np.random.default_rng(cfg.seed)
    if cfg.granularity == "frame":
        is_si = rng.random(n) < cfg.gamma
    else:
        if cfg.granularity == "segment":
            if dataset.segments is None:
                raise MissingIdsError("segment granularity needs segment ids")
            unit_of = dataset.segments
        else:
            unit_of = dataset.speakers
        units, inverse, mass = np.unique(unit_of, return_inverse=True, return_counts=True)
        order = rng.permutation(len(units))
        cum = np.concatenate([[0], np.cumsum(mass[order])])
        k = int(np.argmin(np.abs(cum - cfg.gamma * n)))
        unit_si = np.zeros(len(units), dtype=bool)
        unit_si[order[:k]] = True
        is_si = unit_si[inverse]
    routes = np.where(is_si, SI_CLUSTER, dataset.speakers).astype(np.int64)
    return RouteAssignment(routes, float(is_si.mean()) if n else 0.0, cfg.granularity)


def batch_loss(params: NetworkParams, bank, routes, X, y):
    """Forward a batch and return ``(loss, trace, d loss / d output)``."""
    trace = forward(params, bank, routes, X)
    if params.output_kind == "softmax_classifier":
        loss, grad = softmax_xent(trace.output, y)
    else:
        loss, grad = mse(trace.output, y)
    return loss, trace, grad


def sgd_step(
    params: NetworkParams,
    bank: TransformBank | None,
    X,
    y,
    routes,
    lr: float,
    update_si: bool = True,
    layer_mask=None,
    r_lr: float | None = None,
):
    """One in-place SGD step on a batch; returns ``(params, bank, loss)``.

    Only clusters that have frames in ``routes`` are touched. ``layer_mask``
    restricts amplitude updates to the enabled hidden layers; ``r_lr``
    overrides the step size for amplitude parameters.
    """
    r_lr = lr if r_lr is None else r_lr
    if lr < 0 or r_lr < 0:
        raise ValueError("learning rate must be non-negative")
    loss, trace, grad = batch_loss(params, bank, routes, X, y)
    g = backward(trace, params, grad)
    if update_si:
        for W, b, gW, gb in zip(params.weights, params.biases, g.weights, g.biases):
            W -= lr * gW
            b -= lr * gb
    if bank is not None:
        for cid, grads in g.r.items():
            t = bank[cid]
            for l, gr in enumerate(grads):
                if layer_mask is None or layer_mask[l]:
                    t.r[l] -= r_lr * gr
    return params, bank, loss


@dataclass
class NewbobState:
    lr: float
    best: float
    halved: bool = False
    config: NewbobConfig = field(default_factory=NewbobConfig)

    def update(self, cv_loss: float) -> tuple[float, str]:
        improvement = (self.best - cv_loss) / abs(self.best) if self.best != 0 else 0.0
        if cv_loss < self.best:
            self.best = cv_loss
        if improvement >= self.config.ramp_threshold:
            return self.lr, "continue"
        if improvement < self.config.stop_threshold and self.halved:
            return self.lr, "stop"
        self.lr *= 0.5
        self.halved = True
        return self.lr, "halve_and_continue"


def newbob_update(state: NewbobState, epoch_cv_loss: float) -> tuple[float, str]:
    return state.update(epoch_cv_loss)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    cv_loss: float
    decision: str


def _split_holdout(n: int, cfg: TrainConfig):
    frac = cfg.newbob.holdout_fraction
    perm = np.random.default_rng([cfg.seed, 0]).permutation(n)
    n_cv = int(round(frac * n))
    if n_cv == 0 or n_cv == n:
        idx = np.arange(n)
        return idx, idx
    return np.sort(perm[n_cv:]), np.sort(perm[:n_cv])


def _eval_loss(params, bank, X, y, batch=4096) -> float:
    total = 0.0
    for start in range(0, len(X), batch):
        Xb = X[start:start + batch]
        loss, _, _ = batch_loss(params, bank, None, Xb, y[start:start + batch])
        total += loss * len(Xb)
    return total / len(X)


def _run(
    dataset: FrameDataset,
    params: NetworkParams,
    bank: TransformBank | None,
    cfg: TrainConfig,
    routes_for_epoch: Callable[[FrameDataset, int], np.ndarray] | None,
    callback=None,
    r_lr_scale: float = 1.0,
):
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = params.copy()
    bank = None if bank is None else bank.copy()
    train_idx, cv_idx = _split_holdout(len(dataset), cfg)
    train = dataset.subset(train_idx)
    X_cv, y_cv = dataset.features[cv_idx], dataset.labels[cv_idx]
    cv_bank = None if bank is None else bank  # evaluated through cluster 0

    state = NewbobState(cfg.initial_lr, _eval_loss(params, cv_bank, X_cv, y_cv), config=cfg.newbob)
    best_cv = state.best
    best = (params.copy(), None if bank is None else bank.copy())
    curve: list[EpochRecord] = []
    n = len(train)
    for epoch in range(cfg.max_epochs):
        lr = state.lr
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)
        routes = None if routes_for_epoch is None else routes_for_epoch(train, epoch)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            r = None if routes is None else routes[idx]
            _, _, loss = sgd_step(params, bank, train.features[idx], train.labels[idx], r, lr,
                                  r_lr=lr * r_lr_scale)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            total += loss * len(idx)
        cv = _eval_loss(params, cv_bank, X_cv, y_cv)
        if not np.isfinite(cv):
            raise TrainingDivergedError(f"non-finite cross-validation loss at epoch {epoch}")
        _, decision = state.update(cv)
        rec = EpochRecord(epoch, lr, total / n, cv, decision)
        curve.append(rec)
        log.info("epoch %d lr %.5g train %.5f cv %.5f -> %s", epoch, lr, rec.train_loss, cv, decision)
        if callback is not None:
            callback(rec)
        if cv < best_cv:
            best_cv = cv
            best = (params.copy(), None if bank is None else bank.copy())
        if decision == "stop":
            break
    return best[0], best[1], curve


def train_si(dataset: FrameDataset, params_init: NetworkParams, cfg: TrainConfig, callback=None):
    """Speaker-independent training; returns ``(params, curve)`` at best CV loss."""
    if cfg.max_epochs == 0:
        return params_init, []
    params, _, curve = _run(dataset, params_init, None, cfg, None, callback)
    return params, curve


def train_sat(
    dataset: FrameDataset,
    params_init: NetworkParams,
    cfg: TrainConfig,
    sat: SatConfig,
    kind: str = "exp",
    callback=None,
):
    """SAT-LHUC training; returns ``(params, bank, curve)``.

    The bank holds cluster 0 plus one transform per training speaker.
    Frame-level routes are redrawn every epoch, segment and speaker routes
    are drawn once.
    """
    sat.validate()
    speakers = np.unique(dataset.speakers)
    if np.any(speakers == SI_CLUSTER):
        raise ValueError("speaker id 0 is reserved for the speaker-independent transform")
    bank = TransformBank.for_clusters(params_init, [SI_CLUSTER, *speakers.tolist()], kind)
    if cfg.max_epochs == 0:
        return params_init, bank, []

    fixed: dict = {}

    def routes_for_epoch(train: FrameDataset, epoch: int) -> np.ndarray:
        if sat.granularity == "frame":
            return assign_routes(train, replace(sat, seed=_mix(sat.seed, epoch))).routes
        if "routes" not in fixed:
            fixed["routes"] = assign_routes(train, sat).routes
        return fixed["routes"]

    return _run(dataset, params_init, bank, cfg, routes_for_epoch, callback, sat.transform_lr_scale)


def _mix(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1, np.uint64)[0])
