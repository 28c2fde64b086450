"""Test-only LHUC adaptation of a frozen network.

The speaker-independent weights are never modified here; adaptation only
estimates amplitude parameters for a new cluster, either from supplied
labels or from first-pass pseudo-labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    SI_CLUSTER,
    EffectiveScale,
    LhucTransform,
    NetworkParams,
    TransformBank,
    forward,
)
from .synth import FrameDataset, corrupt_labels
from .tensor import ShapeError, mse, softmax_xent
from .trainer import TrainingDivergedError, sgd_step

__all__ = [
    "AdaptConfig",
    "Metrics",
    "FactorisedReport",
    "UnsupportedOperationError",
    "EmptyAdaptationSetError",
    "predict_outputs",
    "pseudo_label",
    "adapt",
    "evaluate",
    "two_pass_adapt",
    "one_shot_apply",
    "interpolate",
    "factorised_experiment",
    "interleave_speakers",
]

_ADAPT_CLUSTER = 1


class UnsupportedOperationError(TypeError):
    pass


class EmptyAdaptationSetError(ValueError):
    pass


@dataclass
class AdaptConfig:
    lr: float = 0.8
    sweeps: int = 1
    kind: str = "exp"
    layers_enabled: list | None = None
    supervised: bool = False
    batch_size: int = 32

    def validate(self):
        if not self.lr > 0:
            raise ValueError("adaptation lr must be positive")
        if self.sweeps < 0:
            raise ValueError("sweeps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        return self

    def layer_mask(self, n_hidden: int) -> list[bool]:
        if self.layers_enabled is None:
            return [True] * n_hidden
        if len(self.layers_enabled) != n_hidden:
            raise ValueError(f"layers_enabled has {len(self.layers_enabled)} flags for {n_hidden} hidden layers")
        return [bool(f) for f in self.layers_enabled]


@dataclass
class Metrics:
    frame_error_rate: float | None
    mean_loss: float
    frames: int
    per_cluster: dict = field(default_factory=dict)


def _model_arg(model):
    """Normalise the model argument accepted by evaluation helpers."""
    if model is None or isinstance(model, (TransformBank, LhucTransform, EffectiveScale)):
        return model
    raise TypeError(f"unsupported transform argument {type(model).__name__}")


def predict_outputs(params: NetworkParams, model, X, chunk: int = 8192) -> np.ndarray:
    """Final-layer outputs (logits or regression values).

    A :class:`TransformBank` is used in speaker-independent mode (cluster 0).
    """
    model = _model_arg(model)
    X = np.asarray(X, dtype=np.float64)
    parts = [forward(params, model, None, X[s:s + chunk]).output for s in range(0, len(X), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, params.n_outputs))


def pseudo_label(params: NetworkParams, model, dataset: FrameDataset) -> np.ndarray:
    """Argmax class per frame; ties go to the lowest class index."""
    if params.output_kind != "softmax_classifier":
        raise UnsupportedOperationError("pseudo-labels need a classifier output layer")
    return np.argmax(predict_outputs(params, model, dataset.features), axis=1).astype(np.int64)


def adapt(
    params: NetworkParams,
    dataset: FrameDataset,
    labels,
    cfg: AdaptConfig,
    init: LhucTransform | None = None,
) -> LhucTransform:
    """Estimate one cluster's transform by SGD on its amplitudes only.

    Batches follow the dataset's frame order. Starts from ``init`` if given
    (e.g. the speaker-independent transform of a SAT model), otherwise from
    unit scales.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise EmptyAdaptationSetError("adaptation set is empty")
    labels = np.asarray(labels)
    if labels.shape[0] != len(dataset):
        raise ShapeError(f"{labels.shape[0]} labels for {len(dataset)} frames", labels.shape, (len(dataset),))
    if init is None:
        transform = LhucTransform.identity(params, cfg.kind)
    else:
        transform = init.copy()
    bank = TransformBank(transform.kind, {_ADAPT_CLUSTER: transform})
    mask = cfg.layer_mask(len(params.hidden_sizes))
    X = dataset.features
    n = len(X)
    routes = np.full(min(cfg.batch_size, n), _ADAPT_CLUSTER, dtype=np.int64)
    for sweep in range(cfg.sweeps):
        for start in range(0, n, cfg.batch_size):
            stop = min(start + cfg.batch_size, n)
            _, _, loss = sgd_step(params, bank, X[start:stop], labels[start:stop], routes[: stop - start], cfg.lr,
                                  update_si=False, layer_mask=mask)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"adaptation loss is non-finite in sweep {sweep} at frame {start}")
    if not all(np.all(np.isfinite(v)) for v in bank[_ADAPT_CLUSTER].r):
        raise TrainingDivergedError("adaptation produced non-finite amplitudes")
    return bank[_ADAPT_CLUSTER]


def evaluate(params: NetworkParams, model, dataset: FrameDataset) -> Metrics:
    """Frame error rate and mean loss, with a per-speaker breakdown."""
    out = predict_outputs(params, model, dataset.features)
    n = len(dataset)
    if params.output_kind == "softmax_classifier":
        if n == 0:
            return Metrics(0.0, 0.0, 0, {})
        errors = np.argmax(out, axis=1) != dataset.labels
        shifted = out - out.max(axis=1, keepdims=True)
        nll = np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(n), dataset.labels]
        per = {}
        for s in np.unique(dataset.speakers):
            m = dataset.speakers == s
            per[int(s)] = {"fer": float(errors[m].mean()), "loss": float(nll[m].mean()), "frames": int(m.sum())}
        return Metrics(float(errors.mean()), float(nll.mean()), n, per)
    loss, _ = mse(out, dataset.labels) if n else (0.0, None)
    return Metrics(None, loss, n, {})


def two_pass_adapt(
    params: NetworkParams,
    bank_or_none,
    dataset: FrameDataset,
    cfg: AdaptConfig,
    label_corruption: float = 0.0,
    seed: int = 0,
    adaptation_set: FrameDataset | None = None,
) -> tuple[LhucTransform, Metrics]:
    """First-pass SI decoding, adaptation on its labels, re-evaluation.

    A SAT bank decodes the first pass through cluster 0; the new transform
    always starts from unit scales. With ``cfg.supervised`` the true labels
    replace the pseudo-labels. The transform is estimated on
    ``adaptation_set`` (defaults to ``dataset``) and evaluated on
    ``dataset``.
    """
    if isinstance(bank_or_none, TransformBank) and SI_CLUSTER not in bank_or_none:
        raise ValueError("a SAT bank needs the speaker-independent cluster 0 for first-pass decoding")
    model = _model_arg(bank_or_none)
    adapt_data = dataset if adaptation_set is None else adaptation_set
    if cfg.supervised:
        labels = adapt_data.labels
    else:
        labels = pseudo_label(params, model, adapt_data)
    if label_corruption > 0:
        labels = corrupt_labels(labels, label_corruption, params.n_outputs, seed)
    transform = adapt(params, adapt_data, labels, cfg)
    return transform, evaluate(params, transform, dataset)


def one_shot_apply(params: NetworkParams, transform: LhucTransform | EffectiveScale, dataset: FrameDataset) -> Metrics:
    """Evaluate new data with a previously estimated transform, no re-estimation."""
    widths = [len(v) for v in (transform.r if isinstance(transform, LhucTransform) else transform.scales)]
    if widths != list(params.hidden_sizes):
        raise ShapeError(f"transform widths {widths} do not match hidden sizes {list(params.hidden_sizes)}")
    return evaluate(params, transform, dataset)


def interpolate(scale_S: EffectiveScale, scale_E: EffectiveScale, alpha: float) -> EffectiveScale:
    """Convex combination ``alpha * S + (1 - alpha) * E`` in scale space."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if [s.shape for s in scale_S.scales] != [e.shape for e in scale_E.scales]:
        raise ShapeError("speaker and environment scales differ in shape")
    return EffectiveScale([alpha * s + (1.0 - alpha) * e for s, e in zip(scale_S.scales, scale_E.scales)])


@dataclass
class FactorisedReport:
    unadapted: Metrics
    speaker: Metrics
    environment: Metrics
    joint: Metrics
    interpolated: dict  # alpha -> Metrics


def _pooled(cells: list[Metrics]) -> Metrics:
    frames = sum(m.frames for m in cells)
    fer = sum(m.frame_error_rate * m.frames for m in cells) / frames
    loss = sum(m.mean_loss * m.frames for m in cells) / frames
    per = {}
    for m in cells:
        for cid, v in m.per_cluster.items():
            acc = per.setdefault(cid, {"errors": 0.0, "loss": 0.0, "frames": 0})
            acc["errors"] += v["fer"] * v["frames"]
            acc["loss"] += v["loss"] * v["frames"]
            acc["frames"] += v["frames"]
    per = {
        cid: {"fer": v["errors"] / v["frames"], "loss": v["loss"] / v["frames"], "frames": v["frames"]}
        for cid, v in sorted(per.items())
    }
    return Metrics(fer, loss, frames, per)


def interleave_speakers(dataset: FrameDataset) -> FrameDataset:
    """Round-robin frames across speakers, keeping each speaker's frame order.

    Multi-speaker adaptation pools are estimated on this order so that the
    last speaker in the pool does not dominate the final SGD steps.
    """
    rank = np.empty(len(dataset), dtype=np.int64)
    for s in np.unique(dataset.speakers):
        idx = np.flatnonzero(dataset.speakers == s)
        rank[idx] = np.arange(len(idx))
    return dataset.subset(np.lexsort((dataset.speakers, rank)))


def factorised_experiment(
    params: NetworkParams,
    dataset: FrameDataset,
    alphas: Sequence[float] = (0.5, 0.7),
    cfg: AdaptConfig | None = None,
    speakers: Sequence[int] | None = None,
    clean_environment: int = 0,
    exclude_target_from_environment: bool = True,
) -> FactorisedReport:
    """Compare speaker, environment, interpolated and joint transforms.

    For each target speaker and each environment: the speaker transform is
    estimated on the speaker's clean data, the environment transform on the
    other speakers' data in that environment, and the joint transform on the
    speaker's data in that environment. All targets are first-pass
    pseudo-labels unless ``cfg.supervised``. FERs are pooled over all
    (speaker, environment) cells.
    """
    if dataset.environments is None:
        raise ValueError("factorised adaptation needs environment ids")
    cfg = cfg or AdaptConfig()
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {a}")
    speakers = dataset.speaker_ids() if speakers is None else list(speakers)
    envs = [int(e) for e in np.unique(dataset.environments)]
    if cfg.supervised:
        labels_all = dataset.labels
    else:
        labels_all = pseudo_label(params, None, dataset)
    pseudo = dataset.with_labels(labels_all)

    def estimate(subset: FrameDataset) -> LhucTransform:
        return adapt(params, subset, subset.labels, cfg)

    cells = {k: [] for k in ("unadapted", "speaker", "environment", "joint")}
    interp = {a: [] for a in alphas}
    env_cache: dict = {}
    for s in speakers:
        clean = pseudo.where(speaker=s, environment=clean_environment)
        r_S = estimate(clean).effective() if len(clean) else None
        for e in envs:
            test = dataset.where(speaker=s, environment=e)
            if len(test) == 0:
                continue
            key = (s, e) if exclude_target_from_environment else e
            if key not in env_cache:
                env_data = pseudo.where(environment=e, exclude_speaker=s if exclude_target_from_environment else None)
                env_cache[key] = estimate(interleave_speakers(env_data)).effective()
            r_E = env_cache[key]
            r_J = estimate(pseudo.where(speaker=s, environment=e)).effective()
            S = r_S if r_S is not None else r_J
            cells["unadapted"].append(evaluate(params, None, test))
            cells["speaker"].append(evaluate(params, S, test))
            cells["environment"].append(evaluate(params, r_E, test))
            cells["joint"].append(evaluate(params, r_J, test))
            for a in alphas:
                interp[a].append(evaluate(params, interpolate(S, r_E, a), test))
    return FactorisedReport(
        _pooled(cells["unadapted"]),
        _pooled(cells["speaker"]),
        _pooled(cells["environment"]),
        _pooled(cells["joint"]),
        {a: _pooled(v) for a, v in interp.items()},
    )
