"""Seeded synthetic tasks.

Two families:

* 1-D "bump" regression, where targets are sums of Gaussian bumps.
* A multi-speaker, multi-environment classification task. Classes are
  Gaussian clouds around simplex-placed means; each speaker applies an
  invertible affine warp, each non-clean environment adds an offset along
  the line between two class means plus isotropic noise.

Every generator is a pure function of its spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "FrameDataset",
    "BumpSpec",
    "MixtureBumpSpec",
    "ClusterTaskSpec",
    "bump_function",
    "sample_bumps",
    "gen_bump",
    "gen_mixture_bump",
    "gen_multicluster",
    "gen_session",
    "oracle_predict",
    "corrupt_labels",
    "concat",
]


@dataclass
class FrameDataset:
    """Frames with labels and cluster ids.

    ``labels`` holds class indices (``n_classes`` set) or regression
    targets of shape ``(frames, outputs)`` (``n_classes`` is ``None``).
    """

    features: np.ndarray
    labels: np.ndarray
    speakers: np.ndarray
    segments: np.ndarray | None = None
    environments: np.ndarray | None = None
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got {self.features.shape}")
        n = self.features.shape[0]
        if self.n_classes is None:
            self.labels = np.asarray(self.labels, dtype=np.float64).reshape(n, -1)
        else:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        self.speakers = np.asarray(self.speakers, dtype=np.int64)
        if self.segments is not None:
            self.segments = np.asarray(self.segments, dtype=np.int64)
        if self.environments is not None:
            self.environments = np.asarray(self.environments, dtype=np.int64)
        for name in ("labels", "speakers", "segments", "environments"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} entries for {n} frames")
        if self.n_classes is not None and n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("class labels out of range")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    def subset(self, index) -> "FrameDataset":
        index = np.asarray(index)
        return FrameDataset(
            self.features[index],
            self.labels[index],
            self.speakers[index],
            None if self.segments is None else self.segments[index],
            None if self.environments is None else self.environments[index],
            self.n_classes,
        )

    def where(self, speaker=None, environment=None, exclude_speaker=None) -> "FrameDataset":
        mask = np.ones(len(self), dtype=bool)
        if speaker is not None:
            mask &= self.speakers == speaker
        if exclude_speaker is not None:
            mask &= self.speakers != exclude_speaker
        if environment is not None:
            if self.environments is None:
                raise ValueError("dataset carries no environment ids")
            mask &= self.environments == environment
        return self.subset(np.flatnonzero(mask))

    def with_labels(self, labels) -> "FrameDataset":
        return replace(self, labels=np.asarray(labels))

    def speaker_ids(self) -> list[int]:
        return [int(s) for s in np.unique(self.speakers)]


def concat(datasets: Sequence[FrameDataset]) -> FrameDataset:
    first = datasets[0]

    def cat(name):
        parts = [getattr(d, name) for d in datasets]
        return None if any(p is None for p in parts) else np.concatenate(parts)

    return FrameDataset(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        np.concatenate([d.speakers for d in datasets]),
        cat("segments"),
        cat("environments"),
        first.n_classes,
    )


# --------------------------------------------------------------------------
# bump regression


Bump = tuple[float, float, float]  # (center, width, height)


def bump_function(x, bumps: Sequence[Bump]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.zeros_like(x)
    for c, w, h in bumps:
        y = y + h * np.exp(-((x - c) ** 2) / (2.0 * w * w))
    return y


def _check_range(x_range, bump_lists):
    lo, hi = x_range
    if not lo < hi:
        raise ValueError(f"empty x_range [{lo}, {hi}]")
    for bumps in bump_lists:
        for _, w, _ in bumps:
            if w <= 0:
                raise ValueError(f"bump width must be positive, got {w}")


@dataclass
class BumpSpec:
    """Training function f1 and adaptation function f2 as Gaussian bump sums."""

    n_points: int = 2000
    x_range: tuple[float, float] = (-4.0, 4.0)
    train_bumps: list = field(default_factory=lambda: [(-1.5, 0.6, 1.0), (1.5, 0.6, 1.0)])
    adapt_bumps: list = field(default_factory=lambda: [(-1.5, 0.6, 0.4), (1.5, 0.6, 1.8)])
    noise_sd: float = 0.0
    seed: int = 0

    def validate(self):
        _check_range(self.x_range, [self.train_bumps, self.adapt_bumps])
        if self.n_points < 1 or self.noise_sd < 0:
            raise ValueError("n_points must be positive and noise_sd non-negative")
        return self


@dataclass
class MixtureBumpSpec:
    """Two competing training distributions f1(a) and f1(b)."""

    n_points: int = 2000
    x_range: tuple[float, float] = (-4.0, 4.0)
    # the modes disagree on the sign of each bump, so their average is flat
    bumps_a: list = field(default_factory=lambda: [(-1.5, 0.6, 1.0), (1.5, 0.6, -1.0)])
    bumps_b: list = field(default_factory=lambda: [(-1.5, 0.6, -1.0), (1.5, 0.6, 1.0)])
    noise_sd: float = 0.0
    seed: int = 0

    def validate(self):
        _check_range(self.x_range, [self.bumps_a, self.bumps_b])
        if self.n_points < 2 or self.noise_sd < 0:
            raise ValueError("n_points must be at least 2 and noise_sd non-negative")
        return self


def sample_bumps(bumps, n_points: int, x_range, noise_sd: float, seed, speaker: int = 1) -> FrameDataset:
    """``n_points`` uniform draws of ``x`` with targets ``f(x) + noise``."""
    _check_range(x_range, [bumps])
    rng = np.random.default_rng(seed)
    x = rng.uniform(x_range[0], x_range[1], size=n_points)
    y = bump_function(x, bumps)
    if noise_sd > 0:
        y = y + rng.normal(0.0, noise_sd, size=n_points)
    return FrameDataset(
        x[:, None],
        y[:, None],
        np.full(n_points, speaker, dtype=np.int64),
        np.zeros(n_points, dtype=np.int64),
    )


def gen_bump(spec: BumpSpec) -> tuple[FrameDataset, FrameDataset]:
    """Return ``(f1 samples, f2 samples)``."""
    _check_range(spec.x_range, [spec.train_bumps, spec.adapt_bumps])
    train = sample_bumps(spec.train_bumps, spec.n_points, spec.x_range, spec.noise_sd, [spec.seed, 1], speaker=1)
    adapt = sample_bumps(spec.adapt_bumps, spec.n_points, spec.x_range, spec.noise_sd, [spec.seed, 2], speaker=2)
    return train, adapt


def gen_mixture_bump(spec: MixtureBumpSpec) -> FrameDataset:
    """Frames drawn 50/50 from f1(a) (speaker 1) and f1(b) (speaker 2).

    The speaker-1 frames, in order, are exactly
    ``sample_bumps(bumps_a, n_a, ..., seed=[seed, 1])`` and likewise for
    speaker 2 with ``[seed, 2]``.
    """
    _check_range(spec.x_range, [spec.bumps_a, spec.bumps_b])
    rng = np.random.default_rng([spec.seed, 0])
    is_a = rng.random(spec.n_points) < 0.5
    n_a = int(is_a.sum())
    a = sample_bumps(spec.bumps_a, n_a, spec.x_range, spec.noise_sd, [spec.seed, 1], speaker=1)
    b = sample_bumps(spec.bumps_b, spec.n_points - n_a, spec.x_range, spec.noise_sd, [spec.seed, 2], speaker=2)
    features = np.empty((spec.n_points, 1))
    labels = np.empty((spec.n_points, 1))
    features[is_a], labels[is_a] = a.features, a.labels
    features[~is_a], labels[~is_a] = b.features, b.labels
    speakers = np.where(is_a, 1, 2).astype(np.int64)
    return FrameDataset(features, labels, speakers, speakers.copy())


# --------------------------------------------------------------------------
# multi-speaker / multi-environment classification


@dataclass
class ClusterTaskSpec:
    """Synthetic speaker x environment classification task.

    Environment 0 is the clean condition. ``env_noise_sd`` lists one noise
    level per environment; ``env_shift_scale`` sizes the additive offset of
    environments 1 and up. ``label_corruption`` is the pseudo-label
    corruption rate used by target-quality experiments.
    """

    n_classes: int = 10
    feature_dim: int = 20
    n_speakers: int = 30
    n_test_speakers: int = 20
    n_environments: int = 3
    frames_per_speaker_per_env: int = 500
    segment_length: int = 50
    within_class_sd: float = 1.0
    class_separation: float = 5.0
    speaker_warp_scale: float = 0.4
    speaker_shift_scale: float = 0.8
    env_noise_sd: list = field(default_factory=lambda: [0.0, 0.5, 0.5])
    env_shift_scale: float = 0.5
    label_corruption: float = 0.0
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.feature_dim < 1 or self.n_speakers < 1 or self.n_environments < 1:
            raise ValueError("feature_dim, n_speakers and n_environments must be positive")
        if len(self.env_noise_sd) != self.n_environments:
            raise ValueError(
                f"env_noise_sd has {len(self.env_noise_sd)} entries for {self.n_environments} environments"
            )
        if any(s < 0 for s in self.env_noise_sd):
            raise ValueError("env_noise_sd entries must be non-negative")
        if not 0.0 <= self.label_corruption < 1.0:
            raise ValueError("label_corruption must lie in [0, 1)")
        if self.frames_per_speaker_per_env < 1 or self.segment_length < 1:
            raise ValueError("frames_per_speaker_per_env and segment_length must be positive")
        return self

    @property
    def train_speakers(self) -> list[int]:
        return list(range(1, self.n_speakers + 1))

    @property
    def test_speakers(self) -> list[int]:
        return list(range(self.n_speakers + 1, self.n_speakers + self.n_test_speakers + 1))


@dataclass
class _Geometry:
    means: np.ndarray  # (classes, dim)
    warps: dict  # speaker -> (A, c)
    env_shift: np.ndarray  # (envs, dim)
    env_noise: np.ndarray  # (envs,) noise sd


def _simplex_means(n_classes: int, dim: int, separation: float, rng) -> np.ndarray:
    if n_classes <= dim:
        Q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
        M = Q.T
    else:
        M = rng.standard_normal((n_classes, dim))
        M /= np.linalg.norm(M, axis=1, keepdims=True)
    M = M - M.mean(axis=0)
    return separation * M / np.sqrt(np.mean(np.sum(M * M, axis=1)))


def _geometry(spec: ClusterTaskSpec) -> _Geometry:
    rng = np.random.default_rng([spec.seed, 0])
    d = spec.feature_dim
    means = _simplex_means(spec.n_classes, d, spec.class_separation, rng)
    warps = {}
    for s in spec.train_speakers + spec.test_speakers:
        while True:
            A = np.eye(d) + spec.speaker_warp_scale * rng.standard_normal((d, d)) / np.sqrt(d)
            if np.linalg.svd(A, compute_uv=False).min() >= 0.2:
                break
        c = spec.speaker_shift_scale * rng.standard_normal(d)
        warps[s] = (A, c)
    env_shift = np.zeros((spec.n_environments, d))
    for e in range(1, spec.n_environments):
        a, b = rng.choice(spec.n_classes, size=2, replace=False)
        env_shift[e] = spec.env_shift_scale * (means[a] - means[b])
    env_noise = np.array(spec.env_noise_sd, dtype=np.float64)
    return _Geometry(means, warps, env_shift, env_noise)


def _draw(spec, geo, speakers, rng, segment_base=0) -> FrameDataset:
    n = spec.frames_per_speaker_per_env
    per_seg = spec.segment_length
    feats, labels, spk, seg, env = [], [], [], [], []
    seg_id = segment_base
    for s in speakers:
        A, c = geo.warps[s]
        for e in range(spec.n_environments):
            y = rng.integers(0, spec.n_classes, size=n)
            z = geo.means[y] + spec.within_class_sd * rng.standard_normal((n, spec.feature_dim))
            x = z @ A.T + c + geo.env_shift[e]
            if spec.env_noise_sd[e] > 0:
                x = x + geo.env_noise[e] * rng.standard_normal(x.shape)
            feats.append(x)
            labels.append(y)
            spk.append(np.full(n, s))
            env.append(np.full(n, e))
            seg.append(seg_id + np.arange(n) // per_seg)
            seg_id += -(-n // per_seg)
    return FrameDataset(
        np.concatenate(feats),
        np.concatenate(labels),
        np.concatenate(spk),
        np.concatenate(seg),
        np.concatenate(env),
        spec.n_classes,
    )


def gen_multicluster(spec: ClusterTaskSpec) -> tuple[FrameDataset, FrameDataset]:
    """Return ``(train, test)``; test speakers never appear in train."""
    spec.validate()
    geo = _geometry(spec)
    train = _draw(spec, geo, spec.train_speakers, np.random.default_rng([spec.seed, 1]))
    test = _draw(spec, geo, spec.test_speakers, np.random.default_rng([spec.seed, 2]), segment_base=10**6)
    return train, test


def gen_session(spec: ClusterTaskSpec, session: int, speakers=None) -> FrameDataset:
    """Fresh frames for (by default) the held-out speakers.

    Speaker warps and environment offsets are those of ``spec``; only the
    sampling noise depends on ``session``. Session 0 reproduces the test set
    of :func:`gen_multicluster`.
    """
    spec.validate()
    geo = _geometry(spec)
    speakers = spec.test_speakers if speakers is None else list(speakers)
    if session == 0 and speakers == spec.test_speakers:
        return gen_multicluster(spec)[1]
    return _draw(spec, geo, speakers, np.random.default_rng([spec.seed, 3, session]), segment_base=10**6 * (session + 2))


def oracle_predict(spec: ClusterTaskSpec, dataset: FrameDataset) -> np.ndarray:
    """Nearest-true-mean classification after undoing the known warps."""
    geo = _geometry(spec)
    pred = np.empty(len(dataset), dtype=np.int64)
    for s in np.unique(dataset.speakers):
        A, c = geo.warps[int(s)]
        A_inv = np.linalg.inv(A)
        for e in np.unique(dataset.environments):
            idx = np.flatnonzero((dataset.speakers == s) & (dataset.environments == e))
            x = dataset.features[idx] - c - geo.env_shift[int(e)]
            z = x @ A_inv.T
            d2 = ((z[:, None, :] - geo.means[None, :, :]) ** 2).sum(axis=2)
            pred[idx] = np.argmin(d2, axis=1)
    return pred


def corrupt_labels(labels, rate: float, n_classes: int, seed) -> np.ndarray:
    """Replace each label, with probability ``rate``, by a uniformly drawn wrong class."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("corruption rate must lie in [0, 1)")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    flip = rng.random(labels.shape[0]) < rate
    offset = rng.integers(1, n_classes, size=labels.shape[0])
    out = labels.copy()
    out[flip] = (labels[flip] + offset[flip]) % n_classes
    return out
