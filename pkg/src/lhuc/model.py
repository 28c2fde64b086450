"""Feedforward network with per-cluster hidden-unit amplitude scaling.

Every hidden layer computes ``h = xi(r) * sigmoid(W x + b)`` where ``r`` is a
vector of amplitude parameters belonging to the cluster (speaker,
environment, or the speaker-independent cluster 0) the frame is routed to.
The output layer is a plain affine map feeding a softmax classifier or a
linear regressor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, affine, as_matrix, sigmoid

__all__ = [
    "REPARAM_KINDS",
    "OUTPUT_KINDS",
    "SI_CLUSTER",
    "UnknownClusterError",
    "TraceMismatchError",
    "NetworkParams",
    "LhucTransform",
    "EffectiveScale",
    "TransformBank",
    "ForwardTrace",
    "Gradients",
    "reparam",
    "initial_r",
    "forward",
    "backward",
    "count_parameters",
]

REPARAM_KINDS = ("identity", "exp", "sigmoid2", "relu")
OUTPUT_KINDS = ("softmax_classifier", "linear_regressor")
SI_CLUSTER = 0


class UnknownClusterError(KeyError):
    def __init__(self, cluster_id):
        self.cluster_id = cluster_id
        super().__init__(f"cluster id {cluster_id} is not present in the transform bank")


class TraceMismatchError(ValueError):
    """The trace was produced by a network of a different topology."""


def _check_kind(kind: str) -> str:
    if kind not in REPARAM_KINDS:
        raise ValueError(f"unknown re-parametrisation kind {kind!r}; expected one of {REPARAM_KINDS}")
    return kind


def reparam(kind: str, r) -> tuple[np.ndarray, np.ndarray]:
    """Map raw amplitude parameters to scales.

    Returns ``(xi(r), xi'(r))`` elementwise. The relu derivative at exactly 0
    is taken to be 0.
    """
    r = np.asarray(r, dtype=np.float64)
    _check_kind(kind)
    if kind == "identity":
        return r.copy(), np.ones_like(r)
    if kind == "exp":
        s = np.exp(r)
        return s, s.copy()
    if kind == "sigmoid2":
        sg = sigmoid(r)
        return 2.0 * sg, 2.0 * sg * (1.0 - sg)
    return np.maximum(r, 0.0), (r > 0.0).astype(np.float64)


def initial_r(kind: str) -> float:
    """Raw value of ``r`` whose scale is exactly 1."""
    return 1.0 if _check_kind(kind) in ("identity", "relu") else 0.0


@dataclass
class NetworkParams:
    """Speaker-independent weights and biases, ``weights[l]`` is ``(units, inputs)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_kind: str = "softmax_classifier"
    hidden_activation: str = "sigmoid"

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases differ in length")
        if len(self.weights) < 2:
            raise ShapeError("a network needs at least one hidden layer")
        if self.output_kind not in OUTPUT_KINDS:
            raise ValueError(f"unknown output kind {self.output_kind!r}")
        if self.hidden_activation != "sigmoid":
            raise ValueError("only sigmoid hidden units are supported")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {l}: W{W.shape} and b{b.shape} do not match", W.shape, b.shape)
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(
                    f"layer {l} expects {W.shape[1]} inputs but layer {l - 1} has {self.weights[l - 1].shape[0]} units",
                    W.shape, self.weights[l - 1].shape,
                )

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], output_kind: str = "softmax_classifier", seed=0):
        """Random network with ``N(0, 1/fan_in)`` weights and zero biases.

        ``layer_sizes`` runs from input width to output width, e.g. ``[20, 64, 64, 10]``.
        """
        if len(layer_sizes) < 3:
            raise ShapeError("layer_sizes needs input, at least one hidden, and output width")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(rng.standard_normal((n_out, n_in)) / np.sqrt(n_in))
            biases.append(np.zeros(n_out))
        return cls(weights, biases, output_kind)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(W.shape[0] for W in self.weights[:-1])

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.n_inputs,) + tuple(W.shape[0] for W in self.weights)

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.output_kind,
            self.hidden_activation,
        )

    def equals(self, other: "NetworkParams") -> bool:
        """Bit-exact comparison of topology and every tensor."""
        return (
            self.output_kind == other.output_kind
            and len(self.weights) == len(other.weights)
            and all(_bit_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(_bit_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


def _bit_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass
class LhucTransform:
    """One cluster's raw amplitude parameters, one vector per hidden layer."""

    kind: str
    r: list[np.ndarray]

    def __post_init__(self):
        _check_kind(self.kind)
        self.r = [np.asarray(v, dtype=np.float64) for v in self.r]

    @classmethod
    def identity(cls, params: NetworkParams, kind: str = "exp") -> "LhucTransform":
        r0 = initial_r(kind)
        return cls(kind, [np.full(n, r0) for n in params.hidden_sizes])

    def scales(self) -> list[np.ndarray]:
        return [reparam(self.kind, r)[0] for r in self.r]

    def effective(self) -> "EffectiveScale":
        return EffectiveScale(self.scales())

    def copy(self) -> "LhucTransform":
        return LhucTransform(self.kind, [v.copy() for v in self.r])

    def equals(self, other: "LhucTransform") -> bool:
        return (
            self.kind == other.kind
            and len(self.r) == len(other.r)
            and all(_bit_equal(a, b) for a, b in zip(self.r, other.r))
        )


@dataclass
class EffectiveScale:
    """Amplitudes already mapped through ``xi``; used for interpolated transforms."""

    scales: list[np.ndarray]

    def __post_init__(self):
        self.scales = [np.asarray(v, dtype=np.float64) for v in self.scales]


@dataclass
class TransformBank:
    """Per-cluster transforms sharing one re-parametrisation kind."""

    kind: str = "exp"
    transforms: dict[int, LhucTransform] = field(default_factory=dict)

    def __post_init__(self):
        _check_kind(self.kind)
        for cid, t in self.transforms.items():
            if t.kind != self.kind:
                raise ValueError(f"cluster {cid} has kind {t.kind!r}, bank kind is {self.kind!r}")

    @classmethod
    def for_clusters(cls, params: NetworkParams, cluster_ids, kind: str = "exp") -> "TransformBank":
        return cls(kind, {int(c): LhucTransform.identity(params, kind) for c in cluster_ids})

    def __getitem__(self, cluster_id) -> LhucTransform:
        try:
            return self.transforms[int(cluster_id)]
        except KeyError:
            raise UnknownClusterError(cluster_id) from None

    def __setitem__(self, cluster_id, transform: LhucTransform):
        if transform.kind != self.kind:
            raise ValueError(f"transform kind {transform.kind!r} does not match bank kind {self.kind!r}")
        self.transforms[int(cluster_id)] = transform

    def __contains__(self, cluster_id) -> bool:
        return int(cluster_id) in self.transforms

    def __len__(self) -> int:
        return len(self.transforms)

    @property
    def cluster_ids(self) -> list[int]:
        return sorted(self.transforms)

    def copy(self) -> "TransformBank":
        return TransformBank(self.kind, {c: t.copy() for c, t in self.transforms.items()})

    def equals(self, other: "TransformBank") -> bool:
        return (
            self.kind == other.kind
            and self.cluster_ids == other.cluster_ids
            and all(self.transforms[c].equals(other.transforms[c]) for c in self.cluster_ids)
        )


@dataclass
class ForwardTrace:
    """Cached intermediate values of one forward pass.

    ``inputs[l]`` is the input to layer ``l`` (``inputs[0]`` is the batch),
    ``psi[l]`` the sigmoid basis values of hidden layer ``l`` and
    ``scales[l]`` / ``dscales[l]`` the per-frame ``xi(r)`` / ``xi'(r)``
    rows actually used (``None`` when no scaling was applied).
    """

    layer_sizes: tuple[int, ...]
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    psi: list[np.ndarray]
    scales: list[np.ndarray | None]
    dscales: list[np.ndarray | None]
    routes: np.ndarray | None
    cluster_ids: tuple[int, ...]
    route_index: np.ndarray | None
    output: np.ndarray


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    r: dict[int, list[np.ndarray]]


def _scale_tables(params, bank, routes, n_frames):
    """Per-layer scale rows plus the frame -> table-row index."""
    hidden = params.hidden_sizes
    if bank is None:
        return None, None, None, (), None
    if isinstance(bank, EffectiveScale):
        if [len(s) for s in bank.scales] != list(hidden):
            raise ShapeError(
                f"scale widths {[len(s) for s in bank.scales]} do not match hidden sizes {list(hidden)}"
            )
        return [s[None, :] for s in bank.scales], None, None, (), None
    if isinstance(bank, LhucTransform):
        bank = TransformBank(bank.kind, {SI_CLUSTER: bank})
        routes = None
    if routes is None:
        routes = np.full(n_frames, SI_CLUSTER, dtype=np.int64)
    routes = np.asarray(routes, dtype=np.int64)
    if routes.shape != (n_frames,):
        raise ShapeError(f"routes shape {routes.shape} does not cover {n_frames} frames", routes.shape)
    ids, index = np.unique(routes, return_inverse=True)
    transforms = [bank[c] for c in ids]
    tables, dtables = [], []
    for l, width in enumerate(hidden):
        rows, drows = [], []
        for c, t in zip(ids, transforms):
            if len(t.r) != len(hidden) or t.r[l].shape != (width,):
                raise ShapeError(f"transform for cluster {c} does not match hidden sizes {list(hidden)}")
            s, ds = reparam(t.kind, t.r[l])
            rows.append(s)
            drows.append(ds)
        tables.append(np.stack(rows))
        dtables.append(np.stack(drows))
    if len(ids) == 1:
        return tables, dtables, routes, tuple(int(c) for c in ids), None
    return (
        [t[index] for t in tables],
        [t[index] for t in dtables],
        routes,
        tuple(int(c) for c in ids),
        index,
    )


def forward(params: NetworkParams, bank=None, routes=None, X=None) -> ForwardTrace:
    """Run the network on ``X`` (``frames x inputs``).

    ``bank`` may be ``None`` (plain speaker-independent net), a
    :class:`TransformBank` with per-frame cluster ``routes`` (defaulting to
    cluster 0), a single :class:`LhucTransform`, or an
    :class:`EffectiveScale` applied to every frame.
    """
    X = as_matrix(X)
    if X.shape[1] != params.n_inputs:
        raise ShapeError(
            f"input width {X.shape[1]} does not match network input {params.n_inputs}",
            X.shape, params.weights[0].shape,
        )
    n = X.shape[0]
    scales, dscales, routes, cluster_ids, index = _scale_tables(params, bank, routes, n)
    n_hidden = len(params.weights) - 1
    inputs, pre, psi = [X], [], []
    x = X
    for l in range(n_hidden):
        z = affine(params.weights[l], params.biases[l], x)
        p = sigmoid(z)
        pre.append(z)
        psi.append(p)
        x = p if scales is None else p * scales[l]
        inputs.append(x)
    out = affine(params.weights[-1], params.biases[-1], x)
    pre.append(out)
    return ForwardTrace(
        layer_sizes=params.layer_sizes,
        inputs=inputs,
        pre=pre,
        psi=psi,
        scales=scales if scales is not None else [None] * n_hidden,
        dscales=dscales if dscales is not None else [None] * n_hidden,
        routes=routes,
        cluster_ids=cluster_ids,
        route_index=index,
        output=out,
    )


def _per_cluster_sum(G: np.ndarray, index: np.ndarray | None, n_clusters: int) -> np.ndarray:
    if index is None:
        return G.sum(axis=0, keepdims=True)
    out = np.zeros((n_clusters, G.shape[1]))
    # unbuffered accumulation in ascending frame order
    np.add.at(out, index, G)
    return out


def backward(trace: ForwardTrace, params: NetworkParams, loss_grad, bank=None) -> Gradients:
    """Back-propagate ``loss_grad`` (gradient w.r.t. the final affine output).

    The error reaching a scaled unit is multiplied by its scale before the
    sigmoid derivative; the gradient for a cluster's ``r`` sums
    ``dL/dh * xi'(r) * psi`` over the frames routed to that cluster. When
    ``bank`` is given every cluster in it receives an entry in ``Gradients.r``
    (zeros for clusters absent from the batch).
    """
    if tuple(trace.layer_sizes) != tuple(params.layer_sizes):
        raise TraceMismatchError(
            f"trace topology {trace.layer_sizes} does not match network {params.layer_sizes}"
        )
    delta = np.asarray(loss_grad, dtype=np.float64)
    if delta.shape != trace.output.shape:
        raise ShapeError(
            f"loss gradient {delta.shape} does not match output {trace.output.shape}",
            delta.shape, trace.output.shape,
        )
    n_hidden = len(params.weights) - 1
    gW = [None] * (n_hidden + 1)
    gb = [None] * (n_hidden + 1)
    n_clusters = len(trace.cluster_ids)
    gr_layers = [None] * n_hidden

    gW[-1] = delta.T @ trace.inputs[-1]
    gb[-1] = delta.sum(axis=0)
    dh = delta @ params.weights[-1]
    for l in range(n_hidden - 1, -1, -1):
        p = trace.psi[l]
        if trace.scales[l] is not None:
            if trace.dscales[l] is not None:
                gr_layers[l] = _per_cluster_sum(dh * trace.dscales[l] * p, trace.route_index, n_clusters)
            dpsi = dh * trace.scales[l]
        else:
            dpsi = dh
        dz = dpsi * p * (1.0 - p)
        gW[l] = dz.T @ trace.inputs[l]
        gb[l] = dz.sum(axis=0)
        if l:
            dh = dz @ params.weights[l]

    grad_r: dict[int, list[np.ndarray]] = {}
    if n_clusters and gr_layers[0] is not None:
        for k, cid in enumerate(trace.cluster_ids):
            grad_r[cid] = [gr_layers[l][k].copy() for l in range(n_hidden)]
    if isinstance(bank, TransformBank):
        for cid in bank.cluster_ids:
            if cid not in grad_r:
                grad_r[cid] = [np.zeros(w) for w in params.hidden_sizes]
    return Gradients(gW, gb, grad_r)


def count_parameters(params: NetworkParams, bank=None) -> tuple[int, int]:
    """Return ``(speaker-independent count, amplitude parameters per cluster)``."""
    si = sum(W.size + b.size for W, b in zip(params.weights, params.biases))
    per_cluster = 0 if bank is None else int(sum(params.hidden_sizes))
    return int(si), per_cluster

