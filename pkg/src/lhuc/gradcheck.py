"""Finite-difference verification of the analytic backward pass.

The numerical side uses its own forward implementation in extended
precision (``numpy.longdouble``), so that a bug shared between the float64
forward and backward cannot cancel out, and so that the central difference
with ``h = 1e-6`` is not swamped by rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import REPARAM_KINDS, SI_CLUSTER, NetworkParams, TransformBank, backward, forward
from .tensor import mse, softmax_xent

__all__ = [
    "GradcheckCase",
    "GradcheckReport",
    "random_case",
    "reference_loss",
    "check_case",
    "gradcheck",
    "relative_error",
]

LD = np.longdouble


@dataclass
class GradcheckCase:
    seed: int
    kind: str
    params: NetworkParams
    bank: TransformBank
    routes: np.ndarray
    X: np.ndarray
    y: np.ndarray


@dataclass
class GradcheckReport:
    n_cases: int
    tolerance: float
    max_error: dict[str, float] = field(default_factory=dict)
    worst_case: dict[str, int] = field(default_factory=dict)

    @property
    def overall(self) -> float:
        return max(self.max_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.overall <= self.tolerance

    def lines(self) -> list[str]:
        out = [f"{g:<6} max rel err {e:.3e} (case {self.worst_case[g]})" for g, e in sorted(self.max_error.items())]
        out.append(f"overall {self.overall:.3e} over {self.n_cases} cases: {'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _draw_r(kind: str, rng, size: int) -> np.ndarray:
    if kind in ("exp", "sigmoid2"):
        return rng.uniform(-1.5, 1.5, size)
    # keep clear of the relu kink at 0 so the central difference is valid
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    return sign * rng.uniform(0.2, 1.5, size)


def random_case(seed: int, kind: str | None = None) -> GradcheckCase:
    """A small random network, bank, batch and targets."""
    rng = np.random.default_rng([seed, 7])
    kind = kind or REPARAM_KINDS[seed % len(REPARAM_KINDS)]
    n_hidden = int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, 9))] + [int(rng.integers(1, 17)) for _ in range(n_hidden)]
    output_kind = "softmax_classifier" if rng.random() < 0.5 else "linear_regressor"
    sizes.append(int(rng.integers(2, 6)))
    params = NetworkParams.initialize(sizes, output_kind, seed=[seed, 8])
    for b in params.biases:
        b[:] = rng.normal(0.0, 0.5, b.shape)

    n_clusters = int(rng.integers(1, 4))
    cluster_ids = [SI_CLUSTER] + [int(c) for c in rng.choice(np.arange(1, 50), n_clusters, replace=False)]
    bank = TransformBank.for_clusters(params, cluster_ids, kind)
    for cid in cluster_ids:
        bank[cid].r = [_draw_r(kind, rng, n) for n in params.hidden_sizes]
    batch = int(rng.integers(1, 9))
    # cluster_ids[-1] stays unrouted to exercise the zero-gradient path
    routable = cluster_ids[:-1] if len(cluster_ids) > 1 else cluster_ids
    routes = rng.choice(routable, size=batch).astype(np.int64)
    X = rng.normal(0.0, 1.0, (batch, sizes[0]))
    if output_kind == "softmax_classifier":
        y = rng.integers(0, sizes[-1], batch)
    else:
        y = rng.normal(0.0, 1.0, (batch, sizes[-1]))
    return GradcheckCase(seed, kind, params, bank, routes, X, y)


def _xi(kind: str, r):
    if kind == "identity":
        return r
    if kind == "exp":
        return np.exp(r)
    if kind == "sigmoid2":
        return 2 / (1 + np.exp(-r))
    return np.where(r > 0, r, LD(0))


def reference_loss(weights, biases, r_by_cluster, kind, output_kind, routes, X, y) -> LD:
    """Mean loss computed frame by frame in extended precision."""
    total = LD(0)
    n_hidden = len(weights) - 1
    for t in range(X.shape[0]):
        x = X[t].astype(LD)
        r = r_by_cluster[int(routes[t])]
        for l in range(n_hidden):
            z = weights[l] @ x + biases[l]
            x = _xi(kind, r[l]) / (1 + np.exp(-z))
        out = weights[-1] @ x + biases[-1]
        if output_kind == "softmax_classifier":
            m = out.max()
            total += m + np.log(np.exp(out - m).sum()) - out[int(y[t])]
        else:
            total += ((out - y[t].astype(LD)) ** 2).sum() / out.shape[0]
    return total / X.shape[0]


def _analytic(case: GradcheckCase):
    trace = forward(case.params, case.bank, case.routes, case.X)
    if case.params.output_kind == "softmax_classifier":
        _, g = softmax_xent(trace.output, case.y)
    else:
        _, g = mse(trace.output, case.y)
    return backward(trace, case.params, g, case.bank)


def check_case(case: GradcheckCase, h: float = 1e-6) -> dict[str, float]:
    """Max relative error per parameter group (``W0``, ``b0``, ``r0`` ...)."""
    grads = _analytic(case)
    W = [w.astype(LD) for w in case.params.weights]
    b = [v.astype(LD) for v in case.params.biases]
    r = {c: [v.astype(LD) for v in case.bank[c].r] for c in case.bank.cluster_ids}
    h = LD(h)

    def f():
        return reference_loss(W, b, r, case.kind, case.params.output_kind, case.routes, case.X, case.y)

    def numeric(arr):
        g = np.zeros(arr.shape, dtype=np.float64)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            down = f()
            flat[i] = keep
            gflat[i] = float((up - down) / (2 * h))
        return g

    errors: dict[str, float] = {}

    def record(group, a, n):
        e = float(relative_error(a, n).max()) if np.size(a) else 0.0
        errors[group] = max(errors.get(group, 0.0), e)

    for l in range(len(W)):
        record(f"W{l}", grads.weights[l], numeric(W[l]))
        record(f"b{l}", grads.biases[l], numeric(b[l]))
    for c in case.bank.cluster_ids:
        for l in range(len(r[c])):
            record(f"r{l}", grads.r[c][l], numeric(r[c][l]))
    return errors


def gradcheck(n_cases: int = 25, seed: int = 0, h: float = 1e-6, tolerance: float = 1e-5) -> GradcheckReport:
    """Run ``n_cases`` seeded random cases; case ``i`` uses seed ``seed + i``."""
    report = GradcheckReport(n_cases, tolerance)
    for i in range(n_cases):
        errs = check_case(random_case(seed + i), h)
        for g, e in errs.items():
            if e >= report.max_error.get(g, -1.0):
                report.max_error[g] = e
                report.worst_case[g] = seed + i
    return report
