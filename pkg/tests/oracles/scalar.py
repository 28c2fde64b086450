"""Pure-Python scalar-loop reference implementations.

Nothing here touches numpy arithmetic: inputs are converted to nested
lists of floats and every sum is an explicit loop, so the code under test
and the oracle share no numerical kernels.
"""

import math


def tolist(a):
    return [tolist(v) for v in a] if hasattr(a, "__len__") else float(a)


def affine(W, b, X):
    out = []
    for x in X:
        row = []
        for j in range(len(W)):
            s = 0.0
            for i in range(len(x)):
                s += W[j][i] * x[i]
            row.append(s + b[j])
        out.append(row)
    return out


def sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def xi(kind, r):
    if kind == "identity":
        return r
    if kind == "exp":
        return math.exp(r)
    if kind == "sigmoid2":
        return 2.0 * sigmoid(r)
    if kind == "relu":
        return max(0.0, r)
    raise ValueError(kind)


def forward(weights, biases, X, scales=None, routes=None):
    """Network outputs (pre-softmax logits or linear outputs).

    ``scales`` maps cluster id to a list of per-hidden-layer amplitude lists;
    ``routes`` gives the cluster id of each frame.
    """
    out = []
    n_layers = len(weights)
    for t, x in enumerate(X):
        h = list(x)
        for l in range(n_layers):
            z = affine([list(w) for w in weights[l]], biases[l], [h])[0]
            if l == n_layers - 1:
                h = z
                break
            h = [sigmoid(v) for v in z]
            if scales is not None:
                s = scales[routes[t]][l]
                h = [h[j] * s[j] for j in range(len(h))]
        out.append(h)
    return out


def mse(pred, target):
    total, count = 0.0, 0
    for p_row, t_row in zip(pred, target):
        for p, t in zip(p_row, t_row):
            total += (p - t) ** 2
            count += 1
    return total / count
