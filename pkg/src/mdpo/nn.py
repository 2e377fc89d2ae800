"""Dense numerical core: MLPs with manual backpropagation, Adam, and
probability heads (categorical, diagonal Gaussian).

Everything is float64 and batched: inputs are ``(n, d)`` arrays (1-D vectors
are accepted by the convenience wrappers).  There is no autodiff graph; each
network is a plain list of ``(W, b)`` layers and the backward pass is the
hand-written chain rule for the fixed MLP family used here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# activations


def _tanh(x):
    return np.tanh(x)


def _dtanh(y):
    # derivative expressed in terms of the activation output
    return 1.0 - y * y


def _relu(x):
    return np.maximum(x, 0.0)


def _drelu(y):
    return (y > 0.0).astype(np.float64)


_ACTIVATIONS = {"tanh": (_tanh, _dtanh), "relu": (_relu, _drelu)}


# ---------------------------------------------------------------------------
# MLP


@dataclass
class Mlp:
    """Fully connected net.  ``weights[i]`` is ``(out, in)``.

    The hidden activation is applied after every layer except the last;
    with ``activate_last`` it is applied after the last layer too (used for
    ensemble trunks).
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: str = "tanh"
    activate_last: bool = False

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.activate_last,
        )


def mlp_init(sizes, activation="tanh", rng=None, activate_last=False,
             final_scale=1.0) -> Mlp:
    """Xavier-uniform init for the layer chain ``sizes``."""
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if i == len(sizes) - 2:
            w *= final_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases, activation, activate_last)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected 1-D or 2-D input, got shape {x.shape}")


def mlp_forward_cached(net: Mlp, x):
    """Forward pass keeping per-layer activations for the backward pass."""
    X, _ = _as_batch(x)
    if X.shape[1] != net.in_dim:
        raise ShapeError(f"input dim {X.shape[1]} != first layer dim {net.in_dim}")
    act, _ = _ACTIVATIONS[net.activation]
    cache = [X]
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        X = X @ w.T + b
        if i < n_layers - 1 or net.activate_last:
            X = act(X)
        cache.append(X)
    return X, cache


def mlp_forward(net: Mlp, x):
    """Forward pass; a 1-D input yields a 1-D output."""
    X, squeeze = _as_batch(x)
    Y, _ = mlp_forward_cached(net, X)
    return Y[0] if squeeze else Y


def mlp_backward(net: Mlp, cache, upstream):
    """Backpropagate ``upstream`` (d loss / d output, same shape as output).

    Returns (param_grads, input_grad); param_grads matches ``net.params()``
    order.
    """
    dY, _ = _as_batch(upstream)
    if dY.shape[1] != net.out_dim:
        raise ShapeError(f"upstream dim {dY.shape[1]} != out dim {net.out_dim}")
    if dY.shape[0] != cache[0].shape[0]:
        raise ShapeError("upstream batch size mismatch")
    _, dact = _ACTIVATIONS[net.activation]
    n_layers = len(net.weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    for i in reversed(range(n_layers)):
        if i < n_layers - 1 or net.activate_last:
            dY = dY * dact(cache[i + 1])
        grads_w[i] = dY.T @ cache[i]
        grads_b[i] = dY.sum(axis=0)
        dY = dY @ net.weights[i]
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads.append(gw)
        grads.append(gb)
    return grads, dY


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def copy(self) -> "AdamState":
        s = AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step)
        s.m = [x.copy() for x in self.m]
        s.v = [x.copy() for x in self.v]
        return s


def adam_init(params, lr: float) -> AdamState:
    state = AdamState(lr=lr)
    state.m = [np.zeros_like(p) for p in params]
    state.v = [np.zeros_like(p) for p in params]
    return state


def adam_step(state: AdamState, params, grads) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(state.m):
        raise ShapeError("param/state length mismatch")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor {i}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so the global L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# probability heads


@dataclass
class DistSample:
    value: object
    log_prob: float
    entropy: float


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def categorical_sample_batch(logits, rng) -> np.ndarray:
    """Sample one index per row of ``logits`` (n, k) by inverse CDF."""
    p = softmax(logits)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[0])
    return np.minimum((cdf < u[:, None]).sum(axis=-1), p.shape[1] - 1)


def categorical_entropy(logits) -> np.ndarray:
    lp = log_softmax(logits)
    return -(np.exp(lp) * lp).sum(axis=-1)


def categorical_logprob(logits, index) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ShapeError("empty logits")
    return float(log_softmax(logits)[int(index)])


def categorical_head(logits, rng) -> DistSample:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError("logits must be a non-empty vector")
    idx = int(categorical_sample_batch(logits[None, :], rng)[0])
    return DistSample(idx, categorical_logprob(logits, idx),
                      float(categorical_entropy(logits[None, :])[0]))


def gaussian_logprob(mean, log_std, x) -> float:
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if mean.shape != x.shape or mean.shape != np.broadcast_to(log_std, mean.shape).shape:
        raise ShapeError("mean/log_std/x dimension mismatch")
    z = (x - mean) / np.exp(log_std)
    return float(-0.5 * np.sum(z * z) - np.sum(log_std) - 0.5 * mean.size * LOG_2PI)


def gaussian_logprob_batch(mean, log_std, x) -> np.ndarray:
    z = (x - mean) / np.exp(log_std)
    return (-0.5 * (z * z) - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def gaussian_head(mean, log_std, rng) -> DistSample:
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.broadcast_to(np.asarray(log_std, dtype=np.float64), mean.shape)
    if not np.all(np.isfinite(log_std)):
        raise NumericError("non-finite log_std")
    x = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    entropy = float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))
    return DistSample(x, gaussian_logprob(mean, log_std, x), entropy)


# ---------------------------------------------------------------------------
# checkpoints


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "layers": [
            {"rows": int(w.shape[0]), "cols": int(w.shape[1]),
             "w": w.ravel().tolist(), "b": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
        "activation": net.activation,
        "activate_last": net.activate_last,
    }


def mlp_from_dict(d: dict) -> Mlp:
    weights, biases = [], []
    for layer in d["layers"]:
        w = np.asarray(layer["w"], dtype=np.float64).reshape(layer["rows"], layer["cols"])
        weights.append(w)
        biases.append(np.asarray(layer["b"], dtype=np.float64))
    return Mlp(weights, biases, d["activation"], d.get("activate_last", False))


def save_checkpoint(path, payload: dict) -> None:
    """Write a checkpoint dict (values: Mlp, arrays, or plain JSON) byte-stably."""
    def enc(x):
        if isinstance(x, Mlp):
            return mlp_to_dict(x)
        if isinstance(x, np.ndarray):
            return x.tolist()
        if isinstance(x, dict):
            return {k: enc(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [enc(v) for v in x]
        return x
    with open(path, "w", encoding="utf-8") as f:
        json.dump(enc(payload), f, sort_keys=True, separators=(",", ":"))
