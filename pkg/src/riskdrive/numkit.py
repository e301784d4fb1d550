"""Minimal dense-network numerics.

Every learned object in this project (dynamics heads, actor, critics,
barrier) is a small fully-connected net built from the pieces here:
explicit forward/backward passes over a list of affine layers, a
diagonal-Gaussian output convention (mean + clamped log-variance), and
a bias-corrected Adam optimizer. No autograd framework: gradients are
chained by hand, which keeps every gradient path inspectable and lets
the test suite verify all of them against finite differences.

Conventions
-----------
* Layer weights have shape ``(out_dim, in_dim)``; forward computes
  ``act(x @ W.T + b)`` on hidden layers and a bare affine map on the
  output layer.
* ``forward``/``backward`` accept a single vector ``(d,)`` or a batch
  ``(B, d)``. Parameter gradients are summed over the batch; scale the
  upstream gradient by ``1/B`` for a batch-mean loss.
* Log-variances are clamped to ``[LOG_VAR_MIN, LOG_VAR_MAX]``; the clamp
  zeroes gradients outside the bounds.
"""

from __future__ import annotations

import json
import hashlib
import math
from dataclasses import dataclass

import numpy as np

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _tanh(z):
    return np.tanh(z)


def _tanh_deriv(z, h):
    # h = tanh(z) already computed in the forward pass
    return 1.0 - h * h


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_deriv(z, h):
    return (z > 0.0).astype(z.dtype)


_ACTIVATIONS = {
    "tanh": (_tanh, _tanh_deriv),
    "relu": (_relu, _relu_deriv),
}


class DenseNet:
    """Fully-connected net with one activation tag for all hidden layers.

    The output layer is always affine (no squash); callers apply their own
    output transform (tanh, sigmoid, Gaussian split) and chain its gradient
    into :meth:`backward`.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], activation: str = "tanh"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        for i in range(len(weights) - 1):
            if weights[i].shape[0] != weights[i + 1].shape[1]:
                raise ValueError(
                    f"layer {i} out-dim {weights[i].shape[0]} != layer {i + 1} in-dim {weights[i + 1].shape[1]}"
                )
        for W, b in zip(weights, biases):
            if b.shape != (W.shape[0],):
                raise ValueError("bias shape must match layer out-dim")
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activation = activation

    # -- construction -----------------------------------------------------

    @classmethod
    def build(cls, dims: list[int], activation: str = "tanh", rng: np.random.Generator | None = None) -> "DenseNet":
        """Create a net with fan-in uniform init, ``dims = [in, h1, ..., out]``."""
        if rng is None:
            rng = np.random.default_rng()
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases, activation)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [W.shape[0] for W in self.weights]

    # -- forward / backward ------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass returning the output and the cache for backward."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.input_dim:
            raise ValueError(f"input dim {h.shape[1]} != expected {self.input_dim}")
        act, _ = _ACTIVATIONS[self.activation]
        inputs = []   # input to each layer
        preacts = []  # pre-activation of each hidden layer
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ W.T + b
            if i < n - 1:
                preacts.append(z)
                h = act(z)
            else:
                h = z
        cache = (inputs, preacts, single)
        return (h[0] if single else h), cache

    def backward(self, cache, grad_out: np.ndarray):
        """Chain ``dL/dy`` back through the net.

        Returns ``(param_grads, grad_in)`` where ``param_grads`` is a flat
        list ``[dW0, db0, dW1, db1, ...]`` summed over the batch and
        ``grad_in`` is ``dL/dx`` with the same shape as the cached input.
        """
        inputs, preacts, single = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if single:
            g = g[None, :]
        _, deriv = _ACTIVATIONS[self.activation]
        n = len(self.weights)
        dws: list[np.ndarray | None] = [None] * n
        dbs: list[np.ndarray | None] = [None] * n
        for i in range(n - 1, -1, -1):
            dws[i] = g.T @ inputs[i]
            dbs[i] = g.sum(axis=0)
            g = g @ self.weights[i]
            if i > 0:
                z = preacts[i - 1]
                h = inputs[i]
                g = g * deriv(z, h)
        grads: list[np.ndarray] = []
        for dW, db in zip(dws, dbs):
            grads.extend((dW, db))
        return grads, (g[0] if single else g)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        """Live references, ordered [W0, b0, W1, b1, ...]."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.activation)

    def load_from(self, other: "DenseNet") -> None:
        for p, q in zip(self.parameters(), other.parameters()):
            p[...] = q


# -- diagonal Gaussian heads ----------------------------------------------


@dataclass
class GaussianHead:
    """Mean and clamped log-variance of a diagonal Gaussian prediction."""

    mean: np.ndarray
    log_var: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


def split_gaussian_raw(raw: np.ndarray):
    """Split a raw net output ``(..., 2D)`` into mean / clamped log-var.

    Returns ``(mean, log_var, inside)`` where ``inside`` masks log-var
    entries strictly within the clamp bounds (gradient passes only there).
    """
    d = raw.shape[-1] // 2
    mean = raw[..., :d]
    lv_raw = raw[..., d:]
    log_var = np.clip(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX)
    inside = (lv_raw > LOG_VAR_MIN) & (lv_raw < LOG_VAR_MAX)
    return mean, log_var, inside


def gaussian_nll(head: GaussianHead, target: np.ndarray) -> float:
    """Negative log-likelihood of ``target`` under the head, summed over dims.

    ``sum_d (t_d - mu_d)^2 / (2 sigma_d^2) + log(sigma_d)/... + log(2 pi)/2``
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != head.mean.shape:
        raise ValueError("target shape must match head mean")
    if not np.all(np.isfinite(target)):
        raise ValueError("non-finite target")
    var = head.var
    resid = target - head.mean
    return float(np.sum(resid * resid / (2.0 * var) + 0.5 * head.log_var + _HALF_LOG_2PI))


def gaussian_nll_batch(mean: np.ndarray, log_var: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample NLL for batched ``(B, D)`` arrays."""
    var = np.exp(log_var)
    resid = target - mean
    return np.sum(resid * resid / (2.0 * var) + 0.5 * log_var + _HALF_LOG_2PI, axis=-1)


def gaussian_nll_grads(mean: np.ndarray, log_var: np.ndarray, target: np.ndarray, inside: np.ndarray):
    """Gradients of the summed NLL w.r.t. mean and raw (pre-clamp) log-var."""
    var = np.exp(log_var)
    resid = mean - target
    d_mean = resid / var
    d_log_var = 0.5 * (1.0 - resid * resid / var)
    return d_mean, d_log_var * inside


# -- Adam -------------------------------------------------------------------


class AdamState:
    """Bias-corrected Adam over a fixed list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """One update, in place. Refuses the step on non-finite gradients."""
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("parameter/gradient count mismatch")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise ValueError("non-finite gradient; step refused")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- checkpoint document ------------------------------------------------------

CHECKPOINT_VERSION = 1


def _array_to_strings(a: np.ndarray) -> list[str]:
    # repr round-trips float64 exactly through the shortest decimal form
    return [repr(float(x)) for x in a.ravel(order="C")]


def _strings_to_array(strings: list[str], shape) -> np.ndarray:
    return np.array([float(s) for s in strings], dtype=np.float64).reshape(shape)


def checkpoint_document(networks: dict[str, DenseNet], scalars: dict[str, float] | None = None,
                        extra: dict | None = None, rng_seed: int = 0, created: str = "") -> dict:
    """Assemble a versioned JSON-serializable checkpoint document."""
    nets = []
    for name in sorted(networks):
        net = networks[name]
        nets.append({
            "name": name,
            "layer_dims": net.layer_dims,
            "activation": net.activation,
            "weights": [_array_to_strings(W) for W in net.weights],
            "biases": [_array_to_strings(b) for b in net.biases],
        })
    return {
        "format_version": CHECKPOINT_VERSION,
        "created": created,
        "rng_seed": rng_seed,
        "networks": nets,
        "scalars": {k: repr(float(v)) for k, v in sorted((scalars or {}).items())},
        "extra": extra or {},
    }


def networks_from_document(doc: dict) -> dict[str, DenseNet]:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    out = {}
    for entry in doc["networks"]:
        dims = entry["layer_dims"]
        weights = [
            _strings_to_array(ws, (dims[i + 1], dims[i]))
            for i, ws in enumerate(entry["weights"])
        ]
        biases = [
            _strings_to_array(bs, (dims[i + 1],))
            for i, bs in enumerate(entry["biases"])
        ]
        out[entry["name"]] = DenseNet(weights, biases, entry["activation"])
    return out


def scalars_from_document(doc: dict) -> dict[str, float]:
    return {k: float(v) for k, v in doc.get("scalars", {}).items()}


def save_checkpoint(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def checkpoint_hash(doc: dict) -> str:
    """Content hash over everything except the volatile ``created`` stamp."""
    stripped = dict(doc)
    stripped["created"] = ""
    blob = json.dumps(stripped, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
