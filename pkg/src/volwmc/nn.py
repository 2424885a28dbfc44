"""Small dense networks with hand-written reverse-mode gradients.

The package needs exactly three fixed-topology networks (surface encoder,
pointwise decoder, weight decoder), so the numeric core stays free of
autodiff frameworks: float64 forward passes, explicit layer-by-layer
backprop, Adam, and a versioned JSON checkpoint format.

Loss heads (plain MSE here; the variational and weight-decoder objectives
register themselves on import) share one gradient entry point so all of them
go through the same finite-difference check.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, CheckpointVersionError, UnknownLossHeadError

__all__ = [
    "AdamState",
    "CHECKPOINT_VERSION",
    "DenseNet",
    "adam_step",
    "finite_difference_gradient",
    "gradient_check",
    "gradients",
    "load_checkpoint",
    "loss_and_gradients",
    "register_loss_head",
    "save_checkpoint",
]

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("elu", "linear", "softmax")


def elu(x):
    # expm1 keeps the negative branch accurate near 0.
    return np.where(x >= 0.0, x, np.expm1(x))


def elu_prime(x):
    return np.where(x >= 0.0, 1.0, np.exp(x))


def softmax(x):
    """Row-wise softmax with max subtraction for overflow safety."""
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class DenseNet:
    """Fully connected net: ``x @ W + b`` per layer, float64 throughout.

    ``softmax`` is only allowed on the final layer; hidden layers use
    ``elu`` or ``linear``.
    """

    def __init__(self, weights, biases, activations):
        if not (len(weights) == len(biases) == len(activations) >= 1):
            raise ValueError("weights, biases and activations must align")
        for i, act in enumerate(activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if act == "softmax" and i != len(activations) - 1:
                raise ValueError("softmax is only supported on the final layer")
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self.activations = list(activations)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i} has inconsistent shapes")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} does not chain onto layer {i - 1}")

    @classmethod
    def create(cls, sizes, activations, seed, zero_last_layer=False):
        """Glorot-uniform weights, zero biases, seeded and reproducible.

        ``zero_last_layer`` starts the readout at an exact zero map, which
        a softmax readout turns into uniform output.
        """
        if len(sizes) != len(activations) + 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if zero_last_layer and i == len(activations) - 1:
                w = np.zeros((n_in, n_out))
            else:
                limit = math.sqrt(6.0 / (n_in + n_out))
                w = rng.uniform(-limit, limit, size=(n_in, n_out))
            weights.append(w)
            biases.append(np.zeros(n_out))
        return cls(weights, biases, activations)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x):
        """Evaluate the net; accepts 1-d (single sample) or 2-d (batch)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.shape[1] != self.sizes[0]:
            raise ValueError(
                f"input width {a.shape[1]} does not match net input {self.sizes[0]}"
            )
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ w + b
            a = self._apply(act, z)
        return a[0] if single else a

    @staticmethod
    def _apply(act, z):
        if act == "elu":
            return elu(z)
        if act == "softmax":
            return softmax(z)
        return z

    def forward_cached(self, x):
        """Batch forward pass keeping per-layer inputs and pre-activations."""
        a = np.asarray(x, dtype=float)
        if a.ndim != 2:
            raise ValueError("forward_cached expects a 2-d batch")
        inputs, pre_acts = [], []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(a)
            z = a @ w + b
            pre_acts.append(z)
            a = self._apply(act, z)
        return a, (inputs, pre_acts, a)

    def backward(self, cache, grad_output, want_input_grad=False):
        """Backpropagate d(loss)/d(output) to parameter (and input) grads.

        Returns ``(grads, grad_input)`` where ``grads`` is a list of
        ``(dW, db)`` pairs in layer order.
        """
        inputs, pre_acts, output = cache
        delta = np.asarray(grad_output, dtype=float)
        grads = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            act = self.activations[i]
            if act == "elu":
                delta = delta * elu_prime(pre_acts[i])
            elif act == "softmax":
                p = output if i == len(self.weights) - 1 else softmax(pre_acts[i])
                delta = p * (delta - np.sum(delta * p, axis=-1, keepdims=True))
            dw = inputs[i].T @ delta
            db = delta.sum(axis=0)
            grads[i] = (dw, db)
            if i > 0 or want_input_grad:
                delta = delta @ self.weights[i].T
        return grads, (delta if want_input_grad else None)

    # -- parameter plumbing -------------------------------------------------

    def param_arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def params_flat(self):
        return np.concatenate([p.ravel() for p in self.param_arrays()])

    def set_params_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError("flat parameter vector has wrong length")
        offset = 0
        for p in self.param_arrays():
            p[...] = theta[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def copy(self):
        return DenseNet([w.copy() for w in self.weights],
                        [b.copy() for b in self.biases],
                        list(self.activations))

    def params_hash(self):
        """SHA-256 over raw parameter bytes; detects any drift bit-for-bit."""
        digest = hashlib.sha256()
        for p in self.param_arrays():
            digest.update(np.ascontiguousarray(p).tobytes())
        return digest.hexdigest()


def flatten_grads(grads):
    """Flatten a list of (dW, db) pairs to one vector in parameter order."""
    parts = []
    for dw, db in grads:
        parts.append(np.ravel(dw))
        parts.append(np.ravel(db))
    return np.concatenate(parts)


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter list."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, learning_rate):
        state = cls(learning_rate=learning_rate)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError("parameter, gradient and state lengths differ")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- checkpoints --------------------------------------------------------------


def net_to_doc(net: DenseNet) -> dict:
    layers = []
    for w, b, act in zip(net.weights, net.biases, net.activations):
        layers.append({
            "rows": w.shape[0],
            "cols": w.shape[1],
            "weights": w.ravel().tolist(),
            "bias": b.tolist(),
            "activation": act,
        })
    return {"layers": layers}


def net_from_doc(doc: dict) -> DenseNet:
    try:
        layers = doc["layers"]
        weights, biases, acts = [], [], []
        for layer in layers:
            rows, cols = int(layer["rows"]), int(layer["cols"])
            w = np.asarray(layer["weights"], dtype=float).reshape(rows, cols)
            weights.append(w)
            biases.append(np.asarray(layer["bias"], dtype=float))
            acts.append(layer["activation"])
        return DenseNet(weights, biases, acts)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed network document: {exc}") from exc


def save_checkpoint(net: DenseNet, path):
    doc = {"version": CHECKPOINT_VERSION, "kind": "dense_net"}
    doc.update(net_to_doc(net))
    write_json_doc(doc, path)


def load_checkpoint(path) -> DenseNet:
    doc = read_json_doc(path, expected_kind="dense_net")
    return net_from_doc(doc)


def write_json_doc(doc: dict, path):
    # repr-based float serialization round-trips every finite double exactly.
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False, sort_keys=True)
        fh.write("\n")


def read_json_doc(path, expected_kind=None) -> dict:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise CheckpointError(f"corrupt checkpoint {path}: missing version")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {doc['version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if expected_kind is not None and doc.get("kind") != expected_kind:
        raise CheckpointError(
            f"checkpoint kind {doc.get('kind')!r} is not {expected_kind!r}"
        )
    return doc


# -- loss heads ---------------------------------------------------------------

_LOSS_HEADS: dict = {}


def register_loss_head(name: str, fn):
    """Register ``fn(model, batch) -> (loss, flat_grad)`` under ``name``."""
    _LOSS_HEADS[name] = fn


def loss_and_gradients(head: str, model, batch):
    """Evaluate a registered loss head; gradient aligns with params_flat()."""
    try:
        fn = _LOSS_HEADS[head]
    except KeyError:
        raise UnknownLossHeadError(
            f"loss head {head!r} is not registered; known: {sorted(_LOSS_HEADS)}"
        ) from None
    return fn(model, batch)


def gradients(head: str, model, batch):
    """Analytic gradient of a registered loss head."""
    return loss_and_gradients(head, model, batch)[1]


def _mse_head(model: DenseNet, batch):
    x, y = batch
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out, cache = model.forward_cached(x)
    diff = out - y
    loss = float(np.mean(np.square(diff)))
    grads, _ = model.backward(cache, 2.0 * diff / diff.size)
    return loss, flatten_grads(grads)


register_loss_head("mse", _mse_head)


def finite_difference_gradient(loss_fn, theta, h=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    theta = np.array(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        up = loss_fn(theta)
        theta[i] = orig - h
        down = loss_fn(theta)
        theta[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad


def gradient_check(head: str, model, batch, h=1e-6):
    """Max relative error between analytic and finite-difference gradients.

    The componentwise gap is scaled by the larger gradient's max magnitude,
    which keeps the metric meaningful when individual components vanish.
    """
    theta0 = model.params_flat()
    _, analytic = loss_and_gradients(head, model, batch)

    def loss_fn(theta):
        model.set_params_flat(theta)
        value = loss_and_gradients(head, model, batch)[0]
        return value

    try:
        numeric = finite_difference_gradient(loss_fn, theta0, h=h)
    finally:
        model.set_params_flat(theta0)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)
