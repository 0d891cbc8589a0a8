"""Minimal dense feed-forward network engine with manual backprop and Adam.

Sized for the small transmitter/receiver networks used here (a few layers of
tens of units), so everything is plain float64 numpy with no autodiff graph.
Inputs may be single vectors of shape (d,) or mini-batches of shape (B, d);
all batch handling is ordinary numpy broadcasting.
"""

import json
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
LINEAR = "linear"
SOFTMAX = "softmax"

_ACTIVATIONS = (RELU, LINEAR, SOFTMAX)

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class AdamConfig:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie strictly inside (0, 1)")
        if self.epsilon <= 0.0 or self.learning_rate <= 0.0:
            raise ValueError("Adam learning_rate and epsilon must be positive")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    biases: np.ndarray  # (out_dim,)
    activation: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise ValueError("weights must be a matrix and biases a vector")
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ValueError("bias length must equal the weight row count")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]


class DenseNetwork:
    """Ordered dense layers plus per-parameter Adam moment accumulators."""

    def __init__(self, layers):
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        for layer in layers[:-1]:
            if layer.activation == SOFTMAX:
                raise ValueError("softmax is only allowed as the final layer")
        self.layers = list(layers)
        self.reset_adam_state()

    def reset_adam_state(self):
        self.adam_m = [
            (np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in self.layers
        ]
        self.adam_v = [
            (np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in self.layers
        ]
        self.adam_t = 0

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def param_count(self):
        return sum(l.weights.size + l.biases.size for l in self.layers)

    def flatten_params(self):
        return np.concatenate(
            [np.concatenate([l.weights.ravel(), l.biases]) for l in self.layers]
        )

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count(),):
            raise ValueError("flat parameter vector has the wrong length")
        pos = 0
        for l in self.layers:
            n = l.weights.size
            l.weights[...] = flat[pos : pos + n].reshape(l.weights.shape)
            pos += n
            l.biases[...] = flat[pos : pos + l.biases.size]
            pos += l.biases.size

    def copy(self):
        net = DenseNetwork(
            [
                DenseLayer(l.weights.copy(), l.biases.copy(), l.activation)
                for l in self.layers
            ]
        )
        net.adam_m = [(mw.copy(), mb.copy()) for mw, mb in self.adam_m]
        net.adam_v = [(vw.copy(), vb.copy()) for vw, vb in self.adam_v]
        net.adam_t = self.adam_t
        return net


@dataclass
class ParameterGradient:
    """Per-layer (dW, db) pairs mirroring a network's parameter shapes."""

    layers: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, net):
        return cls([(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in net.layers])

    def flatten(self):
        return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in self.layers])

    def norm(self):
        return float(np.sqrt(sum(float((dw * dw).sum() + (db * db).sum()) for dw, db in self.layers)))

    def scaled(self, c):
        return ParameterGradient([(c * dw, c * db) for dw, db in self.layers])

    def add(self, other):
        return ParameterGradient(
            [(dw + ow, db + ob) for (dw, db), (ow, ob) in zip(self.layers, other.layers)]
        )


def glorot_init(dims, activations, rng):
    """Build a network with uniform Glorot weights and zero biases."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for d_in, d_out, act in zip(dims, dims[1:], activations):
        bound = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        layers.append(DenseLayer(w, np.zeros(d_out), act))
    return DenseNetwork(layers)


def _softmax(z):
    # Max-subtraction keeps exp() in range for |logit| up to ~700.
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(net, x):
    """Evaluate the network on x of shape (d,) or (B, d).

    Returns (output, tape). The tape caches, per layer, the layer input, the
    pre-activation, and the activation output, and is consumed by backward().
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[1] != net.in_dim:
        raise ValueError(f"input width {a.shape[1]} != network in_dim {net.in_dim}")
    tape = []
    for layer in net.layers:
        z = a @ layer.weights.T + layer.biases
        if layer.activation == RELU:
            out = np.maximum(z, 0.0)
        elif layer.activation == SOFTMAX:
            out = _softmax(z)
        else:
            out = z
        tape.append((a, z, out))
        a = out
    return (a[0] if single else a), tape


def backward(net, tape, output_grad):
    """Backpropagate d(scalar)/d(output) through the tape.

    output_grad has the same shape as the forward output; for a batched tape
    the returned ParameterGradient is the sum over the batch rows.
    """
    if len(tape) != len(net.layers):
        raise ValueError("tape does not match network depth")
    g = np.atleast_2d(np.asarray(output_grad, dtype=np.float64))
    if g.shape != tape[-1][2].shape:
        raise ValueError("output_grad shape does not match the taped forward pass")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        a_in, z, out = tape[i]
        if a_in.shape[1] != net.layers[i].in_dim:
            raise ValueError("stale tape: layer input width mismatch")
        act = net.layers[i].activation
        if act == RELU:
            dz = g * (z > 0.0)
        elif act == SOFTMAX:
            # Full softmax Jacobian: dz = q * (g - sum(q * g)).
            dz = out * (g - (out * g).sum(axis=1, keepdims=True))
        else:
            dz = g
        grads[i] = (dz.T @ a_in, dz.sum(axis=0))
        g = dz @ net.layers[i].weights
    return ParameterGradient(grads)


def adam_step(net, grad, cfg):
    """Apply one bias-corrected Adam update in place."""
    for dw, db in grad.layers:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise ValueError("non-finite gradient")
    net.adam_t += 1
    t = net.adam_t
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for layer, (mw, mb), (vw, vb), (dw, db) in zip(
        net.layers, net.adam_m, net.adam_v, grad.layers
    ):
        mw *= b1
        mw += (1.0 - b1) * dw
        mb *= b1
        mb += (1.0 - b1) * db
        vw *= b2
        vw += (1.0 - b2) * dw * dw
        vb *= b2
        vb += (1.0 - b2) * db * db
        layer.weights -= cfg.learning_rate * (mw / corr1) / (np.sqrt(vw / corr2) + cfg.epsilon)
        layer.biases -= cfg.learning_rate * (mb / corr1) / (np.sqrt(vb / corr2) + cfg.epsilon)
        if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.biases))):
            raise ValueError("non-finite parameters after update")
    return net


def network_to_dict(net):
    """Checkpoint dict: layer dims, activations, row-major weights, biases."""
    return {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "layers": [
            {
                "in_dim": l.in_dim,
                "out_dim": l.out_dim,
                "activation": l.activation,
                "weights": l.weights.ravel().tolist(),  # row-major (out_dim x in_dim)
                "biases": l.biases.tolist(),
            }
            for l in net.layers
        ],
    }


def network_from_dict(doc):
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError("unsupported checkpoint schema version")
    layers = []
    for spec in doc["layers"]:
        w = np.array(spec["weights"], dtype=np.float64).reshape(
            spec["out_dim"], spec["in_dim"]
        )
        layers.append(DenseLayer(w, np.array(spec["biases"]), spec["activation"]))
    return DenseNetwork(layers)


def save_network(net, path):
    with open(path, "w") as f:
        json.dump(network_to_dict(net), f, sort_keys=True)
        f.write("\n")


def load_network(path):
    with open(path) as f:
        return network_from_dict(json.load(f))
