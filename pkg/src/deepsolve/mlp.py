"""Feed-forward network with manual backpropagation and Adam updates.

Rectifier hidden layers, logistic-sigmoid output layer (so predictions stay
strictly inside (0,1) and decode can never leave the variable boxes).  The
backward pass takes an externally supplied gradient of the loss w.r.t. the
network output, which is how the penalty-gradient estimator plugs in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MlpError(Exception):
    pass


class StaleTraceError(MlpError):
    """Trace was produced by an older parameter state."""


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep outputs strictly inside (0,1) even where float64 saturates, so
    # decoded variables can never sit outside their boxes
    return np.clip(out, _SIG_LO, _SIG_HI)


@dataclass
class MlpModel:
    weights: list[np.ndarray]  # layer i: (fan_in, fan_out)
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"
    version: int = 0

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


@dataclass
class ForwardTrace:
    x: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    version: int


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_model(layer_sizes, seed) -> MlpModel:
    """He-style fan-in scaled uniform weights, zero biases, seeded."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise MlpError(f"bad layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights=weights, biases=biases)


def forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Batched forward pass; x is (batch, in_dim) or (in_dim,)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.weights[0].shape[0]:
        raise MlpError(
            f"input dimension {x.shape[1]} does not match model ({model.weights[0].shape[0]})"
        )
    pre, act = [], []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        pre.append(z)
        a = _sigmoid(z) if i == last else np.maximum(0.0, z)
        act.append(a)
    return a, ForwardTrace(x=x, pre_activations=pre, activations=act, version=model.version)


def backward(model: MlpModel, trace: ForwardTrace, dl_ds: np.ndarray):
    """Parameter gradients for a batch, given dLoss/dOutput rows.

    Returns [(dW, db), ...] per layer, summed over the batch; scale dl_ds
    by 1/batch before calling to obtain batch-mean gradients.  Rectifier
    subgradient at exactly zero is taken as zero.
    """
    if trace.version != model.version:
        raise StaleTraceError(
            f"trace from parameter version {trace.version}, model at {model.version}"
        )
    dl_ds = np.atleast_2d(np.asarray(dl_ds, dtype=float))
    out = trace.activations[-1]
    if dl_ds.shape != out.shape:
        raise MlpError(f"output gradient shape {dl_ds.shape} does not match {out.shape}")

    grads = [None] * len(model.weights)
    delta = dl_ds * out * (1.0 - out)  # through the output sigmoid
    for i in range(len(model.weights) - 1, -1, -1):
        a_prev = trace.activations[i - 1] if i > 0 else trace.x
        grads[i] = (a_prev.T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ model.weights[i].T) * (trace.pre_activations[i - 1] > 0.0)
    return grads


def init_adam(model: MlpModel, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(
        m_w=[np.zeros_like(w) for w in model.weights],
        v_w=[np.zeros_like(w) for w in model.weights],
        m_b=[np.zeros_like(b) for b in model.biases],
        v_b=[np.zeros_like(b) for b in model.biases],
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(model: MlpModel, state: AdamState, grads) -> MlpModel:
    """Bias-corrected Adam update, in place; bumps the parameter version."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (dw, db) in enumerate(grads):
        state.m_w[i] = b1 * state.m_w[i] + (1 - b1) * dw
        state.v_w[i] = b2 * state.v_w[i] + (1 - b2) * dw**2
        state.m_b[i] = b1 * state.m_b[i] + (1 - b1) * db
        state.v_b[i] = b2 * state.v_b[i] + (1 - b2) * db**2
        model.weights[i] -= state.learning_rate * (state.m_w[i] / c1) / (
            np.sqrt(state.v_w[i] / c2) + state.eps
        )
        model.biases[i] -= state.learning_rate * (state.m_b[i] / c1) / (
            np.sqrt(state.v_b[i] / c2) + state.eps
        )
    model.version += 1
    return model


# ---------------------------------------------------------------------------
# checkpoints: JSON header line + one flat decimal array per line


def save_model(model: MlpModel, path, meta: dict | None = None):
    header = {
        "format_version": 1,
        "layer_sizes": model.layer_sizes,
        "hidden_activation": model.hidden_activation,
        "output_activation": model.output_activation,
        "version": model.version,
        "meta": meta or {},
    }
    lines = [json.dumps(header)]
    for w, b in zip(model.weights, model.biases):
        lines.append(",".join("%.17g" % v for v in w.ravel()))
        lines.append(",".join("%.17g" % v for v in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> tuple[MlpModel, dict]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format_version") != 1:
        raise MlpError(f"{path}: unsupported checkpoint format")
    sizes = header["layer_sizes"]
    weights, biases = [], []
    row = 1
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(
            np.array([float(v) for v in lines[row].split(",")]).reshape(fan_in, fan_out)
        )
        biases.append(np.array([float(v) for v in lines[row + 1].split(",")]))
        row += 2
    model = MlpModel(
        weights=weights,
        biases=biases,
        hidden_activation=header["hidden_activation"],
        output_activation=header["output_activation"],
        version=header.get("version", 0),
    )
    return model, header.get("meta", {})
