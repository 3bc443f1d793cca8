"""Small feedforward embedding network with hand-written backprop, plus Adam.

The forward pass is written so that every output element reduces over the
input dimension only: batched and sample-at-a-time calls agree bit for bit,
which the evaluation pipeline relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Rng
from .errors import ContractError, TrainingError

DEFAULT_HIDDEN_DIM = 64
DEFAULT_EMBED_DIM = 32


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Broadcast-multiply then reduce: the per-element summation order depends
    # only on the input dimension, never on the batch size.
    return (x[:, None, :] * w[None, :, :]).sum(axis=2) + b


class Mlp:
    """Affine + ReLU hidden layers, affine output, float64 parameters.

    Weights start uniform in +-sqrt(6 / (fan_in + fan_out)), biases at zero.
    Output embeddings are not normalized here; cosine similarity normalizes
    at the point of use.
    """

    def __init__(self, dims, rng: Rng):
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2:
            raise ContractError("need at least an input and an output dimension")
        if any(d <= 0 for d in dims):
            raise ContractError(f"all layer dimensions must be positive, got {dims}")
        self.dims = dims
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @classmethod
    def from_arrays(cls, weights, biases) -> "Mlp":
        """Rebuild a network from explicit parameter arrays (checkpoint load)."""
        if len(weights) != len(biases) or not weights:
            raise ContractError("weights and biases must be non-empty and congruent")
        net = cls.__new__(cls)
        net.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        net.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        dims = [net.weights[0].shape[1]]
        for w, b in zip(net.weights, net.biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ContractError("malformed layer arrays")
            if w.shape[1] != dims[-1]:
                raise ContractError("consecutive layer dimensions do not chain")
            dims.append(w.shape[0])
        net.dims = tuple(dims)
        return net

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def embed_dim(self) -> int:
        return self.dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list:
        """Live parameter arrays, interleaved [w0, b0, w1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


@dataclass
class Tape:
    """Activation record from a forward pass, consumed by backward."""

    dims: tuple
    layer_inputs: list  # input to each layer (first entry is the batch itself)
    pre_activations: list  # affine outputs z_k, before ReLU


@dataclass
class GradBuffer:
    """Per-layer parameter gradients, shape-congruent with an Mlp."""

    d_weights: list
    d_biases: list

    def flat(self) -> list:
        out = []
        for dw, db in zip(self.d_weights, self.d_biases):
            out.append(dw)
            out.append(db)
        return out


def forward(net: Mlp, batch_inputs) -> tuple:
    """Embed a batch; returns (embeddings, tape).

    batch_inputs: (B, input_dim). The tape records everything backward needs.
    """
    x = np.asarray(batch_inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ContractError(
            f"batch must be (B, {net.input_dim}), got shape {x.shape}"
        )
    if x.shape[0] < 1:
        raise ContractError("batch must contain at least one row")
    layer_inputs = [x]
    pre_activations = []
    a = x
    last = net.num_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = _affine(a, w, b)
        pre_activations.append(z)
        a = z if k == last else np.maximum(z, 0.0)
        if k != last:
            layer_inputs.append(a)
    return a, Tape(net.dims, layer_inputs, pre_activations)


def backward(net: Mlp, tape: Tape, d_embeddings) -> GradBuffer:
    """Parameter gradients given the upstream gradient on the embeddings."""
    if tape.dims != net.dims:
        raise ContractError("tape does not match this network's layer dimensions")
    g = np.asarray(d_embeddings, dtype=np.float64)
    batch = tape.layer_inputs[0].shape[0]
    if g.shape != (batch, net.embed_dim):
        raise ContractError(
            f"upstream gradient must be ({batch}, {net.embed_dim}), got {g.shape}"
        )
    d_weights = [None] * net.num_layers
    d_biases = [None] * net.num_layers
    dz = g
    for k in range(net.num_layers - 1, -1, -1):
        a_in = tape.layer_inputs[k]
        d_weights[k] = dz.T @ a_in
        d_biases[k] = dz.sum(axis=0)
        if k > 0:
            da = dz @ net.weights[k]
            dz = da * (tape.pre_activations[k - 1] > 0.0)
    return GradBuffer(d_weights, d_biases)


@dataclass
class AdamState:
    """Adam moment buffers for one parameter group."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params, lr: float, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params, grads, state: AdamState):
    """One Adam update with bias correction; mutates params and state in place.

    Raises TrainingError on non-finite gradients so the caller can abort
    with a diagnostic instead of silently corrupting parameters.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and state must have matching lengths")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise TrainingError("non-finite gradient encountered")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
