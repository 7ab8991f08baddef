"""Gated graph neural network over the signed four-block AU adjacency.

Each of the four C×C blocks of ``A`` is an edge type.  For node v the
message is the concatenation over blocks k of ``sum_u A_k[u, v] h_u``, so the
message has width 4D and the gate matrices ``W_*`` are D×4D.  States are
updated with a GRU-style cell; after ``T - 1`` steps a shared two-layer
network ``g`` maps ``[h_v, x_v]`` to the node output.

All functions accept node tensors shaped C×D or N×C×D (batched).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import ConfigurationError, DimensionError
from .numeric import ParamRegistry, Tensor

GATES = ("z", "r", "h")


@dataclass
class GGNNState:
    H: Tensor
    t: int
    T: int

    @property
    def done(self) -> bool:
        return self.t >= self.T


def init_params(params: ParamRegistry, rng: np.random.Generator, num_aus: int,
                hidden: int, feat_dim: int) -> None:
    """Register gate, output-network and prediction-head parameters."""
    d = hidden
    for gate in GATES:
        suffix = "" if gate == "h" else f"_{gate}"
        params.add(f"ggnn.W{suffix}", Tensor(nm.glorot_uniform(rng, (d, 4 * d), 4 * d, d)))
        params.add(f"ggnn.U{suffix}", Tensor(nm.glorot_uniform(rng, (d, d), d, d)))
    params.add("ggnn.b", Tensor(np.zeros(4 * d)))
    params.add("ggnn.g.fc1.weight", Tensor(nm.glorot_uniform(rng, (d, d + feat_dim), d + feat_dim, d)))
    params.add("ggnn.g.fc1.bias", Tensor(np.zeros(d)))
    params.add("ggnn.g.fc2.weight", Tensor(nm.glorot_uniform(rng, (d, d), d, d)))
    params.add("ggnn.g.fc2.bias", Tensor(np.zeros(d)))


def init_head(params: ParamRegistry, rng: np.random.Generator, num_aus: int, node_dim: int) -> None:
    fan_in = num_aus * node_dim
    params.add("head.weight", Tensor(nm.glorot_uniform(rng, (num_aus, fan_in), fan_in, num_aus)))
    params.add("head.bias", Tensor(np.zeros(num_aus)))


def init_hidden(x: Tensor, hidden: int, T: int = 3) -> GGNNState:
    """Hidden state at t = 1: node features zero-padded to ``hidden``."""
    d_x = x.shape[-1]
    if hidden < d_x:
        raise ConfigurationError(f"hidden size {hidden} is smaller than feature size {d_x}")
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    return GGNNState(nm.pad_last(x, hidden - d_x), 1, T)


def graph_messages(H: Tensor, A: np.ndarray) -> Tensor:
    """Per-block weighted neighbour sums, concatenated to width 4D."""
    c = H.shape[-2]
    if A.shape != (c, 4 * c):
        raise DimensionError(f"adjacency must be {c}×{4 * c} for {c} nodes, got {A.shape}")
    blocks = [np.ascontiguousarray(A[:, k * c:(k + 1) * c]) for k in range(4)]
    h = H.data
    y = np.concatenate([blk.T @ h for blk in blocks], axis=-1)

    def backward(g):
        d = h.shape[-1]
        dh = np.zeros_like(h)
        for k, blk in enumerate(blocks):
            dh += blk @ g[..., k * d:(k + 1) * d]
        return (dh,)

    return nm.record(y, (H,), backward)


def propagate_step(state: GGNNState, A: np.ndarray, params: ParamRegistry) -> GGNNState:
    if state.done:
        raise ConfigurationError(f"state already at final step t={state.t} of T={state.T}")
    h = state.H
    a = nm.add_bias(graph_messages(h, A), params["ggnn.b"])
    fc = nm.fully_connected
    z = nm.sigmoid(nm.add(fc(a, params["ggnn.W_z"]), fc(h, params["ggnn.U_z"])))
    r = nm.sigmoid(nm.add(fc(a, params["ggnn.W_r"]), fc(h, params["ggnn.U_r"])))
    cand = nm.tanh(nm.add(fc(a, params["ggnn.W"]), fc(nm.mul(r, h), params["ggnn.U"])))
    h_new = nm.add(nm.mul(nm.one_minus(z), h), nm.mul(z, cand))
    return GGNNState(h_new, state.t + 1, state.T)


def node_output(state: GGNNState, x: Tensor, params: ParamRegistry) -> Tensor:
    """o_v = g([h_v, x_v]) with the shared network g = FC ∘ tanh ∘ FC."""
    inp = nm.concat([state.H, x], axis=-1)
    hid = nm.tanh(nm.fully_connected(inp, params["ggnn.g.fc1.weight"], params["ggnn.g.fc1.bias"]))
    return nm.fully_connected(hid, params["ggnn.g.fc2.weight"], params["ggnn.g.fc2.bias"])


def run(x: Tensor, A: np.ndarray, params: ParamRegistry, T: int = 3) -> Tensor:
    hidden = params["ggnn.U"].shape[0]
    state = init_hidden(x, hidden, T)
    while not state.done:
        state = propagate_step(state, A, params)
    return node_output(state, x, params)


def predict(o: Tensor, params: ParamRegistry) -> tuple[Tensor, Tensor]:
    """Concatenate node outputs, apply the joint head; returns (probabilities, logits)."""
    c, d = o.shape[-2:]
    flat = nm.reshape(o, o.shape[:-2] + (c * d,))
    logits = nm.fully_connected(flat, params["head.weight"], params["head.bias"])
    return nm.sigmoid(logits), logits
