"""
Dense tanh network with hand-written reverse-mode gradients.

Inputs may be a single vector of shape (in,) or a batch of shape (B, in);
outputs keep the same leading layout.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from core.exceptions import DomainError, ShapeError

MAGIC = b"FCNET1"

ACTIVATIONS = ("identity", "tanh")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise DomainError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"bias shape {layer.bias.shape} != ({layer.out_dim},)")
        if self.layers[-1].activation != "identity":
            raise DomainError("the output layer must be linear")

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    @property
    def dims(self):
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self):
        """Flat parameter list in layer order: W1, b1, W2, b2, ..."""
        params = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        return params

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def copy(self):
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_dense_net(dims, rng, hidden_activation="tanh"):
    """Glorot-uniform weights, zero biases, linear output layer."""
    if len(dims) < 2:
        raise ShapeError("dims needs at least an input and an output size")
    layers = []
    for index, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        activation = "identity" if index == len(dims) - 2 else hidden_activation
        layers.append(Layer(weight, np.zeros(fan_out), activation))
    return DenseNet(layers)


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(f"expected input of width {net.input_dim}, got shape {x.shape}")
    return batch, single


def forward_with_cache(net, x):
    """Forward pass that also returns the per-layer inputs and activations."""
    batch, single = _as_batch(net, x)
    inputs, outputs = [], []
    h = batch
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        h = np.tanh(z) if layer.activation == "tanh" else z
        outputs.append(h)
    return h, (inputs, outputs, single)


def forward(net, x):
    out, (_, _, single) = forward_with_cache(net, x)
    return out[0] if single else out


def backward(net, x, upstream_grad, cache=None):
    """
    Exact gradients of sum(upstream_grad * forward(net, x)).

    Returns (param_grads, input_grad) with param_grads aligned to
    net.parameters().
    """
    if cache is None:
        _, cache = forward_with_cache(net, x)
    inputs, outputs, single = cache

    grad = np.asarray(upstream_grad, dtype=np.float64)
    grad = grad[None, :] if grad.ndim == 1 else grad
    if grad.shape != outputs[-1].shape:
        raise ShapeError(f"upstream gradient shape {grad.shape} != output {outputs[-1].shape}")

    param_grads = [None] * (2 * len(net.layers))
    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        if layer.activation == "tanh":
            grad = grad * (1.0 - outputs[index] ** 2)
        param_grads[2 * index] = grad.T @ inputs[index]
        param_grads[2 * index + 1] = grad.sum(axis=0)
        grad = grad @ layer.weight

    input_grad = grad[0] if single else grad
    return param_grads, input_grad


def net_to_bytes(net):
    """FCNET1 layout: magic, u32 layer count, u32 dims, u32 activation codes, f32 params."""
    header = [MAGIC, struct.pack("<I", len(net.layers))]
    header.append(struct.pack(f"<{len(net.dims)}I", *net.dims))
    codes = [ACTIVATIONS.index(layer.activation) for layer in net.layers]
    header.append(struct.pack(f"<{len(codes)}I", *codes))
    body = [np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.parameters()]
    return b"".join(header + body)


def net_from_bytes(blob, offset=0):
    """Inverse of net_to_bytes; returns (net, offset just past the network)."""
    if blob[offset : offset + len(MAGIC)] != MAGIC:
        raise ShapeError("not an FCNET1 checkpoint")
    offset += len(MAGIC)
    try:
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{count + 1}I", blob, offset)
        offset += 4 * (count + 1)
        codes = struct.unpack_from(f"<{count}I", blob, offset)
        offset += 4 * count
    except struct.error as exc:
        raise ShapeError(f"truncated checkpoint header: {exc}") from exc

    layers = []
    for fan_in, fan_out, code in zip(dims[:-1], dims[1:], codes):
        sizes = (fan_out * fan_in, fan_out)
        end = offset + 4 * sum(sizes)
        if end > len(blob):
            raise ShapeError("truncated checkpoint parameters")
        flat = np.frombuffer(blob, dtype="<f4", count=sum(sizes), offset=offset).astype(np.float64)
        weight = flat[: sizes[0]].reshape(fan_out, fan_in).copy()
        bias = flat[sizes[0] :].copy()
        layers.append(Layer(weight, bias, ACTIVATIONS[code]))
        offset = end
    return DenseNet(layers), offset
