"""
Storyspace - Neural Layers

Parameterized building blocks on top of the tensor tape:
- LinearMap: per-slot affine map (a kernel-1 convolution over slots)
- GRUCell / BiGRU: gated recurrent units, both directions
- NonLocalBlock: embedded-Gaussian relational layer with residual output
- OutputHead: hidden -> tanh -> logits

Layers hold references into a ModelParameters table; they own no storage
and never mutate parameters during a forward pass.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from storyspace_inputs import ConfigError
from storyspace_tensor import (
    ShapeError,
    Tensor,
    activation,
    concat,
    matmul,
    softmax,
    stack,
    take,
    transpose,
)


INIT_KINDS = ("xavier_uniform", "lecun_normal", "zeros")


# ============================================================================
# PARAMETERS
# ============================================================================

@dataclass(frozen=True)
class ParameterSpec:
    name: str
    shape: Tuple[int, ...]
    init: str  # one of INIT_KINDS


class ModelParameters(dict):
    """Ordered name -> Tensor table for every trainable tensor of a model."""

    def clone(self) -> "ModelParameters":
        copy = ModelParameters()
        for name, tensor in self.items():
            copy[name] = Tensor(tensor.data, requires_grad=True, name=name)
        return copy

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Overwrite every tensor in place from same-named arrays."""
        missing = sorted(set(self) - set(arrays))
        extra = sorted(set(arrays) - set(self))
        if missing or extra:
            raise ConfigError(f"parameter names differ (missing={missing}, unexpected={extra})")
        for name, tensor in self.items():
            values = np.asarray(arrays[name])
            if values.shape != tensor.shape:
                raise ShapeError(f"{name}: expected shape {tensor.shape}, got {values.shape}")
            tensor.data[...] = values

    def count(self) -> int:
        return sum(tensor.size for tensor in self.values())


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_parameters(specs: Iterable[ParameterSpec], rng: np.random.Generator) -> ModelParameters:
    """
    Fan-in scaled initialization: uniform +-sqrt(6/(fan_in+fan_out)) for
    tanh/sigmoid layers, normal(0, sqrt(1/fan_in)) for SELU-fed layers,
    zeros for biases. Specs are drawn in order, so equal seeds give equal
    tables.
    """
    params = ModelParameters()
    for spec in specs:
        if spec.name in params:
            raise ConfigError(f"duplicate parameter name {spec.name}")
        if spec.init == "zeros":
            values = np.zeros(spec.shape)
        elif spec.init == "xavier_uniform":
            fan_out, fan_in = spec.shape
            bound = xavier_bound(fan_in, fan_out)
            values = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.init == "lecun_normal":
            fan_in = spec.shape[1]
            values = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=spec.shape)
        else:
            raise ConfigError(f"unknown init '{spec.init}' (choose from {', '.join(INIT_KINDS)})")
        params[spec.name] = Tensor(values, requires_grad=True, name=spec.name)
    return params


def _lookup(params: ModelParameters, name: str) -> Tensor:
    if name not in params:
        raise ConfigError(f"missing parameter {name}")
    return params[name]


# ============================================================================
# LINEAR MAP
# ============================================================================

@dataclass
class LinearMap:
    W: Tensor                    # out x in
    b: Optional[Tensor] = None   # out

    def __post_init__(self):
        if self.W.ndim != 2:
            raise ShapeError(f"linear weight must be a matrix, got {self.W.shape}")
        if self.b is not None and self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"bias shape {self.b.shape} does not match weight {self.W.shape}")

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]


def linear(layer: LinearMap, x: Tensor) -> Tensor:
    """Apply to a vector (in) or to every row of an N x in matrix."""
    if x.ndim not in (1, 2) or x.shape[-1] != layer.in_dim:
        raise ShapeError(f"linear map expects width {layer.in_dim}, got input {x.shape}")
    y = matmul(x, transpose(layer.W))
    return y if layer.b is None else y + layer.b


def linear_specs(prefix: str, out_dim: int, in_dim: int, bias: bool = True,
                 init: str = "xavier_uniform") -> List[ParameterSpec]:
    specs = [ParameterSpec(f"{prefix}.W", (out_dim, in_dim), init)]
    if bias:
        specs.append(ParameterSpec(f"{prefix}.b", (out_dim,), "zeros"))
    return specs


def linear_from(params: ModelParameters, prefix: str, bias: bool = True) -> LinearMap:
    return LinearMap(_lookup(params, f"{prefix}.W"), _lookup(params, f"{prefix}.b") if bias else None)


# ============================================================================
# GRU
# ============================================================================

@dataclass
class GRUCell:
    """Update gate z, reset gate r, candidate h~; W input-to-hidden, U hidden-to-hidden."""
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    def __post_init__(self):
        hidden, inputs = self.W_z.shape
        for gate in ("z", "r", "h"):
            if getattr(self, f"W_{gate}").shape != (hidden, inputs) \
                    or getattr(self, f"U_{gate}").shape != (hidden, hidden) \
                    or getattr(self, f"b_{gate}").shape != (hidden,):
                raise ShapeError(f"GRU gate {gate} has inconsistent shapes")

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]


def _affine(x: Tensor, W: Tensor) -> Tensor:
    return matmul(x, transpose(W))


def gru_step(cell: GRUCell, h_prev: Tensor, x: Tensor) -> Tensor:
    """
    One GRU update. Works on single vectors or on row batches (h_prev N x H,
    x N x Din):

        z  = sigmoid(W_z x + U_z h + b_z)
        r  = sigmoid(W_r x + U_r h + b_r)
        h~ = tanh(W_h x + U_h (r * h) + b_h)
        h  = (1 - z) * h_prev + z * h~
    """
    if x.ndim != h_prev.ndim or x.ndim not in (1, 2) \
            or x.shape[-1] != cell.input_dim or h_prev.shape[-1] != cell.hidden_dim \
            or (x.ndim == 2 and x.shape[0] != h_prev.shape[0]):
        raise ShapeError(
            f"gru_step expects x (.., {cell.input_dim}) and h (.., {cell.hidden_dim}), "
            f"got {x.shape} and {h_prev.shape}"
        )
    z = activation("sigmoid", _affine(x, cell.W_z) + _affine(h_prev, cell.U_z) + cell.b_z)
    r = activation("sigmoid", _affine(x, cell.W_r) + _affine(h_prev, cell.U_r) + cell.b_r)
    candidate = activation("tanh", _affine(x, cell.W_h) + _affine(r * h_prev, cell.U_h) + cell.b_h)
    return (1.0 - z) * h_prev + z * candidate


def gru_specs(prefix: str, input_dim: int, hidden: int) -> List[ParameterSpec]:
    specs = []
    for gate in ("z", "r", "h"):
        specs.append(ParameterSpec(f"{prefix}.W_{gate}", (hidden, input_dim), "xavier_uniform"))
        specs.append(ParameterSpec(f"{prefix}.U_{gate}", (hidden, hidden), "xavier_uniform"))
        specs.append(ParameterSpec(f"{prefix}.b_{gate}", (hidden,), "zeros"))
    return specs


def gru_from(params: ModelParameters, prefix: str) -> GRUCell:
    fields = {}
    for gate in ("z", "r", "h"):
        for kind in ("W", "U", "b"):
            fields[f"{kind}_{gate}"] = _lookup(params, f"{prefix}.{kind}_{gate}")
    return GRUCell(**fields)


@dataclass
class BiGRU:
    forward: GRUCell
    backward: GRUCell

    @property
    def output_dim(self) -> int:
        return self.forward.hidden_dim + self.backward.hidden_dim


def bigru_forward(net: BiGRU, seq: Tensor) -> Tensor:
    """T x Din -> T x 2H; both directions start from a zero hidden state."""
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeError(f"bigru_forward needs a non-empty T x Din sequence, got {seq.shape}")
    steps = seq.shape[0]
    rows = [take(seq, i) for i in range(steps)]

    h = Tensor.zeros((net.forward.hidden_dim,))
    forward_states = []
    for row in rows:
        h = gru_step(net.forward, h, row)
        forward_states.append(h)

    h = Tensor.zeros((net.backward.hidden_dim,))
    backward_states: List[Optional[Tensor]] = [None] * steps
    for i in reversed(range(steps)):
        h = gru_step(net.backward, h, rows[i])
        backward_states[i] = h

    return concat([stack(forward_states), stack(backward_states)], axis=1)


def bigru_specs(prefix: str, input_dim: int, hidden: int) -> List[ParameterSpec]:
    return gru_specs(f"{prefix}.fwd", input_dim, hidden) + gru_specs(f"{prefix}.bwd", input_dim, hidden)


def bigru_from(params: ModelParameters, prefix: str) -> BiGRU:
    return BiGRU(gru_from(params, f"{prefix}.fwd"), gru_from(params, f"{prefix}.bwd"))


# ============================================================================
# NON-LOCAL RELATIONAL BLOCK
# ============================================================================

@dataclass
class NonLocalBlock:
    theta: LinearMap   # d_inner x d_in
    phi: LinearMap     # d_inner x d_in
    g: LinearMap       # d_inner x d_in
    z: LinearMap       # d_in x d_inner

    def __post_init__(self):
        d_in = self.theta.in_dim
        if self.phi.in_dim != d_in or self.g.in_dim != d_in or self.z.out_dim != d_in \
                or self.theta.out_dim != self.phi.out_dim or self.z.in_dim != self.g.out_dim:
            raise ShapeError("non-local projections have inconsistent shapes")


def correlation_map(block: NonLocalBlock, x: Tensor) -> Tensor:
    """T x T row-stochastic map: softmax over keys of theta(x) phi(x)^T."""
    scores = matmul(linear(block.theta, x), transpose(linear(block.phi, x)))
    return softmax(scores, axis=1)


def nonlocal_forward(block: NonLocalBlock, x: Tensor) -> Tensor:
    """Z = W_z (A g(x)) + x. Each row of x (one slot) is one attention element."""
    if x.ndim != 2 or x.shape[1] != block.theta.in_dim:
        raise ShapeError(f"non-local block expects T x {block.theta.in_dim}, got {x.shape}")
    y = matmul(correlation_map(block, x), linear(block.g, x))
    return linear(block.z, y) + x


def nonlocal_specs(prefix: str, d_in: int, d_inner: int) -> List[ParameterSpec]:
    # theta/phi/g read SELU outputs
    return (
        linear_specs(f"{prefix}.theta", d_inner, d_in, bias=False, init="lecun_normal")
        + linear_specs(f"{prefix}.phi", d_inner, d_in, bias=False, init="lecun_normal")
        + linear_specs(f"{prefix}.g", d_inner, d_in, bias=False, init="lecun_normal")
        + linear_specs(f"{prefix}.z", d_in, d_inner, bias=False)
    )


def nonlocal_from(params: ModelParameters, prefix: str) -> NonLocalBlock:
    return NonLocalBlock(
        theta=linear_from(params, f"{prefix}.theta", bias=False),
        phi=linear_from(params, f"{prefix}.phi", bias=False),
        g=linear_from(params, f"{prefix}.g", bias=False),
        z=linear_from(params, f"{prefix}.z", bias=False),
    )


# ============================================================================
# OUTPUT HEAD
# ============================================================================

@dataclass
class OutputHead:
    hidden: LinearMap  # W_w, b_w
    out: LinearMap     # W_out, b_out


def output_head(head: OutputHead, h: Tensor) -> Tensor:
    """logits = W_out tanh(W_w h + b_w) + b_out."""
    return linear(head.out, activation("tanh", linear(head.hidden, h)))


def output_probabilities(head: OutputHead, h: Tensor) -> Tensor:
    return softmax(output_head(head, h), axis=-1)


def head_specs(prefix: str, hidden: int, vocab_size: int) -> List[ParameterSpec]:
    return linear_specs(f"{prefix}.hidden", hidden, hidden) + linear_specs(f"{prefix}.out", vocab_size, hidden)


def head_from(params: ModelParameters, prefix: str) -> OutputHead:
    return OutputHead(linear_from(params, f"{prefix}.hidden"), linear_from(params, f"{prefix}.out"))


def zero_parameters(params: ModelParameters, names: Optional[Sequence[str]] = None) -> None:
    """Zero the named tensors (all when names is None) in place."""
    for name in names if names is not None else list(params):
        params[name].data[...] = 0.0
