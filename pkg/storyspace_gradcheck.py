"""
Storyspace - Gradient Check Suite

Central-difference checks (64-bit) for every differentiable op, every
layer, imagine and the full forward_loss on micro instances.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from storyspace_data import EOS_ID
from storyspace_inputs import INetConfig
from storyspace_layers import (
    BiGRU,
    GRUCell,
    LinearMap,
    NonLocalBlock,
    OutputHead,
    bigru_forward,
    gru_step,
    linear,
    nonlocal_forward,
    output_head,
)
from storyspace_model import INetModel, forward_loss, imagine
from storyspace_tensor import (
    ACTIVATIONS,
    Tensor,
    activation,
    concat,
    cross_entropy,
    grad_check_params,
    mask_rows,
    matmul,
    precision,
    softmax,
    stack,
    sum_all,
    take,
    transpose,
)


DEFAULT_TOLERANCE = 1e-4
OP_FLOOR = 1e-8
# whole-model losses: finite differences carry ~1e-10 absolute noise
MODEL_FLOOR = 1e-6

Case = Tuple[Callable[[], Tensor], List[Tensor]]


@dataclass
class GradCheckResult:
    name: str
    max_error: float
    passed: bool


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _off_kink(rng: np.random.Generator, *shape: int) -> Tensor:
    """Leaf with every entry at least 0.1 away from zero (relu and selu bend there)."""
    values = rng.normal(size=shape)
    return Tensor(values + np.where(values < 0, -0.1, 0.1), requires_grad=True)


def _weighted(y: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=y.shape))
    return lambda out: sum_all(out * weights)


def _scalarize(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Random linear functional of fn's output, so every output entry matters."""
    reduce = _weighted(fn(), rng)
    return lambda: reduce(fn())


# ============================================================================
# CASES
# ============================================================================

def _op_cases(rng: np.random.Generator) -> List[Tuple[str, Case]]:
    cases = []
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    row = _leaf(rng, 4)
    cases.append(("add", (_scalarize(lambda: a + row, rng), [a, row])))
    cases.append(("sub", (_scalarize(lambda: a - b, rng), [a, b])))
    cases.append(("mul", (_scalarize(lambda: a * row, rng), [a, row])))

    m1, m2, vec = _leaf(rng, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 4)
    cases.append(("matmul", (_scalarize(lambda: matmul(m1, m2), rng), [m1, m2])))
    cases.append(("matmul_vector", (_scalarize(lambda: matmul(m1, vec), rng), [m1, vec])))
    cases.append(("transpose", (_scalarize(lambda: transpose(m1), rng), [m1])))

    for kind in ACTIVATIONS:
        x = _off_kink(rng, 3, 4)
        cases.append((f"activation_{kind}", (_scalarize(lambda x=x, kind=kind: activation(kind, x), rng), [x])))

    s = _leaf(rng, 3, 5)
    cases.append(("softmax_rows", (_scalarize(lambda: softmax(s, axis=1), rng), [s])))
    cases.append(("softmax_columns", (_scalarize(lambda: softmax(s, axis=0), rng), [s])))
    cases.append(("concat", (_scalarize(lambda: concat([a, m1], axis=1), rng), [a, m1])))
    cases.append(("stack", (_scalarize(lambda: stack([row, vec]), rng), [row, vec])))
    cases.append(("take", (_scalarize(lambda: take(a, 1), rng), [a])))
    cases.append(("sum_all", (lambda: sum_all(a * a), [a])))
    keep = [True, False, True]
    cases.append(("mask_rows", (_scalarize(lambda: mask_rows(a, keep), rng), [a])))

    logits = _leaf(rng, 4, 6)
    targets = [2, 5, 0, 3]
    pads = [False, False, True, False]
    cases.append(("cross_entropy", (lambda: cross_entropy(logits, targets, pads), [logits])))
    return cases


def _cell(rng: np.random.Generator, inputs: int, hidden: int) -> GRUCell:
    fields = {}
    for gate in ("z", "r", "h"):
        fields[f"W_{gate}"] = _leaf(rng, hidden, inputs, scale=0.5)
        fields[f"U_{gate}"] = _leaf(rng, hidden, hidden, scale=0.5)
        fields[f"b_{gate}"] = _leaf(rng, hidden, scale=0.5)
    return GRUCell(**fields)


def _cell_params(cell: GRUCell) -> List[Tensor]:
    return [getattr(cell, f"{kind}_{gate}") for gate in ("z", "r", "h") for kind in ("W", "U", "b")]


def _layer_cases(rng: np.random.Generator) -> List[Tuple[str, Case]]:
    cases = []
    lin = LinearMap(_leaf(rng, 3, 5), _leaf(rng, 3))
    x = _leaf(rng, 4, 5)
    cases.append(("linear", (_scalarize(lambda: linear(lin, x), rng), [lin.W, lin.b, x])))

    cell = _cell(rng, 3, 4)
    h_prev, x_t = _leaf(rng, 4), _leaf(rng, 3)
    cases.append(("gru_step", (_scalarize(lambda: gru_step(cell, h_prev, x_t), rng),
                               _cell_params(cell) + [h_prev, x_t])))

    net = BiGRU(_cell(rng, 3, 2), _cell(rng, 3, 2))
    seq = _leaf(rng, 3, 3)
    cases.append(("bigru", (_scalarize(lambda: bigru_forward(net, seq), rng),
                            _cell_params(net.forward) + _cell_params(net.backward) + [seq])))

    block = NonLocalBlock(
        theta=LinearMap(_leaf(rng, 2, 4)),
        phi=LinearMap(_leaf(rng, 2, 4)),
        g=LinearMap(_leaf(rng, 2, 4)),
        z=LinearMap(_leaf(rng, 4, 2)),
    )
    slots = _leaf(rng, 3, 4)
    cases.append(("nonlocal", (_scalarize(lambda: nonlocal_forward(block, slots), rng),
                               [block.theta.W, block.phi.W, block.g.W, block.z.W, slots])))

    head = OutputHead(LinearMap(_leaf(rng, 4, 4), _leaf(rng, 4)), LinearMap(_leaf(rng, 5, 4), _leaf(rng, 5)))
    h = _leaf(rng, 4)
    cases.append(("output_head", (_scalarize(lambda: output_head(head, h), rng),
                                  [head.hidden.W, head.hidden.b, head.out.W, head.out.b, h])))
    return cases


def micro_model(rng: np.random.Generator, ablation: str = "full", n_slots: int = 3,
                feature_dim: int = 8, vocab_size: int = 7) -> INetModel:
    """Small model with random non-zero biases, so no SELU input sits at its kink."""
    config = INetConfig(n_slots=n_slots, feature_dim=feature_dim, vocab_size=vocab_size,
                        max_len=6, ablation=ablation, alpha=0, beta=10)
    model = INetModel(config, rng=rng)
    for name, tensor in model.params.items():
        if name.rsplit(".", 1)[-1].startswith("b"):
            tensor.data[...] = rng.normal(0.0, 0.5, size=tensor.shape)
    return model


def micro_batch(rng: np.random.Generator, model: INetModel, stories: int = 2):
    n, d, v = model.config.n_slots, model.config.feature_dim, model.config.vocab_size
    batch = []
    for _ in range(stories):
        features = rng.normal(size=(n, d))
        rows = [[int(t) for t in rng.integers(EOS_ID + 1, v, size=int(rng.integers(1, 4)))] + [EOS_ID]
                for _ in range(n)]
        batch.append((features, rows))
    return batch


def _model_cases(rng: np.random.Generator) -> List[Tuple[str, Case]]:
    cases = []
    model = micro_model(rng)
    features = _leaf(rng, 3, 8)
    cases.append(("imagine", (_scalarize(lambda: imagine(model, features), rng),
                              [p for n, p in model.params.items() if n.startswith("imagine.")] + [features])))

    batch = micro_batch(rng, model)
    seed = int(rng.integers(2 ** 31))
    cases.append(("forward_loss", (lambda: forward_loss(model, batch, 0, np.random.default_rng(seed)),
                                   list(model.params.values()))))

    for ablation in ("no_nonlocal", "no_telling"):
        variant_model = micro_model(rng, ablation=ablation)
        variant_batch = micro_batch(rng, variant_model)
        cases.append((f"forward_loss_{ablation}", (
            lambda m=variant_model, b=variant_batch: forward_loss(m, b, 0, np.random.default_rng(seed)),
            list(variant_model.params.values()),
        )))
    return cases


# ============================================================================
# SUITE
# ============================================================================

def run_gradcheck_suite(
    points: int = 50,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    only: Optional[Sequence[str]] = None,
    instances: int = 1,
) -> List[GradCheckResult]:
    """
    Check each case at up to `points` sampled coordinates per tensor and
    report the worst relative error. With `instances` > 1 every case is
    rebuilt from fresh random draws that many times and the worst instance
    is reported.
    """
    if instances < 1:
        raise ValueError(f"instances must be >= 1, got {instances}")
    worst: Dict[str, float] = {}
    with precision("f64"):
        rng = np.random.default_rng(seed)
        for _ in range(instances):
            cases = [(name, case, OP_FLOOR) for name, case in _op_cases(rng) + _layer_cases(rng)]
            cases += [(name, case, MODEL_FLOOR) for name, case in _model_cases(rng)]
            for name, (fn, params), floor in cases:
                if only is not None and name not in only:
                    continue
                error = grad_check_params(fn, params, max_coords=points, rng=rng, floor=floor)
                worst[name] = max(worst.get(name, 0.0), error)
    return [GradCheckResult(name=name, max_error=error, passed=error < tolerance) for name, error in worst.items()]


def format_gradcheck_table(results: Sequence[GradCheckResult]) -> str:
    width = max([len(r.name) for r in results] + [4])
    lines = [f"{'case':<{width}}  {'max_rel_error':>13}  status"]
    for result in results:
        status = "pass" if result.passed else "FAIL"
        lines.append(f"{result.name:<{width}}  {result.max_error:>13.3e}  {status}")
    return "\n".join(lines)
