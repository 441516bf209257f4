"""Block-structured dense classifiers.

Each block is a stack of dense+relu layers; the activation after its last
layer is exposed so that teacher and student can be compared block by block.
A linear head maps the last block to class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from meal import autodiff as ad


@dataclass(frozen=True)
class BlockSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    dropout_p: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if not self.layer_widths:
            raise ValueError("a block needs at least one layer")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive: {self.layer_widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def width(self) -> int:
        return self.layer_widths[-1]


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    blocks: tuple[BlockSpec, ...]
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        if not self.blocks:
            raise ValueError("a network needs at least one block")

    @property
    def block_widths(self) -> list[int]:
        return [b.width for b in self.blocks]

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        """(name prefix, fan_in, fan_out) for every dense layer, head last."""
        shapes = []
        fan_in = self.input_dim
        for j, block in enumerate(self.blocks):
            for l, width in enumerate(block.layer_widths):
                shapes.append((f"block.{j}.layer.{l}", fan_in, width))
                fan_in = width
        shapes.append(("head", fan_in, self.num_classes))
        return shapes

    def with_seed(self, seed: int) -> "NetworkSpec":
        return NetworkSpec(self.input_dim, self.blocks, self.num_classes, int(seed))

    def with_dropout(self, p: float) -> "NetworkSpec":
        blocks = tuple(BlockSpec(b.layer_widths, b.activation, p) for b in self.blocks)
        return NetworkSpec(self.input_dim, blocks, self.num_classes, self.seed)


def simple_spec(input_dim: int, widths: Sequence[Sequence[int]], num_classes: int,
                seed: int = 0, dropout_p: float = 0.0) -> NetworkSpec:
    """Shorthand: ``widths`` is one list of layer widths per block."""
    blocks = tuple(BlockSpec(tuple(w), dropout_p=dropout_p) for w in widths)
    return NetworkSpec(input_dim, blocks, num_classes, seed)


@dataclass
class BlockNetwork:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    frozen: bool = False
    history: list[float] = field(default_factory=list)

    def freeze(self) -> "BlockNetwork":
        self.frozen = True
        return self

    def copy(self) -> "BlockNetwork":
        return BlockNetwork(self.spec, {k: v.copy() for k, v in self.params.items()},
                            self.frozen, list(self.history))

    def param_bytes(self) -> bytes:
        return b"".join(self.params[k].tobytes() for k in sorted(self.params))


@dataclass
class ForwardResult:
    block_outputs: list[ad.Node]
    logits: ad.Node
    probabilities: ad.Node
    param_nodes: dict[str, ad.Node]


def init_network(spec: NetworkSpec) -> BlockNetwork:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(spec.seed)
    params = {}
    for name, fan_in, fan_out in spec.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{name}.b"] = np.zeros(fan_out)
    return BlockNetwork(spec, params)


def check_params(spec: NetworkSpec, params: dict[str, np.ndarray]) -> None:
    for name, fan_in, fan_out in spec.layer_shapes():
        w, b = params.get(f"{name}.W"), params.get(f"{name}.b")
        if w is None or b is None:
            raise ValueError(f"missing parameters for layer {name}")
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ValueError(f"layer {name}: got W{w.shape} b{b.shape}, "
                             f"expected W{(fan_in, fan_out)} b{(fan_out,)}")


def spec_from_params(params: dict[str, np.ndarray], seed: int = 0) -> NetworkSpec:
    """Recover the architecture from parameter names and shapes (dropout is not stored)."""
    blocks: dict[int, dict[int, int]] = {}
    input_dim = None
    for name, arr in params.items():
        parts = name.split(".")
        if parts[0] == "block" and parts[-1] == "W":
            j, l = int(parts[1]), int(parts[3])
            blocks.setdefault(j, {})[l] = arr.shape[1]
            if j == 0 and l == 0:
                input_dim = arr.shape[0]
    if "head.W" not in params or not blocks or input_dim is None:
        raise ValueError("parameter map does not describe a block network")
    block_specs = tuple(BlockSpec(tuple(blocks[j][l] for l in sorted(blocks[j])))
                        for j in sorted(blocks))
    spec = NetworkSpec(input_dim, block_specs, params["head.W"].shape[1], seed)
    check_params(spec, params)
    return spec


def forward(net: BlockNetwork, batch, train_mode: bool = False,
            tape: Optional[ad.Tape] = None, rng: Optional[np.random.Generator] = None,
            requires_grad: Optional[bool] = None) -> ForwardResult:
    """Run the network on ``batch`` ([n x input_dim] array or node).

    Dropout is active only in train mode with ``dropout_p > 0`` and then needs
    ``rng``; kept activations are scaled by ``1/(1-p)``.
    """
    spec = net.spec
    tape = tape if tape is not None else ad.Tape()
    if requires_grad is None:
        requires_grad = not net.frozen
    x = batch if isinstance(batch, ad.Node) else tape.constant(np.asarray(batch, dtype=np.float64))
    if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ad.ShapeError(f"batch shape {x.shape} does not match input_dim {spec.input_dim}")

    param_nodes = {k: tape.leaf(v, requires_grad=requires_grad) for k, v in net.params.items()}

    def dense(h, prefix):
        return ad.add_bias(ad.matmul(h, param_nodes[f"{prefix}.W"]), param_nodes[f"{prefix}.b"])

    h = x
    block_outputs = []
    for j, block in enumerate(spec.blocks):
        for l in range(len(block.layer_widths)):
            h = ad.relu(dense(h, f"block.{j}.layer.{l}"))
            if train_mode and block.dropout_p > 0:
                if rng is None:
                    raise ValueError("dropout in train mode needs an rng")
                keep = rng.random(h.shape) >= block.dropout_p
                h = ad.mul(h, tape.constant(keep / (1.0 - block.dropout_p)))
        block_outputs.append(h)
    logits = dense(h, "head")
    return ForwardResult(block_outputs, logits, ad.softmax(logits), param_nodes)


def predict_proba(net: BlockNetwork, batch) -> np.ndarray:
    return forward(net, batch, requires_grad=False).probabilities.data


def predict_classes(net: BlockNetwork, batch) -> np.ndarray:
    # np.argmax takes the first maximum, so ties resolve to the lowest class index
    return np.argmax(predict_proba(net, batch), axis=1)


def error_rate(net: BlockNetwork, dataset) -> float:
    if len(dataset.labels) == 0:
        raise ValueError("error rate of an empty dataset")
    return float(np.mean(predict_classes(net, dataset.features) != dataset.labels))
