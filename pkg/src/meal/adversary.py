"""Per-block discriminators that tell teacher features from student features."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from meal import autodiff as ad


def default_hidden_dims(input_dim: int) -> tuple[int, int]:
    return max(input_dim // 2, 4), max(input_dim // 4, 2)


@dataclass
class Discriminator:
    """dense -> relu -> dense -> relu -> dense -> sigmoid."""

    input_dim: int
    hidden_dims: tuple[int, int]
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        h1, h2 = self.hidden_dims
        return [(self.input_dim, h1), (h1, h2), (h2, 1)]

    def param_bytes(self) -> bytes:
        return b"".join(self.params[k].tobytes() for k in sorted(self.params))


def init_discriminator(input_dim: int, rng: np.random.Generator,
                       hidden_dims: Optional[Sequence[int]] = None) -> Discriminator:
    hidden = tuple(hidden_dims) if hidden_dims is not None else default_hidden_dims(input_dim)
    if len(hidden) != 2 or min(hidden) < 1 or input_dim < 1:
        raise ValueError(f"bad discriminator dims {input_dim}, {hidden}")
    d = Discriminator(input_dim, hidden, {})
    for i, (fan_in, fan_out) in enumerate(d.layer_dims):
        bound = 1.0 / np.sqrt(fan_in)
        d.params[f"{i}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        d.params[f"{i}.b"] = np.zeros(fan_out)
    return d


def _logits(d: Discriminator, features: ad.Node, requires_grad: bool):
    if features.data.ndim != 2 or features.shape[1] != d.input_dim:
        raise ad.ShapeError(f"discriminator expects width {d.input_dim}, got {features.shape}")
    tape = features.tape
    nodes = {k: tape.leaf(v, requires_grad=requires_grad) for k, v in d.params.items()}
    h = features
    for i in range(3):
        h = ad.add_bias(ad.matmul(h, nodes[f"{i}.W"]), nodes[f"{i}.b"])
        if i < 2:
            h = ad.relu(h)
    return h, nodes


def d_forward(d: Discriminator, features: ad.Node, requires_grad: bool = False) -> ad.Node:
    """Probability that each row came from the teacher, shape [n x 1]."""
    return ad.sigmoid(_logits(d, features, requires_grad)[0])


def discriminator_objective(d: Discriminator, teacher_feats: ad.Node, student_feats: ad.Node,
                            requires_grad: bool = False) -> tuple[ad.Node, dict[str, ad.Node]]:
    """mean log D(teacher) + mean log(1 - D(student)); the discriminator maximizes it.

    Teacher and student rows are scored independently, which is the same as
    stacking them along the batch axis with labels 1 and 0.
    Returns the objective and the parameter leaves it was built from.
    """
    if teacher_feats.shape[1:] != student_feats.shape[1:]:
        raise ad.ShapeError(f"feature widths differ: {teacher_feats.shape} vs {student_feats.shape}")
    both = ad.concat([teacher_feats, student_feats], axis=0)
    logits, nodes = _logits(d, both, requires_grad)
    p = ad.sigmoid(logits)
    n_t = teacher_feats.shape[0]
    rows = p.shape[0]
    if n_t == 0 or rows == n_t:
        raise ValueError("discriminator objective needs teacher and student rows")
    # row-selecting averages: [1 x rows] @ [rows x 1]
    sel_t = np.zeros((1, rows))
    sel_t[0, :n_t] = 1.0 / n_t
    sel_s = np.zeros((1, rows))
    sel_s[0, n_t:] = 1.0 / (rows - n_t)
    tape = p.tape
    log_real = ad.log(p, floor=ad.LOG_FLOOR)
    log_fake = ad.log(ad.rsub(1.0, p), floor=ad.LOG_FLOOR)
    obj = ad.add(ad.matmul(tape.constant(sel_t), log_real),
                 ad.matmul(tape.constant(sel_s), log_fake))
    return ad.reduce("sum", obj), nodes


def generator_adv_loss(stack: Sequence[Discriminator], student_feats: Sequence[ad.Node],
                       block_weights: Sequence[float], non_saturating: bool = False):
    """Weighted sum over blocks of mean log(1 - D_j(student_j)).

    Discriminator parameters enter as constants. Returns the total and the
    unweighted per-block terms. With ``non_saturating`` each term is
    ``-mean log D_j(student_j)`` instead.
    """
    if not (len(stack) == len(student_feats) == len(block_weights)):
        raise ValueError(f"{len(stack)} discriminators, {len(student_feats)} feature sets, "
                         f"{len(block_weights)} weights")
    terms = []
    for d, feats in zip(stack, student_feats):
        p = d_forward(d, feats, requires_grad=False)
        if non_saturating:
            terms.append(ad.negate(ad.mean(ad.log(p, floor=ad.LOG_FLOOR))))
        else:
            terms.append(ad.mean(ad.log(ad.rsub(1.0, p), floor=ad.LOG_FLOOR)))
    total = None
    for term, w in zip(terms, block_weights):
        t = ad.scale(term, w)
        total = t if total is None else ad.add(total, t)
    return total, terms


def d_train_step(d: Discriminator, teacher_feats, student_feats, lr: float,
                 momentum: float = 0.0) -> float:
    """One gradient-ascent step on the discriminator objective, in place.

    Features are taken as plain arrays, so nothing flows back into whatever
    produced them. Returns the objective before the step.
    """
    tape = ad.Tape()
    t = tape.constant(np.asarray(teacher_feats.data if isinstance(teacher_feats, ad.Node)
                                 else teacher_feats, dtype=np.float64))
    s = tape.constant(np.asarray(student_feats.data if isinstance(student_feats, ad.Node)
                                 else student_feats, dtype=np.float64))
    obj, nodes = discriminator_objective(d, t, s, requires_grad=True)
    if lr == 0:
        return obj.item()
    grads = tape.backward(obj)
    for k, node in nodes.items():
        g = grads.get(node.id)
        if g is None:
            continue
        v = d.velocity.get(k)
        v = g if v is None else momentum * v + g
        d.velocity[k] = v
        # ascent: the discriminator maximizes its objective
        d.params[k] = d.params[k] + lr * v
    return obj.item()


def d_accuracy(d: Discriminator, teacher_feats, student_feats) -> float:
    """Fraction classified correctly at threshold 0.5 (teacher = 1, student = 0)."""
    tape = ad.Tape()
    pt = d_forward(d, tape.constant(teacher_feats)).data.reshape(-1)
    ps = d_forward(d, tape.constant(student_feats)).data.reshape(-1)
    correct = np.sum(pt > 0.5) + np.sum(ps <= 0.5)
    return float(correct) / (len(pt) + len(ps))
