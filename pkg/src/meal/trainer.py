"""Teacher pretraining, the MEAL distillation loop, and baseline procedures."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from meal import autodiff as ad
from meal import rng as rngs
from meal.adversary import (Discriminator, d_train_step, generator_adv_loss,
                            init_discriminator)
from meal.data import Dataset
from meal.distillation import METRICS, AlignmentConfig, aligned_pair, sim_distance
from meal.metrics import MetricsRecord, MetricsSink
from meal.network import (BlockNetwork, NetworkSpec, error_rate, forward, init_network,
                          predict_proba)

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimizerState, lr: Optional[float] = None):
    """v <- momentum * v + g;  p <- p - lr * v.  Parameters without a gradient are left alone."""
    lr = state.lr if lr is None else lr
    new_params = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        v = state.velocity.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, state


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _param_grads(result, grads) -> dict[str, np.ndarray]:
    return {k: grads[node.id] for k, node in result.param_nodes.items() if node.id in grads}


def cross_entropy(probabilities: ad.Node, labels: np.ndarray) -> ad.Node:
    onehot = np.zeros(probabilities.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    t = probabilities.tape.constant(onehot)
    return sim_distance("ce", t, probabilities)


def pretrain_teacher(spec: NetworkSpec, dataset: Dataset, epochs: int, lr: float = 0.05,
                     momentum: float = 0.9, batch_size: int = 32, seed: Optional[int] = None,
                     schedule: str = "cosine") -> BlockNetwork:
    """Fit ``spec`` to one-hot labels with mini-batch SGD and return it frozen.

    ``net.history`` holds the mean training loss of each epoch.
    """
    if len(dataset) and dataset.labels.max() >= spec.num_classes:
        raise ValueError(f"dataset has labels beyond {spec.num_classes} classes")
    seed = spec.seed if seed is None else seed
    shuffle_rng = rngs.stream(seed, "shuffle")
    drop_rng = rngs.stream(seed, "dropout")
    net = init_network(spec)
    state = OptimizerState(lr, momentum)
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total = epochs * steps_per_epoch
    step = 0
    for _ in range(epochs):
        losses = []
        for idx in minibatches(len(dataset), batch_size, shuffle_rng):
            tape = ad.Tape()
            res = forward(net, dataset.features[idx], train_mode=True, tape=tape, rng=drop_rng)
            loss = cross_entropy(res.probabilities, dataset.labels[idx])
            grads = tape.backward(loss)
            step_lr = cosine_lr(lr, step, total) if schedule == "cosine" else lr
            net.params, state = sgd_step(net.params, _param_grads(res, grads), state, step_lr)
            losses.append(loss.item() * len(idx))
            step += 1
        net.history.append(sum(losses) / len(dataset))
        log.debug("epoch %d: loss %.5f", len(net.history), net.history[-1])
    return net.freeze()


def train_single_model(spec: NetworkSpec, dataset: Dataset, epochs: int, **kwargs) -> BlockNetwork:
    """Plain one-hot training; the same as pretraining a teacher."""
    return pretrain_teacher(spec, dataset, epochs, **kwargs)


@dataclass
class TeacherZoo:
    teachers: list[BlockNetwork]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            self.names = [f"teacher{i}" for i in range(len(self.teachers))]
        if len(self.names) != len(self.teachers):
            raise ValueError("one name per teacher")

    def __len__(self):
        return len(self.teachers)

    def validate(self, student_spec: NetworkSpec) -> None:
        if not self.teachers:
            raise ValueError("empty teacher zoo")
        for name, t in zip(self.names, self.teachers):
            if not t.frozen:
                raise ValueError(f"{name} is not frozen")
            if len(t.spec.blocks) != len(student_spec.blocks):
                raise ValueError(f"{name} has {len(t.spec.blocks)} blocks, "
                                 f"student has {len(student_spec.blocks)}")
            if t.spec.num_classes != student_spec.num_classes:
                raise ValueError(f"{name} predicts {t.spec.num_classes} classes, "
                                 f"student {student_spec.num_classes}")


def build_zoo(specs: Sequence[NetworkSpec], dataset: Dataset, epochs: int,
              **kwargs) -> TeacherZoo:
    teachers = [pretrain_teacher(s, dataset, epochs, **kwargs) for s in specs]
    return TeacherZoo(teachers)


def select_teacher(zoo: TeacherZoo, rng: np.random.Generator) -> int:
    if len(zoo) == 0:
        raise ValueError("cannot select from an empty zoo")
    return int(rng.integers(len(zoo)))


@dataclass(frozen=True)
class MealConfig:
    alpha: float = 1.0
    beta: float = 1.0
    metric: str = "ce"
    pool_mode: str = "avg"
    block_weights: Optional[tuple[float, ...]] = None
    iterations: int = 1000
    batch_size: int = 64
    student_lr: float = 0.05
    disc_lr: float = 0.01
    momentum: float = 0.9
    d_steps_per_g_step: int = 1
    seed: int = 0
    use_adversary: bool = True
    use_intermediate: bool = True
    weights_on_gan: bool = True
    non_saturating: bool = False
    lr_schedule: str = "cosine"
    selection: str = "best"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.d_steps_per_g_step < 0:
            raise ValueError("iterations, batch_size and d_steps_per_g_step out of range")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.selection not in ("best", "final"):
            raise ValueError(f"unknown selection mode {self.selection!r}")

    def alignment(self, num_blocks: int) -> AlignmentConfig:
        return AlignmentConfig.for_blocks(num_blocks, self.use_intermediate, self.pool_mode,
                                          self.block_weights)


def init_stack(student_spec: NetworkSpec, alignment: AlignmentConfig,
               rng: np.random.Generator) -> list[Discriminator]:
    """One discriminator per aligned block, sized to the student's pooled width."""
    last = len(student_spec.blocks) - 1
    dims = [student_spec.num_classes if j == last else student_spec.blocks[j].width
            for j in alignment.block_set]
    return [init_discriminator(d, rng) for d in dims]


def meal_iteration(student: BlockNetwork, zoo: TeacherZoo, stack: list[Discriminator],
                   batch_x: np.ndarray, batch_y: Optional[np.ndarray], cfg: MealConfig,
                   opt: OptimizerState, select_rng: np.random.Generator,
                   dropout_rng: np.random.Generator, iteration: int = 0,
                   lr: Optional[float] = None):
    """One teacher draw, discriminator updates, and one student SGD step.

    Updates ``student.params`` and the discriminators in place and returns
    ``(student, stack, record)``.
    """
    k = len(student.spec.blocks)
    alignment = cfg.alignment(k)
    t_idx = select_teacher(zoo, select_rng)
    teacher = zoo.teachers[t_idx]

    tape = ad.Tape()
    t_res = forward(teacher, batch_x, train_mode=False, tape=tape, requires_grad=False)
    s_res = forward(student, batch_x, train_mode=True, tape=tape, rng=dropout_rng)

    pairs = [aligned_pair(t_res, s_res, j, alignment.pool_mode) for j in alignment.block_set]
    sim_terms = []
    for j, (t, s) in zip(alignment.block_set, pairs):
        if j != k - 1 and cfg.metric in ("kl", "ce"):
            t, s = ad.softmax(t), ad.softmax(s)
        sim_terms.append(sim_distance(cfg.metric, t, s))
    sim_w = list(alignment.block_weights)

    adversarial = cfg.use_adversary and stack
    gan_w = sim_w if cfg.weights_on_gan else [1.0] * len(sim_w)
    gan_terms = []
    if adversarial:
        for _ in range(cfg.d_steps_per_g_step):
            for d, (t, s) in zip(stack, pairs):
                d_train_step(d, t.data, s.data, cfg.disc_lr, cfg.momentum)
        _, gan_terms = generator_adv_loss(stack, [s for _, s in pairs], gan_w,
                                          cfg.non_saturating)

    sim_total = None
    for term, w in zip(sim_terms, sim_w):
        x = ad.scale(term, w)
        sim_total = x if sim_total is None else ad.add(sim_total, x)
    total = ad.scale(sim_total, cfg.alpha)
    if gan_terms:
        gan_total = None
        for term, w in zip(gan_terms, gan_w):
            x = ad.scale(term, w)
            gan_total = x if gan_total is None else ad.add(gan_total, x)
        total = ad.add(total, ad.scale(gan_total, cfg.beta))

    grads = tape.backward(total)
    student.params, opt = sgd_step(student.params, _param_grads(s_res, grads), opt, lr)

    sim_vals = [0.0] * k
    gan_vals = [0.0] * k
    sim_w_full = [0.0] * k
    gan_w_full = [0.0] * k
    for pos, j in enumerate(alignment.block_set):
        sim_vals[j] = sim_terms[pos].item()
        sim_w_full[j] = sim_w[pos]
        if gan_terms:
            gan_vals[j] = gan_terms[pos].item()
            gan_w_full[j] = gan_w[pos]
    train_err = math.nan
    if batch_y is not None:
        train_err = float(np.mean(np.argmax(s_res.probabilities.data, axis=1) != batch_y))
    record = MetricsRecord(iteration, t_idx, total.item(), sim_vals, gan_vals, train_err,
                           sim_weights=sim_w_full, gan_weights=gan_w_full)
    return student, stack, record


@dataclass
class MealResult:
    student: BlockNetwork
    stack: list[Discriminator]
    records: list[MetricsRecord]
    best_test_error: float = math.nan
    best_iteration: int = -1

    def checkpoint_params(self) -> dict[str, np.ndarray]:
        params = dict(self.student.params)
        for j, d in enumerate(self.stack):
            for name, arr in d.params.items():
                layer, kind = name.split(".")
                params[f"disc.{j}.{layer}.{kind}"] = arr
        return params


def meal_train(student_spec: NetworkSpec, zoo: TeacherZoo, train: Dataset,
               test: Optional[Dataset], cfg: MealConfig,
               sink: Optional[MetricsSink] = None) -> MealResult:
    """Distil the zoo into a fresh student for ``cfg.iterations`` mini-batch steps.

    Test error is measured at every epoch boundary (and after the last
    iteration). With ``cfg.selection == "best"`` the returned student is the
    snapshot with the lowest test error, later snapshots winning ties.
    """
    zoo.validate(student_spec)
    student = init_network(student_spec)
    k = len(student_spec.blocks)
    alignment = cfg.alignment(k)
    stack = init_stack(student_spec, alignment, rngs.stream(cfg.seed, "disc-init"))
    opt = OptimizerState(cfg.student_lr, cfg.momentum)
    select_rng = rngs.stream(cfg.seed, "selection")
    dropout_rng = rngs.stream(cfg.seed, "dropout")
    shuffle_rng = rngs.stream(cfg.seed, "shuffle")

    records: list[MetricsRecord] = []
    best = (math.inf, -1, student.copy())
    it = written = 0
    while it < cfg.iterations:
        for idx in minibatches(len(train), cfg.batch_size, shuffle_rng):
            if it >= cfg.iterations:
                break
            lr = cosine_lr(cfg.student_lr, it, cfg.iterations) \
                if cfg.lr_schedule == "cosine" else cfg.student_lr
            student, stack, rec = meal_iteration(
                student, zoo, stack, train.features[idx], train.labels[idx], cfg, opt,
                select_rng, dropout_rng, it, lr)
            records.append(rec)
            it += 1
        if test is not None and records:
            err = error_rate(student, test)
            records[-1].test_error = err
            log.info("iteration %d: test error %.4f", it, err)
            if err <= best[0]:
                best = (err, it - 1, student.copy())
        if sink is not None:
            for rec in records[written:]:
                sink.write(rec)
            sink.flush()
            written = len(records)
    if cfg.selection == "best" and best[1] >= 0:
        student = best[2]
    return MealResult(student, stack, records, best[0], best[1])


def traditional_ensemble_proba(zoo: TeacherZoo, features: np.ndarray) -> np.ndarray:
    if len(zoo) == 0:
        raise ValueError("empty teacher zoo")
    return np.mean([predict_proba(t, features) for t in zoo.teachers], axis=0)


def traditional_ensemble_error(zoo: TeacherZoo, dataset: Dataset) -> float:
    """Average teacher probability rows, take the argmax, count mistakes."""
    pred = np.argmax(traditional_ensemble_proba(zoo, dataset.features), axis=1)
    return float(np.mean(pred != dataset.labels))


# (label, metric, use_intermediate, use_adversary), in the order of the ablation table
ABLATION_ROWS = (
    ("l1", "l1", False, False),
    ("l2", "l2", False, False),
    ("ce", "ce", False, False),
    ("ce+intermediate", "ce", True, False),
    ("l2+intermediate", "l2", True, False),
    ("ce+intermediate+adversarial", "ce", True, True),
    ("l1+intermediate+adversarial", "l1", True, True),
)
BASE_ROW = "base model"


@dataclass
class AblationRow:
    name: str
    errors: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors))


@dataclass
class AblationTable:
    rows: list[AblationRow]
    seeds: list[int]

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def format(self) -> str:
        width = max(len(r.name) for r in self.rows)
        lines = [f"{'method':<{width}}  test error % (mean +- std over {len(self.seeds)} seeds)"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {100 * r.mean:6.2f} +- {100 * r.std:5.2f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        head = "method,mean,std," + ",".join(f"seed_{s}" for s in self.seeds)
        body = [",".join([r.name, repr(r.mean), repr(r.std)] + [repr(e) for e in r.errors])
                for r in self.rows]
        return "\n".join([head] + body) + "\n"


def base_epochs(cfg: MealConfig, n_train: int) -> int:
    """Epoch count giving one-hot training the same step budget as distillation."""
    return math.ceil(cfg.iterations / math.ceil(n_train / cfg.batch_size))


def _ablation_job(job):
    name, train, test, student_spec, zoo, cfg = job
    if name == BASE_ROW:
        net = train_single_model(student_spec, train, base_epochs(cfg, len(train)),
                                 lr=cfg.student_lr, momentum=cfg.momentum,
                                 batch_size=cfg.batch_size, seed=cfg.seed)
        return error_rate(net, test)
    return error_rate(meal_train(student_spec, zoo, train, test, cfg).student, test)


def run_ablation(train: Dataset, test: Dataset, base_spec: NetworkSpec, zoo: TeacherZoo,
                 seeds: Sequence[int], cfg: MealConfig = MealConfig(),
                 workers: int = 1) -> AblationTable:
    """Base model plus the seven distillation variants, each over every seed."""
    if not seeds:
        raise ValueError("need at least one seed")
    jobs = []
    for seed in seeds:
        spec = base_spec.with_seed(rngs.sub_seed(seed, "init/student"))
        jobs.append((BASE_ROW, train, test, spec, zoo, replace(cfg, seed=seed)))
        for label, metric, inter, adv in ABLATION_ROWS:
            row_cfg = replace(cfg, seed=seed, metric=metric, use_intermediate=inter,
                              use_adversary=adv)
            jobs.append((label, train, test, spec, zoo, row_cfg))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            errors = list(pool.map(_ablation_job, jobs))
    else:
        errors = [_ablation_job(j) for j in jobs]
    by_name: dict[str, list[float]] = {}
    for job, err in zip(jobs, errors):
        by_name.setdefault(job[0], []).append(err)
    names = [BASE_ROW] + [r[0] for r in ABLATION_ROWS]
    return AblationTable([AblationRow(n, by_name[n]) for n in names], list(seeds))


@dataclass
class Comparison:
    teacher_errors: list[float]
    ensemble_error: float
    meal_error: float
    single_error: Optional[float] = None
    dropout_error: Optional[float] = None

    @property
    def best_teacher_error(self) -> float:
        return min(self.teacher_errors)


def compare_methods(train: Dataset, test: Dataset, zoo: TeacherZoo, student_spec: NetworkSpec,
                    cfg: MealConfig, baselines: bool = True, dropout_p: float = 0.2) -> Comparison:
    """Teachers, their traditional ensemble, a MEAL student, and optionally the
    single-model and dropout baselines trained for the same step budget."""
    meal = meal_train(student_spec, zoo, train, test, cfg)
    cmp = Comparison([error_rate(t, test) for t in zoo.teachers],
                     traditional_ensemble_error(zoo, test), error_rate(meal.student, test))
    if baselines:
        epochs = base_epochs(cfg, len(train))
        kw = dict(lr=cfg.student_lr, momentum=cfg.momentum, batch_size=cfg.batch_size,
                  seed=cfg.seed)
        cmp.single_error = error_rate(train_single_model(student_spec, train, epochs, **kw), test)
        cmp.dropout_error = error_rate(
            train_single_model(student_spec.with_dropout(dropout_p), train, epochs, **kw), test)
    return cmp
