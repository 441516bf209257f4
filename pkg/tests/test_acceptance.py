"""End-to-end acceptance checks.

Each test prints a single ``PASS``/``FAIL`` line for its criterion, then
asserts. Criteria 5 and 6 share one expensive fixture (teacher zoos and the
ablation table per seed).
"""

import math
import time

import numpy as np
import pytest

from meal import autodiff as ad
from meal.adversary import d_accuracy, d_train_step, generator_adv_loss, init_discriminator
from meal.checkpoint import load_checkpoint, save_checkpoint
from meal.config import ExperimentConfig
from meal.data import SyntheticSpec, gen_synthetic, load_dataset, save_dataset
from meal.distillation import AlignmentConfig, sim_distance, total_sim_loss
from meal.network import BlockNetwork, error_rate, forward, init_network, predict_classes, simple_spec
from meal.trainer import (ABLATION_ROWS, BASE_ROW, AblationRow, AblationTable, MealConfig,
                          TeacherZoo, build_zoo, meal_train, pretrain_teacher, run_ablation,
                          select_teacher, traditional_ensemble_error)


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, detail
    return emit


# ---------------------------------------------------------------- criterion 1

def nudge(x):
    return ad.nudge_from_kinks(x, margin=1e-2)


_w_rng = np.random.default_rng(1234)
WEIGHTS = {s: _w_rng.normal(size=s) for s in [(3, 4), (3, 2), (6, 4), (3, 3), (1,), (4,), (3,)]}
OTHER = np.random.default_rng(99).normal(size=(3, 4))
RIGHT = np.random.default_rng(98).normal(size=(4, 2))


def _op_cases():
    c = lambda tape, v: tape.constant(OTHER)
    weighted = lambda tape, node: ad.sum_(ad.mul(node, tape.constant(WEIGHTS[node.shape])))
    pos = lambda rng: rng.uniform(0.2, 3.0, size=(3, 4))
    normal = lambda rng: rng.normal(size=(3, 4))
    kinky = lambda rng: nudge(rng.normal(size=(3, 4)))
    return {
        "add": (normal, lambda t, v: weighted(t, ad.add(v, c(t, v)))),
        "sub": (normal, lambda t, v: weighted(t, ad.sub(c(t, v), v))),
        "mul": (normal, lambda t, v: weighted(t, ad.mul(v, c(t, v)))),
        "negate": (normal, lambda t, v: weighted(t, ad.negate(v))),
        "abs": (kinky, lambda t, v: weighted(t, ad.abs_(v))),
        "square": (normal, lambda t, v: weighted(t, ad.square(v))),
        "log": (pos, lambda t, v: weighted(t, ad.log(v))),
        "relu": (kinky, lambda t, v: weighted(t, ad.relu(v))),
        "sigmoid": (normal, lambda t, v: weighted(t, ad.sigmoid(v))),
        "scale": (normal, lambda t, v: weighted(t, ad.scale(v, -2.5))),
        "rsub": (normal, lambda t, v: weighted(t, ad.rsub(1.0, v))),
        "matmul": (normal, lambda t, v: weighted(t, ad.matmul(v, t.constant(RIGHT)))),
        "add_bias": (lambda rng: rng.normal(size=4),
                     lambda t, v: weighted(t, ad.add_bias(t.constant(OTHER), v))),
        "softmax": (normal, lambda t, v: weighted(t, ad.softmax(v))),
        "sum": (normal, lambda t, v: weighted(t, ad.reduce("sum", v, axis=0))),
        "mean": (normal, lambda t, v: weighted(t, ad.reduce("mean", v, axis=1))),
        "concat": (normal, lambda t, v: weighted(t, ad.concat([v, t.constant(OTHER)], axis=0))),
        "pool_avg": (normal, lambda t, v: weighted(t, ad.adaptive_pool(v, 3, "avg"))),
        "pool_max": (kinky, lambda t, v: weighted(t, ad.adaptive_pool(v, 3, "max"))),
    }


def _composite_value_and_grads(student_params, spec, teacher, d, x):
    tape = ad.Tape()
    t_res = forward(teacher, x, tape=tape, requires_grad=False)
    s_res = forward(BlockNetwork(spec, student_params), x, tape=tape, requires_grad=True)
    sim = total_sim_loss("ce", t_res, s_res, AlignmentConfig.for_blocks(3))
    gan, _ = generator_adv_loss([d], [s_res.probabilities], [1.0])
    total = ad.add(ad.scale(sim, 1.0), ad.scale(gan, 0.5))
    grads = tape.backward(total)
    return total.item(), {n: grads[node.id] for n, node in s_res.param_nodes.items()}


def test_criterion_1_gradient_correctness(report):
    start = time.time()
    rng = np.random.default_rng(0)
    worst = {}
    for name, (make, build) in _op_cases().items():
        worst[name] = max(ad.grad_check(build, make(rng)) for _ in range(10))

    spec = simple_spec(2, [[5], [4], [3]], 3, seed=11)
    teacher = init_network(simple_spec(2, [[6], [5], [4]], 3, seed=12)).freeze()
    comp = []
    for point in range(10):
        prng = np.random.default_rng(100 + point)
        x = prng.normal(size=(4, 2))
        d = init_discriminator(3, prng)
        params = {k: v + 0.3 * prng.normal(size=v.shape) for k, v in init_network(spec).params.items()}
        _, analytic = _composite_value_and_grads(params, spec, teacher, d, x)
        err = 0.0
        for name, p in params.items():
            for idx in np.ndindex(p.shape):
                hi, lo = dict(params), dict(params)
                hi[name] = p.copy()
                lo[name] = p.copy()
                hi[name][idx] += 1e-5
                lo[name][idx] -= 1e-5
                num = (_composite_value_and_grads(hi, spec, teacher, d, x)[0]
                       - _composite_value_and_grads(lo, spec, teacher, d, x)[0]) / 2e-5
                a = analytic[name][idx]
                err = max(err, abs(a - num) / max(1e-8, abs(a) + abs(num)))
        comp.append(err)
    worst["composite"] = max(comp)
    elapsed = time.time() - start
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    ok = not bad and elapsed < 30
    report(1, "gradient correctness", ok,
           f"{len(worst)} checks, max rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
           + (f", failing {bad}" if bad else ""))


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_loss_oracles(report):
    tape = ad.Tape()
    t = tape.constant([[1.0, 0.0]])
    s = tape.constant([[0.5, 0.5]])
    expected = {"l1": 1.0, "l2": 0.5, "kl": math.log(2), "ce": math.log(2)}
    errs = [abs(sim_distance(m, t, s).item() - v) for m, v in expected.items()]
    u = tape.constant(np.full((2, 4), 0.25))
    errs.append(abs(sim_distance("ce", u, u).item() - math.log(4)))
    errs.append(abs(sim_distance("kl", u, u).item()))

    rng = np.random.default_rng(2)
    ident = 0.0
    for _ in range(100):
        p = rng.dirichlet(np.ones(5), size=3)
        q = rng.dirichlet(np.ones(5), size=3)
        h = float(-(p * np.log(p)).sum(axis=1).mean())
        ce = sim_distance("ce", tape.constant(p), tape.constant(q)).item()
        kl = sim_distance("kl", tape.constant(p), tape.constant(q)).item()
        ident = max(ident, abs(ce - kl - h))
    ok = max(errs) < 1e-9 and ident < 1e-9
    report(2, "loss oracles", ok, f"max oracle err {max(errs):.1e}, max |ce-kl-H| {ident:.1e}")


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_adversarial_equilibrium(report):
    start = time.time()
    rng = np.random.default_rng(3)
    gen = lambda n: rng.normal(size=(n, 8))
    d = init_discriminator(8, np.random.default_rng(30))
    t, s = gen(512), gen(512)
    for _ in range(500):
        obj = d_train_step(d, t, s, lr=0.01, momentum=0.9)
    held = d_accuracy(d, gen(512), gen(512))

    sep = init_discriminator(1, np.random.default_rng(31))
    ft = rng.uniform(0.5, 1.5, size=(256, 1))
    fs = -rng.uniform(0.5, 1.5, size=(256, 1))
    for _ in range(200):
        d_train_step(sep, ft, fs, lr=0.01, momentum=0.9)
    sep_acc = d_accuracy(sep, ft, fs)
    elapsed = time.time() - start
    ok = (abs(obj + 2 * math.log(2)) <= 0.05 and abs(held - 0.5) <= 0.05
          and sep_acc >= 0.99 and elapsed < 30)
    report(3, "adversarial equilibrium", ok,
           f"objective {obj:.4f} vs {-2 * math.log(2):.4f}, held-out acc {held:.3f}, "
           f"separable acc {sep_acc:.3f}, {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_distillation_fidelity(report):
    start = time.time()
    train, _ = gen_synthetic(SyntheticSpec("blobs", 125, 3, 1.0, seed=4))
    assert len(train) == 300
    spec = simple_spec(2, [[16], [16], [16]], 3, seed=40)
    teacher = pretrain_teacher(spec, train, epochs=30, seed=41)
    zoo = TeacherZoo([teacher])
    epochs = 200
    cfg = MealConfig(metric="ce", use_adversary=False, batch_size=64, seed=42,
                     iterations=epochs * math.ceil(len(train) / 64), selection="final")
    student = meal_train(spec.with_seed(43), zoo, train, None, cfg).student
    agree = float(np.mean(predict_classes(student, train.features)
                          == predict_classes(teacher, train.features)))
    elapsed = time.time() - start
    report(4, "distillation fidelity", agree >= 0.95 and elapsed < 60,
           f"agreement {agree:.3f} after {epochs} epochs, {elapsed:.1f}s")


# ---------------------------------------------------------- criteria 5 and 6

SEEDS = range(5)


@pytest.fixture(scope="module")
def seed_runs():
    start = time.time()
    runs = []
    for seed in SEEDS:
        cfg = ExperimentConfig(seed=seed)
        train, test = gen_synthetic(cfg.synthetic_spec())
        tt = cfg.teacher_training
        zoo = build_zoo(cfg.teacher_specs(), train, tt.epochs, lr=tt.lr, momentum=tt.momentum,
                        batch_size=tt.batch_size)
        table = run_ablation(train, test, cfg.student_spec(), zoo, [seed], cfg.meal_config())
        runs.append(dict(
            teachers=[error_rate(t, test) for t in zoo.teachers],
            ensemble=traditional_ensemble_error(zoo, test),
            table=table,
        ))
    return runs, time.time() - start


def test_criterion_5_meal_trend(report, seed_runs, capsys):
    runs, elapsed = seed_runs
    best_teacher = float(np.mean([min(r["teachers"]) for r in runs]))
    ensemble = float(np.mean([r["ensemble"] for r in runs]))
    meal = float(np.mean([r["table"].row("ce+intermediate+adversarial").errors[0] for r in runs]))
    with capsys.disabled():
        print("\n  seed  best-teacher  ensemble  meal")
        for seed, r in zip(SEEDS, runs):
            print(f"  {seed:4d}  {min(r['teachers']):12.4f}  {r['ensemble']:8.4f}  "
                  f"{r['table'].row('ce+intermediate+adversarial').errors[0]:.4f}")
    ok = meal <= best_teacher + 0.005 and elapsed < 600
    report(5, "MEAL trend", ok,
           f"mean MEAL {100 * meal:.2f}% vs best teacher {100 * best_teacher:.2f}% "
           f"(+0.5pp allowed); ensemble {100 * ensemble:.2f}%; {elapsed:.0f}s")


def test_criterion_6_ablation_ordering(report, seed_runs, capsys):
    runs, _ = seed_runs
    names = [BASE_ROW] + [r[0] for r in ABLATION_ROWS]
    rows = [AblationRow(n, [r["table"].row(n).errors[0] for r in runs]) for n in names]
    table = AblationTable(rows, list(SEEDS))
    with capsys.disabled():
        print("\n" + table.format())
    full = table.row("ce+intermediate+adversarial").mean
    ce = table.row("ce").mean
    complete = len(table.rows) == 8 and all(
        len(r.errors) == len(SEEDS) and np.isfinite(r.std) for r in table.rows)
    report(6, "ablation ordering", complete and full <= ce + 0.002,
           f"full {100 * full:.2f}% vs ce-only {100 * ce:.2f}% (+0.2pp allowed)")


# ---------------------------------------------------------------- criterion 7

def test_criterion_7_mechanical_invariants(report, tmp_path):
    train, test = gen_synthetic(SyntheticSpec("spirals", 40, 3, 0.1, seed=7))
    zoo = build_zoo([simple_spec(2, [[8], [8], [8]], 3, seed=70),
                     simple_spec(2, [[12], [6], [10]], 3, seed=71)], train, epochs=3)
    before = [t.param_bytes() for t in zoo.teachers]
    spec = simple_spec(2, [[8], [8], [8]], 3, seed=72)
    cfg = MealConfig(iterations=60, batch_size=16, seed=7, alpha=0.7, beta=1.3)
    a = meal_train(spec, zoo, train, test, cfg)
    b = meal_train(spec, zoo, train, test, cfg)
    immutable = [t.param_bytes() for t in zoo.teachers] == before

    save_checkpoint(tmp_path / "a.ckpt", a.checkpoint_params())
    save_checkpoint(tmp_path / "b.ckpt", b.checkpoint_params())
    deterministic = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    loaded = load_checkpoint(tmp_path / "a.ckpt")
    original = a.checkpoint_params()
    ckpt_exact = loaded.keys() == original.keys() and all(
        loaded[k].dtype == original[k].dtype and loaded[k].tobytes() == original[k].tobytes()
        for k in original)
    save_dataset(tmp_path / "train.csv", train)
    again = load_dataset(tmp_path / "train.csv")
    data_exact = (again.features.tobytes() == train.features.tobytes()
                  and np.array_equal(again.labels, train.labels))
    save_dataset(tmp_path / "train2.csv", again)
    data_exact &= (tmp_path / "train.csv").read_bytes() == (tmp_path / "train2.csv").read_bytes()

    decomposition = max(abs(r.total_loss - r.recomputed_total(cfg.alpha, cfg.beta)) for r in a.records)
    ok = immutable and deterministic and ckpt_exact and data_exact and decomposition < 1e-9
    report(7, "mechanical invariants", ok,
           f"teachers unchanged={immutable}, deterministic={deterministic}, "
           f"checkpoint exact={ckpt_exact}, dataset exact={data_exact}, "
           f"max decomposition gap {decomposition:.1e} over {len(a.records)} records")


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_selection_frequency(report):
    net = init_network(simple_spec(2, [[4]], 3))
    zoo = TeacherZoo([net.copy().freeze() for _ in range(4)])
    rng = np.random.default_rng(8)
    draws = np.array([select_teacher(zoo, rng) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=4) / draws.size
    report(8, "teacher selection frequency", bool(np.all((freq >= 0.24) & (freq <= 0.26))),
           "frequencies " + ", ".join(f"{f:.4f}" for f in freq))
