"""Acceptance criteria, each checked at its stated tolerance.

Criteria 1-5 use synthetic data and run in seconds. Criteria 6-10 train on
the MNIST IDX files under ``data/mnist`` and take tens of minutes in total;
every run is done once per session and its report is written under
``acceptance_runs/`` for inspection. Each test prints one PASS/FAIL line,
repeated in the terminal summary.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from nmil import gradcore as gc
from nmil import runs
from nmil.bagdata import DatasetSpec, generate, synth_pool
from nmil.gradcore import Graph, Tensor
from nmil.model import (
    BagLayout,
    GatedAttentionParams,
    MiBlockConfig,
    ModelDims,
    attention_scores,
    bag_embedding,
    forward,
    forward_tensor,
    init_params,
    mi_block,
)

from acceptance_log import record
from gradcheck import numeric_grad, rel_error
from oracles import brute_exp1, brute_exp2, brute_exp3

ROOT = Path(__file__).resolve().parents[1]
MNIST = ROOT / "data" / "mnist"
RUN_DIR = ROOT / "acceptance_runs"


# ------------------------------------------------------------ 1. gradients

def _ops(rng):
    """(name, build, arrays) for every differentiable gradcore op."""
    sizes = [2, 1, 3]
    n = sum(sizes)
    return [
        ("matmul", lambda a, b: gc.reduce("sum", gc.reduce("sum", gc.matmul(a, b))), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        ("transpose", lambda a, b: gc.reduce("sum", gc.reduce("sum", gc.matmul(gc.transpose(a), b))), [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))]),
        ("reshape", lambda a, b: gc.reduce("sum", gc.hadamard(gc.reshape(a, (6,)), b)), [rng.normal(size=(2, 3)), rng.normal(size=6)]),
        ("add", lambda a, b: gc.reduce("sum", gc.tanh(gc.add(a, b))), [rng.normal(size=5), rng.normal(size=5)]),
        ("sub", lambda a, b: gc.reduce("sum", gc.tanh(gc.sub(a, b))), [rng.normal(size=5), rng.normal(size=5)]),
        ("hadamard", lambda a, b: gc.reduce("sum", gc.hadamard(a, b)), [rng.normal(size=5), rng.normal(size=5)]),
        ("scale", lambda a: gc.reduce("sum", gc.tanh(gc.scale(a, -1.7))), [rng.normal(size=5)]),
        ("tanh", lambda a: gc.reduce("sum", gc.tanh(a)), [rng.normal(size=5)]),
        ("sigmoid", lambda a: gc.reduce("sum", gc.sigmoid(a)), [rng.normal(size=5)]),
        ("exp", lambda a: gc.reduce("sum", gc.exp(a)), [rng.normal(size=5)]),
        # keep relu inputs away from the kink so central differences are valid
        ("relu", lambda a: gc.reduce("sum", gc.hadamard(gc.relu(a), a)), [np.sign(rng.normal(size=5)) * rng.uniform(0.1, 1, 5)]),
        ("add_bias", lambda a, b: gc.reduce("sum", gc.reduce("sum", gc.tanh(gc.add_bias(a, b)))), [rng.normal(size=(3, 2)), rng.normal(size=2)]),
        ("scale_rows", lambda a, b: gc.reduce("sum", gc.reduce("sum", gc.tanh(gc.scale_rows(a, b)))), [rng.normal(size=(3, 2)), rng.normal(size=3)]),
        ("reduce_sum", lambda a: gc.reduce("sum", gc.tanh(gc.reduce("sum", a, axis=0))), [rng.normal(size=(3, 4))]),
        ("reduce_mean", lambda a: gc.reduce("sum", gc.tanh(gc.reduce("mean", a, axis=1))), [rng.normal(size=(3, 4))]),
        ("reduce_max", lambda a: gc.reduce("sum", gc.tanh(gc.reduce("max", a, axis=0))), [rng.permutation(12).reshape(3, 4) * 0.3]),
        ("softmax", lambda a, b: gc.reduce("sum", gc.hadamard(gc.softmax(a), b)), [rng.normal(size=5), rng.normal(size=5)]),
        ("segment_softmax", lambda a, b: gc.reduce("sum", gc.hadamard(gc.segment_softmax(a, sizes), b)), [rng.normal(size=n), rng.normal(size=n)]),
        ("segment_sum", lambda a: gc.reduce("sum", gc.reduce("sum", gc.tanh(gc.segment_reduce("sum", a, sizes)))), [rng.normal(size=(n, 2))]),
        ("segment_mean", lambda a: gc.reduce("sum", gc.reduce("sum", gc.tanh(gc.segment_reduce("mean", a, sizes)))), [rng.normal(size=(n, 2))]),
        ("segment_max", lambda a: gc.reduce("sum", gc.reduce("sum", gc.tanh(gc.segment_reduce("max", a, sizes)))), [rng.permutation(2 * n).reshape(n, 2) * 0.3]),
        ("bce", lambda a: gc.bce_loss(gc.sigmoid(a), 1), [rng.normal(size=1)]),
        ("bce_neg", lambda a: gc.bce_loss(gc.sigmoid(a), 0), [rng.normal(size=1)]),
    ]


def _op_error(build, arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Graph() as g:
        out = build(*ts)
    gc.backward(out, g)
    worst = 0.0
    for a, t in zip(arrays, ts):
        gn = numeric_grad(lambda: build(*[Tensor(x) for x in arrays]).item(), a)
        worst = max(worst, rel_error(t.grad, gn))
    return worst


def _end_to_end_error(rng, seed):
    levels = 1 + seed % 3
    agg = ("mean", "max", "sum")[seed % 3 if levels != 1 else (seed // 3) % 3]
    attention = seed % 2 == 0 or seed % 5 == 0
    dims = ModelDims(3, (4,), 3, 2, levels=levels)
    model = init_params(dims, seed=seed, aggregator=agg, attention=attention)

    def tree(level):
        n = int(rng.integers(1, 5))
        return rng.normal(size=(n, 3)) if level == 1 else [tree(level - 1) for _ in range(n)]

    # central differences are only valid away from ReLU kinks; redraw
    # samples with a hidden pre-activation within 1e-3 of zero
    while True:
        layout = BagLayout.from_nested(tree(levels))
        pre = layout.instances @ model.extractor.weights[0].values + model.extractor.biases[0].values
        if np.abs(pre).min() > 1e-3:
            break
    y = int(rng.integers(0, 2))
    model.zero_grad()
    with Graph() as g:
        loss = gc.bce_loss(forward_tensor(model, layout)[0], y)
    gc.backward(loss, g)
    worst = 0.0
    for _, p in model.named_parameters():
        gn = numeric_grad(lambda: gc.bce_loss(forward_tensor(model, layout)[0], y).item(), p.values)
        worst = max(worst, rel_error(p.grad, gn))
    return worst


def test_criterion_1_gradient_suite():
    worst_op, worst_e2e = ("", 0.0), 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for name, build, arrays in _ops(rng):
            err = _op_error(build, arrays)
            if err > worst_op[1]:
                worst_op = (name, err)
        worst_e2e = max(worst_e2e, _end_to_end_error(rng, seed))
    ok = worst_op[1] <= 1e-4 and worst_e2e <= 1e-4
    record(1, ok, f"100 seeds, worst op rel err {worst_op[1]:.2e} ({worst_op[0]}), worst end-to-end {worst_e2e:.2e} (tol 1e-4)")
    assert ok


# ------------------------------------------------- 2. softmax / attention

def test_criterion_2_softmax_attention_contracts():
    rng = np.random.default_rng(2)
    worst_sum = worst_shift = worst_uniform = 0.0
    negative = 0
    for _ in range(1000):
        n, m, h = int(rng.integers(1, 12)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
        params = GatedAttentionParams(
            Tensor(rng.normal(scale=3, size=(h, 1))), Tensor(rng.normal(scale=3, size=(h, m))), Tensor(rng.normal(scale=3, size=(h, m)))
        )
        E = rng.normal(scale=2, size=(n, m))
        a = attention_scores(E, params).values
        negative += int((a < 0).sum())
        worst_sum = max(worst_sum, abs(a.sum() - 1.0))
        logits = rng.normal(scale=5, size=n)
        c = rng.uniform(-50, 50)
        shifted = gc.softmax(Tensor(logits + c)).values
        worst_shift = max(worst_shift, np.abs(shifted - gc.softmax(Tensor(logits)).values).max())
        same = attention_scores(np.repeat(E[:1], n, axis=0), params).values
        worst_uniform = max(worst_uniform, np.abs(same - 1.0 / n).max())
    ok = negative == 0 and worst_sum <= 1e-9 and worst_shift <= 1e-12 and worst_uniform <= 1e-12
    record(2, ok, f"1000 cases, negatives {negative}, |sum-1| {worst_sum:.1e}, shift {worst_shift:.1e}, uniform {worst_uniform:.1e}")
    assert ok


# ------------------------------------------------ 3. permutation invariance

def test_criterion_3_permutation_invariance():
    rng = np.random.default_rng(3)
    worst = {"mean": 0.0, "sum": 0.0, "max": 0.0}
    for i in range(200):
        agg = ("mean", "sum", "max")[i % 3]
        attention = (i // 3) % 2 == 0
        m = 5
        params = GatedAttentionParams(Tensor(rng.normal(size=(4, 1))), Tensor(rng.normal(size=(4, m))), Tensor(rng.normal(size=(4, m))))
        cfg = MiBlockConfig(aggregator=agg, attention_enabled=attention)
        E = rng.normal(size=(int(rng.integers(1, 15)), m))
        perm = rng.permutation(len(E))
        z, a = mi_block(E, params, cfg)
        zp, ap = mi_block(E[perm], params, cfg)
        diff = np.abs(z.values - zp.values).max()
        diff = max(diff, np.abs(a.values[perm] - ap.values).max())
        # whole nested bag: shuffle instances within inner bags and the inner bags themselves
        model = init_params(ModelDims(m, (6,), 4, 3, levels=2), seed=i, aggregator=agg, attention=attention)
        bag = [rng.normal(size=(int(rng.integers(1, 6)), m)) for _ in range(int(rng.integers(1, 5)))]
        shuffled = [b[rng.permutation(len(b))] for b in bag]
        shuffled = [shuffled[j] for j in rng.permutation(len(bag))]
        diff = max(diff, np.abs(bag_embedding(model, bag) - bag_embedding(model, shuffled)).max())
        worst[agg] = max(worst[agg], diff)
    ok = worst["mean"] <= 1e-12 and worst["sum"] <= 1e-12 and worst["max"] == 0.0
    record(3, ok, "200 bags, max diff " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (max must be exact)")
    assert ok


# -------------------------------------------------------- 4. label oracles

def test_criterion_4_oracle_equivalence():
    pool = synth_pool(40, seed=4, dim=4)
    brute = {
        "exp1": lambda t: brute_exp1([d for bag in t for d in bag]),
        "exp2": brute_exp2,
        "exp3": brute_exp3,
    }
    agree = {}
    for exp, oracle in brute.items():
        ds = generate(pool, DatasetSpec.default(exp, n_samples=1000, seed=40), exp)
        agree[exp] = sum(oracle(s.digit_tree()) == s.weak_label for s in ds) / len(ds)
    ok = all(v == 1.0 for v in agree.values())
    record(4, ok, "agreement on 1000 samples each: " + ", ".join(f"{k} {v:.1%}" for k, v in agree.items()))
    assert ok


# ---------------------------------------------------------- 5. MIL reduction

def flat_mil_reference(state, x, aggregator, attention):
    """Single-level attention MIL written directly in numpy from raw parameters."""
    W1, b1, W2, b2, w, V, U, c, cb = state
    h = np.maximum(x @ W1 + b1, 0.0) @ W2 + b2
    if attention:
        logits = (np.tanh(h @ V.T) * (1.0 / (1.0 + np.exp(-(h @ U.T))))) @ w
        e = np.exp(logits[:, 0] - logits.max())
        a = e / e.sum()
        rows = h * a[:, None]
    else:
        rows = h
    z = {"mean": rows.mean(axis=0), "sum": rows.sum(axis=0), "max": rows.max(axis=0)}[aggregator]
    return 1.0 / (1.0 + np.exp(-(z @ c[:, 0] + cb[0])))


def test_criterion_5_mil_reduction():
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(100):
        agg = ("mean", "max", "sum")[i % 3]
        attention = i % 2 == 0
        model = init_params(ModelDims(6, (8,), 5, 4, levels=1), seed=i, aggregator=agg, attention=attention)
        state = [t.copy() for t in model.get_state()]
        x = rng.normal(size=(int(rng.integers(1, 12)), 6))
        p, _ = forward(model, x)
        worst = max(worst, abs(p - flat_mil_reference(state, x, agg, attention)))
    ok = worst <= 1e-12
    record(5, ok, f"100 samples, max |p_nmil - p_flat| {worst:.1e} (tol 1e-12)")
    assert ok


# ------------------------------------------------------------- MNIST runs

# Hyperparameters are not given by the original work; these are the declared
# settings for the desk-scale reproduction.
MNIST_BASE = dict(data_dir=str(MNIST), seed=0, n_test=400, learning_rate=0.01, max_epochs=100, patience=10)
EXPERIMENT_SETTINGS = {
    "exp1": dict(n_train=1000, aggregator="sum"),
    # counting needs many bags; smaller pools are memorised. About 40 min per attention run.
    "exp2": dict(n_train=16000, aggregator="mean", patience=20, hidden_dims=[64], embed_dim=32, attention_dim=32),
    "exp3": dict(n_train=2000, aggregator="sum"),
}

_reports = {}


def mnist_report(experiment, architecture, attention):
    if not (MNIST / "train-images-idx3-ubyte.gz").exists():
        pytest.fail(f"MNIST IDX files missing under {MNIST}")
    key = (experiment, architecture, attention)
    if key not in _reports:
        cfg = runs.RunConfig.from_dict(
            {**MNIST_BASE, **EXPERIMENT_SETTINGS[experiment], "experiment": experiment, "architecture": architecture, "attention": attention}
        )
        report, model, train_ds, test_ds = runs.run(cfg)
        out = RUN_DIR / f"{experiment}-{architecture}-{'att' if attention else 'noatt'}"
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        _reports[key] = report
    return _reports[key]


def f1(experiment, architecture, attention):
    return mnist_report(experiment, architecture, attention)["metrics"]["f1"]


@pytest.mark.mnist
def test_criterion_6_exp1():
    nmil, mil = f1("exp1", "nmil", True), f1("exp1", "mil", True)
    ok = nmil >= 0.90 and mil >= 0.90 and abs(nmil - mil) <= 0.05
    record(6, ok, f"exp1 NMIL w/ Att F1 {nmil:.3f}, MIL w/ Att F1 {mil:.3f} (>= 0.90 each, |diff| <= 0.05)")
    assert ok


@pytest.mark.mnist
def test_criterion_7_exp2_nested_beats_flat():
    nmil, mil = f1("exp2", "nmil", True), f1("exp2", "mil", True)
    ok = nmil >= 0.80 and mil <= 0.60 and nmil - mil >= 0.20
    record(7, ok, f"exp2 NMIL w/ Att F1 {nmil:.3f} (>= 0.80), MIL w/ Att F1 {mil:.3f} (<= 0.60), gap {nmil - mil:.3f} (>= 0.20)")
    assert ok


@pytest.mark.mnist
def test_criterion_8_exp2_attention_margin():
    att, plain = f1("exp2", "nmil", True), f1("exp2", "nmil", False)
    ok = att - plain >= 0.03
    record(8, ok, f"exp2 NMIL w/ Att F1 {att:.3f} vs w/o Att {plain:.3f}, margin {att - plain:.3f} (>= 0.03)")
    assert ok


@pytest.mark.mnist
def test_criterion_9_exp3():
    value = f1("exp3", "nmil", True)
    ok = value >= 0.70
    record(9, ok, f"exp3 NMIL w/ Att F1 {value:.3f} (>= 0.70)")
    assert ok


@pytest.mark.mnist
def test_criterion_10_attention_localization():
    report = mnist_report("exp2", "nmil", True)
    passes_7 = report["metrics"]["f1"] >= 0.80 and f1("exp2", "mil", True) <= 0.60
    auc = report["localization_auc"]
    inst, inner = auc["instance"], auc["inner_bag"]
    ok = passes_7 and inst is not None and inner is not None and inst >= 0.80 and inner >= 0.80
    record(10, ok, f"exp2 positive test samples: instance AUC {inst}, inner-bag AUC {inner} (>= 0.80 each; model passes criterion 7: {passes_7})")
    assert ok
