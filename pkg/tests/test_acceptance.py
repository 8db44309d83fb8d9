"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured value
before asserting, so ``pytest -v`` output doubles as the acceptance log.
"""

import time

import numpy as np
import pytest
from conftest import fuzz_prune_sequence, mc_hypervolume, random_front, study_front_objectives, true_front_objectives

from jetforge import bitlinear as B
from jetforge import data as D
from jetforge import gradcheck as G
from jetforge import hpo as H
from jetforge import model as M
from jetforge import pruning as P
from jetforge import training as T
from jetforge.cost import DEFAULT, COMPACT, cost_report, count_params
from jetforge.quantization import size_report

TINY = M.ModelConfig(4, 8, 2)


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def jets():
    records = D.synth_gen(0, 5000, 8, 3, 5)
    train, val = D.JetBatch.from_records(records, 8, 3).split(0.1, 0)
    stats = D.fit_norm_stats(train)
    return D.normalize(train, stats), D.normalize(val, stats)


@pytest.fixture(scope="module")
def trained_tiny(jets):
    train, val = jets
    t0 = time.perf_counter()
    best, history = T.train(M.build(TINY, 0), train, val, T.TrainConfig(epochs=25, batch_size=256, scheduler="onecycle"))
    return best, history, time.perf_counter() - t0


@pytest.fixture(scope="module")
def pruned_tiny(jets, trained_tiny):
    train, val = jets
    state, _, train_seconds = trained_tiny
    t0 = time.perf_counter()
    pruned, report = P.prune_pipeline(state, train, val, P.PruneConfig(ratio=0.5, steps=5, ft_epochs=5))
    return pruned, report, train_seconds + time.perf_counter() - t0


def test_criterion_01_gradients(verdict):
    t0 = time.perf_counter()
    worst_op, worst_name, worst_model = 0.0, None, 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for name, fn, arrays in G.op_cases(rng):
            err = G.check_op(fn, arrays, rng)
            if err > worst_op:
                worst_op, worst_name = err, name
        cfg = M.ModelConfig(int(rng.integers(1, 3)), 8, 2, num_particles=int(rng.integers(2, 5)))
        state = M.build(cfg, seed)
        x = rng.normal(size=(int(rng.integers(2, 5)), cfg.num_particles, 3))
        batch = D.JetBatch(x, rng.integers(5, size=len(x)), np.full(len(x), cfg.num_particles))
        worst_model = max(worst_model, G.check_model_loss(state, batch, rng))
    elapsed = time.perf_counter() - t0
    ok = worst_op < 1e-4 and worst_model < 1e-4 and elapsed < 60
    verdict(1, ok, f"worst op rel err {worst_op:.2e} ({worst_name}), model {worst_model:.2e}, {elapsed:.1f}s")


def test_criterion_02_permutation_invariance(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for seed in range(10):
        state = M.build(TINY, seed)
        x = rng.normal(size=(100, 8, 3))
        perms = np.array([rng.permutation(8) for _ in range(100)])
        permuted = np.take_along_axis(x, perms[:, :, None], axis=1)
        a = M.forward(state, x).data
        b = M.forward(state, permuted).data
        worst = max(worst, float(np.abs(a - b).max()))
    verdict(2, worst < 1e-8, f"max logit difference over 1000 pairs {worst:.2e}")


def test_criterion_03_quantization_equations(verdict):
    alpha, beta, signs, _ = B.weight_quant([[1.0, -2.0], [-1.0, 2.0]])
    weights_ok = alpha == 0.0 and beta == 1.5 and signs.tolist() == [[1, -1], [-1, 1]]
    x_q, x_deq = B.absmax_quant([0.0, 1.0, -2.0])
    gamma = 127 / 2.0
    acts_ok = x_q.tolist() == [0.0, 64.0, -127.0] and np.allclose(x_deq, x_q / gamma, rtol=0, atol=1e-15)

    rng = np.random.default_rng(0)
    fuzz_ok, worst = True, 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 9, size=2))
        w = rng.normal(scale=10 ** rng.uniform(-3, 3), size=shape)
        _, beta, signs, deq = B.weight_quant(w)
        fuzz_ok &= set(np.unique(signs)) <= {-1, 1} and np.allclose(np.abs(deq), beta)
        x = rng.normal(scale=10 ** rng.uniform(-3, 3), size=shape)
        x_q, x_deq = B.absmax_quant(x)
        peak = np.abs(x).max()
        fuzz_ok &= np.abs(x_q).max() <= 127 and bool((x_q == np.round(x_q)).all())
        worst = max(worst, float(np.abs(x - x_deq).max() / (peak / 254)))
    fuzz_ok &= worst <= 1 + 1e-9
    ok = weights_ok and acts_ok and fuzz_ok
    verdict(3, ok, f"hand examples {weights_ok and acts_ok}; worst dequant error / bound {worst:.6f} over 1000 tensors")


def test_criterion_04_packed_size(verdict):
    rows = []
    for particles in (8, 16, 32):
        rep = size_report(M.ModelConfig(3, 64, 2, num_particles=particles))
        rows.append(rep["reduction_pct"])
    ok = min(rows) >= 80.0
    verdict(4, ok, "size reduction " + ", ".join(f"{r:.2f}%" for r in rows) + " at 8/16/32 particles")


def test_criterion_05_pruning_structure(verdict, pruned_tiny):
    pruned, report, seconds = pruned_tiny
    flops = {}
    for name, conv in (("default", DEFAULT), ("compact", COMPACT)):
        before, after = cost_report(TINY, convention=conv).flops, cost_report(pruned.config, convention=conv).flops
        flops[name] = 100.0 * (1 - after / before)
    params = 100.0 * (1 - count_params(pruned.config) / count_params(TINY))

    rng = np.random.default_rng(0)
    out = M.forward(pruned, rng.normal(size=(1000, 8, 3)))
    shape_ok = out.shape == (1000, 5) and np.isfinite(out.data).all()
    shape_ok &= sum(p.data.size for p in pruned.params.values()) == count_params(pruned.config)
    for seed in range(200):
        fuzz_prune_sequence(seed)

    flops_ok = all(45.0 <= v <= 50.0 for v in flops.values())
    params_ok = 30.0 <= params <= 40.0
    ok = flops_ok and params_ok and shape_ok and seconds < 600
    verdict(
        5,
        ok,
        f"FLOPs -{flops['default']:.2f}% (default) / -{flops['compact']:.2f}% (compact), "
        f"params -{params:.2f}% (target 30-40%), fuzz suite ok, {seconds:.0f}s",
    )


def test_criterion_06_pruning_accuracy(verdict, pruned_tiny):
    _, report, _ = pruned_tiny
    drop = report.before["accuracy"] - report.after["accuracy"]
    verdict(
        6,
        drop <= 0.01,
        f"accuracy {report.before['accuracy']:.4f} -> {report.after['accuracy']:.4f} (drop {100 * drop:.2f} points)",
    )


def test_criterion_07_hypervolume(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        pts = random_front(rng, int(rng.integers(10, 41)))
        exact, approx = H.hypervolume(pts), mc_hypervolume(pts, 1_000_000, rng)
        worst = max(worst, abs(exact - approx) / exact)
    trials = H.run_study(H.NSGA2Sampler(seed=0), 80, H.synthetic_objective("rich")).trials
    norm = H.Normalization.from_trials(trials)
    curve = [H.hv_at(trials, n, norm) for n in range(1, 81)]
    monotone = all(a <= b for a, b in zip(curve, curve[1:]))
    verdict(7, worst < 0.01 and monotone, f"worst relative gap to Monte Carlo {100 * worst:.3f}%, hv_at monotone {monotone}")


def test_criterion_08_front_exactness(verdict):
    space = H.SearchSpace()
    lines, ok = [], True
    for kind in ("linear", "rich"):
        objective = H.synthetic_objective(kind)
        truth = true_front_objectives(objective, space)
        firsts = []
        for seed in range(10):
            trials = H.run_study(H.NSGA2Sampler(space, seed), 200, objective).trials
            hit = next((n for n in range(1, 201) if study_front_objectives(trials[:n]) == truth), None)
            firsts.append(hit)
        ok &= all(f is not None for f in firsts)
        lines.append(f"{kind}: exact by {max(f or 999 for f in firsts)} evals ({sum(f is not None for f in firsts)}/10 seeds)")
    verdict(8, ok, "; ".join(lines))


def test_criterion_09_sampler_ordering(verdict):
    space = H.SearchSpace()
    lines, ok = [], True
    for kind in ("linear", "rich"):
        objective = H.synthetic_objective(kind)
        nsga, rand = [], []
        for seed in range(10):
            a = H.run_study(H.NSGA2Sampler(space, seed), 80, objective).trials
            b = H.run_study(H.RandomSampler(space, seed), 80, objective).trials
            norm = H.Normalization.from_trials(a + b)
            nsga.append(H.hv_at(a, 80, norm))
            rand.append(H.hv_at(b, 80, norm))
        ok &= np.median(nsga) >= np.median(rand)
        lines.append(f"{kind}: median HV@80 nsga2 {np.median(nsga):.4f} vs random {np.median(rand):.4f}")
    verdict(9, ok, "; ".join(lines))


def test_criterion_10_select_tiny(verdict, tmp_path):
    store = H.TrialStore(tmp_path / "reference.jsonl")
    for t in H.reference_trials():
        store.append(t)
    tiny = H.select_tiny(store.load())
    ok = H.canon(tiny.params) == (4, (8, 2), 0.0) and tiny.flops == 26168 and tiny.accuracy == 0.6525
    verdict(10, ok, f"selected {H.canon(tiny.params)} at {tiny.flops:,} FLOPs, acc {tiny.accuracy}")


def test_criterion_11_learnability(verdict, jets, trained_tiny):
    _, val = jets
    best, history, seconds = trained_tiny
    acc = T.evaluate(best, val).accuracy
    verdict(11, acc >= 0.90 and len(history) <= 25, f"validation accuracy {acc:.4f} after {len(history)} epochs ({seconds:.0f}s)")


def test_criterion_12_schedulers(verdict):
    total = 1000
    onecycle_ok = T.onecycle_lr(int(0.2 * total), total) == 0.001
    cosine_ok = T.cosine_lr(0, 25, 1e-3, 1e-6) == 1e-3 and T.cosine_lr(25, 25, 1e-3, 1e-6) == 1e-6
    plateau = T.PlateauScheduler(1e-3, 0.5, 2, 1e-6)
    # one improving epoch, then patience + 1 epochs without improvement
    lrs = [plateau.step(loss) for loss in (1.0, 1.0, 1.0, 1.0)]
    plateau_ok = lrs == [1e-3, 1e-3, 1e-3, 5e-4]
    ok = onecycle_ok and cosine_ok and plateau_ok
    verdict(12, ok, f"onecycle peak {onecycle_ok}, cosine endpoints {cosine_ok}, plateau halving {plateau_ok}")
