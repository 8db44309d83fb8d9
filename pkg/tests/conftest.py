import numpy as np
import pytest
from hypothesis import settings

from jetforge import data as D
from jetforge import hpo as H
from jetforge import model as M
from jetforge import pruning as P
from jetforge.cost import count_params
from jetforge.errors import PruningError

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def make_split(num_jets=600, seed=0, particles=8, features=3, classes=5):
    records = D.synth_gen(seed, num_jets, particles, features, classes)
    batch = D.JetBatch.from_records(records, particles, features)
    train, val = batch.split(0.1, seed)
    stats = D.fit_norm_stats(train)
    return D.normalize(train, stats), D.normalize(val, stats)


@pytest.fixture(scope="session")
def small_split():
    return make_split()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_config(rng):
    blocks = int(rng.integers(1, 4))
    heads = int(rng.integers(1, 3))
    dim = heads * int(rng.integers(4, 9))
    return M.ModelConfig(blocks, dim, heads, num_particles=6)


def fuzz_prune_sequence(seed, steps=3):
    """Random config, random scores, random quotas; returns the final state.

    Every intermediate model is checked for a finite forward pass of the
    right shape and for a parameter count that matches its config.
    """
    rng = np.random.default_rng(seed)
    state = M.build(random_config(rng), seed)
    x = rng.normal(size=(5, 6, 3))
    x[:, 4:] = 0.0
    for _ in range(steps):
        graph = P.build_dep_graph(state)
        sizes = P.family_sizes(state.config)
        quota = {
            "residual": int(rng.integers(0, sizes["residual"])),
            "head": int(rng.integers(0, sizes["head"] + 1)),
            "ffn": int(rng.integers(0, sizes["ffn"] - state.config.num_blocks + 1)),
        }
        scores = rng.random(len(graph))
        try:
            new, chosen = P.prune_step(state, scores=scores, graph=graph, quota=quota)
        except PruningError:
            continue
        removed = P.family_sizes(state.config)
        kept = P.family_sizes(new.config)
        assert removed["residual"] - kept["residual"] == quota["residual"]
        assert removed["ffn"] - kept["ffn"] == quota["ffn"]
        assert removed["head"] - kept["head"] <= quota["head"]
        assert len(chosen) == len(set(chosen))
        assert sum(p.data.size for p in new.params.values()) == count_params(new.config)
        out = M.forward(new, x)
        assert out.shape == (5, new.config.num_classes)
        assert np.isfinite(out.data).all()
        state = new
    return state


def mc_hypervolume(points, samples, rng, reference=(1.0, 1.0)):
    """Monte-Carlo estimate of the area dominated by ``points`` in the box to ``reference``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    u = rng.random((samples, 2)) * np.asarray(reference)
    covered = np.zeros(samples, dtype=bool)
    for x, y in pts:
        covered |= (u[:, 0] >= x) & (u[:, 1] >= y)
    return covered.mean() * reference[0] * reference[1]


def random_front(rng, size):
    """Nondominated subset of ``size`` uniform points in the unit square.

    Filtering uniform draws keeps the dominated area well away from zero,
    where a sampling oracle's relative error would blow up.
    """
    pts = rng.random((size, 2))
    keep = [i for i in range(size) if not any(H.dominates((-q[0], q[1]), (-pts[i][0], pts[i][1])) for q in pts)]
    return pts[keep]


def true_front_objectives(objective, space):
    trials = [H.Trial(i, p, *objective(p)) for i, p in enumerate(space.enumerate())]
    return {t.objectives for t in H.pareto_front(trials)}


def study_front_objectives(trials):
    return {t.objectives for t in H.pareto_front(trials)}
