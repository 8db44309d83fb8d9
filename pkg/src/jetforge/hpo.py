"""Multi-objective hyperparameter search: maximize accuracy, minimize FLOPs.

A study draws configuration points from a small categorical space,
evaluates them with an objective returning ``(accuracy, flops)``, and
appends every trial to a JSON-lines store. Trials below the accuracy
threshold are infeasible: they can breed but never enter a Pareto front.

The NSGA-II sampler is stateless between calls apart from the trials it
has been told about. Generation ``g`` is the block of trial ids
``[g * N, (g + 1) * N)`` and every random draw comes from a stream keyed
by ``(seed, trial id)``, so replaying a store reproduces the same
sequence of proposals.
"""

import json
import logging
import math
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .cost import DEFAULT, count_flops
from .errors import ContractError
from .model import ModelConfig
from .rng import substream

log = logging.getLogger(__name__)

FEASIBLE_ACC = 0.65
DIM_HEADS = ((8, 2), (16, 2), (32, 2), (64, 2), (64, 4), (128, 2), (128, 4), (128, 8))
HV_CHECKPOINTS = (40, 60, 80)


# ---------------------------------------------------------------------------
# Search space


@dataclass(frozen=True)
class SearchSpace:
    num_transformers: tuple = (1, 2, 3, 4, 5, 6)
    dim_heads: tuple = DIM_HEADS
    dropout: tuple = (0.0, 0.05)

    def choices(self):
        return {"num_transformers": self.num_transformers, "dim_heads": self.dim_heads, "dropout": self.dropout}

    def __len__(self):
        return len(self.num_transformers) * len(self.dim_heads) * len(self.dropout)

    def sample(self, rng):
        return {name: _pick(rng, opts) for name, opts in self.choices().items()}

    def enumerate(self):
        return [
            {"num_transformers": n, "dim_heads": dh, "dropout": p}
            for n in self.num_transformers
            for dh in self.dim_heads
            for p in self.dropout
        ]

    def contains(self, point):
        return all(canon(point)[i] in opts for i, opts in enumerate(self.choices().values()))


def _pick(rng, options):
    return options[int(rng.integers(len(options)))]


def canon(point):
    """Hashable key of a configuration point."""
    return (int(point["num_transformers"]), tuple(int(v) for v in point["dim_heads"]), float(point["dropout"]))


def point_config(point, num_particles=8, num_features=3, num_classes=5):
    n, (d, h), p = canon(point)
    return ModelConfig(n, d, h, num_features, num_particles, num_classes, dropout=p)


def point_flops(point, convention=DEFAULT, **shape):
    return count_flops(point_config(point, **shape), convention=convention)


# ---------------------------------------------------------------------------
# Trials and dominance


@dataclass
class Trial:
    id: int
    params: dict
    accuracy: float = None
    flops: int = None
    status: str = "complete"
    wall_time: float = 0.0
    error: str = None

    def __post_init__(self):
        self.params = {
            "num_transformers": int(self.params["num_transformers"]),
            "dim_heads": [int(v) for v in self.params["dim_heads"]],
            "dropout": float(self.params["dropout"]),
        }

    @property
    def complete(self):
        return self.status == "complete"

    @property
    def feasible(self):
        return self.complete and self.accuracy >= FEASIBLE_ACC

    @property
    def violation(self):
        return max(0.0, FEASIBLE_ACC - self.accuracy)

    @property
    def objectives(self):
        return (self.accuracy, self.flops)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def dominates(a, b):
    """``a`` dominates ``b`` on (maximize accuracy, minimize FLOPs)."""
    return a[0] >= b[0] and a[1] <= b[1] and (a[0] > b[0] or a[1] < b[1])


def constrained_dominates(a, b):
    """Feasibility first, then smaller violation, then plain dominance."""
    if a.feasible != b.feasible:
        return a.feasible
    if not a.feasible:
        return a.violation < b.violation
    return dominates(a.objectives, b.objectives)


def nondominated_sort(items, dom=dominates):
    """Fronts (lists of indices into ``items``), best first."""
    n = len(items)
    beaten_by = [0] * n
    beats = [[] for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if dom(items[i], items[j]):
                beats[i].append(j)
                beaten_by[j] += 1
            elif dom(items[j], items[i]):
                beats[j].append(i)
                beaten_by[i] += 1
    fronts = []
    current = [i for i in range(n) if beaten_by[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in beats[i]:
                beaten_by[j] -= 1
                if beaten_by[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
    return fronts


def crowding_distance(objectives):
    """Crowding distance of each point; boundary points get infinity."""
    obj = np.asarray(objectives, dtype=np.float64).reshape(len(objectives), -1)
    n = len(obj)
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for m in range(obj.shape[1]):
        order = np.argsort(obj[:, m], kind="stable")
        lo, hi = obj[order[0], m], obj[order[-1], m]
        dist[order[0]] = dist[order[-1]] = np.inf
        if hi == lo:
            continue
        for k in range(1, n - 1):
            dist[order[k]] += (obj[order[k + 1], m] - obj[order[k - 1], m]) / (hi - lo)
    return dist


def pareto_front(trials):
    """Feasible nondominated trials, ascending FLOPs, ties by accuracy then id."""
    feas = [t for t in trials if t.feasible]
    front = [t for t in feas if not any(dominates(o.objectives, t.objectives) for o in feas)]
    return sorted(front, key=lambda t: (t.flops, -t.accuracy, t.id))


def select_tiny(trials):
    """The feasible trial with the fewest FLOPs; ties go to higher accuracy."""
    feas = [t for t in trials if t.feasible]
    if not feas:
        raise ContractError("no feasible trial to select")
    return min(feas, key=lambda t: (t.flops, -t.accuracy, t.id))


# ---------------------------------------------------------------------------
# Hypervolume


def hypervolume(points, reference=(1.0, 1.0)):
    """Area dominated by ``points`` up to ``reference`` (both minimized).

    Points must lie in the unit square.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return 0.0
    if (pts < 0).any() or (pts > 1).any():
        raise ContractError("hypervolume points must lie in [0, 1]^2")
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    area, best_y = 0.0, reference[1]
    for x, y in pts:
        if y < best_y:
            area += (reference[0] - x) * (best_y - y)
            best_y = y
    return float(area)


@dataclass(frozen=True)
class Normalization:
    """Min-max map from (accuracy, FLOPs) to the minimized unit square."""

    acc_min: float
    acc_max: float
    flops_min: float
    flops_max: float

    @classmethod
    def from_trials(cls, trials):
        done = [t for t in trials if t.complete]
        if not done:
            return cls(0.0, 1.0, 0.0, 1.0)
        acc = [t.accuracy for t in done]
        fl = [t.flops for t in done]
        return cls(min(acc), max(acc), min(fl), max(fl))

    def __call__(self, accuracy, flops):
        ar = self.acc_max - self.acc_min
        fr = self.flops_max - self.flops_min
        f1 = (self.acc_max - accuracy) / ar if ar > 0 else 0.0
        f2 = (flops - self.flops_min) / fr if fr > 0 else 0.0
        return (f1, f2)


def hv_at(trials, n, normalization=None):
    """Hypervolume of the feasible front among the first ``n`` trials."""
    if n > len(trials):
        raise ContractError(f"hv_at({n}) with only {len(trials)} trials")
    ordered = sorted(trials, key=lambda t: t.id)
    norm = normalization or Normalization.from_trials(ordered)
    front = pareto_front(ordered[:n])
    return hypervolume([norm(t.accuracy, t.flops) for t in front])


def hv_curve(trials, ns=None, normalization=None):
    ns = ns or range(1, len(trials) + 1)
    norm = normalization or Normalization.from_trials(trials)
    return [(n, hv_at(trials, n, norm)) for n in ns if n <= len(trials)]


# ---------------------------------------------------------------------------
# Samplers


class RandomSampler:
    name = "random"

    def __init__(self, space=None, seed=0):
        self.space = space or SearchSpace()
        self.seed = seed
        self.trials = {}
        self.asked = set()

    def ask(self, trial_id):
        self.asked.add(trial_id)
        return self.space.sample(substream(self.seed, "random", trial_id))

    def tell(self, trial):
        if trial.id not in self.asked:
            raise ContractError(f"tell for unknown trial {trial.id}")
        self.trials[trial.id] = trial

    def restore(self, trials):
        for t in trials:
            self.asked.add(t.id)
            self.trials[t.id] = t


class NSGA2Sampler(RandomSampler):
    """Elitist nondominated-sorting genetic sampler over categorical points.

    Parents of generation ``g`` are the ``population_size`` survivors of
    the previous parents plus generation ``g - 1``, ranked by constrained
    nondominated sorting and crowding distance. Children come from binary
    tournaments, uniform crossover and uniform-reset mutation. A child that
    repeats an already proposed point is redrawn up to ``max_retries``
    times.
    """

    name = "nsga2"

    def __init__(
        self,
        space=None,
        seed=0,
        population_size=20,
        crossover_prob=0.9,
        mutation_prob=None,
        max_retries=32,
    ):
        super().__init__(space, seed)
        self.population_size = population_size
        self.crossover_prob = crossover_prob
        self.mutation_prob = 1.0 / len(self.space.choices()) if mutation_prob is None else mutation_prob
        self.max_retries = max_retries
        self.proposed = {}
        self._parents = {}

    def generation(self, trial_id):
        return trial_id // self.population_size

    def _members(self, gen):
        lo, hi = gen * self.population_size, (gen + 1) * self.population_size
        return [t for i, t in sorted(self.trials.items()) if lo <= i < hi and t.complete]

    def survivors(self, pool):
        """Best ``population_size`` trials of ``pool`` with their rank and crowding."""
        fronts = nondominated_sort(pool, constrained_dominates)
        chosen = []
        for rank, front in enumerate(fronts):
            members = [pool[i] for i in front]
            crowd = crowding_distance([t.objectives for t in members])
            ranked = [(rank, c, t) for c, t in zip(crowd, members)]
            room = self.population_size - len(chosen)
            if len(ranked) > room:
                ranked.sort(key=lambda r: (-r[1], r[2].id))
                ranked = ranked[:room]
            chosen += ranked
            if len(chosen) >= self.population_size:
                break
        return chosen

    def parents(self, gen):
        if gen in self._parents:
            return self._parents[gen]
        pool = self._members(0) if gen == 1 else [r[2] for r in self.parents(gen - 1)] + self._members(gen - 1)
        out = self.survivors(pool)
        if len(self._members(gen - 1)) == self.population_size:
            self._parents[gen] = out
        return out

    def _tournament(self, rng, parents):
        a, b = parents[int(rng.integers(len(parents)))], parents[int(rng.integers(len(parents)))]
        if (a[0], -a[1]) <= (b[0], -b[1]):
            return a[2]
        return b[2]

    def _child(self, rng, parents):
        p1, p2 = self._tournament(rng, parents), self._tournament(rng, parents)
        names = list(self.space.choices())
        child = dict(p1.params)
        if rng.random() < self.crossover_prob:
            for name in names:
                if rng.random() < 0.5:
                    child[name] = p2.params[name]
        for name, opts in self.space.choices().items():
            if rng.random() < self.mutation_prob:
                child[name] = _pick(rng, opts)
        return child

    def ask(self, trial_id):
        self.asked.add(trial_id)
        gen = self.generation(trial_id)
        parents = self.parents(gen) if gen > 0 else []
        if not parents:
            point = self.space.sample(substream(self.seed, "nsga-init", trial_id))
        else:
            rng = substream(self.seed, "nsga", trial_id)
            seen = {canon(p) for p in self.proposed.values()} | {canon(t.params) for t in self.trials.values()}
            point = self._child(rng, parents)
            for _ in range(self.max_retries):
                if canon(point) not in seen:
                    break
                point = self._child(rng, parents)
        self.proposed[trial_id] = point
        return point

    def restore(self, trials):
        super().restore(trials)
        for t in trials:
            self.proposed[t.id] = t.params


SAMPLERS = {"nsga2": NSGA2Sampler, "random": RandomSampler}


def make_sampler(name, space=None, seed=0, **kwargs):
    if name not in SAMPLERS:
        raise ContractError(f"unknown sampler {name!r}; expected one of {sorted(SAMPLERS)}")
    return SAMPLERS[name](space, seed, **kwargs)


# ---------------------------------------------------------------------------
# Trial store


class TrialStore:
    """Append-only JSON-lines file of trials guarded by a file lock."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock = FileLock(str(self.path) + ".lock")

    def append(self, trial):
        with self.lock:
            with open(self.path, "a") as fh:
                fh.write(trial.to_json() + "\n")

    def load(self):
        if not self.path.exists():
            return []
        with self.lock:
            lines = self.path.read_text().splitlines()
        trials = {}
        for line in lines:
            if line.strip():
                t = Trial.from_json(line)
                trials[t.id] = t
        return [trials[i] for i in sorted(trials)]


class MemoryStore(TrialStore):
    def __init__(self, trials=()):
        self._trials = list(trials)

    def append(self, trial):
        self._trials.append(trial)

    def load(self):
        return sorted(self._trials, key=lambda t: t.id)


# ---------------------------------------------------------------------------
# Objectives


def synthetic_objective(kind="rich", convention=DEFAULT):
    """Deterministic stand-in for training, returning ``(accuracy, flops)``.

    ``"linear"``: accuracy ``0.6 + 0.01 * num_transformers``.
    ``"rich"``: accuracy saturates with depth and width, four heads help a
    little, eight heads and dropout hurt, so many points are dominated.
    """
    if kind not in ("linear", "rich"):
        raise ContractError(f"unknown synthetic objective {kind!r}")

    def objective(point, trial_id=None):
        n, (d, h), p = canon(point)
        flops = point_flops(point, convention)
        if kind == "linear":
            return 0.6 + 0.01 * n, flops
        acc = 0.45 + 0.08 * math.log(1 + n) + 0.03 * math.log2(d / 8)
        acc += {2: 0.0, 4: 0.01, 8: -0.02}[h] - (0.015 if p > 0 else 0.0)
        return round(acc, 6), flops

    return objective


def jetformer_objective(train_data, val_data, train_cfg=None, seed=0, convention=DEFAULT):
    """Train a JetFormer for each point and report its best validation accuracy."""
    from .model import build
    from .training import TrainConfig, evaluate, train

    cfg = train_cfg or TrainConfig(epochs=25, batch_size=256, early_stop_patience=4)
    shape = {
        "num_particles": train_data.num_particles,
        "num_features": train_data.num_features,
        "num_classes": int(max(train_data.labels.max(), val_data.labels.max()) + 1),
    }

    def objective(point, trial_id=0):
        config = point_config(point, **shape)
        best, _ = train(build(config, seed + trial_id), train_data, val_data, cfg)
        return evaluate(best, val_data).accuracy, count_flops(config, convention=convention)

    return objective


# ---------------------------------------------------------------------------
# Study


@dataclass
class StudyResult:
    trials: list
    front: list = field(default_factory=list)
    hv: list = field(default_factory=list)


def _evaluate(objective, trial_id, point):
    t0 = time.perf_counter()
    try:
        acc, flops = objective(point, trial_id)
        return Trial(trial_id, point, float(acc), int(flops), "complete", time.perf_counter() - t0)
    except Exception as exc:  # a failed trial is recorded, never fatal
        log.warning("trial %d failed: %s", trial_id, exc)
        return Trial(trial_id, point, None, None, "failed", time.perf_counter() - t0, repr(exc))


def run_study(sampler, n_trials, objective, store=None, workers=1):
    """Run trials until the store holds ``n_trials``; resumes from the store.

    With ``workers > 1`` trials evaluate on threads; proposals then depend
    on completion order and are not reproducible.
    """
    store = store if store is not None else MemoryStore()
    trials = store.load()
    sampler.restore(trials)
    lock = threading.Lock()
    next_id = len(trials)

    def finish(trial):
        with lock:
            store.append(trial)
            sampler.tell(trial)
            trials.append(trial)

    if workers <= 1:
        for tid in range(next_id, n_trials):
            finish(_evaluate(objective, tid, sampler.ask(tid)))
    else:
        with ThreadPoolExecutor(workers) as pool:
            pending = set()
            tid = next_id
            while tid < n_trials or pending:
                while tid < n_trials and len(pending) < workers:
                    with lock:
                        point = sampler.ask(tid)
                    pending.add(pool.submit(_evaluate, objective, tid, point))
                    tid += 1
                done, pending = wait(pending, return_when=FIRST_COMPLETED)
                for fut in done:
                    finish(fut.result())
    trials.sort(key=lambda t: t.id)
    ns = [n for n in HV_CHECKPOINTS if n <= len(trials)]
    return StudyResult(trials, pareto_front(trials), hv_curve(trials, ns))


# ---------------------------------------------------------------------------
# Reporting


def pareto_table(front):
    """Front rows in ascending FLOPs, one line per trial."""
    head = f"{'Index':>5} {'FLOPs':>12} {'val_acc':>8} {'# transformers':>15} {'embed_dim':>10} {'# heads':>8} {'dropout':>8}"
    lines = [head]
    for i, t in enumerate(sorted(front, key=lambda t: (t.flops, -t.accuracy, t.id))):
        n, (d, h), p = canon(t.params)
        lines.append(f"{i:>5} {t.flops:>12,} {t.accuracy:>8.4f} {n:>15} {d:>10} {h:>8} {p:>8.2f}")
    return "\n".join(lines)


def write_report(trials, out_dir):
    """Pareto table, HV curve CSV and a scatter plot; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    front = pareto_front(trials)
    (out / "pareto.txt").write_text(pareto_table(front) + "\n")
    with open(out / "hv_curve.csv", "w") as fh:
        fh.write("n_trials,hypervolume\n")
        for n, hv in hv_curve(trials):
            fh.write(f"{n},{hv!r}\n")

    fig, ax = plt.subplots(figsize=(6, 4))
    done = [t for t in trials if t.complete]
    infeas = [t for t in done if not t.feasible]
    feas = [t for t in done if t.feasible]
    if infeas:
        ax.scatter([t.flops for t in infeas], [t.accuracy for t in infeas], c="0.6", s=12, label="infeasible")
    if feas:
        ax.scatter([t.flops for t in feas], [t.accuracy for t in feas], c="tab:blue", s=12, label="feasible")
    if front:
        ax.plot([t.flops for t in front], [t.accuracy for t in front], "o-", c="tab:red", ms=4, label="Pareto front")
    ax.axhline(FEASIBLE_ACC, ls="--", c="0.4", lw=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("FLOPs")
    ax.set_ylabel("validation accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out / "pareto.png", dpi=120)
    plt.close(fig)
    return [out / "pareto.txt", out / "hv_curve.csv", out / "pareto.png"]


# The 13 best trials of an 80-trial NSGA-II study on the 8-particle,
# 3-feature jet dataset: (FLOPs, val_acc, blocks, embed_dim, heads, dropout).
REFERENCE_ROWS = (
    (26168, 0.6525, 4, 8, 2, 0.00),
    (32648, 0.6564, 5, 8, 2, 0.00),
    (39128, 0.6564, 6, 8, 2, 0.00),
    (89200, 0.6625, 4, 16, 2, 0.00),
    (111376, 0.6653, 5, 16, 2, 0.00),
    (244640, 0.6671, 3, 32, 2, 0.00),
    (325856, 0.6685, 4, 32, 2, 0.00),
    (407072, 0.6700, 5, 32, 2, 0.00),
    (931654, 0.6705, 3, 64, 4, 0.00),
    (1241544, 0.6715, 4, 64, 2, 0.00),
    (1861324, 0.6718, 6, 64, 4, 0.05),
    (3632780, 0.6724, 3, 128, 8, 0.00),
    (4842384, 0.6732, 4, 128, 8, 0.05),
)


def reference_trials():
    return [
        Trial(i, {"num_transformers": n, "dim_heads": [d, h], "dropout": p}, acc, fl)
        for i, (fl, acc, n, d, h, p) in enumerate(REFERENCE_ROWS)
    ]
