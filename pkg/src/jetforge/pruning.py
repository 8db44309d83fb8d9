"""Dependency-aware structured pruning with first-order Taylor importance.

Three families of prunable groups:

* ``residual``: one channel of the residual stream. It touches the
  embedding output, the class token, every batch norm, the input columns
  of every Q/K/V and FFN first layer, the output rows of every attention
  projection and FFN second layer, and the head input.
* ``head``: one inner dimension of one attention head. It removes a row
  of Q, K and V and the matching column of the output projection. A head
  never shrinks below ``MIN_HEAD_DIM`` dimensions.
* ``ffn``: one hidden unit of a block's FFN.

Ranking is global across blocks within a family. Each family gets its own
removal quota per step, so the narrow residual family is not starved by
the many small FFN groups.
"""

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as M
from .cost import DEFAULT, cost_report
from .errors import ContractError, NonFiniteError, PruningError
from .rng import substream
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

FAMILIES = ("residual", "head", "ffn")
SCORE_BATCHES = 8


@dataclass(frozen=True)
class PruneGroup:
    family: str
    key: tuple
    entries: tuple  # (param name, axis, index) triples removed together


@dataclass
class DependencyGraph:
    groups: list

    def family(self, name):
        return [i for i, g in enumerate(self.groups) if g.family == name]

    def __len__(self):
        return len(self.groups)


def _residual_entries(config, c):
    e = [("embed.weight", 0, c), ("embed.bias", 0, c), ("cls_token", 1, c)]
    for b in range(config.num_blocks):
        p = f"blocks.{b}"
        e += [(f"{p}.norm1.weight", 0, c), (f"{p}.norm1.bias", 0, c)]
        e += [(f"{p}.attn.{x}.weight", 1, c) for x in "qkv"]
        e += [(f"{p}.attn.out.weight", 0, c), (f"{p}.attn.out.bias", 0, c)]
        e += [(f"{p}.norm2.weight", 0, c), (f"{p}.norm2.bias", 0, c)]
        e += [(f"{p}.ffn.fc1.weight", 1, c), (f"{p}.ffn.fc2.weight", 0, c), (f"{p}.ffn.fc2.bias", 0, c)]
    e += [("norm_final.weight", 0, c), ("norm_final.bias", 0, c), ("head.weight", 1, c)]
    return tuple(e)


def build_dep_graph(state):
    """Enumerate every prunable group of ``state`` in a fixed order."""
    cfg = state.config
    groups = [
        PruneGroup("residual", ("residual", c), _residual_entries(cfg, c)) for c in range(cfg.embed_dim)
    ]
    for b in range(cfg.num_blocks):
        p = f"blocks.{b}.attn"
        start = 0
        for h, width in enumerate(cfg.block_head_dims(b)):
            for j in range(width):
                i = start + j
                e = [(f"{p}.{x}.{t}", 0, i) for x in "qkv" for t in ("weight", "bias")]
                e.append((f"{p}.out.weight", 1, i))
                groups.append(PruneGroup("head", ("head", b, h, j), tuple(e)))
            start += width
    for b in range(cfg.num_blocks):
        p = f"blocks.{b}.ffn"
        for u in range(cfg.block_ffn(b)):
            e = ((f"{p}.fc1.weight", 0, u), (f"{p}.fc1.bias", 0, u), (f"{p}.fc2.weight", 1, u))
            groups.append(PruneGroup("ffn", ("ffn", b, u), e))
    return DependencyGraph(groups)


def taylor_scores(state, batches, graph=None, loss_scale=1.0):
    """First-order importance ``sum |w * dL/dw|`` of every group.

    Gradients of the mean loss are accumulated over ``batches`` in
    inference mode. Returns an array aligned with ``graph.groups``.
    """
    batches = list(batches)
    if not batches:
        raise ContractError("taylor_scores needs at least one batch")
    graph = graph or build_dep_graph(state)
    state.zero_grad()
    for batch in batches:
        out = M.loss(M.forward(state, batch), batch.labels) * loss_scale
        out.backward()
    grads = {}
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        grads[name] = np.abs(p.data * g)
    state.zero_grad()
    scores = np.empty(len(graph))
    for i, group in enumerate(graph.groups):
        scores[i] = sum(float(np.take(grads[n], idx, axis=ax).sum()) for n, ax, idx in group.entries)
    return scores


def family_sizes(config):
    return {
        "residual": config.embed_dim,
        "head": sum(sum(config.block_head_dims(b)) for b in range(config.num_blocks)),
        "ffn": sum(config.block_ffn(b) for b in range(config.num_blocks)),
    }


def _select(graph, scores, config, quota):
    """Pick the groups to remove, lowest score first, ties to lowest index."""
    chosen = []
    head_left = {(b, h): w for b in range(config.num_blocks) for h, w in enumerate(config.block_head_dims(b))}
    ffn_left = {b: config.block_ffn(b) for b in range(config.num_blocks)}
    for fam in FAMILIES:
        want = quota.get(fam, 0)
        if want <= 0:
            continue
        idx = graph.family(fam)
        if fam == "residual" and want >= len(idx):
            raise PruningError(f"removing {want} of {len(idx)} residual channels would empty the model")
        order = sorted(idx, key=lambda i: (scores[i], i))
        taken = 0
        for i in order:
            if taken == want:
                break
            key = graph.groups[i].key
            if fam == "head":
                if head_left[key[1:3]] <= M.MIN_HEAD_DIM:
                    continue
                head_left[key[1:3]] -= 1
            elif fam == "ffn":
                if ffn_left[key[1]] == 1:
                    raise PruningError(f"pruning would empty the FFN of block {key[1]}")
                ffn_left[key[1]] -= 1
            chosen.append(i)
            taken += 1
    return chosen


def apply_removal(state, graph, indices):
    """New ModelState with the groups at ``indices`` removed."""
    if state.frozen:
        raise ContractError("cannot prune a model restored from packed BitLinear weights")
    cfg = state.config
    drop = {}
    for i in indices:
        for name, axis, idx in graph.groups[i].entries:
            drop.setdefault((name, axis), set()).add(idx)
    arrays = {}
    for name, p in state.params.items():
        a = p.data
        for axis in range(a.ndim):
            gone = drop.get((name, axis))
            if gone:
                a = np.delete(a, sorted(gone), axis=axis)
        arrays[name] = a.copy()
    running = {}
    for norm, bn in state.norms.items():
        gone = sorted(drop.get((f"{norm}.weight", 0), ()))
        running[f"{norm}.running_mean"] = np.delete(bn.running_mean, gone)
        running[f"{norm}.running_var"] = np.delete(bn.running_var, gone)

    removed = {fam: [graph.groups[i].key for i in indices if graph.groups[i].family == fam] for fam in FAMILIES}
    embed = cfg.embed_dim - len(removed["residual"])
    heads = [list(cfg.block_head_dims(b)) for b in range(cfg.num_blocks)]
    for _, b, h, _ in removed["head"]:
        heads[b][h] -= 1
    ffn = [cfg.block_ffn(b) for b in range(cfg.num_blocks)]
    for _, b, _ in removed["ffn"]:
        ffn[b] -= 1
    new_cfg = M.with_widths(cfg, embed, tuple(tuple(h) for h in heads), tuple(ffn))
    new_cfg.validate()
    return M.assemble(new_cfg, arrays, running)


def step_quota(config, ratio_step):
    """Channels to remove per family for one step of ``ratio_step``."""
    return {fam: int(round(ratio_step * n)) for fam, n in family_sizes(config).items()}


def prune_step(state, ratio_step=None, scores=None, graph=None, quota=None):
    """Remove the lowest-scoring groups of every family.

    Without an explicit ``quota`` each family loses ``round(ratio_step * size)``
    groups. Head groups already at the width floor are skipped. Returns
    ``(new_state, removed_indices)``.
    """
    if quota is None:
        if ratio_step is None or not 0 < ratio_step < 1:
            raise ContractError(f"ratio_step must be in (0, 1), got {ratio_step}")
        quota = step_quota(state.config, ratio_step)
    graph = graph or build_dep_graph(state)
    if scores is None:
        raise ContractError("prune_step needs importance scores")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(graph),):
        raise ContractError(f"expected {len(graph)} scores, got shape {scores.shape}")
    chosen = _select(graph, scores, state.config, quota)
    return apply_removal(state, graph, chosen), chosen


def schedule_targets(sizes, floors, ratio, steps):
    """Per-step target widths shrinking geometrically to ``(1 - ratio)``."""
    out = []
    for k in range(1, steps + 1):
        keep = (1 - ratio) ** (k / steps)
        out.append({f: max(floors[f], int(round(n * keep))) for f, n in sizes.items()})
    return out


def _floors(config):
    return {
        "residual": 1,
        "head": sum(
            min(w, M.MIN_HEAD_DIM) for b in range(config.num_blocks) for w in config.block_head_dims(b)
        ),
        "ffn": config.num_blocks,
    }


@dataclass
class PruneConfig:
    ratio: float = 0.5
    steps: int = 5
    ft_epochs: int = 5
    ft_lr: float = 3e-3
    batch_size: int = 256
    score_batches: int = SCORE_BATCHES
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class PruneReport:
    before: dict
    after: dict
    steps: list = field(default_factory=list)

    def change_pct(self):
        out = {}
        for k in ("flops", "params", "accuracy"):
            b, a = self.before[k], self.after[k]
            out[k] = 100.0 * (a - b) / b if b else 0.0
        return out

    def to_dict(self):
        return {"before": self.before, "after": self.after, "change_pct": self.change_pct(), "steps": self.steps}

    def table(self):
        ch = self.change_pct()
        rows = [
            ("FLOPs", f"{self.before['flops']:,}", f"{self.after['flops']:,}", f"{ch['flops']:+.2f}"),
            ("Params", f"{self.before['params']:,}", f"{self.after['params']:,}", f"{ch['params']:+.2f}"),
            ("Accuracy (%)", f"{100 * self.before['accuracy']:.2f}", f"{100 * self.after['accuracy']:.2f}", f"{ch['accuracy']:+.2f}"),
            ("Inference (us/jet)", f"{self.before['us_per_jet']:.1f}", f"{self.after['us_per_jet']:.1f}", ""),
        ]
        lines = [f"{'':20s}{'before':>12s}{'after':>12s}{'change %':>10s}"]
        lines += [f"{r[0]:20s}{r[1]:>12s}{r[2]:>12s}{r[3]:>10s}" for r in rows]
        return "\n".join(lines)


def summarize(state, data, convention=DEFAULT):
    t0 = time.perf_counter()
    ev = evaluate(state, data)
    elapsed = time.perf_counter() - t0
    cost = cost_report(state.config, convention=convention)
    return {
        "flops": cost.flops,
        "params": cost.params,
        "accuracy": ev.accuracy,
        "loss": ev.loss,
        "us_per_jet": 1e6 * elapsed / max(len(data), 1),
        "widths": {
            "embed_dim": state.config.embed_dim,
            "head_dims": [list(state.config.block_head_dims(b)) for b in range(state.config.num_blocks)],
            "ffn_dims": [state.config.block_ffn(b) for b in range(state.config.num_blocks)],
        },
    }


def prune_pipeline(state, train_data, val_data, cfg=None, convention=DEFAULT):
    """Iterate {score, prune, fine-tune} and report before/after cost.

    Returns ``(pruned_state, PruneReport)``; the report's FLOPs follow
    ``convention``.
    """
    cfg = cfg or PruneConfig()
    if not 0 < cfg.ratio < 1 or cfg.steps < 1:
        raise ContractError("ratio must be in (0, 1) and steps >= 1")
    report = PruneReport(before=summarize(state, val_data, convention), after={})
    targets = schedule_targets(family_sizes(state.config), _floors(state.config), cfg.ratio, cfg.steps)
    ft = TrainConfig(
        epochs=cfg.ft_epochs,
        lr=cfg.ft_lr,
        batch_size=cfg.batch_size,
        scheduler="cosine",
        early_stop_patience=max(cfg.ft_epochs, 1),
    )
    for k, target in enumerate(targets):
        rng = substream(cfg.seed, "prune-score", k)
        batches = list(train_data.batches(cfg.batch_size, rng))[: cfg.score_batches]
        graph = build_dep_graph(state)
        scores = taylor_scores(state, batches, graph)
        sizes = family_sizes(state.config)
        quota = {f: sizes[f] - target[f] for f in FAMILIES}
        state, chosen = prune_step(state, scores=scores, graph=graph, quota=quota)
        if cfg.ft_epochs > 0:
            state, _ = train(state, train_data, val_data, replace(ft, seed=cfg.seed + k))
        row = summarize(state, val_data, convention)
        row.update(step=k + 1, removed=len(chosen))
        report.steps.append(row)
        log.info("prune step %d: flops %d params %d acc %.4f", k + 1, row["flops"], row["params"], row["accuracy"])
    report.after = {k: v for k, v in report.steps[-1].items() if k not in ("step", "removed")}
    return state, report


def expected_reduction(config, ratio=0.5, steps=5, convention=DEFAULT):
    """Structural FLOP/param reduction (%) of the schedule, independent of scores."""
    sizes = family_sizes(config)
    final = schedule_targets(sizes, _floors(config), ratio, steps)[-1]
    # Which groups go does not change the cost: per-family widths alone set it.
    heads = [list(config.block_head_dims(b)) for b in range(config.num_blocks)]
    cut = sizes["head"] - final["head"]
    while cut > 0:
        b, h = max(((b, h) for b in range(len(heads)) for h in range(len(heads[b]))), key=lambda t: heads[t[0]][t[1]])
        if heads[b][h] <= M.MIN_HEAD_DIM:
            break
        heads[b][h] -= 1
        cut -= 1
    nb = config.num_blocks
    ffn = [final["ffn"] // nb + (1 if b < final["ffn"] % nb else 0) for b in range(nb)]
    pruned = M.with_widths(config, final["residual"], tuple(tuple(h) for h in heads), tuple(ffn))
    before, after = cost_report(config, convention=convention), cost_report(pruned, convention=convention)
    return {
        "flops_pct": 100.0 * (1 - after.flops / before.flops),
        "params_pct": 100.0 * (1 - after.params / before.params),
        "config": pruned,
    }


__all__ = [
    "DependencyGraph",
    "PruneConfig",
    "PruneGroup",
    "PruneReport",
    "apply_removal",
    "build_dep_graph",
    "expected_reduction",
    "prune_pipeline",
    "prune_step",
    "schedule_targets",
    "step_quota",
    "taylor_scores",
]
