from dataclasses import replace

import numpy as np
import pytest

from jetforge import cost as C
from jetforge import hpo
from jetforge import model as M

TINY = M.ModelConfig(4, 8, 2)


def test_linear_layer_arithmetic():
    assert C.linear_flops(9, 3, 8) == 432
    assert C.linear_flops(9, 3, 8, C.COMPACT) == 216


def test_embed_entry():
    rep = C.cost_report(TINY)
    name, params, flops = rep.breakdown[0]
    assert (name, params, flops) == ("embed", 3 * 8 + 8, 8 * 2 * 3 * 8)


def test_totals_equal_breakdown():
    rep = C.cost_report(TINY)
    assert rep.params == sum(p for _, p, _ in rep.breakdown)
    assert rep.flops == sum(f for _, _, f in rep.breakdown)


def test_params_match_model():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        cfg = M.ModelConfig(int(rng.integers(1, 5)), 8 * int(rng.integers(1, 4)), 2)
        assert C.count_params(cfg) == C.cost_report(cfg).params == M.build(cfg).num_params()


def test_zero_blocks_is_embedding_plus_classifier():
    cfg = replace(TINY, num_blocks=0)
    rep = C.cost_report(cfg)
    names = {n for n, _, _ in rep.breakdown}
    assert names == {"embed", "cls_token", "norm_final", "head", "log_softmax"}
    want = sum(f for n, _, f in C.cost_report(TINY).breakdown if not n.startswith("blocks."))
    assert rep.flops == want


def test_monotone_in_depth_and_width():
    for n in range(1, 6):
        assert C.count_flops(M.ModelConfig(n + 1, 8, 2)) > C.count_flops(M.ModelConfig(n, 8, 2))
    for d in (8, 16, 32, 64):
        assert C.count_flops(M.ModelConfig(2, 2 * d, 2)) > C.count_flops(M.ModelConfig(2, d, 2))


def test_half_ffn_halves_ffn_entries():
    full = dict((n, f) for n, _, f in C.cost_report(TINY).breakdown)
    half_cfg = M.with_widths(TINY, ffn_dims=(8, 8, 8, 8))
    half = dict((n, f) for n, _, f in C.cost_report(half_cfg).breakdown)
    for b in range(4):
        for layer in ("fc1", "fc2", "relu"):
            key = f"blocks.{b}.ffn.{layer}"
            assert half[key] * 2 == full[key]


@pytest.mark.parametrize("row", range(8))
def test_compact_convention_exact(row):
    fl, _, n, d, h, _ = hpo.REFERENCE_ROWS[row]
    assert C.count_flops(M.ModelConfig(n, d, h), convention=C.COMPACT) == fl


@pytest.mark.parametrize("row", range(8, 13))
def test_compact_convention_close_for_wide_models(row):
    fl, _, n, d, h, _ = hpo.REFERENCE_ROWS[row]
    got = C.count_flops(M.ModelConfig(n, d, h), convention=C.COMPACT)
    assert 0 <= fl - got <= 4 * n


def test_compact_ordering_preserved():
    for conv in (C.DEFAULT, C.COMPACT):
        flops = [C.count_flops(M.ModelConfig(n, d, h), convention=conv) for _, _, n, d, h, _ in hpo.REFERENCE_ROWS]
        assert flops == sorted(flops)


def test_tiny_default_convention():
    assert C.count_flops(TINY) == 53281
    assert C.count_flops(TINY, convention=C.COMPACT) == 26168


def test_table_renders_total():
    assert "total" in C.cost_report(TINY).table().splitlines()[-1]
