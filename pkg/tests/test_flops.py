from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from par_lab.flops import CostConfig, layer_flops, pipeline_flops, table_row
from par_lab.lvlm import PruneAction

TOY = CostConfig(n_layers=8, d_model=64, d_ff=256, S=64, C=16)


def hand_sum(n_layers, d, f, S, C, skipped, M, drop_at):
    """Brute-force oracle: spell out every term of every layer."""
    total = 0
    for layer in range(n_layers):
        if layer in skipped:
            continue
        n = S + C - (M if layer >= drop_at else 0)
        q_k_v_o = 4 * (n * d * d)
        scores_and_mix = n * n * d + n * n * d
        ffn = n * d * f + n * f * d
        total += q_k_v_o + scores_and_mix + ffn
    return total


def test_layer_flops_hand_example():
    assert layer_flops(2, 4, 8) == 288
    assert layer_flops(0, 4, 8) == 0


def test_d_ff_linearity():
    n, d, f = 7, 12, 30
    assert layer_flops(n, d, 2 * f) - layer_flops(n, d, f) == 2 * n * d * f


def test_no_overflow():
    assert layer_flops(10**6, 10**5, 10**6) == 4 * 10**16 + 2 * 10**17 + 2 * 10**17


def test_layer_flops_rejects_negative():
    with pytest.raises(ValueError):
        layer_flops(-1, 4, 8)


def test_empty_action_ratio_is_exactly_one():
    total, ratio = pipeline_flops(TOY, PruneAction())
    assert ratio == 1 and isinstance(ratio, Fraction)
    assert total == 8 * layer_flops(80, 64, 256)


def test_all_layers_skipped_is_zero():
    assert pipeline_flops(TOY, PruneAction(tuple(range(8))))[0] == 0


def test_toy_action_matches_hand_sum():
    a = PruneAction((5, 7), tuple(range(48)), 0)
    total, ratio = pipeline_flops(TOY, a)
    assert total == hand_sum(8, 64, 256, 64, 16, {5, 7}, 48, 0)
    assert ratio == Fraction(total, hand_sum(8, 64, 256, 64, 16, set(), 0, 0))
    row = table_row(TOY, a)
    assert (row["T_kept"], row["L_kept"], row["total_flops"]) == (16, 6, total)


def test_invalid_action_rejected():
    with pytest.raises(ValueError):
        pipeline_flops(TOY, PruneAction((8,)))
    with pytest.raises(ValueError):
        pipeline_flops(TOY, PruneAction((), tuple(range(65))))
    with pytest.raises(ValueError):
        CostConfig(0, 1, 1, 1, 1)


@st.composite
def configs(draw):
    n_layers = draw(st.integers(1, 12))
    cfg = CostConfig(n_layers, draw(st.integers(1, 128)), draw(st.integers(1, 512)), draw(st.integers(1, 96)),
                     draw(st.integers(1, 32)))
    M = draw(st.integers(0, cfg.S - 1))
    layers = draw(st.lists(st.integers(0, n_layers - 1), unique=True, max_size=n_layers - 1))
    drop_at = draw(st.integers(0, n_layers - 1))
    return cfg, M, tuple(sorted(layers)), drop_at


@settings(max_examples=500, deadline=None)
@given(configs())
def test_ratio_monotone_in_tokens_and_layers(case):
    cfg, M, layers, drop_at = case
    _, base = pipeline_flops(cfg, PruneAction(layers, tuple(range(M)), drop_at))
    _, more_tokens = pipeline_flops(cfg, PruneAction(layers, tuple(range(M + 1)), drop_at))
    assert more_tokens <= base <= 1
    free = [i for i in range(cfg.n_layers) if i not in layers]
    _, more_layers = pipeline_flops(cfg, PruneAction(tuple(sorted(layers + (free[0],))), tuple(range(M)), drop_at))
    assert more_layers <= base


@settings(max_examples=100, deadline=None)
@given(configs(), st.data())
def test_skipping_any_post_drop_layer_costs_the_same(case, data):
    cfg, M, _, drop_at = case
    after = list(range(drop_at, cfg.n_layers))
    i, j = data.draw(st.sampled_from(after)), data.draw(st.sampled_from(after))
    toks = tuple(range(M))
    assert pipeline_flops(cfg, PruneAction((i,), toks, drop_at)) == pipeline_flops(cfg, PruneAction((j,), toks, drop_at))
