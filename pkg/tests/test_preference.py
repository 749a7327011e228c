import json
import math

import numpy as np
import pytest
import torch

from par_lab import lvlm, preference
from par_lab import numerics as nx
from par_lab.lvlm import PruneAction
from par_lab.preference import PrefParams, ScoredAction

from conftest import TINY

TINY_PARAMS = PrefParams(K=1, M=6, n_actions=5, noise_std=None, margin=0.0, rank_layer=1, drop_at_layer=1,
                         window=(1, 2))


def test_kl_closed_forms():
    p = torch.tensor([1.0, 0.0], dtype=torch.float64)
    q = torch.tensor([0.5, 0.5], dtype=torch.float64)
    assert preference.kl_divergence(p, q).item() == pytest.approx(math.log(2), abs=1e-12)
    swapped = preference.kl_divergence(q, p).item()
    assert swapped == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.5 / 1e-12), rel=1e-9)
    assert abs(swapped - math.log(2)) > 1


def test_kl_empty_action_is_zero(tiny_weights, tiny_samples):
    for s in tiny_samples[:5]:
        assert preference.kl_to_original(tiny_weights, TINY, s, PruneAction()) == 0.0


def test_label_pairs_examples():
    acts = [PruneAction((), (i,)) for i in range(5)]
    scored = [ScoredAction(a, k) for a, k in zip(acts, [0.5, 0.1, 0.9, 0.3, 0.2])]
    pair = preference.label_pairs(scored, 0.01, sample_id=3)
    assert pair.positive == acts[1] and pair.negative == acts[2] and pair.sample_id == 3
    flat = [ScoredAction(a, 0.2) for a in acts]
    assert preference.label_pairs(flat, 0.01) is None
    assert preference.label_pairs(flat, 0.0) is None
    with pytest.raises(ValueError):
        preference.label_pairs(flat[:1])


def test_draw_actions_layer_sets_are_window_subsets():
    params = PrefParams(K=2, M=10, n_actions=5, noise_std=0.1, window=(4, 5, 6, 7), drop_at_layer=0)
    scores = np.linspace(0, 1, 64)
    seen = set()
    for k in range(200):
        acts, short = preference.draw_actions(scores, params, nx.SeededStream(k))
        assert not short and len(set(acts)) == 5
        for a in acts:
            assert len(a.dropped_layers) == 2 and set(a.dropped_layers) <= {4, 5, 6, 7}
            assert a.M == 10
            seen.add(a.dropped_layers)
    assert len(seen) == 6  # all C(4, 2) subsets occur


def test_draw_actions_k_zero_and_short_flag():
    scores = np.linspace(0, 1, 8)
    acts, _ = preference.draw_actions(scores, PrefParams(K=0, M=2, noise_std=0.5, window=(0, 1)), nx.SeededStream(0))
    assert all(a.dropped_layers == () for a in acts)
    acts, short = preference.draw_actions(scores, PrefParams(K=0, M=0, noise_std=0.5, window=(0, 1)),
                                          nx.SeededStream(0))
    assert short and len(acts) == 1
    with pytest.raises(ValueError):
        preference.draw_actions(scores, PrefParams(K=3, window=(0, 1)), nx.SeededStream(0))


def test_sample_actions_deterministic(tiny_weights, tiny_samples):
    a = preference.sample_actions(tiny_weights, TINY, tiny_samples[0], TINY_PARAMS, nx.SeededStream(5))
    b = preference.sample_actions(tiny_weights, TINY, tiny_samples[0], TINY_PARAMS, nx.SeededStream(5))
    assert a == b


def test_margin_zero_pair_count_matches_enumeration(tiny_weights, tiny_samples):
    pairs, stats = preference.build_pairs(tiny_weights, TINY, tiny_samples, TINY_PARAMS, nx.SeededStream(2))
    # independent enumeration: redraw the same actions and score each one alone
    scores = preference.policies.batch_token_scores(tiny_weights, TINY, tiny_samples, TINY_PARAMS.rank_layer)
    params = PrefParams(**{**TINY_PARAMS.__dict__, "noise_std": float(scores.std())})
    non_constant = 0
    for s, sc in zip(tiny_samples, scores):
        acts, _ = preference.draw_actions(sc, params, nx.SeededStream(2).derive(f"sample/{s.sample_id}"))
        kls = [preference.kl_to_original(tiny_weights, TINY, s, a) for a in acts]
        non_constant += len(acts) >= 2 and max(kls) > min(kls)
    assert len(pairs) == stats["pairs"] == non_constant


def test_pair_invariants_and_file_determinism(tmp_path, tiny_weights, tiny_samples):
    params = PrefParams(**{**TINY_PARAMS.__dict__, "margin": 1e-4})
    s1 = preference.build_dataset(tiny_weights, TINY, tiny_samples, params, 7, tmp_path / "a.jsonl", {"x": 1})
    preference.build_dataset(tiny_weights, TINY, tiny_samples, params, 7, tmp_path / "b.jsonl", {"x": 1})
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    header, pairs = preference.load_pairs(tmp_path / "a.jsonl")
    assert header["x"] == 1 and header["noise_std"] > 0
    assert len(pairs) == s1["pairs"] > 0
    summary = json.loads((tmp_path / "a.summary.json").read_text())
    assert {"yield", "mean_kl_gap", "distinct_actions"} <= set(summary)
    for p in pairs:
        assert p.kl_pos + params.margin <= p.kl_neg
        assert (p.positive.K, p.positive.M) == (p.negative.K, p.negative.M) == (params.K, params.M)


def test_zero_pairs_is_hard_error(tmp_path, tiny_weights, tiny_samples):
    params = PrefParams(**{**TINY_PARAMS.__dict__, "margin": 1e9})
    with pytest.raises(preference.PreferenceDataError):
        preference.build_dataset(tiny_weights, TINY, tiny_samples, params, 0, tmp_path / "z.jsonl")


def test_scored_kls_match_single_sample_path(tiny_weights, tiny_samples):
    acts = [[PruneAction((1,), (0, 2), 1), PruneAction((2,), (3, 4), 1)] for _ in tiny_samples[:4]]
    kls = preference.score_actions(tiny_weights, TINY, tiny_samples[:4], acts)
    for s, row, a in zip(tiny_samples, kls, acts):
        for k, act in zip(row, a):
            assert k == pytest.approx(preference.kl_to_original(tiny_weights, TINY, s, act), abs=1e-6)
            assert k >= 0
