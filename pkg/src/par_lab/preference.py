"""Self-supervised preference pairs from KL-scored pruning actions.

For each unlabeled sample, several same-budget actions are drawn: ``K``
layers sampled uniformly from the candidate window and ``M`` tokens chosen
by noise-perturbed attention ranking. Each action is scored by
``KL(P_orig || P_pruned)`` at the answer slot. The lowest-KL action becomes
the positive and the highest-KL action the negative, provided their gap
clears a margin.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import lvlm, policies
from .lvlm import ModelConfig, PruneAction, SyntheticSample
from .numerics import LOG_FLOOR, SeededStream

log = logging.getLogger(__name__)


class PreferenceDataError(RuntimeError):
    pass


@dataclass
class ScoredAction:
    action: PruneAction
    kl: float


@dataclass
class PreferencePair:
    sample_id: int
    positive: PruneAction
    negative: PruneAction
    kl_pos: float
    kl_neg: float

    def to_record(self) -> dict:
        return {"sample_id": self.sample_id, "pos": self.positive.to_dict(), "neg": self.negative.to_dict(),
                "kl_pos": self.kl_pos, "kl_neg": self.kl_neg}

    @classmethod
    def from_record(cls, r: dict) -> PreferencePair:
        return cls(r["sample_id"], PruneAction.from_dict(r["pos"]), PruneAction.from_dict(r["neg"]),
                   r["kl_pos"], r["kl_neg"])


@dataclass
class PrefParams:
    K: int = 2
    M: int = 48
    n_actions: int = 5
    # 10 swamps attention scores (which sum to 1 over the visual tokens), so
    # token sets are close to uniform draws; None: std of the scores instead
    noise_std: float | None = 10.0
    margin: float = 0.01
    rank_layer: int = policies.DEFAULT_RANK_LAYER
    drop_at_layer: int = policies.DEFAULT_RANK_LAYER
    window: tuple[int, ...] = (4, 5, 6, 7)
    max_tries: int = 20


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """``KL(p || q)`` along the last axis, both sides floored at 1e-12 inside the log."""
    p = p.to(torch.float64)
    q = q.to(torch.float64)
    terms = p * (torch.log(p.clamp_min(LOG_FLOOR)) - torch.log(q.clamp_min(LOG_FLOOR)))
    return terms.sum(dim=-1).clamp_min(0.0)


def kl_to_original(w, cfg: ModelConfig, sample: SyntheticSample, action: PruneAction) -> float:
    p = lvlm.answer_distribution(w, cfg, sample)
    q = lvlm.answer_distribution(w, cfg, sample, action)
    return float(kl_divergence(p, q))


def draw_actions(scores: np.ndarray, params: PrefParams, stream: SeededStream) -> tuple[list[PruneAction], bool]:
    """``n_actions`` distinct actions from one sample's token scores.

    Returns ``(actions, short)``; ``short`` is set when distinctness could
    not be reached and fewer actions came back.
    """
    S = len(scores)
    if params.K > len(params.window):
        raise ValueError(f"K={params.K} exceeds window of {len(params.window)}")
    if params.M > S:
        raise ValueError(f"M={params.M} exceeds S={S}")
    actions: list[PruneAction] = []
    seen = set()
    for k in range(params.n_actions * params.max_tries):
        if len(actions) == params.n_actions:
            break
        ls = stream.derive(f"layers/{k}")
        layers = tuple(params.window[i] for i in ls.choice(len(params.window), params.K))
        noisy = policies.perturb(scores, params.noise_std, stream.derive(f"noise/{k}"))
        tok = policies.rank_drop_from_scores(noisy, params.M, params.drop_at_layer)
        a = PruneAction(layers, tok.dropped_tokens, params.drop_at_layer)
        if a not in seen:
            seen.add(a)
            actions.append(a)
    return actions, len(actions) < params.n_actions


def sample_actions(w, cfg: ModelConfig, sample: SyntheticSample, params: PrefParams,
                   stream: SeededStream) -> tuple[list[PruneAction], bool]:
    scores = policies.batch_token_scores(w, cfg, [sample], params.rank_layer)[0]
    if params.noise_std is None:
        params = dataclasses.replace(params, noise_std=float(scores.std()))
    return draw_actions(scores, params, stream)


def label_pairs(scored: list[ScoredAction], margin: float = 0.01, sample_id: int = -1) -> PreferencePair | None:
    if len(scored) < 2:
        raise ValueError("need at least two scored actions")
    kls = [s.kl for s in scored]
    lo = int(np.argmin(kls))
    hi = int(np.argmax(kls))
    gap = kls[hi] - kls[lo]
    if gap <= 0 or gap < margin:
        return None
    return PreferencePair(sample_id, scored[lo].action, scored[hi].action, kls[lo], kls[hi])


def score_actions(w, cfg: ModelConfig, samples: list[SyntheticSample], per_sample: list[list[PruneAction]],
                  batch_size: int = 256) -> list[list[float]]:
    """KL of every action to the sample's unpruned answer distribution."""
    p_orig = lvlm.answer_probs(w, cfg, samples, batch_size=batch_size)
    out = [[0.0] * len(a) for a in per_sample]
    width = max(len(a) for a in per_sample)
    for k in range(width):
        idx = [i for i, a in enumerate(per_sample) if len(a) > k]
        # one batch per distinct (M, drop_at_layer); all share it in practice
        groups: dict[tuple, list[int]] = {}
        for i in idx:
            a = per_sample[i][k]
            groups.setdefault((a.M, a.drop_at_layer if a.M else -1), []).append(i)
        for members in groups.values():
            q = lvlm.answer_probs(w, cfg, [samples[i] for i in members], [per_sample[i][k] for i in members],
                                  batch_size=batch_size)
            kl = kl_divergence(p_orig[members], q)
            for j, i in enumerate(members):
                out[i][k] = float(kl[j])
    return out


def build_pairs(w, cfg: ModelConfig, samples: list[SyntheticSample], params: PrefParams, stream: SeededStream):
    """Returns ``(pairs, stats)`` in sample order."""
    scores = policies.batch_token_scores(w, cfg, samples, params.rank_layer)
    if params.noise_std is None:
        params = dataclasses.replace(params, noise_std=float(scores.std()))
    per_sample, short = [], 0
    for s, sc in zip(samples, scores):
        acts, was_short = draw_actions(sc, params, stream.derive(f"sample/{s.sample_id}"))
        per_sample.append(acts)
        short += was_short
    kls = score_actions(w, cfg, samples, per_sample)
    pairs, constant = [], 0
    for s, acts, kl in zip(samples, per_sample, kls):
        if len(acts) < 2:
            constant += 1
            continue
        pair = label_pairs([ScoredAction(a, k) for a, k in zip(acts, kl)], params.margin, s.sample_id)
        if pair is None:
            constant += 1
        else:
            pairs.append(pair)
    distinct = len({a for acts in per_sample for a in acts})
    gaps = [p.kl_neg - p.kl_pos for p in pairs]
    stats = {
        "samples": len(samples),
        "pairs": len(pairs),
        "yield": len(pairs) / len(samples),
        "no_pair": constant,
        "short_action_sets": short,
        "mean_kl_gap": float(np.mean(gaps)) if gaps else 0.0,
        "mean_kl_pos": float(np.mean([p.kl_pos for p in pairs])) if pairs else 0.0,
        "mean_kl_neg": float(np.mean([p.kl_neg for p in pairs])) if pairs else 0.0,
        "distinct_actions": distinct,
        "noise_std": params.noise_std,
    }
    return pairs, stats


def build_dataset(w, cfg: ModelConfig, samples: list[SyntheticSample], params: PrefParams, seed: int,
                  out_path: str | Path, provenance: dict | None = None) -> dict:
    """Write the JSONL pair file (header line first) plus ``<stem>.summary.json``."""
    pairs, stats = build_pairs(w, cfg, samples, params, SeededStream(seed).derive("prefs"))
    if not pairs:
        raise PreferenceDataError("no preference pairs were emitted; the data is unusable")
    out_path = Path(out_path)
    header = {"header": {"seed": seed, "K": params.K, "M": params.M, "n_actions": params.n_actions,
                         "noise_std": stats["noise_std"], "margin": params.margin, "rank_layer": params.rank_layer,
                         "drop_at_layer": params.drop_at_layer, "window": list(params.window),
                         **(provenance or {})}}
    lines = [json.dumps(header, sort_keys=True)] + [json.dumps(p.to_record(), sort_keys=True) for p in pairs]
    out_path.write_text("\n".join(lines) + "\n")
    out_path.with_suffix(".summary.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    log.info("wrote %d pairs (yield %.3f) to %s", stats["pairs"], stats["yield"], out_path)
    return stats


def load_pairs(path: str | Path) -> tuple[dict, list[PreferencePair]]:
    header, pairs = {}, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "header" in rec:
            header = rec["header"]
        else:
            pairs.append(PreferencePair.from_record(rec))
    return header, pairs
