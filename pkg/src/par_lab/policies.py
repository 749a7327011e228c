"""Rule-based token and layer selection.

Token scores follow the FastV recipe: the attention a visual token receives
from the text (question) queries at one layer, averaged over heads and query
rows. Layer scores are the mean cosine similarity between a block's input
and output states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import lvlm
from . import numerics as nx
from .lvlm import ModelConfig, PruneAction, SyntheticSample, TraceBundle
from .numerics import SeededStream

DEFAULT_RANK_LAYER = 2


@dataclass
class TokenScoreVector:
    scores: np.ndarray  # float64, one per active visual token
    positions: list[int]  # original visual-token index of each score
    layer: int


@dataclass
class LayerScoreVector:
    scores: list[float]  # mean over all active rows
    last_scores: list[float] = field(default_factory=list)  # answer-slot row only
    zero_norm: int = 0


def _rank_drop(scores: np.ndarray, positions: list[int], M: int) -> list[int]:
    """The ``M`` lowest-scored positions; ties drop the higher index first."""
    if M > len(positions):
        raise ValueError(f"cannot drop {M} of {len(positions)} visual tokens")
    order = sorted(range(len(positions)), key=lambda i: (scores[i], -positions[i]))
    return sorted(positions[i] for i in order[:M])


def token_scores(trace: TraceBundle, rank_layer: int) -> TokenScoreVector:
    att = trace.attention[rank_layer]
    if att is None:
        raise ValueError(f"no attention captured at layer {rank_layer} (skipped?)")
    pos = trace.positions[rank_layer]
    vis = [i for i, p in enumerate(pos) if p < trace.n_visual]
    txt = [i for i, p in enumerate(pos) if p >= trace.n_visual]
    a = att.detach().to(torch.float64)[:, txt][:, :, vis]
    return TokenScoreVector(a.mean(dim=(0, 1)).numpy(), [pos[i] for i in vis], rank_layer)


def attention_rank_tokens(trace: TraceBundle, rank_layer: int, M: int, drop_at_layer: int | None = None) -> PruneAction:
    if M > trace.n_visual:
        raise ValueError(f"M={M} exceeds the {trace.n_visual} visual tokens")
    ts = token_scores(trace, rank_layer)
    return PruneAction((), _rank_drop(ts.scores, ts.positions, M), rank_layer if drop_at_layer is None else drop_at_layer)


def perturb(scores: np.ndarray, noise_std: float, stream: SeededStream) -> np.ndarray:
    if noise_std == 0:
        return scores
    return scores + nx.sample_gaussian(stream, 0.0, noise_std, len(scores)).numpy().astype(np.float64)


def perturbed_rank_tokens(trace: TraceBundle, rank_layer: int, M: int, noise_std: float, stream: SeededStream,
                          drop_at_layer: int | None = None) -> PruneAction:
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if M > trace.n_visual:
        raise ValueError(f"M={M} exceeds the {trace.n_visual} visual tokens")
    ts = token_scores(trace, rank_layer)
    dropped = _rank_drop(perturb(ts.scores, noise_std, stream), ts.positions, M)
    return PruneAction((), dropped, rank_layer if drop_at_layer is None else drop_at_layer)


def random_tokens(S: int, M: int, stream: SeededStream, drop_at_layer: int = 0) -> PruneAction:
    if M > S:
        raise ValueError(f"M={M} exceeds S={S}")
    return PruneAction((), stream.choice(S, M), drop_at_layer)


def batch_token_scores(w, cfg: ModelConfig, samples: list[SyntheticSample], rank_layer: int = DEFAULT_RANK_LAYER,
                       batch_size: int = 128) -> np.ndarray:
    """Dense-forward FastV scores for many samples: ``[N, S]`` float64.

    Only the real question rows act as queries; padding rows are ignored.
    """
    vocab = lvlm.Vocab(cfg)
    S = cfg.n_visual
    out = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            batch = lvlm.make_batch(chunk, vocab)
            _, _, tr = lvlm.run_batch(w, cfg, batch, capture_attn_layers={rank_layer})
            att = tr["attn"][rank_layer].to(torch.float64)  # [B, H, n, n]
            for b, s in enumerate(chunk):
                q = len(s.question)
                out.append(att[b, :, S:S + q, :S].mean(dim=(0, 1)).numpy())
    return np.stack(out)


def rank_drop_from_scores(scores: np.ndarray, M: int, drop_at_layer: int) -> PruneAction:
    return PruneAction((), _rank_drop(scores, list(range(len(scores))), M), drop_at_layer)


# --- layer scoring ----------------------------------------------------------

def row_cosine(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Cosine along the last axis, plus a mask of rows where both norms are nonzero."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    ok = (na > 0) & (nb > 0)
    cos = ((a * b).sum(-1) / (na * nb).clamp_min(1e-300)).clamp(-1.0, 1.0)
    return torch.where(ok, cos, torch.zeros_like(cos)), ok


def cosine_layer_scores(w, cfg: ModelConfig, samples: list[SyntheticSample],
                        action: PruneAction | list[PruneAction] | None = None, batch_size: int = 128) -> LayerScoreVector:
    """Mean cos(input, output) per layer, under a shared or per-sample action."""
    vocab = lvlm.Vocab(cfg)
    S = cfg.n_visual
    if action is None or isinstance(action, PruneAction):
        actions = [action or lvlm.EMPTY] * len(samples)
    else:
        actions = list(action)
    tot = np.zeros(cfg.n_layers)
    cnt = np.zeros(cfg.n_layers)
    last_tot = np.zeros(cfg.n_layers)
    last_cnt = np.zeros(cfg.n_layers)
    zero = 0
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            batch = lvlm.make_batch(chunk, vocab)
            _, _, tr = lvlm.run_batch(w, cfg, batch, actions[lo:lo + batch_size], capture=True)
            limit = (S + batch.text_len)[:, None]
            for i in range(cfg.n_layers):
                hin = tr["hidden"][i].to(torch.float64)
                hout = tr["out"][i].to(torch.float64)
                pos = tr["pos"][i]
                valid = pos < limit
                cos, nonzero = row_cosine(hin, hout)
                ok = valid & nonzero
                zero += int((valid & ~ok).sum())
                tot[i] += float(cos[ok].sum())
                cnt[i] += float(ok.sum())
                slot = pos == (limit - 1)
                sel = slot & ok
                last_tot[i] += float(cos[sel].sum())
                last_cnt[i] += float(sel.sum())
    scores = [float(t / c) if c else 0.0 for t, c in zip(tot, cnt)]
    last = [float(t / c) if c else 0.0 for t, c in zip(last_tot, last_cnt)]
    return LayerScoreVector(scores, last, zero)


def select_skip_layers(scores: LayerScoreVector | list[float], K: int, mode: str = "top-k-free",
                       window: range | list[int] | None = None) -> PruneAction:
    vals = scores.scores if isinstance(scores, LayerScoreVector) else list(scores)
    window = list(range(len(vals))) if window is None else list(window)
    if K > len(window):
        raise ValueError(f"K={K} exceeds window of {len(window)} layers")
    if K == 0:
        return PruneAction()
    if mode == "adjacent-window":
        best, best_mean = None, -np.inf
        for start in range(len(window) - K + 1):
            run = window[start:start + K]
            if run[-1] - run[0] != K - 1:
                continue
            m = float(np.mean([vals[i] for i in run]))
            if m > best_mean:
                best, best_mean = run, m
        if best is None:
            raise ValueError("window has no contiguous run of that length")
        return PruneAction(tuple(best))
    if mode == "top-k-free":
        order = sorted(window, key=lambda i: (-vals[i], i))
        return PruneAction(tuple(order[:K]))
    raise ValueError(f"unknown mode {mode!r}")
