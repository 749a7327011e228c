"""Meta-router: one transformer block over ``[V; Q; L]`` with two sigmoid heads.

``V`` and ``Q`` are the frozen host model's entry embeddings and ``L`` is a
set of learnable layer-slot embeddings, one per candidate layer. The block
attends without a causal mask. A token head scores each visual row and a
layer head scores each slot row; question rows are discarded.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from . import lvlm
from . import numerics as nx
from .lvlm import ModelConfig, PruneAction
from .numerics import SeededStream


@dataclass(frozen=True)
class RouterConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    window: tuple[int, ...] = (4, 5, 6, 7)
    init_std: float = 0.02

    @property
    def n_slots(self) -> int:
        return len(self.window)

    @classmethod
    def for_host(cls, cfg: ModelConfig, **kw) -> RouterConfig:
        """Slots cover the last half of the host's layers."""
        half = cfg.n_layers // 2
        return cls(d_model=cfg.d_model, n_heads=cfg.n_heads, d_ff=cfg.d_ff,
                   window=tuple(range(cfg.n_layers - half, cfg.n_layers)), **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> RouterConfig:
        d = json.loads(text)
        d["window"] = tuple(d["window"])
        return cls(**d)


@dataclass
class RouterScores:
    z_v: torch.Tensor  # [B, S] drop probabilities
    z_l: torch.Tensor  # [B, N]
    logit_v: torch.Tensor
    logit_l: torch.Tensor


def init_router(rcfg: RouterConfig, stream: SeededStream) -> dict[str, torch.Tensor]:
    d, std = rcfg.d_model, rcfg.init_std
    w = lvlm.init_block("block.", d, rcfg.d_ff, stream, std / math.sqrt(2), std)
    w["slots"] = nx.sample_gaussian(stream.derive("slots"), 0.0, std, rcfg.n_slots * d).reshape(rcfg.n_slots, d)
    for h in ("tok_head", "layer_head"):
        w[f"{h}.w1"] = nx.sample_gaussian(stream.derive(h), 0.0, std, d * d).reshape(d, d)
        w[f"{h}.b1"] = torch.zeros(d)
        # zero output layer: every score starts at exactly 0.5
        w[f"{h}.w2"] = torch.zeros(d, 1)
        w[f"{h}.b2"] = torch.zeros(1)
    return dict(sorted(w.items()))


def router_param_count(rcfg: RouterConfig) -> int:
    d, f = rcfg.d_model, rcfg.d_ff
    block = 4 * d * d + 4 * d + 2 * d * f + f + d
    heads = 2 * (d * d + d + d + 1)
    return block + rcfg.n_slots * d + heads


def _head(w, name: str, x: torch.Tensor) -> torch.Tensor:
    hid = nx.gelu(nx.matmul(x, w[f"{name}.w1"]) + w[f"{name}.b1"])
    return (nx.matmul(hid, w[f"{name}.w2"]) + w[f"{name}.b2"]).squeeze(-1)


def route(w, rcfg: RouterConfig, V: torch.Tensor, Q: torch.Tensor, q_mask: torch.Tensor | None = None) -> RouterScores:
    """Score visual tokens and layer slots.

    ``V: [B, S, d]``, ``Q: [B, C, d]``; ``q_mask`` marks real (non-padding)
    question rows.
    """
    if V.dim() == 2:
        V, Q = V[None], Q[None]
        q_mask = None if q_mask is None else q_mask[None]
    B, S, d = V.shape
    if d != rcfg.d_model or Q.shape[-1] != rcfg.d_model:
        raise nx.ContractError(f"router width {rcfg.d_model} != input widths {d}, {Q.shape[-1]}")
    C, N = Q.shape[1], rcfg.n_slots
    x = torch.cat([V, Q, w["slots"].expand(B, N, d)], dim=1)
    mask = None
    if q_mask is not None:
        mask = torch.cat([torch.ones(B, S, dtype=torch.bool), q_mask.bool(), torch.ones(B, N, dtype=torch.bool)], dim=1)
    z, _ = lvlm.block(w, "block.", rcfg.n_heads, x, causal=False, key_mask=mask)
    lv = _head(w, "tok_head", z[:, :S])
    ll = _head(w, "layer_head", z[:, S + C:])
    return RouterScores(nx.sigmoid(lv), nx.sigmoid(ll), lv, ll)


def host_inputs(host_w, cfg: ModelConfig, samples: list[lvlm.SyntheticSample], batch_size: int = 256):
    """Frozen entry embeddings ``(V [N,S,d], Q [N,C,d], q_mask [N,C])``."""
    vocab = lvlm.Vocab(cfg)
    S = cfg.n_visual
    C = max(len(s.question) for s in samples)
    Vs, Qs, Ms = [], [], []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            batch = lvlm.make_batch(chunk, vocab)
            h = lvlm.embed(host_w, cfg, batch.grids, batch.text)
            q = torch.zeros(len(chunk), C, h.shape[-1])
            q[:, : h.shape[1] - S] = h[:, S:]
            m = torch.zeros(len(chunk), C, dtype=torch.bool)
            for b, s in enumerate(chunk):
                m[b, : len(s.question)] = True
            Vs.append(h[:, :S])
            Qs.append(q)
            Ms.append(m)
    return torch.cat(Vs), torch.cat(Qs), torch.cat(Ms)


def _top(values: torch.Tensor, k: int) -> list[int]:
    order = sorted(range(len(values)), key=lambda i: (-float(values[i]), i))
    return sorted(order[:k])


def select_action(scores: RouterScores, K: int, M: int, drop_at_layer: int, window: tuple[int, ...],
                  index: int = 0) -> PruneAction:
    """Drop the ``M`` highest-``z_v`` tokens and the ``K`` highest-``z_l`` slots.

    Ranking uses the pre-sigmoid logits, which order identically to the
    probabilities but do not saturate in float32.
    """
    lv, ll = scores.logit_v, scores.logit_l
    if lv.dim() == 2:
        lv, ll = lv[index], ll[index]
    if M > len(lv) or K > len(ll):
        raise ValueError(f"budget (K={K}, M={M}) exceeds (N={len(ll)}, S={len(lv)})")
    lv, ll = lv.detach(), ll.detach()
    return PruneAction(tuple(window[i] for i in _top(ll, K)), tuple(_top(lv, M)), drop_at_layer)


def action_masks(actions: list[PruneAction], S: int, window: tuple[int, ...]):
    slot_of = {layer: i for i, layer in enumerate(window)}
    tv = torch.zeros(len(actions), S)
    tl = torch.zeros(len(actions), len(window))
    for b, a in enumerate(actions):
        if a.dropped_tokens:
            tv[b, list(a.dropped_tokens)] = 1.0
        for layer in a.dropped_layers:
            if layer not in slot_of:
                raise nx.ContractError(f"layer {layer} is not a router slot {window}")
            tl[b, slot_of[layer]] = 1.0
    return tv, tl


def action_log_likelihood(scores: RouterScores, actions: PruneAction | list[PruneAction],
                          window: tuple[int, ...]) -> torch.Tensor:
    """Factorised Bernoulli log-likelihood of each action, one value per row."""
    if isinstance(actions, PruneAction):
        actions = [actions]
    z_v, z_l = scores.z_v, scores.z_l
    if z_v.dim() == 1:
        z_v, z_l = z_v[None], z_l[None]
    tv, tl = action_masks(actions, z_v.shape[1], window)
    ll_v = tv * nx.safe_log(z_v) + (1 - tv) * nx.safe_log(1 - z_v)
    ll_l = tl * nx.safe_log(z_l) + (1 - tl) * nx.safe_log(1 - z_l)
    return ll_v.sum(dim=1) + ll_l.sum(dim=1)


def save_router(w, rcfg: RouterConfig, path: str | Path) -> None:
    path = Path(path)
    nx.save_checkpoint(w, path)
    path.with_suffix(".config.json").write_text(rcfg.to_json())


def load_router(path: str | Path):
    path = Path(path)
    w, _ = nx.load_checkpoint(path)
    return w, RouterConfig.from_json(path.with_suffix(".config.json").read_text())
