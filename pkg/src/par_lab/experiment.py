"""End-to-end pipeline pieces shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import dpo, lvlm, policies, preference
from . import router as rt
from .config import RunConfig
from .flops import CostConfig, pipeline_flops
from .lvlm import ModelConfig, PruneAction, SyntheticSample
from .numerics import SeededStream

log = logging.getLogger(__name__)


@dataclass
class Datasets:
    train: list[SyntheticSample]
    eval: list[SyntheticSample]
    pref: list[SyntheticSample]
    router_eval: list[SyntheticSample]


def make_datasets(rc: RunConfig) -> Datasets:
    """Train set plus three held-out pools, none overlapping the train set."""
    cfg = rc.model
    root = SeededStream(rc.seeds.data)
    train = lvlm.gen_synthetic_dataset(cfg, rc.data.n_train, root.derive("train"))
    seen = {lvlm.sample_key(s) for s in train}
    pools = {}
    next_id = 10**6
    for name, n in (("eval", rc.data.n_eval), ("pref", rc.data.n_pref), ("router_eval", rc.data.n_router_eval)):
        out: list[SyntheticSample] = []
        stream = root.derive(name)
        while len(out) < n:
            for s in lvlm.gen_synthetic_dataset(cfg, n - len(out), stream, start_id=next_id):
                if lvlm.sample_key(s) not in seen:
                    seen.add(lvlm.sample_key(s))
                    out.append(s)
            next_id += n
        pools[name] = out
    return Datasets(train, pools["eval"], pools["pref"], pools["router_eval"])


def pretrain_host(rc: RunConfig, data: Datasets, metrics_path=None):
    return lvlm.pretrain(rc.model, data.train, data.eval, rc.pretrain, SeededStream(rc.seeds.model), metrics_path)


def router_config(rc: RunConfig) -> rt.RouterConfig:
    cfg = rc.model
    n = rc.router.n_slots or cfg.n_layers // 2
    return rt.RouterConfig(d_model=cfg.d_model, n_heads=rc.router.n_heads, d_ff=rc.router.d_ff,
                           window=tuple(range(cfg.n_layers - n, cfg.n_layers)), init_std=rc.router.init_std)


def pref_params(rc: RunConfig, K: int | None = None, M: int | None = None) -> preference.PrefParams:
    return preference.PrefParams(
        K=rc.budgets.K if K is None else K, M=rc.budgets.M if M is None else M,
        n_actions=rc.prefs.n_actions, noise_std=rc.prefs.noise_std, margin=rc.prefs.margin,
        rank_layer=rc.prefs.rank_layer, drop_at_layer=rc.budgets.drop_at_layer, window=router_config(rc).window)


def train_router(rc: RunConfig, host_w, pairs, samples_by_id, metrics_path=None, checkpoint_path=None):
    rcfg = router_config(rc)
    w0 = rt.init_router(rcfg, SeededStream(rc.seeds.router).derive("router"))
    inputs = dpo.pair_inputs(host_w, rc.model, pairs, samples_by_id)
    tcfg = rc.train if rc.train.seed == rc.seeds.router else \
        dpo.TrainConfig(**{**rc.train.__dict__, "seed": rc.seeds.router})
    return dpo.train(w0, rcfg, pairs, inputs, tcfg, host_w=host_w, metrics_path=metrics_path,
                     checkpoint_path=checkpoint_path)


# --- strategies -------------------------------------------------------------

def router_actions(router_w, rcfg: rt.RouterConfig, host_w, cfg: ModelConfig, samples: list[SyntheticSample],
                   K: int, M: int, drop_at_layer: int) -> list[PruneAction]:
    V, Q, mask = rt.host_inputs(host_w, cfg, samples)
    with torch.no_grad():
        scores = rt.route(router_w, rcfg, V, Q, mask)
    return [rt.select_action(scores, K, M, drop_at_layer, rcfg.window, index=b) for b in range(len(samples))]


def random_actions(cfg: ModelConfig, samples: list[SyntheticSample], K: int, M: int, drop_at_layer: int,
                   window: tuple[int, ...], stream: SeededStream) -> list[PruneAction]:
    out = []
    for s in samples:
        st = stream.derive(f"random/{s.sample_id}")
        layers = tuple(window[i] for i in st.choice(len(window), K))
        out.append(PruneAction(layers, policies.random_tokens(cfg.n_visual, M, st).dropped_tokens, drop_at_layer))
    return out


def rule_actions(host_w, cfg: ModelConfig, samples: list[SyntheticSample], K: int, M: int, drop_at_layer: int,
                 window: tuple[int, ...], rank_layer: int = policies.DEFAULT_RANK_LAYER,
                 layer_scores: policies.LayerScoreVector | None = None) -> list[PruneAction]:
    """FastV token ranking plus cosine-similarity layer choice (one layer set for all samples)."""
    if layer_scores is None:
        layer_scores = policies.cosine_layer_scores(host_w, cfg, samples)
    layers = policies.select_skip_layers(layer_scores, K, "top-k-free", window).dropped_layers
    scores = policies.batch_token_scores(host_w, cfg, samples, rank_layer) if M else None
    out = []
    for i in range(len(samples)):
        tok = policies.rank_drop_from_scores(scores[i], M, drop_at_layer).dropped_tokens if M else ()
        out.append(PruneAction(layers, tok, drop_at_layer))
    return out


@dataclass
class StrategyResult:
    accuracy: float
    mean_kl: float
    flops_ratio: float


def evaluate_actions(host_w, cfg: ModelConfig, samples: list[SyntheticSample], actions: list[PruneAction],
                     p_orig: torch.Tensor | None = None) -> StrategyResult:
    if p_orig is None:
        p_orig = lvlm.answer_probs(host_w, cfg, samples)
    q = lvlm.answer_probs(host_w, cfg, samples, actions)
    kl = preference.kl_divergence(p_orig, q)
    gold = torch.tensor([s.answer for s in samples])
    acc = float((q.argmax(dim=1) == gold).float().mean())
    C = max(len(s.question) for s in samples)
    cost = CostConfig(cfg.n_layers, cfg.d_model, cfg.d_ff, cfg.n_visual, C)
    ratio = float(np.mean([float(pipeline_flops(cost, a)[1]) for a in actions]))
    return StrategyResult(acc, float(kl.mean()), ratio)
