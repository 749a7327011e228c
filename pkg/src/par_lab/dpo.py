"""Reference-free DPO for the meta-router; the host model stays frozen."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from . import lvlm
from . import numerics as nx
from . import router as rt
from .preference import PreferencePair
from .numerics import SeededStream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    beta: float = 1.0
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 5
    eval_fraction: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0 <= self.eval_fraction < 1:
            raise ValueError("eval_fraction must be in [0, 1)")


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg: str, last_good: dict):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class PairInputs:
    """Frozen host embeddings aligned with a list of pairs."""

    V: torch.Tensor
    Q: torch.Tensor
    q_mask: torch.Tensor

    def take(self, idx) -> PairInputs:
        return PairInputs(self.V[idx], self.Q[idx], self.q_mask[idx])


def pair_inputs(host_w, cfg: lvlm.ModelConfig, pairs: list[PreferencePair],
                samples_by_id: dict[int, lvlm.SyntheticSample]) -> PairInputs:
    return PairInputs(*rt.host_inputs(host_w, cfg, [samples_by_id[p.sample_id] for p in pairs]))


def pair_log_likelihoods(w, rcfg: rt.RouterConfig, pairs: list[PreferencePair], inputs: PairInputs):
    scores = rt.route(w, rcfg, inputs.V, inputs.Q, inputs.q_mask)
    lp = rt.action_log_likelihood(scores, [p.positive for p in pairs], rcfg.window)
    ln = rt.action_log_likelihood(scores, [p.negative for p in pairs], rcfg.window)
    return lp, ln


def dpo_objective(lp: torch.Tensor, ln: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """``-mean log sigmoid(beta * (lp - ln))``."""
    return -F.logsigmoid(beta * (lp - ln)).mean()


def dpo_loss(w, rcfg: rt.RouterConfig, pairs: list[PreferencePair], inputs: PairInputs, beta: float = 1.0) -> torch.Tensor:
    lp, ln = pair_log_likelihoods(w, rcfg, pairs, inputs)
    return dpo_objective(lp, ln, beta)


def eval_preference_accuracy(w, rcfg: rt.RouterConfig, pairs: list[PreferencePair], inputs: PairInputs,
                             batch_size: int = 256) -> float:
    if not pairs:
        return 0.0
    total = 0.0
    with torch.no_grad():
        for lo in range(0, len(pairs), batch_size):
            idx = list(range(lo, min(lo + batch_size, len(pairs))))
            lp, ln = pair_log_likelihoods(w, rcfg, [pairs[i] for i in idx], inputs.take(idx))
            total += float((lp > ln).sum()) + 0.5 * float((lp == ln).sum())
    return total / len(pairs)


def split_pairs(n: int, fraction: float, stream: SeededStream) -> tuple[list[int], list[int]]:
    perm = [int(i) for i in stream.permutation(n)]
    n_eval = int(round(n * fraction))
    return sorted(perm[n_eval:]), sorted(perm[:n_eval])


def train(w, rcfg: rt.RouterConfig, pairs: list[PreferencePair], inputs: PairInputs, tcfg: TrainConfig,
          host_w: dict | None = None, metrics_path: str | Path | None = None, checkpoint_path: str | Path | None = None):
    """Adam on the DPO objective; returns ``(best router weights, metrics rows)``.

    The best epoch is picked by held-out preference accuracy (train loss when
    there is no held-out split).
    """
    if not pairs:
        raise ValueError("empty preference dataset")
    host_hash = nx.params_hash(host_w) if host_w is not None else None
    stream = SeededStream(tcfg.seed)
    tr_idx, ev_idx = split_pairs(len(pairs), tcfg.eval_fraction, stream.derive("split"))
    ev_pairs = [pairs[i] for i in ev_idx]
    ev_in = inputs.take(ev_idx)
    params = {n: p.detach().clone().requires_grad_(True) for n, p in w.items()}
    opt = torch.optim.Adam(list(params.values()), lr=tcfg.lr)
    snapshot = {n: p.detach().clone() for n, p in params.items()}
    rows = []
    best = (eval_preference_accuracy(snapshot, rcfg, ev_pairs, ev_in) if ev_pairs else 0.0, snapshot)
    for epoch in range(1, tcfg.epochs + 1):
        order = stream.derive(f"epoch/{epoch}").permutation(len(tr_idx))
        losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            idx = [tr_idx[int(i)] for i in order[lo:lo + tcfg.batch_size]]
            loss = dpo_loss(params, rcfg, [pairs[i] for i in idx], inputs.take(idx), tcfg.beta)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"DPO loss {loss.item()} in epoch {epoch}", snapshot)
            opt.zero_grad()
            grads = nx.backward(loss, params)
            for n, p in params.items():
                p.grad = grads[n]
            torch.nn.utils.clip_grad_norm_(list(params.values()), tcfg.grad_clip)
            opt.step()
            losses.append(loss.item())
        snapshot = {n: p.detach().clone() for n, p in params.items()}
        acc = eval_preference_accuracy(snapshot, rcfg, ev_pairs, ev_in) if ev_pairs else 0.0
        train_loss = sum(losses) / len(losses)
        rows.append({"epoch": epoch, "train_loss": round(train_loss, 6), "heldout_pref_acc": round(acc, 6)})
        log.info("epoch %d train_loss %.4f heldout_pref_acc %.4f", epoch, train_loss, acc)
        score = acc if ev_pairs else -train_loss
        if epoch == 1 or score > best[0]:
            best = (score, snapshot)
            if checkpoint_path is not None:
                rt.save_router(snapshot, rcfg, checkpoint_path)
    if host_w is not None and nx.params_hash(host_w) != host_hash:
        raise RuntimeError("host weights changed during router training")
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "heldout_pref_acc"])
            wr.writeheader()
            wr.writerows(rows)
    return best[1], rows
