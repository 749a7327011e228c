"""Theoretical prefill FLOPs for dense and pruned stacks.

Per layer with ``n`` active tokens: ``4nd^2 + 2n^2d + 2nd*d_ff`` (Q/K/V/O
projections, attention matrix, feed-forward). The vocabulary head and the
decode phase are not counted. All arithmetic is on Python ints.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .lvlm import PruneAction


@dataclass(frozen=True)
class CostConfig:
    n_layers: int
    d_model: int
    d_ff: int
    S: int
    C: int

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.d_ff, self.S, self.C) <= 0:
            raise ValueError("all cost dimensions must be positive")


def layer_flops(n_tokens: int, d: int, d_ff: int) -> int:
    n, d, f = int(n_tokens), int(d), int(d_ff)
    if n < 0 or d <= 0 or f <= 0:
        raise ValueError("token count must be >= 0 and widths positive")
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * f


def active_tokens(cfg: CostConfig, action: PruneAction, layer: int) -> int:
    if action.M and layer >= action.drop_at_layer:
        return cfg.S - action.M + cfg.C
    return cfg.S + cfg.C


def pipeline_flops(cfg: CostConfig, action: PruneAction | None = None) -> tuple[int, Fraction]:
    """``(total, total / dense)``; the ratio is an exact fraction."""
    action = action or PruneAction()
    if action.M > cfg.S or any(not 0 <= i < cfg.n_layers for i in action.dropped_layers):
        raise ValueError("action does not fit the cost config")
    skipped = set(action.dropped_layers)
    total = sum(layer_flops(active_tokens(cfg, action, i), cfg.d_model, cfg.d_ff)
                for i in range(cfg.n_layers) if i not in skipped)
    dense = cfg.n_layers * layer_flops(cfg.S + cfg.C, cfg.d_model, cfg.d_ff)
    return total, Fraction(total, dense)


def table_row(cfg: CostConfig, action: PruneAction | None = None) -> dict:
    action = action or PruneAction()
    total, ratio = pipeline_flops(cfg, action)
    return {"total_flops": total, "ratio": float(ratio), "T_kept": cfg.S - action.M,
            "L_kept": cfg.n_layers - action.K}
