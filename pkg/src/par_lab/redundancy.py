"""Layer-, token- and joint-redundancy sweeps with CSV and SVG output."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lvlm, policies
from .lvlm import ModelConfig, PruneAction, SyntheticSample
from .numerics import SeededStream

FIELDS = ["strategy", "budget", "seed", "metric", "value"]


@dataclass
class SweepReport:
    name: str
    rows: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, strategy: str, budget, seed: int, metric: str, value: float) -> None:
        value = float(value)
        if math.isnan(value):
            raise ValueError(f"NaN metric for {strategy}/{budget}/{metric}")
        self.rows.append({"strategy": strategy, "budget": str(budget), "seed": int(seed), "metric": metric,
                          "value": value})

    def select(self, strategy: str | None = None, metric: str | None = None, budget=None) -> list[dict]:
        return [r for r in self.rows
                if (strategy is None or r["strategy"] == strategy) and (metric is None or r["metric"] == metric)
                and (budget is None or r["budget"] == str(budget))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k in sorted(self.provenance):
            buf.write(f"# {k}: {self.provenance[k]}\n")
        wr = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in self.rows:
            wr.writerow({**r, "value": f"{r['value']:.6f}"})
        return buf.getvalue()

    def write(self, path: str | Path, plot: bool = True) -> None:
        path = Path(path)
        path.write_text(self.to_csv())
        if plot:
            path.with_suffix(".svg").write_text(render_svg(self))


def read_report(path: str | Path) -> SweepReport:
    lines = Path(path).read_text().splitlines()
    prov = {}
    body = []
    for line in lines:
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            prov[k] = v
        else:
            body.append(line)
    rep = SweepReport(Path(path).stem, provenance=prov)
    for r in csv.DictReader(body):
        rep.add(r["strategy"], r["budget"], int(r["seed"]), r["metric"], float(r["value"]))
    return rep


def render_svg(report: SweepReport, width: int = 640, height: int = 360) -> str:
    """Mean-over-seeds line per (strategy, metric) against numeric budgets."""
    series: dict[str, dict[float, list[float]]] = {}
    for r in report.rows:
        try:
            x = float(r["budget"])
        except ValueError:
            continue
        series.setdefault(f"{r['strategy']}:{r['metric']}", {}).setdefault(x, []).append(r["value"])
    pad = 50
    xs = sorted({x for s in series.values() for x in s}) or [0.0, 1.0]
    ys = [float(np.mean(v)) for s in series.values() for v in s.values()] or [0.0, 1.0]
    x0, x1 = xs[0], xs[-1] if xs[-1] > xs[0] else xs[0] + 1
    y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{pad}" y="20" font-size="14">{report.name}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="5" y="{sy(y1):.1f}" font-size="10">{y1:.3f}</text>',
           f'<text x="5" y="{sy(y0):.1f}" font-size="10">{y0:.3f}</text>']
    for i, (label, pts) in enumerate(sorted(series.items())):
        colour = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.1f},{sy(float(np.mean(pts[x]))):.1f}" for x in sorted(pts))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>')
        out.append(f'<text x="{width - pad - 150}" y="{pad + 14 * i}" font-size="10" fill="{colour}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --- Fig. 2(a)-style layer analysis ------------------------------------------

def latter_half(cfg: ModelConfig) -> list[int]:
    return list(range(cfg.n_layers - cfg.n_layers // 2, cfg.n_layers))


def layer_similarity_report(w, cfg: ModelConfig, samples: list[SyntheticSample], provenance: dict | None = None,
                            seed: int = 0) -> SweepReport:
    rep = SweepReport("layer_similarity", provenance=dict(provenance or {}))
    sims = policies.cosine_layer_scores(w, cfg, samples)
    for i, (a, b) in enumerate(zip(sims.scores, sims.last_scores)):
        rep.add("similarity", i, seed, "cos_all", a)
        rep.add("similarity", i, seed, "cos_last", b)
    rep.add("skip_window", 0, seed, "accuracy", lvlm.accuracy(w, cfg, samples))
    half = latter_half(cfg)
    for size in range(1, len(half) + 1):
        for start in range(half[0], cfg.n_layers - size + 1):
            a = PruneAction(tuple(range(start, start + size)))
            rep.add("skip_window", f"{start}-{start + size - 1}", seed, "accuracy",
                    lvlm.accuracy(w, cfg, samples, [a] * len(samples)))
    for i in range(cfg.n_layers):
        rep.add("skip_single", i, seed, "accuracy", lvlm.accuracy(w, cfg, samples, [PruneAction((i,))] * len(samples)))
    return rep


# --- Fig. 2(b)-style token analysis ------------------------------------------

def noise_levels(sigma: float, fixed_std: float = 10.0) -> dict[str, float]:
    return {"perturbed@0.25sigma": 0.25 * sigma, "perturbed@1sigma": sigma, f"perturbed@std{fixed_std:g}": fixed_std}


def token_ratio_sweep(w, cfg: ModelConfig, samples: list[SyntheticSample], keep_ratios=(0.1, 0.2, 0.3),
                      n_seeds: int = 5, seed: int = 0, rank_layer: int = policies.DEFAULT_RANK_LAYER,
                      drop_at_layer: int | None = None, fixed_std: float = 10.0,
                      provenance: dict | None = None) -> SweepReport:
    drop_at = rank_layer if drop_at_layer is None else drop_at_layer
    rep = SweepReport("token_ratio", provenance=dict(provenance or {}))
    S = cfg.n_visual
    scores = policies.batch_token_scores(w, cfg, samples, rank_layer)
    sigma = float(scores.std())
    rep.provenance["score_sigma"] = f"{sigma:.6g}"
    base = lvlm.accuracy(w, cfg, samples)
    root = SeededStream(seed)
    for r in sorted(keep_ratios):
        M = S - int(round(r * S))
        if M == 0:
            for s in range(n_seeds):
                for name in ["attention", "random", *noise_levels(sigma, fixed_std)]:
                    rep.add(name, r, s, "accuracy", base)
            continue
        att = [policies.rank_drop_from_scores(sc, M, drop_at) for sc in scores]
        att_acc = lvlm.accuracy(w, cfg, samples, att)
        for s in range(n_seeds):
            rep.add("attention", r, s, "accuracy", att_acc)
            rnd = [policies.random_tokens(S, M, root.derive(f"random/{r}/{s}/{x.sample_id}"), drop_at) for x in samples]
            rep.add("random", r, s, "accuracy", lvlm.accuracy(w, cfg, samples, rnd))
            for name, std in noise_levels(sigma, fixed_std).items():
                acts = [policies.rank_drop_from_scores(
                    policies.perturb(sc, std, root.derive(f"{name}/{s}/{x.sample_id}")), M, drop_at)
                    for sc, x in zip(scores, samples)]
                rep.add(name, r, s, "accuracy", lvlm.accuracy(w, cfg, samples, acts))
    rep.add("baseline", 1.0, 0, "accuracy", base)
    return rep


# --- Fig. 2(c)-style joint analysis -------------------------------------------

def default_token_actions(w, cfg: ModelConfig, samples: list[SyntheticSample], seed: int = 0, drop_fraction: float = 0.5,
                          n_perturbed: int = 5, noise_std: float | None = 10.0,
                          rank_layer: int = policies.DEFAULT_RANK_LAYER) -> dict[str, list[PruneAction]]:
    """All tokens, attention-ranked drop, and ``n_perturbed`` noisy variants.

    The default std of 10 matches the preference pipeline; ``noise_std=None``
    uses the empirical std of the attention scores instead.
    """
    S = cfg.n_visual
    M = int(round(drop_fraction * S))
    scores = policies.batch_token_scores(w, cfg, samples, rank_layer)
    std = float(scores.std()) if noise_std is None else noise_std
    root = SeededStream(seed)
    out = {"all_tokens": [lvlm.EMPTY] * len(samples),
           "attention": [policies.rank_drop_from_scores(sc, M, rank_layer) for sc in scores]}
    for k in range(n_perturbed):
        out[f"perturbed_{k}"] = [
            policies.rank_drop_from_scores(policies.perturb(sc, std, root.derive(f"joint/{k}/{x.sample_id}")), M, rank_layer)
            for sc, x in zip(scores, samples)]
    return out


def joint_similarity_matrix(w, cfg: ModelConfig, samples: list[SyntheticSample],
                            token_actions: dict[str, list[PruneAction]], window: list[int] | None = None,
                            provenance: dict | None = None, seed: int = 0) -> SweepReport:
    window = latter_half(cfg) if window is None else list(window)
    rep = SweepReport("joint_similarity", provenance={**(provenance or {}), "window": window})
    for label, acts in token_actions.items():
        sims = policies.cosine_layer_scores(w, cfg, samples, acts)
        for i in window:
            rep.add(label, i, seed, "cos_all", sims.scores[i])
    return rep


def joint_matrix(report: SweepReport) -> tuple[list[str], list[int], np.ndarray]:
    labels = list(dict.fromkeys(r["strategy"] for r in report.rows))
    layers = sorted({int(r["budget"]) for r in report.rows})
    m = np.zeros((len(labels), len(layers)))
    for r in report.rows:
        m[labels.index(r["strategy"]), layers.index(int(r["budget"]))] = r["value"]
    return labels, layers, m
