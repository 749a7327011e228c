"""``par-lab``: data generation, pretraining, analyses, preference building,
router training, evaluation and cost reporting.

Every artifact lands under ``<out>/<config hash>/``. Budget-dependent stages
(preferences, router, evaluation) go one level deeper, into a directory
named after ``(K, M, drop_at_layer)``. Each stage leaves a stamp file that
records the fingerprint of its inputs, so rerunning with identical inputs
is a no-op.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

import torch

from . import __version__, experiment, lvlm, preference, redundancy
from . import numerics as nx
from . import router as rt
from .config import ConfigError, RunConfig, load_config
from .flops import CostConfig, table_row
from .lvlm import PruneAction

log = logging.getLogger("par_lab")


class MissingPrerequisite(RuntimeError):
    def __init__(self, what: Path, command: str):
        super().__init__(f"missing {what}; run `par-lab {command}` first (with the same --config/--seed)")


# --- run directory ------------------------------------------------------------

def git_state() -> str:
    try:
        head = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).parent)
        dirty = subprocess.run(["git", "status", "--porcelain"], capture_output=True, text=True, timeout=5,
                               cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    if head.returncode != 0:
        return "unknown"
    return head.stdout.strip()[:12] + ("+dirty" if dirty.stdout.strip() else "")


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


@dataclass
class Run:
    rc: RunConfig
    root: Path
    K: int
    M: int
    drop_at: int
    force: bool = False
    plot: bool = True

    @property
    def budget_dir(self) -> Path:
        return self.root / f"K{self.K}_M{self.M}_at{self.drop_at}"

    def path(self, rel: str) -> Path:
        return self.root / rel

    def provenance(self, **extra) -> dict:
        out = {"config_hash": self.rc.hash(), "seed": self.rc.seeds.model, "state": git_state(),
               "version": __version__}
        out.update(extra)
        return out

    def require(self, path: Path, command: str) -> Path:
        if not (path.exists() or path.with_suffix(".json").exists()):
            raise MissingPrerequisite(path, command)
        return path

    # stamps -----------------------------------------------------------------
    def _stamp(self, stage: str, base: Path) -> Path:
        return base / f".{stage}.stamp.json"

    def up_to_date(self, stage: str, fingerprint: dict, base: Path | None = None) -> bool:
        stamp = self._stamp(stage, base or self.root)
        if self.force or not stamp.exists():
            return False
        if json.loads(stamp.read_text()) != fingerprint:
            return False
        print(f"{stage}: up-to-date ({stamp.parent})")
        return True

    def mark(self, stage: str, fingerprint: dict, base: Path | None = None) -> None:
        stamp = self._stamp(stage, base or self.root)
        stamp.parent.mkdir(parents=True, exist_ok=True)
        stamp.write_text(json.dumps(fingerprint, sort_keys=True, indent=1))

    # shared loaders ---------------------------------------------------------
    def datasets(self) -> experiment.Datasets:
        d = self.path("data")
        parts = {n: lvlm.load_dataset(self.require(d / f"{n}.jsonl", "gen-data"))
                 for n in ("train", "eval", "pref", "router_eval")}
        return experiment.Datasets(**parts)

    def host(self):
        w, _ = nx.load_checkpoint(self.require(self.path("model/host"), "pretrain"))
        return w

    def router(self, budget_dir: Path | None = None, hint: str = "train-router"):
        path = (budget_dir or self.budget_dir) / "router"
        self.require(path, hint)
        return rt.load_router(path)


def make_run(args) -> Run:
    rc = load_config(args.config)
    if args.seed is not None:
        rc = rc.replace("seeds", data=args.seed, model=args.seed, prefs=args.seed, router=args.seed,
                        analysis=args.seed)
    root = Path(args.out) / rc.hash()
    K, M, at = rc.budgets.K, rc.budgets.M, rc.budgets.drop_at_layer
    if getattr(args, "keep_layers", None) is not None:
        K = rc.model.n_layers - args.keep_layers
    if getattr(args, "keep_tokens", None) is not None:
        M = rc.model.n_visual - args.keep_tokens
    if getattr(args, "drop_at", None) is not None:
        at = args.drop_at
    if not (0 <= K <= rc.model.n_layers and 0 <= M <= rc.model.n_visual):
        raise ConfigError(f"budgets out of range: K={K}, M={M}")
    run = Run(rc, root, K, M, at, force=getattr(args, "force", False), plot=not args.no_plot)
    root.mkdir(parents=True, exist_ok=True)
    cfg_file = root / "config.yaml"
    if not cfg_file.exists():
        cfg_file.write_text(f"# config_hash: {rc.hash()}\n# state: {git_state()}\n" + rc.dump())
    return run


def write_rows(path: Path, fields: list[str], rows: list[dict], provenance: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for k in sorted(provenance):
            fh.write(f"# {k}: {provenance[k]}\n")
        wr = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)


# --- stages ------------------------------------------------------------------

def cmd_gen_data(run: Run, args) -> None:
    fp = {"config": run.rc.hash()}
    if run.up_to_date("gen-data", fp):
        return
    data = experiment.make_datasets(run.rc)
    d = run.path("data")
    d.mkdir(parents=True, exist_ok=True)
    for name in ("train", "eval", "pref", "router_eval"):
        lvlm.save_dataset(getattr(data, name), d / f"{name}.jsonl",
                          header=run.provenance(split=name, n=len(getattr(data, name))))
    run.mark("gen-data", fp)
    print(f"gen-data: wrote {len(data.train)} train / {len(data.eval)} eval / {len(data.pref)} pref / "
          f"{len(data.router_eval)} router-eval samples to {d}")


def ensure_data(run: Run, args) -> None:
    if not run.path("data/train.jsonl").exists():
        cmd_gen_data(run, args)


def cmd_pretrain(run: Run, args) -> None:
    data_fp = file_hash(run.require(run.path("data/train.jsonl"), "gen-data"))
    fp = {"config": run.rc.hash(), "data": data_fp}
    if run.up_to_date("pretrain", fp):
        return
    data = run.datasets()
    w, rows = experiment.pretrain_host(run.rc, data)
    prov = run.provenance(data_hash=data_fp)
    nx.save_checkpoint(w, run.path("model/host"), extra={**prov, "model": run.rc.to_dict()["model"]})
    lvlm.write_metrics(rows, run.path("model/metrics.csv"), {**prov, "host_hash": nx.params_hash(w)})
    run.mark("pretrain", fp)
    print(f"pretrain: eval_acc {rows[-1]['eval_acc']:.4f} after {rows[-1]['step']} steps")


def host_fp(run: Run) -> str:
    return file_hash(run.require(run.path("model/host.bin"), "pretrain"))


def cmd_analyze_layers(run: Run, args) -> None:
    fp = {"config": run.rc.hash(), "host": host_fp(run)}
    if run.up_to_date("analyze-layers", fp):
        return
    w, data = run.host(), run.datasets()
    rep = redundancy.layer_similarity_report(w, run.rc.model, data.eval, run.provenance(host_hash=fp["host"]),
                                             seed=run.rc.seeds.model)
    out = run.path("analysis/layer_similarity.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.write(out, plot=run.plot)
    run.mark("analyze-layers", fp)
    print(f"analyze-layers: wrote {out}")


def cmd_analyze_tokens(run: Run, args) -> None:
    ratios = tuple(args.ratios)
    fp = {"config": run.rc.hash(), "host": host_fp(run), "ratios": list(ratios), "seeds": args.noise_seeds}
    if run.up_to_date("analyze-tokens", fp):
        return
    w, data = run.host(), run.datasets()
    rep = redundancy.token_ratio_sweep(w, run.rc.model, data.eval, keep_ratios=ratios, n_seeds=args.noise_seeds,
                                       seed=run.rc.seeds.analysis, rank_layer=run.rc.prefs.rank_layer,
                                       provenance=run.provenance(host_hash=fp["host"]))
    out = run.path("analysis/token_ratio.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.write(out, plot=run.plot)
    run.mark("analyze-tokens", fp)
    print(f"analyze-tokens: wrote {out}")


def cmd_analyze_joint(run: Run, args) -> None:
    fp = {"config": run.rc.hash(), "host": host_fp(run)}
    if run.up_to_date("analyze-joint", fp):
        return
    w, data = run.host(), run.datasets()
    acts = redundancy.default_token_actions(w, run.rc.model, data.eval, seed=run.rc.seeds.analysis,
                                            rank_layer=run.rc.prefs.rank_layer)
    rep = redundancy.joint_similarity_matrix(w, run.rc.model, data.eval, acts,
                                             provenance=run.provenance(host_hash=fp["host"]), seed=run.rc.seeds.model)
    out = run.path("analysis/joint_similarity.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.write(out, plot=run.plot)
    run.mark("analyze-joint", fp)
    print(f"analyze-joint: wrote {out}")


def cmd_build_prefs(run: Run, args) -> None:
    fp = {"config": run.rc.hash(), "host": host_fp(run), "K": run.K, "M": run.M, "at": run.drop_at}
    if run.up_to_date("build-prefs", fp, run.budget_dir):
        return
    if run.K == 0 and run.M == 0:
        raise ConfigError("K=0 and M=0 leave nothing to prefer; choose a nonzero budget")
    w, data = run.host(), run.datasets()
    params = experiment.pref_params(run.rc, run.K, run.M)
    params = preference.PrefParams(**{**params.__dict__, "drop_at_layer": run.drop_at})
    out = run.budget_dir / "prefs.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    stats = preference.build_dataset(w, run.rc.model, data.pref, params, run.rc.seeds.prefs, out,
                                     provenance=run.provenance(host_hash=fp["host"]))
    run.mark("build-prefs", fp, run.budget_dir)
    print(f"build-prefs: {stats['pairs']} pairs from {stats['samples']} samples (yield {stats['yield']:.3f})")


def cmd_train_router(run: Run, args) -> None:
    prefs = run.require(run.budget_dir / "prefs.jsonl", "build-prefs")
    fp = {"config": run.rc.hash(), "host": host_fp(run), "prefs": file_hash(prefs)}
    if run.up_to_date("train-router", fp, run.budget_dir):
        return
    w, data = run.host(), run.datasets()
    _, pairs = preference.load_pairs(prefs)
    by_id = {s.sample_id: s for s in data.pref}
    rw, rows = experiment.train_router(run.rc, w, pairs, by_id)
    rcfg = experiment.router_config(run.rc)
    rt.save_router(rw, rcfg, run.budget_dir / "router")
    write_rows(run.budget_dir / "router_metrics.csv", ["epoch", "train_loss", "heldout_pref_acc"], rows,
               run.provenance(host_hash=fp["host"], prefs_hash=fp["prefs"], router_hash=nx.params_hash(rw)))
    run.mark("train-router", fp, run.budget_dir)
    best = max(r["heldout_pref_acc"] for r in rows)
    print(f"train-router: best held-out preference accuracy {best:.4f}")


# --- evaluation ----------------------------------------------------------------

EVAL_FIELDS = ["strategy", "K", "M", "T_kept", "L_kept", "seed", "accuracy", "mean_kl", "flops_ratio"]


def compare(run: Run, router, K: int, M: int, n_draws: int) -> list[dict]:
    """Baseline, router, attention-rank and random rows on the router-eval pool."""
    cfg = run.rc.model
    w, data = run.host(), run.datasets()
    samples = data.router_eval
    window = experiment.router_config(run.rc).window
    p_orig = lvlm.answer_probs(w, cfg, samples)
    seed = run.rc.seeds.model

    def row(name, res, s=seed):
        return {"strategy": name, "K": K, "M": M, "T_kept": cfg.n_visual - M, "L_kept": cfg.n_layers - K,
                "seed": s, "accuracy": f"{res.accuracy:.6f}", "mean_kl": f"{res.mean_kl:.6f}",
                "flops_ratio": f"{res.flops_ratio:.6f}"}

    rows = [row("baseline", experiment.evaluate_actions(w, cfg, samples, [PruneAction()] * len(samples), p_orig))]
    if K == 0 and M == 0:
        for name in ("router", "attention", "random"):
            rows.append({**rows[0], "strategy": name})
        return rows
    if router is not None:
        rw, rcfg = router
        acts = experiment.router_actions(rw, rcfg, w, cfg, samples, K, M, run.drop_at)
        rows.append(row("router", experiment.evaluate_actions(w, cfg, samples, acts, p_orig)))
    layer_scores = redundancy.policies.cosine_layer_scores(w, cfg, data.pref[:200])
    acts = experiment.rule_actions(w, cfg, samples, K, M, run.drop_at, window, run.rc.prefs.rank_layer, layer_scores)
    rows.append(row("attention", experiment.evaluate_actions(w, cfg, samples, acts, p_orig)))
    root = nx.SeededStream(seed).derive("eval-random")
    for d in range(n_draws):
        acts = experiment.random_actions(cfg, samples, K, M, run.drop_at, window, root.derive(str(d)))
        r = row("random", experiment.evaluate_actions(w, cfg, samples, acts, p_orig))
        rows.append({**r, "strategy": "random" if n_draws == 1 else f"random_{d}"})
    return rows


def mode_budget(run: Run, mode: str) -> tuple[int, int]:
    return {"joint": (run.K, run.M), "token": (0, run.M), "layer": (run.K, 0)}[mode]


def cmd_eval_router(run: Run, args) -> None:
    K, M = mode_budget(run, args.mode)
    if args.specialist and args.mode != "joint":
        spec_dir = run.root / f"K{K}_M{M}_at{run.drop_at}"
        hint = "build-prefs and train-router " + ("-L %d" % run.rc.model.n_layers if K == 0 else
                                                  "-T %d" % run.rc.model.n_visual)
        router = run.router(spec_dir, hint)
        label = "specialist"
    else:
        router = run.router()
        label = "joint-then-" + args.mode if args.mode != "joint" else "joint"
    rows = compare(run, router, K, M, args.draws)
    out = run.budget_dir / f"eval_router_{args.mode}{'_specialist' if args.specialist else ''}.csv"
    write_rows(out, EVAL_FIELDS, rows, run.provenance(host_hash=host_fp(run), router=label,
                                                      router_hash=nx.params_hash(router[0])))
    for r in rows:
        print(f"{r['strategy']:>10}  acc {r['accuracy']}  kl {r['mean_kl']}  flops {r['flops_ratio']}")
    print(f"eval-router: wrote {out}")


def cmd_run_par(run: Run, args) -> None:
    """Everything needed for one comparison table, reusing finished stages."""
    ensure_data(run, args)
    cmd_pretrain(run, args)
    blocks = [(run.K, run.M)]
    if args.ablation:
        blocks = [(run.K, 0), (0, run.M), (run.K, run.M)]
    rows = []
    for K, M in blocks:
        sub = Run(run.rc, run.root, K, M, run.drop_at, run.force, run.plot)
        router = None
        if K or M:
            cmd_build_prefs(sub, args)
            cmd_train_router(sub, args)
            router = sub.router()
        rows += compare(sub, router, K, M, args.draws)
    name = "run_par_ablation.csv" if args.ablation else "run_par.csv"
    out = (run.root if args.ablation else run.budget_dir) / name
    write_rows(out, EVAL_FIELDS, rows, run.provenance(host_hash=host_fp(run)))
    for r in rows:
        print(f"K={r['K']} M={r['M']} {r['strategy']:>10}  acc {r['accuracy']}  kl {r['mean_kl']}  "
              f"flops {r['flops_ratio']}")
    print(f"run-par: wrote {out}")


# 7B-class LLaVA shapes; the sequence length and phase conventions behind
# published TFLOPs are not documented, so these numbers are only indicative.
LARGE_SCALE = {"n_layers": 32, "d_model": 4096, "d_ff": 11008, "S": 576, "C": 64}


def cmd_flops(run: Run, args) -> None:
    cfg = run.rc.model
    C = args.context or cfg.max_text_len
    cost = CostConfig(cfg.n_layers, cfg.d_model, cfg.d_ff, cfg.n_visual, C)
    action = PruneAction(tuple(range(cfg.n_layers - run.K, cfg.n_layers)), tuple(range(run.M)), run.drop_at)
    r = table_row(cost, action)
    out = run.path(f"flops_K{run.K}_M{run.M}_at{run.drop_at}.csv")
    write_rows(out, ["T_kept", "L_kept", "total_flops", "ratio"], [{**r, "ratio": f"{r['ratio']:.6f}"}],
               run.provenance(C=C))
    print(f"T={r['T_kept']} L={r['L_kept']} flops={r['total_flops']} ratio={r['ratio']:.6f}")
    if args.large_scale:
        big = CostConfig(**{**LARGE_SCALE, "C": args.context or LARGE_SCALE["C"]})
        T, L = args.large_scale
        if not (0 <= T <= big.S and 0 < L <= big.n_layers):
            raise ConfigError(f"large-scale budget out of range: T={T}, L={L}")
        at = 2 if args.drop_at is None else args.drop_at
        pr = table_row(big, PruneAction(tuple(range(L, big.n_layers)), tuple(range(big.S - T)), at))
        print(f"large-scale (convention-dependent): T={pr['T_kept']} L={pr['L_kept']} "
              f"TFLOPs={pr['total_flops'] / 1e12:.2f} ratio={pr['ratio']:.6f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "analyze-layers": cmd_analyze_layers,
    "analyze-tokens": cmd_analyze_tokens,
    "analyze-joint": cmd_analyze_joint,
    "build-prefs": cmd_build_prefs,
    "train-router": cmd_train_router,
    "eval-router": cmd_eval_router,
    "run-par": cmd_run_par,
    "flops": cmd_flops,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--jobs", type=int, default=1, help="CPU threads for tensor work")
    common.add_argument("--out", default="runs", help="parent directory for run directories")
    common.add_argument("--no-plot", action="store_true", help="skip SVG plots")
    common.add_argument("--force", action="store_true", help="recompute even when up-to-date")
    common.add_argument("-v", "--verbose", action="store_true")
    budgets = argparse.ArgumentParser(add_help=False)
    budgets.add_argument("-T", "--keep-tokens", type=int, help="visual tokens kept (M = S - T)")
    budgets.add_argument("-L", "--keep-layers", type=int, help="layers kept (K = n_layers - L)")
    budgets.add_argument("--drop-at", type=int, help="layer at which dropped tokens leave the sequence")

    p = argparse.ArgumentParser(prog="par-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        parents = [common, budgets] if name in ("build-prefs", "train-router", "eval-router", "run-par",
                                                "flops") else [common]
        sp = sub.add_parser(name, parents=parents)
        if name == "analyze-tokens":
            sp.add_argument("--ratios", type=float, nargs="+", default=[0.1, 0.2, 0.3], help="keep ratios")
            sp.add_argument("--noise-seeds", type=int, default=5)
        if name in ("eval-router", "run-par"):
            sp.add_argument("--draws", type=int, default=1, help="random-dropping draws per seed")
        if name == "eval-router":
            sp.add_argument("--mode", choices=["joint", "token", "layer"], default="joint",
                            help="token: run with K=0; layer: run with M=0")
            sp.add_argument("--specialist", action="store_true",
                            help="use a router trained at the single-axis budget instead of the joint one")
        if name == "run-par":
            sp.add_argument("--ablation", action="store_true", help="layer-only, token-only and joint blocks")
        if name == "flops":
            sp.add_argument("--context", type=int, help="question length C (default: max_text_len)")
            sp.add_argument("--large-scale", type=int, nargs=2, metavar=("T", "L"),
                            help="also print a 7B-scale estimate keeping T of 576 tokens and L of 32 layers")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.jobs))
    try:
        run = make_run(args)
        COMMANDS[args.command](run, args)
    except (ConfigError, MissingPrerequisite, preference.PreferenceDataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
