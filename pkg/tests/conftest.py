"""Shared fixtures: tiny configs for unit tests and cached trained hosts.

Trained default-config hosts are expensive (about ten CPU-minutes per seed),
so they are stored under ``.cache/par_lab`` in the repository root, or
wherever ``PAR_LAB_CACHE`` points. The cache key includes the config hash,
so changing the model or training defaults retrains automatically.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import pytest

from par_lab import experiment, lvlm
from par_lab import numerics as nx
from par_lab import router as rt
from par_lab.config import RunConfig
from par_lab.lvlm import PruneAction
from par_lab.preference import PreferencePair

CACHE = Path(os.environ.get("PAR_LAB_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "par_lab"))
SEEDS = (0, 1, 2)

TINY = lvlm.ModelConfig(n_layers=3, d_model=8, n_heads=2, d_ff=16, grid_side=4, palette_size=3, max_text_len=6,
                        vocab_size=40)


def run_config(seed: int) -> RunConfig:
    return RunConfig().replace("seeds", data=seed, model=seed, prefs=seed, router=seed, analysis=seed)


def host_key(rc: RunConfig) -> str:
    """Hash of only what pretraining depends on, so budget or router edits
    do not invalidate cached hosts."""
    d = rc.to_dict()
    relevant = {k: d[k] for k in ("model", "pretrain", "data")}
    relevant["seeds"] = {"data": rc.seeds.data, "model": rc.seeds.model}
    # init code is not part of the config; a reference init catches changes to it
    relevant["init"] = nx.params_hash(lvlm.init_weights(rc.model, nx.SeededStream(0)))
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:12]


def trained_host(seed: int):
    """``(weights, metrics rows, datasets, seconds spent training)`` for the default config."""
    rc = run_config(seed)
    data = experiment.make_datasets(rc)
    path = CACHE / f"host_{host_key(rc)}"
    if path.with_suffix(".json").exists():
        w, extra = nx.load_checkpoint(path)
        return w, extra["rows"], data, extra["seconds"]
    t0 = time.process_time()
    w, rows = experiment.pretrain_host(rc, data)
    seconds = time.process_time() - t0
    nx.save_checkpoint(w, path, extra={"rows": rows, "seconds": seconds, "seed": seed})
    return w, rows, data, seconds


def random_router(seed, rcfg):
    """Router with nonzero output heads so its scores actually vary."""
    s = nx.SeededStream(seed)
    w = rt.init_router(rcfg, s)
    w["tok_head.w2"] = nx.sample_gaussian(s.derive("a"), 0, 0.5, rcfg.d_model).reshape(-1, 1)
    w["layer_head.w2"] = nx.sample_gaussian(s.derive("b"), 0, 0.5, rcfg.d_model).reshape(-1, 1)
    return w


def planted_pairs(samples, S: int, K: int, M: int, window, drop_at_layer: int, stream: nx.SeededStream):
    """Synthetic-rule preferences: the positive drops ``M`` even-index tokens
    and the negative drops ``M`` odd-index tokens, with the same layer set."""
    even, odd = list(range(0, S, 2)), list(range(1, S, 2))
    pairs = []
    for smp in samples:
        st = stream.derive(str(smp.sample_id))
        layers = tuple(window[i] for i in st.choice(len(window), K))
        pos = PruneAction(layers, tuple(even[i] for i in st.choice(len(even), M)), drop_at_layer)
        neg = PruneAction(layers, tuple(odd[i] for i in st.choice(len(odd), M)), drop_at_layer)
        pairs.append(PreferencePair(smp.sample_id, pos, neg, 0.0, 1.0))
    return pairs


@pytest.fixture(scope="session")
def hosts():
    return {s: trained_host(s) for s in SEEDS}


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_weights():
    return lvlm.init_weights(TINY, nx.SeededStream(0).derive("init"))


@pytest.fixture(scope="session")
def tiny_samples():
    return lvlm.gen_synthetic_dataset(TINY, 24, nx.SeededStream(1))


if __name__ == "__main__":  # warm the cache: python tests/conftest.py
    for s in SEEDS:
        w, rows, _, sec = trained_host(s)
        print(json.dumps({"seed": s, "final": rows[-1], "cpu_seconds": round(sec, 1)}), flush=True)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for code in sorted(mod.RESULTS, key=lambda c: int(c[1:])):
        terminalreporter.write_line(mod.RESULTS[code])
