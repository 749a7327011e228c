"""Toy decoder-only vision-language model on a synthetic grid-VQA task.

The sequence is ``[visual tokens; question tokens]``. Each visual token is a
grid cell whose one-hot colour is projected to ``d_model``; question tokens
use a learned embedding table. Positions are learned absolute embeddings,
added once at entry, so a visual token keeps its original position after
other tokens are dropped.

Two question templates exist::

    how many <colour>          -> digit word (count of that colour)
    what color at cell<k>      -> colour word of visual token k

Grounded words are tied to the visual side: a colour word adds the patch
projection of its colour and ``cell<k>`` adds the positional embedding of
visual token ``k``. The output head reuses the same word embeddings.

Colour 0 ("gray") is the background; counts are asked only about the
foreground colours.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import numerics as nx
from .numerics import SeededStream

log = logging.getLogger(__name__)

COLORS = ["gray", "red", "green", "blue", "yellow", "purple", "orange", "brown", "pink", "cyan"]
CONTROL = ["<pad>", "<end>"]
TEMPLATE = ["how", "many", "what", "color", "at"]
MAX_COUNT = 4


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 96
    grid_side: int = 8
    max_text_len: int = 16
    palette_size: int = 6
    init_std: float = 0.125

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 2 <= self.palette_size <= len(COLORS):
            raise ValueError(f"palette_size must be in [2, {len(COLORS)}]")
        if len(build_vocab(self)) > self.vocab_size:
            raise ValueError(f"vocab_size {self.vocab_size} too small for {len(build_vocab(self))} words")

    @property
    def n_visual(self) -> int:
        return self.grid_side**2

    @property
    def max_seq(self) -> int:
        return self.n_visual + self.max_text_len

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def build_vocab(cfg: ModelConfig) -> list[str]:
    words = list(CONTROL) + COLORS[: cfg.palette_size] + [str(i) for i in range(10)]
    words += [f"cell{i}" for i in range(cfg.n_visual)]
    words += TEMPLATE
    return words


class Vocab:
    def __init__(self, cfg: ModelConfig):
        words = build_vocab(cfg)
        words += [f"<unused{i}>" for i in range(cfg.vocab_size - len(words))]
        self.words = words
        self.ids = {w: i for i, w in enumerate(words)}

    def __getitem__(self, word: str) -> int:
        return self.ids[word]

    def decode(self, ids) -> list[str]:
        return [self.words[i] for i in ids]

    @property
    def pad(self) -> int:
        return self.ids["<pad>"]

    @property
    def end(self) -> int:
        return self.ids["<end>"]


@dataclass
class SyntheticSample:
    sample_id: int
    grid: list[int]  # flat, row-major, g*g colour indices
    question: list[int]
    answer: int

    def to_json(self) -> str:
        return json.dumps({"sample_id": self.sample_id, "grid": self.grid,
                           "question": self.question, "answer": self.answer})

    @classmethod
    def from_json(cls, line: str) -> SyntheticSample:
        d = json.loads(line)
        return cls(d["sample_id"], d["grid"], d["question"], d["answer"])


@dataclass(frozen=True)
class PruneAction:
    dropped_layers: tuple[int, ...] = ()
    dropped_tokens: tuple[int, ...] = ()
    drop_at_layer: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dropped_layers", tuple(sorted(int(i) for i in self.dropped_layers)))
        object.__setattr__(self, "dropped_tokens", tuple(sorted(int(i) for i in self.dropped_tokens)))
        if len(set(self.dropped_layers)) != len(self.dropped_layers):
            raise nx.ContractError("duplicate layer index in PruneAction")
        if len(set(self.dropped_tokens)) != len(self.dropped_tokens):
            raise nx.ContractError("duplicate token index in PruneAction")

    @property
    def K(self) -> int:
        return len(self.dropped_layers)

    @property
    def M(self) -> int:
        return len(self.dropped_tokens)

    def is_empty(self) -> bool:
        return not self.dropped_layers and not self.dropped_tokens

    def validate(self, cfg: ModelConfig) -> None:
        if any(not 0 <= i < cfg.n_layers for i in self.dropped_layers):
            raise nx.ContractError(f"layer index out of range [0, {cfg.n_layers}): {self.dropped_layers}")
        if any(not 0 <= i < cfg.n_visual for i in self.dropped_tokens):
            raise nx.ContractError(f"token index out of range [0, {cfg.n_visual}): {self.dropped_tokens}")
        if not 0 <= self.drop_at_layer <= cfg.n_layers:
            raise nx.ContractError(f"drop_at_layer {self.drop_at_layer} outside [0, {cfg.n_layers}]")

    def to_dict(self) -> dict:
        return {"dropped_layers": list(self.dropped_layers), "dropped_tokens": list(self.dropped_tokens),
                "drop_at_layer": self.drop_at_layer}

    @classmethod
    def from_dict(cls, d: dict) -> PruneAction:
        return cls(tuple(d["dropped_layers"]), tuple(d["dropped_tokens"]), int(d["drop_at_layer"]))


EMPTY = PruneAction()


@dataclass
class TraceBundle:
    """Per-layer states captured during one forward.

    ``hidden_states[l]`` is the state entering layer ``l`` (after any token
    drop scheduled there); ``hidden_states[n_layers]`` is the final residual
    stream. ``layer_outputs[l]`` is layer ``l``'s output over the same rows
    as ``hidden_states[l]``. ``positions[l]`` maps those rows to original
    sequence positions. ``attention[l]`` is ``[heads, n, n]`` or ``None`` for
    a skipped layer.
    """

    hidden_states: list[torch.Tensor]
    layer_outputs: list[torch.Tensor]
    attention: list[torch.Tensor | None]
    positions: list[list[int]]
    n_visual: int


# --- dataset ----------------------------------------------------------------

def gen_synthetic_dataset(cfg: ModelConfig, n: int, stream: SeededStream, start_id: int = 0) -> list[SyntheticSample]:
    if n <= 0:
        raise ValueError("n must be positive")
    vocab = Vocab(cfg)
    S, g, P = cfg.n_visual, cfg.grid_side, cfg.palette_size
    out = []
    for k in range(n):
        s = stream.derive(f"sample/{start_id + k}")
        grid = [0] * S
        cells = [int(i) for i in s.permutation(S)]
        counts = s.integers(MAX_COUNT + 1, P - 1)
        cursor = 0
        for c in range(1, P):
            for _ in range(int(counts[c - 1])):
                grid[cells[cursor]] = c
                cursor += 1
        if s.uniform(1)[0] < 0.5:
            c = 1 + int(s.integers(P - 1, 1)[0])
            question = [vocab["how"], vocab["many"], vocab[COLORS[c]]]
            answer = vocab[str(grid.count(c))]
        else:
            want = int(s.integers(P, 1)[0])
            if want and not counts[want - 1]:
                # plant one cell so the requested colour exists
                grid[cells[cursor]] = want
                cursor += 1
            where = [i for i in range(S) if grid[i] == want]
            cell = where[int(s.integers(len(where), 1)[0])]
            question = [vocab["what"], vocab["color"], vocab["at"], vocab[f"cell{cell}"]]
            answer = vocab[COLORS[grid[cell]]]
        out.append(SyntheticSample(start_id + k, grid, question, answer))
    return out


def save_dataset(samples: list[SyntheticSample], path: str | Path, header: dict | None = None) -> None:
    """JSONL, one sample per line; an optional ``{"header": ...}`` record goes first."""
    lines = [json.dumps({"header": header}, sort_keys=True)] if header else []
    Path(path).write_text("".join(line + "\n" for line in lines + [s.to_json() for s in samples]))


def load_dataset(path: str | Path) -> list[SyntheticSample]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith('{"header"'):
            out.append(SyntheticSample.from_json(line))
    return out


def sample_key(s: SyntheticSample) -> tuple:
    return tuple(s.grid), tuple(s.question)


# --- weights ----------------------------------------------------------------

def layer_param_names(i: int) -> list[str]:
    return [f"layers.{i}.{n}" for n in ("ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                                         "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")]


def init_block(prefix: str, d: int, f: int, stream: SeededStream, out_std: float, std: float) -> dict:
    def normal(name, shape, sd):
        return nx.sample_gaussian(stream.derive(prefix + name), 0.0, sd, math.prod(shape)).reshape(shape)

    return {
        prefix + "ln1.gain": torch.ones(d),
        prefix + "ln1.bias": torch.zeros(d),
        prefix + "attn.wq": normal("attn.wq", (d, d), std),
        # keys start equal to queries so matching inputs attend to each other
        prefix + "attn.wk": normal("attn.wq", (d, d), std),
        prefix + "attn.wv": normal("attn.wv", (d, d), std),
        prefix + "attn.wo": normal("attn.wo", (d, d), out_std),
        prefix + "ln2.gain": torch.ones(d),
        prefix + "ln2.bias": torch.zeros(d),
        prefix + "ffn.w1": normal("ffn.w1", (d, f), std),
        prefix + "ffn.b1": torch.zeros(f),
        prefix + "ffn.w2": normal("ffn.w2", (f, d), out_std),
        prefix + "ffn.b2": torch.zeros(d),
    }


FINAL_GAIN_INIT = 0.4


def init_weights(cfg: ModelConfig, stream: SeededStream) -> dict[str, torch.Tensor]:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    std = cfg.init_std
    out_std = std / math.sqrt(2 * cfg.n_layers)

    def normal(name, shape):
        return nx.sample_gaussian(stream.derive(name), 0.0, std, math.prod(shape)).reshape(shape)

    w = {
        "patch_proj.w": normal("patch_proj.w", (cfg.palette_size, d)),
        "patch_proj.b": torch.zeros(d),
        "tok_emb": normal("tok_emb", (V, d)),
        "pos_emb": normal("pos_emb", (cfg.max_seq, d)),
        # the tied output rows are large (they carry grounding terms); a small
        # final gain keeps the initial logits close to uniform
        "ln_f.gain": torch.full((d,), FINAL_GAIN_INIT),
        "ln_f.bias": torch.zeros(d),
    }
    for i in range(cfg.n_layers):
        w.update(init_block(f"layers.{i}.", d, f, stream, out_std, std))
    return dict(sorted(w.items()))


# --- forward ----------------------------------------------------------------

@dataclass
class Batch:
    """Padded model inputs for several samples."""

    grids: torch.Tensor  # [B, S] long
    text: torch.Tensor  # [B, T] long (right-padded)
    text_len: torch.Tensor  # [B] long
    samples: list[SyntheticSample] = field(default_factory=list)


def make_batch(samples: list[SyntheticSample], vocab: Vocab, extra: list[list[int]] | None = None) -> Batch:
    texts = [s.question + (extra[i] if extra else []) for i, s in enumerate(samples)]
    T = max(len(t) for t in texts)
    text = torch.full((len(samples), T), vocab.pad, dtype=torch.long)
    for i, t in enumerate(texts):
        text[i, : len(t)] = torch.tensor(t)
    return Batch(torch.tensor([s.grid for s in samples], dtype=torch.long), text,
                 torch.tensor([len(t) for t in texts]), samples)


def patch_features(cfg: ModelConfig, grids: torch.Tensor) -> torch.Tensor:
    """Per-cell encoder input: one-hot colour."""
    return torch.nn.functional.one_hot(grids, cfg.palette_size).to(nx.DTYPE)


@functools.lru_cache(maxsize=8)
def text_features(cfg: ModelConfig) -> torch.Tensor:
    """``[vocab, P + S]`` selector into :func:`grounding_table`.

    Colour words reuse the patch projector row of their colour and cell words
    reuse the positional embedding of their visual token, so ``cell12`` and
    visual token 12 share a direction, as do ``red`` and every red patch."""
    vocab = Vocab(cfg)
    P = cfg.palette_size
    feats = torch.zeros(cfg.vocab_size, P + cfg.n_visual)
    for c in range(P):
        feats[vocab[COLORS[c]], c] = 1.0
    for i in range(cfg.n_visual):
        feats[vocab[f"cell{i}"], P + i] = 1.0
    return feats


def grounding_table(w, cfg: ModelConfig) -> torch.Tensor:
    """``[P + S, d]``: colour projections stacked on visual positional embeddings."""
    return torch.cat([w["patch_proj.w"], w["pos_emb"][: cfg.n_visual]], dim=0)


def embed(w, cfg: ModelConfig, grids: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    S, T = grids.shape[1], text.shape[1]
    dt = w["pos_emb"].dtype
    vis = nx.matmul(patch_features(cfg, grids).to(dt), w["patch_proj.w"]) + w["patch_proj.b"] + w["pos_emb"][:S]
    txt = (w["tok_emb"][text] + nx.matmul(text_features(cfg)[text].to(dt), grounding_table(w, cfg))
           + w["pos_emb"][S:S + T])
    return torch.cat([vis, txt], dim=1)


@functools.lru_cache(maxsize=32)
def _causal_bias(n: int) -> torch.Tensor:
    return torch.full((n, n), float("-inf")).triu(1)


def block(w, prefix: str, n_heads: int, h: torch.Tensor, causal: bool = True,
          key_mask: torch.Tensor | None = None, want_attn: bool = False):
    """One pre-norm transformer block on ``h: [B, n, d]``.

    ``key_mask`` (``[B, n]`` bool) hides padding keys in non-causal use.
    """
    p = prefix
    B, n, d = h.shape
    H, hd = n_heads, d // n_heads
    x = nx.layer_norm(h, w[p + "ln1.gain"], w[p + "ln1.bias"])
    q = nx.matmul(x, w[p + "attn.wq"]).view(B, n, H, hd).transpose(1, 2)
    k = nx.matmul(x, w[p + "attn.wk"]).view(B, n, H, hd).transpose(1, 2)
    v = nx.matmul(x, w[p + "attn.wv"]).view(B, n, H, hd).transpose(1, 2)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
    if causal:
        scores = scores + _causal_bias(n)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    att = nx.softmax_rows(scores)
    o = (att @ v).transpose(1, 2).reshape(B, n, d)
    h = h + nx.matmul(o, w[p + "attn.wo"])
    x = nx.layer_norm(h, w[p + "ln2.gain"], w[p + "ln2.bias"])
    h = h + nx.matmul(nx.gelu(nx.matmul(x, w[p + "ffn.w1"]) + w[p + "ffn.b1"]), w[p + "ffn.w2"]) + w[p + "ffn.b2"]
    return (h, att) if want_attn else (h, None)


def output_embedding(w, cfg: ModelConfig) -> torch.Tensor:
    """``[vocab, d]``: the input word embeddings, reused as the output head."""
    return w["tok_emb"] + nx.matmul(text_features(cfg).to(w["tok_emb"].dtype), grounding_table(w, cfg))


def head(w, cfg: ModelConfig, h: torch.Tensor) -> torch.Tensor:
    return nx.matmul(nx.layer_norm(h, w["ln_f.gain"], w["ln_f.bias"]), output_embedding(w, cfg).T)


def run_batch(w, cfg: ModelConfig, batch: Batch, actions: list[PruneAction] | None = None,
              capture: bool = False, capture_attn_layers: set[int] | None = None):
    """Forward a padded batch under per-sample pruning actions.

    All actions in one call must share ``M`` and ``drop_at_layer``; layer
    skips may differ per sample. Returns ``(logits [B, n_active, V],
    positions [B, n_active], traces)`` where ``traces`` is a list of
    per-layer dicts (or ``None`` when not capturing).
    """
    B, S = batch.grids.shape
    T = batch.text.shape[1]
    h = embed(w, cfg, batch.grids, batch.text)
    pos = torch.arange(S + T).expand(B, S + T)
    skip = torch.zeros(B, cfg.n_layers, dtype=torch.bool)
    drop_at, keep = cfg.n_layers, None
    if actions is not None:
        if len(actions) != B:
            raise nx.ContractError("need one action per sample")
        for a in actions:
            a.validate(cfg)
        if len({(a.M, a.drop_at_layer) for a in actions if a.M}) > 1:
            raise nx.ContractError("actions in a batch must share M and drop_at_layer")
        for b, a in enumerate(actions):
            skip[b, list(a.dropped_layers)] = True
        dropping = [a for a in actions if a.M]
        if dropping:
            if len(dropping) != B:
                raise nx.ContractError("actions in a batch must share M")
            drop_at = actions[0].drop_at_layer
            keep = []
            for a in actions:
                gone = set(a.dropped_tokens)
                keep.append([j for j in range(S) if j not in gone] + list(range(S, S + T)))
            keep = torch.tensor(keep, dtype=torch.long)
    want = set(range(cfg.n_layers)) if capture else (capture_attn_layers or set())
    trace = {"hidden": [], "out": [], "attn": [], "pos": []} if (capture or capture_attn_layers) else None
    for i in range(cfg.n_layers + 1):
        if i == drop_at and keep is not None:
            h = torch.gather(h, 1, keep[:, :, None].expand(-1, -1, h.shape[-1]))
            pos = keep
        if i == cfg.n_layers:
            break
        if trace is not None:
            trace["hidden"].append(h)
            trace["pos"].append(pos)
        if bool(skip[:, i].all()):
            out, att = h, None
        else:
            out, att = block(w, f"layers.{i}.", cfg.n_heads, h, want_attn=i in want)
            if bool(skip[:, i].any()):
                out = torch.where(skip[:, i, None, None], h, out)
        if trace is not None:
            trace["out"].append(out)
            trace["attn"].append(att)
        h = out
    if trace is not None:
        trace["hidden"].append(h)
    return head(w, cfg, h), pos, trace


def answer_slot(batch: Batch, positions: torch.Tensor) -> torch.Tensor:
    """Row index of the last question token for each sample."""
    S = batch.grids.shape[1]
    target = S + torch.tensor([len(s.question) for s in batch.samples]) - 1
    return (positions == target[:, None]).float().argmax(dim=1)


def forward(w, cfg: ModelConfig, sample: SyntheticSample, action: PruneAction | None = None,
            capture: bool = False, vocab: Vocab | None = None):
    """Single-sample forward: ``(logits [n_active, V], TraceBundle | None)``."""
    batch = make_batch([sample], vocab or Vocab(cfg))
    logits, pos, tr = run_batch(w, cfg, batch, None if action is None else [action], capture=capture)
    bundle = None
    if tr is not None:
        bundle = TraceBundle(
            hidden_states=[x[0] for x in tr["hidden"]],
            layer_outputs=[x[0] for x in tr["out"]],
            attention=[None if a is None else a[0] for a in tr["attn"]],
            positions=[p[0].tolist() for p in tr["pos"]],
            n_visual=cfg.n_visual,
        )
    return logits[0], bundle


def answer_probs(w, cfg: ModelConfig, samples: list[SyntheticSample], actions: list[PruneAction] | None = None,
                 batch_size: int = 256, vocab: Vocab | None = None) -> torch.Tensor:
    """Answer-slot distributions ``[N, V]`` for many samples.

    Samples are processed in fixed-size chunks in input order, so the same
    inputs always produce the same bits.
    """
    vocab = vocab or Vocab(cfg)
    out = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            acts = None if actions is None else actions[lo:lo + batch_size]
            batch = make_batch(chunk, vocab)
            logits, pos, _ = run_batch(w, cfg, batch, acts)
            rows = answer_slot(batch, pos)
            out.append(nx.softmax_rows(logits[torch.arange(len(chunk)), rows]))
    return torch.cat(out)


def answer_distribution(w, cfg: ModelConfig, sample: SyntheticSample, action: PruneAction | None = None) -> torch.Tensor:
    """Softmax at the answer slot, which is always the last row (text is never dropped)."""
    with torch.no_grad():
        logits, _ = forward(w, cfg, sample, action)
        return nx.softmax_rows(logits[-1])


def accuracy(w, cfg: ModelConfig, samples: list[SyntheticSample], actions: list[PruneAction] | None = None) -> float:
    probs = answer_probs(w, cfg, samples, actions)
    pred = probs.argmax(dim=1)
    gold = torch.tensor([s.answer for s in samples])
    return float((pred == gold).float().mean())


def greedy_decode(w, cfg: ModelConfig, sample: SyntheticSample, action: PruneAction | None = None,
                  max_steps: int = 4) -> list[int]:
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    vocab = Vocab(cfg)
    emitted: list[int] = []
    with torch.no_grad():
        for _ in range(max_steps):
            if len(sample.question) + len(emitted) >= cfg.max_text_len:
                break
            batch = make_batch([sample], vocab, extra=[emitted])
            logits, _, _ = run_batch(w, cfg, batch, None if action is None else [action])
            tok = int(torch.argmax(logits[0, -1]))  # first max = lowest id on ties
            emitted.append(tok)
            if tok == vocab.end:
                break
    return emitted


# --- pretraining ------------------------------------------------------------

class DivergenceError(RuntimeError):
    pass


def lm_loss(w, cfg: ModelConfig, samples: list[SyntheticSample], vocab: Vocab) -> torch.Tensor:
    """Cross-entropy on the answer token (at the last question slot) and the ``<end>``
    token that follows it (teacher-forced)."""
    batch = make_batch(samples, vocab, extra=[[s.answer] for s in samples])
    logits, _, _ = run_batch(w, cfg, batch)
    S = batch.grids.shape[1]
    idx = torch.arange(len(batch.samples))
    q_len = torch.tensor([len(s.question) for s in batch.samples])
    ans = torch.tensor([s.answer for s in batch.samples])
    logp = torch.log_softmax(logits, dim=-1)
    nll_ans = -logp[idx, S + q_len - 1, ans]
    nll_end = -logp[idx, S + q_len, torch.full_like(ans, vocab.end)]
    return (nll_ans.mean() + nll_end.mean()) / 2


@dataclass
class PretrainConfig:
    steps: int = 3000
    lr: float = 3e-4
    batch_size: int = 32
    betas: tuple[float, float] = (0.9, 0.999)
    warmup: int = 100
    eval_every: int = 250
    grad_clip: float = 1.0


def pretrain(cfg: ModelConfig, train: list[SyntheticSample], evalset: list[SyntheticSample],
             pcfg: PretrainConfig, stream: SeededStream, metrics_path: str | Path | None = None,
             init: dict | None = None):
    """Train the toy model; returns ``(weights, metrics rows)``."""
    train_keys = {sample_key(s) for s in train}
    if any(sample_key(s) in train_keys for s in evalset):
        raise ValueError("train and eval sets overlap")
    vocab = Vocab(cfg)
    w = {n: p.clone().requires_grad_(True) for n, p in (init or init_weights(cfg, stream.derive("init"))).items()}
    opt = torch.optim.Adam(list(w.values()), lr=pcfg.lr, betas=pcfg.betas)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / pcfg.warmup) * (
        0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(s, pcfg.steps) / max(pcfg.steps, 1)))))
    order = stream.derive("order")
    rows = []

    def evaluate(step, loss):
        acc = accuracy({n: p.detach() for n, p in w.items()}, cfg, evalset)
        rows.append({"step": step, "loss": round(float(loss), 6), "eval_acc": round(acc, 6)})
        log.info("step %d loss %.4f eval_acc %.4f", step, loss, acc)

    with torch.no_grad():
        first = lm_loss(w, cfg, train[: pcfg.batch_size], vocab).item()
    evaluate(0, first)
    for step in range(1, pcfg.steps + 1):
        idx = order.integers(len(train), pcfg.batch_size)
        loss = lm_loss(w, cfg, [train[i] for i in idx], vocab)
        if not torch.isfinite(loss):
            raise DivergenceError(f"loss became {loss.item()} at step {step}")
        opt.zero_grad()
        grads = nx.backward(loss, w)
        for n, p in w.items():
            p.grad = grads[n]
        torch.nn.utils.clip_grad_norm_(list(w.values()), pcfg.grad_clip)
        opt.step()
        sched.step()
        if step % pcfg.eval_every == 0 or step == pcfg.steps:
            evaluate(step, loss.item())
    if metrics_path is not None:
        write_metrics(rows, metrics_path)
    return {n: p.detach().clone() for n, p in w.items()}, rows


def write_metrics(rows: list[dict], path: str | Path, provenance: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for k in sorted(provenance or {}):
            fh.write(f"# {k}: {provenance[k]}\n")
        wr = csv.DictWriter(fh, fieldnames=["step", "loss", "eval_acc"])
        wr.writeheader()
        wr.writerows(rows)


def config_hash(obj) -> str:
    payload = json.dumps(asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def param_count_formula(cfg: ModelConfig) -> int:
    d, f, V, P = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.palette_size
    per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d
    return P * d + d + V * d + cfg.max_seq * d + cfg.n_layers * per_layer + 2 * d

