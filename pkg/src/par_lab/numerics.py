"""Deterministic tensor helpers, reverse-mode gradients, and seeded sampling.

Tensors are plain ``torch.Tensor`` values in float32. Gradients come from
torch's tape (``torch.autograd``); :func:`grad_check` is an independent
central-difference oracle evaluated in float64.

Randomness never touches torch's or numpy's global generators. Every draw
comes from a :class:`SeededStream`, a counter-based SplitMix64 generator:
draw ``i`` of a stream with seed ``s`` is ``mix64(s + (i + 1) * GOLDEN)``,
so a sequence is a pure function of ``(seed, counter)`` on every platform.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Callable, Iterator, Mapping
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32
LOG_FLOOR = 1e-12
LN_EPS = 1e-5

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


class SeededStream:
    """Counter-based 64-bit generator (SplitMix64 over a counter)."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"SeededStream(seed={self.seed}, counter={self.counter})"

    def derive(self, label: str) -> SeededStream:
        """Independent child stream: seed XOR hash(label), counter reset."""
        return SeededStream(self.seed ^ label_hash(label))

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
        return _mix64(z)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 draws strictly inside (0, 1)."""
        return ((self.bits(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int) -> list[int]:
        """Sorted ``k``-subset of ``range(n)``, uniform without replacement."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot choose {k} of {n}")
        return sorted(int(i) for i in self.permutation(n)[:k])


def sample_gaussian(stream: SeededStream, mean: float, std: float, n: int) -> torch.Tensor:
    """Box-Muller normals from the stream's uniforms."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return torch.full((n,), float(mean), dtype=DTYPE)
    pairs = (n + 1) // 2
    u = stream.uniform(2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return torch.from_numpy(mean + std * z[:n]).to(DTYPE)


def tensor(data, shape=None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float32))
    return t.reshape(shape) if shape is not None else t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis (torch's kernel subtracts the row max)."""
    return torch.softmax(x, dim=-1)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def safe_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(x, min=LOG_FLOOR))


# --- parameter sets ---------------------------------------------------------

ParamSet = dict  # str -> torch.Tensor, iterated in sorted-name order
GradRecord = dict


def ordered(params: Mapping[str, torch.Tensor]) -> Iterator[tuple[str, torch.Tensor]]:
    for name in sorted(params):
        yield name, params[name]


def param_count(params: Mapping[str, torch.Tensor]) -> int:
    return sum(p.numel() for p in params.values())


def params_hash(params: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name, p in ordered(params):
        h.update(name.encode())
        h.update(str(tuple(p.shape)).encode())
        h.update(p.detach().to(DTYPE).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> GradRecord:
    """Gradient of a scalar ``loss`` w.r.t. every trainable entry of ``params``.

    Parameters that do not reach the loss get an explicit zero gradient.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = [n for n, p in ordered(params) if p.requires_grad]
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)}


def grad_check(f: Callable[[Mapping[str, torch.Tensor]], torch.Tensor], params: Mapping[str, torch.Tensor],
               h: float = 1e-3, atol: float = 1e-10) -> float:
    """Max over parameters of ``|g_bwd - g_fd| / (|g_bwd| + |g_fd|)`` (L2 norms).

    ``f`` maps a parameter set to a scalar. Everything is evaluated in float64
    so the central difference is not drowned in rounding noise. Parameters
    whose two gradient norms are both below ``atol`` count as agreeing: a
    ratio of two roundoff residues says nothing.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {n: p.detach().to(torch.float64) for n, p in params.items()}
    live = {n: p.clone().requires_grad_(True) for n, p in base.items()}
    analytic = backward(f(live), live)
    worst = 0.0
    for name in sorted(base):
        flat = base[name].reshape(-1)
        numeric = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = f(base).item()
            flat[i] = orig - h
            down = f(base).item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        a = analytic[name].reshape(-1)
        denom = (a.norm() + numeric.norm()).item()
        if max(a.norm().item(), numeric.norm().item()) > atol:
            worst = max(worst, (a - numeric).norm().item() / denom)
    return worst


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(params: Mapping[str, torch.Tensor], path: str | Path, extra: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f32 blob)."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, p in ordered(params):
        raw = p.detach().to(DTYPE).contiguous().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "byte_offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"entries": entries, "dtype": "float32-le"}
    if extra:
        manifest["extra"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(b"".join(blobs))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    params = {}
    for e in manifest["entries"]:
        n = math.prod(e["shape"]) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["byte_offset"])
        params[e["name"]] = torch.from_numpy(arr.copy()).reshape(e["shape"])
    return params, manifest.get("extra", {})
