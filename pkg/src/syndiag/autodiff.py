"""Reverse-mode differentiation and the decoupled-decay Adam optimizer.

Tensors are plain ``torch.Tensor`` objects in float64; torch's autograd tape
does the bookkeeping. This module adds the pieces every training stage
shares: a checked ``backward``, a functional AdamW step, seeded counter-based
random streams, content hashes, and a central finite-difference checker.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64
Tensor = torch.Tensor


def rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator; ``stream`` ids derive independent substreams."""
    return np.random.Generator(np.random.Philox(key=_mix(seed, *stream)))


def _mix(seed: int, *stream: int) -> int:
    h = hashlib.blake2b(repr((int(seed),) + tuple(int(s) for s in stream)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def tensor(values, requires_grad: bool = False) -> Tensor:
    return torch.tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def normal(gen: np.random.Generator, shape: Sequence[int], std: float = 1.0) -> Tensor:
    return torch.from_numpy(gen.normal(0.0, std, size=tuple(shape))).to(DTYPE)


def backward(root: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Back-propagate from a scalar ``root``.

    With ``params`` the gradients are returned (zeros for unreachable
    entries) and ``.grad`` fields are left untouched; without, gradients
    accumulate into ``.grad`` of every reachable leaf as usual.
    """
    if root.numel() != 1:
        raise ValueError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any differentiable parameter")
    if params is None:
        root.backward()
        return {}
    names = list(params)
    leaves = [params[n] for n in names]
    grads = torch.autograd.grad(root.reshape(()), leaves, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, leaves, grads)}


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 <= self.weight_decay < 1:
            raise ValueError("weight_decay must lie in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@torch.no_grad()
def optimizer_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor],
    config: OptimizerConfig,
    step_index: int,
    moments: list[tuple[Tensor, Tensor]] | None = None,
) -> list[tuple[Tensor, Tensor]]:
    """One in-place AdamW update; returns the updated (first, second) moments.

    Decay is applied multiplicatively before the adaptive step and never
    passes through the moment estimates.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if moments is None:
        moments = [(torch.zeros_like(p), torch.zeros_like(p)) for p in params]
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2 = config.beta1, config.beta2
    bc1 = 1 - b1**step_index
    bc2 = 1 - b2**step_index
    out = []
    for p, g, (m, v) in zip(params, grads, moments):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        p.mul_(1 - lr * wd)
        m = m.mul(b1).add_(g, alpha=1 - b1)
        v = v.mul(b2).addcmul_(g, g, value=1 - b2)
        denom = (v.sqrt() / bc2**0.5).add_(config.epsilon)
        p.addcdiv_(m, denom, value=-lr / bc1)
        out.append((m, v))
    return out


class AdamW:
    """Stateful wrapper around :func:`optimizer_step` for training loops."""

    def __init__(self, params: Iterable[Tensor], config: OptimizerConfig):
        self.params = [p for p in params if p.requires_grad]
        self.config = config
        self.step_index = 0
        self.moments: list[tuple[Tensor, Tensor]] | None = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_index += 1
        grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in self.params]
        self.moments = optimizer_step(self.params, grads, self.config, self.step_index, self.moments)


def content_hash(tensors: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]]) -> str:
    """SHA-256 over names, shapes and float64 bytes, in sorted name order."""
    items = sorted(tensors.items() if isinstance(tensors, Mapping) else tensors, key=lambda kv: kv[0])
    h = hashlib.sha256()
    for name, t in items:
        arr = t.detach().to(DTYPE).contiguous().numpy()
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function of a float64 array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative discrepancy, guarded for vanishing gradients."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)
