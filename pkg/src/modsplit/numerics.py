"""Numerical substrate: seeded RNG, transformer primitives, and AdamW.

Dense math and reverse-mode gradients run on torch CPU tensors. Everything
stochastic draws from :class:`Rng` so that runs are reproducible from a
single integer seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import torch

from .errors import ContractViolation, NoSupervisedPositions, TrainingDiverged

MASK64 = (1 << 64) - 1
LN_EPS = 1e-5


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """xoshiro256** generator seeded through splitmix64."""

    def __init__(self, seed: int = 0):
        self.seed = seed & MASK64
        sm = self.seed
        state = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            state.append(out)
        self.s = state

    @classmethod
    def from_state(cls, state):
        rng = cls.__new__(cls)
        rng.seed = None
        rng.s = [int(w) & MASK64 for w in state]
        return rng

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of resolution."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        if hi < lo:
            raise ContractViolation(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        # rejection keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + x % span

    def normal(self) -> float:
        u1 = self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def categorical(self, probs) -> int:
        """Index drawn from a (not necessarily normalized) weight vector."""
        total = float(sum(probs))
        x = self.random() * total
        acc = 0.0
        last = 0
        for i, p in enumerate(probs):
            if p <= 0:
                continue
            acc += p
            last = i
            if x < acc:
                return i
        return last

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    def derive(self, stream: int) -> "Rng":
        """Independent child generator for a numbered sub-stream."""
        return Rng(self.next_u64() ^ (stream & MASK64))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.next_u64() >> 1)
        return g


def normal_init(shape, std: float, rng: Rng, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(*shape, generator=rng.torch_generator(), dtype=torch.float64).mul_(std).to(dtype)


# --------------------------------------------------------------------------
# forward primitives


def gelu(x):
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax(x):
    x = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(x)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x, gain, bias, eps: float = LN_EPS):
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def linear(x, w, b=None):
    if x.shape[-1] != w.shape[0]:
        raise ContractViolation(f"shape mismatch: {tuple(x.shape)} @ {tuple(w.shape)}")
    y = x @ w
    return y if b is None else y + b


def causal_attention(q, k, v, n_heads: int):
    """Multi-head scaled dot-product attention with a causal mask.

    q, k, v are (batch, length, d_model) projections.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ContractViolation("q, k, v shapes differ")
    B, L, d = q.shape
    if d % n_heads:
        raise ContractViolation(f"n_heads={n_heads} does not divide d_model={d}")
    dh = d // n_heads

    def split(t):
        return t.reshape(B, L, n_heads, dh).transpose(1, 2)

    q, k, v = split(q), split(k), split(v)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    future = torch.triu(torch.ones(L, L, dtype=torch.bool), diagonal=1)
    scores = scores.masked_fill(future, float("-inf"))
    out = softmax(scores) @ v
    return out.transpose(1, 2).reshape(B, L, d)


def log_softmax(logits):
    m = logits.max(dim=-1, keepdim=True).values.detach()
    z = logits - m
    return z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))


def cross_entropy_sum(logits, targets, mask):
    """Summed cross-entropy over mask-selected rows. Returns (sum, count)."""
    if logits.dim() != 2 or targets.shape != logits.shape[:1] or mask.shape != targets.shape:
        raise ContractViolation("cross-entropy shape mismatch")
    count = int(mask.sum())
    if count == 0:
        return logits.new_zeros(()), 0
    rows = logits[mask]
    tgt = targets[mask]
    if int(tgt.min()) < 0 or int(tgt.max()) >= logits.shape[1]:
        raise ContractViolation("target id out of range")
    nll = -log_softmax(rows).gather(1, tgt.unsqueeze(1)).squeeze(1)
    return nll.sum(), count


def masked_cross_entropy(logits, targets, mask):
    total, count = cross_entropy_sum(logits, targets, mask)
    if count == 0:
        raise NoSupervisedPositions()
    return total / count


# --------------------------------------------------------------------------
# parameters and optimization


class Group(str, Enum):
    TEXT_BACKBONE = "text_backbone"
    SPEECH_NEW = "speech_new"


@dataclass(eq=False)
class ParamTensor:
    name: str
    value: torch.Tensor
    group: Group = Group.TEXT_BACKBONE
    trainable: bool = True
    exp_avg: torch.Tensor | None = None
    exp_avg_sq: torch.Tensor | None = None
    step: int = 0
    reads: int = field(default=0, repr=False)

    def __post_init__(self):
        self.value.requires_grad_(self.trainable)

    @property
    def grad(self):
        if self.value.grad is None:
            return torch.zeros_like(self.value)
        return self.value.grad

    def set_trainable(self, flag: bool) -> None:
        if flag == self.trainable:
            return
        self.trainable = flag
        self.value.requires_grad_(flag)
        if not flag:
            self.value.grad = None
            self.exp_avg = None
            self.exp_avg_sq = None
            self.step = 0

    def zero_grad(self) -> None:
        self.value.grad = None


def backward(loss) -> None:
    """Accumulate d(loss)/d(param) into every reachable trainable tensor."""
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise ContractViolation("backward needs a scalar loss tensor")
    if loss.grad_fn is None:
        raise ContractViolation("backward called on a value with no recorded forward graph")
    loss.backward()


@torch.no_grad()
def adamw_step(params, lr, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.1) -> None:
    """One decoupled-weight-decay Adam update.

    ``lr`` is a float applied to every tensor or a mapping name -> lr. A tensor
    whose lr is exactly 0 is left untouched, moments and step counter included.
    """
    for p in params:
        if not p.trainable:
            continue
        rate = lr.get(p.name, 0.0) if isinstance(lr, dict) else lr
        if rate == 0.0:
            continue
        g = p.grad
        if not torch.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in tensor {p.name!r}")
        if p.exp_avg is None:
            p.exp_avg = torch.zeros_like(p.value)
            p.exp_avg_sq = torch.zeros_like(p.value)
            p.step = 0
        p.step += 1
        v = p.value
        if weight_decay:
            v.mul_(1.0 - rate * weight_decay)
        p.exp_avg.mul_(beta1).add_(g, alpha=1.0 - beta1)
        p.exp_avg_sq.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        bc1 = 1.0 - beta1**p.step
        bc2 = 1.0 - beta2**p.step
        denom = (p.exp_avg_sq / bc2).sqrt_().add_(eps)
        v.addcdiv_(p.exp_avg, denom, value=-rate / bc1)


def set_threads(n: int) -> None:
    torch.set_num_threads(max(1, int(n)))
    torch.use_deterministic_algorithms(True)
