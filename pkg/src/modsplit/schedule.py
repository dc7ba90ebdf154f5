"""Learning-rate schedules and the stage-wise freezing controller."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum

from .errors import ContractViolation
from .numerics import Group

FINAL_RATIO = 0.1


@dataclass(frozen=True)
class LayerwiseScheduleParams:
    """Delayed warmup-cosine schedule for gradual last-to-first unfreezing.

    Layer i stays at zero until ``d_i = (N-1-i)*k``, warms up linearly for
    ``w`` steps, then cosine-decays to ``r*eta_max`` at global step ``T``.
    """

    N: int
    k: int
    w: int
    T: int
    eta_max: float
    r: float = FINAL_RATIO

    def __post_init__(self):
        if min(self.N, self.k, self.w, self.T) <= 0:
            raise ContractViolation("layerwise schedule counts must be positive")
        if self.T <= (self.N - 1) * self.k + self.w:
            raise ContractViolation("T must exceed (N-1)*k + w so every decay span is positive")
        if self.eta_max < 0:
            raise ContractViolation("eta_max must be non-negative")

    @property
    def eta_min(self) -> float:
        return self.r * self.eta_max

    def delay(self, i: int) -> int:
        return (self.N - 1 - i) * self.k

    def decay_span(self, i: int) -> int:
        return self.T - self.delay(i) - self.w


def layerwise_lr(params: LayerwiseScheduleParams, i: int, s: int) -> float:
    if not 0 <= i < params.N:
        raise ContractViolation(f"layer index {i} outside [0, {params.N})")
    if s < 0:
        raise ContractViolation("step must be non-negative")
    u = s - params.delay(i)
    w = params.w
    if u < 0:
        return 0.0
    if u < w:
        return params.eta_max * u / w
    if u == w:
        # cos(0) branch; avoids lo + (hi - lo) rounding away from hi
        return params.eta_max
    span = params.decay_span(i)
    lo, hi = params.eta_min, params.eta_max
    if u <= w + span:
        return lo + (hi - lo) / 2 * (1 + math.cos(math.pi * (u - w) / span))
    return lo


@dataclass(frozen=True)
class CosineScheduleParams:
    eta_start: float
    eta_end: float
    warmup: int
    total: int

    def __post_init__(self):
        if self.warmup < 0 or self.total <= self.warmup:
            raise ContractViolation("cosine schedule needs total > warmup >= 0")
        if self.eta_end > self.eta_start:
            raise ContractViolation("eta_end must not exceed eta_start")

    @classmethod
    def with_warmup_fraction(cls, eta_start, eta_end, total, fraction=0.01):
        return cls(eta_start, eta_end, int(total * fraction), total)


def cosine_lr(params: CosineScheduleParams, step: int) -> float:
    """Linear warmup from 0, cosine decay to ``eta_end``, then constant."""
    if step < 0:
        raise ContractViolation("step must be non-negative")
    if step < params.warmup:
        return params.eta_start * step / params.warmup
    if step >= params.total:
        return params.eta_end
    frac = (step - params.warmup) / (params.total - params.warmup)
    return params.eta_end + (params.eta_start - params.eta_end) / 2 * (1 + math.cos(math.pi * frac))


class Stage(str, Enum):
    STAGE1 = "stage1"
    STAGE2_FULL = "stage2_full"
    STAGE2_SHARED = "stage2_shared"
    STAGE2_LAYERWISE = "stage2_layerwise"
    NF = "nf"
    SFT = "sft"


_KNOWN_NAME = re.compile(
    r"^(text_embed|speech_embed|pos_embed|embed|ln_f\.[gb]|head\.[wb]|"
    r"(text|speech)_head\.[wb]|(text|speech)_branch\.ln_f\.[gb]|"
    r"(shared|blocks|text_branch|speech_branch)\.\d+\.(ln[12]\.[gb]|attn\.w[qkvo]|ff\.[wb][12]))$"
)
_SHARED = re.compile(r"^shared\.(\d+)\.")


@dataclass(frozen=True)
class FreezePlan:
    stage: Stage
    cosine: CosineScheduleParams
    layerwise: LayerwiseScheduleParams | None = None

    def __post_init__(self):
        if self.stage == Stage.STAGE2_LAYERWISE and self.layerwise is None:
            raise ContractViolation("layerwise stage needs LayerwiseScheduleParams")

    def is_trainable(self, name: str, group: Group) -> bool:
        if not _KNOWN_NAME.match(name):
            raise ContractViolation(f"unknown tensor name {name!r}")
        speech = group == Group.SPEECH_NEW
        if self.stage == Stage.STAGE1:
            return speech
        if self.stage in (Stage.STAGE2_SHARED, Stage.STAGE2_LAYERWISE):
            return speech or name.startswith("shared.")
        return True

    def layer_index(self, name: str) -> int | None:
        """Shared-block index governed by the layerwise schedule, if any."""
        if self.stage != Stage.STAGE2_LAYERWISE:
            return None
        m = _SHARED.match(name)
        return int(m.group(1)) if m else None


@dataclass
class PlanState:
    step: int
    trainable: dict = field(default_factory=dict)
    lr: dict = field(default_factory=dict)
    _layerwise: set = field(default_factory=set, repr=False)

    def groups(self) -> dict:
        """Distinct lr groups at this step: label -> lr."""
        out = {}
        for name, rate in self.lr.items():
            m = _SHARED.match(name)
            if m and name in self._layerwise:
                label = f"shared.{m.group(1)}"
            else:
                label = "global"
            out.setdefault(label, rate)
        return out


def apply_plan(model, plan: FreezePlan, step: int) -> PlanState:
    """Set every tensor's trainable flag for ``plan`` and return per-tensor lrs.

    Frozen tensors drop their optimizer state and get no lr entry.
    """
    if plan.layerwise is not None and plan.stage == Stage.STAGE2_LAYERWISE:
        n_shared = getattr(model.config, "n_shared", None)
        if plan.layerwise.N != n_shared:
            raise ContractViolation(f"layerwise N={plan.layerwise.N} but model has {n_shared} shared blocks")
    state = PlanState(step)
    base = cosine_lr(plan.cosine, step)
    for name, p in model.params.items():
        flag = plan.is_trainable(name, p.group)
        p.set_trainable(flag)
        state.trainable[name] = flag
        if not flag:
            continue
        idx = plan.layer_index(name)
        if idx is None:
            state.lr[name] = base
        else:
            state.lr[name] = layerwise_lr(plan.layerwise, idx, step)
            state._layerwise.add(name)
    return state
