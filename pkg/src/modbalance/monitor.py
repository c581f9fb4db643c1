"""Training-dynamics controller for imbalanced multi-modal training.

Tracks per-modality distillation gaps with an adaptively-decayed EMA,
derives counteractive loss weights (small gap -> small weight), and scales
modality-specific encoder gradients inversely to those weights, damping the
scale when consecutive gradient directions conflict.

All state arithmetic is plain float64 so the update rules can be checked
against closed-form oracles bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import torch

GAMMA_MIN = 0.1
GAMMA_MAX = 10.0
CONFLICT_THRESHOLD = -0.5
CONFLICT_DAMPING = 0.7
RUNNING_MEAN_DECAY = 0.99


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def adaptive_decay(prev_relation_gap: float, prev_prototype_gap: float, eps: float = 1e-8) -> float:
    """Decay coefficient for the gap EMA, from the previous step's raw gaps.

    ratio = (g_rel + eps) / (g_proto + eps); decay = 0.9 * (1 - sigmoid(ratio)).
    Lies in (0, 0.45]: the larger the relation gap relative to the prototype
    gap, the faster the EMA tracks new observations.
    """
    if prev_relation_gap < 0 or prev_prototype_gap < 0:
        raise ValueError("gaps must be non-negative")
    ratio = (prev_relation_gap + eps) / (prev_prototype_gap + eps)
    return 0.9 * (1.0 - sigmoid(ratio))


def counteractive_weights(total_gaps: Dict[int, float], eps: float = 1e-8) -> Dict[int, float]:
    """Inverse-gap weights normalized over the present modalities.

    w(m) = (1/g(m)) / sum_m' (1/g(m')). Modalities closer to the fused
    teacher (small gap) are down-weighted so lagging ones catch up.
    """
    if not total_gaps:
        raise ValueError("no present modalities")
    inv = {m: 1.0 / (g + eps) for m, g in total_gaps.items()}
    norm = sum(inv.values())
    return {m: v / norm for m, v in inv.items()}


@dataclass
class RebalanceDecision:
    """Per-step controller output for one modality."""

    weight: float
    scale: float
    similarity: Optional[float] = None  # None until a previous gradient exists
    damped: bool = False


@dataclass
class GapTracker:
    """EMA state over per-modality relation/prototype distillation gaps.

    Per modality the tracker keeps the smoothed gaps, the previous step's raw
    observations (they set the adaptive decay), and the previous unscaled
    encoder gradient. Two scalar running means over all present-modality
    observations set the relation-vs-prototype mixing ratio.
    """

    n_modalities: int
    eps: float = 1e-8
    step: int = 0
    ema_relation: Dict[int, float] = field(default_factory=dict)
    ema_prototype: Dict[int, float] = field(default_factory=dict)
    prev_raw_relation: Dict[int, float] = field(default_factory=dict)
    prev_raw_prototype: Dict[int, float] = field(default_factory=dict)
    running_relation: Optional[float] = None
    running_prototype: Optional[float] = None
    prev_grad: Dict[int, torch.Tensor] = field(default_factory=dict)

    def observe(self, relation_gaps: Dict[int, float], prototype_gaps: Dict[int, float]) -> None:
        """Fold this step's raw gaps (present modalities only) into the EMAs.

        A modality seen for the first time initializes its EMA to the raw
        observation; afterwards ema <- a*ema + (1-a)*obs with a from the
        previous step's raw gaps. Modalities absent this step keep their
        state untouched.
        """
        if set(relation_gaps) != set(prototype_gaps):
            raise ValueError("relation and prototype observations must cover the same modalities")
        for m, g in list(relation_gaps.items()) + list(prototype_gaps.items()):
            if not (m in range(self.n_modalities)):
                raise ValueError(f"modality index {m} out of range")
            if not math.isfinite(g) or g < 0:
                raise ValueError(f"invalid gap observation {g} for modality {m}")

        for m in relation_gaps:
            g_rel = float(relation_gaps[m])
            g_proto = float(prototype_gaps[m])
            if m not in self.ema_relation:
                self.ema_relation[m] = g_rel
                self.ema_prototype[m] = g_proto
            else:
                decay = adaptive_decay(self.prev_raw_relation[m], self.prev_raw_prototype[m], self.eps)
                self.ema_relation[m] = decay * self.ema_relation[m] + (1.0 - decay) * g_rel
                self.ema_prototype[m] = decay * self.ema_prototype[m] + (1.0 - decay) * g_proto
            self.prev_raw_relation[m] = g_rel
            self.prev_raw_prototype[m] = g_proto

        if relation_gaps:
            mean_rel = sum(relation_gaps.values()) / len(relation_gaps)
            mean_proto = sum(prototype_gaps.values()) / len(prototype_gaps)
            if self.running_relation is None:
                self.running_relation = mean_rel
                self.running_prototype = mean_proto
            else:
                d = RUNNING_MEAN_DECAY
                self.running_relation = d * self.running_relation + (1.0 - d) * mean_rel
                self.running_prototype = d * self.running_prototype + (1.0 - d) * mean_proto
        self.step += 1

    def mixing_ratio(self) -> float:
        """Relation share of the total gap: rbar / (rbar + pbar), 0.5 at 0/0."""
        r = self.running_relation or 0.0
        p = self.running_prototype or 0.0
        return (r + self.eps) / (r + p + 2.0 * self.eps)

    def total_gap(self, m: int) -> float:
        """Mix the smoothed relation/prototype gaps of modality m."""
        if m not in self.ema_relation:
            raise KeyError(f"modality {m} has no gap observations yet")
        a2 = self.mixing_ratio()
        return a2 * self.ema_relation[m] + (1.0 - a2) * self.ema_prototype[m]

    def decide(self, present: Sequence[int]) -> Dict[int, RebalanceDecision]:
        """Loss weights and gradient scales for the present modalities.

        Only usable after every present modality has at least one gap
        observation. The similarity/damped fields are filled in later by
        scale_gradients (they need this step's gradients).
        """
        gaps = {m: self.total_gap(m) for m in present}
        weights = counteractive_weights(gaps, self.eps)
        out = {}
        for m in present:
            scale = min(max(1.0 / weights[m], GAMMA_MIN), GAMMA_MAX)
            out[m] = RebalanceDecision(weight=weights[m], scale=scale)
        return out

    def state_dict(self) -> dict:
        return {
            "n_modalities": self.n_modalities,
            "eps": self.eps,
            "step": self.step,
            "ema_relation": dict(self.ema_relation),
            "ema_prototype": dict(self.ema_prototype),
            "prev_raw_relation": dict(self.prev_raw_relation),
            "prev_raw_prototype": dict(self.prev_raw_prototype),
            "running_relation": self.running_relation,
            "running_prototype": self.running_prototype,
            "prev_grad": {m: g.clone() for m, g in self.prev_grad.items()},
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "GapTracker":
        tracker = cls(n_modalities=state["n_modalities"], eps=state["eps"])
        tracker.step = state["step"]
        tracker.ema_relation = dict(state["ema_relation"])
        tracker.ema_prototype = dict(state["ema_prototype"])
        tracker.prev_raw_relation = dict(state["prev_raw_relation"])
        tracker.prev_raw_prototype = dict(state["prev_raw_prototype"])
        tracker.running_relation = state["running_relation"]
        tracker.running_prototype = state["running_prototype"]
        tracker.prev_grad = {m: g.clone() for m, g in state["prev_grad"].items()}
        return tracker


def gradient_similarity(current: torch.Tensor, previous: torch.Tensor) -> float:
    """Cosine of consecutive flattened gradients; 0.0 when either has zero norm."""
    cn = torch.linalg.vector_norm(current)
    pn = torch.linalg.vector_norm(previous)
    if cn.item() == 0.0 or pn.item() == 0.0:
        return 0.0
    return float(torch.dot(current, previous) / (cn * pn))


def flatten_gradients(params: Iterable[torch.Tensor]) -> torch.Tensor:
    """Concatenate parameter gradients in parameter order (zeros where None)."""
    chunks: List[torch.Tensor] = []
    for p in params:
        if p.grad is None:
            chunks.append(torch.zeros(p.numel(), dtype=p.dtype))
        else:
            chunks.append(p.grad.detach().reshape(-1))
    if not chunks:
        raise ValueError("no parameters to flatten")
    return torch.cat(chunks)


def scale_gradients(
    tracker: GapTracker,
    encoder_params: Dict[int, List[torch.Tensor]],
    decisions: Dict[int, RebalanceDecision],
) -> Dict[int, RebalanceDecision]:
    """Scale each present modality's encoder gradients in place.

    Multiplier is the clipped inverse weight, further damped by 0.7 when the
    cosine between this step's and the previous step's (unscaled) gradients
    drops below -0.5. The stored previous gradient is always the unscaled one,
    so the similarity measures raw optimization conflict rather than
    controller-induced conflict.
    """
    for m, params in encoder_params.items():
        if m not in decisions:
            raise KeyError(f"modality {m} present but has no rebalance decision")
        flat = flatten_gradients(params)
        if not bool(torch.isfinite(flat).all()):
            raise FloatingPointError(f"non-finite gradient for modality {m} encoder")
        decision = decisions[m]
        if m in tracker.prev_grad:
            sim = gradient_similarity(flat, tracker.prev_grad[m])
            decision.similarity = sim
            decision.damped = sim < CONFLICT_THRESHOLD
        else:
            decision.similarity = None
            decision.damped = False
        multiplier = decision.scale * (CONFLICT_DAMPING if decision.damped else 1.0)
        for p in params:
            if p.grad is not None:
                p.grad.mul_(multiplier)
        tracker.prev_grad[m] = flat
    return decisions
