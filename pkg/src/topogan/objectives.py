"""Adversarial objectives over discriminator score batches.

Four formulations are exposed by name: `gan` and `cgan` share the two-term
score formula (conditioning happens upstream, in how the scores were
produced); `crcgan-a` and `crcgan-b` add a third discriminator term that
scores real images paired with a wrong condition (variant A: random
condition y2 for the same image; variant B: a second real image whose true
condition differs from y). Discriminator losses are negated objectives, so
both players minimize. All logs carry the global 1e-12 floor clamp.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, log_clamped, mean
from .data import ClassLabel, Continuous
from .exceptions import ContractError, DomainError

MISMATCH_MARGIN = 0.05
_MAX_RESAMPLES = 10_000


@dataclass
class ScoreBatch:
    """Discriminator outputs for the three input groups an objective may use."""

    d_real_matched: Tensor
    d_fake: Tensor
    d_real_mismatched: Tensor | None = None

    def __post_init__(self):
        self.d_real_matched = _as_score_tensor(self.d_real_matched, "d_real_matched")
        self.d_fake = _as_score_tensor(self.d_fake, "d_fake")
        if self.d_real_mismatched is not None:
            self.d_real_mismatched = _as_score_tensor(
                self.d_real_mismatched, "d_real_mismatched")
            if self.d_real_mismatched.data.shape != self.d_real_matched.data.shape:
                raise ContractError("score groups must share the batch size")
        if self.d_fake.data.shape != self.d_real_matched.data.shape:
            raise ContractError("score groups must share the batch size")


def _as_score_tensor(scores, name: str) -> Tensor:
    t = scores if isinstance(scores, Tensor) else Tensor(scores)
    if t.data.size == 0:
        raise ContractError(f"{name}: empty score batch")
    if t.data.min() < 0.0 or t.data.max() > 1.0:
        raise ContractError(f"{name}: scores must lie in [0, 1]")
    return t


def _generator_loss(d_fake: Tensor, non_saturating: bool) -> Tensor:
    if non_saturating:
        return -mean(log_clamped(d_fake))
    return mean(log_clamped(1.0 - d_fake))


def gan_losses(scores: ScoreBatch, non_saturating: bool = False) -> tuple[Tensor, Tensor]:
    """Two-term adversarial game: d_loss = -E[log D(x)] - E[log(1 - D(G(z)))]."""
    if scores.d_real_mismatched is not None:
        raise ContractError("gan_losses takes no mismatched scores")
    d_loss = -mean(log_clamped(scores.d_real_matched)) \
        - mean(log_clamped(1.0 - scores.d_fake))
    return d_loss, _generator_loss(scores.d_fake, non_saturating)


def cgan_losses(scores: ScoreBatch, non_saturating: bool = False) -> tuple[Tensor, Tensor]:
    """Identical formula to gan_losses; every score is condition-dependent."""
    return gan_losses(scores, non_saturating)


def _three_term_losses(scores: ScoreBatch, non_saturating: bool,
                       mismatch_weight: float) -> tuple[Tensor, Tensor]:
    if scores.d_real_mismatched is None:
        raise ContractError("this objective needs mismatched real scores")
    d_loss = -mean(log_clamped(scores.d_real_matched)) \
        - mismatch_weight * mean(log_clamped(1.0 - scores.d_real_mismatched)) \
        - mean(log_clamped(1.0 - scores.d_fake))
    return d_loss, _generator_loss(scores.d_fake, non_saturating)


def crcgan_a_losses(scores: ScoreBatch, non_saturating: bool = False,
                    mismatch_weight: float = 1.0) -> tuple[Tensor, Tensor]:
    """Third term penalizes high scores on real images with a random wrong y2.

    The mismatch term drives the discriminator to verify image/condition
    consistency; it does not appear in the generator loss.
    """
    return _three_term_losses(scores, non_saturating, mismatch_weight)


def crcgan_b_losses(scores: ScoreBatch, non_saturating: bool = False,
                    mismatch_weight: float = 1.0) -> tuple[Tensor, Tensor]:
    """Variant with mismatched scores built from second real samples x2.

    x2 is a real sample whose true condition differs from the y under
    evaluation; at score level the formula coincides with crcgan_a_losses.
    """
    return _three_term_losses(scores, non_saturating, mismatch_weight)


@dataclass(frozen=True)
class Objective:
    name: str
    loss_fn: object
    needs_mismatch: bool


_OBJECTIVES = {
    "gan": Objective("gan", gan_losses, False),
    "cgan": Objective("cgan", cgan_losses, False),
    "crcgan-a": Objective("crcgan-a", crcgan_a_losses, True),
    "crcgan-b": Objective("crcgan-b", crcgan_b_losses, True),
}


def objective_names() -> list[str]:
    return list(_OBJECTIVES)


def get_objective(name: str) -> Objective:
    try:
        return _OBJECTIVES[name]
    except KeyError:
        raise DomainError(
            f"unknown objective '{name}' (choose from {', '.join(_OBJECTIVES)})"
        ) from None


# ---------------------------------------------------------------------------
# mismatched-condition sampling

@dataclass
class ConditionSampler:
    """Uniform condition distribution, discrete labels or a continuous range."""

    kind: str  # 'class' | 'continuous'
    cardinality: int = 0
    low: float = 0.0
    high: float = 1.0
    margin: float = MISMATCH_MARGIN
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind == "class":
            if self.cardinality < 1:
                raise DomainError("class sampler needs cardinality >= 1")
        elif self.kind == "continuous":
            if not (self.low < self.high):
                raise DomainError("continuous sampler needs low < high")
        else:
            raise DomainError(f"unknown condition kind '{self.kind}'")
        self.rng = np.random.default_rng(self.seed)


def _condition_value(y) -> float:
    if isinstance(y, ClassLabel):
        return float(y.index)
    if isinstance(y, Continuous):
        return y.value
    return float(y)


def sample_mismatched_condition(y1, sampler: ConditionSampler,
                                rng: np.random.Generator | None = None):
    """Draw y2 from the sampler's distribution, resampling until it mismatches y1.

    Discrete: y2 != y1. Continuous: |y2 - y1| >= margin. Deterministic given
    the sampler's seed (or the explicitly supplied generator).
    """
    rng = sampler.rng if rng is None else rng
    y1_value = _condition_value(y1)
    if sampler.kind == "class":
        if sampler.cardinality < 2:
            raise DomainError("no mismatched label exists with cardinality 1")
        for _ in range(_MAX_RESAMPLES):
            y2 = int(rng.integers(0, sampler.cardinality))
            if y2 != int(y1_value):
                return y2
    else:
        for _ in range(_MAX_RESAMPLES):
            y2 = float(rng.uniform(sampler.low, sampler.high))
            if abs(y2 - y1_value) >= sampler.margin:
                return y2
    raise DomainError("could not draw a mismatched condition (domain too tight)")
