"""Group-relative advantages, the clipped GRPO objective and its gradient.

Everything here works on supplied per-token log-probabilities; there is no
model. The objective is maximized, so the gradient is d J / d logp_new.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np


class GrpoError(ValueError):
    code = "GrpoError"

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


class GroupTooSmall(GrpoError):
    code = "GroupTooSmall"


class LengthMismatch(GrpoError):
    code = "LengthMismatch"


@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    beta_kl: float = 0.0
    group_size: int = 6
    std_floor: float = 1e-6

    def __post_init__(self) -> None:
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must be in (0, 1)")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be > 0")


@dataclass
class TokenSequence:
    logp_new: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.logp_new = np.asarray(self.logp_new, dtype=np.float64)
        self.logp_old = np.asarray(self.logp_old, dtype=np.float64)
        self.logp_ref = np.asarray(self.logp_ref, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones_like(self.logp_new)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        shapes = {a.shape for a in (self.logp_new, self.logp_old, self.logp_ref, self.mask)}
        if len(shapes) != 1 or self.logp_new.ndim != 1:
            raise LengthMismatch(
                f"logp_new {self.logp_new.shape}, logp_old {self.logp_old.shape}, "
                f"logp_ref {self.logp_ref.shape}, mask {self.mask.shape}"
            )

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> TokenSequence:
        n = len(doc["logp_new"])
        return cls(doc["logp_new"], doc["logp_old"], doc["logp_ref"], doc.get("mask", [1] * n))

    def __len__(self) -> int:
        return len(self.logp_new)


@dataclass
class GroupRollout:
    rewards: np.ndarray
    sequences: list[TokenSequence]
    group_id: str = ""

    def __post_init__(self) -> None:
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.ndim != 1 or len(self.rewards) != len(self.sequences):
            raise LengthMismatch(f"{self.rewards.size} rewards for {len(self.sequences)} sequences")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> GroupRollout:
        return cls(
            rewards=doc["rewards"],
            sequences=[TokenSequence.from_dict(s) for s in doc["sequences"]],
            group_id=str(doc.get("group_id", "")),
        )

    def subset(self, keep: Sequence[int]) -> GroupRollout:
        return GroupRollout(self.rewards[list(keep)], [self.sequences[i] for i in keep], self.group_id)


def compute_advantages(rewards: Sequence[float] | np.ndarray, cfg: GrpoConfig = GrpoConfig()) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {r.size}")
    std = r.std()  # population std
    if std < cfg.std_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def kl_k3(logp_ref: np.ndarray, logp_new: np.ndarray) -> np.ndarray:
    """Per-token ``exp(d) - d - 1`` with ``d = logp_ref - logp_new``; zero iff equal."""
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_new, dtype=np.float64)
    return np.expm1(d) - d


def clipped_surrogate(ratio: np.ndarray, advantage: float | np.ndarray, epsilon: float) -> np.ndarray:
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - epsilon, 1 + epsilon) * advantage)


@dataclass
class ObjectiveResult:
    objective: float
    grads: list[np.ndarray]
    included: list[int] = field(default_factory=list)


def grpo_objective(
    group: GroupRollout, advantages: Sequence[float] | np.ndarray, cfg: GrpoConfig = GrpoConfig()
) -> ObjectiveResult:
    """J and dJ/dlogp_new per token.

    Each sequence contributes the mean over its unmasked tokens of
    ``surrogate - beta_kl * kl``; J averages those over sequences that have
    at least one unmasked token. Masked tokens get zero gradient.
    """
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.shape != (len(group.sequences),):
        raise LengthMismatch(f"{adv.size} advantages for {len(group.sequences)} sequences")

    included = [i for i, s in enumerate(group.sequences) if s.mask.sum() > 0]
    grads = [np.zeros(len(s)) for s in group.sequences]
    if not included:
        return ObjectiveResult(0.0, grads, included)

    total = 0.0
    n_seq = len(included)
    for i in included:
        seq, a = group.sequences[i], adv[i]
        ratio = np.exp(seq.logp_new - seq.logp_old)
        unclipped = ratio * a
        clipped = np.clip(ratio, 1 - cfg.epsilon, 1 + cfg.epsilon) * a
        surrogate = np.minimum(unclipped, clipped)
        d = seq.logp_ref - seq.logp_new
        contrib = surrogate - cfg.beta_kl * (np.expm1(d) - d)

        n_tok = seq.mask.sum()
        total += float((contrib * seq.mask).sum() / n_tok)

        # d surrogate: ratio * A on the unclipped branch, 0 where the clip is active
        d_surr = np.where(unclipped <= clipped, unclipped, 0.0)
        d_kl = -np.expm1(d)
        grads[i] = (d_surr - cfg.beta_kl * d_kl) * seq.mask / (n_tok * n_seq)
    return ObjectiveResult(total / n_seq, grads, included)


def finite_difference_check(
    group: GroupRollout, advantages: np.ndarray, cfg: GrpoConfig = GrpoConfig(), h: float = 1e-6, floor: float = 1e-4
) -> float:
    """Max relative deviation of the analytic gradient from central differences.

    Relative error is ``|g - fd| / max(|g|, |fd|, floor)``; ``floor`` keeps
    exactly-zero gradients (clipped or masked tokens) from dividing by zero.
    """
    analytic = grpo_objective(group, advantages, cfg).grads
    worst = 0.0
    for i, seq in enumerate(group.sequences):
        for t in range(len(seq)):
            orig = seq.logp_new[t]
            seq.logp_new[t] = orig + h
            up = grpo_objective(group, advantages, cfg).objective
            seq.logp_new[t] = orig - h
            down = grpo_objective(group, advantages, cfg).objective
            seq.logp_new[t] = orig
            fd = (up - down) / (2 * h)
            g = analytic[i][t]
            worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), floor))
    return worst


# -- rollout masking ----------------------------------------------------------


@dataclass(frozen=True)
class MaskLimits:
    max_total_tokens: int = 36000
    ngram_size: int = 20
    repeat_threshold: int = 4


@dataclass(frozen=True)
class MaskFlags:
    overlong: bool
    repetitive: bool

    @property
    def masked(self) -> bool:
        return self.overlong or self.repetitive


@dataclass
class RolloutMaskReport:
    flags: list[MaskFlags]

    @property
    def kept(self) -> list[int]:
        return [i for i, f in enumerate(self.flags) if not f.masked]

    @property
    def masked(self) -> list[int]:
        return [i for i, f in enumerate(self.flags) if f.masked]

    def to_dict(self) -> dict[str, Any]:
        return {"flags": [{"overlong": f.overlong, "repetitive": f.repetitive} for f in self.flags]}


def has_repeated_ngram(text: str, n: int, threshold: int, tokenize: Callable[[str], list[str]] = str.split) -> bool:
    tokens = tokenize(text)
    if len(tokens) < n:
        return False
    counts = Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return max(counts.values()) >= threshold


def _field(traj: Any, name: str) -> Any:
    return traj[name] if isinstance(traj, Mapping) else getattr(traj, name)


def apply_rollout_masks(trajectories: Sequence[Any], limits: MaskLimits = MaskLimits()) -> RolloutMaskReport:
    """Flag overlong and repetitive rollouts.

    Each trajectory exposes ``total_tokens`` and ``responses`` (list of
    strings), as attributes or mapping keys.
    """
    flags = []
    for traj in trajectories:
        overlong = _field(traj, "total_tokens") > limits.max_total_tokens
        repetitive = any(
            has_repeated_ngram(r, limits.ngram_size, limits.repeat_threshold) for r in _field(traj, "responses")
        )
        flags.append(MaskFlags(overlong, repetitive))
    return RolloutMaskReport(flags)


@dataclass
class GroupResult:
    group_id: str
    advantages: np.ndarray  # full group length; masked rollouts get 0
    objective: float
    grads: list[np.ndarray]
    kept: list[int]


def evaluate_group(
    group: GroupRollout, cfg: GrpoConfig = GrpoConfig(), mask_report: RolloutMaskReport | None = None
) -> GroupResult:
    """Drop masked rollouts, normalize the survivors' rewards, and evaluate J."""
    kept = mask_report.kept if mask_report is not None else list(range(len(group.sequences)))
    sub = group.subset(kept)
    adv = compute_advantages(sub.rewards, cfg)
    res = grpo_objective(sub, adv, cfg)
    full_adv = np.zeros(len(group.sequences))
    full_grads = [np.zeros(len(s)) for s in group.sequences]
    for j, i in enumerate(kept):
        full_adv[i] = adv[j]
        full_grads[i] = res.grads[j]
    return GroupResult(group.group_id, full_adv, res.objective, full_grads, kept)
