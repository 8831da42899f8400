"""Forward corruption process: retention schedule, transition matrices, masking.

The forward chain replaces tokens by the absorbing mask symbol with per-step
probability 1 - alpha; once masked, a token stays masked. Corruption and
sampling use the two-scalar closed form (keep / mask), so dense matrices are
built only for verification against the matrix-product definition.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .vocab import JointVocabulary, TokenSequence

SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Retention function alpha(t) on [0, 1] plus its discrete grid.

    The linear kind uses alpha(t) = 1 - t, which makes the loss weight
    exactly 1 / t and keeps every oracle in closed form. t_min clamps both
    sampled times and the weight so the 1/t factor stays bounded.
    """

    kind: str = "linear"
    t_min: float = 1e-3
    n_steps: int = 128

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError(f"t_min must lie in (0, 1), got {self.t_min}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @cached_property
    def alpha_bar(self) -> np.ndarray:
        """Cumulative retention on the grid: alpha_bar[j] = alpha(j / n_steps)."""
        grid = np.arange(self.n_steps + 1, dtype=np.float64) / self.n_steps
        out = 1.0 - grid
        out.flags.writeable = False
        return out

    def retention(self, t: float) -> float:
        """alpha(t): probability a token has survived corruption up to time t."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        return 1.0 - t

    def expected_mask_fraction(self, t: float) -> float:
        return 1.0 - self.retention(t)

    def time_for_mask_fraction(self, frac: float) -> float:
        """Inverse of expected_mask_fraction, clamped to [t_min, 1]."""
        frac = min(max(frac, 0.0), 1.0)
        return min(max(frac, self.t_min), 1.0)

    def loss_weight(self, t: float) -> float:
        """Objective weight -alpha'(t) / (1 - alpha(t)); equals 1/t for the linear kind.

        Diverges as t -> 0, so t is clamped below at t_min.
        """
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        return 1.0 / max(t, self.t_min)

    def per_step_retention(self, j: int) -> float:
        """Retention of step j on the grid: alpha_j = alpha_bar[j] / alpha_bar[j-1]."""
        if not 1 <= j <= self.n_steps:
            raise ValueError(f"step {j} outside [1, {self.n_steps}]")
        prev = self.alpha_bar[j - 1]
        if prev <= 0.0:
            return 0.0
        return float(self.alpha_bar[j] / prev)


def retention_at(schedule: NoiseSchedule, t: float) -> float:
    return schedule.retention(t)


def loss_weight(schedule: NoiseSchedule, t: float) -> float:
    return schedule.loss_weight(t)


def expected_mask_fraction(schedule: NoiseSchedule, t: float) -> float:
    return schedule.expected_mask_fraction(t)


def transition_matrix(alpha: float, vocab: JointVocabulary) -> np.ndarray:
    """One-step kernel: alpha * I + (1 - alpha) * 1 e_m^T over the extended vocabulary.

    Row m (the mask row) is the basis vector at m: the mask state is absorbing.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    size = vocab.k_total + 1
    m = vocab.mask_id
    q = alpha * np.eye(size, dtype=np.float64)
    q[:, m] += 1.0 - alpha
    q[m, :] = 0.0
    q[m, m] = 1.0
    return q


def cumulative_matrix(schedule: NoiseSchedule, j: int, vocab: JointVocabulary) -> np.ndarray:
    """Closed form of the j-step product Q_1 ... Q_j: alpha_bar_j * I + (1 - alpha_bar_j) * 1 e_m^T.

    The explicit matrix product is the test oracle; this function always
    evaluates the closed form.
    """
    if not 1 <= j <= schedule.n_steps:
        raise ValueError(f"step {j} outside [1, {schedule.n_steps}]")
    return transition_matrix(float(schedule.alpha_bar[j]), vocab)


def corrupt_ids(
    ids: np.ndarray,
    mask_prob: np.ndarray | float,
    mask_id: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Independently replace entries by mask_id with the given probability.

    mask_prob broadcasts against ids (a scalar, or one probability per row).
    Entries already equal to mask_id stay masked regardless of the draw.
    """
    ids = np.asarray(ids, dtype=np.int64)
    p = np.broadcast_to(np.asarray(mask_prob, dtype=np.float64), ids.shape)
    hit = rng.random(ids.shape) < p
    return np.where(hit | (ids == mask_id), mask_id, ids)


def corrupt(
    x0: TokenSequence,
    t: float,
    schedule: NoiseSchedule,
    vocab: JointVocabulary,
    rng: np.random.Generator,
) -> TokenSequence:
    """Sample x_t from the forward marginal at time t.

    Each position is masked with probability 1 - alpha(t) and kept verbatim
    otherwise; the absorbing kernel never substitutes one real token for
    another.
    """
    if not x0.is_clean(vocab):
        raise ValueError("corrupt expects a clean sequence (no mask id present)")
    p = schedule.expected_mask_fraction(t)
    return TokenSequence(
        ids=corrupt_ids(x0.ids, p, vocab.mask_id, rng), layout=x0.layout
    )


def sequential_corrupt_ids(
    ids: np.ndarray,
    schedule: NoiseSchedule,
    j: int,
    mask_id: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Walk the discrete grid step by step up to step j using per-step retentions.

    Marginally equivalent to a single-shot corruption at alpha_bar[j]; used to
    check that equivalence, and that masking is absorbing along the path.
    """
    if not 1 <= j <= schedule.n_steps:
        raise ValueError(f"step {j} outside [1, {schedule.n_steps}]")
    out = np.asarray(ids, dtype=np.int64)
    for step in range(1, j + 1):
        out = corrupt_ids(out, 1.0 - schedule.per_step_retention(step), mask_id, rng)
    return out
