"""Training loop: objective, optimizer, learning-rate schedule, run state.

The objective is the schedule-weighted masked cross-entropy: per example,
sample t, corrupt, and score the clean tokens at masked positions only,
normalized by sequence length (not masked count, which would break the
bound) and weighted by 1 / max(t, t_min).

Randomness is counter-based: every consumer derives a fresh generator from
(seed, stream, step), so training state is exactly (parameters, moments,
step) and resuming from a checkpoint replays the identical run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import Denoiser
from .errors import NumericalError
from .schedule import NoiseSchedule, corrupt_ids
from .vocab import JointVocabulary

STREAM_DATA = 1
STREAM_NOISE = 2
STREAM_SAMPLE = 3
STREAM_EVAL = 4


def rng_for(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    """Deterministic generator for one (stream, step) cell of a run."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, step]))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 6000
    seed: int = 0
    base_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    cycle_length: int = 2000
    min_lr_fraction: float = 0.1
    grad_clip: float = 1.0
    checkpoint_every: int = 2000

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.warmup_steps < self.cycle_length:
            raise ValueError("need 0 <= warmup_steps < cycle_length")
        if not 0.0 <= self.min_lr_fraction <= 1.0:
            raise ValueError("min_lr_fraction must lie in [0, 1]")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


def lr_at(config: TrainConfig, step: int) -> float:
    """Warmup-cosine schedule that restarts every cycle_length steps.

    Within a cycle: linear ramp 0 -> base_lr over warmup_steps, then cosine
    decay down to base_lr * min_lr_fraction over the remainder.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    pos = step % config.cycle_length
    if pos < config.warmup_steps:
        return config.base_lr * pos / config.warmup_steps
    span = config.cycle_length - config.warmup_steps
    progress = (pos - config.warmup_steps) / span
    floor = config.base_lr * config.min_lr_fraction
    return floor + 0.5 * (config.base_lr - floor) * (1.0 + math.cos(math.pi * progress))


def masked_ce_loss(
    model: Denoiser,
    x0_ids: torch.Tensor,
    xt_ids: torch.Tensor,
    t: torch.Tensor,
    schedule: NoiseSchedule,
    vocab: JointVocabulary,
) -> torch.Tensor:
    """Per-example weighted masked cross-entropy, shape [B].

    Deterministic given its inputs, which makes it the target of the
    finite-difference gradient checks. The mask column of the logits is
    dropped before the softmax; unmasked positions contribute nothing
    (carry-over). An example with zero masked positions scores 0.
    """
    x0_ids = torch.as_tensor(x0_ids, dtype=torch.long)
    xt_ids = torch.as_tensor(xt_ids, dtype=torch.long)
    if x0_ids.dim() == 1:
        x0_ids, xt_ids = x0_ids.unsqueeze(0), xt_ids.unsqueeze(0)
    logits = model(xt_ids, t)
    logp = torch.log_softmax(logits[..., : vocab.k_total], dim=-1)
    ce = -logp.gather(-1, x0_ids.unsqueeze(-1)).squeeze(-1)
    masked = (xt_ids == vocab.mask_id).to(ce.dtype)
    weights = 1.0 / torch.clamp(
        torch.as_tensor(t, dtype=ce.dtype), min=schedule.t_min
    )
    return weights * (ce * masked).sum(dim=-1) / x0_ids.shape[1]


def nelbo_loss(
    model: Denoiser,
    batch_ids: np.ndarray,
    schedule: NoiseSchedule,
    vocab: JointVocabulary,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, dict]:
    """Monte-Carlo objective over a clean batch: one t per example.

    Returns the scalar batch loss (mean over examples) plus the diagnostics
    needed when training aborts: sampled t values and per-example mask
    counts. Gradients come from calling backward() on the loss.
    """
    batch_ids = np.asarray(batch_ids, dtype=np.int64)
    if batch_ids.ndim != 2 or batch_ids.shape[0] < 1:
        raise ValueError("batch must be a nonempty [B, L] array")
    if (batch_ids == vocab.mask_id).any():
        raise ValueError("training batch must be clean (no mask ids)")
    b = batch_ids.shape[0]
    t = rng.uniform(schedule.t_min, 1.0, size=b)
    mask_prob = np.array([schedule.expected_mask_fraction(v) for v in t])
    xt = corrupt_ids(batch_ids, mask_prob[:, None], vocab.mask_id, rng)
    per_example = masked_ce_loss(
        model,
        torch.from_numpy(batch_ids),
        torch.from_numpy(xt),
        torch.from_numpy(t),
        schedule,
        vocab,
    )
    info = {"t": t, "mask_counts": (xt == vocab.mask_id).sum(axis=1)}
    return per_example.mean(), info


def clip_gradients(params: list[torch.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    grads = [p.grad.detach() for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = float(torch.sqrt(sum((g**2).sum() for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


@dataclass
class TrainState:
    """Single-writer mutable state for one run."""

    model: Denoiser
    config: TrainConfig
    schedule: NoiseSchedule
    vocab: JointVocabulary
    run_config: dict
    step: int = 0
    adam_m: dict[str, torch.Tensor] = field(default_factory=dict)
    adam_v: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, p in self.model.named_parameters():
            if name not in self.adam_m:
                self.adam_m[name] = torch.zeros_like(p, dtype=torch.float32)
            if name not in self.adam_v:
                self.adam_v[name] = torch.zeros_like(p, dtype=torch.float32)


def adamw_update(state: TrainState, lr: float) -> None:
    """Decoupled weight-decay adaptive-moment step using current gradients."""
    cfg = state.config
    t_adam = state.step + 1
    bc1 = 1.0 - cfg.beta1**t_adam
    bc2 = 1.0 - cfg.beta2**t_adam
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            g = torch.zeros_like(p) if p.grad is None else p.grad
            m = state.adam_m[name]
            v = state.adam_v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            update = (m / bc1) / (torch.sqrt(v / bc2) + cfg.eps)
            p.mul_(1.0 - lr * cfg.weight_decay)
            p.add_(update, alpha=-lr)


def train_step(state: TrainState, batch_ids: np.ndarray) -> tuple[float, float]:
    """One optimization step; returns (loss, lr). Deterministic given (state, batch)."""
    rng = rng_for(state.config.seed, STREAM_NOISE, state.step)
    loss, info = nelbo_loss(state.model, batch_ids, state.schedule, state.vocab, rng)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss {float(loss)!r} at step {state.step}; "
            f"t={np.array2string(info['t'], precision=4)} "
            f"mask_counts={info['mask_counts'].tolist()}"
        )
    state.model.zero_grad(set_to_none=True)
    loss.backward()
    clip_gradients(list(state.model.parameters()), state.config.grad_clip)
    lr = lr_at(state.config, state.step)
    adamw_update(state, lr)
    state.step += 1
    return float(loss.detach()), lr
