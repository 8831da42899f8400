"""Generation: MaskGIT confidence decoding and exact ancestral reversal.

Both decoders consume a denoise function `fn(ids, t) -> logits` over numpy
arrays, so a trained network and the enumeration-backed oracle are
interchangeable. Canvases fix the conditioned positions; everything else
starts as mask and is committed over the decoding loop. Decoded output never
contains the mask id.

By default each position's softmax support is restricted to its modality's
id range: the shared vocabulary permits cross-modality tokens, but the fixed
layout makes them semantically invalid, so restriction removes that failure
class (flag-disableable).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .backbone import Denoiser
from .schedule import NoiseSchedule
from .vocab import JointVocabulary, SequenceLayout, TokenSequence

DenoiseFn = Callable[[np.ndarray, float], np.ndarray]

ALGORITHMS = ("maskgit", "ancestral")
VARIANTS = (
    "joint_unconditional",
    "report_to_image",
    "image_to_report",
    "prompted_joint",
)


@dataclass(frozen=True)
class SamplerConfig:
    # confidence_noise > 0 randomizes the commit order via Gumbel draws;
    # fully deterministic top-k (noise 0) greedily over-commits the modal
    # token and visibly sharpens small joint distributions.
    algorithm: str = "maskgit"
    steps: int = 16
    temperature: float = 1.0
    confidence_noise: float = 1.0
    seed: int = 0
    restrict_modality: bool = True
    resample_committed: bool = False

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.confidence_noise < 0:
            raise ValueError("confidence_noise must be >= 0")


@dataclass(frozen=True)
class GenerationMode:
    """One of the four decoding tasks plus its condition tokens.

    Conditions are given in local id spaces: report ids below k_text, image
    ids below k_img (the canvas applies the k_text offset), and a report
    prefix for prompted generation.
    """

    variant: str
    condition: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        needs = self.variant != "joint_unconditional"
        if needs and self.condition is None:
            raise ValueError(f"variant {self.variant} requires a condition")
        if not needs and self.condition is not None:
            raise ValueError("joint_unconditional takes no condition")
        if self.condition is not None:
            object.__setattr__(
                self, "condition", np.asarray(self.condition, dtype=np.int64)
            )


def init_canvas(
    mode: GenerationMode, vocab: JointVocabulary, layout: SequenceLayout
) -> TokenSequence:
    """Sequence whose conditioned positions hold tokens and the rest hold mask."""
    ids = np.full(layout.len_total, vocab.mask_id, dtype=np.int64)
    cond = mode.condition
    if mode.variant == "report_to_image":
        if cond.shape != (layout.len_report,):
            raise ValueError("report condition must cover the full report region")
        if cond.size and (cond.min() < 0 or cond.max() >= vocab.k_text):
            raise ValueError("report condition token outside [0, k_text)")
        ids[: layout.len_report] = cond
    elif mode.variant == "image_to_report":
        if cond.shape != (layout.len_image,):
            raise ValueError("image condition must cover the full image region")
        if cond.size and (cond.min() < 0 or cond.max() >= vocab.k_img):
            raise ValueError("image condition token outside [0, k_img)")
        ids[layout.len_report:] = cond + vocab.k_text
    elif mode.variant == "prompted_joint":
        if cond.ndim != 1 or cond.shape[0] > layout.len_report:
            raise ValueError("prompt must be a report prefix (length <= len_report)")
        if cond.size and (cond.min() < 0 or cond.max() >= vocab.k_text):
            raise ValueError("prompt token outside [0, k_text)")
        ids[: cond.shape[0]] = cond
    return TokenSequence(ids=ids, layout=layout)


def remaining_masked(i: int, steps: int, m0: int) -> int:
    """Cosine unmasking schedule: floor(m0 * cos(pi * i / (2 * steps))).

    Reaches 0 exactly at i = steps and never increases in i.
    """
    if not 1 <= i <= steps:
        raise ValueError(f"decode step {i} outside [1, {steps}]")
    if m0 < 0:
        raise ValueError("initially-masked count must be >= 0")
    return int(math.floor(m0 * math.cos(math.pi * i / (2 * steps))))


def _allowed_columns(
    layout: SequenceLayout, vocab: JointVocabulary, restrict: bool
) -> np.ndarray:
    """Boolean [L, vocab_out] of sampleable columns; the mask column never is."""
    allowed = np.ones((layout.len_total, vocab.vocab_out), dtype=bool)
    allowed[:, vocab.mask_id] = False
    if restrict:
        allowed[: layout.len_report, vocab.k_text : vocab.k_total] = False
        allowed[layout.len_report :, : vocab.k_text] = False
    return allowed


def _sampling_probs(
    logits: np.ndarray, allowed: np.ndarray, temperature: float
) -> np.ndarray:
    z = np.where(allowed[None, :, :], logits.astype(np.float64), -np.inf)
    z /= temperature
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p


def _categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])
    idx = (cdf < u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1).astype(np.int64)


def maskgit_decode_batch(
    fn: DenoiseFn,
    canvases: np.ndarray,
    vocab: JointVocabulary,
    layout: SequenceLayout,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Iterative parallel decoding over a batch of canvases.

    Every row must start with the same masked count. Each round samples all
    masked positions at a time matching the current masked fraction, keeps
    the highest-confidence draws per the cosine schedule, and re-masks the
    rest; committed and conditioned positions are never altered (unless
    resample_committed re-draws committed ones each round).
    """
    x = np.asarray(canvases, dtype=np.int64).copy()
    if x.ndim != 2 or x.shape[1] != layout.len_total:
        raise ValueError("canvases must be [B, len_total]")
    masked = x == vocab.mask_id
    counts = masked.sum(axis=1)
    if counts.size == 0:
        return x
    m0 = int(counts[0])
    if not (counts == m0).all():
        raise ValueError("all canvases in a batch must share one masked count")
    if m0 == 0:
        return x
    conditioned = ~masked
    allowed = _allowed_columns(layout, vocab, config.restrict_modality)
    steps = config.steps
    m_prev = m0
    for i in range(1, steps + 1):
        m_next = remaining_masked(i, steps, m0)
        n_commit = m_prev - m_next
        if n_commit == 0 and not config.resample_committed:
            continue
        t_i = schedule.time_for_mask_fraction(m_prev / layout.len_total)
        probs = _sampling_probs(fn(x, t_i), allowed, config.temperature)
        sampled = _categorical_rows(probs, rng)
        confidence = np.take_along_axis(probs, sampled[..., None], axis=-1)[..., 0]
        if config.confidence_noise > 0:
            gumbel = -np.log(-np.log(rng.random(confidence.shape)))
            confidence = confidence + config.confidence_noise * gumbel
        if config.resample_committed:
            refresh = ~conditioned & ~masked
            x[refresh] = sampled[refresh]
        if n_commit > 0:
            rows = np.arange(x.shape[0])[:, None]
            score = np.where(masked, confidence, -np.inf)
            keep = np.argsort(-score, axis=1, kind="stable")[:, :n_commit]
            x[rows, keep] = sampled[rows, keep]
            masked[rows, keep] = False
        m_prev = m_next
    assert not (x == vocab.mask_id).any()
    return x


def ancestral_decode_batch(
    fn: DenoiseFn,
    canvases: np.ndarray,
    vocab: JointVocabulary,
    layout: SequenceLayout,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n_steps: int | None = None,
    temperature: float = 1.0,
    restrict_modality: bool = True,
) -> np.ndarray:
    """Exact reverse walk of the absorbing chain on the discrete grid.

    For j = T..1 with s = (j-1)/T and t = j/T, each masked position stays
    masked with probability (1 - alpha(s)) / (1 - alpha(t)) and otherwise
    commits a draw from the denoiser's clean-token distribution at time t.
    The last step forces full unmasking.
    """
    x = np.asarray(canvases, dtype=np.int64).copy()
    if x.ndim != 2 or x.shape[1] != layout.len_total:
        raise ValueError("canvases must be [B, len_total]")
    steps = schedule.n_steps if n_steps is None else n_steps
    if steps < 1:
        raise ValueError("n_steps must be >= 1")
    allowed = _allowed_columns(layout, vocab, restrict_modality)
    for j in range(steps, 0, -1):
        masked = x == vocab.mask_id
        if not masked.any():
            break
        t = j / steps
        s = (j - 1) / steps
        stay = schedule.expected_mask_fraction(s) / schedule.expected_mask_fraction(t)
        probs = _sampling_probs(fn(x, t), allowed, temperature)
        sampled = _categorical_rows(probs, rng)
        commit = masked & (rng.random(x.shape) >= stay)
        x[commit] = sampled[commit]
    assert not (x == vocab.mask_id).any()
    return x


def maskgit_decode(
    fn: DenoiseFn,
    canvas: TokenSequence,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    vocab: JointVocabulary,
    rng: np.random.Generator | None = None,
) -> TokenSequence:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    out = maskgit_decode_batch(
        fn, canvas.ids[None, :], vocab, canvas.layout, config, schedule, rng
    )
    return TokenSequence(ids=out[0], layout=canvas.layout)


def ancestral_decode(
    fn: DenoiseFn,
    canvas: TokenSequence,
    schedule: NoiseSchedule,
    vocab: JointVocabulary,
    rng: np.random.Generator,
    n_steps: int | None = None,
) -> TokenSequence:
    out = ancestral_decode_batch(
        fn, canvas.ids[None, :], vocab, canvas.layout, schedule, rng, n_steps
    )
    return TokenSequence(ids=out[0], layout=canvas.layout)


def decode_batch(
    fn: DenoiseFn,
    canvases: np.ndarray,
    vocab: JointVocabulary,
    layout: SequenceLayout,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Dispatch on config.algorithm; ancestral reads its grid size from config.steps."""
    if config.algorithm == "maskgit":
        return maskgit_decode_batch(fn, canvases, vocab, layout, config, schedule, rng)
    return ancestral_decode_batch(
        fn,
        canvases,
        vocab,
        layout,
        schedule,
        rng,
        n_steps=config.steps,
        temperature=config.temperature,
        restrict_modality=config.restrict_modality,
    )


def torch_denoise_fn(model: Denoiser) -> DenoiseFn:
    """Adapter exposing a trained network through the sampler interface."""

    def fn(ids: np.ndarray, t: float) -> np.ndarray:
        with torch.no_grad():
            logits = model(torch.from_numpy(np.ascontiguousarray(ids)), float(t))
        return logits.to(torch.float64).numpy()

    return fn
