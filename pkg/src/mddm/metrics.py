"""Evaluation: distribution fidelity, cross-modal consistency, text metrics, NELBO.

Distribution fidelity is exact total variation against the enumerable world,
and pair consistency is decided by the exact report parser, so both are
binary-ground-truth metrics rather than learned judges. BLEU uses clipped
modified n-gram precision with a geometric mean and brevity penalty (no
smoothing); ROUGE-L uses the beta = 1.2 F-measure. Those conventions are
echoed into the JSON summaries for comparability.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Mapping, Sequence

import numpy as np
import torch

from . import gridworld
from .backbone import Denoiser
from .schedule import NoiseSchedule, corrupt_ids
from .training import masked_ce_loss
from .vocab import JointVocabulary

ROUGE_BETA = 1.2

TEXT_METRIC_CONVENTIONS = {
    "bleu_smoothing": "none",
    "bleu_brevity_penalty": "exp(1 - |ref|/|cand|) when |cand| < |ref|",
    "rouge_beta": ROUGE_BETA,
}


def _normalize(dist: Mapping) -> dict:
    total = float(sum(dist.values()))
    if total <= 0.0:
        raise ValueError("distribution has no mass")
    return {k: float(v) / total for k, v in dist.items() if v > 0}


def tv_distance(empirical: Mapping, exact: Mapping) -> float:
    """Half the L1 distance between two distributions over the union support.

    Accepts raw counts or probabilities; both sides are normalized, which
    also makes the metric symmetric.
    """
    if len(empirical) == 0:
        raise ValueError("empirical distribution is empty")
    p = _normalize(empirical)
    q = _normalize(exact)
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def counts_from_rows(rows: np.ndarray) -> dict[tuple[int, ...], int]:
    """Histogram over packed token rows, keyed by the id tuple."""
    values, counts = np.unique(np.asarray(rows, dtype=np.int64), axis=0, return_counts=True)
    return {tuple(int(v) for v in row): int(c) for row, c in zip(values, counts)}


def pair_is_consistent(
    pair: gridworld.PairedSample,
    config: gridworld.GridWorldConfig,
    codebook: gridworld.Codebook | None = None,
) -> bool:
    """True iff the report parses and matches the grid decoded from the image tokens."""
    try:
        reported = gridworld.parse_report(pair.report_ids, config)
        depicted = gridworld.grid_from_image_tokens(pair.image_tokens, config, codebook)
    except ValueError:
        return False
    return bool(np.array_equal(reported, depicted))


def consistency_rate(
    pairs: Sequence[gridworld.PairedSample],
    config: gridworld.GridWorldConfig,
    codebook: gridworld.Codebook | None = None,
) -> float:
    """Fraction of pairs whose report exactly describes the image.

    Unparseable reports count as inconsistent rather than erroring.
    """
    if len(pairs) == 0:
        raise ValueError("need at least one pair")
    hits = sum(pair_is_consistent(p, config, codebook) for p in pairs)
    return hits / len(pairs)


def masked_recovery_accuracy(
    model: Denoiser,
    sequences: np.ndarray,
    schedule: NoiseSchedule,
    vocab: JointVocabulary,
    t: float,
    rng: np.random.Generator,
) -> float:
    """Corrupt at t, greedy-decode in one pass, score exact recovery at masked positions."""
    sequences = np.asarray(sequences, dtype=np.int64)
    if sequences.ndim != 2 or sequences.shape[0] < 1:
        raise ValueError("eval set must be a nonempty [N, L] array")
    if not schedule.t_min <= t <= 1.0:
        raise ValueError(f"t must lie in [{schedule.t_min}, 1]")
    p = schedule.expected_mask_fraction(t)
    xt = corrupt_ids(sequences, p, vocab.mask_id, rng)
    masked = xt == vocab.mask_id
    if not masked.any():
        raise ValueError("corruption masked no positions; enlarge the eval set or t")
    with torch.no_grad():
        logits = model(torch.from_numpy(xt), t)
    pred = logits[..., : vocab.k_total].argmax(dim=-1).numpy()
    return float((pred[masked] == sequences[masked]).mean())


def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate: Sequence, reference: Sequence, n: int) -> float:
    """BLEU up to order n for a single reference.

    Clipped modified precision per order, geometric mean over orders 1..n,
    and brevity penalty exp(1 - |ref|/|cand|) when the candidate is shorter.
    Any zero precision (or an empty candidate) gives 0; no smoothing.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    candidate = list(candidate)
    reference = list(reference)
    if len(candidate) == 0:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        cand_counts = _ngram_counts(candidate, order)
        ref_counts = _ngram_counts(reference, order)
        total = sum(cand_counts.values())
        clipped = sum(
            min(count, ref_counts[gram]) for gram, count in cand_counts.items()
        )
        if total == 0 or clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    brevity = 1.0
    if len(candidate) < len(reference):
        brevity = math.exp(1.0 - len(reference) / len(candidate))
    return brevity * math.exp(log_sum / n)


def _lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """Longest-common-subsequence F-measure with beta = 1.2."""
    candidate = list(candidate)
    reference = list(reference)
    if len(candidate) == 0 or len(reference) == 0:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    beta_sq = ROUGE_BETA**2
    return (1.0 + beta_sq) * precision * recall / (recall + beta_sq * precision)


def nelbo_estimate(
    model: Denoiser,
    sequences: np.ndarray,
    schedule: NoiseSchedule,
    vocab: JointVocabulary,
    n_t_samples: int,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo per-token bound over an eval set, fresh t draws per repetition.

    A uniform predictor scores ln(k_total) per token in expectation under
    the linear schedule; trained models should land below that.
    """
    sequences = np.asarray(sequences, dtype=np.int64)
    if sequences.ndim != 2 or sequences.shape[0] < 1:
        raise ValueError("eval set must be a nonempty [N, L] array")
    if n_t_samples < 1:
        raise ValueError("n_t_samples must be >= 1")
    total = 0.0
    count = 0
    for _ in range(n_t_samples):
        t = rng.uniform(schedule.t_min, 1.0, size=sequences.shape[0])
        p = np.array([schedule.expected_mask_fraction(v) for v in t])
        xt = corrupt_ids(sequences, p[:, None], vocab.mask_id, rng)
        with torch.no_grad():
            per_example = masked_ce_loss(
                model,
                torch.from_numpy(sequences),
                torch.from_numpy(xt),
                torch.from_numpy(t),
                schedule,
                vocab,
            )
        total += float(per_example.sum())
        count += sequences.shape[0]
    return total / count
