"""Synthetic paired image-report world with an exactly enumerable joint law.

A sample is a G x G grid of cell colors drawn i.i.d. from color_probs. The
report is the canonical row-major color-token rendering of the grid, so the
joint distribution over (image tokens, report tokens) has exactly
n_colors ** (G*G) outcomes and every downstream metric can be checked against
the enumeration. In pixel mode cells render to gray patches and pass through
a k-means codebook, mirroring a VQ tokenizer stage; in token-direct mode
(the default) cell ids are the image tokens themselves.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

from .vocab import JointVocabulary, SequenceLayout, TokenSequence, pack

ENUMERATION_LIMIT = 10**6


@dataclass(frozen=True)
class GridWorldConfig:
    grid_size: int = 2
    n_colors: int = 3
    # Skewed on purpose: a uniform sampler must not pass distribution tests.
    color_probs: tuple[float, ...] = (0.5, 0.3, 0.2)
    pixel_mode: bool = False
    patch_size: int = 4
    jitter: float = 0.05
    codebook_size: int | None = None

    def __post_init__(self) -> None:
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if self.n_colors < 1:
            raise ValueError("n_colors must be >= 1")
        probs = np.asarray(self.color_probs, dtype=np.float64)
        if probs.shape != (self.n_colors,):
            raise ValueError(
                f"color_probs must have length n_colors={self.n_colors}"
            )
        if (probs <= 0).any():
            raise ValueError("color_probs entries must be positive")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"color_probs must sum to 1, got {probs.sum()!r}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.codebook_size is not None and self.codebook_size < self.n_colors:
            raise ValueError("codebook_size must be >= n_colors")

    @property
    def n_cells(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def k_img(self) -> int:
        return self.codebook_size if self.codebook_size is not None else self.n_colors

    def vocab(self) -> JointVocabulary:
        return JointVocabulary(k_text=self.n_colors, k_img=self.k_img)

    def layout(self) -> SequenceLayout:
        return SequenceLayout(len_report=self.n_cells, len_image=self.n_cells)


@dataclass(frozen=True)
class Codebook:
    """k-means centroids mapping flattened patches to discrete ids."""

    centroids: np.ndarray  # [k_img, patch_size**2]

    def __post_init__(self) -> None:
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError("centroids must be a 2-d array")
        object.__setattr__(self, "centroids", c)

    @property
    def k_img(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class PairedSample:
    grid: np.ndarray  # [G, G] cell colors
    report_ids: np.ndarray  # [G*G]
    image_tokens: np.ndarray  # [G*G] codebook-local ids
    pixels: np.ndarray | None = field(default=None)


def color_base_intensity(color: int, n_colors: int) -> float:
    """Gray level a cell of this color renders around, interior to [0, 1]."""
    return (color + 0.5) / n_colors


def render_pixels(
    grid: np.ndarray, config: GridWorldConfig, rng: np.random.Generator
) -> np.ndarray:
    """Render cells to patch_size x patch_size patches: base intensity plus uniform jitter."""
    g, p = config.grid_size, config.patch_size
    base = (np.asarray(grid, dtype=np.float64) + 0.5) / config.n_colors
    pixels = np.repeat(np.repeat(base, p, axis=0), p, axis=1)
    pixels += config.jitter * (2.0 * rng.random((g * p, g * p)) - 1.0)
    return np.clip(pixels, 0.0, 1.0)


def render_report(grid: np.ndarray, config: GridWorldConfig) -> np.ndarray:
    """Canonical row-major report: one color token per cell."""
    grid = np.asarray(grid, dtype=np.int64)
    if grid.shape != (config.grid_size, config.grid_size):
        raise ValueError(f"grid must be {config.grid_size}x{config.grid_size}")
    if grid.size and (grid.min() < 0 or grid.max() >= config.n_colors):
        raise ValueError("grid holds a color outside [0, n_colors)")
    return grid.reshape(-1).copy()


def parse_report(tokens: np.ndarray, config: GridWorldConfig) -> np.ndarray:
    """Exact inverse of render_report; rejects wrong lengths and unknown tokens."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != (config.n_cells,):
        raise ValueError(
            f"report must have length {config.n_cells}, got shape {tokens.shape}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.n_colors):
        raise ValueError("report holds an unknown token")
    return tokens.reshape(config.grid_size, config.grid_size).copy()


def report_token_strings(config: GridWorldConfig) -> list[str]:
    return [f"<color_{c}>" for c in range(config.n_colors)]


def detokenize_report(tokens: np.ndarray, config: GridWorldConfig) -> str:
    names = report_token_strings(config)
    return " ".join(names[int(t)] for t in tokens)


def _image_patches(pixels: np.ndarray, config: GridWorldConfig) -> np.ndarray:
    g, p = config.grid_size, config.patch_size
    if pixels.shape != (g * p, g * p):
        raise ValueError(f"pixels must be {(g * p, g * p)}, got {pixels.shape}")
    return (
        pixels.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g * g, p * p)
    )


def fit_codebook(
    patches: np.ndarray,
    k_img: int,
    max_iters: int = 100,
    rng: np.random.Generator | None = None,
) -> Codebook:
    """Lloyd's k-means with k-means++ seeding over flattened patches.

    Empty clusters are re-seeded from the point farthest from its assigned
    centroid, which keeps the quantization error nonincreasing. Iteration
    stops at an assignment fixpoint or after max_iters rounds.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise ValueError("patches must be a 2-d array [n, patch_dim]")
    distinct = np.unique(patches, axis=0)
    if distinct.shape[0] < k_img:
        raise ValueError(
            f"need >= {k_img} distinct patches, got {distinct.shape[0]}"
        )

    n = patches.shape[0]
    centroids = np.empty((k_img, patches.shape[1]), dtype=np.float64)
    centroids[0] = patches[rng.integers(n)]
    closest = np.sum((patches - centroids[0]) ** 2, axis=1)
    for i in range(1, k_img):
        total = closest.sum()
        if total <= 0.0:
            # Every point coincides with a chosen centroid; seed from any
            # distinct patch not used yet (one exists, checked above).
            used = {c.tobytes() for c in centroids[:i]}
            centroids[i] = next(c for c in distinct if c.tobytes() not in used)
        else:
            pick = np.searchsorted(np.cumsum(closest / total), rng.random())
            centroids[i] = patches[min(pick, n - 1)]
        closest = np.minimum(
            closest, np.sum((patches - centroids[i]) ** 2, axis=1)
        )

    assign = _nearest(patches, centroids)
    for _ in range(max_iters):
        for k in range(k_img):
            members = patches[assign == k]
            if members.shape[0] == 0:
                dist = np.sum((patches - centroids[assign]) ** 2, axis=1)
                centroids[k] = patches[int(np.argmax(dist))]
            else:
                centroids[k] = members.mean(axis=0)
        new_assign = _nearest(patches, centroids)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return Codebook(centroids=centroids)


def _nearest(patches: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin breaks ties toward the lowest index.
    d = np.sum((patches[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(d, axis=1).astype(np.int64)


def quantization_error(patches: np.ndarray, codebook: Codebook) -> float:
    assign = _nearest(patches, codebook.centroids)
    return float(np.sum((patches - codebook.centroids[assign]) ** 2))


def encode_image(
    pixels: np.ndarray, codebook: Codebook, config: GridWorldConfig
) -> np.ndarray:
    """Nearest-centroid id per patch, row-major; ties resolve to the lowest index."""
    patches = _image_patches(np.asarray(pixels, dtype=np.float64), config)
    return _nearest(patches, codebook.centroids)


def decode_image(
    ids: np.ndarray, codebook: Codebook, config: GridWorldConfig
) -> np.ndarray:
    """Centroid lookup back to a full pixel grid."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != (config.n_cells,):
        raise ValueError(f"ids must have length {config.n_cells}")
    if ids.size and (ids.min() < 0 or ids.max() >= codebook.k_img):
        raise ValueError("id outside the codebook")
    g, p = config.grid_size, config.patch_size
    patches = codebook.centroids[ids].reshape(g, g, p, p)
    return patches.transpose(0, 2, 1, 3).reshape(g * p, g * p)


def sample_grid(config: GridWorldConfig, rng: np.random.Generator) -> np.ndarray:
    probs = np.asarray(config.color_probs, dtype=np.float64)
    flat = rng.choice(config.n_colors, size=config.n_cells, p=probs)
    return flat.reshape(config.grid_size, config.grid_size).astype(np.int64)


def sample_pair(
    config: GridWorldConfig,
    rng: np.random.Generator,
    codebook: Codebook | None = None,
) -> PairedSample:
    """Draw one paired sample; deterministic given the generator state."""
    grid = sample_grid(config, rng)
    report = render_report(grid, config)
    if config.pixel_mode:
        if codebook is None:
            raise ValueError("pixel_mode sampling requires a fitted codebook")
        pixels = render_pixels(grid, config, rng)
        tokens = encode_image(pixels, codebook, config)
        return PairedSample(grid=grid, report_ids=report, image_tokens=tokens, pixels=pixels)
    return PairedSample(
        grid=grid, report_ids=report, image_tokens=grid.reshape(-1).copy()
    )


def sample_packed_batch(
    config: GridWorldConfig,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized token-direct batch of packed clean sequences, shape [n, len_total]."""
    if config.pixel_mode:
        raise ValueError("packed batches are only defined for token-direct worlds")
    probs = np.asarray(config.color_probs, dtype=np.float64)
    cells = rng.choice(config.n_colors, size=(n, config.n_cells), p=probs)
    cells = cells.astype(np.int64)
    return np.concatenate([cells, cells + config.n_colors], axis=1)


def grid_from_image_tokens(
    tokens: np.ndarray,
    config: GridWorldConfig,
    codebook: Codebook | None = None,
) -> np.ndarray:
    """Recover the cell-color grid from codebook-local image tokens.

    Token-direct worlds use the identity map; pixel worlds assign each
    centroid the color whose base intensity its mean is closest to.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != (config.n_cells,):
        raise ValueError(f"image tokens must have length {config.n_cells}")
    if not config.pixel_mode:
        if tokens.size and (tokens.min() < 0 or tokens.max() >= config.n_colors):
            raise ValueError("token-direct image token outside the color range")
        return tokens.reshape(config.grid_size, config.grid_size).copy()
    if codebook is None:
        raise ValueError("pixel_mode decoding requires the codebook")
    bases = (np.arange(config.n_colors, dtype=np.float64) + 0.5) / config.n_colors
    means = codebook.centroids[tokens].mean(axis=1)
    colors = np.argmin(np.abs(means[:, None] - bases[None, :]), axis=1)
    return colors.reshape(config.grid_size, config.grid_size).astype(np.int64)


@dataclass(frozen=True)
class JointDistribution:
    """Exhaustive listing of the joint law over packed token sequences."""

    packed: np.ndarray  # [n_outcomes, len_total] global ids
    probs: np.ndarray  # [n_outcomes]
    grids: np.ndarray  # [n_outcomes, G, G]

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {
            tuple(int(v) for v in row): float(p)
            for row, p in zip(self.packed, self.probs)
        }


def enumerate_joint(config: GridWorldConfig) -> JointDistribution:
    """List every (image, report) outcome with its exact probability.

    The report is a deterministic function of the grid, so the support size
    is exactly n_colors ** n_cells. Defined for token-direct worlds, where
    image tokens coincide with cell colors.
    """
    if config.pixel_mode:
        raise ValueError("enumerate_joint is defined for token-direct worlds")
    support = config.n_colors ** config.n_cells
    if support > ENUMERATION_LIMIT:
        raise ValueError(
            f"support size {support} exceeds enumeration limit {ENUMERATION_LIMIT}"
        )
    vocab = config.vocab()
    layout = config.layout()
    probs_per_color = np.asarray(config.color_probs, dtype=np.float64)

    cells = np.array(
        list(itertools.product(range(config.n_colors), repeat=config.n_cells)),
        dtype=np.int64,
    ).reshape(support, config.n_cells)
    probs = probs_per_color[cells].prod(axis=1)
    packed = np.stack(
        [
            pack(row, row, vocab, layout).ids
            for row in cells
        ]
    )
    grids = cells.reshape(support, config.grid_size, config.grid_size)
    return JointDistribution(packed=packed, probs=probs, grids=grids)


class OracleDenoiser:
    """Exact posterior over clean tokens given the visible part of a sequence.

    Under the absorbing forward process the mask pattern is independent of
    token values, so the clean-token posterior at a masked position is the
    data-distribution conditional given the unmasked positions. Built from
    the enumeration; independent of any training. The timestep argument is
    accepted for interface parity and ignored.
    """

    def __init__(self, config: GridWorldConfig):
        dist = enumerate_joint(config)
        vocab = config.vocab()
        self.vocab = vocab
        self.layout = config.layout()
        self.mask_id = vocab.mask_id
        self._outcomes = dist.packed  # [N, L]
        self._probs = dist.probs  # [N]
        n, length = dist.packed.shape
        onehot = np.zeros((n, length, vocab.k_total), dtype=np.float64)
        rows = np.arange(n)[:, None]
        cols = np.arange(length)[None, :]
        onehot[rows, cols, dist.packed] = 1.0
        self._onehot_flat = onehot.reshape(n, length * vocab.k_total)

    def __call__(self, ids: np.ndarray, t: float) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        b, length = ids.shape
        if length != self._outcomes.shape[1]:
            raise ValueError("sequence length does not match the enumerated world")
        masked = ids == self.mask_id
        agree = ids[:, None, :] == self._outcomes[None, :, :]
        consistent = np.all(agree | masked[:, None, :], axis=2)  # [B, N]
        weights = consistent * self._probs[None, :]
        total = weights.sum(axis=1)
        # Parallel marginal commits can momentarily leave the support (two
        # coupled positions drawn independently); the posterior is undefined
        # there, so such rows fall back to the unconditional marginals.
        off_support = total <= 0.0
        if off_support.any():
            weights[off_support] = self._probs[None, :]
            total = weights.sum(axis=1)
        posterior = (weights @ self._onehot_flat).reshape(
            b, length, self.vocab.k_total
        )
        posterior /= total[:, None, None]
        logits = np.full(
            (b, length, self.vocab.vocab_out), -np.inf, dtype=np.float64
        )
        nz = posterior > 0.0
        logits[..., : self.vocab.k_total][nz] = np.log(posterior[nz])
        return logits[0] if squeeze else logits


def save_token_records(path, arrays: list[np.ndarray]) -> None:
    """Flat binary of token vectors: per record a u32 LE length then u32 LE ids."""
    with open(path, "wb") as fh:
        for arr in arrays:
            arr = np.asarray(arr, dtype=np.int64)
            if arr.ndim != 1 or (arr.size and arr.min() < 0):
                raise ValueError("records must be 1-d nonnegative id vectors")
            fh.write(struct.pack("<I", arr.size))
            fh.write(arr.astype("<u4").tobytes())


def load_token_records(path) -> list[np.ndarray]:
    records = []
    with open(path, "rb") as fh:
        while True:
            header = fh.read(4)
            if not header:
                break
            if len(header) != 4:
                raise ValueError("truncated record header")
            (count,) = struct.unpack("<I", header)
            payload = fh.read(4 * count)
            if len(payload) != 4 * count:
                raise ValueError("truncated record payload")
            records.append(np.frombuffer(payload, dtype="<u4").astype(np.int64))
    return records
