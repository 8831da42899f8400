"""Shared token space for report and image modalities.

Report ids occupy [0, k_text), image ids are offset into [k_text, k_total),
and a single absorbing mask id sits at k_total. Sequences are fixed-layout
concatenations: report region first, then image region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class JointVocabulary:
    """Joint id space over both modalities plus one absorbing mask symbol."""

    k_text: int
    k_img: int

    def __post_init__(self) -> None:
        if self.k_text < 1:
            raise ValueError(f"k_text must be >= 1, got {self.k_text}")
        if self.k_img < 0:
            raise ValueError(f"k_img must be >= 0, got {self.k_img}")

    @property
    def k_total(self) -> int:
        return self.k_text + self.k_img

    @property
    def mask_id(self) -> int:
        """The absorbing state; the only id allowed outside [0, k_total)."""
        return self.k_total

    @property
    def vocab_out(self) -> int:
        """Width of denoiser output rows (real tokens plus the mask column)."""
        return self.k_total + 1


@dataclass(frozen=True)
class SequenceLayout:
    """Fixed split of a sequence into a report region followed by an image region."""

    len_report: int
    len_image: int

    def __post_init__(self) -> None:
        if self.len_report < 0 or self.len_image < 0:
            raise ValueError("region lengths must be nonnegative")
        if self.len_total < 1:
            raise ValueError("layout must cover at least one position")

    @property
    def len_total(self) -> int:
        return self.len_report + self.len_image

    def region_of(self, pos: int) -> str:
        if not 0 <= pos < self.len_total:
            raise ValueError(f"position {pos} outside [0, {self.len_total})")
        return "report" if pos < self.len_report else "image"

    def modality_indicator(self) -> np.ndarray:
        """0 at report positions, 1 at image positions."""
        out = np.zeros(self.len_total, dtype=np.int64)
        out[self.len_report:] = 1
        return out


@dataclass(frozen=True)
class TokenSequence:
    """A length-len_total id vector tied to its layout.

    Clean sequences carry no mask id; corrupted ones may hold it anywhere.
    Range checks against a vocabulary happen in pack/unpack, not here.
    """

    ids: np.ndarray
    layout: SequenceLayout

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError(f"ids must be 1-d, got shape {ids.shape}")
        if ids.shape[0] != self.layout.len_total:
            raise ValueError(
                f"ids length {ids.shape[0]} != layout len_total {self.layout.len_total}"
            )
        object.__setattr__(self, "ids", ids)

    def mask_positions(self, vocab: JointVocabulary) -> np.ndarray:
        return self.ids == vocab.mask_id

    def is_clean(self, vocab: JointVocabulary) -> bool:
        return not bool(self.mask_positions(vocab).any())


def pack(
    report_ids: np.ndarray,
    image_ids: np.ndarray,
    vocab: JointVocabulary,
    layout: SequenceLayout,
) -> TokenSequence:
    """Concatenate report ids and offset image ids into one clean sequence.

    Image ids are codebook-local and get shifted by k_text.
    """
    report_ids = np.asarray(report_ids, dtype=np.int64)
    image_ids = np.asarray(image_ids, dtype=np.int64)
    if report_ids.shape != (layout.len_report,):
        raise ValueError(
            f"report length {report_ids.shape} != layout ({layout.len_report},)"
        )
    if image_ids.shape != (layout.len_image,):
        raise ValueError(
            f"image length {image_ids.shape} != layout ({layout.len_image},)"
        )
    if report_ids.size and (report_ids.min() < 0 or report_ids.max() >= vocab.k_text):
        raise ValueError(f"report ids must lie in [0, {vocab.k_text})")
    if image_ids.size and (image_ids.min() < 0 or image_ids.max() >= vocab.k_img):
        raise ValueError(f"image ids must lie in [0, {vocab.k_img})")
    ids = np.concatenate([report_ids, image_ids + vocab.k_text])
    return TokenSequence(ids=ids, layout=layout)


def unpack(seq: TokenSequence, vocab: JointVocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Split a clean sequence back into (report_ids, codebook-local image_ids).

    Rejects masked sequences and any id sitting in the wrong modality range
    for its position; this is the one place cross-modality leakage is caught.
    """
    if not seq.is_clean(vocab):
        raise ValueError("cannot unpack a sequence containing the mask id")
    report = seq.ids[: seq.layout.len_report]
    image = seq.ids[seq.layout.len_report:]
    if report.size and (report.min() < 0 or report.max() >= vocab.k_text):
        raise ValueError("report region holds an id outside the report range")
    if image.size and (image.min() < vocab.k_text or image.max() >= vocab.k_total):
        raise ValueError("image region holds an id outside the image range")
    return report.copy(), image - vocab.k_text


def modality_positions(layout: SequenceLayout, which: str) -> np.ndarray:
    """Boolean vector marking the requested region; report/image masks partition positions."""
    if which not in ("report", "image"):
        raise ValueError(f"unknown modality {which!r}")
    out = np.zeros(layout.len_total, dtype=bool)
    if which == "report":
        out[: layout.len_report] = True
    else:
        out[layout.len_report:] = True
    return out
