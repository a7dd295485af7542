"""Interleaved text/image sequence types shared by training and inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TextSpan:
    ids: list[int]


@dataclass
class ImageSlot:
    source: str                      # "input" | "retrieved" | "generated"
    raster: np.ndarray | None = None
    img_hidden: np.ndarray | None = None   # [r x e] rows for produced slots
    retrieved_id: int | None = None
    score: float | None = None

    def __post_init__(self):
        if self.source not in ("input", "retrieved", "generated"):
            raise ValueError(f"unknown image slot source: {self.source!r}")


@dataclass
class MultimodalSequence:
    """Ordered text spans and image slots; adjacent text spans are merged."""

    segments: list = field(default_factory=list)

    def __post_init__(self):
        merged = []
        for seg in self.segments:
            if isinstance(seg, TextSpan) and not seg.ids:
                continue
            if (merged and isinstance(seg, TextSpan)
                    and isinstance(merged[-1], TextSpan)):
                merged[-1] = TextSpan(merged[-1].ids + list(seg.ids))
            else:
                merged.append(seg)
        self.segments = merged

    def text_spans(self) -> list[TextSpan]:
        return [s for s in self.segments if isinstance(s, TextSpan)]

    def image_slots(self) -> list[ImageSlot]:
        return [s for s in self.segments if isinstance(s, ImageSlot)]

    def flat_items(self) -> list:
        """Token ids and slots in order; slots appear as ImageSlot objects."""
        out = []
        for seg in self.segments:
            if isinstance(seg, TextSpan):
                out.extend(seg.ids)
            else:
                out.append(seg)
        return out
