"""In-memory bags: the selected patches of one slide, stored once and indexed."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .core import PatchRecord, SlideRecord
from .tiling import BAG_SIZE, SlideImage, extract_patches, select_bag


@dataclass
class SlideBag:
    record: SlideRecord
    patches: list[PatchRecord]
    # bag position -> row of ``patches``; repeats when the bag was padded cyclically
    bag_index: np.ndarray
    all_patches: list[PatchRecord] = field(default_factory=list, repr=False)
    mask: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def slide_id(self) -> str:
        return self.record.slide_id

    def pixels(self) -> np.ndarray:
        return np.stack([p.load_pixels() for p in self.patches])

    def bag(self) -> list[PatchRecord]:
        return [self.patches[i] for i in self.bag_index]


def bag_from_patches(record: SlideRecord, patches: list[PatchRecord], bag_size: int = BAG_SIZE,
                     mask=None) -> SlideBag:
    chosen = select_bag(patches, bag_size)
    order: dict[int, int] = {}
    unique: list[PatchRecord] = []
    index = []
    for p in chosen:
        if p.index not in order:
            order[p.index] = len(unique)
            unique.append(p)
        index.append(order[p.index])
    return SlideBag(record, unique, np.asarray(index, dtype=np.int64), list(patches), mask)


def bag_from_image(record: SlideRecord, image: SlideImage, bag_size: int = BAG_SIZE,
                   patch_size: int = 256, mask=None) -> SlideBag:
    return bag_from_patches(record, extract_patches(image, patch_size), bag_size, mask)


class StemCache:
    """Pooled encoder inputs per slide; valid because the stem has no parameters."""

    def __init__(self, encoder):
        self.encoder = encoder
        self._cache: dict[str, torch.Tensor] = {}

    @torch.no_grad()
    def __call__(self, bag: SlideBag) -> torch.Tensor:
        t = self._cache.get(bag.slide_id)
        if t is None:
            t = self.encoder.stem(bag.pixels())
            self._cache[bag.slide_id] = t
        return t

    @torch.no_grad()
    def patches(self, patches: list[PatchRecord], batch: int = 64) -> torch.Tensor:
        chunks = []
        for i in range(0, len(patches), batch):
            chunks.append(self.encoder.stem(np.stack([p.load_pixels() for p in patches[i:i + batch]])))
        return torch.cat(chunks)


def stack_bags(stems: list[torch.Tensor], bags: list[SlideBag]):
    """Concatenate per-slide unique stems; return the batch and each bag's gather index into it."""
    offsets = np.cumsum([0] + [s.shape[0] for s in stems])
    gathers = [torch.from_numpy(b.bag_index + offsets[i]) for i, b in enumerate(bags)]
    return torch.cat(stems), gathers
