"""Grade arithmetic, ordinal label encoding and the slide/patch records."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InvalidLabelError, InvalidProbabilityError

N_ORDINAL_BITS = 5
ISUP_GRADES = tuple(range(6))


class GleasonGrade(IntEnum):
    BENIGN = 0
    GG3 = 3
    GG4 = 4
    GG5 = 5

    @classmethod
    def parse(cls, value) -> "GleasonGrade":
        try:
            return cls(int(value))
        except ValueError:
            raise InvalidLabelError(f"{value!r} is not a Gleason grade (expected 0, 3, 4 or 5)") from None

    @property
    def class_index(self) -> int:
        """Column of this grade in the 4-way instance classifier output."""
        return PATCH_CLASSES.index(self)


# instance classifier column order; argmax ties resolve to the lowest index
PATCH_CLASSES = (GleasonGrade.BENIGN, GleasonGrade.GG3, GleasonGrade.GG4, GleasonGrade.GG5)

_ISUP_TABLE = {
    (0, 0): 0,
    (3, 3): 1,
    (3, 4): 2,
    (4, 3): 3,
    (4, 4): 4,
    (3, 5): 4,
    (5, 3): 4,
    (4, 5): 5,
    (5, 4): 5,
    (5, 5): 5,
}

# one representative (primary, secondary) pair per ISUP grade
GLEASON_PAIRS = {
    grade: tuple(pair for pair, g in _ISUP_TABLE.items() if g == grade) for grade in ISUP_GRADES
}


def isup_from_gleason(primary, secondary) -> int:
    """Map a (primary, secondary) Gleason pair to its ISUP grade.

    Mixed benign/cancer pairs such as (0, 4) are rejected rather than clamped.
    """
    p = int(GleasonGrade.parse(primary))
    s = int(GleasonGrade.parse(secondary))
    try:
        return _ISUP_TABLE[(p, s)]
    except KeyError:
        raise InvalidLabelError(f"invalid Gleason pair ({p}, {s}): benign must pair with benign") from None


def check_isup(grade) -> int:
    g = int(grade)
    if g != grade or not 0 <= g <= 5:
        raise InvalidLabelError(f"ISUP grade must be an integer in [0, 5], got {grade!r}")
    return g


def encode_ordinal(grade) -> np.ndarray:
    """Cumulative target: the first ``grade`` of five bits set, e.g. 2 -> [1, 1, 0, 0, 0]."""
    g = check_isup(grade)
    bits = np.zeros(N_ORDINAL_BITS, dtype=np.int64)
    bits[:g] = 1
    return bits


def decode_ordinal(sigmoid_outputs: Sequence[float], threshold: float = 0.5) -> int:
    """Number of ordinal outputs strictly above ``threshold``.

    The count rule does not look at positions, so a non-monotone output such as
    [0.9, 0.2, 0.8, 0.1, 0.05] decodes to 2.
    """
    out = np.asarray(sigmoid_outputs, dtype=np.float64)
    if out.shape != (N_ORDINAL_BITS,):
        raise ValueError(f"expected {N_ORDINAL_BITS} ordinal outputs, got shape {out.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if not np.all(np.isfinite(out)) or out.min() < 0.0 or out.max() > 1.0:
        raise InvalidProbabilityError(f"ordinal outputs must lie in [0, 1]: {out.tolist()}")
    return int(np.count_nonzero(out > threshold))


@dataclass(frozen=True)
class PatchRecord:
    slide_id: str
    index: int
    pixels: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    tissue_fraction: float = 0.0
    mean_intensity: float = 255.0
    pseudo_label: Optional[GleasonGrade] = None
    pseudo_confidence: Optional[float] = None
    path: Optional[str] = None
    # grid position (row, col) of the tile inside its slide
    grid: tuple[int, int] = (0, 0)

    def load_pixels(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        if self.path is None:
            raise FileNotFoundError(f"patch {self.slide_id}/{self.index} has neither pixels nor a path")
        from PIL import Image

        with Image.open(self.path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)

    def to_json(self) -> dict:
        out = {
            "slide_id": self.slide_id,
            "index": self.index,
            "path": self.path,
            "grid": list(self.grid),
            "tissue_fraction": self.tissue_fraction,
            "mean_intensity": self.mean_intensity,
        }
        if self.pseudo_label is not None:
            out["pseudo_label"] = int(self.pseudo_label)
            out["pseudo_confidence"] = self.pseudo_confidence
        return out

    @classmethod
    def from_json(cls, d: dict) -> "PatchRecord":
        label = d.get("pseudo_label")
        return cls(
            slide_id=d["slide_id"],
            index=int(d["index"]),
            path=d.get("path"),
            grid=tuple(d.get("grid", (0, 0))),
            tissue_fraction=float(d["tissue_fraction"]),
            mean_intensity=float(d["mean_intensity"]),
            pseudo_label=None if label is None else GleasonGrade.parse(label),
            pseudo_confidence=d.get("pseudo_confidence"),
        )


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    primary_gg: GleasonGrade
    secondary_gg: GleasonGrade
    isup: int
    patches: tuple[PatchRecord, ...] = ()
    image_path: Optional[str] = None
    mask_path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "primary_gg", GleasonGrade.parse(self.primary_gg))
        object.__setattr__(self, "secondary_gg", GleasonGrade.parse(self.secondary_gg))
        expected = isup_from_gleason(self.primary_gg, self.secondary_gg)
        if check_isup(self.isup) != expected:
            raise InvalidLabelError(
                f"slide {self.slide_id}: ISUP {self.isup} inconsistent with "
                f"Gleason {int(self.primary_gg)}+{int(self.secondary_gg)} (expected {expected})"
            )
        object.__setattr__(self, "patches", tuple(self.patches))

    @classmethod
    def from_gleason(cls, slide_id: str, primary, secondary, **kw) -> "SlideRecord":
        return cls(slide_id, primary, secondary, isup_from_gleason(primary, secondary), **kw)

    @property
    def benign(self) -> bool:
        return self.isup == 0

    def with_patches(self, patches: Iterable[PatchRecord]) -> "SlideRecord":
        return SlideRecord(
            self.slide_id, self.primary_gg, self.secondary_gg, self.isup,
            tuple(patches), self.image_path, self.mask_path,
        )

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "primary_gg": int(self.primary_gg),
            "secondary_gg": int(self.secondary_gg),
            "isup": self.isup,
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "patches": [p.to_json() for p in self.patches],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SlideRecord":
        return cls(
            slide_id=d["slide_id"],
            primary_gg=d["primary_gg"],
            secondary_gg=d["secondary_gg"],
            isup=d["isup"],
            patches=tuple(PatchRecord.from_json(p) for p in d.get("patches", ())),
            image_path=d.get("image_path"),
            mask_path=d.get("mask_path"),
        )


# manifest fields holding file paths; stored relative to the manifest so run directories can move
PATH_KEYS = ("path", "image_path", "mask_path")


def _map_paths(row, fn):
    if not isinstance(row, dict):
        return row
    out = dict(row)
    for key in PATH_KEYS:
        if isinstance(out.get(key), str):
            out[key] = fn(out[key])
    if isinstance(out.get("patches"), list):
        out["patches"] = [_map_paths(p, fn) for p in out["patches"]]
    return out


def write_jsonl(path, records: Iterable) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w") as fh:
        for rec in records:
            row = rec.to_json() if hasattr(rec, "to_json") else rec
            row = _map_paths(row, lambda p: os.path.relpath(Path(p).resolve(), base))
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    """Rows of a JSONL manifest; relative file paths come back resolved against the manifest's directory."""
    base = Path(path).resolve().parent
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [_map_paths(r, lambda p: os.path.normpath(base / p) if not os.path.isabs(p) else p) for r in rows]


def read_slide_manifest(path) -> list[SlideRecord]:
    return [SlideRecord.from_json(d) for d in read_jsonl(path)]


def read_patch_manifest(path) -> list[PatchRecord]:
    return [PatchRecord.from_json(d) for d in read_jsonl(path)]
