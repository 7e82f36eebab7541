"""Label manifests, image decoding, and the patient/eye file naming scheme.

Images on disk are named "<patient>_<left|right>.<ext>" and the label file is
a CSV with header "image,level" whose image column carries the bare stem
(no extension). Decoded images are float32 H x W x 3 arrays in [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ScreeningError

GRADES = (0, 1, 2, 3, 4)
N_GRADES = 5


class MissingFileError(ScreeningError):
    pass


class MalformedRowError(ScreeningError):
    pass


class DuplicateIdError(ScreeningError):
    pass


class MalformedIdError(ScreeningError):
    pass


class DecodeError(ScreeningError):
    pass


class EyeSide(str, Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True, order=True)
class ImageId:
    """Identity of one photograph: patient number plus which eye."""

    patient_id: int
    eye: EyeSide

    def __str__(self) -> str:
        return f"{self.patient_id}_{self.eye.value}"


def parse_image_id(stem: str) -> ImageId:
    """Parse "<patient>_<left|right>" splitting on the final underscore."""
    head, sep, tail = stem.rpartition("_")
    if not sep or not head or not head.isdigit():
        raise MalformedIdError(f"not a <patient>_<eye> name: {stem!r}")
    if tail == "left":
        eye = EyeSide.LEFT
    elif tail == "right":
        eye = EyeSide.RIGHT
    else:
        raise MalformedIdError(f"eye token must be left or right: {stem!r}")
    return ImageId(int(head), eye)


@dataclass
class LabelManifest:
    """Mapping from image id to grade, with per-grade totals."""

    entries: dict[ImageId, int] = field(default_factory=dict)

    def counts(self) -> np.ndarray:
        out = np.zeros(N_GRADES, dtype=np.int64)
        for grade in self.entries.values():
            out[grade] += 1
        return out

    def ids(self) -> list[ImageId]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def load_labels(path) -> LabelManifest:
    """Read a labels CSV (header "image,level", grades 0-4) into a manifest."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"labels file not found: {path}")
    entries: dict[ImageId, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["image", "level"]:
            raise MalformedRowError(f"expected header 'image,level', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise MalformedRowError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                image_id = parse_image_id(row[0].strip())
            except MalformedIdError as exc:
                raise MalformedRowError(f"{path}:{lineno}: {exc}") from exc
            text = row[1].strip()
            try:
                grade = int(text)
            except ValueError:
                raise MalformedRowError(f"{path}:{lineno}: grade {text!r} is not an integer") from None
            if grade not in GRADES:
                raise MalformedRowError(f"{path}:{lineno}: grade {grade} outside 0-4")
            if image_id in entries:
                raise DuplicateIdError(f"{path}:{lineno}: duplicate id {image_id}")
            entries[image_id] = grade
    return LabelManifest(entries)


def save_labels(manifest: LabelManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "level"])
        for image_id in manifest.ids():
            writer.writerow([str(image_id), manifest.entries[image_id]])


def load_image(path) -> np.ndarray:
    """Decode a PNG/JPEG into float32 H x W x 3 with intensities v/255."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return arr.astype(np.float32) / np.float32(255.0)


def save_image(path, img: np.ndarray) -> None:
    """Write a unit-interval H x W x 3 array as an 8-bit PNG/JPEG."""
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)
