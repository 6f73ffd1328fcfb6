"""Bounding boxes in normalised coordinates and their text form.

A box is written ``[x_min,y_min,x_max,y_max]`` with every coordinate rounded
to three decimals and trailing zeros trimmed, keeping at least one decimal
digit: ``(0.525, 0.0, 0.675, 0.394) -> "[0.525,0.0,0.675,0.394]"``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

_BRACKETED = re.compile(r"\[([^\[\]]*)\]")
_NUMBER = re.compile(r"\s*(\d+(?:\.\d*)?|\.\d+)\s*\Z")


class BBoxParseError(ValueError):
    """Raised by :func:`parse_bbox`; ``position`` is a character offset."""

    def __init__(self, message: str, position: int, kind: str):
        super().__init__(f"{message} (at position {position})")
        self.position = position
        self.kind = kind


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for v in self.as_tuple():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"bbox coordinate {v} outside [0, 1]")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate or inverted bbox {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def format_coord(v: float) -> str:
    s = f"{v:.3f}".rstrip("0")
    if s.endswith("."):
        s += "0"
    if s == "-0.0":
        s = "0.0"
    return s


def serialize_bbox(b: BBox) -> str:
    return "[" + ",".join(format_coord(v) for v in b.as_tuple()) + "]"


def parse_bbox(s: str) -> BBox:
    """Parse the single bracketed 4-tuple in ``s`` (any decimal precision)."""
    matches = list(_BRACKETED.finditer(s))
    if not matches:
        pos = s.find("[")
        raise BBoxParseError("no bracketed coordinate list found", max(pos, 0), "format")
    if len(matches) > 1:
        raise BBoxParseError("more than one bracketed list", matches[1].start(), "format")
    m = matches[0]
    parts = m.group(1).split(",")
    offset = m.start(1)
    if len(parts) != 4:
        kind = "missing" if len(parts) < 4 else "extra"
        raise BBoxParseError(f"expected 4 coordinates, found {len(parts)}", m.start(), kind)
    values = []
    for part in parts:
        num = _NUMBER.match(part)
        if num is None:
            raise BBoxParseError(f"non-numeric coordinate {part.strip()!r}", offset, "numeric")
        v = float(num.group(1))
        if v > 1.0:
            raise BBoxParseError(f"coordinate {v} outside [0, 1]", offset, "range")
        values.append(v)
        offset += len(part) + 1
    x0, y0, x1, y1 = values
    if not (x0 < x1 and y0 < y1):
        raise BBoxParseError(f"inverted box {values}", m.start(), "inverted")
    return BBox(x0, y0, x1, y1)
