"""Praat TextGrid reading and writing (long text format).

Only IntervalTiers are returned; point tiers are skipped with a warning.
Labels survive round trips verbatim, including embedded quotes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError


@dataclass(frozen=True)
class Interval:
    start: float
    end: float
    label: str


@dataclass
class AnnotationTier:
    name: str
    intervals: list

    def validate(self):
        prev_end = None
        for iv in self.intervals:
            if not iv.start < iv.end:
                raise ParseError(
                    f"tier '{self.name}': interval [{iv.start}, {iv.end}] is empty or reversed"
                )
            if prev_end is not None and iv.start < prev_end - 1e-9:
                raise ParseError(f"tier '{self.name}': overlapping intervals")
            prev_end = iv.end
        return self

    def labelled(self, label: str) -> list:
        return [iv for iv in self.intervals if iv.label == label]


def _decode(raw: bytes) -> str:
    if raw.startswith(b"\xff\xfe") or raw.startswith(b"\xfe\xff"):
        return raw.decode("utf-16")
    if raw.startswith(b"\xef\xbb\xbf"):
        return raw.decode("utf-8-sig")
    return raw.decode("utf-8")


class _Cursor:
    def __init__(self, text: str, source):
        self.lines = text.splitlines()
        self.pos = 0
        self.source = source

    def next_line(self) -> str:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        raise ParseError("unexpected end of file", source=self.source,
                         line=len(self.lines))

    def error(self, message: str) -> ParseError:
        return ParseError(message, source=self.source, line=self.pos)


def _value_of(cursor: _Cursor, key: str) -> str:
    line = cursor.next_line()
    if "=" not in line:
        raise cursor.error(f"expected '{key} = ...', found {line!r}")
    left, _, right = line.partition("=")
    if " ".join(left.split()) != key:
        raise cursor.error(f"expected key {key!r}, found {left.strip()!r}")
    return right.strip()


def _number(cursor: _Cursor, key: str) -> float:
    value = _value_of(cursor, key)
    try:
        return float(value)
    except ValueError as exc:
        raise cursor.error(f"{key} is not a number: {value!r}") from exc


def _string(cursor: _Cursor, key: str) -> str:
    value = _value_of(cursor, key)
    if len(value) < 2 or not (value.startswith('"') and value.endswith('"')):
        raise cursor.error(f"{key} is not a quoted string: {value!r}")
    return value[1:-1].replace('""', '"')


def _header_index(cursor: _Cursor, prefix: str) -> int:
    line = cursor.next_line()
    if not (line.startswith(prefix + " [") and line.endswith("]:")):
        raise cursor.error(f"expected '{prefix} [n]:', found {line!r}")
    return int(line[len(prefix) + 2:-2])


def parse_textgrid(path) -> list:
    """Parse a long-format text TextGrid into IntervalTiers.

    Accepts UTF-8 (with or without BOM) and UTF-16.  Point tiers are
    skipped with a warning; inconsistent tier metadata raises ParseError
    naming the tier.
    """
    source = str(path)
    cursor = _Cursor(_decode(Path(path).read_bytes()), source)

    if _string(cursor, "File type") != "ooTextFile":
        raise cursor.error("not an ooTextFile")
    if _string(cursor, "Object class") != "TextGrid":
        raise cursor.error("not a TextGrid object")
    grid_xmin = _number(cursor, "xmin")
    grid_xmax = _number(cursor, "xmax")
    if grid_xmax < grid_xmin:
        raise cursor.error(f"grid xmax {grid_xmax} < xmin {grid_xmin}")
    flag = cursor.next_line()
    if not flag.startswith("tiers?"):
        raise cursor.error(f"expected tiers? flag, found {flag!r}")
    if "<exists>" not in flag:
        return []
    size = int(_number(cursor, "size"))
    header = cursor.next_line()
    if not header.startswith("item"):
        raise cursor.error(f"expected 'item []:', found {header!r}")

    tiers = []
    for _ in range(size):
        _header_index(cursor, "item")
        tier_class = _string(cursor, "class")
        name = _string(cursor, "name")
        tier_xmin = _number(cursor, "xmin")
        tier_xmax = _number(cursor, "xmax")
        if tier_xmax < tier_xmin:
            raise ParseError(
                f"tier '{name}': xmax {tier_xmax} < xmin {tier_xmin}",
                source=source, line=cursor.pos,
            )
        if tier_class == "IntervalTier":
            n_intervals = int(_number(cursor, "intervals: size"))
            intervals = []
            for _ in range(n_intervals):
                _header_index(cursor, "intervals")
                try:
                    xmin = _number(cursor, "xmin")
                    xmax = _number(cursor, "xmax")
                    text = _string(cursor, "text")
                except ParseError as exc:
                    raise ParseError(
                        f"tier '{name}': {exc}", source=None, line=None
                    ) from exc
                intervals.append(Interval(xmin, xmax, text))
            tiers.append(AnnotationTier(name=name, intervals=intervals).validate())
        elif tier_class in ("TextTier", "PointTier"):
            warnings.warn(f"skipping point tier '{name}'", stacklevel=2)
            n_points = int(_number(cursor, "points: size"))
            for _ in range(n_points):
                _header_index(cursor, "points")
                _number(cursor, "number")
                _string(cursor, "mark")
        else:
            raise ParseError(f"tier '{name}': unknown class {tier_class!r}",
                             source=source, line=cursor.pos)
    return tiers


def _quote(text: str) -> str:
    return '"' + text.replace('"', '""') + '"'


def serialize_textgrid(tiers: list, xmin: float | None = None,
                       xmax: float | None = None) -> str:
    """Render IntervalTiers back into the Praat long text format."""
    for tier in tiers:
        tier.validate()
    starts = [iv.start for t in tiers for iv in t.intervals]
    ends = [iv.end for t in tiers for iv in t.intervals]
    xmin = min(starts, default=0.0) if xmin is None else xmin
    xmax = max(ends, default=0.0) if xmax is None else xmax

    out = [
        'File type = "ooTextFile"',
        'Object class = "TextGrid"',
        "",
        f"xmin = {xmin!r}",
        f"xmax = {xmax!r}",
        "tiers? <exists>" if tiers else "tiers? <absent>",
    ]
    if not tiers:
        return "\n".join(out) + "\n"
    out.append(f"size = {len(tiers)}")
    out.append("item []:")
    for i, tier in enumerate(tiers, start=1):
        t_xmin = min((iv.start for iv in tier.intervals), default=xmin)
        t_xmax = max((iv.end for iv in tier.intervals), default=xmax)
        out += [
            f"    item [{i}]:",
            '        class = "IntervalTier"',
            f"        name = {_quote(tier.name)}",
            f"        xmin = {t_xmin!r}",
            f"        xmax = {t_xmax!r}",
            f"        intervals: size = {len(tier.intervals)}",
        ]
        for j, iv in enumerate(tier.intervals, start=1):
            out += [
                f"        intervals [{j}]:",
                f"            xmin = {iv.start!r}",
                f"            xmax = {iv.end!r}",
                f"            text = {_quote(iv.label)}",
            ]
    return "\n".join(out) + "\n"
