import pytest

from emasynth.errors import ParseError
from emasynth.textgrid import (
    AnnotationTier,
    Interval,
    parse_textgrid,
    serialize_textgrid,
)

SINGLE_TIER = """File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 1.5
tiers? <exists>
size = 1
item []:
    item [1]:
        class = "IntervalTier"
        name = "speech"
        xmin = 0
        xmax = 1.5
        intervals: size = 1
        intervals [1]:
            xmin = 0.0
            xmax = 1.5
            text = "speech"
"""


def write(tmp_path, text, name="grid.TextGrid", encoding="utf-8"):
    p = tmp_path / name
    p.write_bytes(text.encode(encoding))
    return p


class TestParse:
    def test_hand_constructed_single_interval(self, tmp_path):
        tiers = parse_textgrid(write(tmp_path, SINGLE_TIER))
        assert len(tiers) == 1
        tier = tiers[0]
        assert tier.name == "speech"
        assert tier.intervals == [Interval(0.0, 1.5, "speech")]

    def test_utf16_with_bom(self, tmp_path):
        tiers = parse_textgrid(write(tmp_path, SINGLE_TIER, encoding="utf-16"))
        assert tiers[0].intervals[0].label == "speech"

    def test_utf8_with_bom(self, tmp_path):
        tiers = parse_textgrid(write(tmp_path, SINGLE_TIER, encoding="utf-8-sig"))
        assert tiers[0].name == "speech"

    def test_zero_interval_tier(self, tmp_path):
        text = SINGLE_TIER.replace("intervals: size = 1",
                                   "intervals: size = 0").split("intervals [1]:")[0]
        tiers = parse_textgrid(write(tmp_path, text))
        assert tiers[0].intervals == []

    def test_truncated_mid_tier(self, tmp_path):
        truncated = "\n".join(SINGLE_TIER.splitlines()[:-2])
        with pytest.raises(ParseError):
            parse_textgrid(write(tmp_path, truncated))

    def test_reversed_interval_names_tier(self, tmp_path):
        bad = SINGLE_TIER.replace('xmax = 1.5\n            text',
                                  'xmax = -1.0\n            text')
        with pytest.raises(ParseError, match="speech"):
            parse_textgrid(write(tmp_path, bad))

    def test_point_tier_skipped_with_warning(self, tmp_path):
        text = SINGLE_TIER.replace("size = 1\nitem []:", "size = 2\nitem []:")
        text += """    item [2]:
        class = "TextTier"
        name = "clicks"
        xmin = 0
        xmax = 1.5
        points: size = 1
        points [1]:
            number = 0.7
            mark = "click"
"""
        with pytest.warns(UserWarning, match="clicks"):
            tiers = parse_textgrid(write(tmp_path, text))
        assert [t.name for t in tiers] == ["speech"]

    def test_quote_escaping_preserved(self, tmp_path):
        text = SINGLE_TIER.replace('text = "speech"', 'text = "he said ""hi"""')
        tiers = parse_textgrid(write(tmp_path, text))
        assert tiers[0].intervals[0].label == 'he said "hi"'

    def test_not_a_textgrid(self, tmp_path):
        with pytest.raises(ParseError):
            parse_textgrid(write(tmp_path, 'File type = "ooTextFile"\n'
                                           'Object class = "Sound"\n'))


class TestRoundTrip:
    def test_serialize_parse_identity(self, tmp_path):
        tiers = [
            AnnotationTier("speech", [
                Interval(0.0, 0.25, ""),
                Interval(0.25, 1.75, "speech"),
                Interval(1.75, 2.0, ""),
            ]),
            AnnotationTier("notes", [
                Interval(0.1, 0.9, 'quote " inside'),
            ]),
        ]
        text = serialize_textgrid(tiers)
        p = tmp_path / "rt.TextGrid"
        p.write_text(text, encoding="utf-8")
        parsed = parse_textgrid(p)
        assert parsed == tiers

    def test_serialize_rejects_overlap(self):
        bad = AnnotationTier("speech", [Interval(0.0, 1.0, "a"),
                                        Interval(0.5, 2.0, "b")])
        with pytest.raises(ParseError):
            serialize_textgrid([bad])

    def test_empty_tier_list(self, tmp_path):
        text = serialize_textgrid([])
        p = tmp_path / "empty.TextGrid"
        p.write_text(text)
        assert parse_textgrid(p) == []
