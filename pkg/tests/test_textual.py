import struct
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimic.codecs import CodecDescriptor, default_registry, toy_dct
from unimic.textual import (
    NO_CONTENT,
    TEXT_LEVELS,
    CaptionFormatError,
    CaptionNotFound,
    CaptionTruncatedWarning,
    ConPLevel,
    ContentPrompt,
    PromptBytes,
    PromptDecodeError,
    compress_prompt,
    decompress_prompt,
    parse_captions,
    parse_compression_prompt,
    render_compression_prompt,
    truncate_to_level,
    write_captions,
)
from unimic.toydata import make_toy_set


def _adler32(data: bytes) -> int:
    a, b = 1, 0
    for byte in data:
        a = (a + byte) % 65521
        b = (b + a) % 65521
    return (b << 16) | a


def _stored_zlib(data: bytes) -> bytes:
    """A zlib stream built by hand from one uncompressed DEFLATE block."""
    assert len(data) < 0x10000
    block = bytes([0x01]) + struct.pack("<HH", len(data), len(data) ^ 0xFFFF) + data
    return b"\x78\x01" + block + struct.pack(">I", _adler32(data))


class TestPromptCoding:
    @settings(max_examples=1000, deadline=None)
    @given(st.text(max_size=400))
    def test_lossless(self, text):
        assert decompress_prompt(compress_prompt(text)) == text

    @settings(max_examples=200, deadline=None)
    @given(st.text(max_size=200))
    def test_wire_round_trip(self, text):
        pb = compress_prompt(text)
        back = PromptBytes.from_wire(pb.to_wire())
        assert back == pb
        assert pb.raw_byte_count == len(text.encode("utf-8"))

    @pytest.mark.parametrize("text", ["", "a red circle", "é✓ 漢字 " * 20])
    def test_decodes_hand_built_stream(self, text):
        raw = text.encode("utf-8")
        assert decompress_prompt(PromptBytes(_stored_zlib(raw), len(raw))) == text

    def test_stream_framing(self):
        text = "a small blue square at the top left of a striped background"
        pb = compress_prompt(text)
        cmf, flg = pb.compressed[:2]
        assert cmf & 0x0F == 8
        assert (cmf * 256 + flg) % 31 == 0
        assert pb.compressed[-4:] == struct.pack(">I", _adler32(text.encode()))
        assert pb.compressed_byte_count < pb.raw_byte_count

    def test_corruption(self):
        pb = compress_prompt("three shapes on a gradient")
        with pytest.raises(PromptDecodeError):
            decompress_prompt(PromptBytes(pb.compressed[:-2], pb.raw_byte_count))
        with pytest.raises(PromptDecodeError):
            decompress_prompt(PromptBytes(pb.compressed + b"x", pb.raw_byte_count))
        with pytest.raises(PromptDecodeError):
            decompress_prompt(PromptBytes(pb.compressed, pb.raw_byte_count + 1))
        with pytest.raises(PromptDecodeError):
            decompress_prompt(PromptBytes(b"\x00\x01\x02", 3))
        bad_utf8 = b"\xff\xfe"
        with pytest.raises(PromptDecodeError):
            decompress_prompt(PromptBytes(_stored_zlib(bad_utf8), 2))
        with pytest.raises(PromptDecodeError):
            PromptBytes.from_wire(b"\x00")

    def test_oversize_rejected(self):
        with pytest.raises(ValueError):
            compress_prompt("a" * 70000)


class TestContentPrompt:
    def test_limits(self):
        assert [lv.word_limit for lv in TEXT_LEVELS] == [16, 36, 75]
        for lv in TEXT_LEVELS:
            ContentPrompt(lv, " ".join(["w"] * lv.word_limit))
            with pytest.raises(ValueError):
                ContentPrompt(lv, " ".join(["w"] * (lv.word_limit + 1)))

    def test_none_level(self):
        assert NO_CONTENT.text == ""
        with pytest.raises(ValueError):
            ContentPrompt(ConPLevel.NONE, "text")
        with pytest.raises(ValueError):
            ContentPrompt(ConPLevel.CONCISE, "   ")

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.text(alphabet="abcxyz,.", min_size=1, max_size=6), max_size=120), st.sampled_from(TEXT_LEVELS))
    def test_truncation_respects_limit(self, words, level):
        caption = " ".join(words) or "x"
        cp = truncate_to_level(caption, level)
        assert len(cp.text.split()) <= level.word_limit
        assert caption.startswith(cp.text)

    def test_truncation_keeps_punctuation(self):
        assert truncate_to_level("one, two;  three four", "concise").text == "one, two;  three four"
        long = " ".join(f"w{i}" for i in range(40))
        assert truncate_to_level(long, "concise").text == " ".join(f"w{i}" for i in range(16))

    def test_level_codes(self):
        assert [lv.code for lv in ConPLevel] == [0, 1, 2, 3]
        assert ConPLevel.from_code(2) is ConPLevel.MODERATE
        with pytest.raises(ValueError):
            ConPLevel.from_code(4)

    def test_toy_captions_are_nested(self):
        ids, _, captions = make_toy_set(30, 32, seed=11)
        for i in ids:
            c = captions[i]
            sizes = [len(c[lv].encode()) for lv in TEXT_LEVELS]
            assert sizes == sorted(sizes)
            assert c[ConPLevel.MODERATE].startswith(c[ConPLevel.CONCISE])
            assert c[ConPLevel.DETAILED].startswith(c[ConPLevel.MODERATE])
            for lv in TEXT_LEVELS:
                assert len(c[lv].split()) <= lv.word_limit


class TestCompressionPrompt:
    def test_canonical_string(self):
        d = CodecDescriptor("traditional", "vtm", "PSNR", 52)
        assert (
            render_compression_prompt(d, "detailed").text
            == "category:traditional|codec:vtm|metric:PSNR|quality:52|conp:detailed"
        )
        e = CodecDescriptor("neural", "elic", "MS-SSIM", 0.0483)
        assert render_compression_prompt(e, ConPLevel.NONE).text.endswith("quality:0.0483|conp:none")

    def test_round_trip_over_registry(self):
        r = default_registry()
        r.register(CodecDescriptor("neural", "mbt18", "MS-SSIM", 3), object())
        r.register(CodecDescriptor("neural", "hific", "GAN", 0.14), object())
        for d in r.list_codecs():
            for lv in ConPLevel:
                assert parse_compression_prompt(render_compression_prompt(d, lv).text) == (d, lv)

    @pytest.mark.parametrize(
        "text",
        [
            "category:traditional|codec:vtm|metric:PSNR|quality:52",
            "codec:vtm|category:traditional|metric:PSNR|quality:52|conp:none",
            "category:traditional|codec:vtm|metric:PSNR|quality:x|conp:none",
            "category:traditional|codec:vtm|metric:LPIPS|quality:1|conp:none",
            "category:traditional|codec:vtm|metric:PSNR|quality:1|conp:huge",
        ],
    )
    def test_malformed(self, text):
        with pytest.raises(ValueError):
            parse_compression_prompt(text)

    def test_quality_formatting(self):
        assert "quality:5|" in render_compression_prompt(toy_dct(5), "none").text


class TestCaptions:
    def test_parse_and_lookup(self, tmp_path):
        entries = {
            "b": {ConPLevel.CONCISE: "x", ConPLevel.MODERATE: "x y", ConPLevel.DETAILED: "x y z"},
            "a": {ConPLevel.CONCISE: "é", ConPLevel.MODERATE: "é f", ConPLevel.DETAILED: "é f g"},
        }
        path = tmp_path / "captions.jsonl"
        write_captions(path, entries)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith('{"image_id": "a"') and "é" in lines[0]
        store = parse_captions(path.read_text(encoding="utf-8"))
        assert store.content_prompt("b", "moderate").text == "x y"
        assert store.content_prompt("b", "none") is NO_CONTENT
        with pytest.raises(CaptionNotFound):
            store.content_prompt("zzz", "concise")

    def test_overlong_caption_truncated_with_warning(self):
        long = " ".join(["word"] * 20)
        line = f'{{"image_id": "i", "concise": "{long}", "moderate": "m", "detailed": "d"}}'
        with pytest.warns(CaptionTruncatedWarning):
            store = parse_captions(line)
        assert len(store["i"][ConPLevel.CONCISE].split()) == 16

    def test_within_limits_no_warning(self):
        line = '{"image_id": "i", "concise": "c", "moderate": "m", "detailed": "d"}'
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            parse_captions(line)

    @pytest.mark.parametrize(
        "text",
        [
            "not json",
            '{"concise": "c", "moderate": "m", "detailed": "d"}',
            '{"image_id": "i", "concise": "", "moderate": "m", "detailed": "d"}',
            '{"image_id": "i", "moderate": "m", "detailed": "d"}',
            '{"image_id": "i", "concise": "c", "moderate": "m", "detailed": "d"}\n'
            '{"image_id": "i", "concise": "c", "moderate": "m", "detailed": "d"}',
        ],
    )
    def test_format_errors(self, text):
        with pytest.raises(CaptionFormatError):
            parse_captions(text)
