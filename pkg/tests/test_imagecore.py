"""Codec conformance: RGBE decode/encode, PFM, tone mapping."""

import numpy as np
import pytest

from olatkit import imagecore
from olatkit.errors import (
    FormatError,
    TruncatedDataError,
    UnsupportedFormatError,
    ValidationError,
)
from olatkit.imagecore import (
    HdrImage,
    HdrRowReader,
    LdrImage,
    ToneMapParams,
    decode_hdr,
    decode_pfm,
    encode_hdr,
    encode_pfm,
    encode_png,
    tone_map,
)


def build_hdr_bytes(rgbe_rows):
    """Hand-assemble a flat-scanline .hdr file from uint8 (H, W, 4)."""
    arr = np.asarray(rgbe_rows, dtype=np.uint8)
    h, w = arr.shape[:2]
    header = f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n".encode()
    return header + arr.tobytes()


class TestRgbeDecode:
    def test_unit_value(self):
        """RGBE (128,0,0,129) decodes to (1,0,0): 128 * 2^(129-136) = 1."""
        img = decode_hdr(build_hdr_bytes(np.tile([128, 0, 0, 129], (2, 4, 1))))
        np.testing.assert_array_equal(img.data[..., 0], 1.0)
        np.testing.assert_array_equal(img.data[..., 1:], 0.0)

    def test_zero_exponent_rule(self):
        img = decode_hdr(build_hdr_bytes(np.tile([90, 12, 7, 0], (1, 4, 1))))
        np.testing.assert_array_equal(img.data, 0.0)

    def test_small_file_round_trip_bytes(self):
        """4x2 constant file re-encodes to identical bytes (flat scanlines)."""
        blob = build_hdr_bytes(np.tile([128, 128, 128, 129], (2, 4, 1)))
        assert encode_hdr(decode_hdr(blob)) == blob

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_hdr(b"#?NOPE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 1\n" + b"\x00" * 4)

    def test_malformed_resolution(self):
        with pytest.raises(FormatError):
            decode_hdr(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y one +X 2\n")

    def test_truncated_scanline_reports_offset(self):
        blob = build_hdr_bytes(np.tile([128, 128, 128, 129], (2, 4, 1)))
        with pytest.raises(TruncatedDataError) as err:
            decode_hdr(blob[:-5])
        assert err.value.offset > 0

    def test_flipped_orientation_normalized(self):
        """+Y ordering is flipped back to the top-left origin."""
        rows = np.zeros((2, 4, 4), dtype=np.uint8)
        rows[0, :, :] = [128, 0, 0, 129]  # red row written first
        rows[1, :, :] = [0, 128, 0, 129]  # green row second
        blob = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n+Y 2 +X 4\n" + rows.tobytes()
        img = decode_hdr(blob)
        # +Y means the first scanline is the bottom row
        np.testing.assert_array_equal(img.data[1, :, 0], 1.0)
        np.testing.assert_array_equal(img.data[0, :, 1], 1.0)


class TestRgbeEncode:
    def test_zero_image(self):
        img = HdrImage.from_array(np.zeros((2, 4, 3), np.float32))
        blob = encode_hdr(img)
        texels = np.frombuffer(blob.split(b"+X 4\n", 1)[1], np.uint8).reshape(2, 4, 4)
        np.testing.assert_array_equal(texels, 0)

    def test_unit_value_encoding(self):
        """1.0 encodes to mantissa 128, exponent byte 129."""
        img = HdrImage.from_array(np.ones((1, 4, 3), np.float32))
        texels = np.frombuffer(encode_hdr(img).split(b"+X 4\n", 1)[1], np.uint8)
        np.testing.assert_array_equal(texels.reshape(4, 4), [[128, 128, 128, 129]] * 4)

    def test_round_trip_relative_error(self):
        """10k random radiances round-trip within one mantissa step (2^-8)."""
        rng = np.random.default_rng(11)
        vals = rng.uniform(1e-4, 1e4, 10000).astype(np.float32)
        img = HdrImage.from_array(np.repeat(vals, 3).reshape(100, 100, 3))
        out = decode_hdr(encode_hdr(img))
        rel = np.abs(out.data - img.data) / img.data
        assert rel.max() <= 2.0**-8

    def test_round_trip_color_pixels(self):
        """Per-channel error stays within 2^-8 of the pixel's dominant channel."""
        rng = np.random.default_rng(12)
        img = HdrImage.from_array(rng.uniform(1e-4, 1e4, (64, 64, 3)).astype(np.float32))
        out = decode_hdr(encode_hdr(img))
        err = np.abs(out.data - img.data) / img.data.max(axis=2, keepdims=True)
        assert err.max() <= 2.0**-8

    def test_zeros_exact_within_color_image(self):
        rng = np.random.default_rng(13)
        data = rng.uniform(0.1, 5.0, (8, 8, 3)).astype(np.float32)
        data[:, :, 2] = 0.0
        out = decode_hdr(encode_hdr(HdrImage.from_array(data)))
        np.testing.assert_array_equal(out.data[:, :, 2], 0.0)

    def test_rle_round_trip_large(self):
        """Wide images use RLE scanlines; values and runs survive the trip."""
        rng = np.random.default_rng(14)
        data = rng.uniform(0.01, 10.0, (16, 300, 3)).astype(np.float32)
        data[:, 40:160] = 2.0  # long runs
        img = HdrImage.from_array(data)
        blob = encode_hdr(img)
        assert len(blob) < 16 * 300 * 4 + 200  # RLE actually compressed the runs
        out = decode_hdr(blob)
        rel = np.abs(out.data - img.data) / img.data.max(axis=2, keepdims=True)
        assert rel.max() <= 2.0**-8

    def test_non_finite_rejected(self):
        bad = np.ones((2, 2, 3), np.float32)
        with pytest.raises(ValidationError):
            HdrImage(width=2, height=2, data=bad * np.inf)


class TestRowReader:
    def test_streamed_rows_match_full_decode(self):
        rng = np.random.default_rng(15)
        img = HdrImage.from_array(rng.uniform(0, 4, (33, 64, 3)).astype(np.float32))
        blob = encode_hdr(img)
        full = decode_hdr(blob)
        reader = HdrRowReader(blob)
        got = []
        while reader.rows_remaining:
            got.append(reader.read_rows(7))
        np.testing.assert_array_equal(np.concatenate(got), full.data)


class TestPfm:
    def test_bit_exact_round_trip(self):
        rng = np.random.default_rng(16)
        img = HdrImage.from_array(rng.uniform(0, 100, (13, 7, 3)).astype(np.float32))
        out = decode_pfm(encode_pfm(img))
        assert np.array_equal(out.data, img.data)
        assert out.data.tobytes() == img.data.tobytes()

    def test_little_endian_one_pixel_fixture(self):
        """Negative scale means little-endian floats (hand-assembled bytes)."""
        payload = np.array([1.5, 0.25, 8.0], dtype="<f4").tobytes()
        img = decode_pfm(b"PF\n1 1\n-1.0\n" + payload)
        np.testing.assert_array_equal(img.data[0, 0], [1.5, 0.25, 8.0])

    def test_big_endian_fixture(self):
        payload = np.array([2.0, 0.5, 1.0], dtype=">f4").tobytes()
        img = decode_pfm(b"PF\n1 1\n1.0\n" + payload)
        np.testing.assert_array_equal(img.data[0, 0], [2.0, 0.5, 1.0])

    def test_grayscale_unsupported(self):
        with pytest.raises(UnsupportedFormatError):
            decode_pfm(b"Pf\n1 1\n-1.0\n" + b"\x00" * 4)

    def test_row_order_bottom_up(self):
        data = np.zeros((2, 1, 3), np.float32)
        data[0] = 1.0  # top row
        blob = encode_pfm(HdrImage.from_array(data))
        raw = np.frombuffer(blob.split(b"-1.0\n", 1)[1], "<f4").reshape(2, 1, 3)
        np.testing.assert_array_equal(raw[1], 1.0)  # stored last = top row


class TestToneMap:
    def test_unit_value_maps_to_255(self):
        img = HdrImage.from_array(np.ones((1, 1, 3), np.float32))
        out = tone_map(img, ToneMapParams(exposure=0.0, gamma=1.0))
        np.testing.assert_array_equal(out.data, 255)

    def test_zero_maps_to_zero(self):
        img = HdrImage.from_array(np.zeros((1, 1, 3), np.float32))
        for gamma in (1.0, 2.2, 0.7):
            assert tone_map(img, ToneMapParams(gamma=gamma)).data.max() == 0

    def test_quarter_with_gamma(self):
        """0.25 at gamma 2.2 lands on round(255 * 0.25^(1/2.2)) = 136."""
        img = HdrImage.from_array(np.full((1, 1, 3), 0.25, np.float32))
        out = tone_map(img, ToneMapParams(exposure=0.0, gamma=2.2))
        np.testing.assert_array_equal(out.data, 136)

    def test_monotone_in_radiance(self):
        rng = np.random.default_rng(17)
        vals = np.sort(rng.uniform(0, 4, 256)).astype(np.float32)
        img = HdrImage.from_array(np.repeat(vals, 3).reshape(1, 256, 3))
        out = tone_map(img, ToneMapParams(exposure=0.5, gamma=2.2))
        assert np.all(np.diff(out.data[0, :, 0].astype(int)) >= 0)

    def test_exposure_stops(self):
        img = HdrImage.from_array(np.full((1, 1, 3), 0.5, np.float32))
        brighter = tone_map(img, ToneMapParams(exposure=1.0, gamma=1.0))
        np.testing.assert_array_equal(brighter.data, 255)

    def test_invalid_params(self):
        with pytest.raises(ValidationError):
            ToneMapParams(gamma=0.0)
        with pytest.raises(ValidationError):
            ToneMapParams(exposure=float("nan"))


class TestPng:
    def test_deterministic_bytes(self):
        rng = np.random.default_rng(18)
        ldr = LdrImage(width=16, height=16,
                       data=rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        assert encode_png(ldr) == encode_png(ldr)
        assert encode_png(ldr)[:8] == b"\x89PNG\r\n\x1a\n"
