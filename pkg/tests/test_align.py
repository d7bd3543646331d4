"""Dense flow estimation, warping, interpolation, and take alignment."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from olatkit.align import (
    FlowField,
    TakeLayout,
    align_take,
    compose_flow,
    compute_flow,
    decode_flow,
    encode_flow,
    interpolate_flow,
    take_alignment_flows,
    warp,
)
from olatkit.errors import ContractError, FormatError, InsufficientTrackingError, ValidationError
from olatkit.imagecore import HdrImage
from olatkit.oracle import generate_drifting_take


def noise_texture(rng, size=96, sigma=2.0):
    """Smooth random texture with plenty of gradient everywhere."""
    base = gaussian_filter(rng.uniform(0, 1, (size, size)), sigma)
    base = (base - base.min()) / (base.max() - base.min())
    return HdrImage.from_array(np.repeat(base[:, :, None], 3, axis=2).astype(np.float32))


def shift_image(img, dx, dy):
    """Resample so that out[p] = img[p + (dx, dy)]: the recovered flow is (dx, dy)."""
    flow = FlowField.constant(img.height, img.width, dx, dy)
    return warp(img, flow)


def interior(arr, margin=12):
    return arr[margin:-margin, margin:-margin]


class TestWarp:
    def test_zero_flow_identity_bit_exact(self):
        rng = np.random.default_rng(40)
        img = noise_texture(rng, 32)
        out = warp(img, FlowField.zeros(32, 32))
        assert np.array_equal(out.data, img.data)

    def test_constant_flow_on_ramp(self):
        """Flow (1, 0) on v(x, y) = x samples min(x + 1, W - 1)."""
        w = 16
        ramp = np.repeat(np.arange(w, dtype=np.float32)[None, :, None], 3, axis=2)
        ramp = np.repeat(ramp[None], 8, axis=0).reshape(8, w, 3)
        img = HdrImage.from_array(ramp)
        out = warp(img, FlowField.constant(8, w, 1.0, 0.0))
        expected = np.broadcast_to(np.minimum(np.arange(w) + 1, w - 1), (8, w))
        np.testing.assert_allclose(out.data[:, :, 0], expected, atol=1e-6)

    def test_round_trip_small(self):
        """Warp then inverse warp recovers a smooth interior to 1e-3 of range."""
        gx, gy = np.meshgrid(np.arange(64, dtype=np.float64), np.arange(64))
        smooth = 0.5 + 0.2 * np.sin(2 * np.pi * gx / 64) + 0.2 * np.sin(2 * np.pi * gy / 64)
        img = HdrImage.from_array(np.repeat(smooth[:, :, None], 3, axis=2).astype(np.float32))
        fwd = warp(img, FlowField.constant(64, 64, 0.6, -0.4))
        back = warp(fwd, FlowField.constant(64, 64, -0.6, 0.4))
        err = np.sqrt(np.mean(interior(back.data - img.data, 4) ** 2))
        assert err <= 1e-3  # dynamic range is ~1

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(42)
        with pytest.raises(ContractError):
            warp(noise_texture(rng, 16), FlowField.zeros(8, 8))


class TestInterpolateFlow:
    def test_endpoints_bit_identical(self):
        rng = np.random.default_rng(43)
        f0 = FlowField(data=rng.normal(size=(8, 8, 2)).astype(np.float32))
        f1 = FlowField(data=rng.normal(size=(8, 8, 2)).astype(np.float32))
        assert np.array_equal(interpolate_flow(f0, f1, 0.0).data, f0.data)
        assert np.array_equal(interpolate_flow(f0, f1, 1.0).data, f1.data)

    def test_linear_blend(self):
        f0 = FlowField.constant(4, 4, 0.0, 0.0)
        f1 = FlowField.constant(4, 4, 4.0, 2.0)
        mid = interpolate_flow(f0, f1, 0.25)
        np.testing.assert_array_equal(mid.data[..., 0], 1.0)
        np.testing.assert_array_equal(mid.data[..., 1], 0.5)


class TestComputeFlow:
    def test_identical_images_near_zero(self):
        rng = np.random.default_rng(44)
        img = noise_texture(rng)
        flow = compute_flow(img, img)
        assert np.abs(flow.data).mean() <= 0.05

    def test_integer_translation_recovered(self):
        rng = np.random.default_rng(45)
        img = noise_texture(rng)
        shifted = shift_image(img, 2.0, 0.0)
        # dst = shifted, src = img: dst[p] = src[p + flow] -> flow ~ (2, 0)
        flow = compute_flow(img, shifted)
        inner = interior(flow.data)
        assert abs(inner[..., 0].mean() - 2.0) <= 0.25
        assert abs(inner[..., 1].mean()) <= 0.25

    def test_subpixel_translation_recovered(self):
        rng = np.random.default_rng(46)
        img = noise_texture(rng)
        shifted = shift_image(img, 0.5, 0.5)
        flow = compute_flow(img, shifted)
        inner = interior(flow.data)
        assert abs(inner[..., 0].mean() - 0.5) <= 0.25
        assert abs(inner[..., 1].mean() - 0.5) <= 0.25

    def test_horizontal_flip_equivariance(self):
        rng = np.random.default_rng(47)
        img = noise_texture(rng)
        shifted = shift_image(img, 1.5, 0.0)
        flow = compute_flow(img, shifted)
        flipped = compute_flow(
            HdrImage.from_array(img.data[:, ::-1].copy()),
            HdrImage.from_array(shifted.data[:, ::-1].copy()),
        )
        dx = interior(flow.data[..., 0]).mean()
        dx_flip = interior(flipped.data[..., 0]).mean()
        assert abs(dx + dx_flip) <= 0.25

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(48)
        with pytest.raises(ContractError):
            compute_flow(noise_texture(rng, 32), noise_texture(rng, 16))


class TestTakeLayout:
    def test_tracking_must_increase(self):
        with pytest.raises(ValidationError):
            TakeLayout(frame_count=10, tracking_frames=(0, 5, 5))

    def test_k21_layout_brackets_every_frame(self):
        layout = TakeLayout(frame_count=64, tracking_frames=(0, 21, 42, 63), block_size=21)
        tracks = layout.tracking_frames
        for i in range(64):
            assert tracks[0] <= i <= tracks[-1]


class TestAlignTake:
    def make_take(self, rng, frames=22, size=96, drift=(3 / 21, 0.0)):
        base = noise_texture(rng, size)
        layout = TakeLayout(frame_count=frames, tracking_frames=(0, frames - 1),
                            block_size=21)
        drifted, truth = generate_drifting_take([base] * frames, drift, layout)
        return drifted, truth, layout

    def test_static_take_unchanged(self):
        rng = np.random.default_rng(49)
        base = noise_texture(rng, 64)
        layout = TakeLayout(frame_count=6, tracking_frames=(0, 5), block_size=5)
        aligned = align_take([base] * 6, layout, reference=0)
        for frame in aligned:
            err = np.sqrt(np.mean((frame.data - base.data) ** 2))
            assert err <= 1e-3

    def test_drifting_take_rmse_reduction(self):
        """3 px cumulative drift over a 21-frame block: >= 70% RMSE reduction."""
        rng = np.random.default_rng(50)
        drifted, truth, layout = self.make_take(rng)
        aligned = align_take(drifted, layout, reference=0)
        before = after = 0.0
        for i in range(len(truth)):
            ref = interior(truth[i].data)
            before += np.sqrt(np.mean((interior(drifted[i].data) - ref) ** 2))
            after += np.sqrt(np.mean((interior(aligned[i].data) - ref) ** 2))
        assert after <= 0.3 * before

    def test_residual_displacement(self):
        rng = np.random.default_rng(51)
        drifted, truth, layout = self.make_take(rng)
        flows = take_alignment_flows(drifted, layout, reference=0)
        residuals = []
        for i, flow in enumerate(flows):
            # content at +i*d, so the ref->frame warp displacement is +i*d
            true_flow = np.array([i * 3 / 21, 0.0])
            inner = interior(flow.data)
            residuals.append(np.abs(inner - true_flow[None, None, :]).mean())
        assert np.mean(residuals) <= 0.5

    def test_insufficient_tracking(self):
        rng = np.random.default_rng(52)
        base = noise_texture(rng, 32)
        layout = TakeLayout(frame_count=3, tracking_frames=(1,), block_size=21)
        with pytest.raises(InsufficientTrackingError):
            align_take([base] * 3, layout, reference=1)

    def test_idempotent_on_aligned_take(self):
        rng = np.random.default_rng(53)
        base = noise_texture(rng, 64)
        layout = TakeLayout(frame_count=5, tracking_frames=(0, 4), block_size=4)
        once = align_take([base] * 5, layout, reference=0)
        twice = align_take(once, layout, reference=0)
        for a, b in zip(once, twice):
            assert np.sqrt(np.mean((a.data - b.data) ** 2)) <= 1e-3


class TestComposeFlow:
    def test_constant_flows_add(self):
        a = FlowField.constant(32, 32, 1.0, 0.5)
        b = FlowField.constant(32, 32, -0.25, 2.0)
        comp = compose_flow(a, b)
        inner = comp.data[4:-4, 4:-4]
        np.testing.assert_allclose(inner[..., 0], 0.75, atol=1e-6)
        np.testing.assert_allclose(inner[..., 1], 2.5, atol=1e-6)


class TestFlowIo:
    def test_round_trip(self):
        rng = np.random.default_rng(54)
        flow = FlowField(data=rng.normal(0, 3, (9, 5, 2)).astype(np.float32))
        out = decode_flow(encode_flow(flow))
        assert np.array_equal(out.data, flow.data)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_flow(b"PF\n1 1\n-1.0\n" + b"\x00" * 8)

    def test_truncated(self):
        rng = np.random.default_rng(55)
        blob = encode_flow(FlowField(data=rng.normal(size=(4, 4, 2)).astype(np.float32)))
        from olatkit.errors import TruncatedDataError

        with pytest.raises(TruncatedDataError):
            decode_flow(blob[:-8])
