"""OLAT take alignment: dense pyramidal flow between fully-lit tracking frames,
linear temporal interpolation, and backward warping.

Flow convention is destination -> source: ``compute_flow(src, dst)`` returns a
field such that ``dst[p] ~= src[p + flow(p)]``, i.e. ``warp(src, flow)``
reconstructs ``dst``. Externally supplied fields (2-channel "PF2" files) can
be injected anywhere a computed FlowField is accepted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import (
    ContractError,
    FormatError,
    InsufficientTrackingError,
    TruncatedDataError,
    ValidationError,
)
from .imagecore import HdrImage

_WINDOW = 7  # LK window side
_ITERATIONS = 3  # refinement iterations per pyramid level
_MIN_LEVEL_SIZE = 16  # stop coarsening below this many pixels per side


@dataclass(frozen=True)
class FlowField:
    """Per-pixel (dx, dy) displacement in pixels, destination -> source."""

    data: np.ndarray  # (H, W, 2) float32

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValidationError(f"flow must be (H, W, 2), got {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ValidationError("flow storage must be float32")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("flow values must be finite")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(data=np.zeros((height, width, 2), dtype=np.float32))

    @classmethod
    def constant(cls, height: int, width: int, dx: float, dy: float) -> "FlowField":
        d = np.empty((height, width, 2), dtype=np.float32)
        d[..., 0] = dx
        d[..., 1] = dy
        return cls(data=d)


@dataclass(frozen=True)
class TakeLayout:
    """Frame count, tracking-frame indices, and the OLAT block size K."""

    frame_count: int
    tracking_frames: tuple
    block_size: int = 21

    def __post_init__(self):
        t = self.tracking_frames
        if any(t[i] >= t[i + 1] for i in range(len(t) - 1)):
            raise ValidationError("tracking indices must be strictly increasing")
        if t and (t[0] < 0 or t[-1] >= self.frame_count):
            raise ValidationError("tracking indices outside the take")
        if self.block_size < 1:
            raise ValidationError("block size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TakeLayout":
        return cls(
            frame_count=int(d["frame_count"]),
            tracking_frames=tuple(int(i) for i in d["tracking_frames"]),
            block_size=int(d.get("block_size", 21)),
        )

    def to_dict(self) -> dict:
        return {
            "frame_count": self.frame_count,
            "tracking_frames": list(self.tracking_frames),
            "block_size": self.block_size,
        }


# ---------------------------------------------------------------------------
# Sampling primitives
# ---------------------------------------------------------------------------


def _bilinear_at(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sample with clamp-to-edge; img is (H, W) or (H, W, C) float."""
    h, w = img.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0).astype(np.float64)
    fy = (y - y0).astype(np.float64)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = img[y0, x0].astype(np.float64)
    v01 = img[y0, x1].astype(np.float64)
    v10 = img[y1, x0].astype(np.float64)
    v11 = img[y1, x1].astype(np.float64)
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def _sample_with_flow(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    h, w = flow.shape[:2]
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return _bilinear_at(img, gx + flow[..., 0].astype(np.float64), gy + flow[..., 1].astype(np.float64))


def warp(img: HdrImage, flow: FlowField) -> HdrImage:
    """Backward warp: out[p] = bilinear(img, p + flow(p)), clamp-to-edge."""
    if (flow.height, flow.width) != (img.height, img.width):
        raise ContractError(
            f"flow {flow.width}x{flow.height} does not match image {img.width}x{img.height}"
        )
    out = _sample_with_flow(img.data, flow.data)
    return HdrImage.from_array(out)


def interpolate_flow(f0: FlowField, f1: FlowField, t: float) -> FlowField:
    """Per-pixel (1-t) f0 + t f1; endpoints return exact copies."""
    if f0.data.shape != f1.data.shape:
        raise ContractError("flow fields must share dimensions")
    if t == 0.0:
        return FlowField(data=f0.data.copy())
    if t == 1.0:
        return FlowField(data=f1.data.copy())
    mix = (1.0 - t) * f0.data.astype(np.float64) + t * f1.data.astype(np.float64)
    return FlowField(data=mix.astype(np.float32))


def compose_flow(outer: FlowField, inner: FlowField) -> FlowField:
    """Chain displacements: result(p) = outer(p) + inner(p + outer(p)).

    ``outer`` maps the destination grid into ``inner``'s grid; the composite
    maps destination directly to ``inner``'s source.
    """
    if outer.data.shape != inner.data.shape:
        raise ContractError("flow fields must share dimensions")
    sampled = _sample_with_flow(inner.data, outer.data)
    return FlowField(data=(outer.data.astype(np.float64) + sampled).astype(np.float32))


# ---------------------------------------------------------------------------
# Pyramidal Lucas-Kanade dense flow
# ---------------------------------------------------------------------------


def _to_gray(img) -> np.ndarray:
    if isinstance(img, HdrImage):
        return img.luminance().astype(np.float64)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = 0.2126 * arr[..., 0] + 0.7152 * arr[..., 1] + 0.0722 * arr[..., 2]
    return arr


def _downsample2(img: np.ndarray) -> np.ndarray:
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    return img[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    ys = (np.arange(h, dtype=np.float64) + 0.5) * img.shape[0] / h - 0.5
    xs = (np.arange(w, dtype=np.float64) + 0.5) * img.shape[1] / w - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return _bilinear_at(img, gx, gy)


def _gradients(img: np.ndarray):
    gy, gx = np.gradient(img)
    return gx, gy


def _lk_refine(src: np.ndarray, dst: np.ndarray, flow: np.ndarray, window: int) -> np.ndarray:
    """One Lucas-Kanade update of ``flow`` (dst-grid displacements into src)."""
    warped = _sample_with_flow(src, flow)
    gxw, gyw = _gradients(warped)
    gxd, gyd = _gradients(dst)
    ix = 0.5 * (gxw + gxd)
    iy = 0.5 * (gyw + gyd)
    it = dst - warped

    size = (window, window)
    sxx = uniform_filter(ix * ix, size, mode="nearest")
    syy = uniform_filter(iy * iy, size, mode="nearest")
    sxy = uniform_filter(ix * iy, size, mode="nearest")
    bx = uniform_filter(ix * it, size, mode="nearest")
    by = uniform_filter(iy * it, size, mode="nearest")

    reg = 1e-4 * (sxx + syy) + 1e-9
    det = (sxx + reg) * (syy + reg) - sxy * sxy
    du = ((syy + reg) * bx - sxy * by) / det
    dv = ((sxx + reg) * by - sxy * bx) / det
    step = np.stack([np.clip(du, -1.0, 1.0), np.clip(dv, -1.0, 1.0)], axis=-1)
    return flow + step


def compute_flow(src, dst, levels: int = 4) -> FlowField:
    """Dense coarse-to-fine flow such that dst[p] ~= src[p + flow(p)].

    Inputs may be HdrImages (luminance-converted) or 2D arrays. ``levels``
    is clamped so the coarsest level keeps at least 16 px per side.
    """
    if levels < 1:
        raise ValidationError("pyramid must have at least one level")
    a = _to_gray(src)
    b = _to_gray(dst)
    if a.shape != b.shape:
        raise ContractError(f"image dimensions differ: {a.shape} vs {b.shape}")

    pyr_a, pyr_b = [a], [b]
    for _ in range(levels - 1):
        if min(pyr_a[-1].shape) < 2 * _MIN_LEVEL_SIZE:
            break
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))

    flow = np.zeros(pyr_a[-1].shape + (2,), dtype=np.float64)
    for level in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if flow.shape[:2] != la.shape:
            up = np.stack(
                [
                    _resize_bilinear(flow[..., 0], *la.shape) * 2.0,
                    _resize_bilinear(flow[..., 1], *la.shape) * 2.0,
                ],
                axis=-1,
            )
            flow = up
        for _ in range(_ITERATIONS):
            flow = _lk_refine(la, lb, flow, _WINDOW)
    return FlowField(data=flow.astype(np.float32))


# ---------------------------------------------------------------------------
# Take alignment
# ---------------------------------------------------------------------------


def take_alignment_flows(frames: list, layout: TakeLayout, reference: int, levels: int = 4) -> list:
    """Per-frame flows mapping the reference grid into each frame.

    Flows between consecutive tracking frames are composed toward the
    reference, then linearly interpolated at every OLAT frame's temporal
    position (extrapolated before the first and after the last bracket).
    """
    if len(frames) != layout.frame_count:
        raise ValidationError(
            f"got {len(frames)} frames for a layout of {layout.frame_count}"
        )
    tracks = list(layout.tracking_frames)
    if len(tracks) < 2:
        raise InsufficientTrackingError("take alignment needs at least 2 tracking frames")
    if reference not in tracks:
        raise ValidationError(f"reference {reference} is not a tracking frame")
    ref_pos = tracks.index(reference)

    h, w = frames[0].height, frames[0].width
    to_ref = {reference: FlowField.zeros(h, w)}
    for k in range(ref_pos, len(tracks) - 1):
        pair = compute_flow(frames[tracks[k + 1]], frames[tracks[k]], levels)
        to_ref[tracks[k + 1]] = compose_flow(to_ref[tracks[k]], pair)
    for k in range(ref_pos, 0, -1):
        pair = compute_flow(frames[tracks[k - 1]], frames[tracks[k]], levels)
        to_ref[tracks[k - 1]] = compose_flow(to_ref[tracks[k]], pair)

    flows = []
    for i in range(layout.frame_count):
        hi = np.searchsorted(tracks, i)
        if hi == 0:
            j = 0  # before the first tracking frame: extrapolate the first bracket
        elif hi == len(tracks):
            j = len(tracks) - 2  # after the last: extrapolate the last bracket
        elif tracks[hi] == i:
            flows.append(FlowField(data=to_ref[i].data.copy()))
            continue
        else:
            j = hi - 1
        t0, t1 = tracks[j], tracks[j + 1]
        tau = (i - t0) / (t1 - t0)
        f0, f1 = to_ref[t0].data.astype(np.float64), to_ref[t1].data.astype(np.float64)
        flows.append(FlowField(data=((1.0 - tau) * f0 + tau * f1).astype(np.float32)))
    return flows


def align_take(frames: list, layout: TakeLayout, reference: int, levels: int = 4) -> list:
    """Warp every frame of a take onto the reference tracking frame's geometry."""
    flows = take_alignment_flows(frames, layout, reference, levels)
    return [warp(frame, flow) for frame, flow in zip(frames, flows)]


# ---------------------------------------------------------------------------
# Flow interchange: 2-channel "PF2" rasters (top-left origin, row-major)
# ---------------------------------------------------------------------------


def encode_flow(flow: FlowField) -> bytes:
    header = f"PF2\n{flow.width} {flow.height}\n-1.0\n".encode()
    return header + flow.data.astype("<f4").tobytes()


def decode_flow(data: bytes) -> FlowField:
    lines = data.split(b"\n", 3)
    if len(lines) < 4 or lines[0] != b"PF2":
        raise FormatError("not a PF2 flow stream")
    try:
        w, h = (int(v) for v in lines[1].split())
        scale = float(lines[2])
    except ValueError as exc:
        raise FormatError(f"malformed PF2 header: {exc}") from exc
    if scale == 0:
        raise FormatError("PF2 scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 2 * 4
    raw = lines[3]
    if len(raw) < need:
        raise TruncatedDataError("PF2 payload truncated", len(data) - (need - len(raw)))
    arr = np.frombuffer(raw[:need], dtype=dtype).reshape(h, w, 2).astype(np.float32)
    return FlowField(data=arr)


def save_flow(path, flow: FlowField) -> None:
    with open(path, "wb") as f:
        f.write(encode_flow(flow))


def load_flow(path) -> FlowField:
    with open(path, "rb") as f:
        return decode_flow(f.read())
