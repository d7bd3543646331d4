"""Weighted OLAT combination: C = sum over lights of w * O(light).

Accumulation is float64 in ascending light-index order for every pixel, so
output bytes are identical for any thread count and any tiling. Lights whose
weights are exactly zero on all channels are skipped without ever touching
their image files; an optional cull threshold extends that skip for
interactive previews (at the cost of dropped energy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import set_thread_count, weighted_accumulate
from .errors import ContractError, ValidationError
from .imagecore import HdrImage
from .lightrig import OlatStack, WeightVector

__all__ = [
    "TilePlan",
    "combine",
    "combine_stream",
    "combine_many",
    "truncate_weights",
    "set_thread_count",
]


@dataclass(frozen=True)
class TilePlan:
    """Tile geometry and working precision for streaming combination.

    ``precision`` selects the accumulator dtype. float64 (default) makes the
    concatenated tiles bit-identical to :func:`combine`; float32 is a faster
    preview mode without that guarantee.
    """

    tile_width: int = 256
    tile_height: int = 256
    precision: str = "float64"

    def __post_init__(self):
        if self.tile_width < 1 or self.tile_height < 1:
            raise ValidationError("tile dimensions must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ValidationError(f"unknown precision {self.precision!r}")


def _check_rig(stack: OlatStack, weights: WeightVector) -> None:
    if weights.rig is not stack.rig and not weights.rig.same_geometry(stack.rig):
        raise ContractError("weight vector is bound to a different rig than the stack")


def _selected_lights(weights: np.ndarray, cull_threshold: float) -> np.ndarray:
    if cull_threshold > 0.0:
        keep = weights.max(axis=1) > cull_threshold
    else:
        keep = np.any(weights != 0.0, axis=1)
    return np.nonzero(keep)[0]


def combine(stack: OlatStack, weights: WeightVector, cull_threshold: float = 0.0) -> HdrImage:
    """Relight the stack under the given per-light weights."""
    _check_rig(stack, weights)
    w, h = stack.resolution
    acc = np.zeros((h, w, 3), dtype=np.float64)
    for light in _selected_lights(weights.weights, cull_threshold):
        frame = stack.image(int(light))
        weighted_accumulate(acc, frame.data, weights.weights[light])
    return HdrImage.from_array(acc)


def combine_stream(
    stack: OlatStack,
    weights: WeightVector,
    tile_plan: TilePlan,
    sink,
    cull_threshold: float = 0.0,
) -> None:
    """Stream the combined image to ``sink(x0, y0, tile)`` in row-major order.

    Every selected OLAT file is decoded scanline-by-scanline in lockstep, so
    peak pixel memory is one row band per light plus the band accumulator,
    independent of image height.
    """
    _check_rig(stack, weights)
    width, height = stack.resolution
    selected = _selected_lights(weights.weights, cull_threshold)
    acc_dtype = np.float64 if tile_plan.precision == "float64" else np.float32
    readers = []
    try:
        for light in selected:
            reader = stack.open_rows(int(light))
            if (reader.width, reader.height) != (width, height):
                raise ValidationError(
                    f"OLAT frame {stack.rig.labels[light]!r} is "
                    f"{reader.width}x{reader.height}, stack is {width}x{height}"
                )
            readers.append(reader)
        for y0 in range(0, height, tile_plan.tile_height):
            band_h = min(tile_plan.tile_height, height - y0)
            acc = np.zeros((band_h, width, 3), dtype=acc_dtype)
            for light, reader in zip(selected, readers):
                rows = reader.read_rows(band_h)
                weighted_accumulate(acc, rows, weights.weights[light].astype(acc_dtype))
            for x0 in range(0, width, tile_plan.tile_width):
                tile = acc[:, x0 : x0 + tile_plan.tile_width]
                sink(x0, y0, HdrImage.from_array(tile))
    finally:
        for reader in readers:
            reader.close()


def combine_many(stack: OlatStack, weight_list: list) -> list:
    """Combine several weight vectors, decoding each OLAT frame at most once.

    Element i is bit-identical to ``combine(stack, weight_list[i])``.
    """
    for weights in weight_list:
        _check_rig(stack, weights)
    if not weight_list:
        return []
    w, h = stack.resolution
    accs = [np.zeros((h, w, 3), dtype=np.float64) for _ in weight_list]
    stacked = np.stack([wv.weights for wv in weight_list])  # (K, L, 3)
    used = np.nonzero(np.any(stacked != 0.0, axis=(0, 2)))[0]
    for light in used:
        frame = stack.image(int(light))
        for i, weights in enumerate(weight_list):
            if np.any(weights.weights[light] != 0.0):
                weighted_accumulate(accs[i], frame.data, weights.weights[light])
    return [HdrImage.from_array(acc) for acc in accs]


def truncate_weights(
    weights: WeightVector, max_lights: int, renormalize: bool = False
) -> WeightVector:
    """Keep the ``max_lights`` strongest lights (by summed RGB weight).

    With ``renormalize`` the kept weights are rescaled per channel so channel
    totals are preserved; off by default, matching the exact-combination
    contract.
    """
    if max_lights < 1:
        raise ValidationError("max_lights must be >= 1")
    w = weights.weights
    if max_lights >= w.shape[0]:
        return weights
    energy = w.sum(axis=1)
    keep = np.sort(np.argsort(-energy, kind="stable")[:max_lights])
    out = np.zeros_like(w)
    out[keep] = w[keep]
    if renormalize:
        kept = out.sum(axis=0)
        total = w.sum(axis=0)
        scale = np.where(kept > 0, total / np.where(kept > 0, kept, 1.0), 1.0)
        out *= scale[None, :]
    return WeightVector(weights=out, rig=weights.rig)
