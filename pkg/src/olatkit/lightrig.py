"""Light-rig geometry, OLAT stack manifests, and env-map -> per-light weights.

An equirectangular environment map is discretized onto a rig by assigning
every texel to the rig light with the largest dot product (ties break to the
lowest light index) and accumulating ``radiance * solid_angle`` per light in
row-major texel order. The per-channel sum of the weights therefore equals
the map's total integrated radiance with the exact same float operations.
"""

from __future__ import annotations

import json
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ValidationError
from .imagecore import HdrImage, load_hdr

TWO_PI = 2.0 * math.pi
_ROTATION_SNAP = 1e-9

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class LightRig:
    """L unit light directions (world frame) with string labels."""

    directions: np.ndarray  # (L, 3) float64, unit rows
    labels: tuple

    def __post_init__(self):
        d = self.directions
        if d.ndim != 2 or d.shape[1] != 3 or d.shape[0] < 1:
            raise ValidationError(f"directions must be (L>=1, 3), got {d.shape}")
        if len(self.labels) != d.shape[0]:
            raise ValidationError("label count does not match direction count")
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ValidationError(
                f"direction {self.labels[worst]!r} has norm {norms[worst]:.12f}, expected 1"
            )
        if len(np.unique(d, axis=0)) != d.shape[0]:
            raise ValidationError("rig contains duplicate light directions")

    @property
    def count(self) -> int:
        return self.directions.shape[0]

    def same_geometry(self, other: "LightRig") -> bool:
        return self.directions.shape == other.directions.shape and np.array_equal(
            self.directions, other.directions
        )


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels, world->camera extrinsics.

    Camera frame: +x right, +y down in the image, +z forward (look direction).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world->camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        r = self.rotation
        if r.shape != (3, 3):
            raise ValidationError("rotation must be 3x3")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValidationError("rotation must be orthonormal within 1e-9")
        if self.translation.shape != (3,):
            raise ValidationError("translation must be a 3-vector")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be positive")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_deg=45.0, width=64, height=64):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            raise ValidationError("up vector is parallel to the view direction")
        right /= nr
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        f = 0.5 * width / math.tan(math.radians(fov_deg) * 0.5)
        return cls(
            fx=f,
            fy=f,
            cx=width / 2.0,
            cy=height / 2.0,
            rotation=rot,
            translation=-rot @ eye,
            width=width,
            height=height,
        )

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def ray_directions(self) -> np.ndarray:
        """Unit world-space ray directions through all pixel centers, (H, W, 3)."""
        xs = (np.arange(self.width, dtype=np.float64) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height, dtype=np.float64) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        d_world = d_cam @ self.rotation  # R^T applied row-wise
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class EnvMap:
    """Equirectangular radiance map. +Y is up; phi = 0 points along +X."""

    image: HdrImage

    def __post_init__(self):
        if self.image.width < 2 or self.image.height < 1:
            raise ValidationError("environment map must be at least 2x1")


@dataclass(frozen=True)
class WeightVector:
    """Per-light RGB weights in radiance * steradian, bound to a rig."""

    weights: np.ndarray  # (L, 3) float64
    rig: LightRig

    def __post_init__(self):
        w = self.weights
        if w.shape != (self.rig.count, 3):
            raise ValidationError(f"weights shape {w.shape} does not match rig L={self.rig.count}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("weights must be finite and non-negative")

    def channel_totals(self) -> np.ndarray:
        """Sum over lights per channel, in light-index order."""
        totals = np.zeros(3, dtype=np.float64)
        for l in range(self.weights.shape[0]):
            totals += self.weights[l]
        return totals


class _ImageRef:
    """Lazily decodable OLAT frame: either an in-memory image or an .hdr path."""

    def __init__(self, image: HdrImage | None = None, path: Path | None = None):
        if (image is None) == (path is None):
            raise ContractError("exactly one of image/path must be given")
        self._image = image
        self.path = path

    def load(self) -> HdrImage:
        if self._image is not None:
            return self._image
        return load_hdr(self.path)

    def open_rows(self):
        """Row source for streaming: HdrRowReader for paths, array view otherwise."""
        if self._image is not None:
            return _ArrayRowReader(self._image.data)
        from .imagecore import HdrRowReader

        return HdrRowReader(open(self.path, "rb"), close_source=True)


class _ArrayRowReader:
    def __init__(self, data: np.ndarray):
        self._data = data
        self._row = 0
        self.height, self.width = data.shape[:2]

    @property
    def rows_remaining(self) -> int:
        return self.height - self._row

    def read_rows(self, n: int) -> np.ndarray:
        n = min(n, self.rows_remaining)
        out = self._data[self._row : self._row + n]
        self._row += n
        return out

    def close(self) -> None:
        pass


@dataclass
class OlatStack:
    """A light rig bound to L lazily-loadable OLAT frames plus camera metadata."""

    rig: LightRig
    images: list  # L _ImageRef entries
    camera: CameraModel
    subject: str = ""
    session: str = ""
    take: dict | None = None
    cache_bytes: int | None = None
    load_count: int = 0
    _cache: OrderedDict = field(default_factory=OrderedDict, repr=False)
    _cache_size: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if len(self.images) != self.rig.count:
            raise ValidationError(
                f"stack has {len(self.images)} images for {self.rig.count} lights"
            )

    @property
    def count(self) -> int:
        return self.rig.count

    @property
    def resolution(self) -> tuple:
        return (self.camera.width, self.camera.height)

    def image(self, index: int) -> HdrImage:
        """Decode (or fetch from cache) the OLAT frame for light ``index``."""
        with self._lock:
            if index in self._cache:
                self._cache.move_to_end(index)
                return self._cache[index]
        img = self._load(index)
        with self._lock:
            if index not in self._cache:
                self._cache[index] = img
                self._cache_size += img.data.nbytes
                if self.cache_bytes is not None:
                    while self._cache_size > self.cache_bytes and len(self._cache) > 1:
                        _, old = self._cache.popitem(last=False)
                        self._cache_size -= old.data.nbytes
            return self._cache[index]

    def _load(self, index: int) -> HdrImage:
        try:
            img = self.images[index].load()
        except OSError as exc:
            raise OSError(
                f"cannot read OLAT frame for light {self.rig.labels[index]!r}: {exc}"
            ) from exc
        if (img.width, img.height) != self.resolution:
            raise ValidationError(
                f"OLAT frame {self.rig.labels[index]!r} is {img.width}x{img.height}, "
                f"stack is {self.camera.width}x{self.camera.height}"
            )
        self.load_count += 1
        return img

    def open_rows(self, index: int):
        try:
            return self.images[index].open_rows()
        except OSError as exc:
            raise OSError(
                f"cannot read OLAT frame for light {self.rig.labels[index]!r}: {exc}"
            ) from exc


# ---------------------------------------------------------------------------
# Equirectangular texel geometry
# ---------------------------------------------------------------------------


def texel_solid_angle(row: int, rows: int, cols: int) -> float:
    """Solid angle of any texel in the given row: (2pi/W)(cos(pi r/H) - cos(pi (r+1)/H))."""
    if rows < 1 or cols < 1:
        raise ValidationError("grid dimensions must be positive")
    if not (0 <= row < rows):
        raise ValidationError(f"row {row} outside [0, {rows})")
    return (TWO_PI / cols) * (math.cos(math.pi * row / rows) - math.cos(math.pi * (row + 1) / rows))


def texel_direction(row: int, col: int, rows: int, cols: int) -> np.ndarray:
    """Unit direction through the texel center. theta from +Y, phi = 0 at +X."""
    if not (0 <= row < rows and 0 <= col < cols):
        raise ValidationError("texel index out of range")
    theta = math.pi * (row + 0.5) / rows
    phi = TWO_PI * (col + 0.5) / cols
    st = math.sin(theta)
    return np.array([st * math.cos(phi), math.cos(theta), st * math.sin(phi)])


def texel_direction_grid(rows: int, cols: int) -> np.ndarray:
    """All texel-center directions, (rows, cols, 3) float64."""
    theta = np.pi * (np.arange(rows, dtype=np.float64) + 0.5) / rows
    phi = TWO_PI * (np.arange(cols, dtype=np.float64) + 0.5) / cols
    st, ct = np.sin(theta), np.cos(theta)
    out = np.empty((rows, cols, 3), dtype=np.float64)
    out[..., 0] = st[:, None] * np.cos(phi)[None, :]
    out[..., 1] = ct[:, None]
    out[..., 2] = st[:, None] * np.sin(phi)[None, :]
    return out


def solid_angle_column(rows: int, cols: int) -> np.ndarray:
    """Per-row texel solid angles, shape (rows,)."""
    r = np.arange(rows, dtype=np.float64)
    return (TWO_PI / cols) * (np.cos(np.pi * r / rows) - np.cos(np.pi * (r + 1) / rows))


def normalize_rotation(angle: float) -> float:
    """Azimuth normalized to [0, 2pi), snapping within 1e-9 of a full turn to 0."""
    if not math.isfinite(angle):
        raise ValidationError("rotation must be finite")
    a = math.fmod(angle, TWO_PI)
    if a < 0:
        a += TWO_PI
    if a <= _ROTATION_SNAP or TWO_PI - a <= _ROTATION_SNAP:
        return 0.0
    return a


def azimuth_matrix(angle: float) -> np.ndarray:
    """Rotation about +Y by ``angle`` radians (counterclockwise seen from +Y)."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def env_to_weights(
    env: EnvMap,
    rig: LightRig,
    rotation: float = 0.0,
    rotation_matrix: np.ndarray | None = None,
) -> WeightVector:
    """Bin every env texel to its nearest rig light, accumulating radiance * solid angle.

    ``rotation`` rotates texel directions about +Y; ``rotation_matrix`` accepts a
    full SO(3) rotation instead. Accumulation is float64 in row-major texel
    order, so channel sums conserve the map's integrated radiance exactly.
    """
    h, w = env.image.height, env.image.width
    dirs = texel_direction_grid(h, w)
    if rotation_matrix is not None:
        rm = np.asarray(rotation_matrix, dtype=np.float64)
        if rm.shape != (3, 3) or not np.allclose(rm @ rm.T, np.eye(3), atol=1e-9):
            raise ValidationError("rotation_matrix must be a 3x3 rotation")
        dirs = dirs @ rm.T
    else:
        angle = normalize_rotation(rotation)
        if angle != 0.0:
            dirs = dirs @ azimuth_matrix(angle).T

    dots = dirs.reshape(-1, 3) @ rig.directions.T  # (H*W, L)
    nearest = np.argmax(dots, axis=1)  # first max -> lowest light index on ties

    d_omega = np.repeat(solid_angle_column(h, w), w)
    radiance = env.image.data.reshape(-1, 3).astype(np.float64)
    weights = np.empty((rig.count, 3), dtype=np.float64)
    for c in range(3):
        weights[:, c] = np.bincount(nearest, weights=radiance[:, c] * d_omega, minlength=rig.count)
    return WeightVector(weights=weights, rig=rig)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def load_manifest(path) -> OlatStack:
    """Load a stack manifest, validating directions and image-file existence."""
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version {doc.get('version')!r}")
    lights = doc["lights"]
    if not lights:
        raise ValidationError("manifest contains no lights")
    directions = np.array([entry["direction"] for entry in lights], dtype=np.float64)
    labels = tuple(str(entry["label"]) for entry in lights)
    rig = LightRig(directions=directions, labels=labels)
    refs = []
    for entry in lights:
        img_path = path.parent / entry["image"]
        if not img_path.is_file():
            raise OSError(f"OLAT image for light {entry['label']!r} not found: {img_path}")
        refs.append(_ImageRef(path=img_path))
    camera = CameraModel.from_dict(doc["camera"])
    take = None
    if "tracking_frames" in doc or "block_size" in doc:
        take = {
            "tracking_frames": list(doc.get("tracking_frames", [])),
            "block_size": int(doc.get("block_size", 0)),
        }
    return OlatStack(
        rig=rig,
        images=refs,
        camera=camera,
        subject=str(doc.get("subject", "")),
        session=str(doc.get("session", "")),
        take=take,
    )


def save_manifest(path, stack: OlatStack, image_names: list) -> None:
    """Write a manifest referencing ``image_names`` (relative .hdr paths)."""
    if len(image_names) != stack.count:
        raise ContractError("one image name per light required")
    doc = {
        "version": MANIFEST_VERSION,
        "subject": stack.subject,
        "session": stack.session,
        "lights": [
            {
                "label": stack.rig.labels[i],
                "direction": [float(v) for v in stack.rig.directions[i]],
                "image": str(image_names[i]),
            }
            for i in range(stack.count)
        ],
        "camera": stack.camera.to_dict(),
    }
    if stack.take:
        doc["tracking_frames"] = list(stack.take.get("tracking_frames", []))
        doc["block_size"] = int(stack.take.get("block_size", 0))
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def stack_from_images(rig: LightRig, images: list, camera: CameraModel, **kw) -> OlatStack:
    """Build an in-memory stack from decoded HdrImages (used by the oracle)."""
    refs = [_ImageRef(image=img) for img in images]
    return OlatStack(rig=rig, images=refs, camera=camera, **kw)
