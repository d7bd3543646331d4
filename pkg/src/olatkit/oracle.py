"""Analytic ground truth: ray-traced sphere OLATs, direct env integration,
Fibonacci rigs, and drifting-take fixtures.

The environment renderer accumulates per-texel contributions with exactly the
same float operations and ordering as ``relight.combine`` over a texel-aligned
rig, which makes the discretization identity hold bitwise (per-direction
shading is evaluated once in float32, mirroring OLAT frame storage).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .align import FlowField, warp
from .errors import ValidationError
from .imagecore import HdrImage
from .lightrig import (
    CameraModel,
    EnvMap,
    LightRig,
    OlatStack,
    solid_angle_column,
    stack_from_images,
    texel_direction_grid,
)


@dataclass(frozen=True)
class SphereScene:
    """Blinn-Phong sphere on a black background under directional lights."""

    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.7
    albedo: tuple = (1.8, 1.35, 0.9)
    specular: float = 0.25
    shininess: float = 24.0

    def __post_init__(self):
        if not (self.radius > 0):
            raise ValidationError("radius must be positive")
        if any(a < 0 for a in self.albedo) or self.specular < 0:
            raise ValidationError("albedo and specular coefficient must be non-negative")

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "radius": self.radius,
            "albedo": list(self.albedo),
            "specular": self.specular,
            "shininess": self.shininess,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SphereScene":
        return cls(
            center=tuple(float(v) for v in d.get("center", (0, 0, 0))),
            radius=float(d.get("radius", 0.7)),
            albedo=tuple(float(v) for v in d.get("albedo", (1.8, 1.35, 0.9))),
            specular=float(d.get("specular", 0.25)),
            shininess=float(d.get("shininess", 24.0)),
        )


def _sphere_hit(scene: SphereScene, camera: CameraModel):
    """Per-pixel intersection: returns (flat hit indices, normals, to-eye dirs)."""
    dirs = camera.ray_directions().reshape(-1, 3)
    origin = camera.center()
    oc = origin - np.asarray(scene.center, dtype=np.float64)
    b = dirs @ oc
    disc = b * b - (oc @ oc - scene.radius * scene.radius)
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    hit = (disc >= 0.0) & (t > 0.0)
    idx = np.nonzero(hit)[0]
    pts = origin[None, :] + t[idx, None] * dirs[idx]
    normals = (pts - np.asarray(scene.center)) / scene.radius
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return idx, normals, -dirs[idx]


def _shade(scene: SphereScene, normals, to_eye, omega) -> np.ndarray:
    """Blinn-Phong radiance per hit point for a unit-intensity directional light.

    Both diffuse and specular terms vanish on the self-shadowed hemisphere
    (n . omega <= 0). Returns float64 (P, 3).
    """
    ndl = normals @ omega
    lit = ndl > 0.0
    half = omega + to_eye
    hn = np.linalg.norm(half, axis=1)
    safe = hn > 1e-12
    ndh = np.zeros_like(ndl)
    ndh[safe] = (half[safe] / hn[safe, None] * normals[safe]).sum(axis=1)
    ndh = np.maximum(ndh, 0.0)
    diffuse = np.where(lit, ndl, 0.0)
    spec = np.where(lit, scene.specular * np.power(ndh, scene.shininess), 0.0)
    albedo = np.asarray(scene.albedo, dtype=np.float64)
    return diffuse[:, None] * (albedo[None, :] / math.pi) + spec[:, None]


def render_olat_sphere(scene: SphereScene, omega, intensity, camera: CameraModel) -> HdrImage:
    """Ray-traced OLAT frame for a directional light of the given RGB intensity."""
    omega = np.asarray(omega, dtype=np.float64)
    if abs(np.linalg.norm(omega) - 1.0) > 1e-9:
        raise ValidationError("light direction must be unit length")
    idx, normals, to_eye = _sphere_hit(scene, camera)
    out = np.zeros((camera.height * camera.width, 3), dtype=np.float64)
    out[idx] = np.asarray(intensity, dtype=np.float64)[None, :] * _shade(
        scene, normals, to_eye, omega
    )
    return HdrImage.from_array(out.reshape(camera.height, camera.width, 3))


def render_env_sphere(scene: SphereScene, env: EnvMap, camera: CameraModel) -> HdrImage:
    """Direct per-texel environment integration with the combine op ordering.

    Per shaded point: sum over texels of BRDF * radiance * solid angle, texels
    visited in row-major order, accumulation in float64, shading quantized to
    float32 per direction to mirror OLAT frame storage.
    """
    h, w = env.image.height, env.image.width
    dirs = texel_direction_grid(h, w).reshape(-1, 3)
    d_omega = np.repeat(solid_angle_column(h, w), w)
    radiance = env.image.data.reshape(-1, 3).astype(np.float64)

    idx, normals, to_eye = _sphere_hit(scene, camera)
    acc = np.zeros((camera.height * camera.width, 3), dtype=np.float64)
    hit_acc = acc[idx]  # contiguous working copy for the texel loop
    for t in range(dirs.shape[0]):
        shade32 = _shade(scene, normals, to_eye, dirs[t]).astype(np.float32)
        weight = radiance[t] * d_omega[t]  # (3,) float64
        hit_acc += weight[None, :] * shade32.astype(np.float64)
    acc[idx] = hit_acc
    return HdrImage.from_array(acc.reshape(camera.height, camera.width, 3))


def generate_rig(count: int) -> LightRig:
    """Deterministic Fibonacci-sphere rig with +Y as the polar axis."""
    if count < 1:
        raise ValidationError("rig must contain at least one light")
    if count == 1:
        dirs = np.array([[0.0, 1.0, 0.0]])
    else:
        i = np.arange(count, dtype=np.float64)
        y = 1.0 - 2.0 * (i + 0.5) / count
        r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
        golden = math.pi * (3.0 - math.sqrt(5.0))
        phi = golden * i
        dirs = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = tuple(f"L{i:03d}" for i in range(count))
    return LightRig(directions=dirs, labels=labels)


def rig_from_env_grid(rows: int, cols: int) -> LightRig:
    """One light per env texel, in row-major texel order (keystone identity rig).

    Directions are the raw texel-center vectors so that OLAT shading and the
    env integrator see bit-identical light directions.
    """
    dirs = texel_direction_grid(rows, cols).reshape(-1, 3)
    labels = tuple(f"T{r:03d}_{c:03d}" for r in range(rows) for c in range(cols))
    return LightRig(directions=dirs, labels=labels)


def render_olat_stack(
    scene: SphereScene, rig: LightRig, camera: CameraModel, intensity=(1.0, 1.0, 1.0)
) -> OlatStack:
    """In-memory OLAT stack: one ray-traced frame per rig light."""
    frames = [
        render_olat_sphere(scene, rig.directions[i], intensity, camera) for i in range(rig.count)
    ]
    return stack_from_images(rig, frames, camera, subject="oracle-sphere")


def generate_smooth_env(rows: int, cols: int, seed: int = 0, lobes: int = 3) -> EnvMap:
    """Smooth colored environment: a few broad cosine lobes plus an ambient floor."""
    rng = np.random.default_rng(seed)
    dirs = texel_direction_grid(rows, cols)
    radiance = np.full((rows, cols, 3), 0.1, dtype=np.float64)
    for _ in range(lobes):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        color = rng.uniform(0.2, 1.0, size=3)
        power = rng.uniform(1.0, 4.0)
        lobe = np.maximum(0.0, dirs @ axis) ** power
        radiance += lobe[..., None] * color[None, None, :]
    return EnvMap(image=HdrImage.from_array(radiance))


def generate_sun_sky_env(
    rows: int,
    cols: int,
    sun_dir=(0.5, 0.6, -0.62),
    sun_power: float = 8.0,
    sun_gain: float = 6.0,
    ambient: float = 0.05,
) -> EnvMap:
    """Key-light environment: one dominant warm lobe over a dim ambient floor.

    The canonical relighting setup; most of the weight mass lands on a handful
    of lights instead of being spread across the whole rig.
    """
    axis = np.asarray(sun_dir, dtype=np.float64)
    axis /= np.linalg.norm(axis)
    dirs = texel_direction_grid(rows, cols)
    radiance = np.full((rows, cols, 3), ambient, dtype=np.float64)
    lobe = np.maximum(0.0, dirs @ axis) ** sun_power
    tint = np.array([1.0, 0.9, 0.75]) * sun_gain
    radiance += lobe[..., None] * tint[None, None, :]
    return EnvMap(image=HdrImage.from_array(radiance))


def generate_drifting_take(base_frames: list, drift, layout) -> tuple:
    """Misaligned take with cumulative subpixel drift plus its ground truth.

    Frame i shows the subject displaced by i * drift pixels (bilinear resample,
    clamp-to-edge). Ground truth is the undrifted input. |drift| per block is
    capped at 5 px to keep the fixture inside the flow estimator's envelope.
    """
    dx, dy = float(drift[0]), float(drift[1])
    per_block = math.hypot(dx, dy) * layout.block_size
    if per_block > 5.0 + 1e-9:
        raise ValidationError(f"drift of {per_block:.2f} px per block exceeds the 5 px cap")
    if len(base_frames) != layout.frame_count:
        raise ValidationError("frame count does not match layout")
    drifted = []
    for i, frame in enumerate(base_frames):
        if i == 0 or (dx == 0.0 and dy == 0.0):
            drifted.append(frame)
            continue
        flow = np.empty((frame.height, frame.width, 2), dtype=np.float32)
        flow[..., 0] = -i * dx
        flow[..., 1] = -i * dy
        drifted.append(warp(frame, FlowField(data=flow)))
    return drifted, list(base_frames)
