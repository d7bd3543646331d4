"""Trainable volumetric reflectance field: triplane features decoded by a
light- and view-conditioned single-hidden-layer MLP and volume rendered into
OLAT images, with hand-written reverse-mode gradients.

Representation
    Three feature planes (XY, XZ, YZ) over the cube [-1, 1]^3 are sampled
    bilinearly and summed. The decoder input is the plane feature
    concatenated with 4-frequency sinusoidal encodings of the light and view
    directions; one ReLU hidden layer feeds a softplus density head and a
    sigmoid RGB head. Rays are integrated with S equal-width bins:
    alpha_i = 1 - exp(-sigma_i * delta), T_i = prod_{j<i} (1 - alpha_j),
    rgb = sum_i T_i alpha_i c_i over a black background.

Everything is deterministic under a fixed seed for any thread count: the
only parallel reductions are BLAS matmuls (output-partitioned) and the
plane scatter is sequential.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from ._kernels import mlp_backward, mlp_forward, scatter_bilinear, triplane_gather
from .errors import FormatError, TrainingDivergedError, ValidationError
from .imagecore import HdrImage
from .lightrig import CameraModel
from .quality import MrfConfig, idmrf_loss_and_grad

_DIR_FREQS = (1.0, 2.0, 4.0, 8.0)
DIR_ENC_DIM = 3 + 3 * 2 * len(_DIR_FREQS)  # 27
_CHECKPOINT_MAGIC = b"TPFD"
_CHECKPOINT_VERSION = 1


def encode_direction(d: np.ndarray) -> np.ndarray:
    """[d, sin(f d), cos(f d) for f in 1,2,4,8] along the last axis."""
    parts = [d]
    for f in _DIR_FREQS:
        parts.append(np.sin(f * d))
        parts.append(np.cos(f * d))
    return np.concatenate(parts, axis=-1)


@dataclass
class DecoderParams:
    """Single-hidden-layer MLP: feature+light+view -> (density, rgb)."""

    w_hidden: np.ndarray  # (C + 54, H)
    b_hidden: np.ndarray  # (H,)
    w_density: np.ndarray  # (H,)
    b_density: np.ndarray  # ()
    w_color: np.ndarray  # (H, 3)
    b_color: np.ndarray  # (3,)

    def __post_init__(self):
        h = self.b_hidden.shape[0]
        if self.w_hidden.shape[1] != h or self.w_density.shape != (h,) or self.w_color.shape != (
            h,
            3,
        ):
            raise ValidationError("decoder parameter shapes are inconsistent")
        for arr in (self.w_hidden, self.b_hidden, self.w_density, self.b_density, self.w_color,
                    self.b_color):
            if not np.all(np.isfinite(arr)):
                raise ValidationError("decoder parameters must be finite")

    @property
    def hidden(self) -> int:
        return self.b_hidden.shape[0]

    @classmethod
    def create(cls, channels: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        d_in = channels + 2 * DIR_ENC_DIM
        # density bias -2: a mostly-transparent start clears the background fast
        return cls(
            w_hidden=(rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, hidden))).astype(dtype),
            b_hidden=np.zeros(hidden, dtype=dtype),
            w_density=(rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden)).astype(dtype),
            b_density=np.asarray(-2.0, dtype=dtype),
            w_color=(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 3))).astype(dtype),
            b_color=np.zeros(3, dtype=dtype),
        )


@dataclass
class TriplaneField:
    """Three (N, N, C) feature planes plus decoder parameters."""

    planes: np.ndarray  # (3, N, N, C): XY, XZ, YZ
    decoder: DecoderParams

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ValidationError(f"planes must be (3, N, N, C), got {self.planes.shape}")
        if self.planes.shape[1] != self.planes.shape[2] or self.planes.shape[1] < 2:
            raise ValidationError("planes must be square with N >= 2")
        if not np.all(np.isfinite(self.planes)):
            raise ValidationError("plane features must be finite")
        expect = self.channels + 2 * DIR_ENC_DIM
        if self.decoder.w_hidden.shape[0] != expect:
            raise ValidationError(
                f"decoder expects input dim {self.decoder.w_hidden.shape[0]}, field needs {expect}"
            )

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def dtype(self):
        return self.planes.dtype

    @classmethod
    def create(cls, channels=16, resolution=64, hidden=64, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        # plane scale ~0.5 keeps positional features comparable to the O(1)
        # direction encodings, so spatial structure flows from the first step
        planes = rng.normal(0.0, 0.5, (3, resolution, resolution, channels)).astype(dtype)
        return cls(planes=planes, decoder=DecoderParams.create(channels, hidden, rng, dtype))

    def params(self) -> dict:
        """Live parameter arrays keyed by name (shared, not copied)."""
        d = self.decoder
        return {
            "plane_xy": self.planes[0],
            "plane_xz": self.planes[1],
            "plane_yz": self.planes[2],
            "w_hidden": d.w_hidden,
            "b_hidden": d.b_hidden,
            "w_density": d.w_density,
            "b_density": d.b_density,
            "w_color": d.w_color,
            "b_color": d.b_color,
        }

    def copy(self) -> "TriplaneField":
        d = self.decoder
        return TriplaneField(
            planes=self.planes.copy(),
            decoder=DecoderParams(
                w_hidden=d.w_hidden.copy(),
                b_hidden=d.b_hidden.copy(),
                w_density=d.w_density.copy(),
                b_density=d.b_density.copy(),
                w_color=d.w_color.copy(),
                b_color=d.b_color.copy(),
            ),
        )

    def astype(self, dtype) -> "TriplaneField":
        d = self.decoder
        return TriplaneField(
            planes=self.planes.astype(dtype),
            decoder=DecoderParams(
                w_hidden=d.w_hidden.astype(dtype),
                b_hidden=d.b_hidden.astype(dtype),
                w_density=d.w_density.astype(dtype),
                b_density=np.asarray(d.b_density, dtype=dtype),
                w_color=d.w_color.astype(dtype),
                b_color=d.b_color.astype(dtype),
            ),
        )

    def save(self, path) -> None:
        d = self.decoder
        with open(path, "wb") as f:
            f.write(_CHECKPOINT_MAGIC)
            f.write(
                struct.pack(
                    "<IIII", _CHECKPOINT_VERSION, self.channels, self.resolution, d.hidden
                )
            )
            for arr in (self.planes, d.w_hidden, d.b_hidden, d.w_density, d.b_density, d.w_color,
                        d.b_color):
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "TriplaneField":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != _CHECKPOINT_MAGIC:
            raise FormatError("not a triplane checkpoint")
        version, c, n, h = struct.unpack_from("<IIII", data, 4)
        if version != _CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        offset = 20
        shapes = [
            (3, n, n, c),
            (c + 2 * DIR_ENC_DIM, h),
            (h,),
            (h,),
            (),
            (h, 3),
            (3,),
        ]
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            end = offset + 4 * count
            if end > len(data):
                raise FormatError("checkpoint truncated")
            arrays.append(
                np.frombuffer(data[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
            )
            offset = end
        planes, w_h, b_h, w_d, b_d, w_c, b_c = arrays
        return cls(
            planes=planes.copy(),
            decoder=DecoderParams(
                w_hidden=w_h,
                b_hidden=b_h,
                w_density=w_d,
                b_density=np.asarray(b_d.reshape(()), dtype=np.float32),
                w_color=w_c,
                b_color=b_c,
            ),
        )


@dataclass(frozen=True)
class RaySampleConfig:
    """Quadrature along rays: S equal bins on [near, far], optional jitter."""

    samples: int = 32
    near: float = 0.5
    far: float = 5.5
    stratified: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.samples < 2:
            raise ValidationError("at least 2 samples per ray required")
        if not (self.near < self.far):
            raise ValidationError("near must be < far")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for per-scene field fitting."""

    learning_rate: float = 0.00015
    iterations: int = 20000
    batch_rays: int = 4096
    mrf_weight: float = 0.3
    crop_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    sampling: RaySampleConfig = dc_field(default_factory=RaySampleConfig)
    mrf: MrfConfig = dc_field(default_factory=MrfConfig)

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ValidationError("learning rate must be positive")
        if self.mrf_weight < 0:
            raise ValidationError("MRF weight must be non-negative")
        if self.iterations < 0 or self.batch_rays < 1:
            raise ValidationError("iterations must be >= 0 and batch_rays >= 1")


# ---------------------------------------------------------------------------
# Triplane sampling
# ---------------------------------------------------------------------------

_PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ


def _gather_planes(planes: np.ndarray, pts: np.ndarray):
    """Bilinear plane samples summed over the three planes, plus the tape."""
    n = planes.shape[1]
    dtype = planes.dtype
    clamped = np.clip(pts, -1.0, 1.0)
    feats = None
    tape = []
    for p, (ax_a, ax_b) in enumerate(_PLANE_AXES):
        ga = (clamped[:, ax_a] + 1.0) * (0.5 * (n - 1))
        gb = (clamped[:, ax_b] + 1.0) * (0.5 * (n - 1))
        i0 = np.minimum(ga.astype(np.intp), n - 2)
        j0 = np.minimum(gb.astype(np.intp), n - 2)
        fi = (ga - i0).astype(dtype)
        fj = (gb - j0).astype(dtype)
        plane = planes[p]
        v00 = plane[i0, j0]
        v01 = plane[i0, j0 + 1]
        v10 = plane[i0 + 1, j0]
        v11 = plane[i0 + 1, j0 + 1]
        wa = (1.0 - fi)[:, None]
        wb = fi[:, None]
        top = v00 * (1.0 - fj)[:, None] + v01 * fj[:, None]
        bot = v10 * (1.0 - fj)[:, None] + v11 * fj[:, None]
        sample = wa * top + wb * bot
        feats = sample if feats is None else feats + sample
        tape.append((i0, j0, fi, fj))
    return feats, tape


def sample_triplane(field: TriplaneField, points) -> np.ndarray:
    """Sum of bilinear samples of the three planes at one or many points."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    feats, _ = _gather_planes(field.planes, pts.reshape(-1, 3))
    return feats[0] if single else feats


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


def _check_unit(name: str, d: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        warnings.warn(f"{name} not unit length; normalizing", stacklevel=3)
        return d / norms
    return d


def decode(field: TriplaneField, features, light_dir, view_dir):
    """(density, rgb) for feature vectors under the given light/view directions."""
    feats = np.asarray(features, dtype=field.dtype)
    single = feats.ndim == 1
    feats = np.atleast_2d(feats)
    m = feats.shape[0]
    omega = _check_unit("light_dir", np.asarray(light_dir, dtype=np.float64))
    view = _check_unit("view_dir", np.asarray(view_dir, dtype=np.float64))
    omega = np.broadcast_to(np.atleast_2d(omega), (m, 3))
    view = np.broadcast_to(np.atleast_2d(view), (m, 3))
    enc = np.concatenate([encode_direction(omega), encode_direction(view)], axis=1)
    d = field.decoder
    x = np.concatenate([feats, enc.astype(field.dtype)], axis=1)
    hidden = np.maximum(x @ d.w_hidden + d.b_hidden, 0)
    sigma = np.logaddexp(0, hidden @ d.w_density + d.b_density)
    rgb = expit(hidden @ d.w_color + d.b_color)
    if single:
        return float(sigma[0]), rgb[0]
    return sigma, rgb


# ---------------------------------------------------------------------------
# Volume rendering
# ---------------------------------------------------------------------------


def composite(sigma: np.ndarray, colors: np.ndarray, delta: float):
    """Alpha-composite per-ray samples over a black background.

    sigma (R, S), colors (R, S, 3) -> (rgb (R, 3), transmittance (R,),
    weights (R, S)).
    """
    alpha = -np.expm1(-sigma * delta)
    one_minus = 1.0 - alpha
    incl = np.cumprod(one_minus, axis=1)
    t_excl = np.concatenate([np.ones_like(incl[:, :1]), incl[:, :-1]], axis=1)
    weights = t_excl * alpha
    rgb = np.einsum("rs,rsc->rc", weights, colors)
    return rgb, incl[:, -1], weights


class _Tape:
    """Saved forward intermediates for one ray batch."""

    __slots__ = (
        "rays",
        "samples",
        "delta",
        "feats",
        "enc_dirs",
        "hidden",
        "sigma",
        "colors",
        "t_excl",
        "alpha",
        "weights",
        "trans",
        "tri_tape",
    )


def _sample_positions(cfg: RaySampleConfig, n_rays: int, rng) -> np.ndarray:
    """Sample depths (R, S): bin midpoints, or uniform jitter inside each bin."""
    delta = (cfg.far - cfg.near) / cfg.samples
    base = cfg.near + delta * np.arange(cfg.samples, dtype=np.float64)
    if cfg.stratified:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        u = rng.random((n_rays, cfg.samples))
    else:
        u = 0.5
    return base[None, :] + delta * u


def forward_rays(
    field: TriplaneField,
    origins: np.ndarray,
    dirs: np.ndarray,
    light_dir,
    cfg: RaySampleConfig,
    rng=None,
    with_tape: bool = False,
):
    """Render a ray bundle; optionally keep the tape for :func:`backward_rays`.

    ``light_dir`` is one direction shared by the bundle or one per ray.
    Returns (rgb (R, 3), transmittance (R,)) plus the tape when requested.
    """
    dec = field.decoder
    dtype = field.dtype
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n_rays = dirs.shape[0]
    if origins.shape[0] == 1 and n_rays > 1:
        origins = np.broadcast_to(origins, dirs.shape)
    omega = np.broadcast_to(
        np.atleast_2d(np.asarray(light_dir, dtype=np.float64)), (n_rays, 3)
    )
    s = cfg.samples
    c = field.channels
    delta = (cfg.far - cfg.near) / s

    t = _sample_positions(cfg, n_rays, rng)
    pts = np.ascontiguousarray(
        (origins[:, None, :] + dirs[:, None, :] * t[:, :, None]).reshape(-1, 3)
    )
    m = pts.shape[0]
    feats = np.empty((m, c), dtype=dtype)
    i0s = np.empty((3, m), dtype=np.intp)
    j0s = np.empty((3, m), dtype=np.intp)
    fis = np.empty((3, m), dtype=np.float64)
    fjs = np.empty((3, m), dtype=np.float64)
    triplane_gather(field.planes, pts, feats, i0s, j0s, fis, fjs)

    enc_dirs = np.concatenate(
        [encode_direction(omega), encode_direction(dirs)], axis=1
    ).astype(dtype)
    ray_term = enc_dirs @ dec.w_hidden[c:]
    ray_term += dec.b_hidden

    hidden = np.empty((m, dec.hidden), dtype=dtype)
    sigma_flat = np.empty(m, dtype=dtype)
    colors_flat = np.empty((m, 3), dtype=dtype)
    mlp_forward(
        feats,
        dec.w_hidden[:c],
        ray_term,
        s,
        dec.w_density,
        float(dec.b_density),
        dec.w_color,
        dec.b_color,
        hidden,
        sigma_flat,
        colors_flat,
    )
    sigma = sigma_flat.reshape(n_rays, s)
    colors = colors_flat.reshape(n_rays, s, 3)
    rgb, trans, weights = composite(sigma, colors, delta)

    if not with_tape:
        return rgb, trans
    tape = _Tape()
    tape.rays = n_rays
    tape.samples = s
    tape.delta = delta
    tape.feats = feats
    tape.enc_dirs = enc_dirs
    tape.hidden = hidden
    tape.sigma = sigma
    tape.colors = colors
    alpha = -np.expm1(-sigma * delta)
    tape.alpha = alpha
    incl = np.cumprod(1.0 - alpha, axis=1)
    tape.t_excl = np.concatenate([np.ones_like(incl[:, :1]), incl[:, :-1]], axis=1)
    tape.weights = weights
    tape.trans = trans
    tape.tri_tape = (i0s, j0s, fis, fjs)
    return rgb, trans, tape


def backward_rays(field: TriplaneField, tape: _Tape, d_rgb: np.ndarray, d_trans=None) -> dict:
    """Exact gradients of sum(d_rgb * rgb) (+ sum(d_trans * T)) w.r.t. params.

    Plane texels never touched by the batch keep zero gradient.
    """
    dec = field.decoder
    dtype = field.dtype
    r, s = tape.rays, tape.samples
    d_rgb = np.asarray(d_rgb, dtype=np.float64).reshape(r, 3)

    cdot = np.einsum("rsc,rc->rs", tape.colors, d_rgb)
    wc = tape.weights * cdot
    incl_sum = np.cumsum(wc, axis=1)
    suffix = incl_sum[:, -1:] - incl_sum  # sum over later samples
    t_next = tape.t_excl * (1.0 - tape.alpha)
    d_sigma = tape.delta * (t_next * cdot - suffix)
    if d_trans is not None:
        d_trans = np.asarray(d_trans, dtype=np.float64).reshape(r)
        d_sigma -= tape.delta * (tape.trans * d_trans)[:, None]

    d_colors = tape.weights[:, :, None] * d_rgb[:, None, :]

    softplus_slope = -np.expm1(-tape.sigma)  # d softplus / d pre = sigmoid(pre)
    d_pre_sigma = (d_sigma * softplus_slope).reshape(r * s).astype(dtype)
    colors_flat = tape.colors.reshape(r * s, 3)
    d_pre_color = (
        d_colors.reshape(r * s, 3) * colors_flat * (1.0 - colors_flat)
    ).astype(dtype)

    c = field.channels
    m = r * s
    d_pre_h = np.empty((m, dec.hidden), dtype=dtype)
    d_feats = np.empty((m, c), dtype=dtype)
    mlp_backward(
        tape.hidden,
        d_pre_sigma,
        d_pre_color,
        dec.w_density,
        dec.w_color,
        dec.w_hidden[:c],
        d_pre_h,
        d_feats,
    )

    grads = {
        "b_color": d_pre_color.sum(axis=0),
        "w_color": tape.hidden.T @ d_pre_color,
        "b_density": np.asarray(d_pre_sigma.sum(), dtype=dtype),
        "w_density": tape.hidden.T @ d_pre_sigma,
        "b_hidden": d_pre_h.sum(axis=0),
    }
    w_feat_grad = tape.feats.T @ d_pre_h
    per_ray = d_pre_h.reshape(r, s, -1).sum(axis=1)
    w_dirs_grad = tape.enc_dirs.T @ per_ray
    grads["w_hidden"] = np.concatenate([w_feat_grad, w_dirs_grad], axis=0)

    i0s, j0s, fis, fjs = tape.tri_tape
    for p, name in enumerate(("plane_xy", "plane_xz", "plane_yz")):
        g = np.zeros_like(field.planes[0])
        scatter_bilinear(g, i0s[p], j0s[p], fis[p], fjs[p], d_feats)
        grads[name] = g
    return grads


def render_rays(field, origins, dirs, light_dir, cfg: RaySampleConfig, rng=None):
    """Forward rendering without a tape: (rgb, transmittance)."""
    return forward_rays(field, origins, dirs, light_dir, cfg, rng=rng, with_tape=False)


def render_ray(field, origin, direction, light_dir, cfg: RaySampleConfig):
    """Single-ray render returning (rgb, transmittance, per-sample aux)."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        warnings.warn("ray direction not unit length; normalizing", stacklevel=2)
        direction = direction / np.linalg.norm(direction)
    rgb, trans, tape = forward_rays(
        field, np.asarray(origin)[None, :], direction[None, :], light_dir, cfg, with_tape=True
    )
    aux = {
        "t": _sample_positions(cfg, 1, np.random.default_rng(cfg.seed))[0],
        "sigma": tape.sigma[0],
        "alpha": tape.alpha[0],
        "weights": tape.weights[0],
        "colors": tape.colors[0],
    }
    return rgb[0], float(trans[0]), aux


def render_olat(
    field: TriplaneField, camera: CameraModel, light_dir, cfg: RaySampleConfig
) -> HdrImage:
    """Whole-frame OLAT render. Deterministic given cfg.seed, any chunking.

    Stratified jitter, when enabled, is keyed per image row so the output does
    not depend on how rows are grouped into chunks.
    """
    dirs = camera.ray_directions()
    origin = camera.center()[None, :]
    h, w = camera.height, camera.width
    out = np.empty((h, w, 3), dtype=np.float32)
    rows_per_chunk = max(1, 16384 // max(w, 1))
    # One BLAS thread: avoids spin-wait contention with the numba pool and
    # pins the matmul op order regardless of ambient thread settings.
    with threadpool_limits(limits=1, user_api="blas"):
        for y0 in range(0, h, rows_per_chunk):
            y1 = min(y0 + rows_per_chunk, h)
            chunk_dirs = dirs[y0:y1].reshape(-1, 3)
            rng = None
            if cfg.stratified:
                seeds = [np.random.SeedSequence((cfg.seed, y)) for y in range(y0, y1)]
                rows = [
                    np.random.default_rng(ss).random((w, cfg.samples)) for ss in seeds
                ]
                jitter = np.concatenate(rows, axis=0)
                rng = _FixedJitter(jitter)
            rgb, _ = forward_rays(field, origin, chunk_dirs, light_dir, cfg, rng=rng)
            out[y0:y1] = rgb.reshape(y1 - y0, w, 3).astype(np.float32)
    return HdrImage.from_array(out)


class _FixedJitter:
    """Adapter feeding precomputed jitter through the rng interface."""

    def __init__(self, values: np.ndarray):
        self._values = values

    def random(self, shape):
        if tuple(shape) != self._values.shape:
            raise ValidationError("jitter shape mismatch")
        return self._values


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainView:
    """One supervision element: a camera, a light direction, a target OLAT."""

    camera: CameraModel
    light_dir: np.ndarray
    target: HdrImage

    def __post_init__(self):
        if (self.target.width, self.target.height) != (self.camera.width, self.camera.height):
            raise ValidationError("target image does not match camera resolution")


@dataclass
class TrainState:
    """Adam moments plus the global step, for deterministic chunked resumes."""

    step: int
    m: dict
    v: dict

    @classmethod
    def fresh(cls, field: TriplaneField) -> "TrainState":
        zeros = {k: np.zeros_like(p) for k, p in field.params().items()}
        return cls(step=0, m=zeros, v={k: np.zeros_like(p) for k, p in field.params().items()})


@dataclass
class TrainResult:
    field: TriplaneField
    loss_history: list
    state: TrainState
    iterations_run: int


def _adam_step(params: dict, grads: dict, state: TrainState, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for key, p in params.items():
        g = grads[key]
        m = state.m[key]
        v = state.v[key]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_epsilon)
        p -= np.asarray(cfg.learning_rate * update, dtype=p.dtype)


def train(
    field: TriplaneField,
    dataset: list,
    cfg: TrainConfig,
    state: TrainState | None = None,
    start_iteration: int = 0,
    callback=None,
) -> TrainResult:
    """Fit the field with the L1 + mrf_weight * ID-MRF objective.

    Each iteration draws one view, a random ray batch for the L1 term and one
    crop for the patch-matching term, renders both, and applies one Adam step.
    The per-iteration RNG is keyed by (seed, absolute iteration), so resuming
    from ``state`` at ``start_iteration`` reproduces a single long run
    bit-for-bit. ``callback(iteration, field)`` runs after every iteration;
    returning True stops early. The field is updated in place.
    """
    if not dataset:
        raise ValidationError("training dataset is empty")
    if state is None:
        state = TrainState.fresh(field)
    params = field.params()
    ray_cache = {}
    history = []
    cam0 = dataset[0].camera
    crop = min(cfg.crop_size, cam0.height, cam0.width)

    with threadpool_limits(limits=1, user_api="blas"):
        _train_loop(field, dataset, cfg, state, start_iteration, callback, params,
                    ray_cache, history, crop)
    return TrainResult(field=field, loss_history=history, state=state,
                       iterations_run=len(history))


def _train_loop(field, dataset, cfg, state, start_iteration, callback, params,
                ray_cache, history, crop):
    for it in range(start_iteration, start_iteration + cfg.iterations):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, it)))
        view = dataset[int(rng.integers(len(dataset)))]
        cam = view.camera
        key = id(cam)
        if key not in ray_cache:
            ray_cache[key] = (cam.ray_directions().reshape(-1, 3), cam.center())
        all_dirs, origin = ray_cache[key]
        h, w = cam.height, cam.width

        pix = rng.integers(0, h * w, size=cfg.batch_rays)
        row0 = int(rng.integers(0, h - crop + 1))
        col0 = int(rng.integers(0, w - crop + 1))
        crop_rows = np.arange(row0, row0 + crop)
        crop_pix = (crop_rows[:, None] * w + np.arange(col0, col0 + crop)[None, :]).ravel()
        ray_ids = np.concatenate([pix, crop_pix])

        jitter_rng = rng if cfg.sampling.stratified else None
        rgb, _, tape = forward_rays(
            field,
            origin[None, :],
            all_dirs[ray_ids],
            view.light_dir,
            cfg.sampling,
            rng=jitter_rng,
            with_tape=True,
        )

        targets = view.target.data.reshape(-1, 3)
        batch_pred = rgb[: cfg.batch_rays]
        batch_tgt = targets[pix].astype(np.float64)
        diff = batch_pred - batch_tgt
        # L1 norm (sum) semantics: keeps the reconstruction gradient dominant
        # over the patch-matching term, as in the full-image objective
        loss_l1 = float(np.sum(np.abs(diff)))
        d_rgb = np.empty((rgb.shape[0], 3), dtype=np.float64)
        d_rgb[: cfg.batch_rays] = np.sign(diff)

        crop_pred = rgb[cfg.batch_rays :].reshape(crop, crop, 3)
        crop_tgt = targets[crop_pix].reshape(crop, crop, 3).astype(np.float64)
        if cfg.mrf_weight > 0:
            loss_mrf, d_crop = idmrf_loss_and_grad(crop_pred, crop_tgt, cfg.mrf)
            d_rgb[cfg.batch_rays :] = cfg.mrf_weight * d_crop.reshape(-1, 3)
        else:
            loss_mrf = 0.0
            d_rgb[cfg.batch_rays :] = 0.0

        loss = loss_l1 + cfg.mrf_weight * loss_mrf
        if not np.isfinite(loss):
            snapshot = {k: np.array(v) for k, v in field.params().items()}
            raise TrainingDivergedError(it, snapshot)
        history.append(loss)

        grads = backward_rays(field, tape, d_rgb)
        _adam_step(params, grads, state, cfg)

        if callback is not None and callback(it + 1, field):
            break
