"""Training losses (L1, ID-MRF) and image metrics (PSNR, SSIM, RMSE).

The ID-MRF loss matches every target patch against all predicted patches by
relative cosine similarity and rewards diverse, confident nearest neighbors:

    d(v, u)   = 1 - <v_hat, u_hat>          (mean-centered, eps-stabilized norms)
    d~(v, u)  = d / (min_u' d(v, u') + eps)
    w(v, u)   = exp((1 - d~) / h)
    w_bar     = w / sum_u' w(v, u')
    L_M       = -log(mean_u max_v w_bar(v, u))

evaluated at two scales: raw patches at full resolution and at a 2x
box-downsampled resolution. The pre-trained feature extractor of the original
formulation is deliberately replaced by these raw patch pyramids so the loss
is self-contained; the matching machinery is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ValidationError
from .imagecore import HdrImage

_NORM_GUARD = 1e-30  # guards the normalize backward against zero-norm patches


@dataclass(frozen=True)
class MrfConfig:
    """Patch size per scale, stride, similarity bandwidth, and stabilizer."""

    patch_sizes: tuple = (5, 5)
    stride: int = 2
    bandwidth: float = 0.5
    epsilon: float = 1e-5

    def __post_init__(self):
        if len(self.patch_sizes) != 2 or any(p < 2 for p in self.patch_sizes):
            raise ValidationError("two patch sizes >= 2 required")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")
        if not (self.bandwidth > 0):
            raise ValidationError("bandwidth must be positive")
        if not (self.epsilon > 0):
            raise ValidationError("epsilon must be positive")


def _as_array(img) -> np.ndarray:
    if isinstance(img, HdrImage):
        return img.data.astype(np.float64)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractError(f"image dimensions differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Pixel losses and metrics
# ---------------------------------------------------------------------------


def l1_loss(a, b) -> float:
    """Mean absolute difference over all pixels and channels."""
    x, y = _as_array(a), _as_array(b)
    _check_dims(x, y)
    return float(np.mean(np.abs(x - y)))


def rmse(a, b) -> float:
    x, y = _as_array(a), _as_array(b)
    _check_dims(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def psnr(a, b, peak: float = 1.0) -> float:
    """20 log10(peak / rmse), capped at 100 dB for near-identical inputs."""
    if not (peak > 0):
        raise ValidationError("peak must be positive")
    err = rmse(a, b)
    if err < peak * 1e-5:
        return 100.0
    return float(20.0 * np.log10(peak / err))


def _window_means(x: np.ndarray, win: int) -> np.ndarray:
    """Means of all win x win windows fully inside x (2D), via integral image."""
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=np.float64)
    c[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    s = c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]
    return s / float(win * win)


def ssim(a, b, peak: float = 1.0, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over a uniform window, per channel, valid windows only."""
    x, y = _as_array(a), _as_array(b)
    _check_dims(x, y)
    if x.shape[0] < window or x.shape[1] < window:
        raise ContractError(f"images smaller than the {window}x{window} SSIM window")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = []
    for ch in range(x.shape[2]):
        xc, yc = x[..., ch], y[..., ch]
        mx = _window_means(xc, window)
        my = _window_means(yc, window)
        mxx = _window_means(xc * xc, window)
        myy = _window_means(yc * yc, window)
        mxy = _window_means(xc * yc, window)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(num / den)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# ID-MRF loss
# ---------------------------------------------------------------------------


def _extract_patches(img: np.ndarray, patch: int, stride: int):
    """Overlapping patches as rows plus their top-left grid positions."""
    windows = sliding_window_view(img, (patch, patch, img.shape[2]))[::stride, ::stride, 0]
    rows, cols = windows.shape[:2]
    flat = windows.reshape(rows * cols, -1)
    return np.ascontiguousarray(flat), rows, cols


def _box_down2(img: np.ndarray) -> np.ndarray:
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    return img[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))


def _normalize_rows(p: np.ndarray, eps: float):
    centered = p - p.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    unit = centered / (norms + eps)[:, None]
    return unit, centered, norms


def _matching_loss_and_grad(x_img: np.ndarray, y_img: np.ndarray, patch: int, cfg: MrfConfig):
    """L_M for one scale plus its gradient with respect to x_img."""
    if x_img.shape[0] < patch + 1 or x_img.shape[1] < patch + 1:
        raise ContractError(
            f"image {x_img.shape[1]}x{x_img.shape[0]} too small for {patch}x{patch} patches"
        )
    eps, h = cfg.epsilon, cfg.bandwidth
    u_flat, rows, cols = _extract_patches(x_img, patch, cfg.stride)
    v_flat, _, _ = _extract_patches(y_img, patch, cfg.stride)
    u_hat, u_centered, u_norms = _normalize_rows(u_flat, eps)
    v_hat, _, _ = _normalize_rows(v_flat, eps)

    d = 1.0 - v_hat @ u_hat.T  # (I, J): rows = target patches v, cols = x patches u
    m = d.min(axis=1)
    jstar = d.argmin(axis=1)
    d_rel = d / (m + eps)[:, None]
    w = np.exp((1.0 - d_rel) / h)
    w_sum = w.sum(axis=1)
    w_bar = w / w_sum[:, None]
    best = w_bar.max(axis=0)  # per x patch u: its most confident claimant v
    istar = w_bar.argmax(axis=0)
    mean_best = best.mean()
    loss = -float(np.log(mean_best))

    # reverse pass, mirroring each forward stage
    n_u = u_flat.shape[0]
    g_wbar = np.zeros_like(w_bar)
    g_wbar[istar, np.arange(n_u)] = -1.0 / (n_u * mean_best)
    row_dot = (g_wbar * w_bar).sum(axis=1)
    g_w = (g_wbar - row_dot[:, None]) / w_sum[:, None]
    g_drel = -g_w * w / h
    g_d = g_drel / (m + eps)[:, None]
    min_term = (g_drel * d).sum(axis=1) / (m + eps) ** 2
    g_d[np.arange(d.shape[0]), jstar] -= min_term

    g_uhat = -(g_d.T @ v_hat)  # (J, P)
    denom = (u_norms + eps)[:, None]
    radial = (u_centered * g_uhat).sum(axis=1) / (
        np.maximum(u_norms, _NORM_GUARD) * (u_norms + eps) ** 2
    )
    g_ucentered = g_uhat / denom - u_centered * radial[:, None]
    g_u = g_ucentered - g_ucentered.mean(axis=1, keepdims=True)

    grad = np.zeros_like(x_img)
    g_patches = g_u.reshape(rows, cols, patch, patch, x_img.shape[2])
    for r in range(rows):
        for c in range(cols):
            y0, x0 = r * cfg.stride, c * cfg.stride
            grad[y0 : y0 + patch, x0 : x0 + patch] += g_patches[r, c]
    return loss, grad


def idmrf_loss_and_grad(x, y, cfg: MrfConfig = MrfConfig()):
    """Two-scale ID-MRF loss and its gradient with respect to ``x``."""
    x_arr, y_arr = _as_array(x), _as_array(y)
    _check_dims(x_arr, y_arr)
    loss1, grad1 = _matching_loss_and_grad(x_arr, y_arr, cfg.patch_sizes[0], cfg)
    x_half, y_half = _box_down2(x_arr), _box_down2(y_arr)
    loss2, grad_half = _matching_loss_and_grad(x_half, y_half, cfg.patch_sizes[1], cfg)
    grad = grad1
    h2, w2 = x_half.shape[:2]
    quarter = grad_half * 0.25
    grad[: 2 * h2 : 2, : 2 * w2 : 2] += quarter
    grad[: 2 * h2 : 2, 1 : 2 * w2 : 2] += quarter
    grad[1 : 2 * h2 : 2, : 2 * w2 : 2] += quarter
    grad[1 : 2 * h2 : 2, 1 : 2 * w2 : 2] += quarter
    return loss1 + loss2, grad


def idmrf_loss(x, y, cfg: MrfConfig = MrfConfig()) -> float:
    """Two-scale ID-MRF loss (see module docstring for the matching function)."""
    loss, _ = idmrf_loss_and_grad(x, y, cfg)
    return loss
