"""Numba hot loops shared by the relight combiner and the reflectance field.

All kernels are deterministic for any thread count: parallel loops partition
output elements disjointly, and every accumulator element is updated in a
fixed order within one thread.
"""

import numba
import numpy as np
from numba import njit, prange


def set_thread_count(n: int) -> None:
    """Clamp and apply the worker count used by parallel kernels."""
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@njit(parallel=True, cache=True, nogil=True)
def weighted_accumulate(acc, frame, weight):
    """acc[i,j,c] += weight[c] * float64(frame[i,j,c]), rows in parallel."""
    h, w, _ = frame.shape
    for i in prange(h):
        for j in range(w):
            for c in range(3):
                acc[i, j, c] += weight[c] * np.float64(frame[i, j, c])


@njit(parallel=True, cache=True, nogil=True)
def triplane_gather(planes, pts, feats, i0s, j0s, fis, fjs):
    """Bilinear-sample and sum the three planes at pts, recording the tape.

    planes (3, N, N, C); pts (M, 3) float64; feats (M, C) in the plane dtype;
    tape arrays are (3, M). Plane p uses point axes (0,1), (0,2), (1,2).
    """
    m = pts.shape[0]
    n = planes.shape[1]
    channels = planes.shape[3]
    for s in prange(m):
        for k in range(channels):
            feats[s, k] = 0.0
        for p in range(3):
            if p == 0:
                a_val, b_val = pts[s, 0], pts[s, 1]
            elif p == 1:
                a_val, b_val = pts[s, 0], pts[s, 2]
            else:
                a_val, b_val = pts[s, 1], pts[s, 2]
            a_val = min(max(a_val, -1.0), 1.0)
            b_val = min(max(b_val, -1.0), 1.0)
            ga = (a_val + 1.0) * (0.5 * (n - 1))
            gb = (b_val + 1.0) * (0.5 * (n - 1))
            i0 = min(int(ga), n - 2)
            j0 = min(int(gb), n - 2)
            fi = ga - i0
            fj = gb - j0
            i0s[p, s] = i0
            j0s[p, s] = j0
            fis[p, s] = fi
            fjs[p, s] = fj
            w00 = (1.0 - fi) * (1.0 - fj)
            w01 = (1.0 - fi) * fj
            w10 = fi * (1.0 - fj)
            w11 = fi * fj
            for k in range(channels):
                feats[s, k] += (
                    w00 * planes[p, i0, j0, k]
                    + w01 * planes[p, i0, j0 + 1, k]
                    + w10 * planes[p, i0 + 1, j0, k]
                    + w11 * planes[p, i0 + 1, j0 + 1, k]
                )


@njit(parallel=True, cache=True, nogil=True, fastmath=True)
def mlp_forward(feats, w1f, ray_term, samples_per_ray, w_d, b_d, w_c, b_c,
                hidden_out, sigma_out, color_out):
    """Fused hidden layer + heads.

    hidden = relu(feats @ w1f + ray_term[ray]); sigma = softplus(.);
    rgb = sigmoid(.). ray_term carries the direction term plus the hidden
    bias. Outputs are written per sample, so any thread count is bit-equal.
    """
    m, channels = feats.shape
    hdim = w1f.shape[1]
    for s in prange(m):
        ray = s // samples_per_ray
        for h in range(hdim):
            hidden_out[s, h] = ray_term[ray, h]
        for k in range(channels):
            f = feats[s, k]
            for h in range(hdim):
                hidden_out[s, h] += f * w1f[k, h]
        acc_d = b_d
        acc_0 = b_c[0]
        acc_1 = b_c[1]
        acc_2 = b_c[2]
        for h in range(hdim):
            v = hidden_out[s, h]
            if v < 0.0:
                v = 0.0
                hidden_out[s, h] = 0.0
            acc_d += v * w_d[h]
            acc_0 += v * w_c[h, 0]
            acc_1 += v * w_c[h, 1]
            acc_2 += v * w_c[h, 2]
        if acc_d > 0.0:
            sigma_out[s] = acc_d + np.log1p(np.exp(-acc_d))
        else:
            sigma_out[s] = np.log1p(np.exp(acc_d))
        for k in range(3):
            z = acc_0 if k == 0 else (acc_1 if k == 1 else acc_2)
            if z >= 0.0:
                color_out[s, k] = 1.0 / (1.0 + np.exp(-z))
            else:
                e = np.exp(z)
                color_out[s, k] = e / (1.0 + e)


@njit(parallel=True, cache=True, nogil=True, fastmath=True)
def mlp_backward(hidden, d_pre_sigma, d_pre_color, w_d, w_c, w1f,
                 d_pre_h_out, d_feats_out):
    """Head + ReLU backward fused with the feature-input gradient."""
    m, hdim = hidden.shape
    channels = w1f.shape[0]
    for s in prange(m):
        dps = d_pre_sigma[s]
        d0 = d_pre_color[s, 0]
        d1 = d_pre_color[s, 1]
        d2 = d_pre_color[s, 2]
        for h in range(hdim):
            if hidden[s, h] > 0.0:
                d_pre_h_out[s, h] = dps * w_d[h] + d0 * w_c[h, 0] + d1 * w_c[h, 1] + d2 * w_c[h, 2]
            else:
                d_pre_h_out[s, h] = 0.0
        for k in range(channels):
            acc = 0.0
            for h in range(hdim):
                acc += d_pre_h_out[s, h] * w1f[k, h]
            d_feats_out[s, k] = acc


@njit(cache=True, nogil=True)
def scatter_bilinear(grad_plane, i0, j0, fi, fj, vals):
    """Scatter-add bilinear footprints: grad_plane is (N, N, C), vals (M, C).

    Sequential on purpose: scatter order must not depend on thread count.
    """
    m, channels = vals.shape
    n = grad_plane.shape[0]
    for s in range(m):
        a = i0[s]
        b = j0[s]
        a1 = min(a + 1, n - 1)
        b1 = min(b + 1, n - 1)
        wi = fi[s]
        wj = fj[s]
        w00 = (1.0 - wi) * (1.0 - wj)
        w01 = (1.0 - wi) * wj
        w10 = wi * (1.0 - wj)
        w11 = wi * wj
        for k in range(channels):
            v = vals[s, k]
            grad_plane[a, b, k] += w00 * v
            grad_plane[a, b1, k] += w01 * v
            grad_plane[a1, b, k] += w10 * v
            grad_plane[a1, b1, k] += w11 * v
