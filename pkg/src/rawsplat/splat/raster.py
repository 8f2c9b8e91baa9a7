"""Per-pixel front-to-back alpha compositing kernels.

The backward kernel replays each pixel's forward pass into scratch buffers
instead of dividing transmittance back out, so gradients stay accurate
when an alpha sits at the clamp. Accumulation is serial and therefore
deterministic.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _alpha_at(px, py, mx, my, ca, cb, cc, opac, cutoff2, alpha_max):
    dx = px - mx
    dy = py - my
    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    if q > cutoff2:
        return 0.0, 0.0, dx, dy, False
    g = np.exp(-0.5 * q)
    a = opac * g
    clamped = False
    if a > alpha_max:
        a = alpha_max
        clamped = True
    return a, g, dx, dy, clamped


@numba.njit(cache=True)
def rasterize_forward(height, width, order, mean2d, conic, opac, colors, bbox,
                      cutoff2, alpha_max, t_min):
    n_ch = colors.shape[1]
    image = np.zeros((n_ch, height, width))
    alpha = np.zeros((height, width))
    n_proc = np.zeros((height, width), dtype=np.int64)
    for v in range(height):
        for u in range(width):
            t = 1.0
            k = 0
            while k < order.shape[0]:
                if t < t_min:
                    break
                i = order[k]
                k += 1
                if u < bbox[i, 0] or u > bbox[i, 1] or v < bbox[i, 2] or v > bbox[i, 3]:
                    continue
                a, g, dx, dy, cl = _alpha_at(
                    float(u), float(v), mean2d[i, 0], mean2d[i, 1],
                    conic[i, 0], conic[i, 1], conic[i, 2], opac[i], cutoff2, alpha_max,
                )
                if a == 0.0:
                    continue
                w = a * t
                for ch in range(n_ch):
                    image[ch, v, u] += colors[i, ch] * w
                t *= 1.0 - a
            alpha[v, u] = 1.0 - t
            n_proc[v, u] = k
    return image, alpha, n_proc


@numba.njit(cache=True)
def rasterize_backward(height, width, order, mean2d, conic, opac, colors, bbox,
                       cutoff2, alpha_max, n_proc, g_image, g_alpha):
    m = mean2d.shape[0]
    n_ch = colors.shape[1]
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_opac = np.zeros(m)
    g_color = np.zeros((m, n_ch))
    n_order = order.shape[0]
    a_buf = np.zeros(n_order)
    t_buf = np.zeros(n_order)
    g_buf = np.zeros(n_order)
    dx_buf = np.zeros(n_order)
    dy_buf = np.zeros(n_order)
    cl_buf = np.zeros(n_order, dtype=np.bool_)
    s_col = np.zeros(n_ch)
    for v in range(height):
        for u in range(width):
            kmax = n_proc[v, u]
            t = 1.0
            for k in range(kmax):
                i = order[k]
                a_buf[k] = 0.0
                if u < bbox[i, 0] or u > bbox[i, 1] or v < bbox[i, 2] or v > bbox[i, 3]:
                    continue
                a, g, dx, dy, cl = _alpha_at(
                    float(u), float(v), mean2d[i, 0], mean2d[i, 1],
                    conic[i, 0], conic[i, 1], conic[i, 2], opac[i], cutoff2, alpha_max,
                )
                a_buf[k] = a
                t_buf[k] = t
                g_buf[k] = g
                dx_buf[k] = dx
                dy_buf[k] = dy
                cl_buf[k] = cl
                t *= 1.0 - a
            ga = g_alpha[v, u]
            s_alpha = 0.0
            for ch in range(n_ch):
                s_col[ch] = 0.0
            for k in range(kmax - 1, -1, -1):
                a = a_buf[k]
                if a == 0.0:
                    continue
                i = order[k]
                ti = t_buf[k]
                inv = 1.0 / (1.0 - a)
                d_a = ga * (ti - s_alpha * inv)
                for ch in range(n_ch):
                    gi = g_image[ch, v, u]
                    d_a += gi * (colors[i, ch] * ti - s_col[ch] * inv)
                    g_color[i, ch] += gi * a * ti
                    s_col[ch] += colors[i, ch] * a * ti
                s_alpha += a * ti
                if cl_buf[k]:
                    continue
                g_opac[i] += d_a * g_buf[k]
                d_q = -0.5 * a * d_a
                dx = dx_buf[k]
                dy = dy_buf[k]
                g_mean[i, 0] -= d_q * 2.0 * (conic[i, 0] * dx + conic[i, 1] * dy)
                g_mean[i, 1] -= d_q * 2.0 * (conic[i, 1] * dx + conic[i, 2] * dy)
                g_conic[i, 0] += d_q * dx * dx
                g_conic[i, 1] += d_q * 2.0 * dx * dy
                g_conic[i, 2] += d_q * dy * dy
    return g_mean, g_conic, g_opac, g_color
