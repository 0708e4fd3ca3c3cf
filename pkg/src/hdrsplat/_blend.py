"""Compiled front-to-back alpha blending and its adjoint.

Pixels are binned into square tiles; each tile keeps the Gaussians whose
culling box overlaps it, already in depth order. Every view is processed
independently and writes only to its own slice of the gradient buffers, so
results do not depend on thread scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def bin_tiles(means2d, radius, opacity, order, width, height, tile):
    """Per-view tile lists of Gaussian indices in depth order."""
    nviews, ng = opacity.shape
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    counts = np.zeros((nviews, ntx * nty), dtype=np.int32)
    lists = np.zeros((nviews, ntx * nty, ng), dtype=np.int32)
    for v in range(nviews):
        for k in range(ng):
            i = order[v, k]
            if opacity[v, i] <= 0.0:
                continue
            r = radius[v, i]
            mx = means2d[v, i, 0]
            my = means2d[v, i, 1]
            if not (r < 1e12 and mx == mx and my == my):
                x0, x1, y0, y1 = 0, ntx - 1, 0, nty - 1
            else:
                x0 = int(np.floor((mx - r) / tile))
                x1 = int(np.floor((mx + r) / tile))
                y0 = int(np.floor((my - r) / tile))
                y1 = int(np.floor((my + r) / tile))
                if x1 < 0 or y1 < 0 or x0 >= ntx or y0 >= nty:
                    continue
                x0 = max(x0, 0)
                y0 = max(y0, 0)
                x1 = min(x1, ntx - 1)
                y1 = min(y1, nty - 1)
            for ty in range(y0, y1 + 1):
                for tx in range(x0, x1 + 1):
                    tid = ty * ntx + tx
                    lists[v, tid, counts[v, tid]] = i
                    counts[v, tid] += 1
    return counts, lists


@njit(cache=True)
def blend_forward(means2d, conics, opacity, colors, counts, lists, width, height, tile,
                  alpha_max, min_transmittance, cull_power):
    nviews = means2d.shape[0]
    ntx = (width + tile - 1) // tile
    image = np.zeros((nviews, height, width, 3))
    for v in range(nviews):
        for py in range(height):
            y = py + 0.5
            for px in range(width):
                x = px + 0.5
                tid = (py // tile) * ntx + px // tile
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for k in range(counts[v, tid]):
                    i = lists[v, tid, k]
                    dx = x - means2d[v, i, 0]
                    dy = y - means2d[v, i, 1]
                    power = 0.5 * (conics[v, i, 0] * dx * dx + conics[v, i, 2] * dy * dy) \
                        + conics[v, i, 1] * dx * dy
                    if power > cull_power:
                        continue
                    if trans < min_transmittance:
                        break
                    alpha = opacity[v, i] * np.exp(-power)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    w = alpha * trans
                    r += w * colors[i, 0]
                    g += w * colors[i, 1]
                    b += w * colors[i, 2]
                    trans *= 1.0 - alpha
                image[v, py, px, 0] = r
                image[v, py, px, 1] = g
                image[v, py, px, 2] = b
    return image


@njit(cache=True)
def blend_backward(means2d, conics, opacity, colors, counts, lists, width, height, tile,
                   alpha_max, min_transmittance, cull_power, upstream):
    nviews, ng = opacity.shape
    ntx = (width + tile - 1) // tile
    g_means = np.zeros((nviews, ng, 2))
    g_conics = np.zeros((nviews, ng, 3))
    g_opacity = np.zeros((nviews, ng))
    g_colors = np.zeros((nviews, ng, 3))
    buf_i = np.zeros(ng, dtype=np.int32)
    buf_a = np.zeros(ng)
    buf_t = np.zeros(ng)
    buf_e = np.zeros(ng)
    buf_dx = np.zeros(ng)
    buf_dy = np.zeros(ng)
    buf_clamped = np.zeros(ng, dtype=np.bool_)
    for v in range(nviews):
        for py in range(height):
            y = py + 0.5
            for px in range(width):
                gr = upstream[v, py, px, 0]
                gg = upstream[v, py, px, 1]
                gb = upstream[v, py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                x = px + 0.5
                tid = (py // tile) * ntx + px // tile
                trans = 1.0
                n = 0
                for k in range(counts[v, tid]):
                    i = lists[v, tid, k]
                    dx = x - means2d[v, i, 0]
                    dy = y - means2d[v, i, 1]
                    power = 0.5 * (conics[v, i, 0] * dx * dx + conics[v, i, 2] * dy * dy) \
                        + conics[v, i, 1] * dx * dy
                    if power > cull_power:
                        continue
                    if trans < min_transmittance:
                        break
                    e = np.exp(-power)
                    alpha = opacity[v, i] * e
                    clamped = alpha > alpha_max
                    if clamped:
                        alpha = alpha_max
                    buf_i[n] = i
                    buf_a[n] = alpha
                    buf_t[n] = trans
                    buf_e[n] = e
                    buf_dx[n] = dx
                    buf_dy[n] = dy
                    buf_clamped[n] = clamped
                    n += 1
                    trans *= 1.0 - alpha
                # colour accumulated behind the current Gaussian
                sr = 0.0
                sg = 0.0
                sb = 0.0
                for m in range(n - 1, -1, -1):
                    i = buf_i[m]
                    alpha = buf_a[m]
                    tr = buf_t[m]
                    w = alpha * tr
                    g_colors[v, i, 0] += gr * w
                    g_colors[v, i, 1] += gg * w
                    g_colors[v, i, 2] += gb * w
                    inv = 1.0 / (1.0 - alpha)
                    d_alpha = gr * (colors[i, 0] * tr - sr * inv) \
                        + gg * (colors[i, 1] * tr - sg * inv) \
                        + gb * (colors[i, 2] * tr - sb * inv)
                    sr += colors[i, 0] * w
                    sg += colors[i, 1] * w
                    sb += colors[i, 2] * w
                    if buf_clamped[m]:
                        continue
                    g_opacity[v, i] += d_alpha * buf_e[m]
                    d_power = -d_alpha * alpha
                    dx = buf_dx[m]
                    dy = buf_dy[m]
                    a = conics[v, i, 0]
                    bb = conics[v, i, 1]
                    c = conics[v, i, 2]
                    g_means[v, i, 0] -= d_power * (a * dx + bb * dy)
                    g_means[v, i, 1] -= d_power * (bb * dx + c * dy)
                    g_conics[v, i, 0] += d_power * 0.5 * dx * dx
                    g_conics[v, i, 1] += d_power * dx * dy
                    g_conics[v, i, 2] += d_power * 0.5 * dy * dy
    return g_means, g_conics, g_opacity, g_colors
