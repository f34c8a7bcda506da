"""Tile-binned alpha compositing kernels (numba).

Splats arrive sorted front to back. Every tile owns a contiguous slice of the
binned id list; the backward pass writes per-(tile, splat) gradient slots so
tiles never share an output location and the final per-splat reduction runs
in a fixed order.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

TILE = 16

# per-entry gradient slot layout
G_MX, G_MY, G_CA, G_CB, G_CC, G_R, G_G, G_B, G_OP = range(9)
N_SLOTS = 9


@njit(cache=True)
def bin_splats(means2d, radii, width, height, tile):
    """Per-tile ranges into a flat id list, preserving input (depth) order.

    Radii must be finite; callers clamp "unbounded" footprints to the image size.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n = means2d.shape[0]
    rects = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(tiles_x * tiles_y, dtype=np.int64)
    for i in range(n):
        r = radii[i]
        if not r > 0:
            rects[i, 0] = 0
            rects[i, 1] = -1
            rects[i, 2] = 0
            rects[i, 3] = -1
            continue
        x0 = max(0, int(math.floor((means2d[i, 0] - r) / tile)))
        x1 = min(tiles_x - 1, int(math.floor((means2d[i, 0] + r) / tile)))
        y0 = max(0, int(math.floor((means2d[i, 1] - r) / tile)))
        y1 = min(tiles_y - 1, int(math.floor((means2d[i, 1] + r) / tile)))
        rects[i, 0] = x0
        rects[i, 1] = x1
        rects[i, 2] = y0
        rects[i, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tiles_x + tx] += 1
    ranges = np.zeros((tiles_x * tiles_y, 2), dtype=np.int64)
    total = 0
    for t in range(tiles_x * tiles_y):
        ranges[t, 0] = total
        total += counts[t]
        ranges[t, 1] = ranges[t, 0]
    ids = np.empty(total, dtype=np.int64)
    for i in range(n):
        for ty in range(rects[i, 2], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 1] + 1):
                t = ty * tiles_x + tx
                ids[ranges[t, 1]] = i
                ranges[t, 1] += 1
    return ranges, ids


@njit(cache=True, parallel=True)
def composite_forward(means2d, conics, colors, opacities, depths, ranges, ids,
                      width, height, tile, background, far, power_cut, t_min):
    """Front-to-back compositing.

    ``power_cut[i]`` is log(min_alpha / opacity_i): exponents below it would
    give a contribution under the alpha cutoff and are skipped.

    Returns rgb (H, W, 3), transmittance (H, W), depth (H, W), per-pixel end
    position into ``ids`` (for the backward pass) and the dominant splat per
    pixel (largest blending weight, -1 when uncovered).
    """
    tiles_x = (width + tile - 1) // tile
    n_tiles = ranges.shape[0]
    rgb = np.empty((height, width, 3))
    trans = np.ones((height, width))
    depth = np.empty((height, width))
    n_end = np.zeros((height, width), dtype=np.int64)
    dominant = np.full((height, width), -1, dtype=np.int64)
    for t in prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        start = ranges[t, 0]
        end = ranges[t, 1]
        for row in range(ty * tile, min((ty + 1) * tile, height)):
            py = row + 0.5
            for col in range(tx * tile, min((tx + 1) * tile, width)):
                px = col + 0.5
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                dz = 0.0
                wmax = 0.0
                dom = -1
                last = start
                for j in range(start, end):
                    i = ids[j]
                    dx = px - means2d[i, 0]
                    dy = py - means2d[i, 1]
                    power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                    if power > 0.0 or power < power_cut[i]:
                        continue
                    alpha = opacities[i] * math.exp(power)
                    w = alpha * T
                    cr += w * colors[i, 0]
                    cg += w * colors[i, 1]
                    cb += w * colors[i, 2]
                    dz += w * depths[i]
                    if w > wmax:
                        wmax = w
                        dom = i
                    T = T * (1.0 - alpha)
                    last = j + 1
                    if T < t_min:
                        break
                rgb[row, col, 0] = cr + T * background[0]
                rgb[row, col, 1] = cg + T * background[1]
                rgb[row, col, 2] = cb + T * background[2]
                trans[row, col] = T
                acc = 1.0 - T
                depth[row, col] = dz / acc if acc > 0.0 else far
                n_end[row, col] = last
                dominant[row, col] = dom
    return rgb, trans, depth, n_end, dominant


@njit(cache=True, parallel=True)
def composite_backward(means2d, conics, colors, opacities, ranges, ids, n_end,
                       width, height, tile, background, power_cut, grad_rgb):
    """Gradients of a scalar loss w.r.t. per-splat 2D quantities.

    Output has one row per entry of ``ids`` with the slot layout given by the
    ``G_*`` constants; the caller reduces rows onto splats.
    """
    tiles_x = (width + tile - 1) // tile
    n_tiles = ranges.shape[0]
    out = np.zeros((ids.shape[0], N_SLOTS))
    for t in prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        start = ranges[t, 0]
        cap = ranges[t, 1] - start
        a_buf = np.empty(cap)
        g_buf = np.empty(cap)
        t_buf = np.empty(cap)
        j_buf = np.empty(cap, dtype=np.int64)
        for row in range(ty * tile, min((ty + 1) * tile, height)):
            py = row + 0.5
            for col in range(tx * tile, min((tx + 1) * tile, width)):
                px = col + 0.5
                stop = n_end[row, col]
                T = 1.0
                k = 0
                for j in range(start, stop):
                    i = ids[j]
                    dx = px - means2d[i, 0]
                    dy = py - means2d[i, 1]
                    power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                    if power > 0.0 or power < power_cut[i]:
                        continue
                    G = math.exp(power)
                    alpha = opacities[i] * G
                    a_buf[k] = alpha
                    g_buf[k] = G
                    t_buf[k] = T
                    j_buf[k] = j
                    k += 1
                    T = T * (1.0 - alpha)
                gr = grad_rgb[row, col, 0]
                gg = grad_rgb[row, col, 1]
                gb = grad_rgb[row, col, 2]
                # colour of everything behind the current splat, composited onto the background
                br = background[0]
                bg_ = background[1]
                bb = background[2]
                for m in range(k - 1, -1, -1):
                    j = j_buf[m]
                    i = ids[j]
                    alpha = a_buf[m]
                    Tm = t_buf[m]
                    w = alpha * Tm
                    out[j, G_R] += w * gr
                    out[j, G_G] += w * gg
                    out[j, G_B] += w * gb
                    dl_dalpha = Tm * (gr * (colors[i, 0] - br) + gg * (colors[i, 1] - bg_) + gb * (colors[i, 2] - bb))
                    br = colors[i, 0] * alpha + (1.0 - alpha) * br
                    bg_ = colors[i, 1] * alpha + (1.0 - alpha) * bg_
                    bb = colors[i, 2] * alpha + (1.0 - alpha) * bb
                    out[j, G_OP] += dl_dalpha * g_buf[m]
                    dl_dpower = dl_dalpha * alpha
                    dx = px - means2d[i, 0]
                    dy = py - means2d[i, 1]
                    out[j, G_MX] += dl_dpower * (conics[i, 0] * dx + conics[i, 1] * dy)
                    out[j, G_MY] += dl_dpower * (conics[i, 1] * dx + conics[i, 2] * dy)
                    out[j, G_CA] += -0.5 * dl_dpower * dx * dx
                    out[j, G_CB] += -dl_dpower * dx * dy
                    out[j, G_CC] += -0.5 * dl_dpower * dy * dy
    return out


@njit(cache=True)
def reduce_slots(slots, ids, n):
    """Sum entry gradients onto splats in entry order."""
    out = np.zeros((n, slots.shape[1]))
    for j in range(ids.shape[0]):
        i = ids[j]
        for c in range(slots.shape[1]):
            out[i, c] += slots[j, c]
    return out
