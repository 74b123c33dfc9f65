"""Pure-numpy warp kernels; reference semantics for the compiled ``_kernels``.

Conventions shared by both implementations:

* pixel ``(x, y)`` sits at integer coordinates; a position is inside the image
  when ``0 <= x <= w - 1`` and ``0 <= y <= h - 1``;
* bilinear sampling clips the base index to ``n - 2`` so the right/bottom
  neighbour always exists (weight 0 at the exact last row/column);
* splatting deposits onto the four surrounding integer pixels, dropping the
  corners that fall outside the image or carry zero weight.
"""
from __future__ import annotations

import numpy as np


def _corner(p: np.ndarray, n: int):
    if n == 1:
        z = np.zeros(p.shape, dtype=np.intp)
        return z, z, np.zeros(p.shape)
    b = np.minimum(np.floor(p).astype(np.intp), n - 2)
    return b, b + 1, p - b


def _in_bounds(px, py, w, h):
    return (px >= 0.0) & (py >= 0.0) & (px <= w - 1) & (py <= h - 1)


def _bilinear(plane: np.ndarray, y0, y1, x0, x1, fx, fy):
    return (1.0 - fy) * ((1.0 - fx) * plane[..., y0, x0] + fx * plane[..., y0, x1]) \
        + fy * ((1.0 - fx) * plane[..., y1, x0] + fx * plane[..., y1, x1])


def compose_step(pos_x, pos_y, valid, flow):
    h, w = pos_x.shape
    live = valid.astype(bool)
    live &= _in_bounds(pos_x, pos_y, w, h)
    valid[...] = live
    ys, xs = np.nonzero(live)
    px = pos_x[ys, xs]
    py = pos_y[ys, xs]
    x0, x1, fx = _corner(px, w)
    y0, y1, fy = _corner(py, h)
    u = _bilinear(flow[..., 0], y0, y1, x0, x1, fx, fy)
    v = _bilinear(flow[..., 1], y0, y1, x0, x1, fx, fy)
    pos_x[ys, xs] = px + u
    pos_y[ys, xs] = py + v


def bounds_check(pos_x, pos_y, valid):
    h, w = pos_x.shape
    valid[...] = valid.astype(bool) & _in_bounds(pos_x, pos_y, w, h)


def gather(vol, disp, valid):
    c, h, w = vol.shape
    out = np.zeros((c, h, w), dtype=np.float64)
    gy, gx = np.mgrid[0:h, 0:w]
    px = gx + disp[..., 0]
    py = gy + disp[..., 1]
    ok = valid.astype(bool) & _in_bounds(px, py, w, h)
    ys, xs = np.nonzero(ok)
    x0, x1, fx = _corner(px[ys, xs], w)
    y0, y1, fy = _corner(py[ys, xs], h)
    out[:, ys, xs] = _bilinear(vol, y0, y1, x0, x1, fx, fy)
    return out, ok.astype(np.uint8)


def splat(vol, disp, valid):
    c, h, w = vol.shape
    gy, gx = np.mgrid[0:h, 0:w]
    ys, xs = np.nonzero(valid.astype(bool))
    px = xs + disp[ys, xs, 0]
    py = ys + disp[ys, xs, 1]
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    fx = px - x0
    fy = py - y0
    # (n, 4) corner layout, flattened row-major so accumulation order matches the compiled loop
    cx = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1).ravel()
    cy = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1).ravel()
    cw = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1).ravel()
    src = np.repeat(np.arange(len(ys)), 4)
    keep = (cx >= 0) & (cy >= 0) & (cx < w) & (cy < h) & (cw != 0.0)
    cx, cy, cw, src = cx[keep], cy[keep], cw[keep], src[keep]
    flat = cy * w + cx
    wt = np.zeros(h * w)
    np.add.at(wt, flat, cw)
    out = np.zeros((c, h * w))
    vals = vol[:, ys[src], xs[src]] * cw
    for k in range(c):
        np.add.at(out[k], flat, vals[k])
    return out.reshape(c, h, w), wt.reshape(h, w)


def block_match(a, b, block, radius, candidates):
    h, w, _ = a.shape
    out = np.zeros((h, w, 2), dtype=np.float32)
    for ys in range(0, h, block):
        for xs in range(0, w, block):
            ye, xe = min(ys + block, h), min(xs + block, w)
            best = None
            bd = (0, 0)
            for dx, dy in candidates:
                y_lo, y_hi = max(ys, -dy), min(ye, h - dy)
                x_lo, x_hi = max(xs, -dx), min(xe, w - dx)
                if y_hi <= y_lo or x_hi <= x_lo:
                    continue
                diff = np.abs(a[y_lo:y_hi, x_lo:x_hi] - b[y_lo + dy:y_hi + dy, x_lo + dx:x_hi + dx])
                cost = diff.sum() / ((y_hi - y_lo) * (x_hi - x_lo))
                if best is None or cost < best:
                    best = cost
                    bd = (dx, dy)
            out[ys:ye, xs:xe] = bd
    return out
