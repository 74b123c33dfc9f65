# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled warp kernels. Same arithmetic as ``_kernels_py``; see that module
for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()


cdef inline bint _in_bounds(double x, double y, Py_ssize_t w, Py_ssize_t h) noexcept nogil:
    return x >= 0.0 and y >= 0.0 and x <= w - 1 and y <= h - 1


cdef inline void _corner(double p, Py_ssize_t n, Py_ssize_t *i0, Py_ssize_t *i1, double *f) noexcept nogil:
    # base index clipped so that i1 stays in range; f in [0, 1]
    cdef Py_ssize_t b
    if n == 1:
        i0[0] = 0
        i1[0] = 0
        f[0] = 0.0
        return
    b = <Py_ssize_t>floor(p)
    if b > n - 2:
        b = n - 2
    i0[0] = b
    i1[0] = b + 1
    f[0] = p - b


def compose_step(double[:, ::1] pos_x, double[:, ::1] pos_y, cnp.uint8_t[:, ::1] valid,
                 double[:, :, ::1] flow):
    cdef Py_ssize_t h = pos_x.shape[0], w = pos_x.shape[1]
    cdef Py_ssize_t y, x, x0, x1, y0, y1
    cdef double px, py, fx, fy, u, v
    with nogil:
        for y in range(h):
            for x in range(w):
                if not valid[y, x]:
                    continue
                px = pos_x[y, x]
                py = pos_y[y, x]
                if not _in_bounds(px, py, w, h):
                    valid[y, x] = 0
                    continue
                _corner(px, w, &x0, &x1, &fx)
                _corner(py, h, &y0, &y1, &fy)
                u = (1.0 - fy) * ((1.0 - fx) * flow[y0, x0, 0] + fx * flow[y0, x1, 0]) \
                    + fy * ((1.0 - fx) * flow[y1, x0, 0] + fx * flow[y1, x1, 0])
                v = (1.0 - fy) * ((1.0 - fx) * flow[y0, x0, 1] + fx * flow[y0, x1, 1]) \
                    + fy * ((1.0 - fx) * flow[y1, x0, 1] + fx * flow[y1, x1, 1])
                pos_x[y, x] = px + u
                pos_y[y, x] = py + v


def bounds_check(double[:, ::1] pos_x, double[:, ::1] pos_y, cnp.uint8_t[:, ::1] valid):
    cdef Py_ssize_t h = pos_x.shape[0], w = pos_x.shape[1]
    cdef Py_ssize_t y, x
    with nogil:
        for y in range(h):
            for x in range(w):
                if valid[y, x] and not _in_bounds(pos_x[y, x], pos_y[y, x], w, h):
                    valid[y, x] = 0


def gather(double[:, :, ::1] vol, double[:, :, ::1] disp, cnp.uint8_t[:, ::1] valid):
    cdef Py_ssize_t c = vol.shape[0], h = vol.shape[1], w = vol.shape[2]
    out_arr = np.zeros((c, h, w), dtype=np.float64)
    ok_arr = np.zeros((h, w), dtype=np.uint8)
    cdef double[:, :, ::1] out = out_arr
    cdef cnp.uint8_t[:, ::1] ok = ok_arr
    cdef Py_ssize_t y, x, k, x0, x1, y0, y1
    cdef double px, py, fx, fy
    with nogil:
        for y in range(h):
            for x in range(w):
                if not valid[y, x]:
                    continue
                px = x + disp[y, x, 0]
                py = y + disp[y, x, 1]
                if not _in_bounds(px, py, w, h):
                    continue
                ok[y, x] = 1
                _corner(px, w, &x0, &x1, &fx)
                _corner(py, h, &y0, &y1, &fy)
                for k in range(c):
                    out[k, y, x] = (1.0 - fy) * ((1.0 - fx) * vol[k, y0, x0] + fx * vol[k, y0, x1]) \
                        + fy * ((1.0 - fx) * vol[k, y1, x0] + fx * vol[k, y1, x1])
    return out_arr, ok_arr


def splat(double[:, :, ::1] vol, double[:, :, ::1] disp, cnp.uint8_t[:, ::1] valid):
    cdef Py_ssize_t c = vol.shape[0], h = vol.shape[1], w = vol.shape[2]
    out_arr = np.zeros((c, h, w), dtype=np.float64)
    wt_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] wt = wt_arr
    cdef Py_ssize_t y, x, k, x0, y0, cx, cy, j
    cdef double px, py, fx, fy, b
    cdef double cw[4]
    cdef Py_ssize_t cxs[4]
    cdef Py_ssize_t cys[4]
    with nogil:
        for y in range(h):
            for x in range(w):
                if not valid[y, x]:
                    continue
                px = x + disp[y, x, 0]
                py = y + disp[y, x, 1]
                x0 = <Py_ssize_t>floor(px)
                y0 = <Py_ssize_t>floor(py)
                fx = px - x0
                fy = py - y0
                cxs[0] = x0; cys[0] = y0; cw[0] = (1.0 - fx) * (1.0 - fy)
                cxs[1] = x0 + 1; cys[1] = y0; cw[1] = fx * (1.0 - fy)
                cxs[2] = x0; cys[2] = y0 + 1; cw[2] = (1.0 - fx) * fy
                cxs[3] = x0 + 1; cys[3] = y0 + 1; cw[3] = fx * fy
                for j in range(4):
                    cx = cxs[j]
                    cy = cys[j]
                    b = cw[j]
                    if cx < 0 or cy < 0 or cx >= w or cy >= h or b == 0.0:
                        continue
                    wt[cy, cx] += b
                    for k in range(c):
                        out[k, cy, cx] += b * vol[k, y, x]
    return out_arr, wt_arr


def block_match(double[:, :, ::1] a, double[:, :, ::1] b, Py_ssize_t block, Py_ssize_t radius,
                cnp.int64_t[:, ::1] candidates):
    """Per-block integer displacement minimising mean absolute difference.

    ``candidates`` is the (n, 2) list of (dx, dy) in tie-break order.
    """
    cdef Py_ssize_t h = a.shape[0], w = a.shape[1], nch = a.shape[2]
    cdef Py_ssize_t nby = (h + block - 1) // block, nbx = (w + block - 1) // block
    out_arr = np.zeros((h, w, 2), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t by, bx, ci, y, x, ch, dx, dy, n, ys, xs, ye, xe, bestdx, bestdy
    cdef double sad, cost, best
    with nogil:
        for by in range(nby):
            for bx in range(nbx):
                ys = by * block
                xs = bx * block
                ye = ys + block if ys + block < h else h
                xe = xs + block if xs + block < w else w
                best = -1.0
                bestdx = 0
                bestdy = 0
                for ci in range(candidates.shape[0]):
                    dx = candidates[ci, 0]
                    dy = candidates[ci, 1]
                    sad = 0.0
                    n = 0
                    for y in range(ys, ye):
                        if y + dy < 0 or y + dy >= h:
                            continue
                        for x in range(xs, xe):
                            if x + dx < 0 or x + dx >= w:
                                continue
                            n += 1
                            for ch in range(nch):
                                sad += fabs(a[y, x, ch] - b[y + dy, x + dx, ch])
                    if n == 0:
                        continue
                    cost = sad / n
                    if best < 0.0 or cost < best:
                        best = cost
                        bestdx = dx
                        bestdy = dy
                for y in range(ys, ye):
                    for x in range(xs, xe):
                        out[y, x, 0] = bestdx
                        out[y, x, 1] = bestdy
    return out_arr
