"""Compiled inner loops for the layers that do not reduce to a GEMM."""
import numba
import numpy as np


@numba.njit(cache=True)
def maxpool_fwd(x, k, s, ho, wo):
    n, c, _, _ = x.shape
    y = np.empty((n, c, ho, wo), x.dtype)
    am = np.empty((n, c, ho, wo), np.int64)
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[a, b, i * s, j * s]
                    bi = 0
                    for u in range(k):
                        for v in range(k):
                            val = x[a, b, i * s + u, j * s + v]
                            if val > best:
                                best = val
                                bi = u * k + v
                    y[a, b, i, j] = best
                    am[a, b, i, j] = bi
    return y, am


@numba.njit(cache=True)
def maxpool_bwd(dy, am, k, s, h, w):
    n, c, ho, wo = dy.shape
    dx = np.zeros((n, c, h, w), dy.dtype)
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                for j in range(wo):
                    o = am[a, b, i, j]
                    dx[a, b, i * s + o // k, j * s + o % k] += dy[a, b, i, j]
    return dx


@numba.njit(cache=True)
def col2im(dcols, s, hp, wp):
    # dcols: (n, ho, wo, k, k, c) -> padded channels-last gradient (n, hp, wp, c)
    n, ho, wo, k, _, c = dcols.shape
    dx = np.zeros((n, hp, wp, c), dcols.dtype)
    for a in range(n):
        for i in range(ho):
            for j in range(wo):
                for u in range(k):
                    for v in range(k):
                        for q in range(c):
                            dx[a, i * s + u, j * s + v, q] += dcols[a, i, j, u, v, q]
    return dx


@numba.njit(cache=True)
def warp_into(out, image, x0, y0, x1, y1, mean):
    """Bilinear, centre-aligned resample of a box of an HxWx3 image into out (3, oh, ow)."""
    h, w, nc = image.shape
    _, oh, ow = out.shape
    sx = (x1 - x0) / ow
    sy = (y1 - y0) / oh
    xl = np.empty(ow, np.int64)
    xr = np.empty(ow, np.int64)
    fx = np.empty(ow, np.float32)
    for j in range(ow):
        xs = min(max(x0 + (j + 0.5) * sx - 0.5, 0.0), w - 1.0)
        xl[j] = int(np.floor(xs))
        xr[j] = min(xl[j] + 1, w - 1)
        fx[j] = np.float32(xs - xl[j])
    for i in range(oh):
        ys = min(max(y0 + (i + 0.5) * sy - 0.5, 0.0), h - 1.0)
        yl = int(np.floor(ys))
        yr = min(yl + 1, h - 1)
        fy = np.float32(ys - yl)
        for j in range(ow):
            for q in range(nc):
                t0 = np.float32(image[yl, xl[j], q])
                t1 = np.float32(image[yl, xr[j], q])
                b0 = np.float32(image[yr, xl[j], q])
                b1 = np.float32(image[yr, xr[j], q])
                left = t0 + (b0 - t0) * fy
                right = t1 + (b1 - t1) * fy
                out[q, i, j] = left + (right - left) * fx[j] - mean[q]


@numba.njit(cache=True)
def roi_pool_fwd(feat, rois, by, bx):
    # feat is channels-last (H, W, C); bins start at floor(i * L / n) and an
    # empty bin reads the single cell at its start. Output is (N, C, by, bx).
    h, w, c = feat.shape
    n = rois.shape[0]
    out = np.empty((n, by, bx, c), feat.dtype)
    am = np.empty((n, by, bx, c), np.int64)
    for r in range(n):
        x0, y0, x1, y1 = rois[r, 0], rois[r, 1], rois[r, 2], rois[r, 3]
        lh, lw = y1 - y0, x1 - x0
        for i in range(by):
            ys = y0 + (i * lh) // by
            ye = max(y0 + ((i + 1) * lh) // by, ys + 1)
            for j in range(bx):
                xs = x0 + (j * lw) // bx
                xe = max(x0 + ((j + 1) * lw) // bx, xs + 1)
                for q in range(c):
                    out[r, i, j, q] = feat[ys, xs, q]
                    am[r, i, j, q] = ys * w + xs
                for y in range(ys, ye):
                    for x in range(xs, xe):
                        for q in range(c):
                            v = feat[y, x, q]
                            if v > out[r, i, j, q]:
                                out[r, i, j, q] = v
                                am[r, i, j, q] = y * w + x
    return out.transpose(0, 3, 1, 2), am.transpose(0, 3, 1, 2)


@numba.njit(cache=True)
def roi_pool_bwd(dpooled, am, c, h, w):
    n, _, by, bx = dpooled.shape
    dfeat = np.zeros((c, h * w), dpooled.dtype)
    for r in range(n):
        for q in range(c):
            for i in range(by):
                for j in range(bx):
                    dfeat[q, am[r, q, i, j]] += dpooled[r, q, i, j]
    return dfeat.reshape(c, h, w)
