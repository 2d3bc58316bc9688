"""Numba @njit twins of the hot kernels in `numpy_impl`.

Same signatures, same math. Loops are written so the floating-point
operation order matches the vectorized NumPy path elementwise; tests pin
agreement to 1e-12. Compiled artifacts are disk-cached, so only the first
call in a fresh environment pays the JIT cost.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def concentration_loss_grad(gamma, pos_mask):
    n, m = gamma.shape
    sims = gamma @ gamma.T
    exps = np.exp(sims)

    denom = np.empty(n)
    npos = np.empty(n)
    nvalid = 0
    for i in range(n):
        s = 0.0
        k = 0.0
        for j in range(n):
            s += exps[i, j]
            k += pos_mask[i, j]
        denom[i] = s - exps[i, i]
        npos[i] = k
        if k > 0:
            nvalid += 1
    if nvalid == 0:
        return 0.0, np.zeros_like(gamma)

    loss = 0.0
    for i in range(n):
        if npos[i] > 0:
            pos_sum = 0.0
            for j in range(n):
                if pos_mask[i, j]:
                    pos_sum += sims[i, j]
            loss += -pos_sum / npos[i] + np.log(denom[i] / (n - 1))
    loss /= nvalid

    w = 1.0 / nvalid
    dsims = np.zeros((n, n))
    for i in range(n):
        if npos[i] > 0:
            for j in range(n):
                if j != i:
                    dsims[i, j] = exps[i, j] / denom[i] * w
            for j in range(n):
                if pos_mask[i, j]:
                    dsims[i, j] -= w / npos[i]
    dgamma = dsims @ gamma + dsims.T @ gamma
    return loss, dgamma


@njit(cache=True)
def bilinear_resize(img, out_h, out_w):
    h, w, c = img.shape
    if out_h == h and out_w == w:
        return img.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    out = np.empty((out_h, out_w, c))
    for i in range(out_h):
        y0 = int(np.floor(ys[i]))
        y1 = min(y0 + 1, h - 1)
        fy = ys[i] - y0
        for j in range(out_w):
            x0 = int(np.floor(xs[j]))
            x1 = min(x0 + 1, w - 1)
            fx = xs[j] - x0
            for k in range(c):
                top = img[y0, x0, k] * (1 - fx) + img[y0, x1, k] * fx
                bot = img[y1, x0, k] * (1 - fx) + img[y1, x1, k] * fx
                out[i, j, k] = top * (1 - fy) + bot * fy
    return out


@njit(cache=True)
def im2col(x, n, h, w, c, kh, kw):
    oh = h - kh + 1
    ow = w - kw + 1
    imgs = x.reshape(n, h, w, c)
    cols = np.empty((n * oh * ow, kh * kw * c))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                p = 0
                for dy in range(kh):
                    for dx in range(kw):
                        for ch in range(c):
                            cols[row, p] = imgs[b, i + dy, j + dx, ch]
                            p += 1
    return cols


@njit(cache=True)
def col2im_add(cols, n, h, w, c, kh, kw):
    oh = h - kh + 1
    ow = w - kw + 1
    out = np.zeros((n, h, w, c))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                p = 0
                for dy in range(kh):
                    for dx in range(kw):
                        for ch in range(c):
                            out[b, i + dy, j + dx, ch] += cols[row, p]
                            p += 1
    return out.reshape(n, h * w * c)
