"""Pure-NumPy reference implementations of the hot kernels.

Each function here has a numba twin in `numba_impl` with the same signature
and semantics (agreement is asserted in tests to 1e-12). Everything is
float64 in, float64 out, no hidden state.
"""

import numpy as np


def concentration_loss_grad(gamma: np.ndarray, pos_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch class-concentration loss and its gradient w.r.t. unit-norm rows.

    gamma    (n, m): row-normalized representations.
    pos_mask (n, n): uint8, pos_mask[i, j] = 1 if j is a positive for anchor i
                     (diagonal must be 0). Rows with no positives are skipped.

    Per anchor i: mean over positives p of -s(i,p), plus the log of the mean
    of exp(s(i,d)) over the n-1 other rows. Result is averaged over anchors
    that have at least one positive. Cosine similarities lie in [-1, 1], so
    no max-shift is needed before exp.
    """
    n = gamma.shape[0]
    sims = gamma @ gamma.T
    exps = np.exp(sims)
    mask = pos_mask.astype(np.float64)

    denom = exps.sum(axis=1) - np.diagonal(exps)        # sum over d != i
    npos = mask.sum(axis=1)
    valid = npos > 0
    nvalid = int(valid.sum())
    if nvalid == 0:
        return 0.0, np.zeros_like(gamma)

    pos_mean = np.zeros(n)
    pos_mean[valid] = (mask * sims).sum(axis=1)[valid] / npos[valid]
    per_anchor = -pos_mean + np.log(denom / (n - 1))
    loss = float(per_anchor[valid].mean())

    # d(loss)/d(sims): -w/npos on positives, +w*exp/denom on every d != i.
    # Rows without positives contribute nothing (their mask row is zero).
    w = 1.0 / nvalid
    dsims = np.where(valid[:, None], exps / denom[:, None] * w, 0.0)
    np.fill_diagonal(dsims, 0.0)
    dsims -= mask * (w / np.maximum(npos[:, None], 1.0))

    dgamma = dsims @ gamma + dsims.T @ gamma
    return loss, dgamma


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, C) raster with bilinear interpolation (align-corners)."""
    h, w, c = img.shape
    if out_h == h and out_w == w:
        return img.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def im2col(x: np.ndarray, n: int, h: int, w: int, c: int, kh: int, kw: int) -> np.ndarray:
    """Unfold (n, h*w*c) row-major rasters into (n*oh*ow, kh*kw*c) patches.

    Valid convolution windows: oh = h-kh+1, ow = w-kw+1. Patch layout is
    (dy, dx, channel), matching a filter matrix of shape (kh*kw*c, f).
    """
    imgs = x.reshape(n, h, w, c)
    oh = h - kh + 1
    ow = w - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(imgs, (kh, kw), axis=(1, 2))
    # windows: (n, oh, ow, c, kh, kw) -> (n, oh, ow, kh, kw, c)
    patches = windows.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(patches.reshape(n * oh * ow, kh * kw * c))


def col2im_add(cols: np.ndarray, n: int, h: int, w: int, c: int, kh: int, kw: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch gradients back to (n, h*w*c)."""
    oh = h - kh + 1
    ow = w - kw + 1
    grads = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h, w, c))
    for dy in range(kh):
        for dx in range(kw):
            out[:, dy:dy + oh, dx:dx + ow, :] += grads[:, :, :, dy, dx, :]
    return out.reshape(n, h * w * c)
