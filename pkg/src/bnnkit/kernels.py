"""Hot numeric kernels, each in a numba and a pure-numpy build.

The active build is chosen at import time by :mod:`bnnkit.accel`. Both
builds are kept importable so the benchmark can compare them; use
``get_impl(name, backend)`` to fetch a specific one.

Bit conventions (shared with :mod:`bnnkit.binarize`): a sign vector is
packed 64 elements per ``uint64`` word, LSB first, bit 1 for +1 and bit 0
for -1. Tail bits past the valid length are zero.

Patch/column layout for convolutions: ``im2col`` of an NCHW tensor yields
one row per output position, ``(n * OH + oy) * OW + ox``, and one column
per kernel element, ``(c * kh + ky) * kw + kx`` (input channel outermost).
Weight tensors flattened C-order per filter match this column order.
"""

import numpy as np

from bnnkit.accel import NUMBA_ENABLED

# ---------------------------------------------------------------------------
# numpy builds
# ---------------------------------------------------------------------------


def _conv_out_extent(extent, k, stride, pad):
    return (extent + 2 * pad - k) // stride + 1


def _im2col_np(x, kh, kw, stride, pad, pad_value=0.0):
    n, c, h, w = x.shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(w, kw, stride, pad)
    if pad > 0:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), pad_value, dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, :, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride]
            cols[:, :, :, :, ky, kx] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * kh * kw)


def _col2im_np(cols, xshape, kh, kw, stride, pad):
    n, c, h, w = xshape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(w, kw, stride, pad)
    cols6 = cols.reshape(n, oh, ow, c, kh, kw)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            xp[:, :, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride] += (
                cols6[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            )
    if pad > 0:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


def _pack_rows_np(bits):
    r, length = bits.shape
    nwords = (length + 63) // 64
    padded = np.zeros((r, nwords * 64), dtype=np.uint8)
    padded[:, :length] = bits
    packed_bytes = np.packbits(padded, axis=1, bitorder="little")
    return packed_bytes.view("<u8")


def _unpack_rows_np(words, length):
    as_bytes = words.astype("<u8", copy=False).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")
    return bits[:, :length]


def _xnor_gemm_np(a_words, b_words, nbits, out=None):
    r = a_words.shape[0]
    f = b_words.shape[0]
    if out is None:
        out = np.empty((r, f), dtype=np.int64)
    # Chunk the R axis so the (chunk, F, W) XOR buffer stays small.
    chunk = max(1, (1 << 22) // max(1, f * a_words.shape[1] * 8))
    for lo in range(0, r, chunk):
        hi = min(r, lo + chunk)
        diff = np.bitwise_count(a_words[lo:hi, None, :] ^ b_words[None, :, :]).sum(
            axis=2, dtype=np.int64
        )
        out[lo:hi] = nbits - 2 * diff
    return out


def _xnor_dot_words_np(a_words, b_words, nbits):
    diff = int(np.bitwise_count(a_words ^ b_words).sum())
    return nbits - 2 * diff


# Fused elementwise ops for the training loop. The numpy builds spell the
# math out in whole-array passes; the numba builds do one pass and keep
# reductions in float64.


def _sign_mask_closed_np(x):
    s = np.ones_like(x)
    np.negative(s, where=x < 0, out=s)
    m = (np.abs(x) <= 1.0).astype(x.dtype)
    return s, m


def _prelu_fwd_np(x, alpha):
    al = alpha.reshape((1, -1) + (1,) * (x.ndim - 2))
    return np.where(x > 0, x, al * x)


def _prelu_bwd_np(x, g, alpha):
    al = alpha.reshape((1, -1) + (1,) * (x.ndim - 2))
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    pos = x > 0
    gx = np.where(pos, g, al * g)
    galpha = np.where(pos, 0.0, g * x).sum(axis=axes)
    return gx, galpha


def _bn_fwd_train_np(x, gamma, beta, eps):
    c = x.shape[1]
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    y = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
    return y.astype(x.dtype, copy=False), mu, var


def _bn_bwd_train_np(x, g, gamma, mu, inv_std):
    n, c, h, w = x.shape
    m = n * h * w
    xhat = (x - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    gbeta = g.sum(axis=(0, 2, 3))
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gxhat = g * gamma.reshape(1, c, 1, 1)
    s1 = (gamma * gbeta).reshape(1, c, 1, 1)
    s2 = (gamma * ggamma).reshape(1, c, 1, 1)
    dx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gxhat - s1 - xhat * s2)
    return dx.astype(x.dtype, copy=False), ggamma, gbeta


def _crop_resize_np(images, crop_y, crop_x, crop_h, crop_w, out_h, out_w):
    b, c, h, w = images.shape
    ii = np.arange(out_h, dtype=np.float32)
    jj = np.arange(out_w, dtype=np.float32)
    fy = crop_y[:, None] + (ii[None, :] + 0.5) * crop_h[:, None] / out_h - 0.5
    fx = crop_x[:, None] + (jj[None, :] + 0.5) * crop_w[:, None] / out_w - 0.5
    # clamp to the box so upsampling never bleeds past the crop edge
    fy = np.clip(fy, crop_y[:, None], crop_y[:, None] + crop_h[:, None] - 1.0)
    fx = np.clip(fx, crop_x[:, None], crop_x[:, None] + crop_w[:, None] - 1.0)
    fy = np.clip(fy, 0.0, h - 1.0)
    fx = np.clip(fx, 0.0, w - 1.0)
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (fy - y0).astype(np.float32)
    wx = (fx - x0).astype(np.float32)

    bi = np.arange(b)[:, None, None]
    y0b, y1b = y0[:, :, None], y1[:, :, None]
    x0b, x1b = x0[:, None, :], x1[:, None, :]
    # advanced indexing puts the gathered (B,H,W) first, channels last
    p00 = images[bi, :, y0b, x0b]
    p01 = images[bi, :, y0b, x1b]
    p10 = images[bi, :, y1b, x0b]
    p11 = images[bi, :, y1b, x1b]
    wyb = wy[:, :, None, None]
    wxb = wx[:, None, :, None]
    top = p00 * (1 - wxb) + p01 * wxb
    bot = p10 * (1 - wxb) + p11 * wxb
    out = top * (1 - wyb) + bot * wyb
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


# Benchmark bodies. The rotating row index keeps the loop from being
# hoisted as invariant; checksum return keeps it from being eliminated.


def _bench_xnor_np(a_rows, b_words, nbits, reps):
    acc = 0
    r = a_rows.shape[0]
    for i in range(reps):
        acc += _xnor_dot_words_np(a_rows[i % r], b_words, nbits)
    return acc


def _bench_f32_dot_np(a_rows, b, reps):
    acc = 0.0
    r = a_rows.shape[0]
    for i in range(reps):
        acc += float(np.dot(a_rows[i % r], b))
    return acc


# ---------------------------------------------------------------------------
# numba builds
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    from numba import njit

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad, pad_value=0.0):
        n, c, h, w = x.shape
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        cols = np.empty((n * oh * ow, c * kh * kw), dtype=x.dtype)
        # output positions whose whole receptive field is in bounds skip
        # the border checks
        oy_lo = (pad + stride - 1) // stride
        oy_hi = (h - kh + pad) // stride
        ox_lo = (pad + stride - 1) // stride
        ox_hi = (w - kw + pad) // stride
        for img in range(n):
            for oy in range(oh):
                y0 = oy * stride - pad
                y_in = oy_lo <= oy <= oy_hi
                for ox in range(ow):
                    row = (img * oh + oy) * ow + ox
                    x0 = ox * stride - pad
                    if y_in and ox_lo <= ox <= ox_hi:
                        for ch in range(c):
                            base = ch * kh * kw
                            for ky in range(kh):
                                cb = base + ky * kw
                                yy = y0 + ky
                                for kx in range(kw):
                                    cols[row, cb + kx] = x[img, ch, yy, x0 + kx]
                    else:
                        for ch in range(c):
                            base = ch * kh * kw
                            for ky in range(kh):
                                cb = base + ky * kw
                                yy = y0 + ky
                                if yy < 0 or yy >= h:
                                    for kx in range(kw):
                                        cols[row, cb + kx] = pad_value
                                else:
                                    for kx in range(kw):
                                        xx = x0 + kx
                                        if 0 <= xx < w:
                                            cols[row, cb + kx] = x[img, ch, yy, xx]
                                        else:
                                            cols[row, cb + kx] = pad_value
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad):
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        dx = np.zeros((n, c, h, w), dtype=cols.dtype)
        oy_lo = (pad + stride - 1) // stride
        oy_hi = (h - kh + pad) // stride
        ox_lo = (pad + stride - 1) // stride
        ox_hi = (w - kw + pad) // stride
        for img in range(n):
            for oy in range(oh):
                y0 = oy * stride - pad
                y_in = oy_lo <= oy <= oy_hi
                for ox in range(ow):
                    row = (img * oh + oy) * ow + ox
                    x0 = ox * stride - pad
                    if y_in and ox_lo <= ox <= ox_hi:
                        for ch in range(c):
                            base = ch * kh * kw
                            for ky in range(kh):
                                cb = base + ky * kw
                                yy = y0 + ky
                                for kx in range(kw):
                                    dx[img, ch, yy, x0 + kx] += cols[row, cb + kx]
                    else:
                        for ch in range(c):
                            base = ch * kh * kw
                            for ky in range(kh):
                                yy = y0 + ky
                                if yy < 0 or yy >= h:
                                    continue
                                cb = base + ky * kw
                                for kx in range(kw):
                                    xx = x0 + kx
                                    if 0 <= xx < w:
                                        dx[img, ch, yy, xx] += cols[row, cb + kx]
        return dx

    @njit(cache=True, inline="always")
    def _popcount64(v):
        v = v - ((v >> np.uint64(1)) & np.uint64(0x5555555555555555))
        v = (v & np.uint64(0x3333333333333333)) + (
            (v >> np.uint64(2)) & np.uint64(0x3333333333333333)
        )
        v = (v + (v >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
        return (v * np.uint64(0x0101010101010101)) >> np.uint64(56)

    @njit(cache=True)
    def _pack_rows_nb(bits):
        r, length = bits.shape
        nwords = (length + 63) // 64
        words = np.zeros((r, nwords), dtype=np.uint64)
        for i in range(r):
            for j in range(length):
                if bits[i, j]:
                    words[i, j >> 6] |= np.uint64(1) << np.uint64(j & 63)
        return words

    @njit(cache=True)
    def _unpack_rows_nb(words, length):
        r = words.shape[0]
        bits = np.empty((r, length), dtype=np.uint8)
        for i in range(r):
            for j in range(length):
                bits[i, j] = np.uint8(
                    (words[i, j >> 6] >> np.uint64(j & 63)) & np.uint64(1)
                )
        return bits

    @njit(cache=True)
    def _xnor_gemm_nb(a_words, b_words, nbits, out):
        r, nw = a_words.shape
        f = b_words.shape[0]
        for i in range(r):
            for j in range(f):
                diff = np.uint64(0)
                for k in range(nw):
                    diff += _popcount64(a_words[i, k] ^ b_words[j, k])
                out[i, j] = nbits - 2 * np.int64(diff)
        return out

    def _xnor_gemm_nb_wrap(a_words, b_words, nbits, out=None):
        if out is None:
            out = np.empty((a_words.shape[0], b_words.shape[0]), dtype=np.int64)
        return _xnor_gemm_nb(a_words, b_words, nbits, out)

    @njit(cache=True)
    def _xnor_dot_words_nb(a_words, b_words, nbits):
        diff = np.uint64(0)
        for k in range(a_words.shape[0]):
            diff += _popcount64(a_words[k] ^ b_words[k])
        return nbits - 2 * np.int64(diff)

    @njit(cache=True)
    def _bench_xnor_nb(a_rows, b_words, nbits, reps):
        acc = np.int64(0)
        r = a_rows.shape[0]
        nw = a_rows.shape[1]
        for i in range(reps):
            row = i % r
            diff = np.uint64(0)
            for k in range(nw):
                diff += _popcount64(a_rows[row, k] ^ b_words[k])
            acc += nbits - 2 * np.int64(diff)
        return acc

    @njit(cache=True)
    def _bench_f32_dot_nb(a_rows, b, reps):
        acc = np.float64(0.0)
        r = a_rows.shape[0]
        n = a_rows.shape[1]
        for i in range(reps):
            row = i % r
            s = np.float32(0.0)
            for k in range(n):
                s += a_rows[row, k] * b[k]
            acc += s
        return acc

    @njit(cache=True)
    def _sign_mask_closed_nb_flat(x):
        s = np.empty_like(x)
        m = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            s[i] = -1.0 if v < 0 else 1.0
            m[i] = 1.0 if (v >= -1.0 and v <= 1.0) else 0.0
        return s, m

    def _sign_mask_closed_nb_wrap(x):
        flat = np.ascontiguousarray(x).reshape(-1)
        s, m = _sign_mask_closed_nb_flat(flat)
        return s.reshape(x.shape), m.reshape(x.shape)

    @njit(cache=True)
    def _prelu_fwd_nb(x, alpha):
        n, c, h, w = x.shape
        y = np.empty_like(x)
        for i in range(n):
            for ch in range(c):
                a = alpha[ch]
                for yy in range(h):
                    for xx in range(w):
                        v = x[i, ch, yy, xx]
                        y[i, ch, yy, xx] = v if v > 0 else a * v
        return y

    @njit(cache=True)
    def _prelu_bwd_nb(x, g, alpha):
        n, c, h, w = x.shape
        gx = np.empty_like(x)
        galpha = np.zeros(c, dtype=np.float64)
        for i in range(n):
            for ch in range(c):
                a = alpha[ch]
                acc = 0.0
                for yy in range(h):
                    for xx in range(w):
                        v = x[i, ch, yy, xx]
                        gg = g[i, ch, yy, xx]
                        if v > 0:
                            gx[i, ch, yy, xx] = gg
                        else:
                            gx[i, ch, yy, xx] = a * gg
                            acc += gg * v
                galpha[ch] += acc
        return gx, galpha

    def _as4d(x):
        return x if x.ndim == 4 else x.reshape(x.shape + (1, 1))

    def _prelu_fwd_nb_wrap(x, alpha):
        y = _prelu_fwd_nb(_as4d(x), alpha)
        return y.reshape(x.shape)

    def _prelu_bwd_nb_wrap(x, g, alpha):
        gx, galpha = _prelu_bwd_nb(_as4d(x), _as4d(g), alpha)
        return gx.reshape(x.shape), galpha

    @njit(cache=True)
    def _bn_fwd_train_nb(x, gamma, beta, eps):
        n, c, h, w = x.shape
        m = n * h * w
        mu = np.zeros(c, dtype=np.float64)
        for i in range(n):
            for ch in range(c):
                s = 0.0
                for yy in range(h):
                    for xx in range(w):
                        s += x[i, ch, yy, xx]
                mu[ch] += s
        mu /= m
        var = np.zeros(c, dtype=np.float64)
        for i in range(n):
            for ch in range(c):
                s = 0.0
                for yy in range(h):
                    for xx in range(w):
                        d = x[i, ch, yy, xx] - mu[ch]
                        s += d * d
                var[ch] += s
        var /= m
        y = np.empty_like(x)
        for ch in range(c):
            istd = 1.0 / np.sqrt(var[ch] + eps)
            ga = gamma[ch] * istd
            be = beta[ch] - gamma[ch] * mu[ch] * istd
            for i in range(n):
                for yy in range(h):
                    for xx in range(w):
                        y[i, ch, yy, xx] = ga * x[i, ch, yy, xx] + be
        return y, mu, var

    def _bn_fwd_train_nb_wrap(x, gamma, beta, eps):
        y, mu, var = _bn_fwd_train_nb(x, gamma, beta, eps)
        return (y, mu.astype(x.dtype, copy=False),
                var.astype(x.dtype, copy=False))

    @njit(cache=True)
    def _bn_bwd_train_nb(x, g, gamma, mu, inv_std):
        n, c, h, w = x.shape
        m = n * h * w
        gbeta = np.zeros(c, dtype=np.float64)
        ggamma = np.zeros(c, dtype=np.float64)
        for i in range(n):
            for ch in range(c):
                sb = 0.0
                sg = 0.0
                for yy in range(h):
                    for xx in range(w):
                        gg = g[i, ch, yy, xx]
                        sb += gg
                        sg += gg * (x[i, ch, yy, xx] - mu[ch]) * inv_std[ch]
                gbeta[ch] += sb
                ggamma[ch] += sg
        gx = np.empty_like(x)
        for ch in range(c):
            ga = gamma[ch]
            istd = inv_std[ch]
            s1 = ga * gbeta[ch]
            s2 = ga * ggamma[ch]
            for i in range(n):
                for yy in range(h):
                    for xx in range(w):
                        xhat = (x[i, ch, yy, xx] - mu[ch]) * istd
                        gx[i, ch, yy, xx] = (istd / m) * (
                            m * ga * g[i, ch, yy, xx] - s1 - xhat * s2)
        return gx, ggamma, gbeta

    def _bn_bwd_train_nb_wrap(x, g, gamma, mu, inv_std):
        gx, ggamma, gbeta = _bn_bwd_train_nb(x, g, gamma, mu, inv_std)
        return (gx, ggamma.astype(x.dtype, copy=False),
                gbeta.astype(x.dtype, copy=False))

    @njit(cache=True)
    def _crop_resize_nb(images, crop_y, crop_x, crop_h, crop_w, out_h, out_w):
        b, c, h, w = images.shape
        out = np.empty((b, c, out_h, out_w), dtype=images.dtype)
        half = np.float32(0.5)
        one = np.float32(1.0)
        for i in range(b):
            cy, cx = crop_y[i], crop_x[i]
            chh, cww = crop_h[i], crop_w[i]
            y_edge = min(cy + chh - one, np.float32(h) - one)
            x_edge = min(cx + cww - one, np.float32(w) - one)
            for oy in range(out_h):
                fy = cy + (np.float32(oy) + half) * chh / np.float32(out_h) - half
                fy = min(max(max(fy, cy), np.float32(0.0)), y_edge)
                y0 = int(np.floor(fy))
                y1 = min(y0 + 1, h - 1)
                wy = fy - np.float32(y0)
                for ox in range(out_w):
                    fx = cx + (np.float32(ox) + half) * cww / np.float32(out_w) - half
                    fx = min(max(max(fx, cx), np.float32(0.0)), x_edge)
                    x0 = int(np.floor(fx))
                    x1 = min(x0 + 1, w - 1)
                    wx = fx - np.float32(x0)
                    for ch in range(c):
                        p00 = images[i, ch, y0, x0]
                        p01 = images[i, ch, y0, x1]
                        p10 = images[i, ch, y1, x0]
                        p11 = images[i, ch, y1, x1]
                        top = p00 * (one - wx) + p01 * wx
                        bot = p10 * (one - wx) + p11 * wx
                        out[i, ch, oy, ox] = top * (one - wy) + bot * wy
        return out


def _col2im_nb_wrap(cols, xshape, kh, kw, stride, pad):
    n, c, h, w = xshape
    return _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_IMPLS = {
    "numpy": {
        "im2col": _im2col_np,
        "col2im": _col2im_np,
        "pack_rows": _pack_rows_np,
        "unpack_rows": _unpack_rows_np,
        "xnor_gemm": _xnor_gemm_np,
        "xnor_dot_words": _xnor_dot_words_np,
        "bench_xnor": _bench_xnor_np,
        "bench_f32_dot": _bench_f32_dot_np,
        "sign_mask_closed": _sign_mask_closed_np,
        "prelu_fwd": _prelu_fwd_np,
        "prelu_bwd": _prelu_bwd_np,
        "bn_fwd_train": _bn_fwd_train_np,
        "bn_bwd_train": _bn_bwd_train_np,
        "crop_resize": _crop_resize_np,
    }
}

if NUMBA_ENABLED:
    _IMPLS["numba"] = {
        "im2col": _im2col_nb,
        "col2im": _col2im_nb_wrap,
        "pack_rows": _pack_rows_nb,
        "unpack_rows": _unpack_rows_nb,
        "xnor_gemm": _xnor_gemm_nb_wrap,
        "xnor_dot_words": _xnor_dot_words_nb,
        "bench_xnor": _bench_xnor_nb,
        "bench_f32_dot": _bench_f32_dot_nb,
        "sign_mask_closed": _sign_mask_closed_nb_wrap,
        "prelu_fwd": _prelu_fwd_nb_wrap,
        "prelu_bwd": _prelu_bwd_nb_wrap,
        "bn_fwd_train": _bn_fwd_train_nb_wrap,
        "bn_bwd_train": _bn_bwd_train_nb_wrap,
        "crop_resize": _crop_resize_nb,
    }


def get_impl(name, backend):
    """Fetch a specific kernel build ('numba' or 'numpy')."""
    try:
        return _IMPLS[backend][name]
    except KeyError:
        raise KeyError(f"no kernel {name!r} for backend {backend!r}") from None


def available_backends():
    """Kernel builds present in this process, fastest first."""
    return tuple(b for b in ("numba", "numpy") if b in _IMPLS)


_ACTIVE = _IMPLS["numba"] if NUMBA_ENABLED else _IMPLS["numpy"]

im2col = _ACTIVE["im2col"]
col2im = _ACTIVE["col2im"]
pack_rows = _ACTIVE["pack_rows"]
unpack_rows = _ACTIVE["unpack_rows"]
xnor_gemm = _ACTIVE["xnor_gemm"]
xnor_dot_words = _ACTIVE["xnor_dot_words"]
sign_mask_closed = _ACTIVE["sign_mask_closed"]
prelu_fwd = _ACTIVE["prelu_fwd"]
prelu_bwd = _ACTIVE["prelu_bwd"]
bn_fwd_train = _ACTIVE["bn_fwd_train"]
bn_bwd_train = _ACTIVE["bn_bwd_train"]
crop_resize = _ACTIVE["crop_resize"]
