"""Binarization ops: sign with straight-through gradients, channel-scaled
weight binarization, bit packing, and XNOR-popcount arithmetic.

Conventions. sign(0) = +1 everywhere. The straight-through masks differ
by role: activations pass gradient on the closed interval |x| <= 1,
latent weights on the open interval |w| < 1. The weight gradient is the
masked upstream gradient and nothing else; the channel scale is treated
as a constant in backward.

Packed layout: 64 signs per uint64 word, LSB first, bit 1 for +1. Rows
are the leading logical dims, bits the flattened trailing dims in C
order (so a conv filter packs input-channel-major, matching im2col
columns). Tail bits of the last word are zero and excluded from every
count through the stored valid length.
"""

from dataclasses import dataclass, field

import numpy as np

from bnnkit import kernels
from bnnkit.autograd import Tensor, masked_grad


def sign_array(x):
    """Elementwise sign with sign(0) = +1, dtype preserved."""
    out = np.ones_like(x)
    np.negative(out, where=x < 0, out=out)
    return out


class LatentWeight:
    """Real-valued shadow weights behind a binary layer.

    Updates land on `real`; the forward pass consumes the binarized
    view from :func:`binarize_weights`. Axis 0 is the output channel.
    """

    def __init__(self, data, requires_grad=True):
        data = np.asarray(data)
        if data.ndim < 2 or data[0].size < 1:
            raise ValueError("latent weight needs shape (out_channels, ...) with n >= 1 per channel")
        self.real = Tensor(data, requires_grad=requires_grad)

    @property
    def shape(self):
        return self.real.data.shape

    @property
    def channel_size(self):
        return self.real.data[0].size

    @property
    def per_channel_scale(self):
        """alpha_c = mean |W_r| over channel c (l1 norm / n)."""
        d = self.real.data
        return np.abs(d).reshape(d.shape[0], -1).mean(axis=1)

    def binarized(self):
        return binarize_weights(self)


def sign_ste(x):
    """Binarize a tensor of activations to {-1, +1}.

    Backward passes the upstream gradient where |x| <= 1 and zeroes it
    outside (clipped straight-through).
    """
    sign, mask = kernels.sign_mask_closed(x.data)
    return masked_grad(x, sign, mask)


def binarize_weights(w):
    """Binarized view alpha_c * sign(W_r) of latent weights.

    Accepts a LatentWeight or a raw Tensor with channel axis 0. The
    gradient reaching W_r is the upstream gradient masked by |W_r| < 1,
    with no contribution through alpha.
    """
    real = w.real if isinstance(w, LatentWeight) else w
    d = real.data
    alpha = np.abs(d).reshape(d.shape[0], -1).mean(axis=1)
    fwd = sign_array(d) * alpha.reshape((-1,) + (1,) * (d.ndim - 1))
    mask = (np.abs(d) < 1.0).astype(d.dtype)
    return masked_grad(real, fwd.astype(d.dtype, copy=False), mask)


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------


class BitTensor:
    """Sign tensor packed 64 values per word. Immutable once built."""

    __slots__ = ("words", "shape", "valid_length")

    def __init__(self, words, shape, valid_length):
        self.words = words
        self.shape = tuple(shape)
        self.valid_length = int(valid_length)

    @property
    def nrows(self):
        return self.words.shape[0]

    @property
    def nbytes(self):
        return self.words.nbytes

    def __repr__(self):
        return f"BitTensor(shape={self.shape}, valid_length={self.valid_length})"


def pack(x, leading=None):
    """Pack a strictly-±1 array into a BitTensor.

    `leading` counts the dims kept as rows; the rest flatten to the bit
    axis in C order. Defaults to 1 for matrices and up (one row per
    leading index), 0 for vectors (a single row).
    """
    x = np.asarray(x)
    if not np.all(np.abs(x) == 1):
        raise ValueError("pack expects values in {-1, +1} only")
    if leading is None:
        leading = 1 if x.ndim >= 2 else 0
    rows = int(np.prod(x.shape[:leading], dtype=np.int64)) if leading else 1
    length = x.size // rows
    bits = np.ascontiguousarray((x.reshape(rows, length) > 0).astype(np.uint8))
    return BitTensor(kernels.pack_rows(bits), x.shape, length)


def unpack(b, dtype=np.float32):
    """Back to a ±1 array of the original logical shape."""
    bits = kernels.unpack_rows(b.words, b.valid_length)
    return (bits.astype(dtype) * 2 - 1).reshape(b.shape)


def xnor_dot(a, b):
    """Integer dot product of two packed sign vectors.

    Computes n - 2*popcount(a XOR b), which equals the float dot of the
    unpacked ±1 vectors exactly. Both sides must be single packed rows
    of equal valid length.
    """
    if a.valid_length != b.valid_length:
        raise ValueError(f"length mismatch: {a.valid_length} vs {b.valid_length}")
    if a.nrows != 1 or b.nrows != 1:
        raise ValueError("xnor_dot takes single packed rows")
    return int(kernels.xnor_dot_words(a.words[0], b.words[0], a.valid_length))


def xnor_matmul(a, b):
    """(R, F) integer products between two packed row sets."""
    if a.valid_length != b.valid_length:
        raise ValueError(f"length mismatch: {a.valid_length} vs {b.valid_length}")
    return kernels.xnor_gemm(a.words, b.words, a.valid_length)


def binary_conv2d_infer(x, w, scale, stride=1, padding=0):
    """Inference conv on packed operands via XNOR-popcount.

    `x` is a BitTensor with logical NCHW shape (a raw ±1 array is also
    accepted), `w` a BitTensor of filters packed one row each over
    (C, kh, kw), `scale` the per-filter alpha. Padding inserts -1, the
    only representable neutral in sign algebra. The integer products are
    exact; `scale` applies one float multiply at the end.
    """
    if isinstance(x, BitTensor):
        xr = unpack(x)
    else:
        xr = np.asarray(x, dtype=np.float32)
    f, c, kh, kw = w.shape
    n, cx, h, wd = xr.shape
    if cx != c:
        raise ValueError(f"channel mismatch: input {cx} vs filters {c}")
    if w.valid_length != c * kh * kw:
        raise ValueError("filter pack layout must be one row per filter")
    scale = np.asarray(scale, dtype=np.float32)
    if scale.shape != (f,):
        raise ValueError(f"scale must have shape ({f},)")
    cols = kernels.im2col(xr, kh, kw, stride, padding, pad_value=-1.0)
    bits = np.ascontiguousarray((cols > 0).astype(np.uint8))
    packed_cols = kernels.pack_rows(bits)
    ints = kernels.xnor_gemm(packed_cols, w.words, c * kh * kw)
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = ints.astype(np.float32) * scale[None, :]
    return np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@dataclass
class SaturationStats:
    """Where the STE mask kills gradients, and how large latents run.

    `activation_fractions[name]` is the fraction of pre-sign inputs with
    |a| >= 1 at that sign site. `weight_l1_means[name]` is the
    per-channel mean |W_r| of that binary conv.
    """

    activation_fractions: dict = field(default_factory=dict)
    weight_l1_means: dict = field(default_factory=dict)

    def rows(self):
        """Flat (kind, layer, value) rows, CSV-friendly."""
        out = [("activation_sat", k, v) for k, v in self.activation_fractions.items()]
        for k, vec in self.weight_l1_means.items():
            out.append(("weight_l1_mean", k, float(np.mean(vec))))
        return out


def saturation_fraction(pre_sign):
    """Fraction of entries the activation STE mask would zero."""
    a = np.asarray(pre_sign)
    return float((np.abs(a) >= 1.0).mean())


def saturation_report(model, batch):
    """Run `batch` through `model` and collect saturation statistics.

    The model must expose `presign_activations(batch)` yielding
    (name, array) pairs of inputs to each sign site, and
    `channel_l1_means()` yielding (name, per-channel vector) for each
    latent conv weight.
    """
    stats = SaturationStats()
    for name, arr in model.presign_activations(batch):
        stats.activation_fractions[name] = saturation_fraction(arr)
    for name, vec in model.channel_l1_means():
        stats.weight_l1_means[name] = np.asarray(vec)
    return stats
