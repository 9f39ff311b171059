"""Datasets and the two-view augmentation pipeline.

Loaders decode IDX and CIFAR binary files byte-exactly and a synthetic
generator fabricates a 10-class striped-texture dataset for desk-scale
runs. Images are float32 C x H x W in [0, 1].

Augmentation follows the usual two-view recipe: random resized crop,
horizontal flip, color jitter, grayscale, gaussian blur. The `lite`
variant only lowers the jitter and blur probabilities (0.8 -> 0.6,
0.5 -> 0.2). Parameters are drawn per image from an rng keyed by
(seed, epoch, index, view), so the augmented sample for a given index
never depends on iteration order; the heavy pixel work is applied
batched.

Label isolation: PretrainStream is constructed from the image array
alone and can only yield view pairs. Labels exist only on the handle,
for evaluation code.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from bnnkit import kernels
from bnnkit.errors import ConfigError, FormatError

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

_YIQ = np.array([
    [0.299, 0.587, 0.114],
    [0.595716, -0.274453, -0.321263],
    [0.211456, -0.522591, 0.311135],
], dtype=np.float32)
_YIQ_INV = np.linalg.inv(_YIQ).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation config and parameters
# ---------------------------------------------------------------------------


@dataclass
class AugConfig:
    """Probabilities and strengths of the view pipeline."""

    variant: str = "lite"
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (3.0 / 4.0, 4.0 / 3.0)
    flip_p: float = 0.5
    jitter_p: float = 0.6
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: float = 0.2
    blur_sigma: tuple = (0.1, 2.0)

    def __post_init__(self):
        for name in ("flip_p", "jitter_p", "grayscale_p", "blur_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {p}")

    @classmethod
    def vanilla(cls):
        return cls(variant="vanilla", jitter_p=0.8, blur_p=0.5)

    @classmethod
    def lite(cls):
        return cls(variant="lite", jitter_p=0.6, blur_p=0.2)

    @classmethod
    def named(cls, variant):
        if variant == "vanilla":
            return cls.vanilla()
        if variant == "lite":
            return cls.lite()
        raise ConfigError(f"unknown augmentation variant {variant!r}")

    @classmethod
    def identity(cls):
        """Pipeline that returns the input unchanged (for tests)."""
        return cls(variant="lite", crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0),
                   flip_p=0.0, jitter_p=0.0, grayscale_p=0.0, blur_p=0.0)


@dataclass
class AugParams:
    """Per-image draw of every stochastic choice, as parallel arrays."""

    crop_y: np.ndarray
    crop_x: np.ndarray
    crop_h: np.ndarray
    crop_w: np.ndarray
    flip: np.ndarray
    jitter: np.ndarray
    f_bright: np.ndarray
    f_contrast: np.ndarray
    f_sat: np.ndarray
    f_hue: np.ndarray
    gray: np.ndarray
    blur: np.ndarray
    sigma: np.ndarray


def _sample_crop(rng, h, w, scale, ratio):
    """torchvision-style crop box; 10 tries then center fallback."""
    area = h * w
    log_lo, log_hi = np.log(ratio[0]), np.log(ratio[1])
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        r = np.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(np.sqrt(target * r)))
        ch = int(round(np.sqrt(target / r)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def sample_params(cfg, rng, h, w):
    """One image's worth of augmentation decisions."""
    top, left, ch, cw = _sample_crop(rng, h, w, cfg.crop_scale, cfg.crop_ratio)
    flip = rng.random() < cfg.flip_p
    jitter = rng.random() < cfg.jitter_p
    f_b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    f_c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    f_s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    f_h = rng.uniform(-cfg.hue, cfg.hue)
    gray = rng.random() < cfg.grayscale_p
    blur = rng.random() < cfg.blur_p
    sigma = rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1])
    return (top, left, ch, cw, flip, jitter, f_b, f_c, f_s, f_h, gray, blur, sigma)


def _params_from_rows(rows):
    cols = list(zip(*rows))
    return AugParams(
        crop_y=np.array(cols[0], dtype=np.float32),
        crop_x=np.array(cols[1], dtype=np.float32),
        crop_h=np.array(cols[2], dtype=np.float32),
        crop_w=np.array(cols[3], dtype=np.float32),
        flip=np.array(cols[4], dtype=bool),
        jitter=np.array(cols[5], dtype=bool),
        f_bright=np.array(cols[6], dtype=np.float32),
        f_contrast=np.array(cols[7], dtype=np.float32),
        f_sat=np.array(cols[8], dtype=np.float32),
        f_hue=np.array(cols[9], dtype=np.float32),
        gray=np.array(cols[10], dtype=bool),
        blur=np.array(cols[11], dtype=bool),
        sigma=np.array(cols[12], dtype=np.float32),
    )


# ---------------------------------------------------------------------------
# batched pixel work
# ---------------------------------------------------------------------------


def _crop_resize_batch(images, params, out_h, out_w):
    """Bilinear crop-and-resize with per-image boxes."""
    return kernels.crop_resize(
        np.ascontiguousarray(images), params.crop_y, params.crop_x,
        params.crop_h, params.crop_w, out_h, out_w)


def _jitter_batch(x, params):
    """brightness -> contrast -> saturation -> hue, fixed order."""
    m = params.jitter
    if not m.any():
        return x
    sel = x[m]
    fb = params.f_bright[m][:, None, None, None]
    fc = params.f_contrast[m][:, None, None, None]
    fs = params.f_sat[m][:, None, None, None]
    sel = sel * fb
    gray = np.einsum("c,bchw->bhw", LUMA, sel)[:, None]
    mean_gray = gray.mean(axis=(2, 3), keepdims=True)
    sel = sel * fc + mean_gray * (1 - fc)
    gray = np.einsum("c,bchw->bhw", LUMA, sel)[:, None]
    sel = sel * fs + gray * (1 - fs)
    angle = params.f_hue[m] * 2.0 * np.pi
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    yiq = np.einsum("rc,bchw->brhw", _YIQ, sel)
    y_ch = yiq[:, 0]
    i_ch = yiq[:, 1] * cos_a[:, None, None] - yiq[:, 2] * sin_a[:, None, None]
    q_ch = yiq[:, 1] * sin_a[:, None, None] + yiq[:, 2] * cos_a[:, None, None]
    rot = np.stack([y_ch, i_ch, q_ch], axis=1)
    sel = np.einsum("rc,bchw->brhw", _YIQ_INV, rot)
    x = x.copy()
    x[m] = np.clip(sel, 0.0, 1.0)
    return x


def _grayscale_batch(x, params):
    m = params.gray
    if not m.any():
        return x
    x = x.copy()
    gray = np.einsum("c,bchw->bhw", LUMA, x[m])
    x[m] = gray[:, None, :, :]
    return x


def _blur_batch(x, params):
    """Separable 3-tap gaussian with reflect borders, per-image sigma."""
    m = params.blur
    if not m.any():
        return x
    sel = x[m]
    k1 = np.exp(-0.5 / np.maximum(params.sigma[m] ** 2, 1e-12)).astype(np.float32)
    norm = 1.0 + 2.0 * k1
    k0 = (1.0 / norm)[:, None, None, None]
    k1 = (k1 / norm)[:, None, None, None]
    pad = np.pad(sel, ((0, 0), (0, 0), (1, 1), (0, 0)), mode="reflect")
    sel = k0 * pad[:, :, 1:-1] + k1 * (pad[:, :, :-2] + pad[:, :, 2:])
    pad = np.pad(sel, ((0, 0), (0, 0), (0, 0), (1, 1)), mode="reflect")
    sel = k0 * pad[:, :, :, 1:-1] + k1 * (pad[:, :, :, :-2] + pad[:, :, :, 2:])
    x = x.copy()
    x[m] = sel
    return x


def apply_params_batch(images, params, out_hw=None):
    """Run the full pipeline for pre-drawn parameters."""
    h = out_hw or images.shape[2]
    w = out_hw or images.shape[3]
    x = _crop_resize_batch(images, params, h, w)
    if params.flip.any():
        x[params.flip] = x[params.flip, :, :, ::-1]
    x = _jitter_batch(x, params)
    x = _grayscale_batch(x, params)
    x = _blur_batch(x, params)
    return np.clip(x, 0.0, 1.0, out=x)


def augment(image, cfg, rng):
    """One stochastic view of one C x H x W image."""
    batch = image[None]
    rows = [sample_params(cfg, rng, image.shape[1], image.shape[2])]
    return apply_params_batch(batch.astype(np.float32), _params_from_rows(rows))[0]


def two_views(image, cfg, rng):
    """Two independent augmentations of the same image."""
    return augment(image, cfg, rng), augment(image, cfg, rng)


# single-image primitives, mostly exercised by tests


def random_resized_crop(image, cfg, rng):
    rows = [sample_params(cfg, rng, image.shape[1], image.shape[2])]
    p = _params_from_rows(rows)
    return _crop_resize_batch(image[None].astype(np.float32), p,
                              image.shape[1], image.shape[2])[0]


def hflip(image):
    return np.ascontiguousarray(image[:, :, ::-1])


def color_jitter(image, f_bright, f_contrast, f_sat, f_hue):
    rows = [(0, 0, image.shape[1], image.shape[2], False, True,
             f_bright, f_contrast, f_sat, f_hue, False, False, 1.0)]
    return _jitter_batch(image[None].astype(np.float32), _params_from_rows(rows))[0]


def gaussian_blur(image, sigma):
    rows = [(0, 0, image.shape[1], image.shape[2], False, False,
             1.0, 1.0, 1.0, 0.0, False, True, sigma)]
    return _blur_batch(image[None].astype(np.float32), _params_from_rows(rows))[0]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetHandle:
    images: np.ndarray               # (N, 3, H, W) float32 in [0,1]
    labels: np.ndarray               # (N,) int64, or None
    source_format: str
    mean: np.ndarray = None            # per-channel, over the split
    std: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = self.images.mean(axis=(0, 2, 3)).astype(np.float32)
        if self.std is None:
            std = self.images.std(axis=(0, 2, 3)).astype(np.float32)
            self.std = np.maximum(std, 1e-4)

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def has_labels(self):
        return self.labels is not None

    def normalize(self, x):
        return (x - self.mean[:, None, None]) / self.std[:, None, None]

    def subset(self, n, seed=0):
        """Deterministic subsample without replacement."""
        if n >= self.n:
            return self
        idx = np.random.default_rng([seed, 4242]).permutation(self.n)[:n]
        labels = self.labels[idx] if self.has_labels else None
        return DatasetHandle(self.images[idx], labels, self.source_format,
                             self.mean, self.std)

    def pretrain_stream(self, cfg, seed, batch_size):
        """View-pair iterator; labels never cross this boundary."""
        return PretrainStream(self.images, cfg, seed, batch_size,
                              self.mean, self.std)

    def labeled_batches(self, batch_size, shuffle_seed=None):
        """(normalized images, labels) for evaluation code."""
        if not self.has_labels:
            raise ConfigError("dataset has no labels; evaluation needs them")
        order = np.arange(self.n)
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(self.n)
        for lo in range(0, self.n, batch_size):
            idx = order[lo : lo + batch_size]
            yield self.normalize(self.images[idx]), self.labels[idx]


class PretrainStream:
    """Epoch iterator over augmented view pairs. Holds no labels.

    The parameter draw for (index, view) comes from an rng seeded with
    (seed, epoch, index, view): reproducible regardless of batch size
    or iteration order.
    """

    def __init__(self, images, cfg, seed, batch_size, mean, std):
        self.images = images
        self.cfg = cfg
        self.seed = int(seed)
        self.batch_size = int(batch_size)
        self.mean = mean
        self.std = std

    @property
    def n(self):
        return self.images.shape[0]

    def batches_per_epoch(self):
        return (self.n + self.batch_size - 1) // self.batch_size

    def _view(self, idx, epoch, view):
        h, w = self.images.shape[2], self.images.shape[3]
        rows = [
            sample_params(self.cfg, np.random.default_rng([self.seed, epoch, int(i), view]), h, w)
            for i in idx
        ]
        out = apply_params_batch(self.images[idx], _params_from_rows(rows))
        return (out - self.mean[:, None, None]) / self.std[:, None, None]

    def epoch(self, e):
        order = np.random.default_rng([self.seed, e, 777]).permutation(self.n)
        for lo in range(0, self.n, self.batch_size):
            idx = order[lo : lo + self.batch_size]
            yield self._view(idx, e, 1), self._view(idx, e, 2)

    def epoch_single_view(self, e):
        """Only the first view, for distill-only training."""
        order = np.random.default_rng([self.seed, e, 777]).permutation(self.n)
        for lo in range(0, self.n, self.batch_size):
            idx = order[lo : lo + self.batch_size]
            yield self._view(idx, e, 1)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
CIFAR_RECORD = 3073


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated while reading {what}", offset=f.tell())
    return data


def read_idx(path):
    """One IDX file as a numpy array (big-endian dims, ubyte payload)."""
    with open(path, "rb") as f:
        head = _read_exact(f, 4, "magic")
        if head[0] != 0 or head[1] != 0:
            raise FormatError(f"bad IDX magic prefix {head[:2].hex()}", offset=0)
        if head[2] != 0x08:
            raise FormatError(f"unsupported IDX dtype 0x{head[2]:02x}", offset=2)
        ndim = head[3]
        if ndim < 1 or ndim > 4:
            raise FormatError(f"unsupported IDX rank {ndim}", offset=3)
        dims = struct.unpack(f">{ndim}I", _read_exact(f, 4 * ndim, "dims"))
        count = int(np.prod(dims, dtype=np.int64))
        payload = _read_exact(f, count, "payload")
        extra = f.read(1)
        if extra:
            raise FormatError("trailing bytes after payload", offset=f.tell() - 1)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(path):
    """IDX images (+ labels when a sibling labels file exists).

    `path` may be the images file or a directory holding one file with
    'images' and optionally one with 'labels' in its name. Grayscale
    images are replicated to 3 channels.
    """
    if os.path.isdir(path):
        names = sorted(os.listdir(path))
        img_names = [n for n in names if "images" in n]
        lab_names = [n for n in names if "labels" in n]
        if not img_names:
            raise FormatError(f"no IDX images file in {path}")
        img_path = os.path.join(path, img_names[0])
        lab_path = os.path.join(path, lab_names[0]) if lab_names else None
    else:
        img_path = path
        guess = path.replace("images", "labels").replace("idx3", "idx1")
        lab_path = guess if guess != path and os.path.exists(guess) else None

    raw = read_idx(img_path)
    if raw.ndim == 3:
        imgs = raw[:, None, :, :].astype(np.float32) / 255.0
        imgs = np.repeat(imgs, 3, axis=1)
    elif raw.ndim == 4:
        imgs = raw.astype(np.float32) / 255.0
    else:
        raise FormatError(f"IDX images need rank 3 or 4, got {raw.ndim}", offset=3)
    labels = None
    if lab_path:
        lab = read_idx(lab_path)
        if lab.ndim != 1 or lab.shape[0] != imgs.shape[0]:
            raise FormatError(f"labels shape {lab.shape} does not match {imgs.shape[0]} images")
        labels = lab.astype(np.int64)
    return DatasetHandle(np.ascontiguousarray(imgs), labels, "idx")


def load_cifar_bin(path):
    """CIFAR-10 binary batches: per record one label byte + 3072 pixels."""
    if os.path.isdir(path):
        files = sorted(os.path.join(path, n) for n in os.listdir(path) if n.endswith(".bin"))
        if not files:
            raise FormatError(f"no .bin files in {path}")
    else:
        files = [path]
    images, labels = [], []
    for fp in files:
        blob = open(fp, "rb").read()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD != 0:
            raise FormatError(
                f"{os.path.basename(fp)}: size {len(blob)} not a multiple of {CIFAR_RECORD}",
                offset=len(blob) - (len(blob) % CIFAR_RECORD))
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0]
        if lab.max() > 9:
            bad = int(np.argmax(lab > 9))
            raise FormatError(f"label byte {lab[bad]} out of range", offset=bad * CIFAR_RECORD)
        labels.append(lab.astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return DatasetHandle(np.ascontiguousarray(np.concatenate(images)),
                         np.concatenate(labels), "cifar-bin")


def make_synthetic(n, n_classes=10, seed=0, hw=32):
    """Striped-texture classes: orientation, frequency and palette carry
    the class; phase, slight angle/frequency jitter and noise vary per
    image. Deterministic in (n, n_classes, seed, hw)."""
    class_rng = np.random.default_rng([seed, 11])
    angles = class_rng.uniform(0, np.pi, n_classes)
    freqs = class_rng.uniform(2.0, 6.0, n_classes)
    pal_a = class_rng.uniform(0.1, 0.9, (n_classes, 3))
    pal_b = class_rng.uniform(0.1, 0.9, (n_classes, 3))
    # keep the two palette colors apart so stripes always show
    far = np.abs(pal_a - pal_b).sum(axis=1) < 0.6
    pal_b[far] = 1.0 - pal_a[far]

    inst = np.random.default_rng([seed, 22])
    labels = inst.integers(0, n_classes, n).astype(np.int64)
    phase = inst.uniform(0, 2 * np.pi, n).astype(np.float32)
    dang = inst.normal(0, 0.06, n).astype(np.float32)
    dfreq = inst.normal(1.0, 0.05, n).astype(np.float32)
    noise = inst.normal(0, 0.08, (n, 3, hw, hw)).astype(np.float32)

    yy, xx = np.meshgrid(np.arange(hw, dtype=np.float32),
                         np.arange(hw, dtype=np.float32), indexing="ij")
    ang = angles[labels] + dang
    f = freqs[labels] * dfreq
    proj = (xx[None] * np.cos(ang)[:, None, None] +
            yy[None] * np.sin(ang)[:, None, None])
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * f[:, None, None] * proj / hw +
                              phase[:, None, None])
    a = pal_a[labels][:, :, None, None].astype(np.float32)
    b = pal_b[labels][:, :, None, None].astype(np.float32)
    imgs = wave[:, None] * a + (1.0 - wave[:, None]) * b + noise
    imgs = np.clip(imgs, 0.0, 1.0).astype(np.float32)
    return DatasetHandle(imgs, labels, "synthetic")


def _parse_synth_spec(spec):
    out = {"n": 1000, "classes": 10, "seed": 0, "hw": 32}
    if spec:
        for part in spec.split(","):
            if not part:
                continue
            key, _, val = part.partition("=")
            if key not in out:
                raise ConfigError(f"unknown synthetic dataset key {key!r}")
            out[key] = int(val)
    return out


def load_dataset(path, fmt):
    """Dispatch on format: idx | cifar | synth.

    For synth, `path` is an inline spec like "n=2000,seed=1" instead of
    a file path.
    """
    if fmt == "idx":
        return load_idx(path)
    if fmt == "cifar":
        return load_cifar_bin(path)
    if fmt == "synth":
        kw = _parse_synth_spec(path)
        return make_synthetic(kw["n"], kw["classes"], kw["seed"], kw["hw"])
    raise ConfigError(f"unknown dataset format {fmt!r}")


# writers, for fixtures and round-trip tests


def write_idx_images(path, images_u8):
    """(N, H, W) uint8 to an IDX3 file."""
    n, h, w = images_u8.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_MAGIC_IMAGES))
        f.write(struct.pack(">3I", n, h, w))
        f.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_MAGIC_LABELS))
        f.write(struct.pack(">I", len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def write_cifar_bin(path, images_u8, labels):
    """(N, 3, 32, 32) uint8 + labels to one CIFAR binary batch."""
    n = images_u8.shape[0]
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images_u8.reshape(n, -1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())
