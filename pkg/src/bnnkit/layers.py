"""Layers and desk-scale backbones.

Binary blocks follow the sign -> conv -> BN -> (shortcut add) -> prelu
order, with the residual shortcut carrying the real-valued activations
around the binary conv. The first conv and every linear layer stay
real-valued.

A backbone has one of three modes: `real` (no binarization anywhere,
the teacher twin), `bin-act-only` (sign-binarized activations, real
weights; step 1 of progressive binarization), and `fully-bin` (signed
activations and channel-scaled sign weights). Binary convs hold latent
real weights in every mode, so a bin-act-only checkpoint loads into a
fully-bin model verbatim.
"""

from dataclasses import dataclass

import numpy as np

from bnnkit import autograd as ag
from bnnkit import binarize as bz
from bnnkit.autograd import Tensor
from bnnkit.errors import ConfigError

MODES = ("real", "bin-act-only", "fully-bin")
ARCHS = ("toy-bin", "bireal-tiny", "teacher-real")


@dataclass
class LayerSpec:
    """Static description of one layer for OPs accounting."""

    kind: str            # real-conv | bin-conv | bn | prelu | sign | pool | linear | shortcut-add
    name: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    mode: str = "real"


class Conv2dLayer:
    """Convolution without bias; real weights or binary latents."""

    def __init__(self, name, cin, cout, k, stride, pad, binary, rng):
        self.name = name
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.pad = stride, pad
        self.binary = binary
        if binary:
            data = rng.uniform(-0.5, 0.5, (cout, cin, k, k)).astype(np.float32)
            self.latent = bz.LatentWeight(data)
        else:
            std = np.sqrt(2.0 / (cin * k * k))
            data = (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
            self.weight = Tensor(data, requires_grad=True)

    @property
    def weight_tensor(self):
        return self.latent.real if self.binary else self.weight

    def forward(self, x, mode, pad_value=0.0):
        if self.binary and mode == "fully-bin":
            w = bz.binarize_weights(self.latent)
        else:
            w = self.weight_tensor
        return ag.conv2d(x, w, stride=self.stride, pad=self.pad, pad_value=pad_value)

    def params(self):
        return [self.weight_tensor]

    def named_tensors(self):
        return {f"{self.name}.w": self.weight_tensor.data}


class BatchNorm2dLayer:
    def __init__(self, name, c):
        self.name = name
        self.c = c
        self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def forward(self, x, training, update_stats=True):
        return ag.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, training=training,
                              update_stats=update_stats)

    def params(self):
        return [self.gamma, self.beta]

    def named_tensors(self):
        return {
            f"{self.name}.gamma": self.gamma.data,
            f"{self.name}.beta": self.beta.data,
            f"{self.name}.rm": self.running_mean,
            f"{self.name}.rv": self.running_var,
        }


class PReLULayer:
    def __init__(self, name, c):
        self.name = name
        self.alpha = Tensor(np.full(c, 0.25, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return ag.prelu(x, self.alpha)

    def params(self):
        return [self.alpha]

    def named_tensors(self):
        return {f"{self.name}.a": self.alpha.data}


class LinearLayer:
    def __init__(self, name, din, dout, rng):
        self.name = name
        self.din, self.dout = din, dout
        std = np.sqrt(2.0 / din)
        self.weight = Tensor((rng.standard_normal((dout, din)) * std).astype(np.float32),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return ag.add(ag.matmul(x, self.weight, transpose_b=True), self.bias)

    def params(self):
        return [self.weight, self.bias]

    def named_tensors(self):
        return {f"{self.name}.w": self.weight.data, f"{self.name}.b": self.bias.data}


class BinBlock:
    """sign -> conv -> BN -> (shortcut add) -> prelu.

    The shortcut, when enabled, is parameter-free: spatial reduction by
    average pooling, channel growth by duplication, applied to the real
    block input.
    """

    def __init__(self, name, cin, cout, stride, shortcut, binary, rng):
        if cout not in (cin, 2 * cin):
            raise ConfigError(f"block {name}: out channels must be x1 or x2 of input")
        self.name = name
        self.cin, self.cout, self.stride = cin, cout, stride
        self.shortcut = shortcut
        self.conv = Conv2dLayer(f"{name}.conv", cin, cout, 3, stride, 1, binary, rng)
        self.bn = BatchNorm2dLayer(f"{name}.bn", cout)
        self.prelu = PReLULayer(f"{name}.prelu", cout)

    def _shortcut_path(self, x):
        s = x
        if self.stride == 2:
            s = ag.avgpool2d(s, 2)
        if self.cout == 2 * self.cin:
            s = ag.concat([s, s], axis=1)
        return s

    def forward(self, x, mode, training, update_stats=True, collect=None):
        if mode == "real":
            a = x
            pad_value = 0.0
        else:
            if collect is not None:
                collect.append((f"{self.name}.sign", x.data))
            a = bz.sign_ste(x)
            # sign activations live in {-1,+1}; the packed inference
            # kernels can only pad with -1, so match that here
            pad_value = -1.0
        y = self.conv.forward(a, mode, pad_value=pad_value)
        y = self.bn.forward(y, training, update_stats)
        if self.shortcut:
            y = ag.add(y, self._shortcut_path(x))
        return self.prelu.forward(y)

    def sublayers(self):
        return [self.conv, self.bn, self.prelu]


class Backbone:
    """Stem conv plus four blocks, pooled to a feature vector.

    Geometry at width w for 3x32x32 input: stem 3->w stride 2, then
    blocks w->w /2, w->2w, 2w->2w /2, 2w->4w. Feature dim 4w.
    """

    def __init__(self, arch, width, mode, seed=0):
        if arch not in ARCHS:
            raise ConfigError(f"unknown arch {arch!r}, expected one of {ARCHS}")
        if width < 8:
            raise ConfigError(f"width must be >= 8, got {width}")
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}, expected one of {MODES}")
        if arch == "teacher-real" and mode != "real":
            raise ConfigError("teacher-real is only built in real mode")
        self.arch = arch
        self.width = width
        self.mode = mode
        self.seed = seed
        self.feature_dim = 4 * width
        w = width
        rng = np.random.default_rng([seed, 101])
        binary = arch != "teacher-real"
        shortcut = arch == "bireal-tiny"
        self.stem = Conv2dLayer("stem.conv", 3, w, 3, 2, 1, binary=False, rng=rng)
        self.stem_bn = BatchNorm2dLayer("stem.bn", w)
        self.stem_prelu = PReLULayer("stem.prelu", w)
        self.blocks = [
            BinBlock("b1", w, w, 2, shortcut, binary, rng),
            BinBlock("b2", w, 2 * w, 1, shortcut, binary, rng),
            BinBlock("b3", 2 * w, 2 * w, 2, shortcut, binary, rng),
            BinBlock("b4", 2 * w, 4 * w, 1, shortcut, binary, rng),
        ]

    def features(self, x, training=False, update_stats=True, collect=None):
        if not isinstance(x, Tensor):
            x = Tensor(np.ascontiguousarray(x, dtype=np.float32))
        y = self.stem.forward(x, "real")
        y = self.stem_bn.forward(y, training, update_stats)
        y = self.stem_prelu.forward(y)
        for blk in self.blocks:
            y = blk.forward(y, self.mode, training, update_stats, collect)
        return ag.global_avgpool(y)

    def _layers(self):
        out = [self.stem, self.stem_bn, self.stem_prelu]
        for blk in self.blocks:
            out.extend(blk.sublayers())
        return out

    def params(self):
        out = []
        for layer in self._layers():
            out.extend(layer.params())
        return out

    def param_count(self):
        return sum(p.data.size for p in self.params())

    def named_tensors(self):
        out = {}
        for layer in self._layers():
            out.update(layer.named_tensors())
        return out

    def load_named(self, tensors, strict=True):
        """Assign stored arrays back into parameters/buffers, verbatim."""
        own = self.named_tensors()
        missing = [k for k in own if k not in tensors]
        if strict and missing:
            raise ConfigError(f"checkpoint missing tensors: {missing[:4]}...")
        for name, dst in own.items():
            if name in tensors:
                src = tensors[name]
                if src.shape != dst.shape:
                    raise ConfigError(f"{name}: shape {src.shape} != expected {dst.shape}")
                dst[...] = src

    def presign_activations(self, batch):
        """Pre-sign arrays per block, for saturation reporting."""
        collect = []
        with ag.no_grad():
            self.features(batch, training=False, update_stats=False, collect=collect)
        if not collect:
            raise ConfigError("model has no sign sites in real mode")
        return collect

    def channel_l1_means(self):
        out = []
        for blk in self.blocks:
            if blk.conv.binary:
                out.append((blk.conv.name, blk.conv.latent.per_channel_scale))
        return out

    def layer_specs(self):
        conv_kind = "real-conv" if self.mode == "real" else "bin-conv"
        specs = [
            LayerSpec("real-conv", "stem.conv", 3, self.width, 3, 2, 1, "real"),
            LayerSpec("bn", "stem.bn", self.width, self.width),
            LayerSpec("prelu", "stem.prelu", self.width, self.width),
        ]
        for blk in self.blocks:
            if self.mode != "real":
                specs.append(LayerSpec("sign", f"{blk.name}.sign", blk.cin, blk.cin, mode=self.mode))
            specs.append(LayerSpec(conv_kind, blk.conv.name, blk.cin, blk.cout,
                                   3, blk.stride, 1, self.mode))
            specs.append(LayerSpec("bn", blk.bn.name, blk.cout, blk.cout))
            if blk.shortcut:
                specs.append(LayerSpec("shortcut-add", f"{blk.name}.add", blk.cout, blk.cout))
            specs.append(LayerSpec("prelu", blk.prelu.name, blk.cout, blk.cout))
        specs.append(LayerSpec("pool", "gap", 4 * self.width, 4 * self.width))
        return specs


class ProjectionHead:
    """Two-layer MLP head; normalized for contrast, raw for distillation."""

    def __init__(self, in_dim, out_dim=64, hidden=None, rng=None, name="head"):
        rng = rng or np.random.default_rng(0)
        hidden = hidden or in_dim
        self.name = name
        self.fc1 = LinearLayer(f"{name}.fc1", in_dim, hidden, rng)
        self.prelu = PReLULayer(f"{name}.p", hidden)
        self.fc2 = LinearLayer(f"{name}.fc2", hidden, out_dim, rng)
        self.out_dim = out_dim

    def forward(self, x, normalize=True):
        y = self.fc2.forward(self.prelu.forward(self.fc1.forward(x)))
        return ag.l2_normalize(y, axis=1) if normalize else y

    def params(self):
        return self.fc1.params() + self.prelu.params() + self.fc2.params()

    def named_tensors(self):
        out = {}
        for layer in (self.fc1, self.prelu, self.fc2):
            out.update(layer.named_tensors())
        return out

    def load_named(self, tensors):
        for name, dst in self.named_tensors().items():
            if name not in tensors:
                raise ConfigError(f"checkpoint missing tensor {name}")
            dst[...] = tensors[name]


def build_backbone(arch_id, width, mode=None, seed=0):
    """Construct a backbone; teacher-real forces (and defaults to) real mode."""
    if mode is None:
        mode = "real" if arch_id == "teacher-real" else "fully-bin"
    return Backbone(arch_id, width, mode, seed=seed)


def forward(backbone, head, batch, training=False, update_stats=True, normalize=True):
    """Embeddings (normalized) or logits (raw) for a batch."""
    feats = backbone.features(batch, training=training, update_stats=update_stats)
    return head.forward(feats, normalize=normalize)
