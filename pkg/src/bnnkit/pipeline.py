"""Orchestration: scheme training loops, the two-step binarization
plan, evaluation protocols, operation counting, packed export and
saturation diagnostics.

Teacher conventions: a distillation run takes targets from a frozen
forward of the teacher (batch statistics, no running-stat updates), so
a student that equals its teacher scores exactly zero distillation
loss. With `teacher="online"` a real-weight twin is co-trained with its
own contrastive loss, added one-to-one; targets stay detached either
way, so no distillation gradient ever reaches the teacher.
"""

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from bnnkit import autograd as ag
from bnnkit import binarize as bz
from bnnkit import checkpoint as ck
from bnnkit import data as dt
from bnnkit import kernels
from bnnkit import layers
from bnnkit import losses
from bnnkit import optim
from bnnkit.autograd import Tensor
from bnnkit.errors import ConfigError

PLANS = ("one-step", "two-step")
LR_GRID = (30.0, 20.0, 10.0, 5.0, 1.0, 0.5, 0.1, 0.05)
BN_EPS = 1e-5


@dataclass
class RunConfig:
    """Everything a training run depends on. Seeded and replayable."""

    scheme: str = "cl"
    plan: str = "one-step"
    arch: str = "toy-bin"
    width: int = 32
    optimizer: str = "adam"
    lr: float = 3e-4
    momentum: float = 0.9
    weight_decay: float = None       # None -> per-stage default
    tau: float = 0.2
    queue_size: int = 4096
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    aug: str = "lite"
    dataset: str = "synth"
    data: str = ""
    teacher: str = "online"          # checkpoint path, or online co-training
    embed_dim: int = 64
    out: str = None

    def __post_init__(self):
        if self.scheme not in losses.SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.plan not in PLANS:
            raise ConfigError(f"unknown plan {self.plan!r}")
        if self.arch not in layers.ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.aug not in ("lite", "vanilla"):
            raise ConfigError(f"unknown augmentation variant {self.aug!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.arch == "teacher-real" and self.scheme != "cl":
            raise ConfigError("a real teacher pre-trains with the contrastive scheme")


def load_run_dataset(cfg):
    return dt.load_dataset(cfg.data, cfg.dataset)


def _mode_for(header):
    if header.arch == "teacher-real":
        return "real"
    return "bin-act-only" if header.stage == "step1" else "fully-bin"


def load_model(header, tensors, mode=None):
    """Backbone rebuilt from checkpoint tensors (width comes from the
    stem shape, mode from the stage unless overridden)."""
    width = tensors["stem.conv.w"].shape[0]
    bb = layers.Backbone(header.arch, width, mode or _mode_for(header))
    bb.load_named(tensors)
    return bb


def _norm_stats(tensors, handle):
    if "norm.mean" in tensors and "norm.std" in tensors:
        return tensors["norm.mean"], tensors["norm.std"]
    return handle.mean, handle.std


class _Student:
    def __init__(self, cfg, mode):
        self.backbone = layers.build_backbone(cfg.arch, cfg.width, mode=mode,
                                              seed=cfg.seed)
        rng = np.random.default_rng([cfg.seed, 303])
        self.heads = {}
        if cfg.scheme in ("cl", "cl+kd"):
            self.heads["head_cl"] = layers.ProjectionHead(
                self.backbone.feature_dim, cfg.embed_dim, rng=rng, name="head_cl")
        if cfg.scheme in ("kd", "cl+kd"):
            self.heads["head_kd"] = layers.ProjectionHead(
                self.backbone.feature_dim, cfg.embed_dim, rng=rng, name="head_kd")

    def params(self):
        out = list(self.backbone.params())
        for h in self.heads.values():
            out.extend(h.params())
        return out

    def load(self, tensors):
        self.backbone.load_named(tensors)
        for h in self.heads.values():
            if f"{h.name}.fc1.w" in tensors:
                h.load_named(tensors)


class _Teacher:
    """Target provider: frozen checkpoint or co-trained real twin."""

    def __init__(self, cfg):
        self.online = cfg.teacher == "online"
        if self.online:
            self.backbone = layers.build_backbone("teacher-real", cfg.width,
                                                  seed=cfg.seed + 9000)
            rng = np.random.default_rng([cfg.seed, 707])
            self.head = layers.ProjectionHead(self.backbone.feature_dim,
                                              cfg.embed_dim, rng=rng, name="head_t")
            self.queue = losses.NegativeQueue(cfg.embed_dim, cfg.queue_size,
                                              seed=cfg.seed + 1)
        else:
            hdr, tensors = ck.load_checkpoint(cfg.teacher)
            self.backbone = load_model(hdr, tensors)
            prefix = "head_kd" if "head_kd.fc1.w" in tensors else "head_cl"
            if f"{prefix}.fc1.w" not in tensors:
                raise ConfigError("teacher checkpoint has no projection head")
            dim = tensors[f"{prefix}.fc2.w"].shape[0]
            if dim != cfg.embed_dim:
                raise ConfigError(
                    f"teacher embeds {dim} dims, student expects {cfg.embed_dim}")
            hidden = tensors[f"{prefix}.fc1.w"].shape[0]
            self.head = layers.ProjectionHead(self.backbone.feature_dim, dim,
                                              hidden=hidden, name=prefix)
            self.head.load_named(tensors)
            self.queue = None

    def params(self):
        return self.backbone.params() + self.head.params() if self.online else []

    def targets(self, x):
        """Detached soft-target logits for a batch (frozen forward)."""
        with ag.no_grad():
            f = self.backbone.features(Tensor(x), training=True, update_stats=False)
            return self.head.forward(f, normalize=False).data

    def own_loss(self, cfg, x1, x2):
        """Online twin's contrastive objective; also yields kd targets
        from the same query forward."""
        f1 = self.backbone.features(Tensor(x1), training=True)
        raw = self.head.forward(f1, normalize=False)
        q = ag.l2_normalize(raw)
        with ag.no_grad():
            kf = self.backbone.features(Tensor(x2), training=True)
            k = self.head.forward(kf, normalize=True).data
        cb = losses.ContrastiveBatch(q, Tensor(k), self.queue.snapshot(), cfg.tau)
        loss = losses.info_nce(cb)
        self.queue.push(k)
        return loss, raw.data


def _train_stage(cfg, handle, stage, mode, init_tensors=None):
    """One optimization stage; returns (header, tensors, history)."""
    student = _Student(cfg, mode)
    if init_tensors is not None:
        student.load(init_tensors)
    needs_cl = cfg.scheme in ("cl", "cl+kd")
    needs_kd = cfg.scheme in ("kd", "cl+kd")
    queue = losses.NegativeQueue(cfg.embed_dim, cfg.queue_size, seed=cfg.seed) \
        if needs_cl else None
    teacher = _Teacher(cfg) if needs_kd else None

    params = student.params()
    if teacher is not None and teacher.online:
        params = params + teacher.params()
    wd = optim.weight_decay_for_stage(stage, cfg.weight_decay)
    opt = optim.make_optimizer(cfg.optimizer, params, cfg.lr,
                               momentum=cfg.momentum, weight_decay=wd)
    sched = optim.LrSchedule(cfg.lr, cfg.epochs)
    stream = handle.pretrain_stream(dt.AugConfig.named(cfg.aug), cfg.seed,
                                    cfg.batch_size)

    pairs_needed = needs_cl or (teacher is not None and teacher.online)
    history = []
    for e in range(cfg.epochs):
        opt.lr = sched.at(e)
        total, nb = 0.0, 0
        batches = stream.epoch(e) if pairs_needed else stream.epoch_single_view(e)
        for item in batches:
            x1, x2 = item if pairs_needed else (item, None)
            extra = None
            kd_targets = None
            if teacher is not None and teacher.online:
                extra, kd_targets = teacher.own_loss(cfg, x1, x2)

            f1 = student.backbone.features(Tensor(x1), training=True)
            cb = db = None
            key = None
            if needs_cl:
                q = student.heads["head_cl"].forward(f1, normalize=True)
                with ag.no_grad():
                    kf = student.backbone.features(Tensor(x2), training=True)
                    key = student.heads["head_cl"].forward(kf, normalize=True).data
                cb = losses.ContrastiveBatch(q, Tensor(key), queue.snapshot(), cfg.tau)
            if needs_kd:
                s_kd = student.heads["head_kd"].forward(f1, normalize=False)
                if kd_targets is None:
                    kd_targets = teacher.targets(x1)
                db = losses.DistillBatch(s_kd, Tensor(kd_targets), cfg.tau)

            loss = losses.scheme_loss(cfg.scheme, contrastive=cb, distill=db)
            if extra is not None:
                loss = ag.add(loss, extra)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if needs_cl:
                queue.push(key)
            total += float(loss.data)
            nb += 1
        history.append(total / nb)

    header = ck.CkptHeader(stage=stage, scheme=cfg.scheme, arch=cfg.arch,
                           epoch=cfg.epochs)
    tensors = dict(student.backbone.named_tensors())
    for h in student.heads.values():
        tensors.update(h.named_tensors())
    tensors["norm.mean"] = handle.mean
    tensors["norm.std"] = handle.std
    return header, tensors, history


def _step1_out_path(out):
    base, ext = os.path.splitext(out)
    return f"{base}.step1{ext or '.ckpt'}"


def pretrain(cfg, dataset=None):
    """Run the configured plan end to end; saves to cfg.out if set."""
    handle = dataset if dataset is not None else load_run_dataset(cfg)
    if cfg.plan == "two-step":
        return progressive_binarize(cfg, dataset=handle)
    mode = "real" if cfg.arch == "teacher-real" else "fully-bin"
    header, tensors, history = _train_stage(cfg, handle, "step2", mode)
    if cfg.out:
        ck.save_checkpoint(cfg.out, header, tensors)
    return header, tensors, history


def progressive_binarize(cfg, dataset=None, step1_path=None):
    """Two-step plan: binarize activations first, then weights too.

    Step 2 starts from step 1's latent weights verbatim (so their signs
    carry over) and a fresh optimizer. An existing step-1 checkpoint can
    be supplied instead of training one.
    """
    if cfg.arch == "teacher-real":
        raise ConfigError("the two-step plan only applies to binary archs")
    handle = dataset if dataset is not None else load_run_dataset(cfg)
    if step1_path is not None:
        hdr1, t1 = ck.load_checkpoint(step1_path)
        if hdr1.stage != "step1":
            raise ConfigError(f"expected a step1 checkpoint, got stage {hdr1.stage!r}")
        if hdr1.arch != cfg.arch:
            raise ConfigError(f"step1 arch {hdr1.arch!r} does not match {cfg.arch!r}")
        history1 = []
    else:
        # the stage policy rejects nonzero decay for step 1 by itself
        hdr1, t1, history1 = _train_stage(cfg, handle, "step1", "bin-act-only")
        if cfg.out:
            ck.save_checkpoint(_step1_out_path(cfg.out), hdr1, t1)
    header, tensors, history2 = _train_stage(cfg, handle, "step2", "fully-bin",
                                             init_tensors=t1)
    if cfg.out:
        ck.save_checkpoint(cfg.out, header, tensors)
    return header, tensors, history1 + history2


# ---------------------------------------------------------------------------
# evaluation protocols
# ---------------------------------------------------------------------------


def extract_features(bb, images, mean, std, batch_size=512):
    """Eval-mode pooled features, running stats frozen."""
    out = []
    for lo in range(0, images.shape[0], batch_size):
        x = (images[lo : lo + batch_size] - mean[:, None, None]) / std[:, None, None]
        with ag.no_grad():
            f = bb.features(Tensor(x), training=False, update_stats=False)
        out.append(f.data)
    return np.concatenate(out)


def _softmax_ce(logits, labels):
    picked = ag.pick_rows(ag.log_softmax(logits), labels)
    return ag.neg(ag.mean(picked))


@dataclass
class LinearEvalResult:
    accuracies: dict                # lr -> accuracy in percent
    best_lr: float
    best_accuracy: float

    def format(self):
        lines = [f"lr={lr:g} acc={acc:.2f}" for lr, acc in self.accuracies.items()]
        lines.append(f"best lr={self.best_lr:g} acc={self.best_accuracy:.2f}")
        return "\n".join(lines)


def _train_linear(feats, labels, n_classes, lr, epochs, batch_size, seed):
    dim = feats.shape[1]
    w = Tensor(np.zeros((n_classes, dim), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)
    opt = optim.SGD([w, b], lr, momentum=0.9,
                    weight_decay=optim.weight_decay_for_stage("linear-eval"))
    sched = optim.LrSchedule(lr, epochs)
    n = feats.shape[0]
    for e in range(epochs):
        opt.lr = sched.at(e)
        order = np.random.default_rng([seed, e, 31]).permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            logits = ag.add(ag.matmul(Tensor(feats[idx]), w, transpose_b=True), b)
            loss = _softmax_ce(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return w.data, b.data


def linear_eval(header, tensors, train_handle, val_handle=None, lr_grid=LR_GRID,
                epochs=40, batch_size=256, seed=0):
    """Frozen-feature linear probe over the lr grid; best accuracy wins.

    Features are extracted once and reused for every grid point. Without
    an explicit validation split, a deterministic 20% of the training
    set is held out.
    """
    if not train_handle.has_labels:
        raise ConfigError("linear evaluation needs labels")
    bb = load_model(header, tensors)
    mean, std = _norm_stats(tensors, train_handle)

    if val_handle is None:
        n = train_handle.n
        order = np.random.default_rng([seed, 55]).permutation(n)
        cut = max(1, int(round(n * 0.2)))
        val_idx, tr_idx = order[:cut], order[cut:]
        tr_feats = extract_features(bb, train_handle.images[tr_idx], mean, std)
        tr_labels = train_handle.labels[tr_idx]
        va_feats = extract_features(bb, train_handle.images[val_idx], mean, std)
        va_labels = train_handle.labels[val_idx]
    else:
        tr_feats = extract_features(bb, train_handle.images, mean, std)
        tr_labels = train_handle.labels
        va_feats = extract_features(bb, val_handle.images, mean, std)
        va_labels = val_handle.labels

    n_classes = int(max(tr_labels.max(), va_labels.max())) + 1
    accs = {}
    for lr in lr_grid:
        w, b = _train_linear(tr_feats, tr_labels, n_classes, lr, epochs,
                             batch_size, seed)
        pred = (va_feats @ w.T + b).argmax(axis=1)
        accs[lr] = float((pred == va_labels).mean() * 100.0)
    best_lr = max(accs, key=accs.get)
    return LinearEvalResult(accs, best_lr, accs[best_lr])


def transfer_finetune(header, tensors, handle, epochs=10, lr=1e-3,
                      optimizer="adam", batch_size=128, seed=0,
                      weight_decay=None, multi_label=False, targets=None):
    """End-to-end finetune of a pre-trained backbone plus a fresh
    classifier. Multi-label mode trains sigmoid outputs against (N, C)
    float targets; otherwise softmax against integer labels."""
    if targets is None:
        if not handle.has_labels:
            raise ConfigError("finetuning needs labels or explicit targets")
        targets = handle.labels
    targets = np.asarray(targets)
    if multi_label:
        if targets.ndim != 2:
            raise ConfigError("multi-label finetuning needs (N, C) targets")
        n_classes = targets.shape[1]
        targets = targets.astype(np.float32)
    else:
        n_classes = int(targets.max()) + 1
        targets = targets.astype(np.int64)

    bb = load_model(header, tensors)
    mean, std = _norm_stats(tensors, handle)
    clf = layers.LinearLayer("classifier", bb.feature_dim, n_classes,
                             np.random.default_rng([seed, 99]))
    params = bb.params() + clf.params()
    wd = optim.weight_decay_for_stage("finetune", weight_decay)
    opt = optim.make_optimizer(optimizer, params, lr, weight_decay=wd)
    sched = optim.LrSchedule(lr, epochs)

    n = handle.n
    history = []
    for e in range(epochs):
        opt.lr = sched.at(e)
        order = np.random.default_rng([seed, e, 13]).permutation(n)
        total, nb = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            x = (handle.images[idx] - mean[:, None, None]) / std[:, None, None]
            feats = bb.features(Tensor(x), training=True)
            logits = clf.forward(feats)
            if multi_label:
                loss = ag.sigmoid_bce(logits, targets[idx])
            else:
                loss = _softmax_ce(logits, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data)
            nb += 1
        history.append(total / nb)

    out_header = ck.CkptHeader(stage="finetune", scheme=header.scheme,
                               arch=header.arch, epoch=epochs)
    out = dict(bb.named_tensors())
    out.update(clf.named_tensors())
    out["norm.mean"] = np.asarray(mean, dtype=np.float32)
    out["norm.std"] = np.asarray(std, dtype=np.float32)
    return out_header, out, history


# ---------------------------------------------------------------------------
# operation counting
# ---------------------------------------------------------------------------


@dataclass
class OpsReport:
    """Binary and float operation totals, 64 BOPs worth one OP.

    Convention: one multiply-accumulate is one operation (binary in a
    fully binarized conv, float otherwise); batchnorm and prelu cost two
    per element, pooling and residual adds one; sign is free.
    """

    bops: int
    flops: int
    per_layer: list = field(default_factory=list)

    @property
    def ops(self):
        return self.bops / 64.0 + self.flops

    def format(self):
        return f"BOPS={self.bops} FLOPS={self.flops} OPS={self.ops}"


def ops_formula(bops, flops):
    return bops / 64.0 + flops


def count_ops(arch, width, mode=None, image_hw=32, classes=0):
    """Walk the layer list, simulating spatial sizes from `image_hw`."""
    bb = layers.build_backbone(arch, width, mode=mode)
    h = w = image_hw
    bops = flops = 0
    per_layer = []
    for spec in bb.layer_specs():
        lb = lf = 0
        if spec.kind in ("real-conv", "bin-conv"):
            oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            macs = spec.out_ch * oh * ow * spec.in_ch * spec.kernel * spec.kernel
            if spec.kind == "bin-conv" and spec.mode == "fully-bin":
                lb = macs
            else:
                lf = macs
            h, w = oh, ow
        elif spec.kind == "bn":
            lf = 2 * spec.out_ch * h * w
        elif spec.kind == "prelu":
            lf = 2 * spec.out_ch * h * w
        elif spec.kind == "shortcut-add":
            lf = spec.out_ch * h * w
        elif spec.kind == "pool":
            lf = spec.out_ch * h * w
        # sign is a comparison, counted free
        bops += lb
        flops += lf
        per_layer.append((spec.name, spec.kind, lb, lf))
    if classes:
        lf = classes * (4 * width + 1)
        flops += lf
        per_layer.append(("classifier", "linear", 0, lf))
    return OpsReport(bops, flops, per_layer)


# ---------------------------------------------------------------------------
# packed export
# ---------------------------------------------------------------------------


def _bn_affine(tensors, prefix):
    gamma = tensors[f"{prefix}.gamma"]
    beta = tensors[f"{prefix}.beta"]
    rm = tensors[f"{prefix}.rm"]
    rv = tensors[f"{prefix}.rv"]
    a = (gamma / np.sqrt(rv + BN_EPS)).astype(np.float32)
    b = (beta - rm * a).astype(np.float32)
    return a, b


def export_binary(header, tensors):
    """Fold a fully binarized checkpoint into its inference form.

    Latent conv weights collapse to packed sign words plus per-filter
    alpha; batchnorm collapses to one affine per channel. Real-weight or
    activations-only checkpoints cannot be packed.
    """
    if header.arch == "teacher-real" or header.stage == "step1":
        raise ConfigError("export needs a fully binarized checkpoint")
    out = {}
    out["stem.conv.w"] = tensors["stem.conv.w"]
    a, b = _bn_affine(tensors, "stem.bn")
    out["stem.bn.a"], out["stem.bn.b"] = a, b
    out["stem.prelu.a"] = tensors["stem.prelu.a"]
    for name in ("b1", "b2", "b3", "b4"):
        wr = tensors[f"{name}.conv.w"]
        alpha = np.abs(wr).reshape(wr.shape[0], -1).mean(axis=1).astype(np.float32)
        packed = bz.pack(bz.sign_array(wr))
        out[f"{name}.conv.packed"] = packed.words
        out[f"{name}.conv.alpha"] = alpha
        a, b = _bn_affine(tensors, f"{name}.bn")
        out[f"{name}.bn.a"], out[f"{name}.bn.b"] = a, b
        out[f"{name}.prelu.a"] = tensors[f"{name}.prelu.a"]
    if "classifier.w" in tensors:
        out["classifier.w"] = tensors["classifier.w"]
        out["classifier.b"] = tensors["classifier.b"]
    if "norm.mean" in tensors:
        out["norm.mean"] = tensors["norm.mean"]
        out["norm.std"] = tensors["norm.std"]
    exp_header = ck.CkptHeader(stage="export", scheme=header.scheme,
                               arch=header.arch, epoch=header.epoch)
    return exp_header, out


def _conv_f32(x, w, stride, pad):
    f = w.shape[0]
    cols = kernels.im2col(x, w.shape[2], w.shape[3], stride, pad, 0.0)
    y = cols @ w.reshape(f, -1).T
    oh = (x.shape[2] + 2 * pad - w.shape[2]) // stride + 1
    ow = (x.shape[3] + 2 * pad - w.shape[3]) // stride + 1
    return np.ascontiguousarray(
        y.reshape(x.shape[0], oh, ow, f).transpose(0, 3, 1, 2))


def _prelu_np(x, alpha):
    a = alpha[None, :, None, None]
    return np.where(x > 0, x, a * x).astype(np.float32)


class PackedModel:
    """Immutable inference model over packed weights.

    `forward` expects inputs normalized the same way training saw them
    (see `normalize`); it reproduces the eval-mode training graph.
    """

    _GEOM = {"b1": (1, 1, 2), "b2": (1, 2, 1), "b3": (2, 2, 2), "b4": (2, 4, 1)}

    def __init__(self, header, tensors):
        if header.stage != "export":
            raise ConfigError(f"not a packed export (stage {header.stage!r})")
        self.arch = header.arch
        self.t = tensors
        self.width = tensors["stem.conv.w"].shape[0]
        self.shortcut = self.arch == "bireal-tiny"
        self.filters = {}
        for name in ("b1", "b2", "b3", "b4"):
            cin_m, cout_m, _ = self._GEOM[name]
            cin, cout = cin_m * self.width, cout_m * self.width
            self.filters[name] = bz.BitTensor(
                tensors[f"{name}.conv.packed"], (cout, cin, 3, 3), cin * 9)

    @property
    def has_classifier(self):
        return "classifier.w" in self.t

    def normalize(self, x):
        return ((x - self.t["norm.mean"][:, None, None])
                / self.t["norm.std"][:, None, None]).astype(np.float32)

    def _affine(self, x, prefix):
        return x * self.t[f"{prefix}.a"][None, :, None, None] \
            + self.t[f"{prefix}.b"][None, :, None, None]

    def features(self, x):
        x = np.ascontiguousarray(x, dtype=np.float32)
        y = _conv_f32(x, self.t["stem.conv.w"], 2, 1)
        y = self._affine(y, "stem.bn")
        y = _prelu_np(y, self.t["stem.prelu.a"])
        for name in ("b1", "b2", "b3", "b4"):
            _, _, stride = self._GEOM[name]
            s = bz.sign_array(y)
            z = bz.binary_conv2d_infer(s, self.filters[name],
                                       self.t[f"{name}.conv.alpha"],
                                       stride=stride, padding=1)
            z = self._affine(z, f"{name}.bn")
            if self.shortcut:
                sc = y
                if stride == 2:
                    n, c, h, w = sc.shape
                    sc = sc.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
                if z.shape[1] == 2 * sc.shape[1]:
                    sc = np.concatenate([sc, sc], axis=1)
                z = z + sc
            y = _prelu_np(z, self.t[f"{name}.prelu.a"])
        return y.mean(axis=(2, 3))

    def forward(self, x):
        feats = self.features(x)
        if self.has_classifier:
            return feats @ self.t["classifier.w"].T + self.t["classifier.b"]
        return feats

    def packed_weight_bytes(self):
        return sum(self.filters[n].nbytes for n in self.filters)

    def latent_weight_bytes(self):
        """What the same conv weights cost unpacked, in float32."""
        total = 0
        for name in ("b1", "b2", "b3", "b4"):
            f, c, kh, kw = self.filters[name].shape
            total += f * c * kh * kw * 4
        return total


def save_packed(path, header, tensors):
    exp_header, out = export_binary(header, tensors)
    ck.save_checkpoint(path, exp_header, out)
    return exp_header, out


def load_packed(path):
    header, tensors = ck.load_checkpoint(path)
    return PackedModel(header, tensors)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def diagnose(header, tensors, handle, batch_size=256):
    """Saturation report for a checkpoint on a data sample, as CSV."""
    bb = load_model(header, tensors)
    mean, std = _norm_stats(tensors, handle)
    x = (handle.images[:batch_size] - mean[:, None, None]) / std[:, None, None]
    stats = bz.saturation_report(bb, x.astype(np.float32))
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(["kind", "layer", "value"])
    for kind, layer, value in stats.rows():
        wr.writerow([kind, layer, f"{value:.6f}"])
    return buf.getvalue()
