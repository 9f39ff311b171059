"""Self-supervised objectives: contrastive InfoNCE with a negatives
queue, and temperature-softened distillation in KL and CE forms.

Both distillation losses turn logits into distributions via
softmax(logits / tau); the KL form subtracts the teacher entropy, so
its gradient w.r.t. the student equals the CE form's. They are built
as separate graphs on purpose, the equivalence is asserted by tests
rather than by construction.

The teacher side is always treated as a constant: these functions read
teacher values out of the tape, so no gradient can reach a teacher even
if the caller forgets to detach.
"""

from dataclasses import dataclass

import numpy as np

from bnnkit import autograd as ag
from bnnkit.autograd import Tensor
from bnnkit.errors import ConfigError


@dataclass
class ContrastiveBatch:
    """Unit-norm query/positive embeddings plus the negatives bank."""

    query: Tensor          # (B, d)
    positive: Tensor       # (B, d), treated as constant
    negatives: np.ndarray  # (K, d), constant
    tau: float = 0.2


@dataclass
class DistillBatch:
    student_logits: Tensor  # (B, d)
    teacher_logits: Tensor  # (B, d), treated as constant
    tau: float = 0.2


def _require_unit_rows(name, arr, tol=1e-5):
    norms = np.sqrt((arr * arr).sum(axis=1))
    if not np.all(np.abs(norms - 1.0) <= tol):
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"{name} rows must be unit norm (off by {worst:.2e})")


def info_nce(batch):
    """Eq. of the one-positive-vs-K-negatives log-softmax objective.

    loss = -log( exp(s_pos/tau) / (exp(s_pos/tau) + sum_k exp(s_k/tau)) )
    averaged over the batch. All-equal similarities give ln(K+1).
    """
    if batch.tau <= 0:
        raise ConfigError(f"tau must be positive, got {batch.tau}")
    negatives = np.asarray(batch.negatives)
    if negatives.ndim != 2 or negatives.shape[0] < 1:
        raise ConfigError("contrastive loss needs at least one negative")
    q = batch.query
    k = batch.positive.data if isinstance(batch.positive, Tensor) else np.asarray(batch.positive)
    if negatives.shape[1] != q.data.shape[1]:
        raise ValueError(f"negative dim {negatives.shape[1]} != embedding dim {q.data.shape[1]}")
    _require_unit_rows("query", q.data)
    _require_unit_rows("positive", k)
    _require_unit_rows("negatives", negatives)

    s_pos = ag.sum_(ag.mul(q, Tensor(k)), axis=1, keepdims=True)     # (B, 1)
    s_neg = ag.matmul(q, Tensor(negatives), transpose_b=True)        # (B, K)
    logits = ag.scale(ag.concat([s_pos, s_neg], axis=1), 1.0 / batch.tau)
    logp = ag.log_softmax(logits, axis=1)
    first = ag.pick_rows(logp, np.zeros(q.data.shape[0], dtype=np.int64))
    return ag.neg(ag.mean(first))


class NegativeQueue:
    """Fixed-size FIFO of past keys, detached by construction.

    Starts full of deterministic random unit vectors so the loss is
    well-defined from the first step.
    """

    def __init__(self, dim, capacity, seed=0):
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        rng = np.random.default_rng([seed, dim, capacity])
        data = rng.standard_normal((capacity, dim)).astype(np.float32)
        data /= np.sqrt((data * data).sum(axis=1, keepdims=True))
        self.data = data
        self.capacity = capacity
        self.ptr = 0

    def push(self, keys):
        keys = keys.data if isinstance(keys, Tensor) else np.asarray(keys)
        if keys.ndim != 2 or keys.shape[1] != self.data.shape[1]:
            raise ValueError(f"key shape {keys.shape} does not fit queue dim {self.data.shape[1]}")
        _require_unit_rows("keys", keys)
        for row in keys.astype(np.float32):
            self.data[self.ptr] = row
            self.ptr = (self.ptr + 1) % self.capacity

    def snapshot(self):
        """Current contents; a copy, so later pushes cannot alias."""
        return self.data.copy()


def queue_update(queue, new_keys):
    """FIFO push; returns the queue for chaining."""
    queue.push(new_keys)
    return queue


def _teacher_distribution(logits, tau):
    t = (logits.data if isinstance(logits, Tensor) else np.asarray(logits)) / tau
    t = t - t.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(t).sum(axis=1, keepdims=True))
    log_p = t - log_z
    return np.exp(log_p), log_p


def distill_ce(batch):
    """Cross-entropy of student against the softened teacher distribution.

    L = -(1/N) sum_i sum_c p_teacher[i,c] * log softmax(s_i/tau)[c]
    """
    if batch.tau <= 0:
        raise ConfigError(f"tau must be positive, got {batch.tau}")
    p_t, _ = _teacher_distribution(batch.teacher_logits, batch.tau)
    ls = ag.log_softmax(ag.scale(batch.student_logits, 1.0 / batch.tau), axis=1)
    per_row = ag.sum_(ag.mul(Tensor(p_t), ls), axis=1)
    return ag.neg(ag.mean(per_row))


def distill_kl(batch):
    """KL(teacher || student) on the softened distributions.

    Equal to distill_ce minus the (constant) teacher entropy, hence the
    same student gradient; kept as its own graph.
    """
    if batch.tau <= 0:
        raise ConfigError(f"tau must be positive, got {batch.tau}")
    p_t, log_p_t = _teacher_distribution(batch.teacher_logits, batch.tau)
    ls = ag.log_softmax(ag.scale(batch.student_logits, 1.0 / batch.tau), axis=1)
    gap = ag.add(Tensor(log_p_t), ag.neg(ls))
    per_row = ag.sum_(ag.mul(Tensor(p_t), gap), axis=1)
    return ag.mean(per_row)


SCHEMES = ("cl", "cl+kd", "kd")


def scheme_loss(scheme, contrastive=None, distill=None):
    """Combine the per-scheme objectives with unit weights.

    cl: InfoNCE alone. kd: distillation alone (a supplied contrastive
    batch is ignored). cl+kd: their sum.
    """
    if scheme == "cl":
        if contrastive is None:
            raise ConfigError("scheme cl needs a contrastive batch")
        return info_nce(contrastive)
    if scheme == "kd":
        if distill is None:
            raise ConfigError("scheme kd needs a distillation batch")
        return distill_kl(distill)
    if scheme == "cl+kd":
        if contrastive is None or distill is None:
            raise ConfigError("scheme cl+kd needs both batches")
        return ag.add(info_nce(contrastive), distill_kl(distill))
    raise ConfigError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
