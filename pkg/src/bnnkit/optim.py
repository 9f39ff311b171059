"""Optimizers and schedules for the training loops.

SGD keeps the learning rate inside the momentum accumulator:

    m_t = beta * m_{t-1} + lr * g,  theta -= m_t

(not the variant that scales the accumulator by lr at apply time). Adam
is the standard bias-corrected form. Weight decay is coupled L2 for
both: lambda * theta is added to the raw gradient before the update.

The schedule is plain linear decay, lr(e) = initial * (1 - e / total),
queried once per epoch.
"""

import numpy as np

from bnnkit.errors import ConfigError


class SGD:
    """Momentum SGD over a list of parameter Tensors."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, m in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            g = p.grad
            if p.grad.shape != p.data.shape:
                raise ValueError(f"grad shape {p.grad.shape} != param shape {p.data.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.momentum
            m += self.lr * g
            p.data -= m

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_tensors(self):
        """Named buffers for checkpointing."""
        return {f"sgd.m.{i}": m for i, m in enumerate(self.buffers)}


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / b1c
            vhat = v / b2c
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_tensors(self):
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out


def make_optimizer(name, params, lr, momentum=0.9, weight_decay=0.0):
    if name == "sgd":
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    if name == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {name!r}")


class LrSchedule:
    """Linear decay from `initial` to zero over `total_epochs`."""

    def __init__(self, initial, total_epochs):
        if total_epochs <= 0:
            raise ConfigError("total_epochs must be positive")
        self.initial = float(initial)
        self.total_epochs = int(total_epochs)

    def at(self, epoch):
        return lr_at(self.initial, self.total_epochs, epoch)


def lr_at(initial, total_epochs, epoch):
    """lr(e) = initial * (1 - e / total)."""
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    return initial * (1.0 - epoch / total_epochs)


STAGES = ("step1", "step2", "linear-eval", "finetune")


def weight_decay_for_stage(stage, configured=None):
    """Stage policy for the L2 coefficient.

    step1 runs strictly without decay (a nonzero request is an error,
    not silently ignored); step2 defaults to 1e-5; the frozen-backbone
    linear eval uses none; full fine-tuning uses 1e-4.
    """
    if stage == "step1":
        if configured not in (None, 0, 0.0):
            raise ConfigError("weight decay is disabled in step1; got "
                              f"{configured}")
        return 0.0
    if stage == "step2":
        return 1e-5 if configured is None else float(configured)
    if stage == "linear-eval":
        return 0.0
    if stage == "finetune":
        return 1e-4 if configured is None else float(configured)
    raise ConfigError(f"unknown stage {stage!r}, expected one of {STAGES}")
