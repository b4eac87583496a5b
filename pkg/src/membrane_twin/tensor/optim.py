"""Optimisers, learning-rate schedules and early stopping."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class SGDMomentum:
    """Heavy-ball SGD with the buffer convention ``buf = mu * buf + grad``."""

    def __init__(self, params, lr=1e-3, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buf = [None] * len(self.params)

    def step(self):
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            if self.buf[k] is None:
                self.buf[k] = p.grad.copy()
            else:
                self.buf[k] *= self.momentum
                self.buf[k] += p.grad
            p.data -= self.lr * self.buf[k]

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(opt: Adam):
    opt.step()


def sgd_momentum_step(opt: SGDMomentum):
    opt.step()


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once more than ``patience``
    consecutive epochs fail to improve the best loss by ``threshold``."""

    def __init__(self, optimizer, factor=0.2, patience=3, threshold=1e-8):
        self.optimizer = optimizer
        self.factor, self.patience, self.threshold = factor, patience, threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss):
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.optimizer.lr *= self.factor
            self.bad_epochs = 0
        return self.optimizer.lr


def plateau_scheduler(history, lr0, factor=0.2, patience=3, threshold=1e-8):
    """Learning rate after replaying a validation-loss history."""

    class _Holder:
        lr = lr0

    sched = PlateauScheduler(_Holder, factor, patience, threshold)
    for loss in history:
        sched.step(loss)
    return _Holder.lr


def cosine_scheduler(epoch, lr0, t_max=100):
    return lr0 * (1.0 + math.cos(math.pi * epoch / t_max)) / 2.0


class CosineScheduler:
    def __init__(self, optimizer, t_max=100):
        self.optimizer = optimizer
        self.lr0 = optimizer.lr
        self.t_max = t_max
        self.epoch = 0

    def step(self, _val_loss=None):
        self.epoch += 1
        self.optimizer.lr = cosine_scheduler(self.epoch, self.lr0, self.t_max)
        return self.optimizer.lr


class EarlyStopping:
    """Tracks the best validation loss and the epoch that produced it."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch, val_loss) -> bool:
        """Record one epoch; returns True when this epoch is the new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def early_stop(history, patience) -> bool:
    stopper = EarlyStopping(patience)
    for epoch, loss in enumerate(history):
        stopper.update(epoch, loss)
    return stopper.should_stop
