"""First-order optimizers over lists of parameter arrays."""

import numpy as np


class Adam:
    """Adaptive-moment estimation; optional decoupled weight decay (AdamW)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [np.asarray(p, dtype=float) for p in params]
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._m = [np.zeros_like(p) for p in self.params]
        self._v = [np.zeros_like(p) for p in self.params]
        self._t = 0

    def step(self, grads):
        self._t += 1
        b1t = 1.0 - self.b1**self._t
        b2t = 1.0 - self.b2**self._t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * update
        return self.params


class ReduceOnPlateau:
    """Halve the learning rate when a monitored loss stops improving."""

    def __init__(self, optimizer: Adam, factor=0.5, patience=10, threshold=1e-4):
        self.optimizer = optimizer
        self.factor = float(factor)
        self.patience = int(patience)
        self.threshold = float(threshold)
        self._best = np.inf
        self._wait = 0

    def step(self, metric: float):
        if metric < self._best * (1.0 - self.threshold):
            self._best = metric
            self._wait = 0
        else:
            self._wait += 1
            if self._wait > self.patience:
                self.optimizer.lr *= self.factor
                self._wait = 0
