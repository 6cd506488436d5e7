"""Adam optimizer over lists of parameter arrays.

Parameters are immutable graph leaves, so a step returns fresh arrays;
the caller swaps them into the model.  Moment buffers are keyed by
position, which makes trajectories reproducible for a fixed parameter
ordering.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError


class Adam:
    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if learning_rate <= 0.0:
            raise InputError("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = None
        self._v = None
        self._t = 0

    def step(self, values, grads):
        """One update; returns the new parameter arrays."""
        if self._m is None:
            self._m = [np.zeros_like(v) for v in values]
            self._v = [np.zeros_like(v) for v in values]
        if len(values) != len(self._m) or len(grads) != len(self._m):
            raise InputError("parameter/gradient count changed between steps")
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        out = []
        for i, (value, g) in enumerate(zip(values, grads)):
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / b1t
            v_hat = self._v[i] / b2t
            out.append(value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps))
        return out
