"""A small Adam implemented on numpy arrays.

Both the null-text inner loop and the latent patch updates use Adam as a
gradient preconditioner: the optimizer tracks first/second moments and
returns a descent direction which the caller scales by its own learning
rate.  Keeping the learning rate out of the state makes the same instance
reusable for checkpoint/resume without renegotiating hyperparameters.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def direction(self, grad: np.ndarray) -> np.ndarray:
        """Bias-corrected m_hat / (sqrt(v_hat) + eps) for the given gradient."""
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
            "m": None if self.m is None else self.m.copy(),
            "v": None if self.v is None else self.v.copy(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "Adam":
        opt = cls(beta1=state["beta1"], beta2=state["beta2"], eps=state["eps"])
        opt.t = int(state["t"])
        opt.m = None if state["m"] is None else np.array(state["m"], copy=True)
        opt.v = None if state["v"] is None else np.array(state["v"], copy=True)
        return opt
