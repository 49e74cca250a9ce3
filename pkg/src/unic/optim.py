"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np


class AdamW:
    """Decoupled AdamW over a dict of named float64 arrays.

    ``step`` returns new parameter arrays; the inputs are never modified.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.03, decay_filter=None):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        # names excluded from weight decay; default decays everything
        self.decay_filter = decay_filter or (lambda name: True)
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and self.decay_filter(name):
                update = update + self.weight_decay * p
            out[name] = p - lr * update
        return out

    def state_dict(self):
        out = {f"opt/m/{k}": v for k, v in self.m.items()}
        out.update({f"opt/v/{k}": v for k, v in self.v.items()})
        out["opt/t"] = np.array(float(self.t))
        return out

    def load_state_dict(self, arrays):
        self.m = {k[len("opt/m/"):]: np.asarray(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("opt/m/")}
        self.v = {k[len("opt/v/"):]: np.asarray(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("opt/v/")}
        self.t = int(np.asarray(arrays.get("opt/t", 0.0)).item())


def adamw_step(params, grads, state: AdamW, lr, weight_decay=None):
    if weight_decay is not None:
        state.weight_decay = weight_decay
    return state.step(params, grads, lr)


def lr_schedule(step, steps_per_epoch, lr, epochs, warmup_epochs):
    """Linear warmup from 0 to ``lr``, then cosine decay reaching 0 on the final step."""
    warmup = warmup_epochs * steps_per_epoch
    last = epochs * steps_per_epoch - 1
    if step < warmup:
        return lr * step / warmup
    span = max(1, last - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * lr * (1.0 + math.cos(math.pi * progress))
