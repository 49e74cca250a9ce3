"""Online per-dimension feature standardization with EMA statistics."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class Standardizer:
    """Running mean/variance for one (teacher, token type) stream.

    The first update copies the batch statistics; later updates blend them in
    with ``running = decay * running + (1 - decay) * batch``. Variance is the
    biased batch variance.
    """

    def __init__(self, dim, decay=0.99, eps=1e-6):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        self.dim = dim
        self.decay = decay
        self.eps = eps
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.steps = 0
        self.frozen = False

    @property
    def initialized(self):
        return self.steps > 0

    def update(self, features):
        if self.frozen:
            return self
        y = np.asarray(features, dtype=np.float64).reshape(-1, self.dim)
        if y.shape[0] == 0:
            raise ContractError("standardizer update with zero tokens")
        m = y.mean(axis=0)
        v = y.var(axis=0)
        if self.steps == 0:
            self.mean, self.var = m, v
        else:
            self.mean = self.decay * self.mean + (1.0 - self.decay) * m
            self.var = self.decay * self.var + (1.0 - self.decay) * v
        self.steps += 1
        return self

    def standardize(self, features):
        if not self.initialized:
            raise ContractError("standardize called before any statistics were collected")
        return (np.asarray(features, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.eps)

    def state_dict(self):
        return {"mean": self.mean.copy(), "var": self.var.copy()}

    def load_state_dict(self, state):
        self.mean = np.asarray(state["mean"], dtype=np.float64).copy()
        self.var = np.asarray(state["var"], dtype=np.float64).copy()
        self.steps = max(self.steps, 1)


class StandardizerBank:
    """Independent standardizers keyed by (teacher, token type)."""

    def __init__(self, widths, decay=0.99, eps=1e-6, enabled=True):
        self.enabled = enabled
        self.states = {(t, kind): Standardizer(w, decay, eps)
                       for t, w in widths.items() for kind in ("cls", "patch")}

    def __getitem__(self, key):
        return self.states[key]

    def update(self, teacher, kind, features):
        if self.enabled:
            self.states[teacher, kind].update(features)

    def standardize(self, teacher, kind, features):
        if not self.enabled:
            return np.asarray(features, dtype=np.float64)
        return self.states[teacher, kind].standardize(features)

    def freeze(self):
        for s in self.states.values():
            s.frozen = True

    def state_dict(self):
        out = {}
        if not self.enabled:
            return out
        for (t, kind), s in self.states.items():
            if not s.initialized:
                continue
            for k, v in s.state_dict().items():
                out[f"std/{t}/{kind}/{k}"] = v
        return out

    def load_state_dict(self, arrays):
        for (t, kind), s in self.states.items():
            prefix = f"std/{t}/{kind}/"
            if prefix + "mean" in arrays:
                s.load_state_dict({"mean": arrays[prefix + "mean"], "var": arrays[prefix + "var"]})


def feature_statistics(features):
    """(avg L2 norm per sample, avg std per sample, avg std per dimension) for (N, d) features."""
    y = np.asarray(features, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] == 0:
        raise ContractError(f"expected a non-empty (N, d) matrix, got shape {y.shape}")
    return (float(np.linalg.norm(y, axis=1).mean()),
            float(y.std(axis=1).mean()),
            float(y.std(axis=0).mean()))


def report_statistics(encoder, token_type, images, batch_size=256):
    """Feature statistics of a frozen encoder; patch features are spatially averaged first."""
    cls, patches = encoder.encode_batched(images, batch_size)
    return feature_statistics(cls if token_type == "cls" else patches.mean(axis=1))
