"""Expendable teacher-specific projector heads.

A head is ``linear(d -> d_h) -> GELU -> linear(d_h -> d_t)``. With the ladder
enabled a teacher's projection is the sum of a top head on the last layer and
one rung head per selected intermediate layer. Rung output layers start at
zero, so at initialization the ladder projects exactly like the top head.

Parameters live in one flat dict named
``proj/<teacher>/<cls|patch|all>/<top|rung_l>/<w1|b1|w2|b2>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .encoder import INIT_STD
from .errors import ContractError, DimensionError

TOKEN_TYPES = ("cls", "patch")


def init_head(rng, in_dim, hidden, out_dim, zero_output=False):
    w1 = rng.normal(0.0, INIT_STD, size=(in_dim, hidden))
    w2 = np.zeros((hidden, out_dim)) if zero_output else rng.normal(0.0, INIT_STD, size=(hidden, out_dim))
    return {"w1": w1, "b1": np.zeros(hidden), "w2": w2, "b2": np.zeros(out_dim)}


def project_top(head, tokens):
    """Apply one MLP head row-wise to (..., d) tokens."""
    w1 = T.as_tensor(head["w1"])
    tokens = T.as_tensor(tokens)
    if tokens.shape[-1] != w1.shape[0]:
        raise DimensionError(f"projector expects width {w1.shape[0]}, got tokens of shape {tokens.shape}")
    h = T.gelu(T.add(T.matmul(tokens, w1), head["b1"]))
    return T.add(T.matmul(h, head["w2"]), head["b2"])


def project_ladder(top, rungs, per_layer):
    """Sum of the top head on the last layer and each rung on its layer.

    ``rungs`` maps 1-based layer indices (< L) to heads.
    """
    depth = len(per_layer)
    missing = [l for l in rungs if not 1 <= l < depth]
    if depth == 0 or missing:
        raise ContractError(f"ladder needs layers {sorted(rungs)} below the top, got {depth} layers")
    out = project_top(top, per_layer[-1])
    for l in sorted(rungs):
        out = T.add(out, project_top(rungs[l], per_layer[l - 1]))
    return out


@dataclass
class ProjectorSet:
    teacher_widths: Dict[str, int]
    student_dim: int
    depth: int
    dedicated: bool = True
    ladder: bool = False
    selected_blocks: List[int] = field(default_factory=list)
    top_hidden: Optional[int] = None
    rung_hidden: Optional[int] = None
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def branches(self):
        return TOKEN_TYPES if self.dedicated else ("all",)

    def branch(self, token_type):
        return token_type if self.dedicated else "all"

    def head_prefixes(self):
        out = []
        for t in self.teacher_widths:
            for br in self.branches:
                out.append(f"proj/{t}/{br}/top")
                if self.ladder:
                    out.extend(f"proj/{t}/{br}/rung_{l}" for l in self.selected_blocks)
        return out

    def _head(self, params, prefix):
        return {k: params[f"{prefix}/{k}"] for k in ("w1", "b1", "w2", "b2")}

    def project(self, params, teacher, token_type, per_layer):
        """Project the CLS (``token_type='cls'``) or patch tokens of every layer.

        ``params`` is this set's flat dict (arrays or Tensors); ``per_layer``
        holds (B, |P|+1, d) tensors. Returns (B, d_t) or (B, |P|, d_t).
        """
        sel = (slice(None), 0, slice(None)) if token_type == "cls" else (slice(None), slice(1, None), slice(None))
        base = f"proj/{teacher}/{self.branch(token_type)}"
        top = self._head(params, base + "/top")
        if not self.ladder:
            return project_top(top, per_layer[-1][sel])
        rungs = {l: self._head(params, f"{base}/rung_{l}") for l in self.selected_blocks}
        layers = [z[sel] if (i + 1 in rungs or i + 1 == len(per_layer)) else None
                  for i, z in enumerate(per_layer)]
        return project_ladder(top, rungs, layers)


def build_projector_set(teacher_widths, student_dim, depth, dedicated=True, ladder=False,
                        selected_blocks=None, top_hidden=None, rung_hidden=None, seed=0):
    """Create heads for every teacher; rung output layers are zero-initialized."""
    if selected_blocks is None:
        selected_blocks = list(range(1, depth))
    selected_blocks = sorted(int(l) for l in selected_blocks)
    bad = [l for l in selected_blocks if not 1 <= l < depth]
    if bad:
        raise ContractError(f"selected blocks {bad} outside 1..{depth - 1}")
    pset = ProjectorSet(dict(teacher_widths), student_dim, depth, dedicated, ladder,
                        selected_blocks if ladder else [],
                        top_hidden or 4 * student_dim, rung_hidden or student_dim)
    # separate streams keep top heads identical with or without the ladder
    top_rng = np.random.default_rng([seed, 0])
    rung_rng = np.random.default_rng([seed, 1])
    for t, width in pset.teacher_widths.items():
        for br in pset.branches:
            heads = {f"proj/{t}/{br}/top": init_head(top_rng, student_dim, pset.top_hidden, width)}
            for l in pset.selected_blocks:
                heads[f"proj/{t}/{br}/rung_{l}"] = init_head(rung_rng, student_dim, pset.rung_hidden, width,
                                                             zero_output=True)
            for prefix, head in heads.items():
                for k, v in head.items():
                    pset.params[f"{prefix}/{k}"] = v
    return pset
