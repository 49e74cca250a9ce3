"""Frozen teacher bundles and the specialist-teacher factory."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import (ClassifierHead, Encoder, EncoderConfig, apply_head, as_tensors, attach_head, forward,
                      head_features)
from .errors import DivergenceError, FormatError
from .optim import AdamW, lr_schedule

log = logging.getLogger(__name__)

KINDS = {"cls_specialist": "cls", "patch_specialist": "patch"}
# calibrated reference recipes: a deeper, longer-trained CLS specialist and a
# shallow per-cell classifier that converges in a few epochs
RECIPES = {
    "cls_specialist": {"depth": 2, "epochs": 40, "lr": 1e-3, "warmup_epochs": 3},
    "patch_specialist": {"depth": 1, "epochs": 5, "lr": 1e-3, "warmup_epochs": 3},
}
_CONFIG_FIELDS = ("image_size", "channels", "patch_size", "dim", "depth", "heads", "mlp_ratio", "seed")


@dataclass
class TeacherBundle:
    name: str
    encoder: Encoder
    head: Optional[ClassifierHead] = None
    standardizer: object = None
    metrics: dict = field(default_factory=dict)

    @property
    def config(self):
        return self.encoder.config

    @property
    def width(self):
        return self.encoder.config.dim

    def fingerprint(self):
        """SHA-256 over every parameter array, for immutability checks."""
        h = hashlib.sha256()
        for k in sorted(self.encoder.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.encoder.params[k]).tobytes())
        return h.hexdigest()


def encoder_arrays(encoder: Encoder, prefix="enc/"):
    arrays = {"meta/encoder": np.array([getattr(encoder.config, f) for f in _CONFIG_FIELDS], dtype=np.float64)}
    arrays.update({prefix + k: v for k, v in encoder.params.items()})
    return arrays


def encoder_from_arrays(arrays, prefix="enc/"):
    if "meta/encoder" not in arrays:
        raise FormatError("checkpoint has no meta/encoder entry")
    cfg = EncoderConfig(**{f: int(v) for f, v in zip(_CONFIG_FIELDS, arrays["meta/encoder"])})
    params = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    return Encoder(cfg, params)


def head_arrays(head: ClassifierHead):
    # weights and bias stacked as one (d + 1, classes) matrix
    return {f"head/{head.source}": np.vstack([head.w, head.b[None, :]])}


def bundle_arrays(bundle: TeacherBundle):
    arrays = encoder_arrays(bundle.encoder)
    if bundle.head is not None:
        arrays.update(head_arrays(bundle.head))
    return arrays


def save_teacher(bundle: TeacherBundle, path):
    save_checkpoint(bundle_arrays(bundle), path)


def load_teacher(path, name=None) -> TeacherBundle:
    arrays = load_checkpoint(path)
    enc = encoder_from_arrays(arrays)
    head = None
    for source in ("cls", "gap", "patch"):
        key = f"head/{source}"
        if key in arrays:
            m = arrays[key]
            head = ClassifierHead(source, m[:-1].copy(), m[-1].copy())
    return TeacherBundle(name or str(path), enc, head)


def _labels_for(source, dataset):
    return dataset.cell_labels if source == "patch" else dataset.labels


def head_accuracy(encoder: Encoder, head: ClassifierHead, dataset, batch_size=256):
    correct, total = 0, 0
    labels = _labels_for(head.source, dataset)
    for start in range(0, len(dataset), batch_size):
        out = encoder.encode(dataset.images[start:start + batch_size])
        with T.no_grad():
            logits = apply_head(head, head_features(out, head.source)).numpy()
        y = labels[start:start + batch_size]
        correct += int((logits.argmax(axis=-1) == y).sum())
        total += y.size
    return correct / total


def make_teacher(kind, train, eval_set, config: EncoderConfig, epochs=40, batch_size=64, lr=1e-3,
                 weight_decay=0.03, warmup_epochs=3, seed=0, name=None) -> TeacherBundle:
    """Train a fresh encoder with cross-entropy on image labels (``cls_specialist``)
    or cell labels (``patch_specialist``), then freeze it."""
    if kind not in KINDS:
        raise ValueError(f"teacher kind must be one of {sorted(KINDS)}, got {kind!r}")
    if epochs < 1:
        raise ValueError("teacher budget must be at least one epoch")
    source = KINDS[kind]
    num_classes = train.spec.num_patterns
    params = Encoder(config).params
    head = attach_head(config.dim, num_classes, source, seed=config.seed + 1)
    params["head/w"], params["head/b"] = head.w, head.b
    labels = _labels_for(source, train)
    n = len(train)
    steps_per_epoch = n // batch_size
    opt = AdamW(weight_decay=weight_decay,
                decay_filter=lambda k: k.endswith("/w"))
    rng = np.random.default_rng([seed, 7])
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            pt = as_tensors(params, requires_grad=True)
            enc_params = {k: v for k, v in pt.items() if not k.startswith("head/")}
            out = forward(config, enc_params, train.images[idx])
            feats = {"cls": out.final_cls, "patch": out.final_patches}[source]
            logits = apply_head(head, feats, pt["head/w"], pt["head/b"])
            loss = T.cross_entropy(logits.reshape(-1, num_classes), labels[idx].reshape(-1))
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"{kind} training diverged at epoch {epoch}, step {step}: loss={loss.item()}")
            T.backward(loss)
            lr_t = lr_schedule(step, steps_per_epoch, lr, epochs, warmup_epochs)
            params = opt.step(params, {k: t.grad for k, t in pt.items()}, lr_t)
            running += loss.item()
            step += 1
        log.info("%s epoch %d loss %.4f", kind, epoch, running / steps_per_epoch)
    enc = Encoder(config, {k: v for k, v in params.items() if not k.startswith("head/")})
    head = ClassifierHead(source, params["head/w"], params["head/b"])
    bundle = TeacherBundle(name or kind, enc, head)
    if eval_set is not None:
        bundle.metrics["eval_accuracy"] = head_accuracy(enc, head, eval_set)
    return bundle
