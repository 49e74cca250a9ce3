"""Frozen-feature evaluation: probes, plug-and-play, pruning and PCA scans."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from . import tensor as T
from .encoder import Encoder, apply_head
from .errors import ConfigError, ContractError, DimensionError
from .tensor import log_softmax_np

L2_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
PRUNE_GRID = tuple(r / 10 for r in range(10))


@dataclass
class AnalysisCurve:
    model: str
    task: str
    scan: str
    x: List[float] = field(default_factory=list)
    y: List[float] = field(default_factory=list)
    baseline: float = 0.0


# ---------------------------------------------------------------- features

def extract_features(encoder: Encoder, dataset, source="cls", batch_size=256):
    """Frozen features and matching labels.

    ``cls`` and ``gap`` give one row per image with the image label; ``patch``
    gives one row per cell (image-major, then row-major cells) with the cell
    label.
    """
    cls, patches = encoder.encode_batched(dataset.images, batch_size)
    if source == "cls":
        return cls, dataset.labels.copy()
    if source == "gap":
        return patches.mean(axis=1), dataset.labels.copy()
    if source == "patch":
        return patches.reshape(-1, patches.shape[-1]), dataset.cell_labels.reshape(-1).copy()
    raise ConfigError(f"unknown feature source {source!r}")


# ---------------------------------------------------------------- logistic regression

def _fit_logreg(x, y, num_classes, l2, max_epochs=2000, tol=1e-6):
    """Multinomial logistic regression by accelerated full-batch gradient descent.

    ``x`` is assumed standardized; the bias is not regularized.
    """
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    reg = np.full((d + 1, 1), l2)
    reg[-1] = 0.0
    # Lipschitz bound of the softmax loss gradient
    lip = 0.5 * np.linalg.norm(xb, 2) ** 2 / n + l2
    step = 1.0 / lip
    w = np.zeros((d + 1, num_classes))
    w_prev = w
    for epoch in range(max_epochs):
        look = w + (epoch / (epoch + 3.0)) * (w - w_prev)
        p = np.exp(log_softmax_np(xb @ look))
        grad = xb.T @ (p - onehot) / n + reg * look
        if np.linalg.norm(grad) < tol:
            w = look
            break
        w_prev, w = w, look - step * grad
    return w


class LinearProbe:
    """Logistic regression on standardized features."""

    def __init__(self, l2=1e-3, max_epochs=2000):
        self.l2 = l2
        self.max_epochs = max_epochs

    def fit(self, x, y, num_classes=None):
        x = np.asarray(x, dtype=np.float64)
        self.num_classes = int(num_classes or (y.max() + 1))
        self.mu = x.mean(axis=0)
        self.sd = x.std(axis=0)
        self.sd[self.sd < 1e-12] = 1.0
        self.w = _fit_logreg((x - self.mu) / self.sd, y, self.num_classes, self.l2, self.max_epochs)
        return self

    def predict(self, x):
        xs = (np.asarray(x, dtype=np.float64) - self.mu) / self.sd
        return (xs @ self.w[:-1] + self.w[-1]).argmax(axis=1)

    def accuracy(self, x, y):
        return float((self.predict(x) == y).mean())


def linear_probe(train_x, train_y, eval_x, eval_y, l2_grid=L2_GRID, max_epochs=2000,
                 val_fraction=0.2, seed=0, return_l2=False):
    """Eval top-1 of a logistic regression whose l2 strength is picked on a held-out split."""
    train_y = np.asarray(train_y)
    if np.unique(train_y).size < 2:
        raise ContractError("linear probe needs at least two classes in the training set")
    num_classes = int(max(train_y.max(), np.max(eval_y)) + 1)
    n = len(train_y)
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    val_idx, fit_idx = order[:n_val], order[n_val:]
    best_l2, best_acc = l2_grid[0], -1.0
    for l2 in l2_grid:
        probe = LinearProbe(l2, max_epochs).fit(train_x[fit_idx], train_y[fit_idx], num_classes)
        acc = probe.accuracy(train_x[val_idx], train_y[val_idx])
        if acc > best_acc:
            best_l2, best_acc = l2, acc
    probe = LinearProbe(best_l2, max_epochs).fit(train_x, train_y, num_classes)
    acc = probe.accuracy(eval_x, eval_y)
    return (acc, best_l2) if return_l2 else acc


def knn_probe(train_x, train_y, eval_x, eval_y, k=20, chunk=512):
    """Cosine-similarity k-NN majority vote; similarity ties go to the lower train index,
    vote ties to the smaller class id."""
    train_y = np.asarray(train_y)
    if not 1 <= k <= len(train_y):
        raise ContractError(f"k={k} must lie in 1..{len(train_y)}")
    num_classes = int(max(train_y.max(), np.max(eval_y)) + 1)

    def unit(x):
        x = np.asarray(x, dtype=np.float64)
        return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)

    tr, ev = unit(train_x), unit(eval_x)
    preds = []
    for start in range(0, len(ev), chunk):
        sims = ev[start:start + chunk] @ tr.T
        nn = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        votes = np.zeros((len(nn), num_classes), dtype=np.int64)
        for j in range(k):
            np.add.at(votes, (np.arange(len(nn)), train_y[nn[:, j]]), 1)
        preds.append(votes.argmax(axis=1))
    return float((np.concatenate(preds) == np.asarray(eval_y)).mean())


# ---------------------------------------------------------------- plug and play

def teacher_projector(pset, teacher, token_type, bank=None):
    """Callable mapping student outputs into ``teacher``'s raw feature space.

    Projectors are trained against standardized targets, so when a
    standardizer bank is given its statistics are undone before the result
    reaches the teacher's own classifier.
    """
    state = None
    if bank is not None and bank.enabled:
        state = bank[teacher, token_type]
        if not state.initialized:
            state = None

    def project(out):
        with T.no_grad():
            y = pset.project(pset.params, teacher, token_type, out.per_layer).numpy()
        if state is not None:
            y = y * np.sqrt(state.var + state.eps) + state.mean
        return y

    return project


def plug_and_play(student: Encoder, projector, head, dataset, batch_size=256):
    """Top-1 of a teacher's own classifier applied to projected student features.

    ``projector`` maps an EncoderOutput to features in the teacher's space
    ((B, d_t) for a CLS head, (B, P, d_t) for a dense or GAP head); ``None``
    feeds the student's own features straight into the head.
    """
    correct, total = 0, 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        out = student.encode(images)
        with T.no_grad():
            if projector is None:
                feats = out.final_cls if head.source == "cls" else out.final_patches
            else:
                feats = T.as_tensor(projector(out))
            if head.source == "gap":
                feats = T.mean(feats, axis=1)
            if feats.shape[-1] != head.w.shape[0]:
                raise DimensionError(f"features of width {feats.shape[-1]} do not fit a head expecting "
                                     f"{head.w.shape[0]}")
            pred = apply_head(head, feats).numpy().argmax(axis=-1)
        if head.source == "patch":
            labels = dataset.cell_labels[start:start + batch_size]
        else:
            labels = dataset.labels[start:start + batch_size]
        correct += int((pred == labels).sum())
        total += labels.size
    return correct / total


# ---------------------------------------------------------------- pruning

def prunable_names(params):
    """Weight matrices of linear layers inside transformer blocks."""
    return [k for k in params if k.startswith("blocks/") and k.endswith("/w")]


def prune_weights(params, ratio, mode="global", names=None):
    """Copy of ``params`` with the smallest-|w| fraction ``ratio`` of prunable weights zeroed.

    Exactly floor(ratio * count) entries are zeroed; magnitude ties go to the
    lower flattened index (parameters concatenated in dict order).
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"pruning ratio must lie in [0, 1], got {ratio}")
    names = prunable_names(params) if names is None else list(names)
    out = {k: np.array(v, copy=True) for k, v in params.items()}
    groups = [names] if mode == "global" else [[n] for n in names]
    if mode not in ("global", "layer"):
        raise ConfigError(f"unknown pruning mode {mode!r}")
    for group in groups:
        flat = np.concatenate([np.abs(np.asarray(params[n])).reshape(-1) for n in group])
        count = int(np.floor(ratio * flat.size + 1e-9))
        mask = np.ones(flat.size, dtype=bool)
        mask[np.argsort(flat, kind="stable")[:count]] = False
        offset = 0
        for n in group:
            size = out[n].size
            out[n] = np.where(mask[offset:offset + size].reshape(out[n].shape), out[n], 0.0)
            offset += size
    return out


# ---------------------------------------------------------------- PCA

@dataclass
class PCATransform:
    mean: np.ndarray
    components: np.ndarray  # (d, k), columns by decreasing eigenvalue
    eigenvalues: np.ndarray
    whiten: bool = True

    def apply(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mean) @ self.components
        if self.whiten:
            z = z / np.sqrt(self.eigenvalues + 1e-8)
        return z


def pca_whiten_fit(train_x, k, whiten=True):
    x = np.asarray(train_x, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= d:
        raise ConfigError(f"k={k} must lie in 1..{d}")
    if n < k:
        raise ConfigError(f"need at least k={k} rows, got {n}")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False).reshape(d, d)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1][:k]
    vecs = vecs[:, order]
    # deterministic sign: largest-magnitude entry of each axis is positive
    signs = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    return PCATransform(mean, vecs * signs, np.maximum(vals[order], 0.0), whiten)


def pca_whiten_apply(transform: PCATransform, x):
    return transform.apply(x)


# ---------------------------------------------------------------- scans

@dataclass
class ProbeTask:
    name: str
    source: str
    train: object
    eval: object
    l2_grid: tuple = L2_GRID
    max_epochs: int = 2000
    max_train_rows: int = 0  # subsample probe rows when > 0 (dense tasks)


def _probe_rows(task, x, y, seed=0):
    if task.max_train_rows and len(y) > task.max_train_rows:
        idx = np.sort(np.random.default_rng(seed).permutation(len(y))[:task.max_train_rows])
        return x[idx], y[idx]
    return x, y


def probe_encoder(encoder: Encoder, task: ProbeTask, transform=None):
    trx, tr_y = extract_features(encoder, task.train, task.source)
    evx, ev_y = extract_features(encoder, task.eval, task.source)
    trx, tr_y = _probe_rows(task, trx, tr_y)
    if transform is not None:
        trx, evx = transform(trx, evx)
    return linear_probe(trx, tr_y, evx, ev_y, task.l2_grid, task.max_epochs)


def halving_grid(dim, smallest=1):
    grid = []
    k = dim
    while k >= smallest:
        grid.append(k)
        k //= 2
    return grid


def utility_scan(models: Dict[str, Encoder], scan, grid, task: ProbeTask, prune_mode="global"):
    """Change in probe top-1 under pruning or PCA whitening, per model and grid point."""
    curves = []
    for name, enc in models.items():
        if scan == "prune":
            base = probe_encoder(enc, task)
            curve = AnalysisCurve(name, task.name, scan, baseline=base)
            for ratio in grid:
                pruned = Encoder(enc.config, prune_weights(enc.params, ratio, prune_mode))
                acc = base if ratio == 0 else probe_encoder(pruned, task)
                curve.x.append(float(ratio))
                curve.y.append(acc - base)
        elif scan == "pca":
            trx, tr_y = extract_features(enc, task.train, task.source)
            evx, ev_y = extract_features(enc, task.eval, task.source)
            trx, tr_y = _probe_rows(task, trx, tr_y)
            base = linear_probe(trx, tr_y, evx, ev_y, task.l2_grid, task.max_epochs)
            curve = AnalysisCurve(name, task.name, scan, baseline=base)
            for k in grid:
                if k > trx.shape[1]:
                    raise ConfigError(f"PCA dimension {k} exceeds feature width {trx.shape[1]}")
                pca = pca_whiten_fit(trx, int(k))
                acc = linear_probe(pca.apply(trx), tr_y, pca.apply(evx), ev_y, task.l2_grid, task.max_epochs)
                curve.x.append(float(k))
                curve.y.append(acc - base)
        else:
            raise ConfigError(f"unknown scan {scan!r}")
        curves.append(curve)
    return curves


def curves_to_csv(curves):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "x", "y"])
    for c in curves:
        for x, y in zip(c.x, c.y):
            writer.writerow([c.model, repr(x), repr(y)])
    return buf.getvalue()


def curves_report(curves):
    lines = []
    for c in curves:
        lines.append(f"{c.scan} scan on {c.task}: {c.model} (baseline top-1 {c.baseline:.4f})")
        for x, y in zip(c.x, c.y):
            lines.append(f"  x={x:g}  change={y:+.4f}")
    return "\n".join(lines) + "\n"


def curves_gnuplot(curves):
    """One data block per model, separated by two blank lines."""
    blocks = []
    for c in curves:
        rows = [f"# {c.model}"] + [f"{x:g} {y:.6f}" for x, y in zip(c.x, c.y)]
        blocks.append("\n".join(rows))
    return "\n\n\n".join(blocks) + "\n"
