"""Acceptance criteria 1-11, one test each.

Every test prints a single PASS/FAIL line that is repeated in the pytest
terminal summary. The three-seed reference distillations are built once per
session and dominate the runtime. Set UNIC_ACCEPTANCE_DIR to keep the
artifacts (teachers, runs, scan curves) somewhere inspectable.
"""
import configparser
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from unic import evalkit as E
from unic import losses as L
from unic import tensor as T
from unic.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from unic.datagen import decode_dataset, encode_dataset, make_dataset
from unic.encoder import EncoderConfig, as_tensors, build_encoder, forward
from unic.errors import FormatError
from unic.plan import load_plan
from unic.standardizer import StandardizerBank
from unic.teachers import RECIPES, head_accuracy, make_teacher, save_teacher
from unic.trainer import distill, step_gradients

from oracles import adaloss_ref, close, cos_ref, sl1_ref, tdrop_ref

SUITE_START = time.perf_counter()
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")
RESULTS = {}


def settings():
    cp = configparser.ConfigParser()
    cp.read(os.path.join(CONFIGS, "acceptance.ini"))
    return cp["acceptance"]


CFG = settings()
SEEDS = tuple(int(s) for s in CFG["seeds"].split(","))


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    RESULTS[number] = line
    print("\n" + line, flush=True)
    return ok


# ---------------------------------------------------------------- reference runs

@dataclass
class SeedRun:
    seed: int
    train: object
    eval: object
    teachers: dict = field(default_factory=dict)  # kind -> TeacherBundle
    teacher_probes: dict = field(default_factory=dict)  # kind -> {source: acc}
    runs: dict = field(default_factory=dict)  # p -> DistillResult
    student_probes: dict = field(default_factory=dict)
    minutes: float = 0.0


def probe_both(encoder, train, ev):
    out = {}
    for source in ("cls", "patch"):
        rows = int(CFG["patch_probe_rows"]) if source == "patch" else 0
        out[source] = E.probe_encoder(encoder, E.ProbeTask(source, source, train, ev, max_train_rows=rows))
    return out


def reference_plan(seed, p, teacher_paths, output, **overrides):
    sets = {"data.seed": str(seed), "student.seed": str(seed), "distill.seed": str(seed),
            "distill.p": str(p), "distill.output": output}
    sets.update({f"teachers.{k}": v for k, v in teacher_paths.items()})
    sets.update(overrides)
    return load_plan(os.path.join(CONFIGS, "reference.ini"), sets)


def build_seed(seed, root):
    started = time.perf_counter()
    plan0 = reference_plan(seed, 0.0, {}, root)
    run = SeedRun(seed, make_dataset(plan0.data, "train"), make_dataset(plan0.data, "eval"))
    paths = {}
    for name, kind, offset in (("cls", "cls_specialist", 100), ("patch", "patch_specialist", 200)):
        r = RECIPES[kind]
        config = EncoderConfig(dim=32, depth=r["depth"], heads=4, seed=offset + seed)
        bundle = make_teacher(kind, run.train, run.eval, config, epochs=r["epochs"], lr=r["lr"],
                              warmup_epochs=r["warmup_epochs"], seed=seed, name=name)
        paths[name] = os.path.join(root, f"teacher_{kind}.ckpt")
        save_teacher(bundle, paths[name])
        run.teachers[name] = bundle
        run.teacher_probes[name] = probe_both(bundle.encoder, run.train, run.eval)
    teachers = [run.teachers["cls"], run.teachers["patch"]]
    for p in (0.0, 0.5):
        plan = reference_plan(seed, p, paths, os.path.join(root, f"distill_p{p}"))
        run.runs[p] = distill(plan, teachers, keep_breakdowns=True)
    run.student_probes = probe_both(run.runs[0.5].student, run.train, run.eval)
    run.minutes = (time.perf_counter() - started) / 60
    with open(os.path.join(root, "summary.json"), "w") as fh:
        json.dump({"teacher_probes": run.teacher_probes, "student_probes": run.student_probes,
                   "teacher_accuracy": {k: b.metrics["eval_accuracy"] for k, b in run.teachers.items()},
                   "final_rows": {str(p): r.epoch_rows[-1] for p, r in run.runs.items()},
                   "minutes": run.minutes}, fh, indent=2)
    return run


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    path = os.environ.get("UNIC_ACCEPTANCE_DIR")
    if path:
        os.makedirs(path, exist_ok=True)
        return path
    return str(tmp_path_factory.mktemp("acceptance"))


@pytest.fixture(scope="session")
def reference(workdir):
    out = {}
    for seed in SEEDS:
        root = os.path.join(workdir, f"seed{seed}")
        os.makedirs(root, exist_ok=True)
        out[seed] = build_seed(seed, root)
    return out


# ---------------------------------------------------------------- 1. gradients

def fd_error(f, x, rng, coords=None, h=1e-5):
    """Worst relative autodiff/central-difference error over (a sample of) coordinates.

    Central differences carry round-off of about eps*|f|/h, so the denominator
    is floored at 1e-6*max(1, |f|); a structurally zero derivative then
    compares against that floor instead of against the round-off itself.
    """
    x = np.array(x, dtype=np.float64)
    xt = T.Tensor(x, requires_grad=True)
    out = f(xt)
    T.backward(out)
    floor = 1e-6 * max(1.0, abs(out.item()))
    analytic = xt.grad.reshape(-1)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None or flat.size <= coords else rng.choice(flat.size, coords, False)
    worst = 0.0
    with T.no_grad():
        for i in idx:
            xp, xm = flat.copy(), flat.copy()
            xp[i] += h
            xm[i] -= h
            num = (f(T.Tensor(xp.reshape(x.shape))).item() - f(T.Tensor(xm.reshape(x.shape))).item()) / (2 * h)
            worst = max(worst, abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), floor))
    return worst


def away_from_zero(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def weighted(out, w):
    return T.sum_(T.mul(out, T.Tensor(w)))


def binary_case(op, rng, other):
    a, b = rng.normal(size=(3, 4)), other(rng, (4,))
    if rng.random() < 0.5:
        w = rng.normal(size=(3, 4))
        return (lambda x: weighted(op(x, T.Tensor(b)), w)), a
    w = rng.normal(size=(3, 4))
    return (lambda x: weighted(op(T.Tensor(a), x), w)), b


def normal(rng, shape):
    return rng.normal(size=shape)


def layer_norm_case(rng):
    x, g, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(3, 5))
    which = rng.integers(3)
    if which == 0:
        return (lambda t: weighted(T.layer_norm(t, T.Tensor(g), T.Tensor(b)), w)), x
    if which == 1:
        return (lambda t: weighted(T.layer_norm(T.Tensor(x), t, T.Tensor(b)), w)), g
    return (lambda t: weighted(T.layer_norm(T.Tensor(x), T.Tensor(g), t), w)), b


def matmul_case(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    w = rng.normal(size=(2, 3, 5))
    if rng.random() < 0.5:
        return (lambda t: weighted(T.matmul(t, T.Tensor(b)), w)), a
    return (lambda t: weighted(T.matmul(T.Tensor(a), t), w)), b


def unary(op, sample):
    def case(rng):
        x = sample(rng, (3, 4))
        w = rng.normal(size=op(T.Tensor(x)).shape)
        return (lambda t: weighted(op(t), w)), x
    return case


def reduce_case(op):
    def case(rng):
        axis = int(rng.integers(-1, 3)) if rng.random() < 0.8 else None
        x = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=np.shape(np.sum(x, axis=axis)))
        return (lambda t: weighted(op(t, axis=axis), w)), x
    return case


def concat_case(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    w = rng.normal(size=(6, 3))
    return (lambda t: weighted(T.concat([t, T.Tensor(b)], axis=0), w)), a


def slice_case(rng):
    start = int(rng.integers(0, 3))
    w = rng.normal(size=(2, 5 - start))
    return (lambda t: weighted(T.slice_(t, (slice(1, 3), slice(start, None))), w)), rng.normal(size=(4, 5))


def cross_entropy_case(rng):
    labels = rng.integers(0, 4, size=5)
    return (lambda t: T.cross_entropy(t, labels)), rng.normal(size=(5, 4)) * 2


OP_CASES = {
    "add": lambda rng: binary_case(T.add, rng, normal),
    "sub": lambda rng: binary_case(T.sub, rng, normal),
    "mul": lambda rng: binary_case(T.mul, rng, normal),
    "div": lambda rng: binary_case(T.div, rng, away_from_zero),
    "neg": unary(T.neg, normal),
    "scale": unary(lambda t: T.scale(t, -1.7), normal),
    "sqrt": unary(T.sqrt, lambda rng, s: rng.uniform(0.3, 3, size=s)),
    "abs": unary(T.abs_, away_from_zero),
    "clamp_min": unary(lambda t: T.clamp_min(t, 0.0), away_from_zero),
    "exp": unary(T.exp, normal),
    "gelu": unary(T.gelu, lambda rng, s: rng.normal(scale=2, size=s)),
    "softmax": unary(T.softmax, normal),
    "matmul": matmul_case,
    "layer_norm": layer_norm_case,
    "cross_entropy": cross_entropy_case,
    "sum": reduce_case(T.sum_),
    "mean": reduce_case(T.mean),
    "reshape": unary(lambda t: T.reshape(t, (4, 3)), normal),
    "transpose": unary(lambda t: T.transpose(t, (1, 0)), normal),
    "concat": concat_case,
    "slice": slice_case,
}

MICRO = EncoderConfig(image_size=8, channels=3, patch_size=4, dim=8, depth=1, heads=2, mlp_ratio=4, seed=5)


def micro_case(rng):
    params = {k: v + rng.normal(scale=0.1, size=v.shape) for k, v in build_encoder(MICRO).items()}
    name = str(rng.choice(sorted(params)))
    images = rng.normal(size=(1, 3, 8, 8))
    w = rng.normal(size=(1, 5, 8))
    fixed = as_tensors(params)

    def f(x):
        p = dict(fixed)
        p[name] = x
        return weighted(T.gelu(forward(MICRO, p, images).per_layer[-1]), w)

    return f, params[name]


def test_criterion_01_gradient_suite():
    started = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for name, case in list(OP_CASES.items()) + [("micro_encoder", micro_case)]:
        errs = []
        for _ in range(100):
            f, x = case(rng)
            errs.append(fd_error(f, x, rng, coords=6 if name == "micro_encoder" else None))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - started
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and elapsed < 60
    record(1, "gradient suite", ok, f"{len(worst)} ops x 100 trials, worst rel err {max(worst.values()):.2e}"
           f" ({max(worst, key=worst.get)}), {elapsed:.1f}s" + (f"; failing {bad}" if bad else ""))
    assert ok


# ---------------------------------------------------------------- 2. loss oracles

def worked_examples():
    checks = [
        L.cosine_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0])).item() == 0.0,
        L.cosine_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item() == 1.0,
        L.cosine_loss(np.array([1.0, 0.0]), np.array([-1.0, 0.0])).item() == 2.0,
        L.smooth_l1_loss(np.zeros(2), np.zeros(2)).item() == 0.0,
        close(L.smooth_l1_loss(np.array([0.6, 0.0]), np.zeros(2)).item(), 0.18),
        L.smooth_l1_loss(np.array([2.0, 0.0]), np.zeros(2)).item() == 1.5,
        L.token_loss(np.array([0.3, -1.0]), np.array([0.3, -1.0])).item() == 0.0,
        L.token_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item() == 1.25,
        close(L.image_loss({"a": T.Tensor([0.4])}, {"a": T.Tensor(np.full((1, 16), 0.2))})[1].item(), 0.3),
        L.tdrop_coefficients(np.array([[0.5, 0.9, 0.1]]), 0.0, np.zeros((1, 3), bool))[0].tolist() == [[1, 1, 1]],
        L.tdrop_coefficients(np.array([[0.5, 0.9]]), 1.0, np.ones((1, 2), bool))[0].tolist() == [[0, 1]],
        L.tdrop_coefficients(np.array([[0.7, 0.7]]), 1.0, np.ones((1, 2), bool))[0].tolist() == [[1, 0]],
        L.adaloss_weights([2.0, 2.0, 2.0]).tolist() == [1.0, 1.0, 1.0],
        all(close(a, b) for a, b in zip(L.adaloss_weights([1.0, 3.0]), [1.5, 0.5])),
    ]
    return sum(map(bool, checks)), len(checks)


def test_criterion_02_loss_oracles():
    rng = np.random.default_rng(2024)
    failures = []
    for case in range(1000):
        d = int(rng.integers(1, 9))
        scale = 10 ** rng.uniform(-2, 1)
        s, t = rng.normal(size=d) * scale, rng.normal(size=d) * scale
        sl, cl = L.smooth_l1_loss(s, t).item(), L.cosine_loss(s, t).item()
        m = int(rng.integers(1, 5))
        losses = rng.uniform(0, 2, size=m)
        if m > 1 and rng.random() < 0.2:
            losses[1] = losses[0]
        flags = rng.random(m) < rng.uniform()
        avgs = rng.uniform(1e-3, 10, size=m)
        p = int(rng.integers(1, 6))
        cls, patch = rng.uniform(0, 2, size=1), rng.uniform(0, 2, size=(1, p))
        per, _ = L.image_loss({"a": T.Tensor(cls)}, {"a": T.Tensor(patch)})
        checks = {
            "smooth_l1": close(sl, sl1_ref(s, t)),
            "cosine": close(cl, cos_ref(s, t)),
            "token": L.token_loss(s, t).item() == 0.5 * (cl + sl),
            "tdrop": L.tdrop_coefficients(losses[None], 0.5, flags[None])[0][0].tolist()
            == tdrop_ref(losses.tolist(), flags.tolist()),
            "adaloss": all(close(a, b) for a, b in zip(L.adaloss_weights(avgs), adaloss_ref(avgs.tolist()))),
            "image": close(per["a"].item(), (cls[0] + sum(patch[0]) / p) / 2),
        }
        failures += [(case, k) for k, v in checks.items() if not v]
    passed, total = worked_examples()
    ok = not failures and passed == total
    record(2, "loss oracles", ok, f"1000 random cases, {len(failures)} mismatches; worked examples {passed}/{total}")
    assert ok


# ---------------------------------------------------------------- 3. equivalence triangle

def test_criterion_03_equivalence_triangle(reference, workdir):
    run = reference[SEEDS[0]]
    teachers = [run.teachers["cls"], run.teachers["patch"]]
    outs = {}
    for name, sets in (("tdrop0", {"distill.p": "0"}),
                       ("manual", {"distill.balancing": "manual", "distill.manual_weights": "1,1"}),
                       ("none", {"distill.balancing": "none"})):
        plan = reference_plan(SEEDS[0], 0.0, {"cls": "cls", "patch": "patch"},
                              os.path.join(workdir, "triangle", name), **sets)
        result = distill(plan, teachers, max_steps=100)
        with open(os.path.join(plan.output, "metrics.jsonl"), "rb") as fh:
            metrics = fh.read()
        outs[name] = (metrics, {k: v.tobytes() for k, v in result.student.params.items()})
    first = outs["tdrop0"]
    same = all(o == first for o in outs.values())
    steps = first[0].count(b"\n")
    record(3, "equivalence triangle", same and steps == 100,
           f"{steps} steps; metrics and parameters bitwise identical: {same}")
    assert same and steps == 100


# ---------------------------------------------------------------- 4. standardization

def test_criterion_04_standardization(reference):
    run = reference[SEEDS[0]]
    teachers = list(run.teachers.values())
    spec = run.train.spec
    bank = StandardizerBank({b.name: b.width for b in teachers})
    for step in range(200):
        # fixed teachers on fresh synthetic images: a stationary feature stream
        images = make_dataset(spec, "fresh", epoch=step, size=64).images
        for b in teachers:
            out = b.encoder.encode(images)
            bank.update(b.name, "cls", out.final_cls.numpy())
            bank.update(b.name, "patch", out.final_patches.numpy())
    worst_mean, std_range = 0.0, [np.inf, -np.inf]
    for b in teachers:
        out = b.encoder.encode(run.eval.images)
        for kind, y in (("cls", out.final_cls.numpy()), ("patch", out.final_patches.numpy())):
            z = bank.standardize(b.name, kind, y).reshape(-1, b.width)
            worst_mean = max(worst_mean, float(np.abs(z.mean(axis=0)).max()))
            sd = z.std(axis=0)
            std_range = [min(std_range[0], sd.min()), max(std_range[1], sd.max())]
    ok = worst_mean < 0.1 and 0.8 <= std_range[0] and std_range[1] <= 1.2
    record(4, "standardization", ok, f"max |mean| {worst_mean:.3f}, std in [{std_range[0]:.3f}, {std_range[1]:.3f}]"
           " over 2 teachers x 2 token types after 200 steps")
    assert ok


# ---------------------------------------------------------------- 5. ladder

def test_criterion_05_ladder_identity_and_wiring(reference, workdir):
    run = reference[SEEDS[0]]
    teachers = [run.teachers["cls"], run.teachers["patch"]]
    names = {"cls": "cls", "patch": "patch"}
    top = reference_plan(SEEDS[0], 0.5, names, os.path.join(workdir, "ladder_top"), **{"distill.ladder": "false"})
    lad = reference_plan(SEEDS[0], 0.5, names, os.path.join(workdir, "ladder"),
                         **{"distill.checkpoint_every": "50", "distill.checkpoint_dtype": "f64"})
    a = distill(top, teachers, write_files=False, max_steps=1, keep_breakdowns=True).breakdowns[0]
    b = distill(lad, teachers, write_files=False, max_steps=1, keep_breakdowns=True).breakdowns[0]
    identical = a.image_total.tobytes() == b.image_total.tobytes() and \
        a.teacher_total.tobytes() == b.teacher_total.tobytes()
    distill(lad, teachers, max_steps=50)
    grads = step_gradients(lad, teachers, os.path.join(lad.output, "step_000050.ckpt"), 50)
    rungs = {k: float(np.linalg.norm(g)) for k, g in grads.items() if "/rung_" in k}
    zero = [k for k, v in rungs.items() if not v > 0]
    ok = identical and rungs and not zero
    record(5, "ladder identity at init", ok, f"step-0 losses bitwise equal: {identical}; {len(rungs)} rung arrays, "
           f"{len(zero)} with zero gradient after 50 steps (min norm {min(rungs.values()):.2e})")
    assert ok


# ---------------------------------------------------------------- 6. tdrop balancing

def final_gap(result):
    row = result.epoch_rows[-1]
    return abs(row["cls_loss"] - row["patch_loss"])


def argmax_always_kept(result):
    for bd in result.breakdowns:
        totals = 0.5 * (bd.cls_loss + bd.patch_loss)
        for img in range(totals.shape[0]):
            kept = tdrop_ref(totals[img].tolist(), [True] * totals.shape[1])
            if bd.alpha[img, kept.index(1.0)] != 1.0:
                return False
    return True


def test_criterion_06_tdrop_balancing(reference):
    gaps = {p: [final_gap(reference[s].runs[p]) for s in SEEDS] for p in (0.0, 0.5)}
    ratio = np.mean(gaps[0.5]) / np.mean(gaps[0.0])
    kept = all(argmax_always_kept(reference[s].runs[p]) for s in SEEDS for p in (0.0, 0.5))
    steps = sum(len(reference[s].runs[0.5].breakdowns) for s in SEEDS)
    ok = ratio <= float(CFG["gap_ratio"]) and kept
    per_seed = ", ".join(f"s{s}: {a:.3f}->{b:.3f}" for s, a, b in zip(SEEDS, gaps[0.0], gaps[0.5]))
    record(6, "tdrop balancing", ok, f"mean gap ratio {ratio:.3f} (need <= {CFG['gap_ratio']}; {per_seed}); "
           f"argmax teacher kept in every image of all {steps} tdrop steps: {kept}")
    assert ok


# ---------------------------------------------------------------- 7. complementarity

def test_criterion_07_complementarity(reference):
    margin = float(CFG["probe_margin"])
    lines, ok = [], True
    for s in SEEDS:
        r = reference[s]
        g = r.student_probes["cls"] - r.teacher_probes["patch"]["cls"]
        c = r.student_probes["patch"] - r.teacher_probes["cls"]["patch"]
        ok &= g >= margin and c >= margin
        lines.append(f"s{s}: global {r.student_probes['cls']:.3f} vs {r.teacher_probes['patch']['cls']:.3f}, "
                     f"per-cell {r.student_probes['patch']:.3f} vs {r.teacher_probes['cls']['patch']:.3f}")
    record(7, "complementarity retention", ok, f"margin >= {margin}; " + "; ".join(lines))
    assert ok


def test_reference_teachers_are_complementary(reference):
    """Precondition of criteria 6-8 (not a numbered criterion)."""
    floor = float(CFG["teacher_min_accuracy"])
    for s in SEEDS:
        r = reference[s]
        assert r.teachers["cls"].metrics["eval_accuracy"] > floor
        assert r.teachers["patch"].metrics["eval_accuracy"] > floor
        assert r.teacher_probes["cls"]["patch"] < r.teacher_probes["patch"]["patch"]
        assert r.teacher_probes["patch"]["cls"] < r.teacher_probes["cls"]["cls"]


# ---------------------------------------------------------------- 8. utility scans

def test_criterion_08_utility_scans(reference, workdir):
    band, tol, frac = float(CFG["prune_band"]), float(CFG["pca_full_tolerance"]), float(CFG["chance_fraction"])
    failures, counts, info = [], 0, []
    for s in SEEDS:
        r = reference[s]
        models = {"student": r.runs[0.5].student, "cls_specialist": r.teachers["cls"].encoder,
                  "patch_specialist": r.teachers["patch"].encoder}
        task = E.ProbeTask("global", "cls", r.train, r.eval)
        prune_grid = [i / 10 for i in range(10)]
        prune = E.utility_scan(models, "prune", prune_grid, task)
        pca = E.utility_scan(models, "pca", E.halving_grid(32), task)
        out = os.path.join(workdir, f"seed{s}")
        with open(os.path.join(out, "curves_prune.csv"), "w") as fh:
            fh.write(E.curves_to_csv(prune))
        with open(os.path.join(out, "curves_pca.csv"), "w") as fh:
            fh.write(E.curves_to_csv(pca))
        counts += sum(len(c.x) for c in prune + pca)
        chance = 1.0 / r.train.spec.num_patterns
        for c in prune:
            for j in range(1, len(c.y)):
                if c.y[j] > min(c.y[:j]) + band:
                    failures.append(f"s{s} {c.model} prune rises at {c.x[j]}")
        for c in pca:
            if abs(c.y[0]) > tol:
                failures.append(f"s{s} {c.model} pca k=d off by {c.y[0]:+.3f}")
            smallest = c.baseline + c.y[-1]
            if smallest - chance > frac * (c.baseline - chance):
                failures.append(f"s{s} {c.model} pca k={c.x[-1]:g} acc {smallest:.3f} not near chance")
        drop = {c.model: -np.mean([y for x, y in zip(c.x, c.y) if x >= 0.5]) for c in prune}
        info.append(f"s{s} mean drop at ratio>=0.5: " + ", ".join(f"{k} {v:.3f}" for k, v in drop.items()))
    expected = len(SEEDS) * 3 * (10 + len(E.halving_grid(32)))
    ok = not failures and counts == expected
    record(8, "utility scans", ok, f"{counts}/{expected} curve points; "
           + ("; ".join(failures) if failures else "all monotone/PCA checks hold")
           + " | informational: " + "; ".join(info))
    assert ok


# ---------------------------------------------------------------- 9. plug and play

def test_criterion_09_plug_and_play_identity(reference):
    lines, ok = [], True
    for s in SEEDS:
        r = reference[s]
        for name, b in r.teachers.items():
            proj = (lambda o: o.final_cls) if b.head.source == "cls" else (lambda o: o.final_patches)
            got = E.plug_and_play(b.encoder, proj, b.head, r.eval)
            want = head_accuracy(b.encoder, b.head, r.eval)
            ok &= got == want == b.metrics["eval_accuracy"]
            lines.append(f"s{s}/{name} {got:.4f}")
    record(9, "plug-and-play identity", ok, "exact match of head accuracy: " + ", ".join(lines))
    assert ok


# ---------------------------------------------------------------- 10. determinism and formats

def test_criterion_10_determinism_and_formats(reference, workdir):
    run = reference[SEEDS[0]]
    teachers = [run.teachers["cls"], run.teachers["patch"]]
    files = {}
    for workers in (1, 2):
        plan = reference_plan(SEEDS[0], 0.5, {"cls": "cls", "patch": "patch"},
                              os.path.join(workdir, f"workers{workers}"), **{"distill.workers": str(workers)})
        distill(plan, teachers, max_steps=70)
        files[workers] = {}
        for name in ("metrics.jsonl", "epochs.csv", "student.ckpt"):
            with open(os.path.join(plan.output, name), "rb") as fh:
                files[workers][name] = fh.read()
    deterministic = files[1] == files[2]

    arrays = load_checkpoint(os.path.join(workdir, "workers1", "student.ckpt"))
    path = os.path.join(workdir, "roundtrip.ckpt")
    save_checkpoint(arrays, path)
    back = load_checkpoint(path)
    ckpt_ok = list(back) == list(arrays) and all(back[k].tobytes() == arrays[k].tobytes() for k in arrays)
    with open(path, "rb") as fh:
        ckpt_ok &= fh.read() == files[1]["student.ckpt"]
    buf = encode_dataset(run.train)
    ds = decode_dataset(buf)
    data_ok = encode_dataset(ds) == buf and all(
        getattr(ds, k).tobytes() == getattr(run.train, k).tobytes() for k in ("images", "labels", "cell_labels"))
    rejected = 0
    for blob, decode in ((encode_checkpoint(arrays), decode_checkpoint), (buf, decode_dataset)):
        bad = bytearray(blob)
        bad[0] ^= 0xFF
        try:
            decode(bytes(bad))
        except FormatError:
            rejected += 1
    ok = deterministic and ckpt_ok and data_ok and rejected == 2
    record(10, "determinism and formats", ok, f"workers 1 vs 2 byte-identical: {deterministic}; checkpoint "
           f"round-trip: {ckpt_ok}; dataset round-trip: {data_ok}; corrupted headers rejected: {rejected}/2")
    assert ok


# ---------------------------------------------------------------- 11. budget (runs last)

def test_criterion_11_budget(reference):
    minutes = (time.perf_counter() - SUITE_START) / 60
    per_seed = ", ".join(f"s{s} {reference[s].minutes:.1f}" for s in SEEDS)
    ok = minutes < float(CFG["budget_minutes"])
    record(11, "budget", ok, f"{minutes:.1f} min for the acceptance suite (limit {CFG['budget_minutes']}); "
           f"reference build per seed: {per_seed} min")
    assert ok
