"""Acceptance criteria 1-9; each test prints one PASS/FAIL line."""

import csv
import subprocess
import sys
import time

import numpy as np
import pytest

from advpnml import harness
from advpnml.attacks import AttackConfig, adaptive_bpda_pgd, fgsm, hsja, pgd
from advpnml.datasets import load_mnist_idx, write_idx
from advpnml.errors import ConfigError, ConsistencyError, FormatError
from advpnml.models import (
    CheckpointFormatError,
    ModelSpec,
    forward_logits,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from advpnml.pnml import EndToEndModel, RefineConfig, pnml_predict_batch
from advpnml.tensor import softmax

from conftest import CONFIGS, ROOT, reference_run

MLP = ModelSpec.mlp()
CONVNET = ModelSpec.mnist_convnet()


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


def _rows(path):
    return harness.read_table(path)


def _acc(rows, attack, lam):
    return next(float(r["adv_acc"]) for r in rows if r["attack"] == attack and r["lambda"] == lam)


# ------------------------------------------------------------------ 1


def test_criterion_1_gradient_oracles(report):
    """Finite-difference suite over every differentiable op and both models."""
    started = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         "tests/test_tensor.py", "tests/test_models.py", "-k", "gradient"],
        cwd=ROOT, capture_output=True, text=True,
    )
    seconds = time.perf_counter() - started
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and seconds <= 60
    assert report(1, ok, f"{summary}; {seconds:.1f}s"), proc.stdout[-3000:]


# ------------------------------------------------------------------ 2


@pytest.mark.parametrize("spec", [MLP, CONVNET], ids=["mlp", "convnet"])
def test_criterion_2_zero_strength_identity(spec, report):
    rng = np.random.default_rng(2)
    params = init_params(spec, 2, np.float64)
    if spec is MLP:
        x = rng.standard_normal((1000, 2)) * 2
        cfg = RefineConfig(0.0)
    else:
        x = rng.uniform(0, 1, (1000,) + spec.input_shape)
        cfg = RefineConfig(0.0, clamp=(0.0, 1.0))
    started = time.perf_counter()
    batch = pnml_predict_batch(params, x, cfg)
    base = softmax(forward_logits(params, x).data)
    err = float(np.max(np.abs(batch.q - base)))
    same = bool(np.all(batch.labels == np.argmax(base, axis=1)))
    ok = err <= 1e-6 and same
    assert report(2, ok, f"{spec.kind}: max |q - softmax| = {err:.2e}, argmax equal = {same}, "
                         f"{time.perf_counter() - started:.1f}s")


# ------------------------------------------------------------------ 3


def test_criterion_3_toy_reproduction(toy_run, report):
    rows = _rows(toy_run.out / "results.csv")
    plain_pgd, defended_pgd = _acc(rows, "pgd", ""), _acc(rows, "pgd", "0.6")
    plain_nat, defended_nat = _acc(rows, "natural", ""), _acc(rows, "natural", "0.6")
    gain, drop = defended_pgd - plain_pgd, plain_nat - defended_nat
    ok = gain >= 0.05 and drop <= 0.02 and toy_run.seconds <= 300
    assert report(3, ok, f"PGD {plain_pgd:.3f} -> {defended_pgd:.3f} (+{gain * 100:.1f} pts), "
                         f"natural {plain_nat:.3f} -> {defended_nat:.3f}, {toy_run.seconds:.0f}s")


# ------------------------------------------------------------------ 4


@pytest.mark.slow
def test_criterion_4_mnist_desk_direction(desk_run, report):
    rows = _rows(desk_run.out / "results.csv")
    lam = "0.1"
    plain_pgd, defended_pgd = _acc(rows, "pgd", ""), _acc(rows, "pgd", lam)
    plain_nat, defended_nat = _acc(rows, "natural", ""), _acc(rows, "natural", lam)
    adaptive = _acc(rows, "adaptive", lam)
    a = defended_pgd >= plain_pgd + 0.005
    b = plain_nat - defended_nat <= 0.005
    c = adaptive <= defended_pgd + 0.005
    ok = a and b and c and desk_run.seconds <= 7200
    assert report(4, ok, f"(a) PGD {plain_pgd:.3f} -> {defended_pgd:.3f} {a}; "
                         f"(b) natural {plain_nat:.3f} -> {defended_nat:.3f} {b}; "
                         f"(c) adaptive {adaptive:.3f} {c}; {desk_run.seconds / 60:.0f} min")


# ------------------------------------------------------------------ 5


def _violations(x, out, eps, clamp):
    dev = np.abs(out.astype(np.float64) - x.astype(np.float64)).reshape(len(x), -1).max(axis=1)
    bad = dev > eps + 1e-6
    if clamp is not None:
        flat = out.reshape(len(x), -1)
        bad |= (flat < clamp[0] - 1e-6).any(axis=1) | (flat > clamp[1] + 1e-6).any(axis=1)
    return int(bad.sum())


def test_criterion_5_attack_validity(report):
    rng = np.random.default_rng(5)
    models = [init_params(MLP, s, dt) for s in range(4) for dt in (np.float32, np.float64)]
    invocations = violations = 0
    started = time.perf_counter()
    call = 0
    while invocations < 100_000:
        params = models[call % len(models)]
        clamp = (0.0, 1.0) if rng.random() < 0.5 else None
        n = 100
        x = rng.uniform(0, 1, (n, 2)) if clamp else rng.standard_normal((n, 2)) * 2
        x = x.astype(params.dtype)
        y = rng.integers(0, 2, n)
        eps = float(rng.choice([0.0, rng.uniform(0, 0.05), rng.uniform(0, 1.5)]))
        kind = ("fgsm", "pgd", "pgd", "adaptive")[call % 4]
        if kind == "fgsm":
            out = fgsm(params, x, y, eps, str(rng.choice(["ascend", "descend"])), clamp).x_adv
        else:
            cfg = AttackConfig(
                eps,
                float(rng.uniform(0.01, 1.0)),
                int(rng.integers(1, 6)),
                int(rng.integers(1, 3)),
                target=None if rng.random() < 0.7 else int(rng.integers(0, 2)),
                clamp=clamp,
                seed=call,
                random_start=bool(rng.random() < 0.8),
            )
            if kind == "pgd":
                out = pgd(params, x, y, cfg).x_adv
            else:
                model = EndToEndModel(params, RefineConfig(float(rng.uniform(0, 1)), clamp=clamp))
                out = adaptive_bpda_pgd(model, x, y, cfg).x_adv
        violations += _violations(x, out, eps, clamp)
        invocations += n
        call += 1
    # a few convnet batches on image-shaped inputs
    conv = init_params(CONVNET, 0)
    for j in range(5):
        x = rng.uniform(0, 1, (8,) + CONVNET.input_shape).astype(np.float32)
        y = rng.integers(0, 10, 8)
        out = pgd(conv, x, y, AttackConfig(0.3, 0.1, 2, seed=j)).x_adv
        violations += _violations(x, out, 0.3, (0.0, 1.0))
        invocations += 8
    ok = violations == 0 and invocations >= 100_000
    assert report(5, ok, f"{invocations} invocations, {violations} violations, "
                         f"{time.perf_counter() - started:.0f}s")


# ------------------------------------------------------------------ 6


@pytest.mark.slow
def test_criterion_6_refinement_precision(desk_run, desk_params, desk_test, report):
    pgd_inputs = next(v for (name, _), v in desk_run.cache.items() if name == "pgd")
    accs = {}
    for iters in (1, 4):
        cfg = RefineConfig(0.1, iterations=iters, clamp=(0.0, 1.0))
        pred = pnml_predict_batch(desk_params, pgd_inputs, cfg).labels
        accs[iters] = float(np.mean(pred == desk_test.labels))
    ok = accs[1] >= accs[4] - 0.003
    assert report(6, ok, f"PGD accuracy with 1-step refinement {accs[1]:.3f}, 4-step {accs[4]:.3f}")


# ------------------------------------------------------------------ 7


def _linear(w, b):
    spec = ModelSpec.mlp((len(w), 2))
    weight = np.stack([np.zeros(len(w)), w], axis=1)
    return init_params(spec, 0, np.float64).replace({"fc0.weight": weight, "fc0.bias": np.array([0.0, b])})


def _argmax_oracle(params):
    return lambda xs: np.argmax(forward_logits(params, xs).data, axis=1)


def test_criterion_7a_hsja_linear(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for seed in range(10):
        w = rng.standard_normal(10)
        x = rng.standard_normal(10)
        params = _linear(w, 0.5)
        y = int(w @ x + 0.5 > 0)
        analytic = abs(w @ x + 0.5) / np.linalg.norm(w)
        out = hsja(_argmax_oracle(params), x, y, query_budget=5000, seed=seed, clamp=None)
        worst = max(worst, abs(float(out.loss) - analytic) / analytic)
    assert report(7, worst <= 0.05, f"linear model: worst relative distance error {worst * 100:.2f}% over 10 cases")


HSJA_SAMPLES = 10


@pytest.mark.slow
def test_criterion_7b_hsja_mnist(desk_params, desk_test, report):
    defense = RefineConfig(0.1, clamp=(0.0, 1.0))
    plain_oracle = _argmax_oracle(desk_params)

    def defended_oracle(xs):
        return pnml_predict_batch(desk_params, np.asarray(xs, dtype=desk_params.dtype), defense).labels

    x, y = desk_test.inputs, desk_test.labels
    ok_both = (plain_oracle(x) == y) & (pnml_predict_batch(desk_params, x, defense).labels == y)
    picked = np.flatnonzero(ok_both)[:HSJA_SAMPLES]
    dist = {"undefended": [], "defended": []}
    for i in picked:
        for name, oracle in (("undefended", plain_oracle), ("defended", defended_oracle)):
            res = hsja(oracle, x[i], int(y[i]), query_budget=5000, seed=int(i))
            dist[name].append(float(res.loss))
    med = {k: float(np.median(v)) for k, v in dist.items()}
    ok = med["defended"] > med["undefended"]
    assert report(7, ok, f"MNIST median L2 over {len(picked)} samples: undefended {med['undefended']:.3f}, "
                         f"defended {med['defended']:.3f}")


# ------------------------------------------------------------------ 8


def _csv_cells(path):
    """Rows of a CSV with wall-clock columns dropped."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [i for i, c in enumerate(rows[0]) if c != "wall_time"]
    return [[r[i] for i in keep] for r in rows]


def _same_run(a, b):
    diffs = []
    for name in ("results.csv", "train_log.csv"):
        if _csv_cells(a / name) != _csv_cells(b / name):
            diffs.append(name)
    if (a / "model.ckpt").read_bytes() != (b / "model.ckpt").read_bytes():
        diffs.append("model.ckpt")
    return diffs


def test_criterion_8a_toy_determinism(toy_run, tmp_path, report):
    from conftest import run_pipeline

    again = run_pipeline(CONFIGS / "toy.json", tmp_path)
    diffs = _same_run(toy_run.out, again.out)
    assert report(8, not diffs, f"toy rerun differs in {diffs}" if diffs else "toy rerun identical")


@pytest.mark.slow
def test_criterion_8b_mnist_determinism(desk_run, report):
    ref = reference_run(CONFIGS / "mnist_desk.json")
    diffs = _same_run(desk_run.out, ref)
    assert report(8, not diffs, f"MNIST rerun differs in {diffs}" if diffs else f"MNIST run identical to {ref.name}")


# ------------------------------------------------------------------ 9


def test_criterion_9_formats(tmp_path, report):
    checks = {}
    images = np.random.default_rng(9).integers(0, 256, (3, 28, 28), dtype=np.uint8)
    labels = np.array([1, 2, 3], dtype=np.uint8)
    write_idx(images, labels, tmp_path / "i", tmp_path / "l")
    loaded = load_mnist_idx(tmp_path / "i", tmp_path / "l")
    checks["idx round trip"] = loaded.labels.tolist() == [1, 2, 3]

    raw = bytearray((tmp_path / "i").read_bytes())
    raw[3] = 0x09
    (tmp_path / "bad_magic").write_bytes(bytes(raw))
    (tmp_path / "short_labels").write_bytes((tmp_path / "l").read_bytes()[:-1])
    lab = bytearray((tmp_path / "l").read_bytes())
    lab[7] = 4
    (tmp_path / "count").write_bytes(bytes(lab))
    for name, (ipath, lpath, error) in {
        "wrong magic": ("bad_magic", "l", FormatError),
        "truncated": ("i", "short_labels", OSError),
        "count mismatch": ("i", "count", ConsistencyError),
    }.items():
        try:
            load_mnist_idx(tmp_path / ipath, tmp_path / lpath)
            checks[name] = False
        except error:
            checks[name] = True

    for spec in (MLP, CONVNET):
        for dtype in (np.float32, np.float64):
            params = init_params(spec, 4, dtype)
            save_checkpoint(params, tmp_path / "m.ckpt")
            checks[f"checkpoint {spec.kind} {np.dtype(dtype).name}"] = load_checkpoint(tmp_path / "m.ckpt").bitwise_equal(params)
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    try:
        load_checkpoint(tmp_path / "junk.ckpt")
        checks["checkpoint bad magic"] = False
    except CheckpointFormatError:
        checks["checkpoint bad magic"] = True

    doc = {"experiment_id": "x", "seed": 0, "dataset": {"kind": "synthetic"}, "model": {"kind": "mlp"}}
    harness.validate_config(doc)
    for path in ([], ["dataset"], ["model"]):
        bad = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
        target = bad
        for key in path:
            target = target[key]
        target["unexpected"] = 1
        try:
            harness.validate_config(bad)
            checks[f"unknown key at /{'/'.join(path)}"] = False
        except ConfigError:
            checks[f"unknown key at /{'/'.join(path)}"] = True

    failed = [k for k, v in checks.items() if not v]
    assert report(9, not failed, f"{len(checks)} checks, failed: {failed}" if failed else f"{len(checks)} checks")

