"""Acceptance suite: one summary line per criterion (printed in the pytest terminal summary).

The pattern criteria run the full default pipeline through the CLI twice,
which takes several minutes on one core.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from aasv.cli import run
from aasv.corpus import Trial
from aasv.domain import DomainPosterior
from aasv.evaluation import ScoreSet, eer, eer_bruteforce, score_matrix
from aasv.fusion import fuse, fuse_batch, fused_cosine
from aasv.nn import (
    AamConfig,
    AamHead,
    BatchNorm1d,
    Conv1d,
    Dense,
    ReLU,
    StatsPool,
    batch_cross_entropy,
)
from aasv.pipeline import read_ratio_tsv, read_report

GRAD_TOL = 1e-4
PATTERN_LIMIT_S = 600.0


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------


def _numeric_grad(f, arr, eps=1e-6):
    """Central-difference gradient of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(arr.shape)


def _rel_err(analytic, numeric):
    # per-tensor: saturated softmax leaves coordinates far below finite-difference resolution
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12))


def _layer_errors(layer, x):
    """Worst relative error over parameters and input for loss = sum(w * layer(x))."""
    rng = np.random.default_rng(x.size)
    w = rng.normal(size=layer.forward(x, train=True).shape)
    for p in layer.params.values():
        p.zero_grad()
    layer.forward(x, train=True)
    dx = layer.backward(w)
    loss = lambda: float(np.sum(w * layer.forward(x, train=True)))
    worst = _rel_err(dx, _numeric_grad(loss, x))
    for p in layer.params.values():
        worst = max(worst, _rel_err(p.grad, _numeric_grad(loss, p.value)))
    return worst


def _relu_input(rng, shape):
    # keep entries away from the kink so central differences are valid
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-3, 0.5, x)


def _gradient_cases():
    rng = np.random.default_rng(0)
    for n, i, o in [(2, 3, 4), (5, 7, 2), (1, 6, 6)]:
        yield f"Dense{(n, i, o)}", Dense(i, o, rng), rng.normal(size=(n, i))
    for (b, c, t), w, d, o in [((2, 3, 9), 3, 1, 4), ((1, 2, 12), 5, 2, 3), ((2, 4, 8), 3, 3, 2)]:
        yield f"Conv1d{(b, c, t)} w{w} d{d}", Conv1d(c, o, w, d, rng), rng.normal(size=(b, c, t))
    for shape in [(2, 3, 5), (4, 2, 3), (1, 6, 7)]:
        yield f"ReLU{shape}", ReLU(), _relu_input(rng, shape)
        yield f"BatchNorm1d{shape}", BatchNorm1d(shape[1]), rng.normal(size=shape)
        yield f"StatsPool{shape}", StatsPool(), rng.normal(size=shape)


def _loss_errors():
    rng = np.random.default_rng(1)
    out = {}
    for n, k in [(3, 4), (5, 2), (2, 7)]:
        logits = rng.normal(size=(n, k))
        labels = rng.integers(0, k, n)
        _, grad = batch_cross_entropy(logits, labels)
        out[f"softmax-CE{(n, k)}"] = _rel_err(grad, _numeric_grad(lambda: batch_cross_entropy(logits, labels)[0],
                                                                  logits))
    for n, classes, dim in [(3, 4, 5), (6, 2, 3), (2, 7, 8)]:
        head = AamHead(classes, dim, AamConfig(30.0, 0.2), rng)
        head.astype(np.float64)
        e = rng.normal(size=(n, dim))
        labels = rng.integers(0, classes, n)
        head.params["w"].zero_grad()
        _, d = batch_cross_entropy(head.forward_labels(e, labels, train=True), labels)
        de = head.backward(d)
        loss = lambda: batch_cross_entropy(head.forward_labels(e, labels), labels)[0]
        out[f"AAM-softmax{(n, classes, dim)}"] = max(_rel_err(de, _numeric_grad(loss, e)),
                                                     _rel_err(head.params["w"].grad,
                                                              _numeric_grad(loss, head.params["w"].value)))
    return out


def test_criterion_1_gradients(acceptance_line):
    t0 = time.perf_counter()
    errors = {}
    for name, layer, x in _gradient_cases():
        if hasattr(layer, "astype"):
            layer.astype(np.float64)
        errors[name] = _layer_errors(layer, x)
    errors.update(_loss_errors())
    elapsed = time.perf_counter() - t0
    worst_name = max(errors, key=errors.get)
    kinds = {k.split("(")[0].split("{")[0] for k in errors}
    ok = errors[worst_name] < GRAD_TOL and elapsed < 30.0 and len(errors) >= 3 * len(kinds)
    acceptance_line(1, ok, f"gradient checks: {len(errors)} cases over {len(kinds)} layers/losses, "
                           f"max rel err {errors[worst_name]:.2e} ({worst_name}), {elapsed:.1f} s "
                           f"(need < {GRAD_TOL:g}, < 30 s)")
    assert ok, errors


# ---------------------------------------------------------------------------
# 2. EER oracle
# ---------------------------------------------------------------------------


def test_criterion_2_eer_oracle(acceptance_line):
    rng = np.random.default_rng(12345)
    worst = 0.0
    for i in range(1000):
        n_tar, n_non = rng.integers(2, 501, size=2)
        t, n = rng.normal(1.0, 1.0, n_tar), rng.normal(0.0, 1.0, n_non)
        if i % 4 == 0:
            t, n = np.round(t, 1), np.round(n, 1)
        s = ScoreSet(t, n)
        worst = max(worst, abs(eer(s)[0] - eer_bruteforce(s)))
    fixed = [
        (ScoreSet([0.9, 0.8], [0.1, 0.2]), 0.0),
        (ScoreSet([0.1, 0.2], [0.8, 0.9]), 1.0),
        (ScoreSet([0.8, 0.6, 0.4], [0.5, 0.3, 0.2]), 1 / 3),
    ]
    fixed_ok = all(abs(eer(s)[0] - v) < 1e-12 for s, v in fixed)
    ok = worst < 1e-9 and fixed_ok
    acceptance_line(2, ok, f"EER oracle: max |fast - brute force| {worst:.1e} over 1000 sets (need < 1e-9); "
                           f"fixed examples {'match' if fixed_ok else 'MISMATCH'}")
    assert ok


# ---------------------------------------------------------------------------
# 3. fusion identities
# ---------------------------------------------------------------------------


def test_criterion_3_fusion(acceptance_line):
    rng = np.random.default_rng(777)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(2, 129))
        ec1, ea1, ec2, ea2 = rng.normal(size=(4, d))
        p1, p2 = rng.uniform(size=2)
        direct = fused_cosine(fuse(ec1, ea1, DomainPosterior(p1, 1 - p1)), fuse(ec2, ea2, DomainPosterior(p2, 1 - p2)))
        u = lambda v: v / np.linalg.norm(v)
        formula = (p1 * p2 * (u(ec1) @ u(ec2)) + (1 - p1) * (1 - p2) * (u(ea1) @ u(ea2))) / (
            np.hypot(p1, 1 - p1) * np.hypot(p2, 1 - p2))
        worst = max(worst, abs(direct - formula))

    opposite = [fused_cosine(fuse(*rng.normal(size=(2, 16)), DomainPosterior(1.0, 0.0)),
                             fuse(*rng.normal(size=(2, 16)), DomainPosterior(0.0, 1.0))) for _ in range(200)]
    zero_ok = all(v == 0.0 for v in opposite)

    n = 80
    ids = [f"u{i}" for i in range(n)]
    spk = np.repeat(np.arange(16), 5)
    centres = rng.normal(size=(16, 32))
    ec = centres[spk] + rng.normal(size=(n, 32))
    ea = rng.normal(size=(n, 32))
    trials = [Trial(int(spk[i] == spk[j]), ids[i], ids[j]) for i in range(n) for j in range(i + 1, n)]
    e_half = eer(score_matrix(trials, ids, fuse_batch(ec, ea, np.full((n, 2), 0.5))))[0]
    e_plain = eer(score_matrix(trials, ids, fuse_batch(ec, ea, None)))[0]
    ok = worst < 1e-6 and zero_ok and e_half == e_plain
    acceptance_line(3, ok, f"fusion identities: decomposition max err {worst:.1e} (need < 1e-6); "
                           f"hard opposite domains all exactly 0: {zero_ok}; "
                           f"EER half-weights {100 * e_half:.4f}% vs plain concat {100 * e_plain:.4f}%")
    assert ok


# ---------------------------------------------------------------------------
# 4-8. full pipeline
# ---------------------------------------------------------------------------


def _committed(root: Path, stage: str) -> Path:
    (d,) = [p for p in (root / stage).iterdir() if (p / "stage.json").exists()]
    return d


@pytest.fixture(scope="module")
def pattern_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    out = []
    for name in ("first", "second"):
        t0 = time.perf_counter()
        code = run(["reproduce-pattern", "--workdir", str(base / name), "-q"])
        out.append((code, base / name, time.perf_counter() - t0))
    return out


def test_criterion_4_pattern(pattern_runs, acceptance_line):
    code, root, elapsed = pattern_runs[0]
    report = read_report(_committed(root, "eval"))
    g = report.get
    a = g("A-SV", "child") - g("A-SV", "adult")
    b = g("C-SV", "adult") - g("A-SV", "adult")
    c_child = g("AASV", "child") - min(g("A-SV", "child"), g("C-SV", "child"))
    c_adult = g("AASV", "adult") - min(g("A-SV", "adult"), g("C-SV", "adult"))
    d = g("w/o DC", "child") - g("AASV", "child")
    wse = [g("WSE", t) for t in report.test_sets]
    e = all(v is not None and 0.0 <= v <= 100.0 for v in wse)
    parts = {"a": a >= 10, "b": b >= 5, "c": c_child <= 2.0 and c_adult <= 2.0, "d": d >= 2, "e": e}
    ok = all(parts.values()) and elapsed < PATTERN_LIMIT_S
    acceptance_line(4, ok, f"reproduce-pattern in {elapsed:.0f} s (need < {PATTERN_LIMIT_S:.0f}), exit {code}; "
                           f"a gap {a:.2f}>=10 {parts['a']}; b gap {b:.2f}>=5 {parts['b']}; "
                           f"c child {c_child:+.2f} adult {c_adult:+.2f} <=2 {parts['c']}; "
                           f"d gap {d:.2f}>=2 {parts['d']}; e WSE row valid {parts['e']}")
    print(report.to_text())
    assert ok


def test_criterion_5_ratio_trend(pattern_runs, acceptance_line):
    _, root, _ = pattern_runs[0]
    rows = read_ratio_tsv(_committed(root, "analysis") / "ratio.tsv")
    ratios = [r["ratio"] for r in rows]
    adult = [float(r["adult_acc"]) for r in rows]
    child = [float(r["child_acc"]) for r in rows]
    ok = ratios == ["1:1", "2:1", "3:1", "5:1"] and adult[-1] > adult[0] and min(child) >= 0.95
    acceptance_line(5, ok, "ratio harness " + ", ".join(f"{r} adult {a:.3f} child {c:.3f}"
                                                         for r, a, c in zip(ratios, adult, child))
                    + " (need adult 5:1 > 1:1, child >= 0.95)")
    assert ok


def test_criterion_6_domain_classifier(pattern_runs, acceptance_line):
    _, root, _ = pattern_runs[0]
    log = json.loads((_committed(root, "train-dc") / "train_log.json").read_text())
    ok = log["balanced_accuracy"] >= 0.95 and log["f1"] >= 0.95
    acceptance_line(6, ok, f"domain classifier balanced accuracy {log['balanced_accuracy']:.4f}, "
                           f"F1 {log['f1']:.4f} (need >= 0.95)")
    assert ok


def test_criterion_7_determinism(pattern_runs, acceptance_line):
    (_, first, _), (_, second, _) = pattern_runs
    compared, differing = 0, []
    for stage in ("gen", "train", "finetune", "train-dc", "embed", "fuse", "eval", "analysis"):
        d1, d2 = _committed(first, stage), _committed(second, stage)
        files1 = sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(d2) for p in d2.rglob("*") if p.is_file())
        if files1 != files2:
            differing.append(f"{stage}: file lists differ")
            continue
        for rel in files1:
            compared += 1
            if (d1 / rel).read_bytes() != (d2 / rel).read_bytes():
                differing.append(f"{stage}/{rel}")
    ok = compared > 0 and not differing
    acceptance_line(7, ok, f"determinism: {compared} artifacts compared across two runs, "
                           f"{len(differing)} differ{': ' + ', '.join(differing[:5]) if differing else ''}")
    assert ok


def test_criterion_8_severity_clusters(pattern_runs, acceptance_line):
    _, root, _ = pattern_runs[0]
    sil = json.loads((_committed(root, "analysis") / "silhouette.json").read_text())["severity_silhouette"]
    hi, lo = sil["0.9"], sil["0.3"]
    ok = hi > 0.3 and hi > lo
    acceptance_line(8, ok, f"silhouette severity 0.9 {hi:.3f}, severity 0.3 {lo:.3f} "
                           f"(need 0.9 > 0.3 absolute and > the 0.3 value)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
