"""Acceptance suite: one PASS/FAIL line per headline criterion.

Each test measures its criterion, records a report line (shown in the
terminal summary and printed inline) and then asserts the stated tolerance.
"""
import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest

import softlogic
from softlogic.datasets import (
    check_puzzle,
    gen_addition,
    gen_sudoku,
    number_value,
    synthetic_digits,
    write_addition,
    write_sudoku,
)
from softlogic.grounding import ground, truth_assignments
from softlogic.inference import map_inference
from softlogic.learning import LearnSettings, build_examples, learn, project_simplex
from softlogic.logic import clause_distance, lukasiewicz_and, lukasiewicz_not, lukasiewicz_or
from softlogic.parser import load_database, load_program, parse_program

import test_grounding as tg
import test_inference as ti
import test_learning as tl
import test_model as tm
from conftest import random_model
from oracles import map_oracle, simplex_grid_nearest

REPORT: list[str] = []


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    REPORT.append(line)
    print(line)


def test_lukasiewicz_boolean_endpoints():
    t0 = time.perf_counter()
    ok = True
    for a, b in itertools.product([0.0, 1.0], repeat=2):
        ok &= lukasiewicz_and(a, b) == float(a and b)
        ok &= lukasiewicz_or(a, b) == float(a or b)
        ok &= lukasiewicz_not(a) == 1.0 - a
    grid = np.arange(0.0, 1.0001, 0.25)
    cases = 0
    for nb in range(4):
        for vals in itertools.product(grid, repeat=3):
            body, head = vals[:nb], vals[nb:]
            satisfied = min(1.0, sum(1 - v for v in body) + sum(head)) == 1.0
            ok &= (clause_distance(body, head) == 0) == satisfied
            cases += 1
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1.0
    report("Lukasiewicz Boolean endpoints", ok, f"{cases} grid clauses, {elapsed:.3f} s (< 1 s)")
    assert ok


def test_map_oracle_equivalence():
    t0 = time.perf_counter()
    worst, n = 0.0, 50
    for seed in range(n):
        m = random_model(np.random.default_rng(10_000 + seed))
        assert m.n_y <= 4 and m.n_potentials <= 6 and m.n_constraints <= 2
        ref, _ = map_oracle(m)
        worst = max(worst, abs(map_inference(m, ti.TIGHT).energy - ref))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    report("MAP oracle equivalence", ok, f"{n} models, max |dE| = {worst:.2e} (<= 1e-4), {elapsed:.1f} s (< 60 s)")
    assert ok


def test_gradient_suite():
    t0 = time.perf_counter()
    direct, resolved = [], []
    rng = np.random.default_rng(20_000)
    for _ in range(80):
        direct.append(max(tm.fd_check(rng)))
    for seed in range(15):
        resolved.append(tl._fd_weights_case(100 + seed))
    for seed in range(10):
        resolved.append(_neural_fd_case(seed))
    elapsed = time.perf_counter() - t0
    cases = len(direct) + len(resolved)
    ok = max(direct) <= 1e-4 and max(resolved) <= 1e-3 and cases >= 100 and elapsed < 120
    report(
        "Gradient suite",
        ok,
        f"{cases} cases, direct rel err {max(direct):.1e} (<= 1e-4), "
        f"re-solved rel err {max(resolved):.1e} (<= 1e-3), {elapsed:.1f} s (< 120 s)",
    )
    assert ok


def _neural_fd_case(seed, h=1e-5):
    from softlogic.learning import energy_loss, loss_grad_neural, neural_forward

    model, ex, prov = tl.mlp_setup(seed)
    w = model.weights
    theta = prov.parameters().copy()
    prov.zero_grad()
    g = neural_forward(model, {"Neural": prov}, cache=True)
    _, _, y = energy_loss(ex, w, g, tl.TIGHT)
    prov.backward(loss_grad_neural(ex, w, y, g)["Neural"])
    analytic = prov.gradients().copy()

    def loss_at(t):
        prov.set_parameters(t)
        return energy_loss(ex, w, neural_forward(model, {"Neural": prov}, cache=False), tl.TIGHT)[0]

    fd = np.array([(loss_at(theta + h * d) - loss_at(theta - h * d)) / (2 * h) for d in np.eye(theta.size)])
    prov.set_parameters(theta)
    return float(np.max(np.abs(analytic - fd)) / max(1.0, np.max(np.abs(fd))))


def test_simplex_machinery():
    rng = np.random.default_rng(30_000)
    sum_err = 0.0
    for _ in range(500):
        w = project_simplex(rng.normal(scale=3, size=int(rng.integers(1, 10))))
        sum_err = max(sum_err, abs(w.sum() - 1.0) + max(0.0, -w.min()))
    oracle_err = 0.0
    for r, step in ((2, 0.01), (3, 0.02)):
        k = int(round(1 / step))
        for _ in range(50):
            # grid point pushed along its normal cone: the grid oracle is the exact projection
            p = rng.multinomial(k, np.ones(r) / r) / k
            v = p + rng.uniform(-2, 2)
            v[p == 0] -= rng.uniform(0, 1, size=int(np.sum(p == 0)))
            oracle_err = max(oracle_err, float(np.max(np.abs(project_simplex(v) - simplex_grid_nearest(v, step)))))
    step_err, min_w = 0.0, 1.0
    for reg in (0.0, 0.01, 0.5):
        hist = learn(tl._mixed_examples(3), {}, LearnSettings(gamma0=0.5, epochs=6, reg_weight=reg, tolerance=-1))
        for w in hist.weight_history:
            step_err = max(step_err, abs(np.abs(w).sum() - 1.0))
            step_err = max(step_err, max(0.0, -w.min()))
            if reg > 0:
                min_w = min(min_w, float(w.min()))
    ok = sum_err <= 1e-9 and oracle_err <= 1e-6 and step_err <= 1e-9 and min_w >= 1e-6 - 1e-15
    report(
        "Simplex machinery",
        ok,
        f"projection sum err {sum_err:.1e}, grid oracle err {oracle_err:.1e}, "
        f"learning-step sum err {step_err:.1e}, min regularized weight {min_w:.1e}",
    )
    assert ok


def test_scale_invariance():
    worst, n = 0.0, 20
    for seed in range(n):
        m = ti.strictly_convex_model(np.random.default_rng(40_000 + seed))
        base = map_inference(m, ti.TIGHT).y
        for c in (0.5, 2.0, 10.0):
            worst = max(worst, float(np.max(np.abs(map_inference(m.with_weights(c * m.weights), ti.TIGHT).y - base))))
    ok = worst <= 1e-4
    report("Scale invariance", ok, f"{n} models x c in {{0.5, 2, 10}}, max |dy| = {worst:.1e} (<= 1e-4)")
    assert ok


def test_grounding_species_example():
    model = ground(parse_program(tg.CAT_PROGRAM), tg.cat_database())
    ok = model.n_potentials == 6
    report("Grounding fixture: 2-image/3-class example", ok, f"{model.n_potentials} ground rules (expected 6)")
    assert ok


@pytest.mark.xfail(
    strict=True,
    reason="each row/column rule grounds once per (line, number) and each block rule once per number, "
    "giving 16/16/16/16; the stated 4/4/4/16 cannot hold for this model",
)
@pytest.mark.parametrize("name", ["visual_sudoku.psl", "visual_sudoku_latent.psl"])
def test_grounding_sudoku_counts(name):
    path = softlogic.model_path(name)
    model = ground(load_program(path), tg.sudoku_database())
    counts = tg.constraint_counts_by_group(model, open(path).read())
    got = tuple(counts.get(k, 0) for k in ("Row Constraint", "Column Constraint", "Block Constraint", "Simplex Constraints"))
    ok = got == (4, 4, 4, 16)
    report(
        f"Grounding fixture: sudoku {name}",
        ok,
        f"row/column/block/simplex = {'/'.join(map(str, got))} (stated 4/4/4/16)",
    )
    assert got == (4, 4, 4, 16)


def test_dataset_generators(tmp_path):
    images, labels = synthetic_digits(400, seed=5)
    label_ok = True
    for k in (1, 2):
        ds = gen_addition(images, labels, k, 200, 40, seed=k)
        for inst in ds.instances:
            d = [ds.digit_labels[i] for i in inst.images]
            label_ok &= inst.label == number_value(d[:k]) + number_value(d[k:])
    s_images, s_labels = synthetic_digits(400, seed=6, classes=range(4))
    sud = gen_sudoku(s_images, s_labels, 160, seed=7)
    corrupt = [p for p in sud.puzzles if not p.valid]
    corrupt_ok = all(not check_puzzle(p.classes)[0] for p in corrupt)
    balanced = len(corrupt) == len(sud.puzzles) - len(corrupt) == 10

    def snapshot(out):
        return {p.name: p.read_bytes() for p in sorted(out.iterdir())}

    same = True
    for name in ("a", "b"):
        write_addition(gen_addition(images, labels, 1, 100, 50, seed=9), tmp_path / name / "add")
        write_sudoku(gen_sudoku(s_images, s_labels, 64, seed=9), tmp_path / name / "sud")
    for sub in ("add", "sud"):
        same &= snapshot(tmp_path / "a" / sub) == snapshot(tmp_path / "b" / sub)
    ok = label_ok and corrupt_ok and balanced and same
    report(
        "Dataset generators",
        ok,
        f"labels={label_ok}, corrupt puzzles invalid={corrupt_ok}, balanced={balanced}, byte-identical={same}",
    )
    assert ok


def _digit_accuracy(provider, block, labels):
    truth = np.array([labels[e[0]] for e in block.entities])
    return float(np.mean(provider.predict(block.features).argmax(axis=1) == truth))


def _prepare_addition(out_dir, images, labels, n, seed):
    ds = gen_addition(images, labels, 1, n, 0, seed)
    write_addition(ds, out_dir)
    prog = load_program(softlogic.model_path("mnist_add1_constraint.psl"))
    db = load_database(prog, out_dir)
    return prog, db, ground(prog, db), ds


def test_synthetic_end_to_end(tmp_path):
    from softlogic.cli import make_providers

    t0 = time.perf_counter()
    images, labels = synthetic_digits(600, seed=0)
    prog, db, model, ds = _prepare_addition(tmp_path, images, labels, 600, seed=0)
    providers = make_providers(prog, model, 0)
    block = model.neural_block("Neural")
    history = []
    result = learn(
        build_examples(model, truth_assignments(model, db)),
        providers,
        LearnSettings(neural_lr=1.0, epochs=50),
        callback=lambda epoch, w, p, loss: history.append(_digit_accuracy(p["Neural"], block, ds.digit_labels)),
    )
    elapsed = time.perf_counter() - t0
    final = history[-1]
    ok = len(ds.instances) == 300 and final >= 0.9 and len(result.trace) <= 50 and elapsed < 600
    report(
        "Synthetic end-to-end (Add1 constraint, 300 additions)",
        ok,
        f"digit accuracy {final:.3f} (>= 0.90) after {len(result.trace)} epochs, {elapsed:.1f} s (< 600 s)",
    )
    assert ok


MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _mnist_paths():
    root = os.environ.get("SOFTLOGIC_MNIST_DIR")
    if not root:
        return None
    paths = []
    for name in MNIST_FILES:
        for candidate in (Path(root) / name, Path(root) / f"{name}.gz"):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            return None
    return paths


@pytest.mark.slow
@pytest.mark.skipif(_mnist_paths() is None, reason="set SOFTLOGIC_MNIST_DIR to a directory with the MNIST IDX files")
def test_real_mnist_addition(tmp_path):
    from softlogic.cli import EXIT_OK, evaluate, main

    t0 = time.perf_counter()
    tr_img, tr_lab, te_img, te_lab = map(str, _mnist_paths())
    gen = tmp_path / "data"
    assert main(["generate", "addition1", "--n", "600", "--test-n", "2000", "--seed", "0", "--out", str(gen),
                 "--idx-images", tr_img, "--idx-labels", tr_lab,
                 "--idx-test-images", te_img, "--idx-test-labels", te_lab]) == EXIT_OK
    model = str(softlogic.model_path("mnist_add1_constraint.psl"))
    trained, pred = tmp_path / "trained", tmp_path / "pred"
    assert main(["learn", "--model", model, "--data", str(gen / "train"), "--out", str(trained),
                 "--epochs", "50", "--neural-lr", "1.0"]) == EXIT_OK
    assert main(["infer", "--model", model, "--data", str(gen / "test"), "--out", str(pred),
                 "--trained", str(trained)]) == EXIT_OK
    acc = evaluate(gen / "test", pred)["addition_accuracy"]
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.70 and elapsed < 7200
    report("Real MNIST Add1 (300 additions)", ok, f"test addition accuracy {acc:.3f} (>= 0.70), {elapsed:.0f} s")
    assert ok
