import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softlogic.datasets import (
    DatasetError,
    all_valid_grids,
    check_puzzle,
    gen_addition,
    gen_possible_tables,
    gen_sudoku,
    number_value,
    synthetic_digits,
    write_addition,
    write_sudoku,
)


def table(k, name):
    return {args: v for args, v in gen_possible_tables(k)[name]}


@pytest.fixture(scope="module")
def digits():
    return synthetic_digits(200, seed=3)


@pytest.mark.parametrize("k", [1, 2])
def test_addition_labels_match_hidden_digits(digits, k):
    images, labels = digits
    ds = gen_addition(images, labels, k=k, n=120, m=0, seed=5)
    assert len(ds.instances) == 120 // (2 * k)
    for inst in ds.instances:
        d = [ds.digit_labels[i] for i in inst.images]
        assert inst.label == number_value(d[:k]) + number_value(d[k:])


def test_six_images_give_three_single_digit_additions(digits):
    ds = gen_addition(*digits, k=1, n=6, m=0, seed=0)
    assert len(ds.instances) == 3
    assert sorted(i for inst in ds.instances for i in inst.images) == sorted(ds.image_ids)


@pytest.mark.parametrize("m,expected", [(0, 20), (20, 30), (40, 40), (80, 60)])
def test_overlap_counts(digits, m, expected):
    ds = gen_addition(*digits, k=1, n=40, m=m, seed=1)
    assert len(ds.instances) == expected
    uses = [i for inst in ds.instances for i in inst.images]
    assert len(uses) - len(set(uses)) == m
    assert len(ds.image_ids) == 40


def test_addition_rejects_bad_sizes(digits):
    with pytest.raises(DatasetError):
        gen_addition(*digits, k=1, n=5, m=0, seed=0)
    with pytest.raises(DatasetError):
        gen_addition(*digits, k=2, n=6, m=0, seed=0)
    with pytest.raises(DatasetError):
        gen_addition(*digits, k=1, n=1000, m=0, seed=0)
    with pytest.raises(DatasetError):
        gen_addition(*digits, k=3, n=6, m=0, seed=0)


def test_helper_table_values():
    assert table(1, "DigitSum")[("3", "4", "7")] == 1.0
    assert table(1, "DigitSum")[("3", "4", "8")] == 0.0
    assert table(1, "PossibleDigits")[("9", "0")] == 0.0
    assert table(1, "PossibleDigits")[("9", "17")] == 1.0
    assert table(2, "PossibleTensDigits")[("9", "170")] == 1.0
    assert table(2, "PossibleTensDigits")[("9", "50")] == 0.0
    assert table(2, "PlaceNumberSum")[("1", "15", "25")] == 1.0


def test_helper_tables_match_brute_force():
    sums = {(a, b, a + b) for a in range(10) for b in range(10)}
    ds = table(1, "DigitSum")
    assert {tuple(map(int, k)) for k, v in ds.items() if v} == sums
    assert len(ds) == 10 * 10 * 19
    pd = table(1, "PossibleDigits")
    assert {tuple(map(int, k)) for k, v in pd.items() if v} == {(a, s) for a, _, s in sums}

    tens, ones = set(), set()
    for a, b, c, d in itertools.product(range(10), repeat=4):
        z = 10 * a + b + 10 * c + d
        tens |= {(a, z), (c, z)}
        ones |= {(b, z), (d, z)}
    assert {tuple(map(int, k)) for k, v in table(2, "PossibleTensDigits").items() if v} == tens
    assert {tuple(map(int, k)) for k, v in table(2, "PossibleOnesDigits").items() if v} == ones
    ns = table(2, "NumberSum")
    assert len(ns) == 10**4 and all(int(k[4]) == 10 * int(k[0]) + int(k[1]) + 10 * int(k[2]) + int(k[3]) for k in ns)
    ts = {tuple(map(int, k)) for k, v in table(2, "PossibleTensSums").items() if v}
    assert ts == {(t, 10 * t + o) for t in range(19) for o in range(19)}


def test_valid_puzzle_example():
    ok, viol = check_puzzle([1, 2, 4, 3, 4, 3, 1, 2, 2, 4, 3, 1, 3, 1, 2, 4])
    assert ok and viol == []


def test_all_ones_grid_violations():
    # each of the 12 units (4 rows, 4 columns, 4 blocks) repeats class 1
    ok, viol = check_puzzle(np.ones(16, dtype=int))
    assert not ok and len(viol) == 12
    assert {cls for _, cls in viol} == {1}


def test_row_swap_breaks_validity():
    g = np.array([1, 2, 4, 3, 4, 3, 1, 2, 2, 4, 3, 1, 3, 1, 2, 4]).reshape(4, 4)
    g[0, 0], g[1, 0] = g[1, 0], g[0, 0]
    assert not check_puzzle(g)[0]


def test_all_valid_grids():
    grids = all_valid_grids()
    assert len(grids) == 288
    assert all(check_puzzle(g)[0] for g in grids)
    assert len({g.tobytes() for g in grids}) == 288


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_sudoku_dataset_balanced(seed):
    images, labels = synthetic_digits(200, seed=seed % 7, classes=range(4))
    ds = gen_sudoku(images, labels, 160, seed=seed)
    assert len(ds.puzzles) == 20
    valid = [p for p in ds.puzzles if p.valid]
    assert len(valid) == 10
    for p in ds.puzzles:
        assert check_puzzle(p.classes)[0] == p.valid
        assert np.array_equal(labels[p.cells] + 1, p.classes)
    used = np.concatenate([p.cells.ravel() for p in valid])
    assert len(set(used.tolist())) == 160


def test_sudoku_rejects_bad_image_count():
    images, labels = synthetic_digits(200, seed=0, classes=range(4))
    with pytest.raises(DatasetError):
        gen_sudoku(images, labels, 150, seed=0)
    with pytest.raises(DatasetError):
        gen_sudoku(images, labels, 400, seed=0)


def _read_dir(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_addition_files_are_deterministic(tmp_path, digits):
    for name in ("a", "b"):
        write_addition(gen_addition(*digits, k=1, n=40, m=20, seed=7), tmp_path / name)
    assert _read_dir(tmp_path / "a") == _read_dir(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["additions"] == 30 and manifest["m"] == 20
    truth = (tmp_path / "a" / "Sum_truth.tsv").read_text().splitlines()
    assert sum(line.endswith("\t1") for line in truth) <= 30
    other = tmp_path / "c"
    write_addition(gen_addition(*digits, k=1, n=40, m=20, seed=8), other)
    assert _read_dir(tmp_path / "a") != _read_dir(other)


def test_sudoku_files_are_deterministic(tmp_path):
    images, labels = synthetic_digits(200, seed=0, classes=range(4))
    for name in ("a", "b"):
        write_sudoku(gen_sudoku(images, labels, 32, seed=2), tmp_path / name)
    assert _read_dir(tmp_path / "a") == _read_dir(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert (manifest["valid"], manifest["corrupt"]) == (2, 2)
    assert len((tmp_path / "a" / "Digit_targets.tsv").read_text().splitlines()) == 4 * 16 * 4


@pytest.mark.parametrize("k,model", [(1, "mnist_add1_constraint.psl"), (2, "mnist_add2_latent.psl")])
def test_written_addition_dataset_grounds(tmp_path, digits, k, model):
    import softlogic
    from softlogic.grounding import ground
    from softlogic.parser import load_database, load_program

    ds = gen_addition(*digits, k=k, n=8, m=0, seed=1)
    write_addition(ds, tmp_path)
    prog = load_program(softlogic.model_path(model))
    gm = ground(prog, load_database(prog, tmp_path))
    assert gm.n_y > 0 and gm.n_potentials > 0
