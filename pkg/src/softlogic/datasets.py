"""Deterministic generators for digit-addition and 4x4 visual-sudoku datasets.

Both generators write the tab-separated layout read by
:func:`softlogic.parser.load_database` plus a ``manifest.json``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DIGIT_GLYPHS = {
    0: ["..####..", ".##..##.", ".#....#.", ".#....#.", ".#....#.", ".##..##.", "..####..", "........"],
    1: ["...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...", ".######.", "........"],
    2: ["..####..", ".#....#.", "......#.", "....##..", "..##....", ".#......", ".######.", "........"],
    3: [".#####..", "......#.", "......#.", "..####..", "......#.", "......#.", ".#####..", "........"],
    4: ["....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", "........"],
    5: [".######.", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####..", "........"],
    6: ["...###..", "..#.....", ".#......", ".#####..", ".#....#.", ".#....#.", "..####..", "........"],
    7: [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "........"],
    8: ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", "..####..", "........"],
    9: ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", ".....#..", "..###...", "........"],
}


class DatasetError(ValueError):
    pass


def glyph(digit: int) -> np.ndarray:
    return np.array([[c == "#" for c in row] for row in DIGIT_GLYPHS[digit]], dtype=float)


def synthetic_digits(
    n: int, seed: int, noise: float = 0.15, classes: Sequence[int] = range(10)
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` noisy 8x8 digit images (values in [0, 1]) with balanced labels."""
    rng = np.random.default_rng(seed)
    classes = list(classes)
    labels = np.array([classes[i % len(classes)] for i in range(n)], dtype=np.int64)
    rng.shuffle(labels)
    images = np.empty((n, 8, 8))
    for i, d in enumerate(labels):
        img = glyph(int(d)) * rng.uniform(0.7, 1.0)
        dy, dx = rng.integers(-1, 2, size=2)
        img = np.roll(img, (dy, dx), axis=(0, 1))
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


# --- helper tables --------------------------------------------------------------------


def sum_range(k: int) -> range:
    return range(2 * (10**k - 1) + 1)


def gen_possible_tables(k: int) -> dict[str, list[tuple[tuple[str, ...], float]]]:
    """Observation tables of the helper predicates, by brute-force enumeration.

    Full 0/1 tables are emitted for two-argument helpers and DigitSum; the
    large NumberSum and PlaceNumberSum relations list only their true rows
    (absent rows read as 0).
    """
    if k not in (1, 2):
        raise DatasetError("k must be 1 or 2")
    digits = range(10)
    pair_sums = range(19)
    tables: dict[str, list] = {}
    tables["DigitSum"] = [
        ((str(x), str(y), str(z)), float(x + y == z)) for x in digits for y in digits for z in pair_sums
    ]
    tables["PossibleDigits"] = [
        ((str(x), str(z)), float(any(x + y == z for y in digits))) for x in digits for z in pair_sums
    ]
    if k == 2:
        totals = sum_range(2)
        numbers = [(a, b) for a in digits for b in digits]
        reachable_tens, reachable_ones = set(), set()
        for (a, b), (c, d) in itertools.product(numbers, repeat=2):
            z = 10 * a + b + 10 * c + d
            reachable_tens.add((a, z))
            reachable_ones.add((b, z))
        tables["PossibleTensDigits"] = [
            ((str(x), str(z)), float((x, z) in reachable_tens)) for x in digits for z in totals
        ]
        tables["PossibleOnesDigits"] = [
            ((str(x), str(z)), float((x, z) in reachable_ones)) for x in digits for z in totals
        ]
        tables["PossibleTensSums"] = [
            ((str(t), str(z)), float(any(10 * t + o == z for o in pair_sums)))
            for t in pair_sums
            for z in totals
        ]
        tables["PossibleOnesSums"] = [
            ((str(o), str(z)), float(any(10 * t + o == z for t in pair_sums)))
            for o in pair_sums
            for z in totals
        ]
        tables["NumberSum"] = [
            ((str(a), str(b), str(c), str(d), str(10 * a + b + 10 * c + d)), 1.0)
            for a, b, c, d in itertools.product(digits, repeat=4)
        ]
        tables["PlaceNumberSum"] = [
            ((str(t), str(o), str(10 * t + o)), 1.0) for t in pair_sums for o in pair_sums
        ]
    return tables


# --- writers ----------------------------------------------------------------------------


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def _write_rows(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for args, value in rows:
            cols = list(args) + ([] if value is None else [_fmt(value)])
            fh.write("\t".join(cols) + "\n")


def _write_features(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, feats in rows:
            fh.write("\t".join(list(key) + [repr(float(v)) for v in feats]) + "\n")


def _write_manifest(path: Path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- addition ----------------------------------------------------------------------------


@dataclass(frozen=True)
class AdditionInstance:
    images: tuple[str, ...]  # 2k ids: first number's digits, then the second's
    label: int


@dataclass
class AdditionDataset:
    k: int
    instances: list[AdditionInstance]
    image_ids: list[str]  # unique ids, sorted
    digit_labels: dict[str, int]
    features: dict[str, np.ndarray]
    n: int
    m: int


def number_value(digits: Sequence[int]) -> int:
    v = 0
    for d in digits:
        v = 10 * v + int(d)
    return v


def gen_addition(images, labels, k: int, n: int, m: int, seed: int, id_prefix: str = "") -> AdditionDataset:
    """Sample ``n`` images, add ``m`` re-used ones, shuffle and cut into 2k-tuples."""
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if k not in (1, 2):
        raise DatasetError("k must be 1 or 2")
    if n > len(images) or n < 0 or m < 0:
        raise DatasetError(f"cannot sample n={n} from {len(images)} images (m={m})")
    if (n + m) % (2 * k):
        raise DatasetError(f"n + m = {n + m} is not divisible by {2 * k}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(images), size=n, replace=False)
    dups = rng.choice(chosen, size=m, replace=True) if m else np.zeros(0, dtype=np.int64)
    pool = np.concatenate([chosen, dups]).astype(np.int64)
    rng.shuffle(pool)
    ids = {int(i): f"{id_prefix}{int(i)}" for i in chosen}
    instances = []
    for t in range(0, len(pool), 2 * k):
        tup = pool[t : t + 2 * k]
        a = number_value(labels[tup[:k]])
        b = number_value(labels[tup[k:]])
        instances.append(AdditionInstance(tuple(ids[int(i)] for i in tup), a + b))
    flat = images.reshape(len(images), -1)
    return AdditionDataset(
        k=k,
        instances=instances,
        image_ids=sorted(ids.values(), key=_natural),
        digit_labels={ids[int(i)]: int(labels[i]) for i in chosen},
        features={ids[int(i)]: flat[i] for i in chosen},
        n=n,
        m=m,
    )


def _natural(s: str):
    digits = "".join(c for c in s if c.isdigit())
    return (s.rstrip("0123456789"), int(digits) if digits else -1, s)


def write_addition(ds: AdditionDataset, out_dir, manifest_extra: Optional[dict] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = ds.k
    sums = sum_range(k)
    _write_features(out / "Neural_features.tsv", [((i,), ds.features[i]) for i in ds.image_ids])
    target_rows, truth_rows = [], []
    seen = set()
    for inst in ds.instances:
        if inst.images in seen:
            continue
        seen.add(inst.images)
        for z in sums:
            target_rows.append((inst.images + (str(z),), None))
            truth_rows.append((inst.images + (str(z),), float(z == inst.label)))
    _write_rows(out / "Sum_targets.tsv", target_rows)
    _write_rows(out / "Sum_truth.tsv", truth_rows)
    _write_rows(out / "Digit_targets.tsv", [((i, str(d)), None) for i in ds.image_ids for d in range(10)])
    if k == 2:
        pairs = []
        for inst in ds.instances:
            for pair in ((inst.images[0], inst.images[2]), (inst.images[1], inst.images[3])):
                if pair not in pairs:
                    pairs.append(pair)
        _write_rows(out / "ImageDigitSum_targets.tsv", [(p + (str(z),), None) for p in pairs for z in range(19)])
    for name, rows in gen_possible_tables(k).items():
        _write_rows(out / f"{name}_obs.tsv", rows)
    _write_rows(out / "digit_labels.tsv", [((i,), float(ds.digit_labels[i])) for i in ds.image_ids])
    manifest = {
        "task": f"addition{k}",
        "k": k,
        "n": ds.n,
        "m": ds.m,
        "additions": len(ds.instances),
        "unique_images": len(ds.image_ids),
        "sum_classes": len(sums),
    }
    manifest.update(manifest_extra or {})
    _write_manifest(out / "manifest.json", manifest)


# --- sudoku -------------------------------------------------------------------------------

UNITS = (
    [("row", r, [(r, c) for c in range(4)]) for r in range(4)]
    + [("column", c, [(r, c) for r in range(4)]) for c in range(4)]
    + [
        ("block", 2 * br + bc, [(2 * br + i, 2 * bc + j) for i in range(2) for j in range(2)])
        for br in range(2)
        for bc in range(2)
    ]
)


def check_puzzle(grid) -> tuple[bool, list[tuple[str, int]]]:
    """Validity of a 4x4 grid of classes 1..4 and each duplicated (unit, class)."""
    g = np.asarray(grid).reshape(4, 4)
    violations = []
    for kind, idx, cells in UNITS:
        values = [int(g[r, c]) for r, c in cells]
        for cls in sorted(set(values)):
            if values.count(cls) > 1:
                violations.append((f"{kind}{idx}", cls))
    return not violations, violations


def all_valid_grids() -> list[np.ndarray]:
    """All 288 valid 4x4 grids, in lexicographic order."""
    out = []
    grid = np.zeros((4, 4), dtype=np.int64)

    def fill(pos):
        if pos == 16:
            out.append(grid.copy())
            return
        r, c = divmod(pos, 4)
        for v in range(1, 5):
            if v in grid[r, :c] or v in grid[:r, c]:
                continue
            br, bc = 2 * (r // 2), 2 * (c // 2)
            if v in grid[br : br + 2, bc : bc + 2]:
                continue
            grid[r, c] = v
            fill(pos + 1)
            grid[r, c] = 0

    fill(0)
    return out


@dataclass
class SudokuPuzzle:
    puzzle_id: str
    cells: np.ndarray  # 4x4 image indices into the source pool
    classes: np.ndarray  # 4x4 hidden classes 1..4
    valid: bool


@dataclass
class SudokuDataset:
    puzzles: list[SudokuPuzzle]
    features: np.ndarray  # flattened source images
    first_puzzle: str


def gen_sudoku(images, labels, n_images: int, seed: int, source_classes=(0, 1, 2, 3)) -> SudokuDataset:
    """``n_images / 16`` valid puzzles, each followed by a corrupted twin."""
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if n_images % 16 or n_images <= 0:
        raise DatasetError("number of images must be a positive multiple of 16")
    n_valid = n_images // 16
    per_class = n_images // 4
    rng = np.random.default_rng(seed)
    class_of = {src: i + 1 for i, src in enumerate(source_classes)}
    by_class = {}
    for src in source_classes:
        idx = np.flatnonzero(labels == src)
        if len(idx) < per_class:
            raise DatasetError(f"need {per_class} images of label {src}, have {len(idx)}")
        by_class[class_of[src]] = rng.choice(idx, size=per_class, replace=False)
    pool_all = {c: np.flatnonzero(labels == src) for src, c in class_of.items()}
    grids = all_valid_grids()

    puzzles: list[SudokuPuzzle] = []
    for p in range(n_valid):
        grid = grids[rng.integers(len(grids))]
        cells = np.zeros((4, 4), dtype=np.int64)
        for c in range(1, 5):
            imgs = list(by_class[c][4 * p : 4 * p + 4])
            rng.shuffle(imgs)
            for (r, col), img in zip(np.argwhere(grid == c), imgs):
                cells[r, col] = img
        valid = SudokuPuzzle(str(2 * p), cells, grid.copy(), True)
        puzzles.append(valid)
        puzzles.append(_corrupt(valid, str(2 * p + 1), pool_all, rng))
    return SudokuDataset(puzzles, images.reshape(len(images), -1), puzzles[0].puzzle_id)


def _corrupt(valid: SudokuPuzzle, pid: str, pool_all, rng) -> SudokuPuzzle:
    while True:
        cells = valid.cells.copy()
        classes = valid.classes.copy()
        while True:
            if rng.random() < 0.5:
                # replacement: a random cell gets an image of another class
                r, c = rng.integers(4, size=2)
                other = [k for k in range(1, 5) if k != classes[r, c]]
                new_cls = other[rng.integers(len(other))]
                cells[r, c] = pool_all[new_cls][rng.integers(len(pool_all[new_cls]))]
                classes[r, c] = new_cls
            else:
                # substitution: swap two cells
                a, b = rng.choice(16, size=2, replace=False)
                ra, ca = divmod(int(a), 4)
                rb, cb = divmod(int(b), 4)
                cells[ra, ca], cells[rb, cb] = cells[rb, cb], cells[ra, ca]
                classes[ra, ca], classes[rb, cb] = classes[rb, cb], classes[ra, ca]
            if rng.random() < 0.5:
                break
        if not check_puzzle(classes)[0]:
            return SudokuPuzzle(pid, cells, classes, False)


def write_sudoku(ds: SudokuDataset, out_dir, manifest_extra: Optional[dict] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats, targets, cell_labels = [], [], []
    for pz in ds.puzzles:
        for r in range(4):
            for c in range(4):
                key = (pz.puzzle_id, str(r), str(c))
                feats.append((key, ds.features[pz.cells[r, c]]))
                cell_labels.append((key, float(pz.classes[r, c])))
                for n in range(1, 5):
                    targets.append((key + (str(n),), None))
    _write_features(out / "Neural_features.tsv", feats)
    _write_rows(out / "Digit_targets.tsv", targets)
    _write_rows(out / "FirstPuzzle_obs.tsv", [((ds.first_puzzle,), 1.0)])
    _write_rows(out / "ValidPuzzle_truth.tsv", [((pz.puzzle_id,), float(pz.valid)) for pz in ds.puzzles])
    _write_rows(out / "cell_labels.tsv", cell_labels)
    manifest = {
        "task": "sudoku",
        "puzzles": len(ds.puzzles),
        "valid": sum(p.valid for p in ds.puzzles),
        "corrupt": sum(not p.valid for p in ds.puzzles),
        "first_puzzle": ds.first_puzzle,
    }
    manifest.update(manifest_extra or {})
    _write_manifest(out / "manifest.json", manifest)
