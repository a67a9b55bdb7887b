"""Command-line entry point: ``softlogic {infer,learn,generate,eval}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from softlogic import datasets
from softlogic.grounding import GroundingError, GroundModel, ground, natural_key, truth_assignments
from softlogic.inference import AdmmSettings, InfeasibleError, map_inference
from softlogic.learning import (
    LearnSettings,
    TrainingDataError,
    build_examples,
    learn,
    read_weights,
    write_trace,
    write_weights,
)
from softlogic.logic import DomainError
from softlogic.neural import MLPProvider
from softlogic.parser import DataError, ParseError, Program, load_database, load_idx, load_program

log = logging.getLogger("softlogic")

EXIT_OK, EXIT_USAGE, EXIT_SOLVE, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _admm_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--max-admm-iters", type=int, default=500)
    p.add_argument("--primal-tol", type=float, default=1e-5)
    p.add_argument("--dual-tol", type=float, default=1e-5)
    p.add_argument("--residual-log", help="write per-iteration ADMM residuals to this CSV")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model file (.psl)")
    p.add_argument("--data", required=True, help="directory of <Predicate>_<obs|targets|truth>.tsv files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--record-time", action="store_true", help="include wall-clock timings in outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="softlogic", description="Neuro-symbolic hinge-loss MRF engine")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("infer", help="MAP inference over target atoms")
    _common(p)
    _admm_flags(p)
    p.add_argument("--trained", help="directory with weights.txt and <Predicate>.nprv from 'learn'")
    p.add_argument("--dump-ground", action="store_true", help="write the ground model to ground_model.txt")

    p = sub.add_parser("learn", help="learn rule weights and neural parameters")
    _common(p)
    _admm_flags(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--gamma0", type=float, default=0.01)
    p.add_argument("--neural-lr", type=float, default=1e-3)
    p.add_argument("--reg-weight", type=float, default=0.01)
    p.add_argument("--dump-ground", action="store_true")

    p = sub.add_parser("generate", help="generate a dataset directory")
    p.add_argument("task", choices=["addition1", "addition2", "sudoku"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n", type=int, help="number of unique training images (addition)")
    p.add_argument("--overlap", default="0", help="re-used images m: integer or one of n/2, n, 2n")
    p.add_argument("--test-n", type=int, help="number of unique test images (addition)")
    p.add_argument("--images", type=int, help="number of images (sudoku); n/16 valid puzzles")
    p.add_argument("--idx-images", help="IDX image file (default: synthetic 8x8 digits)")
    p.add_argument("--idx-labels", help="IDX label file")
    p.add_argument("--idx-test-images")
    p.add_argument("--idx-test-labels")
    p.add_argument("--noise", type=float, default=0.15, help="pixel noise of synthetic digits")

    p = sub.add_parser("eval", help="score predictions against truth")
    p.add_argument("--data", required=True, help="dataset directory with truth files")
    p.add_argument("--predictions", required=True, help="directory of *_inferred.tsv files")
    p.add_argument("--out", required=True)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("SLE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _admm_settings(args) -> AdmmSettings:
    return AdmmSettings(
        rho=args.rho,
        max_iterations=args.max_admm_iters,
        primal_tol=args.primal_tol,
        dual_tol=args.dual_tol,
        residual_log=args.residual_log,
    )


def _load(args) -> tuple[Program, object, GroundModel, float]:
    program = load_program(args.model)
    db = load_database(program, args.data)
    t0 = time.perf_counter()
    model = ground(program, db)
    return program, db, model, time.perf_counter() - t0


def make_providers(program: Program, model: GroundModel, seed: int) -> dict[str, MLPProvider]:
    providers = {}
    for k, (name, spec) in enumerate(program.neural.items()):
        block = model.neural_block(name)
        width = block.features.shape[1] if block.features.ndim == 2 and block.features.shape[0] else spec.input_width
        if spec.input_width is not None and width != spec.input_width:
            raise DataError(f"{name}: features have width {width}, binding says {spec.input_width}")
        # the run seed perturbs every provider seed so '--seed' controls all randomness
        providers[name] = MLPProvider(replace(spec, seed=spec.seed + seed * 1000 + k), input_width=width)
    return providers


def _write_predictions(out: Path, model: GroundModel, y: np.ndarray, g: np.ndarray) -> list[str]:
    by_pred: dict[str, list] = {}
    for (name, args), v in zip(model.target_atoms, y):
        by_pred.setdefault(name, []).append((args, float(v)))
    for b in model.neural:
        vals = g[b.offset : b.offset + b.size].reshape(len(b.entities), len(b.classes))
        rows = by_pred.setdefault(b.predicate, [])
        for e, ent in enumerate(b.entities):
            for c, cls in enumerate(b.classes):
                rows.append((ent + (cls,), float(vals[e, c])))
    written = []
    for name, rows in by_pred.items():
        path = out / f"{name}_inferred.tsv"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for args, v in rows:
                fh.write("\t".join(args) + f"\t{v:.17g}\n")
        written.append(path.name)
    return written


def cmd_infer(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    program, db, model, t_ground = _load(args)
    if args.dump_ground:
        (out / "ground_model.txt").write_text(model.dump(), encoding="utf-8")
    providers = make_providers(program, model, args.seed)
    if args.trained:
        trained = Path(args.trained)
        wfile = trained / "weights.txt"
        if wfile.exists():
            _, w = read_weights(wfile)
            model = model.with_weights(w)
        for name, p in providers.items():
            pfile = trained / f"{name}.nprv"
            if pfile.exists():
                p.load(pfile)
    g = model.neural_values(providers)
    t0 = time.perf_counter()
    res = map_inference(model, _admm_settings(args), g)
    t_solve = time.perf_counter() - t0
    files = _write_predictions(out, model, res.y, g)
    summary = {
        "energy": res.energy,
        "iterations": res.iterations,
        "converged": res.converged,
        "primal_residual": res.primal_residual,
        "dual_residual": res.dual_residual,
        "targets": model.n_y,
        "potentials": model.n_potentials,
        "constraints": model.n_constraints,
        "outputs": files,
    }
    if args.record_time:
        summary.update(
            ground_ms=round(t_ground * 1000, 3),
            solve_ms=round(t_solve * 1000, 3),
            total_ms=round((time.perf_counter() - t_start) * 1000, 3),
        )
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"energy {res.energy:.6g} after {res.iterations} iterations (converged={res.converged})")
    return EXIT_OK


def cmd_learn(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    program, db, model, _ = _load(args)
    if args.dump_ground:
        (out / "ground_model.txt").write_text(model.dump(), encoding="utf-8")
    providers = make_providers(program, model, args.seed)
    truth = truth_assignments(model, db)
    if not truth:
        raise DataError("no truth rows for any target atom; learning needs <Predicate>_truth.tsv files")
    settings = LearnSettings(
        gamma0=args.gamma0,
        neural_lr=args.neural_lr,
        epochs=args.epochs,
        reg_weight=args.reg_weight,
        admm=_admm_settings(args),
        seed=args.seed,
        record_time=args.record_time,
    )
    r = model.n_partitions
    weights = np.full(r, 1.0 / r) if r else np.zeros(0)
    trace = []
    if args.epochs > 0:
        examples = build_examples(model, truth)
        result = learn(examples, providers, settings)
        weights, trace = result.weights, result.trace
    write_weights(out / "weights.txt", model.rule_labels, weights)
    write_trace(out / "loss_trace.csv", trace)
    for name, p in providers.items():
        p.save(out / f"{name}.nprv")
    print(f"learned {r} weights over {len(trace)} epoch(s)")
    return EXIT_OK


def _overlap(spec: str, n: int) -> int:
    table = {"0": 0, "n/2": n // 2, "n": n, "2n": 2 * n}
    if spec in table:
        return table[spec]
    try:
        return int(spec)
    except ValueError:
        raise UsageError(f"--overlap must be an integer or one of {sorted(table)}") from None


def _source(args, test: bool, n_needed: int, seed: int, classes=range(10)):
    img_path = args.idx_test_images if test else args.idx_images
    lab_path = args.idx_test_labels if test else args.idx_labels
    if img_path or lab_path:
        if not (img_path and lab_path):
            raise UsageError("IDX images and labels must be given together")
        images, labels = load_idx(img_path), load_idx(lab_path)
        if len(images) != len(labels):
            raise DataError("IDX image and label counts differ")
        if images.dtype == np.uint8:
            images = images / 255.0
        return images, labels, "idx"
    if test and args.idx_images:
        return None, None, "none"
    images, labels = datasets.synthetic_digits(n_needed, seed, noise=args.noise, classes=classes)
    return images, labels, "synthetic"


def cmd_generate(args) -> int:
    out = Path(args.out)
    if args.task == "sudoku":
        if not args.images:
            raise UsageError("sudoku needs --images")
        images, labels, kind = _source(args, False, 2 * args.images, args.seed, classes=range(4))
        ds = datasets.gen_sudoku(images, labels, args.images, args.seed)
        datasets.write_sudoku(ds, out, {"seed": args.seed, "images": args.images, "source": kind})
        print(f"{len(ds.puzzles)} puzzles written to {out}")
        return EXIT_OK

    k = 1 if args.task == "addition1" else 2
    if not args.n:
        raise UsageError("addition needs --n")
    m = _overlap(args.overlap, args.n)
    images, labels, kind = _source(args, False, args.n, args.seed)
    ds = datasets.gen_addition(images, labels, k, args.n, m, args.seed)
    extra = {"seed": args.seed, "overlap": args.overlap, "source": kind, "split": "train"}
    datasets.write_addition(ds, out / "train", extra)
    print(f"{len(ds.instances)} additions written to {out / 'train'}")
    test_n = args.test_n if args.test_n is not None else args.n
    if test_n:
        images, labels, kind = _source(args, True, test_n, args.seed + 1)
        if images is not None:
            # test overlap follows the train ratio m / n, rounded to a whole tuple count
            m_test = int(round(m / args.n * test_n))
            m_test -= (test_n + m_test) % (2 * k)
            m_test = max(m_test, 0)
            if (test_n + m_test) % (2 * k):
                raise UsageError(f"--test-n {test_n} is not compatible with {2 * k}-tuples")
            ts = datasets.gen_addition(images, labels, k, test_n, m_test, args.seed + 1, id_prefix="t")
            datasets.write_addition(
                ts, out / "test", {"seed": args.seed + 1, "overlap_ratio": m / args.n, "source": kind, "split": "test"}
            )
            print(f"{len(ts.instances)} additions written to {out / 'test'}")
    return EXIT_OK


# --- evaluation --------------------------------------------------------------------


def _read_tsv(path: Path) -> list[tuple[tuple[str, ...], float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                cols = line.rstrip("\n").split("\t")
                rows.append((tuple(cols[:-1]), float(cols[-1])))
    return rows


def argmax_decode(rows) -> dict[tuple[str, ...], str]:
    """Group rows by all but the last argument; pick the highest value.

    Ties go to the lowest class (numeric order when classes are numbers).
    """
    groups: dict[tuple[str, ...], list[tuple[str, float]]] = {}
    for args, v in rows:
        groups.setdefault(args[:-1], []).append((args[-1], v))
    out = {}
    for key, items in groups.items():
        items.sort(key=lambda cv: natural_key(cv[0]))
        best = max(range(len(items)), key=lambda i: (items[i][1], -i))
        out[key] = items[best][0]
    return out


def evaluate(data_dir, pred_dir) -> dict[str, float]:
    data, pred = Path(data_dir), Path(pred_dir)
    metrics: dict[str, float] = {}
    sum_truth = data / "Sum_truth.tsv"
    sum_pred = pred / "Sum_inferred.tsv"
    if sum_truth.exists():
        if not sum_pred.exists():
            raise DataError(f"missing {sum_pred}")
        truth = {k: v for k, v in argmax_decode(_read_tsv(sum_truth)).items()}
        guess = argmax_decode(_read_tsv(sum_pred))
        missing = [k for k in truth if k not in guess]
        if missing:
            raise DataError(f"{len(missing)} additions have no prediction")
        metrics["addition_accuracy"] = float(np.mean([guess[k] == v for k, v in truth.items()]))
    labels = data / "digit_labels.tsv"
    neural = pred / "Neural_inferred.tsv"
    if labels.exists() and neural.exists():
        truth = {args: str(int(v)) for args, v in _read_tsv(labels)}
        guess = argmax_decode(_read_tsv(neural))
        keys = [k for k in truth if k in guess]
        if keys:
            metrics["digit_accuracy"] = float(np.mean([guess[k] == truth[k] for k in keys]))
    valid = data / "ValidPuzzle_truth.tsv"
    if valid.exists():
        source = pred / "Digit_inferred.tsv"
        if not source.exists():
            source = neural
        if not source.exists():
            raise DataError("sudoku evaluation needs Digit_inferred.tsv or Neural_inferred.tsv")
        cells = argmax_decode(_read_tsv(source))
        grids: dict[str, np.ndarray] = {}
        for (pz, r, c), cls in cells.items():
            grids.setdefault(pz, np.zeros((4, 4), dtype=np.int64))[int(r), int(c)] = int(cls)
        truth = {args[0]: v >= 0.5 for args, v in _read_tsv(valid)}
        missing = [p for p in truth if p not in grids]
        if missing:
            raise DataError(f"{len(missing)} puzzles have no prediction")
        metrics["sudoku_accuracy"] = float(
            np.mean([datasets.check_puzzle(grids[p])[0] == v for p, v in truth.items()])
        )
    if not metrics:
        raise DataError("no truth files found to evaluate against")
    return metrics


def cmd_eval(args) -> int:
    metrics = evaluate(args.data, args.predictions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in sorted(metrics):
            w.writerow([k, f"{metrics[k]:.6f}"])
    for k in sorted(metrics):
        print(f"{k} {metrics[k]:.4f}")
    return EXIT_OK


COMMANDS = {"infer": cmd_infer, "learn": cmd_learn, "generate": cmd_generate, "eval": cmd_eval}


def main(argv: Optional[list[str]] = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"softlogic: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleError, TrainingDataError) as exc:
        print(f"softlogic: infeasible: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    except (DataError, ParseError, GroundingError, DomainError, datasets.DatasetError, FileNotFoundError) as exc:
        print(f"softlogic: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
