import json

import numpy as np
import pytest

from softlogic.cli import EXIT_DATA, EXIT_OK, EXIT_SOLVE, EXIT_USAGE, argmax_decode, main

TOY = """
predicate Obs/1 observed
predicate T/1 target
1.0: Obs(X) -> T(X) ^2
1.0: Obs(X) -> !T(X) ^2
"""

INFEASIBLE = TOY + "T(X) >= 0.8 .\nT(X) <= 0.2 .\n"

TOY_LEARN = TOY + "1.0: T(X) ^2\n"


def toy_setup(tmp_path, program=TOY, truth=None):
    model = tmp_path / "toy.psl"
    model.write_text(program)
    data = tmp_path / "data"
    data.mkdir()
    (data / "Obs_obs.tsv").write_text("a\t1\n")
    (data / "T_targets.tsv").write_text("a\n")
    if truth is not None:
        (data / "T_truth.tsv").write_text(f"a\t{truth}\n")
    return model, data


def test_infer_toy_gives_half(tmp_path, capsys):
    model, data = toy_setup(tmp_path)
    out = tmp_path / "out"
    code = main(["infer", "--model", str(model), "--data", str(data), "--out", str(out),
                 "--primal-tol", "1e-9", "--dual-tol", "1e-9", "--max-admm-iters", "5000"])
    assert code == EXIT_OK
    name, value = (out / "T_inferred.tsv").read_text().split()
    assert name == "a" and float(value) == pytest.approx(0.5, abs=1e-6)
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["energy"] == pytest.approx(0.5, abs=1e-6)
    assert "solve_ms" not in summary


def test_infer_dump_ground_and_timing(tmp_path):
    model, data = toy_setup(tmp_path)
    out = tmp_path / "out"
    assert main(["infer", "--model", str(model), "--data", str(data), "--out", str(out),
                 "--dump-ground", "--record-time", "--residual-log", str(tmp_path / "r.csv")]) == EXIT_OK
    dump = (out / "ground_model.txt").read_text()
    assert "w1" in dump and "w2" in dump
    assert "solve_ms" in json.loads((out / "run_summary.json").read_text())
    assert (tmp_path / "r.csv").read_text().startswith("iteration,primal_residual,dual_residual")


def test_infeasible_exit_code(tmp_path, capsys):
    model, data = toy_setup(tmp_path, INFEASIBLE)
    code = main(["infer", "--model", str(model), "--data", str(data), "--out", str(tmp_path / "o")])
    assert code == EXIT_SOLVE
    assert "infeasible" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path):
    model, data = toy_setup(tmp_path)
    (data / "Obs_obs.tsv").write_text("a\tnot-a-number\n")
    assert main(["infer", "--model", str(model), "--data", str(data), "--out", str(tmp_path / "o")]) == EXIT_DATA
    bad = tmp_path / "bad.psl"
    bad.write_text("predicate T/1 target\n1.0: T(X) ->\n")
    assert main(["infer", "--model", str(bad), "--data", str(data), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["infer", "--model", str(tmp_path / "missing.psl"), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_usage_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["infer", "--model", "x"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == EXIT_USAGE
    assert main(["generate", "sudoku", "--out", str(tmp_path / "s")]) == EXIT_USAGE
    assert main(["generate", "addition1", "--n", "6", "--overlap", "lots", "--out", str(tmp_path / "a")]) == EXIT_USAGE


def test_learn_without_truth_is_data_error(tmp_path):
    model, data = toy_setup(tmp_path, TOY_LEARN)
    assert main(["learn", "--model", str(model), "--data", str(data), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_learn_is_byte_identical(tmp_path):
    model, data = toy_setup(tmp_path, TOY_LEARN, truth=0.3)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["learn", "--model", str(model), "--data", str(data), "--out", str(out), "--epochs", "5"]) == EXIT_OK
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0] == outs[1]
    labels = [line.split()[0] for line in outs[0]["weights.txt"].decode().splitlines()]
    assert labels == ["w1", "w2", "w3"]
    trace = outs[0]["loss_trace.csv"].decode().splitlines()
    assert trace[0] == "epoch,example_count,total_loss,wall_ms"
    assert all(line.endswith(",0") for line in trace[1:])


def test_learn_zero_epochs_writes_uniform_weights(tmp_path):
    model, data = toy_setup(tmp_path, TOY_LEARN, truth=0.3)
    out = tmp_path / "o"
    assert main(["learn", "--model", str(model), "--data", str(data), "--out", str(out), "--epochs", "0"]) == EXIT_OK
    values = [float(line.split()[1]) for line in (out / "weights.txt").read_text().splitlines()]
    assert values == pytest.approx([1 / 3] * 3)
    assert (out / "loss_trace.csv").read_text().splitlines() == ["epoch,example_count,total_loss,wall_ms"]


def test_generate_addition(tmp_path):
    out = tmp_path / "g"
    assert main(["generate", "addition1", "--n", "600", "--test-n", "0", "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "train" / "manifest.json").read_text())
    assert manifest["additions"] == 300 and manifest["unique_images"] == 600
    assert not (out / "test").exists()


def test_generate_overlap_in_manifest(tmp_path):
    out = tmp_path / "g"
    assert main(["generate", "addition1", "--n", "40", "--overlap", "2n", "--out", str(out)]) == EXIT_OK
    train = json.loads((out / "train" / "manifest.json").read_text())
    assert train["m"] == 80 and train["overlap"] == "2n" and train["additions"] == 60
    test = json.loads((out / "test" / "manifest.json").read_text())
    assert test["overlap_ratio"] == 2.0 and test["additions"] == 60


def test_generate_sudoku(tmp_path):
    out = tmp_path / "s"
    assert main(["generate", "sudoku", "--images", "160", "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert (manifest["valid"], manifest["corrupt"], manifest["puzzles"]) == (10, 10, 20)


def test_generate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["generate", "addition2", "--n", "40", "--test-n", "0", "--seed", "3",
                     "--out", str(tmp_path / name)]) == EXIT_OK
    for f in (tmp_path / "a" / "train").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "train" / f.name).read_bytes()


def test_argmax_ties_go_to_lowest_class():
    rows = [(("i", "10"), 0.4), (("i", "2"), 0.4), (("i", "3"), 0.2), (("j", "1"), 0.1), (("j", "0"), 0.9)]
    assert argmax_decode(rows) == {("i",): "2", ("j",): "0"}


def _perfect_predictions(data, pred):
    pred.mkdir()
    (pred / "Sum_inferred.tsv").write_text((data / "Sum_truth.tsv").read_text())
    lines = []
    for line in (data / "digit_labels.tsv").read_text().splitlines():
        img, d = line.split("\t")
        lines += [f"{img}\t{c}\t{float(c == int(d))}" for c in range(10)]
    (pred / "Neural_inferred.tsv").write_text("\n".join(lines) + "\n")


def test_eval_perfect_predictions(tmp_path):
    gen = tmp_path / "g"
    assert main(["generate", "addition1", "--n", "20", "--test-n", "0", "--out", str(gen)]) == EXIT_OK
    data, pred = gen / "train", tmp_path / "p"
    _perfect_predictions(data, pred)
    assert main(["eval", "--data", str(data), "--predictions", str(pred), "--out", str(tmp_path / "e")]) == EXIT_OK
    metrics = (tmp_path / "e" / "metrics.csv").read_text().splitlines()
    assert metrics == ["metric,value", "addition_accuracy,1.000000", "digit_accuracy,1.000000"]


def test_eval_sudoku_perfect(tmp_path):
    data = tmp_path / "s"
    assert main(["generate", "sudoku", "--images", "32", "--out", str(data)]) == EXIT_OK
    pred = tmp_path / "p"
    pred.mkdir()
    lines = []
    for line in (data / "cell_labels.tsv").read_text().splitlines():
        *key, cls = line.split("\t")
        lines += ["\t".join(key + [str(n), str(float(n == int(float(cls))))]) for n in range(1, 5)]
    (pred / "Digit_inferred.tsv").write_text("\n".join(lines) + "\n")
    assert main(["eval", "--data", str(data), "--predictions", str(pred), "--out", str(tmp_path / "e")]) == EXIT_OK
    assert "sudoku_accuracy,1.000000" in (tmp_path / "e" / "metrics.csv").read_text()


def test_eval_missing_predictions(tmp_path):
    gen = tmp_path / "g"
    main(["generate", "addition1", "--n", "20", "--test-n", "0", "--out", str(gen)])
    (tmp_path / "p").mkdir()
    assert main(["eval", "--data", str(gen / "train"), "--predictions", str(tmp_path / "p"),
                 "--out", str(tmp_path / "e")]) == EXIT_DATA


def test_infer_then_eval_on_generated_data(tmp_path):
    import softlogic

    gen = tmp_path / "g"
    main(["generate", "addition1", "--n", "20", "--test-n", "0", "--out", str(gen)])
    out = tmp_path / "i"
    model = softlogic.model_path("mnist_add1_constraint.psl")
    assert main(["infer", "--model", str(model), "--data", str(gen / "train"), "--out", str(out)]) == EXIT_OK
    assert {"Sum_inferred.tsv", "Neural_inferred.tsv"} <= {p.name for p in out.iterdir()}
    assert main(["eval", "--data", str(gen / "train"), "--predictions", str(out), "--out", str(tmp_path / "e")]) == EXIT_OK
    rows = dict(line.split(",") for line in (tmp_path / "e" / "metrics.csv").read_text().splitlines()[1:])
    assert 0.0 <= float(rows["addition_accuracy"]) <= 1.0
    assert np.isfinite(float(rows["digit_accuracy"]))
