import csv
import json

import numpy as np
import pytest

from evonas.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from evonas.genome import fixture_path, load
from evonas.tasks import write_png

SMALL = dict(initial_population=4, min_population=2, elites=1, train_iters=5, batch_size=4,
             val_minibatches=2, test_minibatches=2, max_generations=2, mem_limit_elements=4000,
             max_nodes=5)
DATA = ["--size", "8", "--count", "20"]


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def search(tmp_path, config, name, *extra):
    out = tmp_path / name
    code = main(["search", "--config", str(config), "--output", str(out), "--deterministic",
                 "--quiet", *DATA, *extra])
    return code, out


def test_search_writes_artifacts(tmp_path, config, capsys):
    code, out = search(tmp_path, config, "run", "--baseline", "--checkpoints")
    assert code == EXIT_OK
    for name in ("best_genome.json", "best_weights.bin", "individuals.csv", "generations.csv",
                 "plan.txt", "config.json", "dataset.json", "summary.json"):
        assert (out / name).is_file(), name
    assert (out / "checkpoints" / "gen000").is_dir()
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["psnr"]) == {"evolved", "input", "baseline"}
    assert "best test PSNR" in capsys.readouterr().out


def test_search_deterministic_rerun(tmp_path, config):
    _, a = search(tmp_path, config, "a", "--seed", "4")
    _, b = search(tmp_path, config, "b", "--seed", "4")
    assert (a / "best_genome.json").read_text() == (b / "best_genome.json").read_text()
    sa = json.loads((a / "summary.json").read_text())
    sb = json.loads((b / "summary.json").read_text())
    assert sa["psnr"] == sb["psnr"]


def test_missing_config_is_usage_error(tmp_path, capsys):
    code = main(["search", "--config", str(tmp_path / "nope.json"), "--output", str(tmp_path / "o")])
    assert code == EXIT_USAGE
    assert "nope.json" in capsys.readouterr().err


def test_bad_config_field_named(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, "elites": 9}))
    code = main(["search", "--config", str(path), "--output", str(tmp_path / "o")])
    assert code == EXIT_USAGE
    assert "elites" in capsys.readouterr().err


def test_unknown_task_is_usage_error(tmp_path, config):
    code, _ = search(tmp_path, config, "o", "--task", "Sharpen")
    assert code == EXIT_USAGE


def test_train_fixture_compressive(tmp_path, capsys):
    out = tmp_path / "t"
    code = main(["train", str(fixture_path("compressive_sensing")), "--task", "CompressiveSensing",
                 "--iters", "20", "--val-minibatches", "2", "--output", str(out), *DATA])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    for label in ("Training", "Validation", "Test"):
        assert f"{label}" in text
    doc = json.loads((out / "summary.json").read_text())
    assert all(isinstance(v, float) for v in doc["psnr"].values())
    assert (out / "weights.bin").is_file()


def test_train_zero_iterations(tmp_path, capsys):
    code = main(["train", str(fixture_path("denoise_gaussian")), "--iters", "0",
                 "--val-minibatches", "2", *DATA])
    assert code == EXIT_OK
    assert "Validation PSNR" in capsys.readouterr().out


def test_train_invalid_genome_lists_violations(tmp_path, capsys):
    doc = json.loads(fixture_path("checkerboard").read_text())
    doc["nodes"][2]["inputs"] = [0]
    doc["nodes"][4]["inputs"] = [3, 4]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["train", str(path), *DATA]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "arity" in err or "acyclicity" in err


def test_train_requires_genome(capsys):
    assert main(["train", *DATA]) == EXIT_USAGE


def test_train_baseline(capsys):
    assert main(["train", "--baseline", "--iters", "3", "--val-minibatches", "1", *DATA]) == EXIT_OK


@pytest.fixture
def images(tmp_path):
    folder = tmp_path / "clean"
    folder.mkdir()
    write_png(np.full((3, 16, 16), 0.5), folder / "flat.png")
    write_png(np.random.default_rng(0).random((3, 16, 16)), folder / "noise.png")
    return folder


def _rows(folder):
    return {r["file"]: r for r in csv.DictReader(open(folder / "psnr.csv"))}


def test_degrade_gaussian_oracle(tmp_path, images):
    out = tmp_path / "g"
    assert main(["degrade", "--task", "DenoiseGaussian", "--input", str(images), "--output", str(out)]) == EXIT_OK
    sim = np.clip(0.5 + np.random.default_rng(1).normal(0, 0.2, 10**6), 0, 1) - 0.5
    got = float(_rows(out)["flat.png"]["mse"])
    # 768 pixels: allow a few standard errors
    assert abs(got - np.mean(sim ** 2)) < 0.004


def test_degrade_bitwise_repeatable(tmp_path, images):
    for name in ("a", "b"):
        main(["degrade", "--task", "DenoiseGaussian", "--input", str(images), "--output", str(tmp_path / name),
              "--seed", "3"])
    for f in ("flat.png", "noise.png", "psnr.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_degrade_superres_constant(tmp_path, images):
    out = tmp_path / "s"
    main(["degrade", "--task", "Superres2x", "--input", str(images), "--output", str(out)])
    assert (out / "flat.png").read_bytes() == (images / "flat.png").read_bytes() or \
        _rows(out)["flat.png"]["psnr"] == "inf"


def test_degrade_compressive_writes_mask(tmp_path, images):
    out = tmp_path / "c"
    main(["degrade", "--task", "CompressiveSensing", "--input", str(images), "--output", str(out)])
    assert (out / "flat_mask.png").is_file()


def test_degrade_names_bad_file(tmp_path, images, capsys):
    (images / "broken.png").write_bytes(b"junk")
    code = main(["degrade", "--task", "Deblur", "--input", str(images), "--output", str(tmp_path / "d")])
    assert code == EXIT_RUNTIME
    assert "broken.png" in capsys.readouterr().err
    assert set(_rows(tmp_path / "d")) == {"flat.png", "noise.png"}


def test_degrade_missing_folder(tmp_path):
    assert main(["degrade", "--task", "Deblur", "--input", str(tmp_path / "x"), "--output", str(tmp_path / "y")]) == EXIT_USAGE


def test_report_after_search(tmp_path, config, capsys):
    _, out = search(tmp_path, config, "run")
    assert main(["report", str(out)]) == EXIT_OK
    first = (out / "report.txt").read_text()
    for label in ("Training", "Validation", "Test"):
        assert f"| {label}" in first
    fitness = (out / "fitness.csv").read_bytes()
    assert main(["report", str(out)]) == EXIT_OK
    assert (out / "report.txt").read_text() == first
    assert (out / "fitness.csv").read_bytes() == fitness


def test_report_empty_dir(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == EXIT_RUNTIME
    assert "missing" in capsys.readouterr().err


def test_no_command_is_usage_error():
    assert main([]) == EXIT_USAGE
