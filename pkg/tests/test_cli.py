import numpy as np
import pytest

from spurig import __version__
from spurig.cli import main, setup_cli
from spurig.sequence import load_dictionary
from spurig.storage import read_csv, read_json
from spurig.subspace import load_basis

from .conftest import PIPELINE, TEST_B1, TEST_T1


def test_every_stage_is_registered():
    assert sorted(setup_cli().commands) == sorted(PIPELINE)


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as info:
        main(["make-everything"])
    assert info.value.code == 2


def test_missing_artifact_is_reported(cli_runner):
    result = cli_runner("make-basis")
    assert result.code == 1
    assert result.error["error"] == "MissingArtifactError"
    assert result.error["details"]["producer"] == "make-dict"
    assert "run the 'make-dict' subcommand first" in result.error["message"]


def test_invalid_configuration_is_reported(cli_runner):
    result = cli_runner("make-dict", overrides=["basis.k=0", "phantom.coils=many"])
    assert result.code == 1
    assert result.error["error"] == "ConfigError"
    assert len(result.error["details"]["fields"]) == 2
    assert not (result.out / "dictionary").exists()


def test_dictionary_and_basis_stages(cli_runner):
    result = cli_runner("make-dict")
    assert result.code == 0
    dictionary, sched = load_dictionary(result.out / "dictionary")
    assert dictionary.n_atoms == 78
    assert dictionary.hull() == ((min(TEST_T1), max(TEST_T1)), (40.0, 1800.0), TEST_B1[::2])
    assert sched.n_tr == 16
    result = cli_runner("make-basis")
    assert result.code == 0
    basis = load_basis(result.out / "basis")
    assert basis.k == 3
    energy = read_csv(result.out / "basis" / "energy.csv")
    fractions = energy["energy_fraction"].to_numpy()
    assert np.all(np.diff(fractions) >= -1e-12)
    assert fractions[-1] == pytest.approx(1.0)
    snapshot = read_json(result.out / "config.resolved.json")
    assert snapshot["basis"]["k"] == 3


def test_command_line_flags_override_the_configuration(cli_runner):
    result = cli_runner("make-dict", "--seed", "9")
    assert result.code == 0
    assert read_json(result.out / "config.resolved.json")["run"]["seed"] == 9


def test_reruns_are_byte_identical(cli_runner, tmp_path):
    second = tmp_path / "second"
    for command in ("make-dict", "make-basis", "make-phantom", "acquire"):
        assert cli_runner(command).code == 0
        assert cli_runner(command, "--out", str(second)).code == 0
    first = tmp_path / "run"
    tensors = sorted(p.relative_to(first) for p in first.rglob("*.bin"))
    assert len(tensors) > 10
    for path in tensors:
        assert (first / path).read_bytes() == (second / path).read_bytes(), path
    energy = "phantoms/energy.csv"
    assert (first / energy).read_bytes() == (second / energy).read_bytes()


def test_grid_compares_gridded_and_nufft_reconstructions(cli_runner):
    for command in ("make-dict", "make-basis", "make-phantom", "acquire", "grid"):
        result = cli_runner(command)
        assert result.code == 0, (command, result.error)
    out = result.out
    # pretraining tiers need every acceleration, not only the configured R=3
    for R in (3, 6, 12):
        assert len(list((out / "acquisitions").glob(f"*/R{R}"))) == 3
        assert len(list((out / "gridded").glob(f"*/R{R}"))) == 3
    timing = read_csv(out / "gridded" / "timing.csv")
    assert sorted(timing["dc"]) == ["igrog-fft", "nufft"]
    assert (timing["R"] == 3).all()
    assert np.isfinite(timing["psnr"]).all()
    assert (timing["seconds"] > 0).all()
    fidelity = read_csv(out / "gridded" / "fidelity.csv")
    assert list(fidelity.columns) == ["R", "psnr_nufft", "psnr_igrog", "gap_db", "speedup"]
    row = fidelity.iloc[0]
    assert row["R"] == 3
    assert row["gap_db"] == pytest.approx(row["psnr_nufft"] - row["psnr_igrog"], abs=1e-6)
    assert row["speedup"] > 0


@pytest.mark.slow
def test_full_pipeline(cli_runner):
    for command in PIPELINE:
        result = cli_runner(command)
        assert result.code == 0, (command, result.error)
    out = result.out
    metrics = read_csv(out / "evaluation" / "metrics.csv")
    assert set(metrics["method"]) == {"zero-filled", "llr", "spur-ig"}
    assert np.isfinite(metrics["psnr_0"]).all()
    assert (out / "report" / "report.txt").exists()
    assert (out / "report" / "slices_R3.png").exists()
    assert (out / "report" / "maps_R3.png").exists()
    assert (out / "models" / "spur-ig" / "log.csv").exists()
    assert (out / "gridded" / "timing.csv").exists()
    assert (out / "report" / "fidelity.csv").exists()
