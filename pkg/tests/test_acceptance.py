"""Desk-scale reproductions of the comparative claims. Each takes minutes to hours, so
they only run with ``pytest -m slow``."""
import pytest

from spurig.cli import main
from spurig.storage import read_csv

from .conftest import PIPELINE

pytestmark = pytest.mark.slow

ABLATION_SUITE = ["full", "gleam-only", "gleam-no-pt", "full-uncond", "full-uncond-no-ws"]

#: the gridding comparison on a 48^3 phantom with the packaged iGROG settings
GRIDDING_RUN = [
    "phantom.grid=48",
    "phantom.train=1",
    "phantom.validation=1",
    "phantom.test=1",
    "phantom.coils=4",
    "acquisition.R=[3]",
]


def _run(out, commands, overrides=()):
    for command in commands:
        argv = [command, "--out", str(out)]
        for item in overrides:
            argv += ["--set", item]
        assert main(argv) == 0, command


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The packaged desk-scale experiment, every stage."""
    out = tmp_path_factory.mktemp("desk")
    suite = ", ".join(f"'{name}'" for name in ABLATION_SUITE)
    _run(out, PIPELINE, [f"ablate.suite=[{suite}]"])
    return out


def test_gridded_dc_matches_nufft_dc(tmp_path):
    _run(tmp_path, PIPELINE[:5], GRIDDING_RUN)
    fidelity = read_csv(tmp_path / "gridded" / "fidelity.csv").set_index("R")
    assert fidelity.loc[3, "gap_db"] < 1.0
    assert fidelity.loc[3, "speedup"] > 1.0


def test_method_ordering(desk_run):
    metrics = read_csv(desk_run / "evaluation" / "metrics.csv").set_index(["method", "R"])
    psnr, t1 = metrics["psnr_0"], metrics["t1_err"]
    order = ["spur-ig", "hybrid-2d3d", "llr", "zero-filled"]
    for better, worse in zip(order, order[1:]):
        assert psnr[(better, 12)] > psnr[(worse, 12)], (better, worse)
        assert t1[(better, 12)] < t1[(worse, 12)], (better, worse)
    for R in (3, 6, 12):
        assert psnr[("spur-ig", R)] >= psnr[("llr", R)], R
    # the fastest scan with the learned model beats the baseline at a 4x longer scan
    assert t1[("spur-ig", 12)] <= t1[("llr", 3)]


def test_ablation_ordering(desk_run):
    frame = read_csv(desk_run / "ablation" / "ablation.csv").set_index("variant")
    psnr = frame["psnr"]
    assert psnr["full"] >= psnr["gleam-only"] >= psnr["gleam-no-pt"]
    shared, unshared = frame.loc["full-uncond"], frame.loc["full-uncond-no-ws"]
    steps = int(shared["iterations"])
    assert unshared["parameters"] - steps == steps * (shared["parameters"] - steps)
    full = frame.loc["full"]
    assert full["conditioning_parameters"] < 0.01 * full["parameters"]
