import json
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pytest
import torch

from spurig.autodiff import COMPLEX_DTYPE
from spurig.cli import main
from spurig.forward import ForwardOperator
from spurig.phantom import CoilMaps, ground_truth_coeffs, make_coils, make_phantom
from spurig.sampling import cartesian_trajectory, make_trajectory
from spurig.sequence import SequenceSchedule, build_dictionary
from spurig.subspace import SubspaceBasis, compute_basis

#: small dictionary grid used throughout the tests
TEST_T1 = (400.0, 800.0, 1300.0, 2000.0, 4000.0)
TEST_T2 = (40.0, 70.0, 90.0, 150.0, 400.0, 1800.0)
TEST_B1 = (0.9, 1.0, 1.1)

#: every subcommand, in pipeline order
PIPELINE = (
    "make-dict",
    "make-basis",
    "make-phantom",
    "acquire",
    "grid",
    "recon-llr",
    "train",
    "recon-unrolled",
    "evaluate",
    "ablate",
    "report",
)

#: settings that keep a full pipeline run to a few minutes
TINY_RUN = [
    "sequence.n_tr=16",
    "sequence.half_period=16",
    f"dictionary.t1_ms={list(TEST_T1)}",
    f"dictionary.t2_ms={list(TEST_T2)}",
    f"dictionary.b1={list(TEST_B1)}",
    "basis.k=3",
    "phantom.grid=16",
    "phantom.train=1",
    "phantom.validation=1",
    "phantom.test=1",
    "phantom.coils=2",
    "trajectory.groups=6",
    "trajectory.turns=2.0",
    "acquisition.R=[3]",
    "acquisition.calibration=8",
    "igrog.sources=3",
    "igrog.steps=20",
    "igrog.hidden=16",
    "llr.patch_size=4",
    "llr.iterations=3",
    "llr.sweep=[]",
    "model.iterations=2",
    "model.base=8",
    "train.models=['spur-ig']",
    "train.pretrain_epochs=1",
    "train.gleam_epochs=1",
    "train.finetune_epochs=1",
    "train.ssim_slices=3",
    "train.ssim_scales=1",
    "evaluate.methods=['zero-filled', 'llr', 'spur-ig']",
]


def random_basis(n_tr: int, k: int, seed: int = 0) -> SubspaceBasis:
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n_tr, k)) + 1j * rng.standard_normal((n_tr, k))
    phi, _ = np.linalg.qr(raw)
    return SubspaceBasis(phi, np.ones(k), np.eye(k, dtype=np.complex128))


def random_coils(grid: Sequence[int], n_coils: int, seed: int = 0) -> CoilMaps:
    """Unstructured complex maps with magnitudes in [0.5, 1.5]."""
    rng = np.random.default_rng(seed)
    shape = (n_coils,) + tuple(grid)
    magnitude = rng.uniform(0.5, 1.5, shape)
    phase = rng.uniform(0, 2 * np.pi, shape)
    return CoilMaps(magnitude * np.exp(1j * phase))


def random_coeffs(shape: Sequence[int], seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(tuple(shape), dtype=COMPLEX_DTYPE, generator=generator)


def conjugate_gradient(op, data: torch.Tensor, iterations: int = 200, tol: float = 1e-14):
    """Least-squares oracle: CG on ``A^H A x = A^H b`` from zero."""
    with torch.no_grad():
        rhs = op.normal(data)
        x = torch.zeros_like(rhs)
        r = rhs.clone()
        p = r.clone()
        rs = torch.vdot(r.reshape(-1), r.reshape(-1)).real
        for _ in range(iterations):
            ap = op.gram(p)
            alpha = rs / torch.vdot(p.reshape(-1), ap.reshape(-1)).real
            x = x + alpha * p
            r = r - alpha * ap
            new = torch.vdot(r.reshape(-1), r.reshape(-1)).real
            if float(new) < tol * float(torch.vdot(rhs.reshape(-1), rhs.reshape(-1)).real):
                break
            p = r + (new / rs) * p
            rs = new
    return x


@pytest.fixture()
def schedule():
    return SequenceSchedule.default(n_tr=24, half_period=24)


@pytest.fixture()
def make_dictionary():
    def _create_dictionary(
        n_tr: int = 24,
        t1: Sequence[float] = TEST_T1,
        t2: Sequence[float] = TEST_T2,
        b1: Sequence[float] = TEST_B1,
    ):
        sched = SequenceSchedule.default(n_tr=n_tr, half_period=n_tr)
        return build_dictionary(t1, t2, b1, sched), sched

    yield _create_dictionary


@pytest.fixture()
def make_basis(make_dictionary):
    def _create_basis(k: int = 3, n_tr: int = 24):
        dictionary, sched = make_dictionary(n_tr=n_tr)
        return compute_basis(dictionary, k), dictionary, sched

    yield _create_basis


@pytest.fixture()
def make_truth(make_basis):
    """Phantom, coils and true coefficients on a small grid."""

    def _create_truth(grid: int = 16, n_coils: int = 2, k: int = 3, n_tr: int = 24, seed=0):
        basis, dictionary, sched = make_basis(k=k, n_tr=n_tr)
        phantom = make_phantom(seed, grid)
        coils = make_coils(seed, grid, n_coils)
        coeffs = ground_truth_coeffs(phantom, sched, basis, dictionary)
        return phantom, coils, coeffs, basis

    yield _create_truth


@pytest.fixture()
def operator_builder():
    """Build forward operators over random bases and coils."""

    def _create_operator(
        mode: str = "exact-dft",
        grid: Sequence[int] = (8, 8, 8),
        n_coils: int = 2,
        k: int = 2,
        n_tr: int = 4,
        groups: int = 3,
        seed: int = 0,
        coils: Optional[CoilMaps] = None,
    ) -> ForwardOperator:
        basis = random_basis(n_tr, k, seed)
        coils = coils if coils is not None else random_coils(grid, n_coils, seed)
        if mode == "cartesian-fft":
            traj = cartesian_trajectory(grid, n_tr)
        else:
            traj = make_trajectory(
                grid, n_tr, groups, "radial-kooshball", readout_budget=max(grid)
            )
        return ForwardOperator(traj, coils.maps, basis, mode=mode)

    yield _create_operator


class CliResult:
    def __init__(self, code: int, err: str, out: Path):
        self.code = code
        self.err = err
        self.out = out

    @property
    def error(self):
        lines = [line for line in self.err.splitlines() if line.startswith("{")]
        return json.loads(lines[-1]) if lines else None


@pytest.fixture()
def cli_runner(tmp_path: Path, capsys):
    """Run ``spurig`` subcommands against a run directory under ``tmp_path``."""

    def _run(command: str, *options: str, overrides: List[str] = TINY_RUN) -> CliResult:
        out = tmp_path / "run"
        argv = [command, "--out", str(out)]
        for item in overrides:
            argv += ["--set", item]
        argv += list(options)
        code = main(argv)
        return CliResult(code, capsys.readouterr().err, out)

    yield _run
