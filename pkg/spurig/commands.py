"""Pipeline subcommands. Each reads the artifacts of earlier stages from the run
directory and writes its own, so every stage can be rerun in isolation."""
from dataclasses import replace
from logging import getLogger
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Tuple

import numpy as np
import pandas as pd
import torch

from .autodiff import COMPLEX_DTYPE
from .config import MODELS, Config
from .forward import ForwardOperator
from .igrog import (
    fft_dc_operator,
    grid,
    load_gridded,
    save_gridded,
    save_kernel,
    time_dc_iteration,
    train_kernel,
)
from .llr import LLRConfig, fista_llr, power_iteration_L, sweep_threshold, threshold_for
from .losses import TissueWeights
from .metrics import EvalReport, brain_slices, slice_scores
from .phantom import CoilMaps, Phantom, load_phantom, make_coils, make_phantom, save_phantom
from .phantom import ground_truth_coeffs
from .sampling import (
    AcquisitionSet,
    load_acquisition,
    make_calibration,
    make_trajectory,
    sample_kspace,
    save_acquisition,
)
from .sequence import (
    SequenceSchedule,
    build_dictionary,
    default_grid,
    load_dictionary,
    match_volume,
    save_dictionary,
)
from .shared import MissingArtifactError
from .storage import load_bundle, load_tensor, save_bundle, save_tensor, write_csv
from .subspace import (
    SubspaceBasis,
    balance,
    coefficient_energy_ratio,
    compute_basis,
    load_basis,
    save_basis,
)
from .training import (
    PRETRAINING_RATES,
    STAGES,
    TrainingPlan,
    TrainingSample,
    TrainingSet,
    finetune,
    gleam_train,
    pretrain,
    run_ablation,
)
from .unrolled import DenoiserModel, UnrollConfig, load_model, reconstruct, save_model
from .unrolled import zero_filled

LOGGER = getLogger(__name__)

SPLITS = ("train", "validation", "test")
#: R value whose zero-filled reconstruction is the first pretraining tier
ZERO_FILLED_TIER = 12
STAGE_RUNNERS = {"pretrain": pretrain, "gleam": gleam_train, "finetune": finetune}


class Layout:
    """Artifact paths inside a run directory."""

    def __init__(self, out: Path):
        self.out = Path(out)

    def dictionary(self) -> Path:
        return self.out / "dictionary"

    def basis(self) -> Path:
        return self.out / "basis"

    def phantom(self, name: str) -> Path:
        return self.out / "phantoms" / name

    def acquisition(self, name: str, R: int) -> Path:
        return self.out / "acquisitions" / name / f"R{R}"

    def kernel(self, name: str) -> Path:
        return self.out / "gridded" / name / "kernel"

    def gridded(self, name: str, R: int) -> Path:
        return self.out / "gridded" / name / f"R{R}"

    def recon(self, method: str, name: str, R: int) -> Path:
        return self.out / "recon" / method / name / f"R{R}"

    def model(self, method: str) -> Path:
        return self.out / "models" / method

    def evaluation(self) -> Path:
        return self.out / "evaluation"

    def ablation(self) -> Path:
        return self.out / "ablation"

    def report(self) -> Path:
        return self.out / "report"


class PhantomEntry(NamedTuple):
    split: str
    name: str
    seed: int
    index: int


def phantom_entries(cfg: Config, splits=SPLITS) -> List[PhantomEntry]:
    """Phantom names and seeds; seeds run consecutively over all splits."""
    entries, index = [], 0
    for split in SPLITS:
        for i in range(cfg[f"phantom.{split}"]):
            if split in splits:
                seed = cfg["phantom.seed"] + index
                entries.append(PhantomEntry(split, f"{split}-{i:02d}", seed, index))
            index += 1
    return entries


def schedule_from(cfg: Config) -> SequenceSchedule:
    return SequenceSchedule.default(
        cfg["sequence.n_tr"],
        cfg["sequence.fa_min"],
        cfg["sequence.fa_max"],
        cfg["sequence.half_period"],
        cfg["sequence.tr_ms"],
        cfg["sequence.te_ms"],
        cfg["sequence.ti_ms"],
    )


def load_truth(layout: Layout, name: str) -> Tuple[Phantom, CoilMaps, np.ndarray]:
    directory = layout.phantom(name)
    phantom, coils = load_phantom(directory)
    if coils is None:
        raise MissingArtifactError(str(directory / "coils.bin"), "make-phantom")
    try:
        coeffs = load_tensor(directory, "coeffs")
    except FileNotFoundError:
        raise MissingArtifactError(str(directory / "coeffs.bin"), "make-phantom") from None
    return phantom, coils, coeffs


def save_recon(directory: Path, coeffs, method: str, R: int):
    save_bundle(directory, {"coeffs": coeffs}, {"kind": "recon", "method": method, "R": R})


def load_recon(directory: Path, producer: str) -> np.ndarray:
    tensors, _ = load_bundle(directory, producer)
    return tensors["coeffs"]


def make_dict(app):
    cfg = app.cfg
    sched = schedule_from(cfg)
    values = default_grid()
    for key, option in (("t1", "t1_ms"), ("t2", "t2_ms"), ("b1", "b1")):
        if cfg[f"dictionary.{option}"]:
            values[key] = np.asarray(cfg[f"dictionary.{option}"])
    dictionary = build_dictionary(values["t1"], values["t2"], values["b1"], sched)
    save_dictionary(Layout(app.out).dictionary(), dictionary, sched)


def make_basis(app):
    layout = Layout(app.out)
    dictionary, _ = load_dictionary(layout.dictionary())
    basis = compute_basis(dictionary, app.cfg["basis.k"])
    if app.cfg["basis.balanced"]:
        basis = balance(basis)
    save_basis(layout.basis(), basis)
    values = basis.all_singular_values
    energy = pd.DataFrame(
        {
            "rank": np.arange(1, values.size + 1),
            "singular_value": values,
            "energy_fraction": [basis.energy_fraction(n) for n in range(1, values.size + 1)],
        }
    )
    write_csv(layout.basis() / "energy.csv", energy)


def make_phantoms(app):
    cfg = app.cfg
    layout = Layout(app.out)
    dictionary, sched = load_dictionary(layout.dictionary())
    basis = load_basis(layout.basis())
    rows = []
    for entry in phantom_entries(cfg):
        phantom = make_phantom(entry.seed, cfg["phantom.grid"], cfg["phantom.lesions"])
        coils = make_coils(entry.seed, phantom.grid, cfg["phantom.coils"])
        coeffs = ground_truth_coeffs(phantom, sched, basis, dictionary)
        save_phantom(layout.phantom(entry.name), phantom, coils)
        save_tensor(layout.phantom(entry.name), "coeffs", coeffs)
        rows.append(
            {
                "phantom": entry.name,
                "energy_ratio": coefficient_energy_ratio(coeffs),
                "energy_ratio_unbalanced": coefficient_energy_ratio(basis.to_unbalanced(coeffs)),
            }
        )
    write_csv(layout.out / "phantoms" / "energy.csv", pd.DataFrame(rows))


def acquire(app):
    cfg = app.cfg
    layout = Layout(app.out)
    basis = load_basis(layout.basis())
    traj = make_trajectory(
        cfg["phantom.grid"],
        cfg["sequence.n_tr"],
        cfg["trajectory.groups"],
        cfg["trajectory.kind"],
        cfg["trajectory.turns"],
        cfg["trajectory.readout_budget"] or None,
    )
    for entry in phantom_entries(cfg):
        _, coils, coeffs = load_truth(layout, entry.name)
        full = sample_kspace(
            coeffs,
            coils,
            traj,
            basis,
            cfg["acquisition.noise_sigma"],
            seed=cfg["acquisition.seed"] + entry.index,
        )
        save_acquisition(layout.acquisition(entry.name, 1), full)
        for R in acquired_rates(cfg):
            save_acquisition(layout.acquisition(entry.name, R), full.undersample(R))


def acquired_rates(cfg: Config) -> List[int]:
    """Configured accelerations plus those the pretraining tiers need."""
    return sorted({*cfg["acquisition.R"], *PRETRAINING_RATES} - {1})


def nufft_operator(acq: AcquisitionSet, coils: CoilMaps, basis: SubspaceBasis):
    return ForwardOperator(acq.trajectory, coils.maps, basis, mode="nufft", self_check=False)


def grid_acquisitions(app):
    cfg = app.cfg
    layout = Layout(app.out)
    basis = load_basis(layout.basis())
    timing = []
    compared = False
    for entry in phantom_entries(cfg):
        phantom, coils, coeffs = load_truth(layout, entry.name)
        calib = make_calibration(coeffs, coils, cfg["acquisition.calibration"])
        kernel = train_kernel(
            calib,
            n=cfg["igrog.sources"],
            seed=cfg["run.seed"] + entry.index,
            oversampling=cfg["igrog.oversampling"],
            steps=cfg["igrog.steps"],
            lr=cfg["igrog.lr"],
            hidden=cfg["igrog.hidden"],
        )
        save_kernel(layout.kernel(entry.name), kernel)
        compare = entry.split == "test" and not compared
        for R in acquired_rates(cfg):
            acq = load_acquisition(layout.acquisition(entry.name, R))
            gridded = grid(kernel, acq, coils.maps.shape[1:])
            save_gridded(layout.gridded(entry.name, R), gridded)
            if compare and R in cfg["acquisition.R"]:
                timing += dc_comparison(cfg, acq, gridded, coils, basis, phantom, coeffs, R)
        compared = compared or compare
    if timing:
        frame = pd.DataFrame(timing)
        write_csv(layout.out / "gridded" / "timing.csv", frame)
        write_csv(layout.out / "gridded" / "fidelity.csv", fidelity_table(frame))


def dc_comparison(cfg, acq, gridded, coils, basis, phantom, coeffs, R: int) -> List[Dict]:
    """Per-iteration DC wall time and FISTA-LLR reconstruction PSNR of the NUFFT and
    the gridded FFT operators on one acquisition.

    Both reconstructions share the LLR settings and the threshold picked from the NUFFT
    data, so the operators are the only difference.
    """
    rows = []
    truth = torch.as_tensor(coeffs, dtype=COMPLEX_DTYPE)
    slices = brain_slices(phantom)
    settings = llr_settings(cfg)
    for mode, op, data in (
        ("nufft", nufft_operator(acq, coils, basis), acq.data),
        (
            "igrog-fft",
            fft_dc_operator(gridded, coils.maps, basis, self_check=False),
            gridded.data,
        ),
    ):
        data = torch.as_tensor(data, dtype=COMPLEX_DTYPE)
        seconds = time_dc_iteration(op, truth, data)
        if mode == "nufft":
            settings = replace(settings, threshold=threshold_for(R, op.normal(data)))
        result = fista_llr(data, op, settings)
        scores, _ = slice_scores(result.coeffs[0].numpy(), np.asarray(coeffs)[0], slices)
        rows.append(
            {
                "R": R,
                "dc": mode,
                "samples": int(data.shape[1]),
                "seconds": seconds,
                "psnr": float(scores.mean()),
            }
        )
        LOGGER.info(
            f"{mode} DC at R={R}: {seconds * 1e3:.1f} ms per iteration, "
            f"FISTA-LLR PSNR {rows[-1]['psnr']:.2f} dB"
        )
    return rows


def fidelity_table(timing: pd.DataFrame) -> pd.DataFrame:
    """PSNR gap (NUFFT minus gridded FFT) and DC speed-up per R."""
    wide = timing.pivot(index="R", columns="dc", values=["psnr", "seconds"])
    return pd.DataFrame(
        {
            "R": wide.index.to_numpy(),
            "psnr_nufft": wide[("psnr", "nufft")].to_numpy(),
            "psnr_igrog": wide[("psnr", "igrog-fft")].to_numpy(),
            "gap_db": (wide[("psnr", "nufft")] - wide[("psnr", "igrog-fft")]).to_numpy(),
            "speedup": (wide[("seconds", "nufft")] / wide[("seconds", "igrog-fft")]).to_numpy(),
        }
    )


def llr_settings(cfg: Config) -> LLRConfig:
    return LLRConfig(
        patch_size=cfg["llr.patch_size"],
        iterations=cfg["llr.iterations"],
        schedule=cfg["llr.schedule"],
        patches_per_iter=cfg["llr.patches_per_iter"],
        seed=cfg["run.seed"],
    )


def llr_rates(cfg: Config) -> List[int]:
    return [1, *acquired_rates(cfg)]


def recon_llr(app):
    """FISTA-LLR on every phantom at R=1 and every configured R, with the threshold
    multiplier per R picked on the first validation phantom."""
    cfg = app.cfg
    layout = Layout(app.out)
    basis = load_basis(layout.basis())
    base = llr_settings(cfg)
    gains = {R: 1.0 for R in llr_rates(cfg)}
    sweeps = []
    sweep_entry = phantom_entries(cfg, ("validation",))[0]
    if cfg["llr.sweep"]:
        _, coils, truth = load_truth(layout, sweep_entry.name)
        for R in llr_rates(cfg):
            acq = load_acquisition(layout.acquisition(sweep_entry.name, R))
            op = nufft_operator(acq, coils, basis)
            data = torch.as_tensor(acq.data, dtype=COMPLEX_DTYPE)
            reference = threshold_for(R, op.normal(data))
            best, frame = sweep_threshold(
                data,
                op,
                torch.as_tensor(truth, dtype=COMPLEX_DTYPE),
                base,
                [gain * reference for gain in cfg["llr.sweep"]],
            )
            gains[R] = best / reference if reference > 0 else 1.0
            sweeps.append(frame.assign(R=R, gain=frame["threshold"] / max(reference, 1e-300)))
        write_csv(layout.out / "recon" / "llr" / "sweep.csv", pd.concat(sweeps))
    for entry in phantom_entries(cfg):
        _, coils, _ = load_truth(layout, entry.name)
        for R in llr_rates(cfg):
            acq = load_acquisition(layout.acquisition(entry.name, R))
            op = nufft_operator(acq, coils, basis)
            data = torch.as_tensor(acq.data, dtype=COMPLEX_DTYPE)
            threshold = gains[R] * threshold_for(R, op.normal(data))
            result = fista_llr(data, op, replace(base, threshold=threshold))
            directory = layout.recon("llr", entry.name, R)
            save_recon(directory, result.coeffs, "llr", R)
            write_csv(directory / "trace.csv", result.trace_frame())


def dc_operator(cfg: Config, layout: Layout, name: str, R: int, coils, basis):
    """Data-consistency operator and data used by the learned reconstructions."""
    if cfg["train.dc"] == "igrog":
        gridded = load_gridded(layout.gridded(name, R))
        op = fft_dc_operator(gridded, coils.maps, basis, self_check=False)
        return op, torch.as_tensor(gridded.data, dtype=COMPLEX_DTYPE)
    acq = load_acquisition(layout.acquisition(name, R))
    return nufft_operator(acq, coils, basis), torch.as_tensor(acq.data, dtype=COMPLEX_DTYPE)


def reference_coeffs(cfg: Config, layout: Layout, name: str) -> np.ndarray:
    """Training target and evaluation reference: the R=1 LLR or the phantom truth."""
    if cfg["train.target"] == "llr-R1":
        return load_recon(layout.recon("llr", name, 1), "recon-llr")
    return load_truth(layout, name)[2]


def _masks(phantom: Phantom) -> Dict[str, torch.Tensor]:
    return {k: torch.as_tensor(v) for k, v in phantom.tissue_masks().items()}


def build_samples(cfg: Config, layout: Layout, split: str, basis) -> List[TrainingSample]:
    """One sample per phantom and R; pretraining inputs ride on each phantom's first."""
    samples = []
    for entry in phantom_entries(cfg, (split,)):
        phantom, coils, _ = load_truth(layout, entry.name)
        target = torch.as_tensor(reference_coeffs(cfg, layout, entry.name), dtype=COMPLEX_DTYPE)
        masks = _masks(phantom)
        for number, R in enumerate(cfg["acquisition.R"]):
            op, data = dc_operator(cfg, layout, entry.name, R, coils, basis)
            sample = TrainingSample(target, masks, op=op, data=data)
            if number == 0:
                sample.tiers = pretraining_tiers(cfg, layout, entry.name, coils, basis)
            samples.append(sample)
    return samples


def pretraining_tiers(cfg, layout, name, coils, basis) -> Dict[str, torch.Tensor]:
    tiers = {}
    op, data = dc_operator(cfg, layout, name, ZERO_FILLED_TIER, coils, basis)
    tiers["zero-filled"] = zero_filled(op, data)
    for R in PRETRAINING_RATES:
        tiers[f"llr-R{R}"] = torch.as_tensor(
            load_recon(layout.recon("llr", name, R), "recon-llr"), dtype=COMPLEX_DTYPE
        )
    return tiers


def training_set(cfg: Config, layout: Layout, basis) -> TrainingSet:
    return TrainingSet(
        build_samples(cfg, layout, "train", basis),
        build_samples(cfg, layout, "validation", basis),
    )


def unroll_config(cfg: Config, method: str) -> UnrollConfig:
    return UnrollConfig(
        iterations=cfg["model.iterations"],
        weight_sharing=cfg["model.weight_sharing"],
        dims=3 if method == "spur-ig" else 2,
        base=cfg["model.base"],
        conditioned=cfg["model.conditioned"],
        checkpoint=cfg["model.checkpoint"],
        init_scaling=cfg["model.init_scaling"],
    )


def stage_plans(cfg: Config) -> Dict[str, TrainingPlan]:
    shared = dict(
        lr=cfg["train.lr"],
        patience=cfg["train.patience"],
        weights=TissueWeights(cfg["train.wm"], cfg["train.gm"], cfg["train.csf"]),
        ssim_weight=cfg["train.ssim_weight"],
        ssim_slices=cfg["train.ssim_slices"],
        ssim_scales=cfg["train.ssim_scales"],
        augment=cfg["train.augment"],
        immediate_updates=cfg["train.immediate_updates"],
        memory_budget=cfg["train.memory_budget"] or None,
        seed=cfg["run.seed"],
    )
    return {
        stage: TrainingPlan.for_stage(stage, cfg[f"train.{stage}_epochs"], **shared)
        for stage in STAGES
    }


def initial_step(dataset: TrainingSet, cfg: Config) -> float:
    """``1 / L`` of the first training operator."""
    op = dataset.train[0].op
    return 1.0 / power_iteration_L(op, seed=cfg["run.seed"]).value


def train(app):
    cfg = app.cfg
    layout = Layout(app.out)
    basis = load_basis(layout.basis())
    dataset = training_set(cfg, layout, basis)
    plans = stage_plans(cfg)
    step = initial_step(dataset, cfg)
    for method in cfg["train.models"]:
        model = DenoiserModel(
            basis.k, unroll_config(cfg, method), step=step, seed=cfg["run.seed"]
        )
        model.set_whitening([sample.target for sample in dataset.train])
        frames = []
        for stage in STAGES:
            log = STAGE_RUNNERS[stage](model, dataset, plans[stage])
            frames.append(log.to_frame())
            save_model(layout.model(method) / stage, model, {"stage": stage, "method": method})
            LOGGER.info(f"{method}: {stage} done, peak saved {log.peak_saved_bytes} bytes")
        save_model(layout.model(method), model, {"stage": "final", "method": method})
        write_csv(layout.model(method) / "log.csv", pd.concat(frames, ignore_index=True))


def trained_models(cfg: Config, layout: Layout) -> Iterator[Tuple[str, DenoiserModel]]:
    for method in cfg["train.models"]:
        yield method, load_model(layout.model(method))


def recon_unrolled(app):
    cfg = app.cfg
    layout = Layout(app.out)
    basis = load_basis(layout.basis())
    for method, model in trained_models(cfg, layout):
        model.eval()
        for entry in phantom_entries(cfg, ("test",)):
            _, coils, _ = load_truth(layout, entry.name)
            for R in cfg["acquisition.R"]:
                op, data = dc_operator(cfg, layout, entry.name, R, coils, basis)
                coeffs = reconstruct(model, op, data)
                save_recon(layout.recon(method, entry.name, R), coeffs, method, R)


def method_coeffs(
    cfg: Config, layout: Layout, method: str, name: str, R: int, coils, basis
) -> np.ndarray:
    if method == "zero-filled":
        acq = load_acquisition(layout.acquisition(name, R))
        op = nufft_operator(acq, coils, basis)
        return zero_filled(op, torch.as_tensor(acq.data, dtype=COMPLEX_DTYPE)).numpy()
    producer = "recon-llr" if method == "llr" else "recon-unrolled"
    return load_recon(layout.recon(method, name, R), producer)


def evaluate(app):
    cfg = app.cfg
    layout = Layout(app.out)
    dictionary, _ = load_dictionary(layout.dictionary())
    basis = load_basis(layout.basis())
    report = EvalReport()
    for entry in phantom_entries(cfg, ("test",)):
        phantom, coils, _ = load_truth(layout, entry.name)
        reference = reference_coeffs(cfg, layout, entry.name)
        for R in cfg["acquisition.R"]:
            for method in cfg["evaluate.methods"]:
                if method in MODELS and method not in cfg["train.models"]:
                    continue
                pred = method_coeffs(cfg, layout, method, entry.name, R, coils, basis)
                matched = match_volume(pred, basis, dictionary, b1_map=phantom.b1)
                maps = {"t1": matched.t1, "t2": matched.t2, "matchable": matched.matchable}
                report.add(method, R, pred, reference, phantom, maps, phantom_id=entry.index)
    directory = layout.evaluation()
    write_csv(directory / "metrics.csv", report.to_frame())
    write_csv(directory / "rows.csv", pd.DataFrame(report.rows))
    if "llr" in cfg["evaluate.methods"]:
        write_csv(directory / "significance.csv", report.paired_tests("llr"))
    (directory / "table.txt").write_text(report.text_table() + "\n", encoding="utf8")
    LOGGER.info(f"evaluation\n{report.text_table()}")


def ablate(app):
    cfg = app.cfg
    layout = Layout(app.out)
    basis = load_basis(layout.basis())
    dataset = training_set(cfg, layout, basis)
    frame = run_ablation(
        cfg["ablate.suite"],
        dataset,
        unroll_config(cfg, "spur-ig"),
        stage_plans(cfg),
        basis.k,
        initial_step(dataset, cfg),
        seed=cfg["run.seed"],
    )
    write_csv(layout.ablation() / "ablation.csv", frame)


def setup_commands(app) -> None:
    app.add_command("make-dict", make_dict, "simulate the signal dictionary")
    app.add_command("make-basis", make_basis, "extract (and balance) the temporal basis")
    app.add_command("make-phantom", make_phantoms, "draw phantoms, coils and true coefficients")
    app.add_command("acquire", acquire, "simulate non-Cartesian k-space at every R")
    app.add_command("grid", grid_acquisitions, "train gridding kernels and grid acquisitions")
    app.add_command("recon-llr", recon_llr, "FISTA-LLR baseline reconstructions")
    app.add_command("train", train, "three-stage training of the unrolled models")
    app.add_command("recon-unrolled", recon_unrolled, "unrolled reconstructions of test phantoms")
    app.add_command("evaluate", evaluate, "metrics tables and significance tests")
    app.add_command("ablate", ablate, "ablation suite")
