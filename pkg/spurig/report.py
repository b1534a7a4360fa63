"""Run report: metric tables, slice panels with magnified error insets, T1/T2 map panels,
DC timing, gridding fidelity and basis energy tables."""
from logging import getLogger
from pathlib import Path
import shutil
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .commands import (  # noqa: E402
    Layout,
    load_truth,
    method_coeffs,
    phantom_entries,
    reference_coeffs,
)
from .config import MODELS  # noqa: E402
from .metrics import brain_slices, metric_table  # noqa: E402
from .sequence import load_dictionary, match_volume  # noqa: E402
from .shared import MissingArtifactError, warning_suffix  # noqa: E402
from .storage import read_csv, write_csv  # noqa: E402
from .subspace import load_basis  # noqa: E402

LOGGER = getLogger(__name__)

PANEL_DPI = 120


def middle_slice(slices: Sequence[int]) -> int:
    if not slices:
        raise ValueError("phantom has no brain slices")
    return int(slices[len(slices) // 2])


def top_right(image: np.ndarray) -> np.ndarray:
    """Top-right quadrant in display orientation (rows down, columns right)."""
    rows, cols = image.shape
    return image[: rows // 2, cols - cols // 2 :]


def slice_panel(
    reference: np.ndarray, images: Dict[str, np.ndarray], gain: float, title: str
) -> plt.Figure:
    """Grayscale magnitude images; each method carries an inset with the magnified
    absolute error of its top-right quadrant."""
    names = ["reference", *images]
    fig, axes = plt.subplots(1, len(names), figsize=(2.4 * len(names), 2.6), squeeze=False)
    vmax = float(np.abs(reference).max()) or 1.0
    for ax, name in zip(axes[0], names):
        image = reference if name == "reference" else images[name]
        ax.imshow(np.abs(image), cmap="gray", vmin=0, vmax=vmax)
        ax.set_title(name, fontsize=8)
        ax.set_axis_off()
        if name == "reference":
            continue
        error = gain * np.abs(top_right(np.abs(image) - np.abs(reference)))
        inset = ax.inset_axes([0.6, 0.6, 0.4, 0.4])
        inset.imshow(error, cmap="gray", vmin=0, vmax=vmax)
        inset.set_xticks([])
        inset.set_yticks([])
        inset.text(
            0.02, 0.02, f"x{gain:g}", color="yellow", fontsize=6, transform=inset.transAxes
        )
    fig.suptitle(title, fontsize=9)
    return fig


def map_panel(
    truth: Dict[str, np.ndarray], maps: Dict[str, Dict[str, np.ndarray]], title: str
) -> plt.Figure:
    """Rows T1 and T2; columns ground truth and each method."""
    columns = ["truth", *maps]
    fig, axes = plt.subplots(2, len(columns), figsize=(2.4 * len(columns), 4.8), squeeze=False)
    for row, key in enumerate(("t1", "t2")):
        vmax = float(truth[key].max()) or 1.0
        for col, name in enumerate(columns):
            image = truth[key] if name == "truth" else maps[name][key]
            ax = axes[row, col]
            ax.imshow(image, cmap="magma", vmin=0, vmax=vmax)
            ax.set_axis_off()
            if row == 0:
                ax.set_title(name, fontsize=8)
        axes[row, 0].text(
            -0.1, 0.5, key.upper(), transform=axes[row, 0].transAxes, rotation=90, va="center"
        )
    fig.suptitle(title, fontsize=9)
    return fig


def save_figure(fig: plt.Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=PANEL_DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def _copy_table(source: Path, target: Path) -> bool:
    if not source.exists():
        LOGGER.warning(f"{source} not found, skipped {warning_suffix('report')}")
        return False
    target.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(source, target)
    return True


def render_panels(app, directory: Path) -> List[Path]:
    """Slice and map panels of the first test phantom at every R."""
    cfg = app.cfg
    layout = Layout(app.out)
    basis = load_basis(layout.basis())
    dictionary, _ = load_dictionary(layout.dictionary())
    entry = phantom_entries(cfg, ("test",))[0]
    phantom, coils, _ = load_truth(layout, entry.name)
    reference = reference_coeffs(cfg, layout, entry.name)
    z = middle_slice(brain_slices(phantom))
    methods = [
        m for m in cfg["evaluate.methods"] if m not in MODELS or m in cfg["train.models"]
    ]
    truth = {"t1": phantom.t1[..., z], "t2": phantom.t2[..., z]}
    paths = []
    for R in cfg["acquisition.R"]:
        volumes = {m: method_coeffs(cfg, layout, m, entry.name, R, coils, basis) for m in methods}
        images = {m: v[0][..., z] for m, v in volumes.items()}
        fig = slice_panel(
            reference[0][..., z], images, cfg["report.inset_gain"], f"{entry.name} R={R} z={z}"
        )
        paths.append(save_figure(fig, directory / f"slices_R{R}.png"))
        maps = {}
        for m, volume in volumes.items():
            matched = match_volume(volume, basis, dictionary, b1_map=phantom.b1)
            maps[m] = {"t1": matched.t1[..., z], "t2": matched.t2[..., z]}
        fig = map_panel(truth, maps, f"{entry.name} R={R}")
        paths.append(save_figure(fig, directory / f"maps_R{R}.png"))
    return paths


def render_report(app):
    layout = Layout(app.out)
    directory = layout.report()
    metrics_path = layout.evaluation() / "metrics.csv"
    if not metrics_path.exists():
        raise MissingArtifactError(str(metrics_path), "evaluate")
    frame = read_csv(metrics_path)
    write_csv(directory / "metrics.csv", frame)
    sections = ["metrics", metric_table(frame)]
    copies = {
        "significance.csv": layout.evaluation() / "significance.csv",
        "timing.csv": layout.out / "gridded" / "timing.csv",
        "fidelity.csv": layout.out / "gridded" / "fidelity.csv",
        "basis_energy.csv": layout.basis() / "energy.csv",
        "coefficient_energy.csv": layout.out / "phantoms" / "energy.csv",
        "ablation.csv": layout.ablation() / "ablation.csv",
    }
    for name, source in copies.items():
        if _copy_table(source, directory / name) and name != "basis_energy.csv":
            sections += ["", name[: -len(".csv")], read_csv(source).to_string(index=False)]
    (directory / "report.txt").write_text("\n".join(sections) + "\n", encoding="utf8")
    for path in render_panels(app, directory):
        LOGGER.info(f"wrote {path}")


def setup_report(app) -> None:
    app.add_command("report", render_report, "tables and slice panels of a finished run")
