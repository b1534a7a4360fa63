"""Experiment configuration: a registry of typed values read from TOML."""
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence

from ._compat import dump_toml, load_toml, read_text
from .shared import ConfigError
from .storage import write_json

LOGGER = getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULTS_PACKAGE = "spurig.defaults"
DEFAULTS_FILE = "experiment.toml"

#: learned reconstructions (3D and slice-wise 2D denoisers)
MODELS = ("spur-ig", "hybrid-2d3d")
METHODS = ("zero-filled", "llr") + MODELS

Validator = Callable[[Any], Any]


class ConfigValue(NamedTuple):
    name: str
    default: Any
    validator: Validator
    description: str = ""


def integer(minimum: Optional[int] = None) -> Validator:
    """Create an integer validator."""

    def validate(value: Any) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"must be an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise ValueError(f"must be an integer >= {minimum}")
        return value

    return validate


def number(minimum: Optional[float] = None, positive: bool = False) -> Validator:
    """Create a float validator; ``positive`` excludes ``minimum`` itself."""

    def validate(value: Any) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"must be a number, got {value!r}")
        if minimum is not None and (value < minimum or (positive and value == minimum)):
            raise ValueError(f"must be a number {'>' if positive else '>='} {minimum}")
        return float(value)

    return validate


def boolean(value: Any) -> bool:
    if not isinstance(value, bool):
        raise ValueError(f"must be true or false, got {value!r}")
    return value


def string(value: Any) -> str:
    if not isinstance(value, str) or not value:
        raise ValueError(f"must be a nonempty string, got {value!r}")
    return value


def make_choice(choices: Sequence[str]) -> Validator:
    """Create a choice validator."""

    def validate(value: Any) -> str:
        if value not in choices:
            raise ValueError(f"{value!r} is not in: {list(choices)}")
        return value

    return validate


def list_of(item: Validator, nonempty: bool = True, unique: bool = True) -> Validator:
    """Create a validator of homogeneous lists."""

    def validate(value: Any) -> List[Any]:
        if not isinstance(value, list):
            raise ValueError(f"must be a list, got {value!r}")
        if nonempty and not value:
            raise ValueError("must be a nonempty list")
        items = [item(v) for v in value]
        if unique and len(set(map(repr, items))) != len(items):
            raise ValueError(f"must not repeat entries, got {value!r}")
        return items

    return validate


class Config:
    """Resolved experiment configuration, addressed as ``"section.key"``."""

    def __init__(self, registry: Dict[str, ConfigValue], values: Dict[str, Any]):
        self._registry = registry
        self._values = values

    def __getitem__(self, name: str) -> Any:
        if name not in self._values:
            raise KeyError(f"unknown configuration value {name!r}")
        return self._values[name]

    def get(self, name: str, default: Any = None) -> Any:
        return self._values.get(name, default)

    def section(self, name: str) -> Dict[str, Any]:
        prefix = f"{name}."
        return {k[len(prefix) :]: v for k, v in self._values.items() if k.startswith(prefix)}

    def to_dict(self) -> Dict[str, Any]:
        nested: Dict[str, Any] = {"schema_version": SCHEMA_VERSION}
        for name in sorted(self._values):
            section, key = name.split(".", 1)
            nested.setdefault(section, {})[key] = self._values[name]
        return nested

    def to_toml(self) -> str:
        return dump_toml(self.to_dict())

    def write_snapshot(self, directory: Path) -> Path:
        """Write ``config.resolved.toml`` and ``config.resolved.json`` into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config.resolved.toml"
        path.write_text(self.to_toml(), encoding="utf8")
        write_json(directory / "config.resolved.json", self.to_dict())
        return path


def parse_override(text: str):
    """Split ``section.key=value``; the value is read as TOML, else as a bare string."""
    if "=" not in text:
        raise ConfigError([f"{text}: override must look like section.key=value"])
    name, raw = (part.strip() for part in text.split("=", 1))
    if name.count(".") != 1:
        raise ConfigError([f"{name}: override key must look like section.key"])
    try:
        value = load_toml(f"value = {raw}")["value"]
    except ValueError:
        value = raw
    return name, value


def _flatten(document: Dict[str, Any], diagnostics: List[str]) -> Dict[str, Any]:
    flat = {}
    for section, table in document.items():
        if section == "schema_version":
            continue
        if not isinstance(table, dict):
            diagnostics.append(f"{section}: expected a [{section}] table")
            continue
        for key, value in table.items():
            flat[f"{section}.{key}"] = value
    return flat


def resolve(
    registry: Dict[str, ConfigValue],
    documents: Iterable[Dict[str, Any]],
    overrides: Iterable[str] = (),
) -> Config:
    """Layer TOML documents and ``--set`` overrides over the registered defaults.

    Every document must declare the supported ``schema_version``; unknown keys and
    values rejected by their validator are collected into one ``ConfigError``.
    """
    diagnostics: List[str] = []
    values = {name: spec.default for name, spec in registry.items()}
    for document in documents:
        version = document.get("schema_version")
        if version != SCHEMA_VERSION:
            diagnostics.append(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
        values.update(_flatten(document, diagnostics))
    for text in overrides:
        name, value = parse_override(text)
        values[name] = value
    resolved = {}
    for name, value in values.items():
        if name not in registry:
            diagnostics.append(f"{name}: unknown option")
            continue
        try:
            resolved[name] = registry[name].validator(value)
        except ValueError as exc:
            diagnostics.append(f"{name}: {exc}")
    if diagnostics:
        raise ConfigError(diagnostics)
    return Config(registry, resolved)


def default_document() -> Dict[str, Any]:
    return load_toml(read_text(DEFAULTS_PACKAGE, DEFAULTS_FILE))


def read_document(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"{path}: configuration file not found"])
    try:
        return load_toml(path.read_text(encoding="utf8"))
    except ValueError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc


def setup_config(app) -> None:
    """Register every experiment value."""
    from .llr import PATCH_SCHEDULES
    from .sampling import TRAJECTORY_KINDS
    from .training import ABLATION_VARIANTS

    positive = integer(1)
    app.add_config_value("run.seed", 0, integer(0), "global seed")
    app.add_config_value("run.out", "runs/desk", string, "output directory")
    app.add_config_value("run.threads", 0, integer(0), "torch thread cap, 0 keeps the default")

    app.add_config_value("sequence.n_tr", 100, positive)
    app.add_config_value("sequence.fa_min", 10.0, number(0.0))
    app.add_config_value("sequence.fa_max", 70.0, number(0.0))
    app.add_config_value("sequence.half_period", 100, positive)
    app.add_config_value("sequence.tr_ms", 12.5, number(0.0, positive=True))
    app.add_config_value("sequence.te_ms", 1.7, number(0.0, positive=True))
    app.add_config_value("sequence.ti_ms", 20.0, number(0.0, positive=True))

    grid_values = list_of(number(0.0, positive=True), nonempty=False)
    app.add_config_value("dictionary.t1_ms", [], grid_values, "empty selects the default grid")
    app.add_config_value("dictionary.t2_ms", [], grid_values)
    app.add_config_value("dictionary.b1", [], grid_values)

    app.add_config_value("basis.k", 5, positive)
    app.add_config_value("basis.balanced", True, boolean)

    app.add_config_value("phantom.grid", 32, integer(16))
    app.add_config_value("phantom.train", 16, positive)
    app.add_config_value("phantom.validation", 4, positive)
    app.add_config_value("phantom.test", 4, positive)
    app.add_config_value("phantom.lesions", 0, integer(0))
    app.add_config_value("phantom.coils", 8, positive)
    app.add_config_value("phantom.seed", 100, integer(0))

    app.add_config_value("trajectory.kind", "spiral-projection", make_choice(TRAJECTORY_KINDS))
    app.add_config_value("trajectory.groups", 24, positive)
    app.add_config_value("trajectory.turns", 4.0, number(0.0, positive=True))
    app.add_config_value("trajectory.readout_budget", 0, integer(0), "0 selects 16 x grid")

    app.add_config_value("acquisition.R", [3, 6, 12], list_of(positive))
    app.add_config_value("acquisition.noise_sigma", 1e-3, number(0.0))
    app.add_config_value("acquisition.calibration", 12, integer(4))
    app.add_config_value("acquisition.seed", 7, integer(0))

    app.add_config_value("igrog.sources", 5, positive)
    app.add_config_value("igrog.oversampling", 1.5, number(1.0))
    app.add_config_value("igrog.steps", 2000, integer(0))
    app.add_config_value("igrog.lr", 1e-3, number(0.0, positive=True))
    app.add_config_value("igrog.hidden", 64, positive)

    app.add_config_value("llr.patch_size", 8, positive)
    app.add_config_value("llr.iterations", 40, integer(0))
    app.add_config_value("llr.schedule", "tiling", make_choice(PATCH_SCHEDULES))
    app.add_config_value("llr.patches_per_iter", 1000, positive)
    app.add_config_value(
        "llr.sweep",
        [0.25, 0.5, 1.0, 2.0, 4.0],
        list_of(number(0.0), nonempty=False),
        "threshold multipliers tried on a validation phantom, empty keeps 1",
    )

    app.add_config_value("model.iterations", 6, positive)
    app.add_config_value("model.base", 16, integer(8))
    app.add_config_value("model.weight_sharing", True, boolean)
    app.add_config_value("model.conditioned", True, boolean)
    app.add_config_value("model.checkpoint", True, boolean)
    app.add_config_value("model.init_scaling", True, boolean)

    app.add_config_value("train.models", ["spur-ig", "hybrid-2d3d"], list_of(make_choice(MODELS)))
    app.add_config_value("train.target", "llr-R1", make_choice(("llr-R1", "ground-truth")))
    app.add_config_value("train.dc", "igrog", make_choice(("igrog", "nufft")))
    app.add_config_value("train.pretrain_epochs", 100, integer(0))
    app.add_config_value("train.gleam_epochs", 50, integer(0))
    app.add_config_value("train.finetune_epochs", 50, integer(0))
    app.add_config_value("train.lr", 5e-3, number(0.0, positive=True))
    app.add_config_value("train.patience", 20, positive)
    app.add_config_value("train.ssim_weight", 0.1, number(0.0))
    app.add_config_value("train.ssim_slices", 30, positive)
    app.add_config_value("train.ssim_scales", 3, positive)
    app.add_config_value("train.wm", 10.0, number(0.0))
    app.add_config_value("train.gm", 10.0, number(0.0))
    app.add_config_value("train.csf", 1.0, number(0.0))
    app.add_config_value("train.augment", True, boolean)
    app.add_config_value("train.immediate_updates", True, boolean)
    app.add_config_value("train.memory_budget", 0, integer(0), "saved-activation bytes, 0 is off")

    app.add_config_value(
        "evaluate.methods",
        ["zero-filled", "llr", "spur-ig", "hybrid-2d3d"],
        list_of(make_choice(METHODS)),
    )
    app.add_config_value(
        "ablate.suite",
        ["full", "gleam-only", "gleam-no-pt"],
        list_of(make_choice(ABLATION_VARIANTS)),
    )
    app.add_config_value("report.inset_gain", 10.0, number(0.0, positive=True))
