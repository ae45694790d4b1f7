"""Experiment configuration: a small INI dialect parsed into dataclasses.

Sections: ``[dataset]``, ``[models]``, ``[diffusion]``, ``[guidance]``,
``[pairs]``, ``[harness]``.  Every key has a default, unknown keys are
rejected, and two hashes summarize a config: ``config_hash`` over
everything (stamped into manifests) and ``training_hash`` over only the
sections that affect model weights (names the model cache directory).
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

SHAPE_IDEAL_PAIRS = {
    "filled_square": "hollow_square", "hollow_square": "filled_square",
    "disc": "ring", "ring": "disc", "cross": "stripe", "stripe": "cross",
}
MNIST_IDEAL_PAIRS = {"3": "8", "4": "9", "1": "7", "5": "6", "7": "1", "9": "4"}

CLASSIFIER_ROLES = ("standard", "robustnoise", "lowcap", "randomnet", "featurenet")
_BOOL = {"true": True, "1": True, "yes": True, "on": True,
         "false": False, "0": False, "no": False, "off": False}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "shapes"
    per_class: int = 400
    resolution: int = 16
    val_fraction: float = 0.15
    seed: int = 77
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class ModelsSection:
    subjects: tuple = ("standard", "robustnoise")
    robust: str = "robustnoise"
    committee: tuple = ("standard", "robustnoise", "lowcap")
    featurenet: str = "featurenet"
    denoiser_epochs: int = 30
    classifier_epochs: int = 20
    batch_size: int = 64
    lr: float = 2e-3
    noise_sigma_max: float = 0.5
    models_dir: str = ""


@dataclass(frozen=True)
class DiffusionSection:
    t_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 3.5e-2


@dataclass(frozen=True)
class GuidanceSection:
    scale_s: float = 6.0
    use_x0_prediction: bool = True
    cone: bool = True
    half_angle_deg: float = 30.0
    start_fraction: float = 0.5
    reject_invalid: bool = False
    clamp_x0: bool = True


@dataclass(frozen=True)
class HarnessSection:
    originals_per_class: int = 32
    fid_features: str = "conv1_gap"
    batch: int = 32
    workers: int = 0
    grid_columns: int = 8
    out: str = "runs/desk"
    seed: int = 1234


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    models: ModelsSection = field(default_factory=ModelsSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    harness: HarnessSection = field(default_factory=HarnessSection)
    ideal_pairs: tuple = ()  # ((source, target), ...) in declaration order

    def __post_init__(self):
        if not self.ideal_pairs:
            default = SHAPE_IDEAL_PAIRS if self.dataset.kind == "shapes" else MNIST_IDEAL_PAIRS
            object.__setattr__(self, "ideal_pairs", tuple(default.items()))
        _validate(self)

    # -- derived views ----------------------------------------------------

    @property
    def pair_map(self) -> dict:
        return dict(self.ideal_pairs)

    def models_dir(self) -> str:
        if self.models.models_dir:
            return self.models.models_dir
        return str(Path(self.harness.out) / "models")

    def canonical_lines(self) -> list:
        lines = []
        for section, obj in (("dataset", self.dataset), ("models", self.models),
                             ("diffusion", self.diffusion), ("guidance", self.guidance),
                             ("harness", self.harness)):
            for key in sorted(vars(obj)):
                value = getattr(obj, key)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                lines.append(f"{section}.{key}={value}")
        for src, tgt in self.ideal_pairs:
            lines.append(f"pairs.{src}={tgt}")
        return lines

    def config_hash(self) -> str:
        # output location and worker count do not change results
        skip = ("harness.out=", "harness.workers=", "models.models_dir=")
        lines = [l for l in self.canonical_lines() if not l.startswith(skip)]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def training_hash(self) -> str:
        # roster membership names which models exist; it does not change any
        # model's weights, so it stays out of the checkpoint-cache key
        roster = ("models.subjects=", "models.robust=", "models.committee=",
                  "models.featurenet=", "models.models_dir=")
        lines = [l for l in self.canonical_lines()
                 if l.startswith(("dataset.", "models.", "diffusion."))
                 and not l.startswith(roster)]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def _validate(cfg: ExperimentConfig) -> None:
    ds, ms, gd, hs = cfg.dataset, cfg.models, cfg.guidance, cfg.harness
    if ds.kind not in ("shapes", "mnist"):
        raise ConfigError(f"dataset.kind must be 'shapes' or 'mnist', got {ds.kind!r}")
    if ds.kind == "mnist" and not (ds.train_images and ds.train_labels):
        raise ConfigError("dataset.kind=mnist requires train_images and train_labels paths")
    if ds.per_class < 10:
        raise ConfigError("dataset.per_class must be at least 10")
    if not 0.0 < ds.val_fraction < 1.0:
        raise ConfigError(f"dataset.val_fraction must lie in (0, 1), got {ds.val_fraction}")
    for name in ms.subjects:
        if name not in CLASSIFIER_ROLES:
            raise ConfigError(f"unknown subject {name!r}; roles: {CLASSIFIER_ROLES}")
    if ms.featurenet in ms.subjects:
        raise ConfigError("the feature network must not appear in the subject roster")
    for name in ms.committee:
        if name not in CLASSIFIER_ROLES:
            raise ConfigError(f"unknown committee member {name!r}")
    if ms.robust not in CLASSIFIER_ROLES:
        raise ConfigError(f"unknown robust model {ms.robust!r}")
    if not ms.subjects:
        raise ConfigError("models.subjects must name at least one classifier")
    if not 0.0 < gd.start_fraction <= 1.0:
        raise ConfigError(f"guidance.start_fraction must lie in (0, 1], got {gd.start_fraction}")
    if not 0.0 < gd.half_angle_deg < 90.0:
        raise ConfigError(f"guidance.half_angle_deg must lie in (0, 90), got {gd.half_angle_deg}")
    if gd.scale_s < 0:
        raise ConfigError(f"guidance.scale_s must be >= 0, got {gd.scale_s}")
    if hs.originals_per_class < 1 or hs.batch < 1:
        raise ConfigError("harness.originals_per_class and harness.batch must be positive")
    if hs.workers < 0:
        raise ConfigError("harness.workers must be >= 0 (0 means run in-process)")
    seen = {}
    for src, tgt in cfg.ideal_pairs:
        if src in seen:
            raise ConfigError(f"ideal pair source {src!r} listed twice")
        if src == tgt:
            raise ConfigError(f"ideal pair {src!r} maps to itself")
        seen[src] = tgt


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _coerce(section: str, key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            if raw.strip().lower() not in _BOOL:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL[raw.strip().lower()]
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from None


def _fill(section_name: str, cls, parser) -> object:
    defaults = cls()
    if not parser.has_section(section_name):
        return defaults
    values = {}
    known = vars(defaults)
    for key, raw in parser.items(section_name):
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
        values[key] = _coerce(section_name, key, raw, known[key])
    return replace(defaults, **values)


def loads_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    known_sections = {"dataset", "models", "diffusion", "guidance", "harness", "pairs"}
    for name in parser.sections():
        if name not in known_sections:
            raise ConfigError(f"unknown section [{name}]")
    pairs = tuple(parser.items("pairs")) if parser.has_section("pairs") else ()
    return ExperimentConfig(
        dataset=_fill("dataset", DatasetSection, parser),
        models=_fill("models", ModelsSection, parser),
        diffusion=_fill("diffusion", DiffusionSection, parser),
        guidance=_fill("guidance", GuidanceSection, parser),
        harness=_fill("harness", HarnessSection, parser),
        ideal_pairs=pairs,
    )


def load_config(path=None, *, seed=None, out=None, subjects=None,
                reject_invalid=None) -> ExperimentConfig:
    """Read a config file (defaults when ``path`` is None) and apply CLI overrides."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = loads_config(p.read_text())
    if seed is not None:
        cfg = replace(cfg, harness=replace(cfg.harness, seed=int(seed)))
    if out is not None:
        cfg = replace(cfg, harness=replace(cfg.harness, out=str(out)))
    if subjects is not None:
        names = tuple(s.strip() for s in subjects.split(",") if s.strip())
        cfg = replace(cfg, models=replace(cfg.models, subjects=names))
    if reject_invalid:
        cfg = replace(cfg, guidance=replace(cfg.guidance, reject_invalid=True))
    return cfg


def dumps_config(cfg: ExperimentConfig) -> str:
    """Render a config back to its file syntax (used to document defaults)."""
    out = []
    for section, obj in (("dataset", cfg.dataset), ("models", cfg.models),
                         ("diffusion", cfg.diffusion), ("guidance", cfg.guidance),
                         ("harness", cfg.harness)):
        out.append(f"[{section}]")
        for key, value in vars(obj).items():
            if isinstance(value, tuple):
                value = ", ".join(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            out.append(f"{key} = {value}")
        out.append("")
    out.append("[pairs]")
    for src, tgt in cfg.ideal_pairs:
        out.append(f"{src} = {tgt}")
    out.append("")
    return "\n".join(out)
