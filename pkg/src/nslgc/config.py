"""Flat `key = value` experiment configuration with a closed schema.

Precedence: command-line override > config file > built-in default. Every
key is declared below with its type and default; unknown keys are errors
so typos never silently fall back to defaults. A canonical serialization
of the resolved values is hashed into the artifact header of every
emitted file.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from nslgc.mixup import MixupConfig
from nslgc.model import ModelConfig, VARIANTS
from nslgc.selftrain import NoiseToggles, SelfTrainConfig, TrainConfig
from nslgc.synth import SynthConfig
from nslgc.tensor import SgdConfig

ARTIFACT_VERSION = "nslgc-v1"


class ConfigSchemaError(ValueError):
    """A config key is unknown or its value cannot be parsed."""


# key -> (type tag, default). Type tags: int, float, bool, str,
# float_or_none, int_list, float_list, str_list.
SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "out_dir": ("str", "runs"),
    "synth.n_labeled_nodules": ("int", 200),
    "synth.n_patients": ("int", 400),
    "synth.n_test_patients": ("int", 200),
    "synth.difficulty": ("float", 0.5),
    "synth.crop_size": ("int", 16),
    "synth.nodules_per_patient": ("float_list", (0.2, 0.2, 0.2, 0.2, 0.2)),
    "model.variant": ("str", "maxout_local_global"),
    "model.input_size": ("int", 16),
    "model.base_channels": ("int", 8),
    "model.maxout_pieces": ("int", 2),
    "model.dropout_rate_1": ("float", 0.1),
    "model.dropout_rate_2": ("float", 0.2),
    "model.survival_prob": ("float", 0.8),
    "selftrain.iterations": ("int", 3),
    "selftrain.label_mode": ("str", "soft"),
    "selftrain.confidence_threshold": ("float", 0.3),
    "selftrain.warm_start": ("bool", False),
    "selftrain.student_variants": ("str_list", ()),
    "selftrain.mixup_stage": ("str", "final"),
    "noise.augmentation": ("bool", False),
    "noise.stochastic_depth": ("bool", False),
    "noise.dropout": ("bool", True),
    "noise.noised_teacher": ("bool", False),
    "mixup.alpha": ("float_or_none", None),
    "train.epochs": ("int", 30),
    "train.batch_size": ("int", 64),
    "train.lr": ("float", 0.01),
    "train.lr_decay_factor": ("float", 0.1),
    "train.lr_decay_every": ("int", 50),
    "eval.val_fraction": ("float", 0.2),
    "benchmark.seeds": ("int_list", (0, 1, 2, 3, 4)),
    "benchmark.iterations": ("int", 2),
    "benchmark.epochs": ("int", 20),
    "benchmark.mixup_alpha": ("float", 0.1),
    "ablate.seeds": ("int_list", (0,)),
}


def _parse_value(key: str, tag: str, raw: str):
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tag == "str":
            return raw
        if tag == "float_or_none":
            return None if raw.lower() == "none" else float(raw)
        if tag == "int_list":
            return tuple(int(p) for p in raw.split(",") if p.strip()) if raw else ()
        if tag == "float_list":
            return tuple(float(p) for p in raw.split(",") if p.strip()) if raw else ()
        if tag == "str_list":
            return tuple(p.strip() for p in raw.split(",") if p.strip()) if raw else ()
    except ValueError:
        raise ConfigSchemaError(f"config key {key!r}: cannot parse {raw!r} as {tag}") from None
    raise ConfigSchemaError(f"config key {key!r} has unknown type tag {tag!r}")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat `key = value` lines; `#` starts a comment; keys unvalidated here."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigSchemaError(f"{source}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in values:
            raise ConfigSchemaError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = raw.strip()
    return values


@dataclass
class ExperimentConfig:
    values: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        resolved = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in self.values.items():
            if key not in SCHEMA:
                raise ConfigSchemaError(f"unknown config key {key!r}")
            resolved[key] = value
        self.values = resolved
        if self["model.variant"] not in VARIANTS:
            raise ConfigSchemaError(f"config key 'model.variant': unknown variant {self['model.variant']!r}")
        for v in self["selftrain.student_variants"]:
            if v not in VARIANTS:
                raise ConfigSchemaError(f"config key 'selftrain.student_variants': unknown variant {v!r}")
        if not 0.0 <= self["eval.val_fraction"] < 1.0:
            raise ConfigSchemaError("config key 'eval.val_fraction': must lie in [0, 1)")

    def __getitem__(self, key: str):
        return self.values[key]

    def canonical_text(self) -> str:
        """Sorted `key = value` serialization of the resolved configuration."""
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, tuple):
                rendered = ",".join(str(v) for v in value)
            elif value is None:
                rendered = "none"
            elif isinstance(value, bool):
                rendered = "true" if value else "false"
            else:
                rendered = str(value)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]

    def header_line(self, seed: int | None = None) -> str:
        """First line of every emitted text artifact: version, config hash, seed."""
        seed_value = self["seed"] if seed is None else seed
        return f"# {ARTIFACT_VERSION} config={self.config_hash()} seed={seed_value}"

    # ----- typed sub-configurations -------------------------------------

    def synth_config(self, seed: int | None = None, n_patients: int | None = None) -> SynthConfig:
        return SynthConfig(
            n_labeled_nodules=self["synth.n_labeled_nodules"],
            n_patients=self["synth.n_patients"] if n_patients is None else n_patients,
            nodules_per_patient=self["synth.nodules_per_patient"],
            difficulty=self["synth.difficulty"],
            crop_size=self["synth.crop_size"],
            seed=self["seed"] if seed is None else seed,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self["model.variant"],
            input_size=self["model.input_size"],
            base_channels=self["model.base_channels"],
            maxout_pieces=self["model.maxout_pieces"],
            dropout_rates=(self["model.dropout_rate_1"], self["model.dropout_rate_2"]),
            survival_prob=self["model.survival_prob"],
            seed=self["seed"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            sgd=SgdConfig(
                learning_rate=self["train.lr"],
                step_decay_factor=self["train.lr_decay_factor"],
                decay_every_epochs=self["train.lr_decay_every"],
            ),
        )

    def noise_toggles(self) -> NoiseToggles:
        return NoiseToggles(
            augmentation=self["noise.augmentation"],
            stochastic_depth=self["noise.stochastic_depth"],
            dropout=self["noise.dropout"],
            noised_teacher=self["noise.noised_teacher"],
        )

    def mixup_config(self) -> MixupConfig:
        return MixupConfig(alpha=self["mixup.alpha"])

    def selftrain_config(self) -> SelfTrainConfig:
        variants = self["selftrain.student_variants"]
        return SelfTrainConfig(
            model=self.model_config(),
            iterations=self["selftrain.iterations"],
            label_mode=self["selftrain.label_mode"],
            confidence_threshold=self["selftrain.confidence_threshold"],
            warm_start=self["selftrain.warm_start"],
            student_variants=variants if variants else None,
            mixup=self.mixup_config(),
            mixup_stage=self["selftrain.mixup_stage"],
            noise=self.noise_toggles(),
            train=self.train_config(),
        )


def build_experiment_config(
    file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None
) -> ExperimentConfig:
    """Merge raw string values by precedence (override > file > default) and type them."""
    merged_raw: dict[str, str] = {}
    merged_raw.update(file_values or {})
    merged_raw.update(overrides or {})
    typed: dict[str, object] = {}
    for key, raw in merged_raw.items():
        if key not in SCHEMA:
            raise ConfigSchemaError(f"unknown config key {key!r}")
        typed[key] = _parse_value(key, SCHEMA[key][0], raw)
    return ExperimentConfig(values=typed)


def load_config_file(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=path)
