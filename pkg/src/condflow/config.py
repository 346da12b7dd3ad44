"""Experiment configuration: INI-style files with typed, schema-validated
sections; unknown keys are rejected and the resolved config round-trips."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .objective import ObjectiveConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_list(item_parser):
    def parse(s: str):
        s = s.strip()
        if not s:
            return []
        return [item_parser(part.strip()) for part in s.split(",")]

    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# (parser, default); None default means the key is required
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "id": (str, None),
        "seed": (int, 0),
        "data_seed": (int, 0),
        "output_dir": (str, "runs/out"),
        "data_dir": (str, "data"),
        "threads": (int, 1),
    },
    "architecture": {
        "dim": (int, 1),
        "n_blocks": (int, 4),
        "coupling": (str, "spline"),
        "hidden": (_parse_list(int), [64, 64]),
        "n_bins": (int, 8),
        "bound": (float, 3.0),
        "scale_clamp": (float, 2.0),
        "actnorm": (_parse_bool, True),
        "conditional": (_parse_bool, True),
        "embed_dim": (int, 4),
        "embed_hidden": (_parse_list(int), [16]),
        "context_dim": (int, 0),
        "latent": (str, "standard_normal"),
        "latent_exponent": (str, "c/c0"),
        "latent_bound": (float, 3.0),
        "perm_seed": (int, 0),
    },
    "target": {
        "dim": (int, 1),
        "c_min": (float, 0.5),
        "c_max": (float, 2.0),
        "c0": (float, 1.0),
        "a": (float, 0.1),
        "b": (float, -2.0),
        "c_quartic": (float, 0.5),
        "prior_std": (float, 0.3),
        "lattice_size": (int, 8),
        "quartic": (float, 0.02),
    },
    "sampler": {
        "method": (str, "exact"),
        "n_train": (int, 100000),
        "n_val": (int, 5000),
        "n_test": (int, 10000),
        "n_chains": (int, 32),
        "n_steps": (int, 20000),
        "step_size": (float, 0.3),
        "burn_in": (int, 2000),
        "thin_stride": (int, 10),
        "dt": (float, 0.01),
        "noise_std": (float, 0.75),
        "train_anchors": (_parse_list(float), []),
    },
    "objective": {
        "boundary": (str, "nll"),
        "use_gradient_loss": (_parse_bool, True),
        "lambda_fixed": (float, 1.0),
        "balance": (_parse_bool, True),
        "alpha_balance": (float, 0.1),
        "balance_interval": (int, 25),
        "discretize": (_parse_bool, False),
        "n_grid": (int, 15),
        "epsilon": (float, 1.0),
        "gamma_epsilon": (float, 1.0),
        "r_epsilon": (float, 1.0),
        "alpha_expectation": (float, 0.5),
        "alpha_grad": (float, 0.9),
        "expectation_interval": (int, 100),
        "expectation_samples": (int, 1000),
        "huber_delta": (float, 0.0),
        "sigma_noise": (float, 0.0),
        "s_min": (float, 0.01),
        "s_max": (float, 1.5),
        "warmup_steps": (int, 0),
        "energy_free": (_parse_bool, False),
        "p_base": (str, "model"),
        "grad_conditions_per_step": (int, 1),
        "grad_points_per_condition": (int, 128),
        "snis_samples": (int, 500),
        "snis_per_context": (int, 64),
        "augment_eval_points": (_parse_bool, False),
        "backward_kl_samples": (int, 128),
    },
    "trainer": {
        "total_steps": (int, 2000),
        "batch_size": (int, 256),
        "lr": (float, 2e-4),
        "weight_decay": (float, 0.0),
        "grad_clip": (float, 3.0),
        "pct_start": (float, 0.3),
        "div_factor": (float, 25.0),
        "final_div_factor": (float, 1e4),
        "two_phase": (_parse_bool, False),
        "gamma_lr": (float, 1.0),
        "val_interval": (int, 500),
        "augment_data": (_parse_bool, False),
        "dequant_noise": (float, 0.0),
    },
    "evaluation": {
        "conditions": (_parse_list(float), [1.0]),
        "ess_samples": (int, 10000),
        "calibration_pairs": (int, 30000),
        "calibration_draws": (int, 100),
        "kld_samples": (int, 20000),
        "observable_samples": (int, 10000),
    },
}

EXPERIMENT_IDS = ("gaussian_toy", "multiwell", "gmm", "two_moons", "phi4")


@dataclass
class ExperimentConfig:
    sections: dict = field(default_factory=dict)
    explicit: set = field(default_factory=set)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def is_explicit(self, section: str, key: str) -> bool:
        return (section, key) in self.explicit

    # -- construction ---------------------------------------------------------

    @staticmethod
    def from_text(text: str, overrides: list[str] | None = None) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"could not parse config: {exc}") from exc
        raw: dict[str, dict[str, str]] = {s: dict(parser.items(s)) for s in parser.sections()}
        for ov in overrides or []:
            if "=" not in ov or "." not in ov.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value: {ov!r}")
            lhs, value = ov.split("=", 1)
            section, key = lhs.split(".", 1)
            raw.setdefault(section.strip(), {})[key.strip()] = value.strip()
        return ExperimentConfig._resolve(raw)

    @staticmethod
    def from_file(path, overrides: list[str] | None = None) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_text(fh.read(), overrides)

    @staticmethod
    def _resolve(raw: dict) -> "ExperimentConfig":
        errors = []
        sections: dict[str, dict] = {}
        explicit: set = set()
        for section, keys in raw.items():
            if section not in SCHEMA:
                errors.append(f"unknown section [{section}]")
                continue
            for key in keys:
                if key not in SCHEMA[section]:
                    errors.append(f"unknown key {section}.{key}")
        for section, schema in SCHEMA.items():
            sections[section] = {}
            for key, (parser, default) in schema.items():
                if section in raw and key in raw[section]:
                    try:
                        sections[section][key] = parser(raw[section][key])
                        explicit.add((section, key))
                    except (ValueError, TypeError) as exc:
                        errors.append(f"bad value for {section}.{key}: {exc}")
                elif default is None:
                    errors.append(f"missing required key {section}.{key}")
                else:
                    sections[section][key] = default
        cfg = ExperimentConfig(sections, explicit)
        errors.extend(cfg._semantic_errors())
        if errors:
            raise ConfigError("; ".join(errors))
        return cfg

    def _semantic_errors(self) -> list[str]:
        errors = []
        exp_id = self.sections["experiment"].get("id")
        if exp_id is not None and exp_id not in EXPERIMENT_IDS:
            errors.append(f"unknown experiment id {exp_id!r}")
        o = self.sections["objective"]
        schedule_customized = any(
            self.is_explicit("objective", k) and o[k] != SCHEMA["objective"][k][1]
            for k in ("s_min", "s_max")
        )
        if o["discretize"] and schedule_customized:
            errors.append(
                "objective.discretize and the continuous schedule (s_min/s_max) are mutually exclusive"
            )
        if o["boundary"] == "nll+backward_kl" and o["use_gradient_loss"]:
            errors.append("nll+backward_kl cannot be combined with the gradient loss")
        errors.extend(self.objective_config().validate())
        errors.extend(self.trainer_config().validate())
        return errors

    # -- typed views ----------------------------------------------------------

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(**self.sections["objective"])

    def trainer_config(self) -> TrainerConfig:
        keys = TrainerConfig.__dataclass_fields__.keys()
        vals = {k: v for k, v in self.sections["trainer"].items() if k in keys}
        return TrainerConfig(**vals)

    # -- serialization ---------------------------------------------------------

    def to_text(self) -> str:
        buf = io.StringIO()
        for section in SCHEMA:
            buf.write(f"[{section}]\n")
            for key in SCHEMA[section]:
                buf.write(f"{key} = {_fmt(self.sections[section][key])}\n")
            buf.write("\n")
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())
