"""Experiment configuration: one strict JSON document per run.

A config file may specify any subset of the documented keys; missing keys
take the defaults below.  Unknown keys are rejected, and every validation
error carries a JSON pointer to the offending key so failures in nested
sections are unambiguous.
"""

from __future__ import annotations

import copy
import hashlib
import importlib.resources
import json
from dataclasses import dataclass

import jsonschema

from . import detector as det
from . import synthgen
from .router import RoutePlan
from .train import OptimizerConfig

__all__ = [
    "ConfigError",
    "DEFAULT_CONFIG",
    "ExperimentConfig",
    "parse_config",
    "load_config",
]


DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/experiment",
    "route_preset": "rsc-md",
    "dataset": {
        "image_size": 96,
        "object_count": [1, 4],
        "class_count": 3,
        "train_count": 800,
        "test_count": 200,
        "quality_m1": 1.0,
        "quality_m2": 0.4,
    },
    "model": {
        "stage_widths": [8, 16, 32],
        "size_bounds": [24.0, 48.0],
    },
    "optimizer": {
        "initial_lr": 1e-2,
        "final_lr": 1e-6,
        "momentum": 0.937,
        "weight_decay": 1e-5,
        "epochs": 30,
        "batch_size": 16,
    },
    "loss": {
        "alpha": 1.0,
        "beta": 1.0,
        "gamma": 1.0,
        "lambda_cls": 1.0,
        "lambda_box": 1.0,
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``pointer`` locates the offending key."""

    def __init__(self, pointer: str, detail: str):
        self.pointer = pointer
        super().__init__(f"config error at {pointer or '/'}: {detail}")


def _schema() -> dict:
    text = importlib.resources.files("fdlab.schemas").joinpath(
        "config.schema.json").read_text()
    return json.loads(text)


def _reject_unknown_keys(document, reference, pointer=""):
    if not isinstance(document, dict):
        return
    for key, value in document.items():
        here = f"{pointer}/{key}"
        if not isinstance(reference, dict) or key not in reference:
            raise ConfigError(here, "unknown key")
        _reject_unknown_keys(value, reference[key], here)


def _merge_defaults(document: dict) -> dict:
    merged = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in document.items():
        if isinstance(value, dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def _validate(merged: dict):
    validator = jsonschema.Draft7Validator(_schema())
    errors = sorted(validator.iter_errors(merged), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = "/" + "/".join(str(part) for part in err.absolute_path)
        raise ConfigError(pointer if pointer != "/" else "", err.message)

    opt = merged["optimizer"]
    if opt["final_lr"] > opt["initial_lr"]:
        raise ConfigError("/optimizer/final_lr",
                          "final_lr must not exceed initial_lr")
    lo, hi = merged["dataset"]["object_count"]
    if lo > hi:
        raise ConfigError("/dataset/object_count", f"empty range [{lo}, {hi}]")
    low, high = merged["model"]["size_bounds"]
    if low >= high:
        raise ConfigError("/model/size_bounds",
                          f"bounds must increase, got [{low}, {high}]")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully defaulted experiment description."""

    seed: int
    output_dir: str
    route_preset: str
    dataset: dict
    model: dict
    optimizer: dict
    loss: dict

    def scene_spec(self, split: str = "train") -> synthgen.SceneSpec:
        """Train and test splits draw from disjoint seed streams."""
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        seed = self.seed if split == "train" else self.seed + 1
        d = self.dataset
        return synthgen.SceneSpec(d["image_size"], tuple(d["object_count"]),
                                  d["class_count"], seed)

    def split_count(self, split: str) -> int:
        return self.dataset["train_count" if split == "train" else "test_count"]

    def profiles(self):
        return (synthgen.ModalityProfile.from_quality(self.dataset["quality_m1"]),
                synthgen.ModalityProfile.from_quality(self.dataset["quality_m2"]))

    def detector_config(self) -> det.DetectorConfig:
        return det.DetectorConfig(
            input_channels=1,
            stage_widths=tuple(self.model["stage_widths"]),
            class_count=self.dataset["class_count"],
            size_bounds=tuple(self.model["size_bounds"]),
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(seed=self.seed, **self.optimizer)

    def loss_weights(self) -> det.LossWeights:
        return det.LossWeights(**self.loss)

    def route_plan(self) -> RoutePlan:
        return RoutePlan.from_preset(self.route_preset)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "route_preset": self.route_preset,
            "dataset": copy.deepcopy(self.dataset),
            "model": copy.deepcopy(self.model),
            "optimizer": copy.deepcopy(self.optimizer),
            "loss": copy.deepcopy(self.loss),
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def parse_config(document: dict) -> ExperimentConfig:
    """Validate a config document and fill in defaults."""
    if not isinstance(document, dict):
        raise ConfigError("", f"config must be a JSON object, got {type(document).__name__}")
    _reject_unknown_keys(document, DEFAULT_CONFIG)
    merged = _merge_defaults(document)
    _validate(merged)
    return ExperimentConfig(
        seed=merged["seed"],
        output_dir=merged["output_dir"],
        route_preset=merged["route_preset"],
        dataset=merged["dataset"],
        model=merged["model"],
        optimizer=merged["optimizer"],
        loss=merged["loss"],
    )


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    try:
        with open(path) as fh:
            document = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"not valid JSON: {exc}") from exc
    return parse_config(document)
