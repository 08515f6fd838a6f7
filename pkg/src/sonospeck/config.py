"""Run configuration: flat key = value files, CLI overrides, validation.

Config files are UTF-8 text, one ``key = value`` per line, with ``#``
comments. Every key is validated against the schema below; unknown keys
are hard errors. CLI flags mirror the keys one-to-one, and the effective
config (defaults + file + overrides) is echoed at the start of every
command so a run can be reproduced from its log.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ValidationError
from .losses import LossConfig
from .speckle import SpeckleSpec, trigamma
from .training import TrainConfig


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    items = [p for p in text.replace(",", " ").split() if p]
    return tuple(int(p) for p in items)


def _positive(v) -> bool:
    return v > 0


def _non_negative(v) -> bool:
    return v >= 0


def _unit_interval(v) -> bool:
    return 0.0 <= v <= 1.0


# key -> (python type/parser, default, validator or None, description)
SCHEMA: dict[str, tuple] = {
    # speckle physics
    "target_looks": (float, 9.0, _positive, "equivalent number of looks the residual is aimed at"),
    "target_variance": (float, None, _positive, "explicit log-variance target (overrides target_looks)"),
    # loss stack
    "beta0": (float, 1.0, _non_negative, "curriculum weight at epoch 0"),
    "horizon": (int, 30, _positive, "epochs over which the curriculum weight anneals to 0"),
    "gamma": (float, 1.0, _non_negative, "statistical loss weight"),
    "lambda": (float, 0.05, _non_negative, "structural loss weight"),
    "sigma_edge": (float, 0.1, _positive, "edge sensitivity of the structural weight"),
    "median_window": (int, 3, lambda v: v >= 3 and v % 2 == 1, "odd median filter window"),
    "eps": (float, 1e-6, _positive, "log-domain offset"),
    # training
    "patch_size": (int, 64, lambda v: v >= 8, "square training patch side"),
    "batch_size": (int, 8, _positive, "patches per optimization step"),
    "epochs": (int, 50, _non_negative, "training epochs"),
    "learning_rate": (float, 1e-5, _positive, "fixed AdamW learning rate"),
    "weight_decay": (float, 1e-4, _non_negative, "decoupled weight decay"),
    "adam_beta1": (float, 0.9, _unit_interval, "AdamW first-moment decay"),
    "adam_beta2": (float, 0.999, _unit_interval, "AdamW second-moment decay"),
    "adam_eps": (float, 1e-8, _positive, "AdamW denominator offset"),
    "augment_prob": (float, 0.5, _unit_interval, "fraction of samples given extra speckle"),
    "augment_looks": (_parse_int_list, (1, 2, 3, 4), lambda v: len(v) > 0 and all(x > 0 for x in v),
                      "looks drawn for augmentation speckle"),
    "seed": (int, 0, _non_negative, "master RNG seed"),
    "checkpoint_every": (int, 5, _non_negative, "epochs between checkpoints (0 = final only)"),
    "deterministic": (_parse_bool, True, None, "bit-reproducible mode"),
    "steps_per_epoch": (int, 0, _non_negative, "optimization steps per epoch (0 = auto)"),
    # simulation
    "scene_kind": (str, "piecewise", lambda v: v in ("constant", "piecewise", "blobs"),
                   "synthetic scene structure"),
    "scene_size": (int, 128, lambda v: v >= 32, "synthetic scene side length"),
    "scene_contrast": (float, 4.0, lambda v: 1.0 < v <= 10.0, "two-level scene ratio"),
    "scene_count": (int, 32, _positive, "number of simulated scenes"),
    "looks": (float, 4.0, _positive, "speckle looks used for simulation/evaluation"),
    # evaluation
    "block_size": (int, 25, lambda v: v >= 2, "ratio-image block side"),
    "tol_enl": (float, 0.2, _positive, "relative ENL tolerance for block selection"),
    "tol_mu": (float, 0.1, _positive, "absolute mean tolerance for block selection"),
    # paths
    "corpus_dir": (str, "", None, "directory of training images"),
    "output_dir": (str, "", None, "directory for run outputs"),
    "checkpoint": (str, "", None, "checkpoint path"),
}


@dataclass
class RunConfig:
    """Validated union of every configurable knob plus paths."""

    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def speckle_spec(self) -> SpeckleSpec:
        if self.values.get("target_variance") is not None:
            return SpeckleSpec.from_variance(self.values["target_variance"])
        return SpeckleSpec.from_looks(self.values["target_looks"])

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(
            beta0=v["beta0"], horizon=v["horizon"], gamma=v["gamma"], lam=v["lambda"],
            sigma_edge=v["sigma_edge"], median_window=v["median_window"], eps=v["eps"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            patch_size=v["patch_size"], batch_size=v["batch_size"], epochs=v["epochs"],
            learning_rate=v["learning_rate"], weight_decay=v["weight_decay"],
            adam_beta1=v["adam_beta1"], adam_beta2=v["adam_beta2"], adam_eps=v["adam_eps"],
            augment_prob=v["augment_prob"], augment_looks=tuple(v["augment_looks"]),
            seed=v["seed"], checkpoint_every=v["checkpoint_every"],
            deterministic=v["deterministic"],
            steps_per_epoch=v["steps_per_epoch"] or None,
        )

    def echo_lines(self) -> list[str]:
        lines = ["effective config:"]
        for key in SCHEMA:
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(str(x) for x in val)
            lines.append(f"  {key} = {val}")
        return lines


def _coerce(key: str, raw) -> Any:
    parser, default, validator, _ = SCHEMA[key]
    if raw is None:
        return default
    if isinstance(raw, str):
        try:
            value = parser(raw)
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"config key {key!r}: cannot parse {raw!r} ({exc})") from exc
    else:
        value = raw
    if validator is not None and not validator(value):
        raise ValidationError(f"config key {key!r}: invalid value {value!r}")
    return value


def parse_config_file(path) -> dict[str, str]:
    """Read raw key = value pairs; duplicate keys keep the last occurrence."""
    raw: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
        raw[key] = value
    return raw


def build_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then file values, then overrides; everything validated."""
    raw: dict[str, Any] = {}
    if path is not None:
        raw.update(parse_config_file(path))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ValidationError(f"unknown config key {key!r}")
        if value is not None:
            raw[key] = value
    values = {key: _coerce(key, raw.get(key)) for key in SCHEMA}
    if values["target_variance"] is not None:
        hi = trigamma(0.5)
        if not (0.0 < values["target_variance"] <= hi):
            raise ValidationError(
                f"config key 'target_variance': must lie in (0, {hi:.4f}]"
            )
    return RunConfig(values=values)
