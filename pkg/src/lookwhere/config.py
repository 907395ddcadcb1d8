"""Flat ``key = value`` run configuration with sections and command-line overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .distill import AggregationSpec, LossWeights
from .extractor import InterpConfig
from .selector import SelectorConfig
from .train import FinetuneConfig, PretrainConfig, TeacherConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "image_side": "64", "num_classes": "4", "glyph_side": "12", "noise_std": "0.4",
        "glyph_amplitude": "3.0", "texture_period": "8", "train_count": "1024", "test_count": "512",
        "task": "classification",
    },
    "model": {
        "embed_dim": "64", "num_layers": "4", "num_heads": "4", "patch_size": "8",
        "num_registers": "4", "ffn_ratio": "4.0", "image_channels": "1",
    },
    "selector": {"low_res": "32", "low_depth": "2", "map_hidden": "64"},
    "train": {
        "teacher_epochs": "10", "teacher_batch_size": "32", "teacher_lr": "0.002", "teacher_readout": "mean",
        "epochs": "15", "batch_size": "32", "k_min": "4", "k_max": "16", "lr": "0.001",
        "weight_decay": "0.05", "warmup_frac": "0.1",
        "lambda_cls": "1.0", "lambda_pat": "1.0", "lambda_map": "0.1",
        "aggregation": "pat@last_only", "interp_neighbors": "5", "interp_pow": "1.0",
        "conditioning": "cls+reg", "map_loss": "kl", "augment": "false",
        "finetune_epochs": "6", "finetune_batch_size": "32", "finetune_lr": "0.001",
        "finetune_head": "cls", "finetune_k": "6", "finetune_k_min": "1", "finetune_k_max": "64",
        "finetune_selection": "selector",
    },
    "eval": {"k": "6", "knn_neighbors": "3", "seg_neighbors": "20", "metric": "euclidean", "figures": "true"},
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, str]] = field(default_factory=lambda: {s: dict(v) for s, v in DEFAULTS.items()})
    seed: int = 0

    # -- loading ----------------------------------------------------------------
    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
        cfg = cls()
        if path is not None:
            cfg.merge_file(path)
        for item in overrides:
            cfg.set_override(item)
        if seed is not None:
            cfg.seed = seed
        cfg.validate()
        return cfg

    def merge_file(self, path: str | Path) -> None:
        parser = configparser.ConfigParser(interpolation=None, strict=True)
        parser.optionxform = str
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}".replace("\n", " ")) from e
        for section in parser.sections():
            for key, value in parser.items(section):
                self.set(section, key, value)
        if parser.defaults():
            raise ConfigError("keys outside a section are not allowed")

    def set(self, section: str, key: str, value: str) -> None:
        if section == "run" and key == "seed":
            self.seed = _as_int(value, "run.seed")
            return
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = str(value).strip()

    def set_override(self, item: str) -> None:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        self.set(section, key, value)

    def resolved(self) -> list[str]:
        lines = [f"run.seed={self.seed}"]
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key]}")
        return lines

    def to_dict(self) -> dict:
        return {"seed": self.seed, **{s: dict(v) for s, v in self.values.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        cfg = cls()
        cfg.seed = int(d.get("seed", 0))
        for section, items in d.items():
            if section == "seed":
                continue
            for k, v in items.items():
                cfg.set(section, k, v)
        return cfg

    # -- typed views ----------------------------------------------------------------
    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def int(self, section: str, key: str) -> int:
        return _as_int(self.get(section, key), f"{section}.{key}")

    def float(self, section: str, key: str) -> float:
        try:
            return float(self.get(section, key))
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a number, got {self.get(section, key)!r}") from None

    def bool(self, section: str, key: str) -> bool:
        v = self.get(section, key).lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key} must be a boolean, got {v!r}")

    def validate(self) -> None:
        try:
            self.vit_config()
            self.selector_config()
            self.data_spec(0)
            self.pretrain_config().validate(self.vit_config().num_patches)
            self.finetune_config()
            self.eval_ks()
        except ConfigError:
            raise
        except (ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e

    def vit_config(self) -> ViTConfig:
        m = "model"
        return ViTConfig(embed_dim=self.int(m, "embed_dim"), num_layers=self.int(m, "num_layers"),
                         num_heads=self.int(m, "num_heads"), patch_size=self.int(m, "patch_size"),
                         num_registers=self.int(m, "num_registers"), ffn_ratio=self.float(m, "ffn_ratio"),
                         image_channels=self.int(m, "image_channels"),
                         image_size=self.int("data", "image_side"))

    def selector_config(self) -> SelectorConfig:
        vc = self.vit_config()
        sc = SelectorConfig(low_res=self.int("selector", "low_res"), low_depth=self.int("selector", "low_depth"),
                            map_hidden=self.int("selector", "map_hidden"), high_grid=vc.grid_side,
                            patch_size=vc.patch_size)
        if sc.low_depth > vc.num_layers:
            raise ConfigError("selector.low_depth exceeds model.num_layers")
        if sc.low_res > vc.image_size:
            raise ConfigError("selector.low_res exceeds data.image_side")
        return sc

    def data_spec(self, seed_offset: int) -> SyntheticSpec:
        d = "data"
        if self.int("model", "image_channels") != 1:
            raise ConfigError("the synthetic generator produces single-channel images")
        return SyntheticSpec(image_side=self.int(d, "image_side"), num_classes=self.int(d, "num_classes"),
                             glyph_side=self.int(d, "glyph_side"), noise_std=self.float(d, "noise_std"),
                             glyph_amplitude=self.float(d, "glyph_amplitude"),
                             texture_period=self.int(d, "texture_period"),
                             patch_size=self.int("model", "patch_size"), seed=self.seed * 1000 + seed_offset,
                             task=self.get(d, "task"))

    def teacher_config(self) -> TeacherConfig:
        t = "train"
        return TeacherConfig(epochs=self.int(t, "teacher_epochs"), batch_size=self.int(t, "teacher_batch_size"),
                             lr=self.float(t, "teacher_lr"), seed=self.seed, readout=self.get(t, "teacher_readout"))

    def interp_config(self) -> InterpConfig:
        return InterpConfig(neighbors=self.int("train", "interp_neighbors"), pow=self.float("train", "interp_pow"))

    def pretrain_config(self) -> PretrainConfig:
        t = "train"
        return PretrainConfig(
            epochs=self.int(t, "epochs"), batch_size=self.int(t, "batch_size"),
            k_min=self.int(t, "k_min"), k_max=self.int(t, "k_max"),
            weights=LossWeights(self.float(t, "lambda_cls"), self.float(t, "lambda_pat"), self.float(t, "lambda_map")),
            lr=self.float(t, "lr"), weight_decay=self.float(t, "weight_decay"),
            warmup_frac=self.float(t, "warmup_frac"), seed=self.seed,
            aggregation=AggregationSpec.parse(self.get(t, "aggregation")), interp=self.interp_config(),
            conditioning=self.get(t, "conditioning"), map_loss=self.get(t, "map_loss"),
            augment=self.bool(t, "augment"))

    def finetune_config(self) -> FinetuneConfig:
        t = "train"
        k = self.get(t, "finetune_k")
        fixed = None if k == "varied" else _as_int(k, "train.finetune_k")
        return FinetuneConfig(
            epochs=self.int(t, "finetune_epochs"), batch_size=self.int(t, "finetune_batch_size"),
            head=self.get(t, "finetune_head"), fixed_k=fixed, k_min=self.int(t, "finetune_k_min"),
            k_max=self.int(t, "finetune_k_max"), selection=self.get(t, "finetune_selection"),
            lr=self.float(t, "finetune_lr"), weight_decay=self.float(t, "weight_decay"),
            warmup_frac=self.float(t, "warmup_frac"), seed=self.seed, interp=self.interp_config(),
            conditioning=self.get(t, "conditioning"))

    def eval_ks(self) -> list[int]:
        n = self.vit_config().num_patches
        ks = [_as_int(v, "eval.k") for v in self.get("eval", "k").split(",") if v.strip()]
        if not ks or any(not 1 <= k <= n for k in ks):
            raise ConfigError(f"eval.k values must lie in [1, {n}]")
        return ks


def _as_int(value: str, name: str) -> int:
    try:
        return int(str(value).strip())
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {value!r}") from None
