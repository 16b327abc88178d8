"""INI-style run configuration.

Sections and keys (all optional; unknown keys are rejected)::

    [model]       any GadsConfig field, e.g. heads = 4, activation = relu
    [hybrid]      conv_blocks, conv_channels, kernel, fc_widths = 32, 16,
                  fusion_layers, fusion_hidden
    [groups]      region = comma separated 68-point indices, in model order;
                  reference_index = 30 sets the removed nose landmark
    [train]       epochs, batch_size, lr, milestones = 60, 120, gamma, loss

Command-line flags override file values.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .hybrid import HybridConfig
from .model import ConfigError, GadsConfig
from .preprocess import DEFAULT_GROUPS, GroupSpec
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    model: GadsConfig = field(default_factory=GadsConfig)
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    groups: GroupSpec = DEFAULT_GROUPS
    train: TrainConfig = field(default_factory=TrainConfig)

    def hybrid_config(self) -> HybridConfig:
        return replace(self.hybrid, gads=self.model)


def _coerce(raw: str, type_name: str):
    raw = raw.strip()
    if type_name.startswith("tuple"):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    if type_name == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name.startswith("int"):
        return int(raw)
    if type_name.startswith("float"):
        return float(raw)
    return raw


def _apply(obj, section: str, items: dict[str, str], skip: tuple[str, ...] = ()):
    types = {f.name: str(f.type) for f in dataclasses.fields(obj) if f.name not in skip}
    updates = {}
    for key, raw in items.items():
        if key not in types:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            updates[key] = _coerce(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return replace(obj, **updates)


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    unknown = set(parser.sections()) - {"model", "hybrid", "groups", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    groups = DEFAULT_GROUPS
    if parser.has_section("groups"):
        items = dict(parser.items("groups"))
        ref = int(items.pop("reference_index", DEFAULT_GROUPS.reference_index))
        if items:
            try:
                mapping = {k: [int(x) for x in v.replace(",", " ").split()] for k, v in items.items()}
            except ValueError as exc:
                raise ConfigError(f"[groups] {exc}") from exc
            groups = GroupSpec.from_mapping(mapping, ref)
        else:
            groups = replace(DEFAULT_GROUPS, reference_index=ref).validate()

    model = GadsConfig(group_sizes=groups.sizes)
    if parser.has_section("model"):
        model = _apply(model, "model", dict(parser.items("model")), skip=("group_sizes",))
    hybrid = HybridConfig()
    if parser.has_section("hybrid"):
        hybrid = _apply(hybrid, "hybrid", dict(parser.items("hybrid")), skip=("gads",))
    train = TrainConfig()
    if parser.has_section("train"):
        train = _apply(train, "train", dict(parser.items("train")))
    model.validate()
    replace(hybrid, gads=model).validate()
    train.validate()
    return RunConfig(model, hybrid, groups, train)
