"""Strict JSON run configuration and dataset materialisation.

Every section is optional. ``admm`` and ``search`` hold overrides applied on
top of the attack-specific defaults (``AdmmConfig.ssa_defaults`` and
friends), so an empty document runs the published settings.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, get_type_hints

from .attacks import SearchPolicy
from .datagen import (
    BlobSpec,
    DatasetError,
    ImageClassSpec,
    generate_blobs,
    generate_patch_classes,
    load_csv_dataset,
    patch_mask,
    split_dataset,
)
from .lpbox import AdmmConfig
from .netcore import Dataset


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the dotted key."""


@dataclass(frozen=True)
class CsvPaths:
    train: Optional[str] = None
    aux: Optional[str] = None
    validation: Optional[str] = None
    input_dim: Optional[int] = None
    n_classes: Optional[int] = None


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"  # blobs | patches | csv
    blobs: dict = field(default_factory=dict)
    patches: dict = field(default_factory=dict)
    csv: CsvPaths = CsvPaths()
    split: tuple = (0.7, 0.15, 0.15)
    split_seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    hidden_widths: tuple = (32, 32, 32)
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9
    Q: int = 8
    seed: int = 0


@dataclass(frozen=True)
class SsaSection:
    sample_index: Optional[int] = None
    source: Optional[int] = None
    target: int = 1
    delta: float = 10.0
    delta_escalation: Optional[float] = None


@dataclass(frozen=True)
class TriggerSection:
    patch: int = 2
    corner: str = "bottom-right"


@dataclass(frozen=True)
class TsaSection:
    target: int = 0
    trigger: TriggerSection = TriggerSection()
    seed: int = 0


@dataclass(frozen=True)
class CampaignSection:
    attack_type: str = "ssa"
    targets: Optional[tuple] = None
    per_target: int = 10
    seed: int = 0


@dataclass(frozen=True)
class OracleSection:
    instance: str = "linear"  # linear | ssa_subset
    V: int = 12
    k: int = 2
    seed: int = 0
    source: int = 0
    target: int = 1


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    admm: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    ssa: SsaSection = SsaSection()
    tsa: TsaSection = TsaSection()
    campaign: CampaignSection = CampaignSection()
    oracle: OracleSection = OracleSection()
    out_dir: Optional[str] = None

    def with_seed(self, seed: int) -> "RunConfig":
        """Override the training, trigger, campaign and oracle seeds (not the data seed)."""
        r = dataclasses.replace
        return r(
            self,
            train=r(self.train, seed=seed),
            tsa=r(self.tsa, seed=seed),
            campaign=r(self.campaign, seed=seed),
            oracle=r(self.oracle, seed=seed),
        )

    def admm_config(self, mode: str) -> AdmmConfig:
        base = AdmmConfig.ssa_defaults if mode == "ssa" else AdmmConfig.tsa_defaults
        try:
            return base(**_tuples(self.admm))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"admm: {exc}") from None

    def search_policy(self, mode: str) -> SearchPolicy:
        try:
            if mode == "tsa":
                return SearchPolicy.tsa_defaults(**self.search)
            return SearchPolicy(**self.search)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"search: {exc}") from None

    def trigger_mask(self, input_dim: int):
        side = int(round(input_dim**0.5))
        if side * side != input_dim:
            raise ConfigError(f"tsa.trigger: input dimension {input_dim} is not a square image")
        try:
            return patch_mask(side, self.tsa.trigger.patch, self.tsa.trigger.corner)
        except ValueError as exc:
            raise ConfigError(f"tsa.trigger: {exc}") from None


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _check_keys(d: dict, allowed, where: str) -> None:
    for key in d:
        if key not in allowed:
            name = f"{where}.{key}" if where else key
            raise ConfigError(f"{name}: unknown key")


_SCALARS = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _coerce(value, hint, where: str):
    """Check ``value`` against the simple annotations used in this module."""
    origin = getattr(hint, "__origin__", None)
    if origin is not None and type(None) in getattr(hint, "__args__", ()):  # Optional[X]
        if value is None:
            return None
        (hint,) = [a for a in hint.__args__ if a is not type(None)]
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    if hint in (tuple, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if hint is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return dict(value)
    ok = _SCALARS.get(hint)
    if ok is not None:
        if isinstance(value, bool) and hint is not bool:
            raise ConfigError(f"{where}: expected {hint.__name__}")
        if not isinstance(value, ok):
            raise ConfigError(f"{where}: expected {hint.__name__}")
        return hint(value)
    return value


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = get_type_hints(cls)
    _check_keys(doc, hints, where)
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in doc.items()}
    return cls(**kwargs)


def _check_overrides(doc: dict, cls, where: str, exclude=()) -> None:
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    _check_keys(doc, names, where)


def config_from_dict(doc: dict) -> RunConfig:
    cfg = _build(RunConfig, doc, "")
    _check_overrides(cfg.admm, AdmmConfig, "admm")
    _check_overrides(cfg.search, SearchPolicy, "search")
    _check_overrides(cfg.data.blobs, BlobSpec, "data.blobs")
    _check_overrides(cfg.data.patches, ImageClassSpec, "data.patches", exclude=("templates",))
    if cfg.data.kind not in ("blobs", "patches", "csv"):
        raise ConfigError(f"data.kind: unknown kind {cfg.data.kind!r}")
    if cfg.campaign.attack_type not in ("ssa", "tsa"):
        raise ConfigError(f"campaign.attack_type: unknown attack type {cfg.campaign.attack_type!r}")
    if cfg.oracle.instance not in ("linear", "ssa_subset"):
        raise ConfigError(f"oracle.instance: unknown instance {cfg.oracle.instance!r}")
    # surface bad solver/search overrides at load time
    cfg.admm_config("ssa")
    cfg.search_policy("ssa")
    return cfg


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(doc)


def _spec(cls, overrides: dict, where: str):
    kw = _tuples(overrides)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Return (train, aux, validation) as described by ``cfg.data``."""
    d = cfg.data
    if d.kind == "csv":
        c = d.csv
        for key in ("input_dim", "n_classes"):
            if getattr(c, key) is None:
                raise ConfigError(f"data.csv.{key}: required for CSV data")
        out = []
        for role in ("train", "aux", "validation"):
            path = getattr(c, role)
            if path is None:
                raise ConfigError(f"data.csv.{role}: required for CSV data")
            if not Path(path).is_file():
                raise ConfigError(f"data.csv.{role}: file {path} not found")
            out.append(load_csv_dataset(path, c.input_dim, c.n_classes, role))
        return tuple(out)
    if d.kind == "blobs":
        full = generate_blobs(_spec(BlobSpec, d.blobs, "data.blobs"))
    else:
        full = generate_patch_classes(_spec(ImageClassSpec, d.patches, "data.patches"))
    try:
        parts = split_dataset(full, d.split, d.split_seed)
    except ValueError as exc:
        raise ConfigError(f"data.split: {exc}") from None
    if any(len(p) == 0 for p in parts):
        raise DatasetError("a dataset split came out empty")
    return tuple(parts)
