"""Experiment configuration read from a YAML file.

Schema (every key optional unless noted)::

    name: desk
    seed: 0                # data seed; run n of a sweep uses seed + n
    N: 5                   # orders per sequential regime (and runs per order-free regime)
    H: 9                   # max hop for multi-hop metrics
    out: runs/desk
    scale: desk            # desk | full hyperparameter preset
    data:
      source: synthetic    # synthetic | massive
      num_languages: 6
      overlap: 0.2
      num_families: 2
      sizes: [200, 50, 50]
      vitalities: [HIGH, MID, LOW]
      filler_size: 4
      slot_vocab: 2
      path: massive.jsonl  # massive only (required there)
      vitality_map: vitality.json
      locales: [en-US, de-DE]   # massive only: keep a subset
    model:
      hidden_dim: 32
      max_seq_len: 24
      dropout_rate: 0.1
      residual_scale: 0.3
    regimes:               # names or mappings with overrides
      - VANILLA
      - name: SHARED_LORA
        ranks: [4]
        learning_rate: 0.01
    orders:
      policy: mixed        # mixed | resource_ranked | shuffled | destructive_last | explicit | massive
      destructive: [L5]
      explicit: [[L0, L1, L2]]
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .model import MULTI, REGIMES, ModelConfig
from .regimes import LORA_REGIMES, RegimeConfig
from .tasks import DEFAULT_SIZES, HIGH, LOW, MID, VITALITIES

ORDER_POLICIES = ("mixed", "resource_ranked", "shuffled", "destructive_last", "explicit", "massive")
_OVERRIDE_KEYS = set(RegimeConfig.__dataclass_fields__) - {"regime", "rank", "seed"}


class ConfigError(ValueError):
    """The configuration file is missing, unparsable or inconsistent."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    num_languages: int = 6
    overlap: float = 0.2
    num_families: int = 2
    sizes: tuple[int, int, int] = DEFAULT_SIZES
    vitalities: tuple[str, ...] = (HIGH, MID, LOW)
    filler_size: int = 4
    slot_vocab: int = 2
    path: str | None = None
    vitality_map: str | None = None
    locales: tuple[str, ...] | None = None


@dataclass(frozen=True)
class ModelSection:
    hidden_dim: int = 32
    max_seq_len: int = 24
    dropout_rate: float = 0.1
    residual_scale: float = 0.3


@dataclass(frozen=True)
class RegimeEntry:
    name: str
    ranks: tuple[int | None, ...] = (None,)
    overrides: dict[str, Any] = field(default_factory=dict)

    def configs(self, scale: str, seed: int) -> list[RegimeConfig]:
        return [
            RegimeConfig.preset(self.name, rank=r, scale=scale, seed=seed, **self.overrides) for r in self.ranks
        ]


@dataclass(frozen=True)
class OrderSection:
    policy: str = "mixed"
    destructive: tuple[str, ...] = ()
    explicit: tuple[tuple[str, ...], ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    N: int = 5
    H: int = 9
    out: str = "runs"
    scale: str = "desk"
    data: DataConfig = DataConfig()
    model: ModelSection = ModelSection()
    regimes: tuple[RegimeEntry, ...] = ()
    orders: OrderSection = OrderSection()
    source_path: str | None = None

    def regime_configs(self, seed: int | None = None) -> list[RegimeConfig]:
        s = self.seed if seed is None else seed
        return [c for e in self.regimes for c in e.configs(self.scale, s)]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regimes"] = [
            {"name": e.name, "ranks": list(e.ranks), **e.overrides} for e in self.regimes
        ]
        d.pop("source_path")
        return d


def _section(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = set(cls.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    vals = {k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items()}
    try:
        return cls(**vals)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _regime_entry(raw: Any, i: int) -> RegimeEntry:
    if isinstance(raw, str):
        raw = {"name": raw}
    if not isinstance(raw, dict) or "name" not in raw:
        raise ConfigError(f"regimes[{i}]: expected a name or a mapping with 'name'")
    name = str(raw["name"]).upper().replace("-", "_")
    if name not in REGIMES:
        raise ConfigError(f"regimes[{i}]: unknown regime {raw['name']!r}; choose from {list(REGIMES)}")
    overrides = {k: v for k, v in raw.items() if k not in ("name", "ranks", "rank")}
    unknown = set(overrides) - _OVERRIDE_KEYS
    if unknown:
        raise ConfigError(f"regimes[{i}]: unknown keys {sorted(unknown)}")
    ranks = raw.get("ranks", [raw["rank"]] if "rank" in raw else None)
    if ranks is None:
        ranks = [4] if name in LORA_REGIMES else [None]
    if not isinstance(ranks, list) or not ranks:
        raise ConfigError(f"regimes[{i}]: ranks must be a non-empty list")
    if name in LORA_REGIMES and None in ranks:
        raise ConfigError(f"regimes[{i}]: {name} needs integer ranks")
    if name not in LORA_REGIMES and name != MULTI and ranks != [None]:
        raise ConfigError(f"regimes[{i}]: {name} does not take ranks")
    return RegimeEntry(name, tuple(ranks), overrides)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.N < 1:
        raise ConfigError("N must be >= 1")
    if cfg.H < 0:
        raise ConfigError("H must be >= 0")
    if cfg.scale not in ("desk", "full"):
        raise ConfigError(f"scale must be desk or full, got {cfg.scale!r}")
    d = cfg.data
    if d.source not in ("synthetic", "massive"):
        raise ConfigError(f"data.source must be synthetic or massive, got {d.source!r}")
    if d.source == "massive" and not d.path:
        raise ConfigError("data.path is required for massive data")
    if d.source == "synthetic":
        if d.num_languages < 1 or d.num_families < 1:
            raise ConfigError("data.num_languages and data.num_families must be >= 1")
        if len(d.sizes) != 3:
            raise ConfigError("data.sizes must list train, valid and test sizes")
        if not 0.0 <= d.overlap <= 1.0:
            raise ConfigError("data.overlap must be in [0, 1]")
    bad = [v for v in d.vitalities if v not in VITALITIES]
    if bad:
        raise ConfigError(f"data.vitalities: unknown values {bad}")
    if cfg.orders.policy not in ORDER_POLICIES:
        raise ConfigError(f"orders.policy must be one of {list(ORDER_POLICIES)}")
    if cfg.orders.policy == "explicit" and not cfg.orders.explicit:
        raise ConfigError("orders.explicit is empty")
    if not cfg.regimes:
        raise ConfigError("no regimes configured")
    try:
        for c in cfg.regime_configs():
            if c.rank is not None and c.rank > cfg.model.hidden_dim:
                raise ConfigError(f"{c.regime}: rank {c.rank} exceeds hidden_dim {cfg.model.hidden_dim}")
        ModelConfig(vocab_size=2, num_labels=2, hidden_dim=cfg.model.hidden_dim,
                    max_seq_len=cfg.model.max_seq_len, dropout_rate=cfg.model.dropout_rate)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.model.residual_scale <= 0:
        raise ConfigError("model.residual_scale must be positive")
    return cfg


def from_dict(raw: dict, source_path: str | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = set(ExperimentConfig.__dataclass_fields__) - {"source_path"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    orders = raw.get("orders")
    if isinstance(orders, dict) and "explicit" in orders:
        orders = dict(orders, explicit=[tuple(o) for o in orders["explicit"]])
    regimes = raw.get("regimes") or []
    if not isinstance(regimes, list):
        raise ConfigError("regimes must be a list")
    try:
        cfg = ExperimentConfig(
            name=str(raw.get("name", "experiment")),
            seed=int(raw.get("seed", 0)),
            N=int(raw.get("N", 5)),
            H=int(raw.get("H", 9)),
            out=str(raw.get("out", "runs")),
            scale=str(raw.get("scale", "desk")),
            data=_section(DataConfig, raw.get("data"), "data"),
            model=_section(ModelSection, raw.get("model"), "model"),
            regimes=tuple(_regime_entry(r, i) for i, r in enumerate(regimes)),
            orders=_section(OrderSection, orders, "orders"),
            source_path=source_path,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return validate(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return from_dict(raw or {}, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


__all__ = [
    "ConfigError",
    "DataConfig",
    "ExperimentConfig",
    "ModelSection",
    "OrderSection",
    "RegimeEntry",
    "dump_config",
    "from_dict",
    "load_config",
    "validate",
]
