"""Experiment configuration: one ``[experiment]`` section of ``key = value`` lines."""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, fields

from .corpus import FORMATS
from .features import KINDS
from .inference import READOUTS
from .learning import TrainConfig

VARIANTS = ("user", "user_corr", "user_item", "user_item_corr", "svd")
METRICS = ("mae", "ranking")
SECTION = "experiment"

_LABEL = {"categorical": "CAT", "ordinal": "ORD", "gaussian": "GAUSS"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = ""
    format: str = "ml100k_tab"
    min_user_ratings: int = 20
    min_item_ratings: int = 20
    split_fraction: float = 0.8
    split_seed: int = 0
    scheme: str = "ordinal"
    variant: str = "user"
    d: int = 20
    d_prime: int = 20
    update_items: bool = True
    k_top: int = 100
    min_overlap: int = 3
    method: str = "cd"
    cd_steps: int = 1
    learning_rate: float = 0.1
    block_size: int = 100
    max_epochs: int = 20
    init_sigma: float = 0.01
    seed: int = 0
    l2: float = 0.0
    patience: int = 3
    validation_fraction: float = 0.0
    readout: str = "expected"
    metrics: str = "mae,ranking"
    ranking_ns: str = "1,2,5,10,20,50"
    half_life: float = 5.0
    n_similar: int = 50
    ranking_users: int = 0
    svd_rank: int = 20
    svd_learning_rate: float = 0.005
    svd_epochs: int = 100
    svd_l2: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.scheme not in KINDS:
            raise ConfigError(f"scheme must be one of {KINDS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}")
        if self.scheme == "gaussian" and self.variant != "svd" and self.method != "gaussian_pl":
            raise ConfigError("the gaussian scheme trains with method gaussian_pl")
        if self.method == "gaussian_pl" and self.scheme != "gaussian":
            raise ConfigError("method gaussian_pl needs scheme gaussian")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie strictly between 0 and 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.d < 0 or self.d_prime < 0:
            raise ConfigError("d and d_prime must be non-negative")
        bad = set(self.metric_list) - set(METRICS)
        if bad:
            raise ConfigError(f"unknown metrics {sorted(bad)}; expected a subset of {METRICS}")
        self.ns  # parses
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def metric_list(self) -> list[str]:
        return [m.strip() for m in self.metrics.split(",") if m.strip()]

    @property
    def ns(self) -> list[int]:
        try:
            out = [int(x) for x in self.ranking_ns.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"ranking_ns must be comma-separated integers, got {self.ranking_ns!r}") from None
        if not out or min(out) < 1:
            raise ConfigError("ranking_ns needs positive integers")
        return out

    @property
    def label(self) -> str:
        """Self-documenting run name such as ``ORD-USER-ITEM-CORR``."""
        if self.variant == "svd":
            return f"SVD-{self.svd_rank}"
        return "-".join([_LABEL[self.scheme]] + self.variant.upper().split("_"))

    @property
    def uses_item_graph(self) -> bool:
        return self.variant in ("user_corr", "user_item_corr")

    @property
    def is_joint(self) -> bool:
        return self.variant in ("user_item", "user_item_corr")

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.method, self.cd_steps, self.learning_rate, self.block_size, self.max_epochs,
                           self.init_sigma, self.seed, self.l2, self.patience)

    # -- text form -------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp[SECTION] = {k: _fmt(v) for k, v in asdict(self).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, overrides: list[str] | None = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}".replace("\n", " ")) from None
        if cp.sections() and cp.sections() != [SECTION]:
            raise ConfigError(f"config must hold a single [{SECTION}] section")
        raw = dict(cp[SECTION]) if cp.has_section(SECTION) else {}
        for item in overrides or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            raw[key.strip()] = value.strip()
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(types)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            kwargs[key] = _parse(key, types[key], value)
        return cls(**kwargs)


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _parse(key: str, typ: str, value: str):
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {value!r} as {typ}") from None
    return value
