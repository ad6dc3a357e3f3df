"""Pipeline configuration: an ini file with one ``[section]`` per stage.

Command-line flags are applied on top of the file with :meth:`PipelineConfig.override`.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .ann_index import SearchParams
from .augmentation import AugmentationConfig
from .experiment import FILTERS, ExperimentConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration value; ``flag`` names the offending option."""

    def __init__(self, flag: str, message: str):
        self.flag = flag
        super().__init__(f"{flag}: {message}")


@dataclass
class Paths:
    kb: str = ""
    corpus: str = ""
    library: str = ""
    out: str = "out"


@dataclass
class Model:
    dim: int = 64
    fine: str = "identity"


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    search: SearchParams = field(default_factory=SearchParams)
    model: Model = field(default_factory=Model)
    filters: tuple[str, ...] = FILTERS
    seed: int = 0

    # section name -> attribute, in file order
    SECTIONS = ("paths", "augmentation", "training", "search", "model")

    def __post_init__(self):
        unknown = set(self.filters) - set(FILTERS)
        if unknown:
            raise ConfigError("--filters", f"unknown filter(s) {', '.join(sorted(unknown))}")
        self.filters = tuple(f for f in FILTERS if f in self.filters)
        self.augmentation = replace(self.augmentation, seed=self.seed,
                                    w_a=self.training.w_a)
        self.training = replace(self.training, seed=self.seed)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed), "filters": ",".join(self.filters)}
        for name in self.SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _dump(getattr(section, f.name)) for f in fields(section)
                        if f.name not in ("seed",) and not (name == "augmentation" and f.name == "w_a")}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "PipelineConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("--config", str(exc).splitlines()[0]) from None
        known = {"run", *cls.SECTIONS}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigError("--config", f"unknown section [{sorted(extra)[0]}]")
        run = cp["run"] if cp.has_section("run") else {}
        defaults = cls()
        parts = {}
        for name in cls.SECTIONS:
            section = getattr(defaults, name)
            values = dict(cp[name]) if cp.has_section(name) else {}
            parts[name] = _load(section, values, name)
        filters = run.get("filters", ",".join(FILTERS))
        return cls(
            seed=_parse_int("seed", run.get("seed", "0")),
            filters=tuple(f for f in filters.split(",") if f),
            **parts,
        )

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        return cls.from_ini(text)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini())

    def override(self, **flags) -> "PipelineConfig":
        """Apply command-line values; ``None`` means "not given"."""
        paths = replace(self.paths, **{k: v for k, v in flags.items()
                                       if k in ("kb", "corpus", "library", "out") and v is not None})
        aug = self.augmentation
        if flags.get("k") is not None:
            aug = replace(aug, k=flags["k"])
        training = self.training
        for flag, attr in (("wa", "w_a"), ("epochs", "epochs"), ("lr", "learning_rate")):
            if flags.get(flag) is not None:
                training = replace(training, **{attr: flags[flag]})
        search = self.search
        if flags.get("topk") is not None:
            search = replace(search, k=flags["topk"])
        if flags.get("nprobe") is not None:
            search = replace(search, nprobe=flags["nprobe"])
        model = self.model
        if flags.get("dim") is not None:
            model = replace(model, dim=flags["dim"])
        seed = self.seed if flags.get("seed") is None else flags["seed"]
        filters = self.filters if flags.get("filters") is None else flags["filters"]
        return PipelineConfig(paths, aug, training, search, model, filters, seed)

    def experiment(self) -> ExperimentConfig:
        t = self.training
        return ExperimentConfig(
            k=self.augmentation.k, top_n_candidates=self.augmentation.top_n_candidates,
            w_a=t.w_a, seed=self.seed, dim=self.model.dim, epochs=t.epochs,
            learning_rate=t.learning_rate, batch_size=t.batch_size, temperature=t.temperature,
            filters=self.filters, fine=self.model.fine, nprobe=self.search.nprobe,
            topk=self.search.k,
        )


def _dump(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {raw!r}") from None


def _load(default, values: dict[str, str], section: str):
    kinds = {f.name: type(getattr(default, f.name)) for f in fields(default)}
    unknown = set(values) - set(kinds)
    if unknown:
        raise ConfigError(f"[{section}] {sorted(unknown)[0]}", "unknown key")
    out = {}
    for key, raw in values.items():
        kind = kinds[key]
        try:
            if raw == "" and kind is not str:
                out[key] = None
            elif kind is bool:
                out[key] = raw.lower() in ("1", "true", "yes", "on")
            elif kind is type(None):
                out[key] = int(raw)
            else:
                out[key] = kind(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}", f"bad value {raw!r}") from None
    try:
        return replace(default, **out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]", str(exc)) from None
