"""Run configuration: one JSON file, overridable from the command line."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from oxygan.datapipe import DEFAULT_TRAIN_RATIO, AugmentConfig, SynthConfig
from oxygan.errors import ConfigError
from oxygan.networks import NetworkConfig
from oxygan.objective import TrainConfig


@dataclass
class DataOptions:
    synth: SynthConfig = field(default_factory=SynthConfig)
    manifest: str | None = None
    n_cases: int = 12
    train_ratio: float = DEFAULT_TRAIN_RATIO
    augment: bool = True
    geometry: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class EvalOptions:
    selector: str = "center"
    infer_batch: int = 380
    noise_on: bool = False
    intra_cases: int | None = None


@dataclass
class SweepOptions:
    batch_sizes: list[int] = field(default_factory=lambda: [4])
    l1_weights: list[float] = field(default_factory=lambda: [50.0, 100.0, 200.0, 400.0])


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(image_size=64))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataOptions = field(default_factory=DataOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)
    sweep: SweepOptions = field(default_factory=SweepOptions)
    out_dir: str = "run"
    deterministic: bool = False

    def __post_init__(self):
        self.sync()

    def sync(self) -> None:
        """Propagate the top-level network config into the train config."""
        self.train.network = self.network
        if self.data.geometry.net_size != self.network.image_size:
            self.data.geometry.net_size = self.network.image_size

    def to_dict(self) -> dict:
        d = {
            "network": self.network.to_dict(),
            "train": {k: v for k, v in asdict(self.train).items() if k != "network"},
            "data": {
                "synth": self.data.synth.to_dict(),
                "manifest": self.data.manifest,
                "n_cases": self.data.n_cases,
                "train_ratio": self.data.train_ratio,
                "augment": self.data.augment,
                "geometry": self.data.geometry.to_dict(),
            },
            "eval": asdict(self.eval),
            "sweep": asdict(self.sweep),
            "out_dir": self.out_dir,
            "deterministic": self.deterministic,
        }
        return d

    @classmethod
    def from_dict(cls, data: dict, source: str = "<config>") -> RunConfig:
        _check_keys(data, {f.name for f in fields(cls)}, source, "")
        network = _section(NetworkConfig, data.get("network", {"image_size": 64}), source, "network")
        train_d = dict(data.get("train", {}))
        _check_keys(train_d, {f.name for f in fields(TrainConfig)} - {"network"}, source, "train")
        train = _section(TrainConfig, {**train_d, "network": network}, source, "train")
        data_d = dict(data.get("data", {}))
        _check_keys(data_d, {f.name for f in fields(DataOptions)}, source, "data")
        synth = _section(SynthConfig, data_d.pop("synth", {}), source, "data.synth")
        geometry = _section(AugmentConfig, data_d.pop("geometry", {}), source, "data.geometry")
        data_opts = _section(DataOptions, {**data_d, "synth": synth, "geometry": geometry}, source, "data")
        eval_opts = _section(EvalOptions, data.get("eval", {}), source, "eval")
        sweep_opts = _section(SweepOptions, data.get("sweep", {}), source, "sweep")
        return cls(network, train, data_opts, eval_opts, sweep_opts,
                   str(data.get("out_dir", "run")), bool(data.get("deterministic", False)))

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(raw, str(path))

    def save(self, path) -> None:
        Path(path).write_text(canonical_json(self.to_dict(), indent=2) + "\n")

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output directory is excluded."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]


def canonical_json(obj, indent: int | None = None) -> str:
    return json.dumps(obj, sort_keys=True, indent=indent, separators=None if indent else (",", ":"))


def _check_keys(data: dict, allowed: set[str], source: str, section: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: {section or 'config'} must be an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        where = f"{section}." if section else ""
        raise ConfigError(f"{source}: unknown field {where}{unknown[0]}")


def _section(cls, data, source: str, section: str):
    if isinstance(data, cls):
        return data
    _check_keys(data, {f.name for f in fields(cls)}, source, section)
    try:
        obj = cls(**data)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except ConfigError as exc:
        raise ConfigError(f"{source}: {section}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {section}: {exc}") from exc
