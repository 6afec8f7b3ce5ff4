"""Pipeline configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .autonaming import VlmEndpointConfig
from .errors import ConfigError
from .sae import TrainConfig


def derive_seed(root: int, stage: str) -> int:
    """Stage sub-seed: first 8 bytes of sha256("root:stage")."""
    digest = hashlib.sha256(f"{root}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _build(cls, payload, where: str):
    if payload is None:
        return cls()
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {', '.join(unknown)}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class Paths:
    output_dir: str = "out"
    train_embeddings: str | None = None
    eval_embeddings: str | None = None
    labels: str | None = None
    image_manifest: str | None = None
    ground_truth: str | None = None

    def out(self, name: str) -> Path:
        return Path(self.output_dir) / name

    def resolve(self, key: str, default_name: str) -> Path:
        value = getattr(self, key)
        return Path(value) if value else self.out(default_name)


@dataclass
class SynthSettings:
    d: int = 64
    t: int = 100
    k: int = 8
    sparsity: float = 3.0
    n: int = 5000
    noise_sigma: float = 0.01
    render_images: bool = False


@dataclass
class MetricSettings:
    dead_threshold: float = 0.0
    top_count: int = 10
    chunk_size: int = 4096
    export_correlation: bool = False


@dataclass
class NamingSettings:
    endpoint: VlmEndpointConfig = field(default_factory=VlmEndpointConfig)
    n_top: int = 10
    n_per_side: int = 10
    threshold: float = 0.70
    max_neurons: int = 32
    max_in_flight: int = 4
    top_fraction: float = 0.1
    repeats: int = 3


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    synth: SynthSettings = field(default_factory=SynthSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    naming: NamingSettings = field(default_factory=NamingSettings)

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        if not isinstance(payload, dict):
            raise ConfigError("config root must be an object")
        known = {"seed", "paths", "synth", "train", "metrics", "naming"}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
        train = dict(payload.get("train") or {})
        # a single root seed drives every stage; per-stage seeds are derived
        for key in ("seed", "dead_threshold"):
            if key in train:
                raise ConfigError(f"train.{key} is not configurable here; set the top-level seed / metrics.dead_threshold")
        naming = dict(payload.get("naming") or {})
        endpoint = _build(VlmEndpointConfig, naming.pop("endpoint", None), "naming.endpoint")
        cfg = cls(
            seed=int(payload.get("seed", 0)),
            paths=_build(Paths, payload.get("paths"), "paths"),
            synth=_build(SynthSettings, payload.get("synth"), "synth"),
            train=_build(TrainConfig, train, "train"),
            metrics=_build(MetricSettings, payload.get("metrics"), "metrics"),
            naming=_build(NamingSettings, {**naming, "endpoint": endpoint}, "naming"),
        )
        cfg.apply_seed(cfg.seed)
        return cfg

    def apply_seed(self, seed: int) -> None:
        self.seed = int(seed)
        self.train.seed = derive_seed(self.seed, "train")
        self.train.dead_threshold = self.metrics.dead_threshold

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("seed", "dead_threshold"):
            out["train"].pop(key)
        return out


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig.from_dict({})
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return PipelineConfig.from_dict(payload)
