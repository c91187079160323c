"""Run configuration: JSON file plus flat command-line overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

VARIANTS = ("faust_triplet", "faust_tuplet", "faust_representative", "ff", "bp")
DATASETS = ("mnist", "fashion_mnist", "cifar10", "blobs")
IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


@dataclass
class Seeds:
    init: int = 0
    sampling: int = 1
    representatives: int = 2
    eval: int = 3


@dataclass
class DataConfig:
    name: str = "mnist"
    data_dir: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_batches: list = field(default_factory=list)
    test_batches: list = field(default_factory=list)
    train_limit: int | None = None
    test_limit: int | None = None
    num_classes: int = 10
    # synthetic blobs only
    blob_samples: int = 400
    blob_dim: int = 20
    blob_separation: float = 4.0


@dataclass
class RunConfig:
    variant: str = "faust_representative"
    data: DataConfig = field(default_factory=DataConfig)
    arch: list = field(default_factory=lambda: [500, 500, 500])
    d_emb: int = 256
    epochs: int = 60
    batch_size: int = 256
    lr: float = 1e-3
    alpha: float = 0.2
    theta: float = 2.0
    seeds: Seeds = field(default_factory=Seeds)
    norm_mode: str = "length"
    forward_source: str = "activation"
    representative_strategy: str = "first"
    detach_representatives: bool = False
    centroid_k: int = 100
    squared_inference: bool = False
    eval_train_limit: int | None = 10000
    log_wallclock: bool = True
    out_dir: str | None = None
    name: str | None = None

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
        variant = raw.get("variant", cls.variant)
        if variant not in VARIANTS:
            raise ConfigError(f"variant: {variant!r} is not one of {', '.join(VARIANTS)}")
        if "theta" in raw and variant != "ff":
            raise ConfigError(f"theta: only used by variant 'ff', not {variant!r}")
        if "alpha" in raw and variant != "faust_triplet":
            raise ConfigError(f"alpha: only used by variant 'faust_triplet', not {variant!r}")
        if "data" in raw:
            raw["data"] = _nested(DataConfig, raw["data"], "data")
        if "seeds" in raw:
            raw["seeds"] = _nested(Seeds, raw["seeds"], "seeds")
        try:
            cfg = cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = cls.from_dict(raw)
        cfg._resolve_paths(Path(path).parent)
        if cfg.name is None:
            cfg.name = Path(path).stem
        return cfg

    def _resolve_paths(self, base: Path):
        d = self.data
        for name in ("data_dir", *IDX_NAMES):
            value = getattr(d, name)
            if value is not None and not Path(value).is_absolute():
                setattr(d, name, str(base / value))
        d.train_batches = [str(base / p) if not Path(p).is_absolute() else p for p in d.train_batches]
        d.test_batches = [str(base / p) if not Path(p).is_absolute() else p for p in d.test_batches]

    def with_overrides(self, **overrides) -> "RunConfig":
        """Apply flat overrides; ``seed`` shifts every seed stream to a new base."""
        cfg = dataclasses.replace(self, data=dataclasses.replace(self.data),
                                  seeds=dataclasses.replace(self.seeds))
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "seed":
                cfg.seeds = Seeds(init=value, sampling=value + 1,
                                  representatives=value + 2, eval=value + 3)
            elif key in ("train_limit", "test_limit", "data_dir"):
                setattr(cfg.data, key, value)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise ConfigError(f"unknown override {key!r}")
        cfg.validate()
        return cfg

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.variant in VARIANTS, f"variant: {self.variant!r} is not one of {', '.join(VARIANTS)}")
        need(isinstance(self.arch, list) and len(self.arch) >= 1
             and all(isinstance(d, int) and d > 0 for d in self.arch),
             f"arch: expected a non-empty list of positive ints, got {self.arch!r}")
        need(isinstance(self.d_emb, int) and self.d_emb > 0, f"d_emb: must be a positive int, got {self.d_emb!r}")
        need(isinstance(self.epochs, int) and self.epochs >= 0, f"epochs: must be a non-negative int, got {self.epochs!r}")
        need(isinstance(self.batch_size, int) and self.batch_size > 0,
             f"batch_size: must be a positive int, got {self.batch_size!r}")
        need(self.lr >= 0, f"lr: must be >= 0, got {self.lr}")
        need(self.alpha >= 0, f"alpha: must be >= 0, got {self.alpha}")
        need(self.norm_mode in ("length", "layernorm"), f"norm_mode: {self.norm_mode!r} is not 'length' or 'layernorm'")
        need(self.forward_source in ("activation", "embedding"),
             f"forward_source: {self.forward_source!r} is not 'activation' or 'embedding'")
        need(self.representative_strategy in ("first", "random"),
             f"representative_strategy: {self.representative_strategy!r} is not 'first' or 'random'")
        need(self.centroid_k >= 1, f"centroid_k: must be >= 1, got {self.centroid_k}")
        need(self.data.name in DATASETS, f"data.name: {self.data.name!r} is not one of {', '.join(DATASETS)}")
        need(self.data.num_classes >= 2, f"data.num_classes: must be >= 2, got {self.data.num_classes}")
        if self.variant in ("ff", "bp"):
            need(self.forward_source == "activation",
                 f"forward_source: variant {self.variant!r} has no embedding to forward")

    def to_dict(self) -> dict:
        """Plain dict that ``from_dict`` accepts (variant-specific knobs only where used)."""
        out = dataclasses.asdict(self)
        if self.variant != "ff":
            out.pop("theta")
        if self.variant != "faust_triplet":
            out.pop("alpha")
        return out

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def idx_paths(self, split: str) -> tuple[str, str]:
        d = self.data
        img, lab = getattr(d, f"{split}_images"), getattr(d, f"{split}_labels")
        if d.data_dir is not None:
            img = img or str(Path(d.data_dir) / IDX_NAMES[f"{split}_images"])
            lab = lab or str(Path(d.data_dir) / IDX_NAMES[f"{split}_labels"])
        if img is None or lab is None:
            raise ConfigError(f"data: no {split} image/label paths (set data_dir or {split}_images/{split}_labels)")
        return img, lab


def _nested(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s): {', '.join(unknown)}")
    return cls(**raw)
