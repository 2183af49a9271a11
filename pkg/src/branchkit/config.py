"""Run configuration and its TOML file format.

A config file has four optional sections::

    [model]     preset, kind, layers, d, heads, ffn_expansion, mlp_expansion,
                conv_kernel, cgmlp_kernel, merge_kernel, dropout,
                stochastic_depth, prenorm, merge_mode
    [task]      vocab_size, feat_dim, min_label_len, max_label_len,
                min_frames_per_token, max_frames_per_token, noise_std, ...
    [train]     peak_lr, warmup_steps, epochs, batch_frames, seed, clip_norm, ...
    [specaug]   n_time_masks, max_time_width, n_freq_masks, max_freq_width

``[model] preset`` selects a named encoder preset that the remaining keys
override. ``[task] feat_dim`` always wins over the model's feature width.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .encoders import EncoderConfig, SpecAugmentConfig, preset
from .nn import subsampled_length


@dataclasses.dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 10
    feat_dim: int = 20
    min_label_len: int = 2
    max_label_len: int = 6
    min_frames_per_token: int = 8
    max_frames_per_token: int = 12
    noise_std: float = 0.5
    template_scale: float = 1.0
    min_template_distance: float = 2.0
    n_train: int = 320
    n_valid: int = 80
    template_seed: int = 7
    train_seed: int = 11
    valid_seed: int = 13

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not 1 <= self.min_label_len <= self.max_label_len:
            raise ValueError("label length range must satisfy 1 <= min <= max")
        if not 1 <= self.min_frames_per_token <= self.max_frames_per_token:
            raise ValueError("frames-per-token range must satisfy 1 <= min <= max")
        # worst case: all tokens at minimum duration and every neighbour a repeat
        for n in range(self.min_label_len, self.max_label_len + 1):
            if subsampled_length(n * self.min_frames_per_token) < 2 * n - 1:
                raise ValueError(
                    f"min_frames_per_token={self.min_frames_per_token} cannot guarantee CTC "
                    f"admissibility after subsampling for {n} labels"
                )


@dataclasses.dataclass(frozen=True)
class TrainSettings:
    peak_lr: float = 2e-3
    warmup_steps: int = 100
    epochs: int = 20
    batch_frames: int = 1200
    seed: int = 0
    clip_norm: float | None = 5.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    divergence_factor: float = 10.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be non-negative")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: EncoderConfig
    task: SyntheticTaskSpec = SyntheticTaskSpec()
    train: TrainSettings = TrainSettings()
    specaug: SpecAugmentConfig = SpecAugmentConfig()

    def __post_init__(self):
        if self.model.feat_dim != self.task.feat_dim:
            object.__setattr__(self, "model", self.model.replace(feat_dim=self.task.feat_dim))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def with_train(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))

    def with_model(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, model=self.model.replace(**changes))


_MODEL_ALIASES = {"layers": "num_layers"}


def _build(cls, section: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**section)


def config_from_dict(raw: dict) -> RunConfig:
    extra = set(raw) - {"model", "task", "train", "specaug"}
    if extra:
        raise ValueError(f"unknown config sections: {sorted(extra)}")
    model_raw = {_MODEL_ALIASES.get(k, k): v for k, v in raw.get("model", {}).items()}
    name = model_raw.pop("preset", "toy-ebranchformer")
    task = _build(SyntheticTaskSpec, raw.get("task", {}), "task")
    model_raw.setdefault("feat_dim", task.feat_dim)
    known = {f.name for f in dataclasses.fields(EncoderConfig)}
    unknown = set(model_raw) - known
    if unknown:
        raise ValueError(f"unknown keys in [model]: {sorted(unknown)}")
    model = preset(name, **model_raw)
    return RunConfig(
        model=model,
        task=task,
        train=_build(TrainSettings, raw.get("train", {}), "train"),
        specaug=_build(SpecAugmentConfig, raw.get("specaug", {}), "specaug"),
    )


def load_config(path) -> RunConfig:
    with open(Path(path), "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def default_config(kind: str = "e_branchformer") -> RunConfig:
    """The toy setup used by the acceptance runs: 2 layers, d=64, 4 heads, V=10."""
    name = "toy-ebranchformer" if kind == "e_branchformer" else "toy-conformer"
    return RunConfig(
        model=preset(name),
        specaug=SpecAugmentConfig(n_time_masks=1, max_time_width=4, n_freq_masks=1, max_freq_width=3),
    )
