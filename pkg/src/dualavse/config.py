"""Dataclass configs shared by every stage of the pipeline.

All configs round-trip through plain dicts (``to_dict`` / ``from_dict``) so a
whole run can be described by one JSON document. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

VARIANTS = ("aose", "avse_concat", "avse_mam", "avse_sam", "dual_full")
VISUAL_INPUTS = ("face", "lip_crop")
NOISE_KINDS = ("white", "pink", "modulated", "babble")
EVAL_SNRS = (-15.0, -10.0, -5.0, 0.0)


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration values."""


def _from_dict(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s): {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    win_len: int = 400
    hop: int = 160
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        for name in ("sample_rate", "win_len", "hop", "fft_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"StftConfig.{name} must be a positive integer, got {v!r}")
        if self.win_len > self.fft_size:
            raise ConfigError("StftConfig: win_len must not exceed fft_size")
        if self.hop >= self.win_len:
            raise ConfigError("StftConfig: hop must be smaller than win_len")
        if self.window != "hann":
            raise ConfigError(f"StftConfig: unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StftConfig":
        return _from_dict(cls, data, "stft")


@dataclass(frozen=True)
class ModelConfig:
    """Network hyper-parameters.

    ``n_frames`` is the video length N; the spectrogram has ``T == 4 * N``
    frames because the audio encoder halves time twice.
    """

    base_channels: int = 64
    n_frames: int = 64
    n_bins: int = 257
    n_spec_frames: int = 256
    variant: str = "dual_full"
    visual_input: str = "face"
    temperature_init: float = 1.0
    backbone_width: float = 1.0
    image_size: int = 112

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"ModelConfig.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.visual_input not in VISUAL_INPUTS:
            raise ConfigError(f"ModelConfig.visual_input must be one of {VISUAL_INPUTS}")
        if self.base_channels <= 0 or self.base_channels % 8:
            # C/8 is the narrowest encoder stage, so divisibility by 4 is not enough.
            raise ConfigError("ModelConfig.base_channels must be a positive multiple of 8")
        if self.n_spec_frames != 4 * self.n_frames:
            raise ConfigError("ModelConfig: n_spec_frames must equal 4 * n_frames")
        if self.temperature_init <= 0:
            raise ConfigError("ModelConfig.temperature_init must be positive")
        if self.image_size % 4 or self.image_size < 4:
            raise ConfigError("ModelConfig.image_size must be a positive multiple of 4")
        if self.backbone_width <= 0:
            raise ConfigError("ModelConfig.backbone_width must be positive")

    @property
    def uses_video(self) -> bool:
        return self.variant != "aose"

    @property
    def uses_sam(self) -> bool:
        return self.variant in ("avse_sam", "dual_full")

    @property
    def uses_mam(self) -> bool:
        return self.variant in ("avse_mam", "dual_full")

    @property
    def frontend_channels(self) -> int:
        return self.base_channels // 8

    @property
    def visual_channels(self) -> int:
        return max(8, int(round(self.base_channels * self.backbone_width)))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, data, "model")


@dataclass(frozen=True)
class TrainSchedule:
    stage_steps: tuple[int, int, int] = (2000, 500, 500)
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    snr_sampling: tuple[float, ...] = EVAL_SNRS
    clip_bound: float = 5.0
    val_every: int = 100
    val_clips: int = 16

    def __post_init__(self):
        if len(self.stage_steps) != 3 or any(int(s) < 0 for s in self.stage_steps):
            raise ConfigError("TrainSchedule.stage_steps must be three non-negative counts")
        if self.batch_size < 1:
            raise ConfigError("TrainSchedule.batch_size must be >= 1")
        if not self.snr_sampling:
            raise ConfigError("TrainSchedule.snr_sampling must not be empty")
        if self.val_every < 1:
            raise ConfigError("TrainSchedule.val_every must be >= 1")

    @property
    def total_steps(self) -> int:
        return int(sum(self.stage_steps))

    def stage_of(self, step: int) -> int:
        """1-based stage index for a 0-based global step."""
        s1, s2, _ = self.stage_steps
        if step < s1:
            return 1
        if step < s1 + s2:
            return 2
        return 3

    def replace(self, **changes) -> "TrainSchedule":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainSchedule":
        return _from_dict(cls, data, "train")


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 500
    n_val: int = 50
    n_test: int = 50
    n_speakers: int = 20
    speaker_split: tuple[int, int, int] = (14, 3, 3)
    snr_set: tuple[float, ...] = EVAL_SNRS
    noise_kinds: tuple[str, ...] = NOISE_KINDS
    duration: float = 2.55
    n_frames: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("CorpusConfig clip counts must be non-negative")
        if sum(self.speaker_split) != self.n_speakers or min(self.speaker_split) < 1:
            raise ConfigError("CorpusConfig.speaker_split must be positive and sum to n_speakers")
        unknown = set(self.noise_kinds) - set(NOISE_KINDS)
        if unknown or not self.noise_kinds:
            raise ConfigError(f"CorpusConfig.noise_kinds must be a non-empty subset of {NOISE_KINDS}")
        if not self.snr_set:
            raise ConfigError("CorpusConfig.snr_set must not be empty")

    def replace(self, **changes) -> "CorpusConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CorpusConfig":
        return _from_dict(cls, data, "corpus")


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI invocation needs, as one nested document."""

    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    eval_snrs: tuple[float, ...] = EVAL_SNRS
    seed: int = 0
    out_dir: str = "runs"

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(dataclasses.asdict(self))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object at top level")
        sub = {"stft": StftConfig, "model": ModelConfig, "train": TrainSchedule, "corpus": CorpusConfig}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"config: unknown key(s): {', '.join(unknown)}")
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in sub:
                kwargs[key] = sub[key].from_dict(value)
            elif isinstance(value, list):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj
