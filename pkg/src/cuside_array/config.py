""" Pydantic configuration models.

Every tunable of the package lives here so that a run can be reproduced from one JSON document.
Defaults: 400 ms chunks, 800 ms left context, 400 ms right context,
jitter 350-450 ms, simulation loss weight 0.975, channel 0 as the MVDR reference.
"""
from __future__ import annotations

import json
import math
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.signal import check_COLA, get_window

from cuside_array import data


class ContextMode(str, Enum):
    """ Right-context mode of a chunk. """
    NONE = "none"
    REAL = "real"
    SIMULATED = "simulated"


class Stage(str, Enum):
    """ Which half of the pipeline a chunk plan feeds. """
    FRONTEND = "frontend"
    BACKEND = "backend"


class StftConfig(BaseModel):
    """ Short-time Fourier transform geometry.

    Attributes:
        fft_size: FFT length in samples; frames shorter than this are zero-padded.
        window_size: Analysis window length in samples.
        hop: Frame advance in samples.
        sample_rate: Sampling rate in Hz.
        window: Window name understood by ``scipy.signal.get_window``.
    """
    model_config = ConfigDict(frozen=True)

    fft_size: int = Field(default=512, gt=0)
    window_size: int = Field(default=480, gt=0)
    hop: int = Field(default=160, gt=0)
    sample_rate: int = Field(default=16000, gt=0)
    window: str = "hann"

    @model_validator(mode="after")
    def check_geometry(self) -> StftConfig:
        if self.window_size > self.fft_size:
            raise ValueError(f"window_size {self.window_size} exceeds fft_size {self.fft_size}")
        if self.hop > self.window_size:
            raise ValueError(f"hop {self.hop} exceeds window_size {self.window_size}")
        return self

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def analysis_window(self):
        """ Periodic window of ``window_size`` samples. """
        return get_window(self.window, self.window_size, fftbins=True)

    def is_cola(self) -> bool:
        """ True when the window is constant-overlap-add at this hop. """
        return bool(check_COLA(self.analysis_window(), self.window_size,
                               self.window_size - self.hop))


class FbankConfig(BaseModel):
    """ Log mel filterbank settings. """
    model_config = ConfigDict(frozen=True)

    mel_bins: int = Field(default=80, ge=1)
    floor: float = Field(default=1e-10, gt=0)


class MvdrConfig(BaseModel):
    """ Reference-channel MVDR settings.

    Attributes:
        reference_channel: Microphone whose clean image the filter preserves.
        diagonal_loading: Loading relative to the mean eigenvalue trace(Phi_N)/M.
        loading_floor: Absolute loading added on top, keeps all-zero noise statistics invertible.
        max_condition: Condition number above which a loaded noise covariance counts as singular.
    """
    model_config = ConfigDict(frozen=True)

    reference_channel: int = Field(default=0, ge=0)
    diagonal_loading: float = Field(default=1e-6, ge=0)
    loading_floor: float = Field(default=1e-10, ge=0)
    max_condition: float = Field(default=1e12, gt=1)


class MaskNetConfig(BaseModel):
    """ BLSTM mask estimator: three layers of 320 units per direction, dropout 0.5. """
    model_config = ConfigDict(frozen=True)

    layers: int = Field(default=3, ge=1)
    hidden_per_direction: int = Field(default=320, ge=1)
    dropout: float = Field(default=0.5, ge=0, lt=1)


class EncoderConfig(BaseModel):
    """ Chunk-local BLSTM CTC encoder. """
    model_config = ConfigDict(frozen=True)

    layers: int = Field(default=2, ge=1)
    hidden_per_direction: int = Field(default=128, ge=1)
    dropout: float = Field(default=0.1, ge=0, lt=1)


class SimNetConfig(BaseModel):
    """ Future-context simulator: unidirectional GRU stack plus one feed-forward head. """
    model_config = ConfigDict(frozen=True)

    layers: int = Field(default=3, ge=1)
    hidden: int = Field(default=256, ge=1)
    right_frames: int = Field(default=40, ge=1)


class ModelConfig(BaseModel):
    """ Architecture of the whole model; hashed into every checkpoint. """
    model_config = ConfigDict(frozen=True)

    frontend: Literal["mvdr", "reference"] = "mvdr"
    vocab_size: int = Field(default=10, ge=2)
    stft: StftConfig = StftConfig()
    fbank: FbankConfig = FbankConfig()
    mvdr: MvdrConfig = MvdrConfig()
    mask_net: MaskNetConfig = MaskNetConfig()
    encoder: EncoderConfig = EncoderConfig()
    sim_net: SimNetConfig = SimNetConfig()


class ContextPolicy(BaseModel):
    """ Right-context randomization for one pipeline stage.

    Attributes:
        stage: Front-end or back-end.
        probabilities: Draw probability per mode; must sum to one.
    """
    model_config = ConfigDict(frozen=True)

    stage: Stage
    probabilities: dict[ContextMode, float]

    @field_validator("probabilities")
    @classmethod
    def check_distribution(cls, value: dict[ContextMode, float]) -> dict[ContextMode, float]:
        if any(p < 0 for p in value.values()):
            raise ValueError("probabilities must be non-negative")
        if not math.isclose(sum(value.values()), 1.0, abs_tol=1e-9):
            raise ValueError(f"probabilities sum to {sum(value.values())}, not 1")
        return value

    @classmethod
    def frontend_default(cls) -> ContextPolicy:
        return cls(stage=Stage.FRONTEND,
                   probabilities={ContextMode.NONE: 0.5, ContextMode.REAL: 0.5})

    @classmethod
    def backend_default(cls) -> ContextPolicy:
        third = 1.0 / 3.0
        return cls(stage=Stage.BACKEND,
                   probabilities={ContextMode.NONE: third, ContextMode.REAL: third,
                                  ContextMode.SIMULATED: 1.0 - 2 * third})

    @classmethod
    def fixed(cls, stage: Stage, mode: ContextMode) -> ContextPolicy:
        return cls(stage=stage, probabilities={mode: 1.0})


class ChunkConfig(BaseModel):
    """ Context-sensitive chunk sizes in milliseconds. """
    model_config = ConfigDict(frozen=True)

    chunk_ms: int = Field(default=400, gt=0)
    left_ms: int = Field(default=800, ge=0)
    right_ms: int = Field(default=400, ge=0)
    jitter_low_ms: int = Field(default=350, gt=0)
    jitter_high_ms: int = Field(default=450, gt=0)
    hop_ms: int = Field(default=10, gt=0)

    @model_validator(mode="after")
    def check_sizes(self) -> ChunkConfig:
        for name in ("chunk_ms", "left_ms", "right_ms", "jitter_low_ms", "jitter_high_ms"):
            if getattr(self, name) % self.hop_ms:
                raise ValueError(f"{name} must be a multiple of hop_ms={self.hop_ms}")
        if not self.jitter_low_ms <= self.chunk_ms <= self.jitter_high_ms:
            raise ValueError("jitter bounds must bracket chunk_ms")
        return self

    def frames(self, ms: int) -> int:
        return ms // self.hop_ms


class TrainingConfig(BaseModel):
    """ Multi-task training settings.

    The total loss is ``l_utt + l_chunk + alpha * l_simu``. The learning rate warms up, then
    decays by ``decay_factor`` whenever validation loss fails to improve for
    ``plateau_patience`` evaluations; training stops once it falls below ``min_lr``.
    """
    alpha: float = Field(default=0.975, ge=0)
    peak_lr: float = Field(default=1e-3, gt=0)
    warmup_steps: int = Field(default=500, ge=0)
    lr_schedule: Literal["warmup_plateau", "noam"] = "warmup_plateau"
    decay_factor: float = Field(default=0.1, gt=0, lt=1)
    min_lr: float = Field(default=1e-6, gt=0)
    plateau_patience: int = Field(default=2, ge=1)
    clip_norm: float = Field(default=5.0, gt=0)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = Field(default=5, ge=1)
    max_steps: int = Field(default=2000, ge=1)
    eval_every: int = Field(default=50, ge=1)
    seed: int = 0
    joint_training: bool = True
    chunk_jitter: bool = True
    chunk: ChunkConfig = ChunkConfig()
    frontend_policy: ContextPolicy = ContextPolicy.frontend_default()
    backend_policy: ContextPolicy = ContextPolicy.backend_default()
    average_k: int = Field(default=5, ge=1)
    average_mode: Literal["best", "last"] = "best"

    @model_validator(mode="after")
    def check_policies(self) -> TrainingConfig:
        if self.frontend_policy.stage is not Stage.FRONTEND:
            raise ValueError("frontend_policy must have stage 'frontend'")
        if self.backend_policy.stage is not Stage.BACKEND:
            raise ValueError("backend_policy must have stage 'backend'")
        if self.frontend_policy.probabilities.get(ContextMode.SIMULATED, 0.0) > 0:
            raise ValueError("the front-end never uses simulated context")
        return self


class StreamConfig(BaseModel):
    """ Streaming recognition geometry; one right-context mode per run. """
    model_config = ConfigDict(frozen=True)

    chunk_ms: int = Field(default=400, gt=0)
    left_ctx_ms: int = Field(default=800, ge=0)
    right_ctx_mode: ContextMode = ContextMode.NONE
    right_ctx_ms: int = Field(default=400, ge=0)
    hop_ms: int = Field(default=10, gt=0)

    @model_validator(mode="after")
    def check_multiples(self) -> StreamConfig:
        for name in ("chunk_ms", "left_ctx_ms", "right_ctx_ms"):
            if getattr(self, name) % self.hop_ms:
                raise ValueError(f"{name} must be a multiple of hop_ms={self.hop_ms}")
        return self

    @property
    def chunk_frames(self) -> int:
        return self.chunk_ms // self.hop_ms

    @property
    def left_frames(self) -> int:
        return self.left_ctx_ms // self.hop_ms

    @property
    def right_frames(self) -> int:
        return self.right_ctx_ms // self.hop_ms

    @property
    def algorithmic_latency_ms(self) -> float:
        extra = self.right_ctx_ms if self.right_ctx_mode is ContextMode.REAL else 0
        return float(self.chunk_ms + extra)


class SceneConfig(BaseModel):
    """ Synthetic dataset settings for ``simulate``.

    The default array is a 4-microphone uniform linear array with 5 cm spacing; noise is a
    white point source from a different azimuth plus spatially uncorrelated white noise.
    """
    num_utterances: int = Field(default=200, ge=1)
    seed: int = 0
    num_mics: int = Field(default=4, ge=1)
    mic_spacing_m: float = Field(default=0.05, gt=0)
    speed_of_sound: float = Field(default=343.0, gt=0)
    snr_db: tuple[float, float] = (0.0, 0.0)
    directional_noise: bool = True
    uncorrelated_noise_db: float = -20.0
    min_words: int = Field(default=2, ge=1)
    max_words: int = Field(default=5, ge=1)
    min_separation_deg: float = Field(default=45.0, ge=0, le=180)
    reference_channel: int = Field(default=0, ge=0)


class RunConfig(BaseModel):
    """ Everything a subcommand may read; resolved from flags, file and defaults. """
    seed: int = 0
    model: ModelConfig = ModelConfig()
    training: TrainingConfig = TrainingConfig()
    stream: StreamConfig = StreamConfig()
    scene: SceneConfig = SceneConfig()


def load_config(path: str | Path | None = None, name: str = "default_config.json") -> RunConfig:
    """ Reads a run configuration.

    Args:
        path: JSON file to read. If None the packaged file ``name`` is used.
        name: Packaged configuration, ``default_config.json`` or ``toy_config.json``.

    Returns:
        RunConfig: the validated configuration.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        pydantic.ValidationError: If the document does not match the schema.
    """
    if path is None:
        text = resources.files(data).joinpath(name).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return RunConfig.model_validate_json(text)


def merge_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """ Applies dotted-key overrides, e.g. ``{"training.alpha": 0.0}``, and re-validates. """
    document = config.model_dump(mode="json")
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = document
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        node[leaf] = value
    return RunConfig.model_validate(document)


def dump_config(config: RunConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True)
