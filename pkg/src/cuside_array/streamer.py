""" Chunk-by-chunk streaming recognition, latency accounting and streaming enhancement.

Audio arrives in blocks of any size. STFT frames are computed one at a time as soon as their
samples are complete, and a chunk is decoded once every frame it needs has arrived: the core
for ``none`` and ``simulated`` right context, the core plus the right context for ``real``.
Decoding output is the CTC collapse of the concatenated per-frame argmax, so the transcript of a
stream never depends on how the audio was split into blocks.
"""
from __future__ import annotations

import logging
import time

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy import fft

from cuside_array.asr import TokenSequence, best_path, collapse
from cuside_array.beamformer import (apply_beamformer, enhance_chunk, estimate_scm, frame_major,
                                     mask_features, mask_net_forward, mvdr_weights)
from cuside_array.chunking import (ChunkDescriptor, descriptor_at, extract_chunk, plan_chunks,
                                   shift_descriptor)
from cuside_array.config import ContextMode, ModelConfig, StreamConfig
from cuside_array.cuside import process_chunk, simulate_future, stream_modes
from cuside_array.errors import LatencyError, ShapeError
from cuside_array.neural import ModelParams, Tensor
from cuside_array.scene import oracle_irm
from cuside_array.signal import MultiChannelSpectrogram, Waveform, frame_count, istft, stft

logger = logging.getLogger(__name__)


class StreamEvent(BaseModel):
    """ What one decoded chunk emitted.

    Attributes:
        chunk_index: Position of the chunk in the stream.
        emitted_tokens: Tokens appended to the transcript by this chunk.
        algorithmic_latency_ms: Chunk span plus real right context, if any.
        compute_ms: Wall time spent decoding the chunk.
        sim_compute_ms: Part of ``compute_ms`` spent in the simulator.
        core_frames: Frames in the chunk's core.
    """
    chunk_index: int
    emitted_tokens: TokenSequence
    algorithmic_latency_ms: float
    compute_ms: float
    sim_compute_ms: float = 0.0
    core_frames: int = 0

    def log_record(self) -> dict:
        return {"chunk": self.chunk_index, "tokens": self.emitted_tokens.ids,
                "alg_latency_ms": self.algorithmic_latency_ms, "compute_ms": self.compute_ms,
                "sim_compute_ms": self.sim_compute_ms}


class StreamResult(BaseModel):
    events: list[StreamEvent]
    transcript: TokenSequence
    frame_path: list[int] = []
    short_audio: bool = False


class StreamingRecognizer:
    """ Incremental decoder for one utterance.

    Only the frames still needed as left context, the current chunk and its lookahead are kept,
    plus the samples of the next unfinished frame; memory stays bounded however long the stream.

    Args:
        params: Trained parameters.
        model_cfg: Architecture of ``params``.
        cfg: Chunk geometry and right-context mode, fixed for the whole stream.
    """

    def __init__(self, params: ModelParams, model_cfg: ModelConfig, cfg: StreamConfig):
        if cfg.hop_ms * model_cfg.stft.sample_rate != 1000 * model_cfg.stft.hop:
            raise ShapeError(f"hop_ms={cfg.hop_ms} does not match the STFT hop of "
                             f"{model_cfg.stft.hop} samples")
        self.params = params
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.frontend_mode, self.backend_mode = stream_modes(cfg.right_ctx_mode)
        self.lookahead = cfg.right_frames if cfg.right_ctx_mode is ContextMode.REAL else 0
        self._window = model_cfg.stft.analysis_window()
        self._samples: np.ndarray | None = None
        self._sample_base = 0
        self._total_samples = 0
        self._frames: list[np.ndarray] = []
        self._frame_base = 0
        self._next_chunk = 0
        self._sim_state: list[Tensor] | None = None
        self._last_symbol: int | None = None
        self._finished = False
        self.events: list[StreamEvent] = []
        self.tokens: list[int] = []
        self.frame_path: list[int] = []
        self.short_audio = False

    @property
    def num_samples(self) -> int:
        """ Samples received so far, including any end-of-stream padding. """
        return self._total_samples

    @property
    def num_frames(self) -> int:
        """ STFT frames computed so far. """
        return self._frame_base + len(self._frames)

    @property
    def buffered_frames(self) -> int:
        return len(self._frames)

    @property
    def buffered_samples(self) -> int:
        return 0 if self._samples is None else self._samples.shape[1]

    def accept(self, block: np.ndarray) -> list[StreamEvent]:
        """ Adds a (mics, samples) block of audio and decodes every chunk that became ready. """
        if self._finished:
            raise RuntimeError("stream already finished")
        block = np.atleast_2d(np.asarray(block, dtype=np.float64))
        if self._samples is None:
            self._samples = block.copy()
        elif block.shape[0] != self._samples.shape[0]:
            raise ShapeError(f"block has {block.shape[0]} channels, stream has "
                             f"{self._samples.shape[0]}")
        else:
            self._samples = np.concatenate([self._samples, block], axis=1)
        self._total_samples += block.shape[1]
        self._extend_frames(final=False)
        emitted = []
        chunk = self.cfg.chunk_frames
        while (self._next_chunk + 1) * chunk + self.lookahead <= self.num_frames:
            d = descriptor_at(self._next_chunk, chunk, self.cfg.left_frames,
                              self.cfg.right_frames)
            emitted.append(self._decode(d))
        return emitted

    def finish(self) -> list[StreamEvent]:
        """ Flushes the end of the stream; the last chunk may be short. """
        if self._finished:
            return []
        stft_cfg = self.model_cfg.stft
        chunk_samples = self.cfg.chunk_frames * stft_cfg.hop
        if self.num_samples < chunk_samples:
            self.short_audio = True
            logger.warning("stream of %d samples is shorter than one chunk; decoded as a single "
                           "padded chunk", self.num_samples)
        if self.num_samples < stft_cfg.window_size:
            channels = 1 if self._samples is None else self._samples.shape[0]
            pad = np.zeros((channels, stft_cfg.window_size - self.num_samples))
            self._samples = pad if self._samples is None else np.concatenate(
                [self._samples, pad], axis=1)
            self._total_samples += pad.shape[1]
        self._extend_frames(final=True)
        self._finished = True
        total = self.num_frames
        emitted = []
        while self._next_chunk * self.cfg.chunk_frames < total:
            d = descriptor_at(self._next_chunk, self.cfg.chunk_frames, self.cfg.left_frames,
                              self.cfg.right_frames, total)
            emitted.append(self._decode(d))
        return emitted

    @property
    def transcript(self) -> TokenSequence:
        return TokenSequence(ids=list(self.tokens))

    def _extend_frames(self, final: bool) -> None:
        stft_cfg = self.model_cfg.stft
        n = self.num_samples
        if final:
            count = frame_count(n, stft_cfg)
        else:
            count = 0 if n < stft_cfg.window_size else \
                (n - stft_cfg.window_size) // stft_cfg.hop + 1
        for t in range(self.num_frames, count):
            start = t * stft_cfg.hop - self._sample_base
            segment = self._samples[:, start:start + stft_cfg.window_size]
            if segment.shape[1] < stft_cfg.window_size:
                segment = np.pad(segment, ((0, 0), (0, stft_cfg.window_size - segment.shape[1])))
            self._frames.append(fft.rfft(segment * self._window, n=stft_cfg.fft_size, axis=-1))
        drop = min(self.num_frames * stft_cfg.hop - self._sample_base, self.buffered_samples)
        if drop > 0:
            self._samples = self._samples[:, drop:]
            self._sample_base += drop

    def _decode(self, d: ChunkDescriptor) -> StreamEvent:
        started = time.perf_counter()
        spec = np.stack(self._frames, axis=0)
        local = shift_descriptor(d, -self._frame_base)
        result, state = process_chunk(spec, local, self.frontend_mode, self.backend_mode,
                                      self.params, self.model_cfg, self._sim_state)
        if state is not None:
            self._sim_state = [s.detach() for s in state]
        path = best_path(result.core_logits().value)
        new_tokens = collapse(path, self._last_symbol)
        if len(path):
            self._last_symbol = int(path[-1])
        self.frame_path.extend(int(p) for p in path)
        self.tokens.extend(new_tokens)
        event = StreamEvent(chunk_index=d.index, emitted_tokens=TokenSequence(ids=new_tokens),
                            algorithmic_latency_ms=self.cfg.algorithmic_latency_ms,
                            compute_ms=1000.0 * (time.perf_counter() - started),
                            sim_compute_ms=result.sim_ms, core_frames=d.core_len)
        self.events.append(event)
        self._next_chunk += 1
        self._release_frames()
        return event

    def _release_frames(self) -> None:
        """ Forgets frames older than the next chunk's left context. """
        keep_from = max(0, self._next_chunk * self.cfg.chunk_frames - self.cfg.left_frames)
        drop = min(keep_from - self._frame_base, len(self._frames))
        if drop > 0:
            del self._frames[:drop]
            self._frame_base += drop


def stream_decode(mixture: Waveform, params: ModelParams, cfg: StreamConfig,
                  model_cfg: ModelConfig, block_samples: int | None = None) -> StreamResult:
    """ Streams a whole recording through ``StreamingRecognizer``.

    Args:
        mixture: Multi-channel recording.
        params: Trained parameters.
        cfg: Streaming configuration.
        model_cfg: Architecture of ``params``.
        block_samples: Arrival block size; defaults to one chunk of audio.

    Returns:
        StreamResult: events in chunk order and the final transcript.
    """
    recognizer = StreamingRecognizer(params, model_cfg, cfg)
    block = block_samples or cfg.chunk_frames * model_cfg.stft.hop
    for start in range(0, mixture.num_samples, block):
        recognizer.accept(mixture.samples[:, start:start + block])
    recognizer.finish()
    return StreamResult(events=recognizer.events, transcript=recognizer.transcript,
                        frame_path=recognizer.frame_path, short_audio=recognizer.short_audio)


class LatencyReport(BaseModel):
    """ Aggregate latency of a stream. """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mode: ContextMode
    num_chunks: int
    algorithmic_ms: float
    algorithmic_p95_ms: float
    compute_mean_ms: float
    compute_p95_ms: float
    sim_compute_mean_ms: float
    per_chunk: pd.DataFrame

    def summary(self) -> str:
        extra = (f" + {self.sim_compute_mean_ms:.1f} ms simulation"
                 if self.mode is ContextMode.SIMULATED else "")
        return (f"{self.mode.value}: {self.algorithmic_ms:.0f} ms algorithmic{extra}; "
                f"compute {self.compute_mean_ms:.1f} ms/chunk (p95 {self.compute_p95_ms:.1f})")


def latency_report(events: list[StreamEvent], cfg: StreamConfig) -> LatencyReport:
    """ Per-chunk and aggregate latency, checked against the algorithmic formula.

    Raises:
        LatencyError: If there are no events or one violates
            ``chunk_ms + (right_ctx_ms if real else 0)``.
    """
    if not events:
        raise LatencyError("latency report needs at least one event")
    expected = cfg.algorithmic_latency_ms
    for event in events:
        if event.algorithmic_latency_ms != expected:
            raise LatencyError(f"chunk {event.chunk_index}: {event.algorithmic_latency_ms} ms, "
                               f"expected {expected} ms")
    frame = pd.DataFrame([{"chunk": e.chunk_index, "tokens": len(e.emitted_tokens),
                           "algorithmic_ms": e.algorithmic_latency_ms,
                           "compute_ms": e.compute_ms, "sim_compute_ms": e.sim_compute_ms}
                          for e in events])
    return LatencyReport(
        mode=cfg.right_ctx_mode, num_chunks=len(events),
        algorithmic_ms=float(frame["algorithmic_ms"].mean()),
        algorithmic_p95_ms=float(frame["algorithmic_ms"].quantile(0.95)),
        compute_mean_ms=float(frame["compute_ms"].mean()),
        compute_p95_ms=float(frame["compute_ms"].quantile(0.95)),
        sim_compute_mean_ms=float(frame["sim_compute_ms"].mean()), per_chunk=frame)


def enhance_stream(mixture: Waveform, params: ModelParams | None, model_cfg: ModelConfig,
                   cfg: StreamConfig,
                   oracle: tuple[Waveform, Waveform] | None = None) -> Waveform:
    """ Front-end only: chunked MVDR, core frames stitched, then inverse STFT.

    Args:
        mixture: Multi-channel recording.
        params: Parameters of the mask network; may be None with ``oracle``.
        model_cfg: Architecture.
        cfg: Chunk geometry; real right context widens the covariance window.
        oracle: (speech image, noise image) to derive ideal ratio masks instead of the network.

    Returns:
        Waveform: single-channel enhanced signal, same length as the mixture.
    """
    stft_cfg = model_cfg.stft
    spec = stft(mixture, stft_cfg)
    frames = frame_major(spec)
    masks = None
    if oracle is not None:
        ref = model_cfg.mvdr.reference_channel
        speech_mask, noise_mask = oracle_irm(stft(oracle[0], stft_cfg), stft(oracle[1], stft_cfg),
                                             ref)
        masks = (speech_mask.values, noise_mask.values)
    plan = plan_chunks(frames.shape[0], cfg.chunk_frames, cfg.left_frames, cfg.right_frames)
    use_right = cfg.right_ctx_mode is ContextMode.REAL
    cores = []
    fallback = 0
    for d in plan:
        fe_d = d if use_right else d.without_right_context()
        chunk_masks = None if masks is None else tuple(extract_chunk(m, fe_d) for m in masks)
        out = enhance_chunk(extract_chunk(frames, fe_d), params, model_cfg,
                            valid=fe_d.valid_mask(), core=fe_d.core_slice, masks=chunk_masks)
        cores.append(out.enhanced[out.core])
        fallback += out.fallback_bins
    if fallback:
        logger.warning("%d chunk bins used unweighted covariance", fallback)
    enhanced = np.concatenate(cores, axis=0)[None]
    out_spec = MultiChannelSpectrogram(data=enhanced, config=stft_cfg,
                                       num_samples=mixture.num_samples)
    return istft(out_spec, length=mixture.num_samples)


def bench_stages(params: ModelParams, model_cfg: ModelConfig, cfg: StreamConfig,
                 mixture: Waveform, repeats: int = 5) -> pd.DataFrame:
    """ Median wall time per pipeline stage for one chunk of ``mixture``.

    Stages: STFT of the chunk's audio, mask network, covariances plus MVDR, filtering, and the
    simulator when the model has one.
    """
    stft_cfg = model_cfg.stft
    spec = frame_major(stft(mixture, stft_cfg))
    plan = plan_chunks(spec.shape[0], cfg.chunk_frames, cfg.left_frames, cfg.right_frames)
    d = plan[min(1, len(plan) - 1)].without_right_context()
    chunk = extract_chunk(spec, d)
    ref = model_cfg.mvdr.reference_channel
    span = chunk.shape[0] * stft_cfg.hop + stft_cfg.window_size
    audio = Waveform(samples=np.pad(mixture.samples, ((0, 0), (0, span)))[:, :span],
                     sample_rate=mixture.sample_rate)
    timings: dict[str, list[float]] = {}

    def timed(name, fn):
        started = time.perf_counter()
        value = fn()
        timings.setdefault(name, []).append(1000.0 * (time.perf_counter() - started))
        return value

    for _ in range(repeats):
        timed("stft", lambda: stft(audio, stft_cfg))
        if model_cfg.frontend == "mvdr":
            speech, noise = timed("mask_net", lambda: mask_net_forward(
                mask_features(chunk[:, ref, :], params), params, model_cfg.mask_net))
            weights = timed("mvdr", lambda: mvdr_weights(
                estimate_scm(chunk, speech.value, d.valid_mask()),
                estimate_scm(chunk, noise.value, d.valid_mask()), model_cfg.mvdr))
            timed("filter", lambda: apply_beamformer(weights, chunk))
        core_fbank = np.zeros((d.core_len, model_cfg.fbank.mel_bins))
        timed("simulator", lambda: simulate_future(core_fbank, None, params, model_cfg.sim_net))
        timed("chunk_total", lambda: process_chunk(spec, d, ContextMode.NONE,
                                                   ContextMode.SIMULATED, params, model_cfg))
    return pd.DataFrame([{"stage": name, "median_ms": float(np.median(values)),
                          "min_ms": float(np.min(values)), "runs": len(values)}
                         for name, values in timings.items()])
