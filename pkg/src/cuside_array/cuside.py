""" Future-context simulation and joint whole-utterance / streaming training.

One parameter set serves three branches per step:

* whole utterance: MVDR over the full recording, encoder, CTC (``l_utt``);
* chunked: jittered context-sensitive chunks with a drawn right-context mode per stage, CTC over
  the concatenated core logits (``l_chunk``);
* simulation: a causal GRU predicts the next right-context log-Fbank frames of every chunk
  from the chunks seen so far, scored with L1 against the real ones (``l_simu``).

``l_total = l_utt + l_chunk + alpha * l_simu``.
"""
from __future__ import annotations

import functools
import json
import logging
import time
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from cuside_array.asr import ctc_loss_op, encoder_forward, init_encoder
from cuside_array.beamformer import (MvdrWeights, apply_beamformer, beamform_power,
                                     init_mask_net, mask_features, mask_net_forward,
                                     one_hot_weights, reference_power)
from cuside_array.chunking import (ChunkDescriptor, ChunkPlan, draw_context_mode, extract_chunk,
                                   jitter_chunk_size, plan_chunks)
from cuside_array.config import ContextMode, ModelConfig, SimNetConfig, TrainingConfig
from cuside_array.corpus import Utterance
from cuside_array.errors import CheckpointError, CtcInfeasibleError, ShapeError
from cuside_array.neural import (AdamState, ModelParams, Tensor, adam_step, add_const,
                                 add_scalars, architecture_hash, average_params, clip_grad_norm,
                                 concat, gru_forward, init_gru, init_linear, l1_loss, linear,
                                 load_checkpoint, log_mel, mul_const, normalize, reshape, rows,
                                 save_checkpoint)
from cuside_array.signal import mel_filterbank, power_to_logfbank

logger = logging.getLogger(__name__)


@functools.lru_cache(maxsize=8)
def filterbank(num_bins: int, mel_bins: int, sample_rate: int) -> np.ndarray:
    fb = mel_filterbank(num_bins, mel_bins, sample_rate)
    fb.setflags(write=False)
    return fb


def model_filterbank(cfg: ModelConfig) -> np.ndarray:
    return filterbank(cfg.stft.num_bins, cfg.fbank.mel_bins, cfg.stft.sample_rate)


def init_sim_net(params: ModelParams, cfg: SimNetConfig, mel_bins: int,
                 rng: np.random.Generator) -> None:
    d_in = mel_bins
    for layer in range(cfg.layers):
        init_gru(params, f"sim.l{layer}", d_in, cfg.hidden, rng)
        d_in = cfg.hidden
    init_linear(params, "sim.head", cfg.hidden, cfg.right_frames * mel_bins, rng)


def init_model_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """ Fresh parameters for the whole model, tagged with the architecture hash. """
    rng = np.random.default_rng(seed)
    params = ModelParams(metadata={"model": cfg.model_dump(mode="json")})
    if cfg.frontend == "mvdr":
        init_mask_net(params, cfg.mask_net, cfg.stft.num_bins, rng)
    init_encoder(params, cfg.encoder, cfg.fbank.mel_bins, cfg.vocab_size, rng)
    init_sim_net(params, cfg.sim_net, cfg.fbank.mel_bins, rng)
    params.arch_hash = architecture_hash(cfg.model_dump_json(), params.shapes())
    return params


def model_config_of(params: ModelParams) -> ModelConfig:
    """ Architecture stored in a checkpoint's metadata.

    Raises:
        CheckpointError: If the parameters carry no model configuration.
    """
    if "model" not in params.metadata:
        raise CheckpointError("checkpoint has no model configuration")
    return ModelConfig.model_validate(params.metadata["model"])


def initial_sim_state(cfg: SimNetConfig) -> list[Tensor]:
    return [Tensor(np.zeros(cfg.hidden)) for _ in range(cfg.layers)]


def simulate_future(chunk_fbank: Tensor | np.ndarray, h_in: list[Tensor] | None,
                    params: ModelParams, cfg: SimNetConfig) -> tuple[Tensor, list[Tensor]]:
    """ Predicts the log-Fbank frames that follow a chunk.

    The GRU stack consumes the chunk's frames in order, starting from the state left by the
    previous chunk, and the head maps the top layer's final state to ``cfg.right_frames``
    frames.

    Args:
        chunk_fbank: (frames, mel_bins) core frames of the current chunk.
        h_in: State per layer from the previous chunk, or None at the start of an utterance.
        params: Parameters holding ``sim.*`` and the encoder input statistics.
        cfg: Simulator sizes.

    Returns:
        tuple: (simulated frames (right_frames, mel_bins), state per layer).

    Raises:
        ShapeError: If the input width or the state sizes are wrong.
    """
    x = chunk_fbank if isinstance(chunk_fbank, Tensor) else Tensor(chunk_fbank)
    mean_ = params["enc.input.mean"].value
    std = params["enc.input.std"].value
    if len(x.shape) != 2 or x.shape[1] != mean_.shape[0] or x.shape[0] == 0:
        raise ShapeError(f"simulator expects (frames>0, {mean_.shape[0]}), got {x.shape}")
    states = initial_sim_state(cfg) if h_in is None else h_in
    if len(states) != cfg.layers:
        raise ShapeError(f"{len(states)} state vectors for {cfg.layers} layers")
    h = normalize(x, mean_, std)
    new_states = []
    for layer in range(cfg.layers):
        h, last = gru_forward(h, states[layer], params, f"sim.l{layer}")
        new_states.append(last)
    top = reshape(new_states[-1], (1, cfg.hidden))
    out = reshape(linear(top, params["sim.head.w"], params["sim.head.b"]),
                  (cfg.right_frames, mean_.shape[0]))
    out = add_const(mul_const(out, np.broadcast_to(std, out.shape)), mean_)
    return out, new_states


def simulation_loss(sim_frames: Tensor, true_future: np.ndarray,
                    frame_mask: np.ndarray | None = None) -> Tensor:
    """ Mean absolute error over the unmasked future frames; zero when all are masked. """
    mask = None if frame_mask is None else np.asarray(frame_mask, bool)[:, None]
    return l1_loss(sim_frames, true_future, mask)


def total_loss(l_utt, l_chunk, l_simu, alpha: float):
    """ ``l_utt + l_chunk + alpha * l_simu`` for floats or scalar tensors. """
    terms = [l_utt, l_chunk, l_simu]
    if not any(isinstance(t, Tensor) for t in terms):
        return float(l_utt) + float(l_chunk) + alpha * float(l_simu)
    wrapped = [t if isinstance(t, Tensor) else Tensor(np.asarray(float(t))) for t in terms]
    return add_scalars(list(zip(wrapped, (1.0, 1.0, alpha))))


def stream_modes(mode: ContextMode) -> tuple[ContextMode, ContextMode]:
    """ (front-end, back-end) modes for a streaming run; simulation is back-end only. """
    if mode is ContextMode.SIMULATED:
        return ContextMode.NONE, ContextMode.SIMULATED
    return mode, mode


class ChunkResult(BaseModel):
    """ Output of one context-sensitive chunk.

    Attributes:
        logits: Encoder output over every frame the encoder saw.
        core: Positions of the core frames in ``logits``.
        weights: Front-end filter of this chunk.
        sim: Simulated right-context frames, when the simulator ran.
        target: Real enhanced next frames, when requested.
        target_mask: True for target rows inside the utterance.
        sim_ms: Wall time spent in the simulator.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    logits: Tensor
    core: slice
    weights: MvdrWeights
    sim: Tensor | None = None
    target: np.ndarray | None = None
    target_mask: np.ndarray | None = None
    sim_ms: float = 0.0

    def core_logits(self) -> Tensor:
        return rows(self.logits, self.core.start, self.core.stop)


def frontend_fbank(stats_spec: np.ndarray, stats_valid: np.ndarray, apply_spec: np.ndarray,
                   apply_valid: np.ndarray, params: ModelParams, cfg: ModelConfig,
                   train_mode: bool = False,
                   rng: np.random.Generator | None = None) -> tuple[Tensor, MvdrWeights]:
    """ Enhanced log-Fbank of ``apply_spec`` under a filter estimated on ``stats_spec``.

    Padded rows of the output are zero.
    """
    ref = cfg.mvdr.reference_channel
    if cfg.frontend == "reference":
        power = reference_power(apply_spec, ref)
        weights = one_hot_weights(apply_spec.shape[2], apply_spec.shape[1], ref)
    else:
        speech, noise = mask_net_forward(mask_features(stats_spec[:, ref, :], params), params,
                                         cfg.mask_net, train_mode, rng)
        power, weights = beamform_power(stats_spec, speech, noise, apply_spec, cfg.mvdr,
                                        stats_valid)
    fbank = log_mel(power, model_filterbank(cfg), cfg.fbank.floor)
    keep = np.broadcast_to(np.asarray(apply_valid, np.float64)[:, None], fbank.shape)
    return mul_const(fbank, keep), weights


def enhanced_fbank(weights: MvdrWeights, frames: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """ Log-Fbank of frames filtered with fixed weights, outside the graph. """
    power = np.abs(apply_beamformer(weights, frames)) ** 2
    return power_to_logfbank(power, model_filterbank(cfg), cfg.fbank.floor)


def simulation_target(spec: np.ndarray, d: ChunkDescriptor, weights: MvdrWeights,
                      cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """ The real next ``right_frames`` frames after the core, enhanced by the chunk's filter.

    Returns:
        tuple: (target (right_frames, mel_bins), row mask); rows past the utterance are zero.
    """
    count = cfg.sim_net.right_frames
    stop = min(spec.shape[0], d.core_end + count)
    target = np.zeros((count, cfg.fbank.mel_bins))
    mask = np.zeros(count, dtype=bool)
    if stop > d.core_end:
        target[:stop - d.core_end] = enhanced_fbank(weights, spec[d.core_end:stop], cfg)
        mask[:stop - d.core_end] = True
    return target, mask


def process_chunk(spec: np.ndarray, d: ChunkDescriptor, frontend_mode: ContextMode,
                  backend_mode: ContextMode, params: ModelParams, cfg: ModelConfig,
                  sim_state: list[Tensor] | None = None, train_mode: bool = False,
                  rng: np.random.Generator | None = None,
                  with_target: bool = False) -> tuple[ChunkResult, list[Tensor] | None]:
    """ Front-end, optional simulation and encoder for one chunk.

    The front-end mode decides which frames feed the masks and covariances. The back-end mode
    decides what the encoder sees after the core: nothing, the real future frames filtered
    with this chunk's weights, or the simulator's frames.

    Args:
        spec: Frame-major (frames, mics, bins) recording, at least up to ``d.right_ctx_end``.
        d: Chunk geometry with right context.
        frontend_mode: NONE or REAL.
        backend_mode: NONE, REAL or SIMULATED.
        sim_state: Simulator state from the previous chunk.
        with_target: Also build the simulation target, running the simulator if needed.

    Returns:
        tuple: (chunk result, simulator state after this chunk).
    """
    fe_d = d if frontend_mode is ContextMode.REAL else d.without_right_context()
    be_d = d if backend_mode is ContextMode.REAL else d.without_right_context()
    fbank, weights = frontend_fbank(extract_chunk(spec, fe_d), fe_d.valid_mask(),
                                    extract_chunk(spec, be_d), be_d.valid_mask(), params, cfg,
                                    train_mode, rng)
    core = be_d.core_slice
    sim = target = target_mask = None
    sim_ms = 0.0
    if backend_mode is ContextMode.SIMULATED or with_target:
        started = time.perf_counter()
        core_fbank = rows(fbank, core.start, core.stop).detach()
        sim, sim_state = simulate_future(core_fbank, sim_state, params, cfg.sim_net)
        sim_ms = 1000.0 * (time.perf_counter() - started)
    if backend_mode is ContextMode.SIMULATED:
        fbank = concat([fbank, sim], axis=0)
    if with_target:
        target, target_mask = simulation_target(spec, d, weights, cfg)
    logits = encoder_forward(fbank, params, cfg.encoder, train_mode, rng)
    return ChunkResult(logits=logits, core=core, weights=weights, sim=sim, target=target,
                       target_mask=target_mask, sim_ms=sim_ms), sim_state


class ChunkedOutput(BaseModel):
    """ Chunk-branch output for one utterance. """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    core_logits: Tensor
    sim_losses: list[Tensor] = []
    masked_targets: int = 0
    silent_bins: int = 0


def chunked_forward(spec: np.ndarray, plan: ChunkPlan, frontend_mode: ContextMode,
                    backend_mode: ContextMode, params: ModelParams, cfg: ModelConfig,
                    train_mode: bool = False, rng: np.random.Generator | None = None,
                    with_targets: bool = False) -> ChunkedOutput:
    """ Runs every chunk of ``plan`` in order, threading the simulator state. """
    state = None
    cores, sim_losses = [], []
    masked = silent = 0
    for d in plan:
        result, state = process_chunk(spec, d, frontend_mode, backend_mode, params, cfg, state,
                                      train_mode, rng, with_targets)
        cores.append(result.core_logits())
        silent += result.weights.silent_bins
        if with_targets:
            if result.target_mask.any():
                sim_losses.append(simulation_loss(result.sim, result.target, result.target_mask))
            else:
                masked += 1
    return ChunkedOutput(core_logits=concat(cores, axis=0), sim_losses=sim_losses,
                         masked_targets=masked, silent_bins=silent)


def whole_utterance_logits(spec: np.ndarray, params: ModelParams, cfg: ModelConfig,
                           train_mode: bool = False,
                           rng: np.random.Generator | None = None) -> Tensor:
    """ Non-streaming path: one filter for the whole recording, encoder over all frames. """
    valid = np.ones(spec.shape[0], dtype=bool)
    fbank, _ = frontend_fbank(spec, valid, spec, valid, params, cfg, train_mode, rng)
    return encoder_forward(fbank, params, cfg.encoder, train_mode, rng)


class StepMetrics(BaseModel):
    """ One line of ``metrics.jsonl``. """
    step: int
    l_utt: float
    l_chunk: float
    l_simu: float
    l_total: float
    lr: float
    grad_norm: float
    alpha: float
    modes: list[str] = []
    skipped_ctc: int = 0
    masked_sim_targets: int = 0


def _mean(losses: list[Tensor]) -> Tensor | float:
    if not losses:
        return 0.0
    return add_scalars([(loss, 1.0 / len(losses)) for loss in losses])


def _value(x) -> float:
    return float(x.value) if isinstance(x, Tensor) else float(x)


def batch_losses(batch: list[Utterance], params: ModelParams, model_cfg: ModelConfig,
                 cfg: TrainingConfig, rng: np.random.Generator | None,
                 train_mode: bool = True, fixed_modes: tuple[ContextMode, ContextMode] | None = None
                 ) -> tuple[Tensor | float, Tensor | float, Tensor | float, dict]:
    """ The three branch losses over a batch, averaged per branch.

    ``fixed_modes`` replaces the mode draws and chunk jitter (validation).

    Returns:
        tuple: (l_utt, l_chunk, l_simu, counters).
    """
    utt_losses, chunk_losses, simu_losses = [], [], []
    counters = {"skipped_ctc": 0, "masked_sim_targets": 0, "modes": []}
    chunk = cfg.chunk
    for utt in batch:
        try:
            logits = whole_utterance_logits(utt.spec, params, model_cfg, train_mode, rng)
            utt_losses.append(ctc_loss_op(logits, utt.labels))
        except CtcInfeasibleError as err:
            counters["skipped_ctc"] += 1
            logger.debug("%s: whole-utterance CTC skipped (%s)", utt.id, err)
        if not cfg.joint_training:
            continue
        if fixed_modes is None:
            fe_mode = draw_context_mode(cfg.frontend_policy, rng)
            be_mode = draw_context_mode(cfg.backend_policy, rng)
            chunk_frames = chunk.frames(chunk.chunk_ms)
            if cfg.chunk_jitter:
                chunk_frames = jitter_chunk_size(chunk_frames, chunk.frames(chunk.jitter_low_ms),
                                                 chunk.frames(chunk.jitter_high_ms), rng)
        else:
            fe_mode, be_mode = fixed_modes
            chunk_frames = chunk.frames(chunk.chunk_ms)
        counters["modes"].append(f"{fe_mode.value}/{be_mode.value}/{chunk_frames}")
        plan = plan_chunks(utt.num_frames, chunk_frames, chunk.frames(chunk.left_ms),
                           chunk.frames(chunk.right_ms))
        out = chunked_forward(utt.spec, plan, fe_mode, be_mode, params, model_cfg, train_mode,
                              rng, with_targets=cfg.alpha > 0)
        simu_losses.extend(out.sim_losses)
        counters["masked_sim_targets"] += out.masked_targets
        try:
            chunk_losses.append(ctc_loss_op(out.core_logits, utt.labels))
        except CtcInfeasibleError as err:
            counters["skipped_ctc"] += 1
            logger.debug("%s: chunk CTC skipped (%s)", utt.id, err)
    return _mean(utt_losses), _mean(chunk_losses), _mean(simu_losses), counters


def train_step(batch: list[Utterance], params: ModelParams, model_cfg: ModelConfig,
               cfg: TrainingConfig, adam: AdamState, rng: np.random.Generator, lr: float,
               step: int = 0) -> StepMetrics:
    """ One optimisation step over a batch: three branches, one backward pass, clip, Adam.

    Infeasible CTC instances are skipped and counted; a batch with no usable loss leaves the
    parameters untouched.
    """
    params.zero_grad()
    l_utt, l_chunk, l_simu, counters = batch_losses(batch, params, model_cfg, cfg, rng)
    loss = total_loss(l_utt, l_chunk, l_simu, cfg.alpha)
    grad_norm = 0.0
    if isinstance(loss, Tensor) and loss.requires_grad:
        loss.backward()
        grads, grad_norm = clip_grad_norm(params.grads(), cfg.clip_norm)
        adam_step(params, grads, adam, lr)
    if counters["skipped_ctc"]:
        logger.warning("step %d: skipped %d infeasible CTC instances", step,
                       counters["skipped_ctc"])
    if counters["masked_sim_targets"]:
        logger.warning("step %d: %d chunks had no real future frames to simulate", step,
                       counters["masked_sim_targets"])
    return StepMetrics(step=step, l_utt=_value(l_utt), l_chunk=_value(l_chunk),
                       l_simu=_value(l_simu), l_total=_value(loss), lr=lr,
                       grad_norm=grad_norm, alpha=cfg.alpha, **counters)


class ValidationMetrics(BaseModel):
    """ One line of ``validation.jsonl``; step 0 is the untrained model. """
    step: int
    l_utt: float
    l_chunk: float
    l_simu: float
    l_total: float


def validation_metrics(utterances: list[Utterance], params: ModelParams, model_cfg: ModelConfig,
                       cfg: TrainingConfig, step: int = 0) -> ValidationMetrics:
    """ Deterministic branch losses: no dropout, fixed chunk size, no right context. """
    if not utterances:
        inf = float("inf")
        return ValidationMetrics(step=step, l_utt=inf, l_chunk=inf, l_simu=inf, l_total=inf)
    l_utt, l_chunk, l_simu, _ = batch_losses(
        utterances, params, model_cfg, cfg, None, train_mode=False,
        fixed_modes=(ContextMode.NONE, ContextMode.NONE))
    return ValidationMetrics(step=step, l_utt=_value(l_utt), l_chunk=_value(l_chunk),
                             l_simu=_value(l_simu),
                             l_total=_value(total_loss(l_utt, l_chunk, l_simu, cfg.alpha)))


def validation_loss(utterances: list[Utterance], params: ModelParams, model_cfg: ModelConfig,
                    cfg: TrainingConfig) -> float:
    return validation_metrics(utterances, params, model_cfg, cfg).l_total


class LrScheduler:
    """ Warm-up followed by decay on validation plateaus.

    ``warmup_plateau`` ramps linearly to the peak; ``noam`` ramps linearly and then decays with
    the inverse square root of the step. Either is multiplied by ``decay_factor`` each time the
    validation loss fails to improve for ``plateau_patience`` evaluations.
    """

    def __init__(self, cfg: TrainingConfig):
        self.cfg = cfg
        self.scale = 1.0
        self.best = float("inf")
        self.bad_evals = 0

    def lr(self, step: int) -> float:
        step = max(step, 1)
        warmup = self.cfg.warmup_steps
        if warmup == 0:
            shape = 1.0
        elif self.cfg.lr_schedule == "noam":
            shape = min(step / warmup, np.sqrt(warmup / step))
        else:
            shape = min(1.0, step / warmup)
        return float(self.cfg.peak_lr * shape * self.scale)

    def report(self, valid_loss: float) -> bool:
        """ Records a validation loss; returns True when the rate was just decayed. """
        if valid_loss < self.best:
            self.best = valid_loss
            self.bad_evals = 0
            return False
        self.bad_evals += 1
        if self.bad_evals >= self.cfg.plateau_patience:
            self.scale *= self.cfg.decay_factor
            self.bad_evals = 0
            logger.info("validation plateau: learning rate scale now %.3g", self.scale)
            return True
        return False

    @property
    def stopped(self) -> bool:
        return self.cfg.peak_lr * self.scale < self.cfg.min_lr

    def state(self) -> dict:
        return {"scale": self.scale, "best": self.best, "bad_evals": self.bad_evals}

    def load_state(self, state: dict) -> None:
        self.scale = float(state["scale"])
        self.best = float(state["best"])
        self.bad_evals = int(state["bad_evals"])


class CheckpointRecord(BaseModel):
    path: str
    step: int
    valid_loss: float


class TrainResult(BaseModel):
    steps: int
    best_valid_loss: float
    checkpoints: list[CheckpointRecord]
    averaged_path: str | None = None
    stopped_early: bool = False


def select_checkpoints(records: list[CheckpointRecord], k: int,
                       mode: str = "best") -> list[CheckpointRecord]:
    """ The ``k`` lowest-validation-loss checkpoints, or the ``k`` most recent ones. """
    if mode == "last":
        return sorted(records, key=lambda r: r.step)[-k:]
    return sorted(records, key=lambda r: (r.valid_loss, r.step))[:k]


def average_checkpoints(paths: list[str | Path], expected_hash: str | None = None) -> ModelParams:
    """ Elementwise mean of saved checkpoints.

    Raises:
        CheckpointError: If the list is empty or the architectures differ.
    """
    if not paths:
        raise CheckpointError("no checkpoints to average")
    models = [load_checkpoint(path, expected_hash) for path in paths]
    averaged = average_params(models)
    averaged.metadata["averaged_from"] = [Path(p).name for p in paths]
    return averaged


class Trainer:
    """ Runs ``train_step`` with batching, validation, plateau decay, checkpoints and averaging.

    Batch selection and every random draw of step ``n`` come from a generator seeded with
    ``(seed, n)``, so a resumed run repeats the steps an uninterrupted one would take.
    """

    def __init__(self, params: ModelParams, model_cfg: ModelConfig, cfg: TrainingConfig,
                 out_dir: str | Path | None = None):
        self.params = params
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.adam = AdamState(params, cfg.peak_lr, cfg.adam_betas, cfg.adam_eps)
        self.scheduler = LrScheduler(cfg)
        self.step = 0
        self.history: list[StepMetrics] = []
        self.validation: list[ValidationMetrics] = []
        self.records: list[CheckpointRecord] = []
        self._resumed_step: int | None = None
        self._started_logs: set[str] = set()

    def step_rng(self) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, self.step])

    def sample_batch(self, utterances: list[Utterance],
                     rng: np.random.Generator) -> list[Utterance]:
        size = min(self.cfg.batch_size, len(utterances))
        return [utterances[i] for i in sorted(rng.choice(len(utterances), size, replace=False))]

    def train_step(self, utterances: list[Utterance]) -> StepMetrics:
        self.step += 1
        rng = self.step_rng()
        batch = self.sample_batch(utterances, rng)
        metrics = train_step(batch, self.params, self.model_cfg, self.cfg, self.adam, rng,
                             self.scheduler.lr(self.step), self.step)
        self.history.append(metrics)
        self._append_log("metrics.jsonl", metrics)
        return metrics

    def _append_log(self, name: str, record: BaseModel) -> None:
        """ Appends one JSON line to a log in ``out_dir``.

        The first write of a fresh run truncates the file; after ``resume`` only lines up to the
        resumed step are kept.
        """
        if self.out_dir is None:
            return
        path = self.out_dir / name
        if name not in self._started_logs:
            self._started_logs.add(name)
            kept = []
            if self._resumed_step is not None and path.exists():
                kept = [line for line in path.read_text(encoding="utf-8").splitlines()
                        if line and json.loads(line)["step"] <= self._resumed_step]
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(record.model_dump_json() + "\n")

    def validate(self, valid: list[Utterance]) -> ValidationMetrics:
        """ Branch losses on ``valid`` at the current step, logged to ``validation.jsonl``. """
        metrics = validation_metrics(valid, self.params, self.model_cfg, self.cfg, self.step)
        self.validation.append(metrics)
        self._append_log("validation.jsonl", metrics)
        return metrics

    def evaluate(self, valid: list[Utterance]) -> CheckpointRecord | None:
        loss = self.validate(valid).l_total
        logger.info("step %d: validation loss %.4f", self.step, loss)
        self.scheduler.report(loss)
        if self.out_dir is None:
            return None
        snapshot = self.params.copy()
        snapshot.metadata.update({"step": self.step, "valid_loss": loss})
        path = save_checkpoint(snapshot,
                               self.out_dir / "checkpoints" / f"step{self.step:06d}.ckpt")
        record = CheckpointRecord(path=str(path), step=self.step, valid_loss=loss)
        self.records.append(record)
        self.save_state(self.out_dir / "trainer_state.ckpt")
        return record

    def fit(self, train: list[Utterance], valid: list[Utterance]) -> TrainResult:
        """ Trains until ``max_steps`` or until the learning rate falls below ``min_lr``. """
        stopped = False
        if self.step == 0:
            self.validate(valid)
        while self.step < self.cfg.max_steps:
            metrics = self.train_step(train)
            if self.step % 10 == 0 or self.step == 1:
                logger.info("step %d: total %.4f utt %.4f chunk %.4f simu %.4f lr %.2e",
                            metrics.step, metrics.l_total, metrics.l_utt, metrics.l_chunk,
                            metrics.l_simu, metrics.lr)
            if self.step % self.cfg.eval_every == 0:
                self.evaluate(valid)
                if self.scheduler.stopped:
                    stopped = True
                    logger.info("learning rate below %.1e, stopping", self.cfg.min_lr)
                    break
        if not self.records or self.records[-1].step != self.step:
            self.evaluate(valid)
        averaged_path = None
        if self.out_dir is not None and self.records:
            chosen = select_checkpoints(self.records, self.cfg.average_k, self.cfg.average_mode)
            averaged = average_checkpoints([r.path for r in chosen], self.params.arch_hash)
            averaged_path = str(save_checkpoint(averaged, self.out_dir / "averaged.ckpt"))
            logger.info("averaged %d checkpoints into %s", len(chosen), averaged_path)
        best = min((r.valid_loss for r in self.records), default=float("inf"))
        return TrainResult(steps=self.step, best_valid_loss=best, checkpoints=self.records,
                           averaged_path=averaged_path, stopped_early=stopped)

    def save_state(self, path: str | Path) -> Path:
        """ Parameters, Adam moments and schedule state in one checkpoint file. """
        state = ModelParams(arch_hash=self.params.arch_hash, metadata={
            "model": self.params.metadata.get("model"), "step": self.step,
            "adam_step": self.adam.step, "scheduler": self.scheduler.state(),
            "records": [r.model_dump() for r in self.records]})
        for name, tensor in self.params.items():
            state.add(f"param/{name}", tensor.value.copy(), frozen=name in self.params.frozen)
        for name in self.adam.m:
            state.add(f"adam_m/{name}", self.adam.m[name].copy())
            state.add(f"adam_v/{name}", self.adam.v[name].copy())
        return save_checkpoint(state, path)

    def resume(self, path: str | Path) -> None:
        """ Restores what ``save_state`` wrote.

        Raises:
            CheckpointError: If the file belongs to another architecture.
        """
        state = load_checkpoint(path, self.params.arch_hash)
        self.params.set_values({name: state[f"param/{name}"].value
                                for name in self.params.names()})
        for name in self.adam.m:
            self.adam.m[name] = state[f"adam_m/{name}"].value.copy()
            self.adam.v[name] = state[f"adam_v/{name}"].value.copy()
        self.adam.step = int(state.metadata["adam_step"])
        self.step = int(state.metadata["step"])
        self._resumed_step = self.step
        self.scheduler.load_state(state.metadata["scheduler"])
        self.records = [CheckpointRecord(**r) for r in state.metadata.get("records", [])]
        logger.info("resumed from %s at step %d", path, self.step)


def load_model(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    """ Loads a checkpoint and the model configuration stored with it. """
    params = load_checkpoint(path)
    return params, model_config_of(params)

