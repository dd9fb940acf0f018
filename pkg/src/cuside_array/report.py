""" Evaluation tables and figures.

The evaluation report has one row per decoding setup, in a fixed order:
non-streaming, then streaming with no, real and simulated right context.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from matplotlib import pyplot as plt
from pydantic import BaseModel

from cuside_array.asr import TokenSequence, cer, edit_distance, greedy_decode
from cuside_array.beamformer import enhance_chunk, frame_major
from cuside_array.config import ContextMode, ModelConfig, StreamConfig
from cuside_array.corpus import Utterance
from cuside_array.cuside import whole_utterance_logits
from cuside_array.metrics import PairedTest, matched_pair_test, si_sdr
from cuside_array.neural import ModelParams
from cuside_array.signal import MultiChannelSpectrogram, Waveform, istft, stft
from cuside_array.streamer import enhance_stream, latency_report, stream_decode

logger = logging.getLogger(__name__)

NON_STREAMING = "non-streaming"
SETUPS = [NON_STREAMING, ContextMode.NONE.value, ContextMode.REAL.value,
          ContextMode.SIMULATED.value]


class Hypothesis(BaseModel):
    utterance: str
    setup: str
    hypothesis: list[int]
    reference: list[int]

    @property
    def errors(self) -> int:
        return edit_distance(self.hypothesis, self.reference)


class SetupResult(BaseModel):
    """ Scores of one decoding setup over the test set. """
    setup: str
    cer: float
    latency: str
    si_sdr_db: float | None = None
    compute_ms: float | None = None


class EvalResult(BaseModel):
    rows: list[SetupResult]
    hypotheses: list[Hypothesis]
    mixture_si_sdr_db: float | None = None
    tests: list[PairedTest] = []

    def for_setup(self, setup: str) -> list[Hypothesis]:
        return [h for h in self.hypotheses if h.setup == setup]


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def whole_utterance_enhance(utt: Utterance, params: ModelParams,
                            model_cfg: ModelConfig) -> Waveform:
    """ Non-streaming front-end: one filter over the whole recording. """
    out = enhance_chunk(utt.spec, params, model_cfg)
    spec = MultiChannelSpectrogram(data=out.enhanced[None], config=model_cfg.stft,
                                   num_samples=utt.mixture.num_samples)
    return istft(spec, length=utt.mixture.num_samples)


def evaluate(utterances: list[Utterance], params: ModelParams, model_cfg: ModelConfig,
             stream_cfg: StreamConfig, with_enhancement: bool = True) -> EvalResult:
    """ Decodes every utterance under the four setups and scores them.

    Args:
        utterances: Test items; they need the time-domain mixture.
        params: Trained parameters.
        model_cfg: Architecture.
        stream_cfg: Chunk geometry; its right-context mode is overridden per setup.
        with_enhancement: Also score SI-SDR of the enhanced reference against the speech image.
    """
    ref = model_cfg.mvdr.reference_channel
    hypotheses: list[Hypothesis] = []
    rows = []
    sdr: dict[str, list[float]] = {setup: [] for setup in SETUPS}
    mixture_sdr = []
    for utt in utterances:
        hyp = greedy_decode(whole_utterance_logits(utt.spec, params, model_cfg).value)
        hypotheses.append(Hypothesis(utterance=utt.id, setup=NON_STREAMING, hypothesis=hyp.ids,
                                     reference=utt.labels.ids))
        if with_enhancement and utt.speech_image is not None:
            clean = utt.speech_image.samples[ref]
            mixture_sdr.append(si_sdr(clean, utt.mixture.samples[ref]))
            sdr[NON_STREAMING].append(si_sdr(
                clean, whole_utterance_enhance(utt, params, model_cfg).samples[0]))
    rows.append(SetupResult(setup=NON_STREAMING, latency="full utterance",
                            cer=_cer(hypotheses, NON_STREAMING),
                            si_sdr_db=_mean(sdr[NON_STREAMING])))
    for mode in (ContextMode.NONE, ContextMode.REAL, ContextMode.SIMULATED):
        cfg = stream_cfg.model_copy(update={"right_ctx_mode": mode})
        events = []
        for utt in utterances:
            result = stream_decode(utt.mixture, params, cfg, model_cfg)
            events.extend(result.events)
            hypotheses.append(Hypothesis(utterance=utt.id, setup=mode.value,
                                         hypothesis=result.transcript.ids,
                                         reference=utt.labels.ids))
            if with_enhancement and utt.speech_image is not None and \
                    mode is not ContextMode.SIMULATED:
                enhanced = enhance_stream(utt.mixture, params, model_cfg, cfg)
                sdr[mode.value].append(si_sdr(utt.speech_image.samples[ref], enhanced.samples[0]))
        latency = latency_report(events, cfg)
        label = f"{latency.algorithmic_ms:.0f}"
        if mode is ContextMode.SIMULATED:
            label += f" + {latency.sim_compute_mean_ms:.1f}"
            sdr[mode.value] = sdr[ContextMode.NONE.value]
        rows.append(SetupResult(setup=mode.value, latency=label, cer=_cer(hypotheses, mode.value),
                                si_sdr_db=_mean(sdr[mode.value]),
                                compute_ms=latency.compute_mean_ms))
    result = EvalResult(rows=rows, hypotheses=hypotheses, mixture_si_sdr_db=_mean(mixture_sdr))
    result.tests = [_paired(result, "none", "simulated"), _paired(result, "simulated", "real"),
                    _paired(result, "real", NON_STREAMING)]
    return result


def _cer(hypotheses: list[Hypothesis], setup: str) -> float:
    return cer((TokenSequence(ids=h.hypothesis), TokenSequence(ids=h.reference))
               for h in hypotheses if h.setup == setup)


def _paired(result: EvalResult, a: str, b: str) -> PairedTest:
    errors_a = [h.errors for h in result.for_setup(a)]
    errors_b = [h.errors for h in result.for_setup(b)]
    return matched_pair_test(errors_a, errors_b, a, b)


def eval_table(result: EvalResult) -> pd.DataFrame:
    """ One row per setup: right context, latency, CER and SI-SDR. """
    return pd.DataFrame([{
        "model": "non-streaming" if row.setup == NON_STREAMING else "streaming",
        "right ctx": "-" if row.setup == NON_STREAMING else row.setup,
        "latency (ms)": row.latency,
        "CER (%)": round(100.0 * row.cer, 2),
        "SI-SDR (dB)": None if row.si_sdr_db is None else round(row.si_sdr_db, 2),
    } for row in result.rows])


def significance_table(result: EvalResult) -> pd.DataFrame:
    return pd.DataFrame([{"a": t.system_a, "b": t.system_b, "pairs": t.num_pairs,
                          "statistic": t.statistic, "p_value": t.p_value}
                         for t in result.tests])


def write_eval(result: EvalResult, out_dir: str | Path) -> Path:
    """ Writes ``report.csv``, ``significance.csv`` and ``hypotheses.jsonl``. """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    eval_table(result).to_csv(out_dir / "report.csv", index=False)
    significance_table(result).to_csv(out_dir / "significance.csv", index=False)
    with open(out_dir / "hypotheses.jsonl", "w", encoding="utf-8") as fh:
        for hyp in result.hypotheses:
            fh.write(json.dumps(hyp.model_dump(), sort_keys=True) + "\n")
    return out_dir / "report.csv"


def read_hypotheses(path: str | Path) -> list[Hypothesis]:
    with open(path, encoding="utf-8") as fh:
        return [Hypothesis.model_validate_json(line) for line in fh if line.strip()]


def format_table(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False)


def plot_spectrograms(mixture: Waveform, enhanced: Waveform, model_cfg: ModelConfig,
                      path: str | Path, channel: int = 0) -> Path:
    """ Saves log spectrograms of the mixture's reference channel and the enhanced signal. """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panels = [("mixture, reference channel", mixture.channel(channel)),
              ("front-end output", enhanced.channel(0))]
    fig, axes = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    hop_s = model_cfg.stft.hop / model_cfg.stft.sample_rate
    for ax, (title, wave) in zip(axes, panels):
        power = np.abs(frame_major(stft(wave, model_cfg.stft))[:, 0, :]) ** 2
        ax.imshow(10 * np.log10(power.T + 1e-10), origin="lower", aspect="auto",
                  extent=(0, power.shape[0] * hop_s, 0, model_cfg.stft.sample_rate / 2000),
                  vmin=-80, vmax=20, cmap="magma")
        ax.set_title(title)
        ax.set_ylabel("kHz")
    axes[-1].set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
