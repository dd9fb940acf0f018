""" Command-line interface: ``cuside-array <subcommand> [options]``.

Settings are resolved from command-line flags, then the ``--config`` file, then the packaged
defaults. Every subcommand logs the resolved configuration, and subcommands that write a run
directory save it there as ``resolved_config.json``.

Exit codes: 0 success, 1 usage or configuration error, 2 verification failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from cuside_array.config import RunConfig, dump_config, load_config, merge_overrides
from cuside_array.corpus import (fit_input_statistics, load_utterances, make_scene_specs,
                                 scene_geometry, split_utterances, synthesize_utterances)
from cuside_array.cuside import Trainer, init_model_params, load_model
from cuside_array.errors import (CheckpointError, CusideError, DatasetError, VerificationError,
                                 WavFormatError)
from cuside_array.report import (eval_table, evaluate, format_table, plot_spectrograms,
                                 significance_table, write_eval)
from cuside_array.scene import load_scene_audio, measure_snr, synth_dataset
from cuside_array.signal import Waveform, read_wav, write_wav
from cuside_array.streamer import bench_stages, enhance_stream, latency_report, stream_decode
from cuside_array.verify import CHECKS, run_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_IO = 3
SNR_AUDIT_TOLERANCE_DB = 0.1
PEAK_TARGET = 0.99
EVAL_UTTERANCES = 20


class UsageError(CusideError):
    """ Bad command-line arguments. """


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration file")
    common.add_argument("--toy", action="store_true",
                        help="start from the packaged toy configuration instead of the default")
    common.add_argument("--seed", type=int, help="global seed (scene and training)")
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="cuside-array",
                     description="Streaming multi-channel ASR with chunked MVDR beamforming "
                                 "and simulated future context")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthesise a microphone-array corpus")
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--n", type=int, help="number of utterances")
    p.add_argument("--snr-db", type=float, nargs=2, metavar=("LOW", "HIGH"))
    p.add_argument("--mics", type=int, help="microphones in the linear array")
    p.add_argument("--audit", action="store_true",
                   help="re-measure the SNR of every written scene")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="multi-task training")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--data", type=Path, help="dataset directory; synthesised in memory if absent")
    p.add_argument("--limit", type=int, help="use at most this many utterances")
    p.add_argument("--steps", type=int, help="maximum optimisation steps")
    p.add_argument("--alpha", type=float, help="simulation loss weight")
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--frontend", choices=["mvdr", "reference"])
    p.add_argument("--no-joint", action="store_const", const=False, dest="joint",
                   help="train the whole-utterance branch only")
    p.add_argument("--resume", type=Path, help="trainer_state.ckpt to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="CER and SI-SDR per right-context mode, plus non-streaming")
    p.add_argument("--model", type=Path, required=True, help="checkpoint")
    p.add_argument("--data", type=Path, help="dataset directory; synthesised if absent")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", type=Path, help="directory for CSV tables and hypotheses")
    p.add_argument("--no-sdr", action="store_true", help="skip the enhancement metrics")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("enhance", parents=[common], help="chunked MVDR enhancement of a file")
    p.add_argument("--input", type=Path, required=True, help="multi-channel mixture WAV")
    p.add_argument("--output", type=Path, required=True, help="enhanced mono WAV")
    p.add_argument("--model", type=Path, help="checkpoint with a mask network")
    p.add_argument("--oracle", type=Path, nargs=2, metavar=("SPEECH", "NOISE"),
                   help="speech and noise images for ideal ratio masks")
    p.add_argument("--right-ctx", choices=["none", "real"])
    p.add_argument("--plot", type=Path, help="write a spectrogram comparison figure")
    p.set_defaults(handler=cmd_enhance)

    p = sub.add_parser("stream", parents=[common], help="chunk-by-chunk recognition of a file")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--right-ctx", choices=["none", "real", "simulated"])
    p.add_argument("--block-ms", type=int, help="audio arrival block size")
    p.add_argument("--events", type=Path, help="write the event log here instead of stdout")
    p.set_defaults(handler=cmd_stream)

    p = sub.add_parser("bench", parents=[common], help="per-stage timing of one chunk")
    p.add_argument("--model", type=Path, help="checkpoint; freshly initialised if absent")
    p.add_argument("--input", type=Path, help="mixture WAV; one synthetic scene if absent")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--csv", type=Path)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("verify", parents=[common], help="run the oracle and invariant checks")
    p.add_argument("--check", action="append", choices=list(CHECKS),
                   help="run only this check; repeatable")
    p.add_argument("--inject-fault", choices=list(CHECKS),
                   help="perturb one check so that it must fail")
    p.set_defaults(handler=cmd_verify)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """ Flags over the config file over the packaged defaults. """
    if args.config is not None:
        config = load_config(args.config)
    else:
        config = load_config(name="toy_config.json" if args.toy else "default_config.json")
    overrides = {"seed": args.seed, "scene.seed": args.seed, "training.seed": args.seed}
    flags = {
        "n": "scene.num_utterances", "snr_db": "scene.snr_db", "mics": "scene.num_mics",
        "steps": "training.max_steps", "alpha": "training.alpha", "lr": "training.peak_lr",
        "batch_size": "training.batch_size", "eval_every": "training.eval_every",
        "joint": "training.joint_training", "frontend": "model.frontend",
        "right_ctx": "stream.right_ctx_mode",
    }
    for flag, dotted in flags.items():
        value = getattr(args, flag, None)
        overrides[dotted] = list(value) if isinstance(value, (list, tuple)) else value
    config = merge_overrides(config, overrides)
    logger.info("resolved config: %s", json.dumps(config.model_dump(mode="json"),
                                                  sort_keys=True))
    return config


def save_resolved(config: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(dump_config(config) + "\n", encoding="utf-8")
    return path


def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> int:
    """ Writes ``config.scene.num_utterances`` scenes and their manifest. """
    stft_cfg = config.model.stft
    specs = make_scene_specs(config.scene, config.model.vocab_size, stft_cfg.sample_rate)
    records = synth_dataset(specs, args.out, scene_geometry(config.scene))
    save_resolved(config, args.out)
    words = sum(len(r.tokens) for r in records)
    print(f"{len(records)} utterances, {words} words, {config.scene.num_mics} microphones "
          f"-> {args.out}")
    if args.audit:
        worst = 0.0
        for record in records:
            _, speech, noise = load_scene_audio(record, args.out)
            measured = measure_snr(speech, noise, config.scene.reference_channel)
            worst = max(worst, abs(measured - record.snr_db))
        print(f"SNR audit: largest deviation {worst:.3f} dB")
        if worst > SNR_AUDIT_TOLERANCE_DB:
            raise VerificationError(f"written SNR deviates by {worst:.3f} dB")
    return EXIT_OK


def _load_corpus(args: argparse.Namespace, config: RunConfig, offset: int = 0,
                 default_count: int | None = None):
    stft_cfg = config.model.stft
    if args.data is not None:
        return load_utterances(args.data, stft_cfg, args.limit)
    count = args.limit or default_count or config.scene.num_utterances
    logger.info("no --data given: synthesising %d utterances", count)
    return synthesize_utterances(config.scene, stft_cfg, config.model.vocab_size, count, offset)


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    save_resolved(config, args.out)
    utterances = _load_corpus(args, config)
    train, valid, _ = split_utterances(utterances, valid_fraction=0.1, test_fraction=0.0)
    valid = valid or train
    params = init_model_params(config.model, config.training.seed)
    fit_input_statistics(params, train, config.model)
    trainer = Trainer(params, config.model, config.training, args.out)
    if args.resume is not None:
        trainer.resume(args.resume)
    result = trainer.fit(train, valid)
    print(f"trained {result.steps} steps; best validation loss {result.best_valid_loss:.4f}")
    if result.averaged_path:
        print(f"averaged model: {result.averaged_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    params, model_cfg = load_model(args.model)
    utterances = _load_corpus(args, config.model_copy(update={"model": model_cfg}),
                              offset=config.scene.num_utterances, default_count=EVAL_UTTERANCES)
    result = evaluate(utterances, params, model_cfg, config.stream,
                      with_enhancement=not args.no_sdr)
    print(format_table(eval_table(result)))
    print()
    print(format_table(significance_table(result)))
    if result.mixture_si_sdr_db is not None:
        print(f"\nunprocessed reference channel SI-SDR: {result.mixture_si_sdr_db:.2f} dB")
    if args.out is not None:
        save_resolved(config, args.out)
        print(f"tables written to {write_eval(result, args.out).parent}")
    return EXIT_OK


def _fit_peak(wave: Waveform) -> Waveform:
    peak = float(np.max(np.abs(wave.samples))) if wave.num_samples else 0.0
    if peak <= 1.0:
        return wave
    logger.warning("enhanced peak %.3f exceeds full scale; rescaled", peak)
    return Waveform(samples=wave.samples * (PEAK_TARGET / peak), sample_rate=wave.sample_rate)


def cmd_enhance(args: argparse.Namespace, config: RunConfig) -> int:
    if args.model is None and args.oracle is None:
        raise UsageError("enhance needs --model or --oracle")
    params, model_cfg = (None, config.model) if args.model is None else load_model(args.model)
    mixture = read_wav(args.input, model_cfg.stft.sample_rate)
    oracle = None
    if args.oracle is not None:
        oracle = tuple(read_wav(path, model_cfg.stft.sample_rate) for path in args.oracle)
        model_cfg = model_cfg.model_copy(update={"frontend": "mvdr"})
    enhanced = enhance_stream(mixture, params, model_cfg, config.stream, oracle=oracle)
    write_wav(args.output, _fit_peak(enhanced))
    print(f"enhanced {mixture.duration:.2f} s, {mixture.num_channels} channels -> {args.output}")
    if args.plot is not None:
        plot_spectrograms(mixture, enhanced, model_cfg, args.plot,
                          channel=model_cfg.mvdr.reference_channel)
        print(f"figure written to {args.plot}")
    return EXIT_OK


def cmd_stream(args: argparse.Namespace, config: RunConfig) -> int:
    params, model_cfg = load_model(args.model)
    mixture = read_wav(args.input, model_cfg.stft.sample_rate)
    block = None if args.block_ms is None else args.block_ms * model_cfg.stft.sample_rate // 1000
    result = stream_decode(mixture, params, config.stream, model_cfg, block)
    lines = [json.dumps(event.log_record(), sort_keys=True) for event in result.events]
    if args.events is not None:
        args.events.parent.mkdir(parents=True, exist_ok=True)
        args.events.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        print("\n".join(lines))
    print(f"transcript: {result.transcript}")
    print(latency_report(result.events, config.stream).summary())
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    if args.model is not None:
        params, model_cfg = load_model(args.model)
    else:
        model_cfg = config.model
        params = init_model_params(model_cfg, config.seed)
    if args.input is not None:
        mixture = read_wav(args.input, model_cfg.stft.sample_rate)
    else:
        mixture = synthesize_utterances(config.scene, model_cfg.stft, model_cfg.vocab_size,
                                        count=1)[0].mixture
    table = bench_stages(params, model_cfg, config.stream, mixture, args.repeats)
    print(format_table(table))
    if args.csv is not None:
        args.csv.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.csv, index=False)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, config: RunConfig) -> int:
    results = run_checks(args.check, config.seed, args.inject_fault)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name} ({result.seconds:.1f} s): {result.detail}")
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationError(f"failed checks: {', '.join(failed)}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    """ Entry point; returns the process exit code. """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        return args.handler(args, config)
    except VerificationError as err:
        logger.error("%s", err)
        return EXIT_VERIFY
    except (OSError, WavFormatError, DatasetError, CheckpointError) as err:
        logger.error("I/O error: %s", err)
        return EXIT_IO
    except (UsageError, ValidationError, CusideError) as err:
        logger.error("%s", err)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
