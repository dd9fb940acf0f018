""" Tests for the command-line interface and its exit codes. """
import pandas as pd
import pytest

from cuside_array.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from cuside_array.config import RunConfig, SceneConfig, dump_config
from cuside_array.signal import read_wav


@pytest.fixture
def small_run_config(tmp_path, small_model_config, small_training_config, small_stream_config):
    """ A config file with the tiny test model and a four-utterance corpus. """
    config = RunConfig(model=small_model_config, training=small_training_config,
                       stream=small_stream_config,
                       scene=SceneConfig(num_utterances=4, seed=1, max_words=3))
    path = tmp_path / "config.json"
    path.write_text(dump_config(config), encoding="utf-8")
    return path


def _simulate(out, n=2, seed=3) -> int:
    return main(["simulate", "--out", str(out), "--n", str(n), "--seed", str(seed),
                 "--log-level", "WARNING"])


def test_simulate_is_byte_identical(tmp_path):
    """
    GIVEN the same seed twice
    WHEN two corpora are simulated
    THEN the manifests and every WAV file are byte-identical
    """
    assert _simulate(tmp_path / "a") == EXIT_OK
    assert _simulate(tmp_path / "b") == EXIT_OK

    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file())
    assert any(f.suffix == ".wav" for f in files)
    for relative in files:
        assert (tmp_path / "a" / relative).read_bytes() == (tmp_path / "b" / relative).read_bytes()


def test_simulate_audit_passes(tmp_path):
    code = main(["simulate", "--out", str(tmp_path), "--n", "2", "--audit"])
    assert code == EXIT_OK


@pytest.mark.parametrize("argv", [[], ["simulate"], ["train", "--out", "x", "--steps", "many"],
                                  ["verify", "--check", "no_such_check"]])
def test_bad_arguments_exit_with_usage_code(argv):
    assert main(argv) == EXIT_USAGE


def test_invalid_configuration_exits_with_usage_code(tmp_path):
    code = main(["simulate", "--out", str(tmp_path), "--n", "0"])
    assert code == EXIT_USAGE


def test_verify_exit_codes(capsys):
    """
    GIVEN one fast check
    WHEN verify runs it normally and then with a fault injected
    THEN the exit codes are 0 and 2
    """
    assert main(["verify", "--check", "mvdr_single_mic"]) == EXIT_OK
    assert "1/1 checks passed" in capsys.readouterr().out

    code = main(["verify", "--check", "mvdr_single_mic", "--inject-fault", "mvdr_single_mic"])

    assert code == EXIT_VERIFY
    assert "FAIL mvdr_single_mic" in capsys.readouterr().out


def test_enhance_with_oracle_masks(tmp_path):
    """
    GIVEN a simulated scene on disk
    WHEN it is enhanced with its own speech and noise images as oracle
    THEN a mono WAV of the mixture's length and a figure are written
    """
    _simulate(tmp_path / "data", n=1)
    wav = tmp_path / "data" / "wav"
    out = tmp_path / "enhanced.wav"

    code = main(["enhance", "--input", str(wav / "utt00000_mixture.wav"), "--output", str(out),
                 "--oracle", str(wav / "utt00000_speech.wav"), str(wav / "utt00000_noise.wav"),
                 "--plot", str(tmp_path / "spec.png")])

    enhanced = read_wav(out)
    mixture = read_wav(wav / "utt00000_mixture.wav")
    assert code == EXIT_OK
    assert enhanced.num_channels == 1
    assert enhanced.num_samples == mixture.num_samples
    assert (tmp_path / "spec.png").exists()


def test_enhance_needs_model_or_oracle(tmp_path):
    code = main(["enhance", "--input", str(tmp_path / "in.wav"), "--output",
                 str(tmp_path / "out.wav")])
    assert code == EXIT_USAGE


def test_missing_input_exits_with_io_code(tmp_path):
    code = main(["enhance", "--input", str(tmp_path / "missing.wav"), "--output",
                 str(tmp_path / "out.wav"), "--oracle", str(tmp_path / "s.wav"),
                 str(tmp_path / "n.wav")])
    assert code == EXIT_IO


def test_train_twice_gives_identical_metrics(tmp_path, small_run_config):
    """
    GIVEN the same configuration and seed
    WHEN training runs twice on a synthetic corpus
    THEN metrics.jsonl is byte-identical and the resolved configuration is saved
    """
    for run in ("a", "b"):
        code = main(["train", "--config", str(small_run_config), "--out", str(tmp_path / run),
                     "--seed", "7", "--log-level", "WARNING"])
        assert code == EXIT_OK

    first = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert first == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert len(first.splitlines()) == 3
    assert (tmp_path / "a" / "resolved_config.json").exists()


def test_stream_and_bench_on_a_trained_model(tmp_path, small_run_config, capsys):
    """
    GIVEN a model trained for a few steps and a simulated recording
    WHEN stream and bench run on it
    THEN the event log has one line per chunk and the latency summary is printed
    """
    main(["train", "--config", str(small_run_config), "--out", str(tmp_path / "run"),
          "--log-level", "WARNING"])
    _simulate(tmp_path / "data", n=1)
    model = tmp_path / "run" / "averaged.ckpt"
    mixture = tmp_path / "data" / "wav" / "utt00000_mixture.wav"
    events = tmp_path / "events.jsonl"

    code = main(["stream", "--config", str(small_run_config), "--model", str(model),
                 "--input", str(mixture), "--right-ctx", "real", "--events", str(events)])
    assert code == EXIT_OK
    assert "real: 300 ms algorithmic" in capsys.readouterr().out
    assert len(events.read_text(encoding="utf-8").splitlines()) >= 1

    code = main(["bench", "--config", str(small_run_config), "--model", str(model),
                 "--input", str(mixture), "--repeats", "1", "--csv", str(tmp_path / "b.csv")])
    assert code == EXIT_OK
    assert "chunk_total" in set(pd.read_csv(tmp_path / "b.csv")["stage"])


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    """ The packaged toy configuration trained and evaluated with seeds 0, 1 and 2. """
    runs = {}
    for seed in (0, 1, 2):
        root = tmp_path_factory.mktemp(f"toy{seed}")
        assert main(["train", "--toy", "--seed", str(seed), "--out", str(root / "run"),
                     "--log-level", "WARNING"]) == EXIT_OK
        assert main(["eval", "--toy", "--seed", str(seed), "--model",
                     str(root / "run" / "averaged.ckpt"), "--no-sdr", "--out",
                     str(root / "eval"), "--log-level", "WARNING"]) == EXIT_OK
        runs[seed] = root
    return runs


def _cer_by_setup(root) -> dict[str, float]:
    report = pd.read_csv(root / "eval" / "report.csv", keep_default_na=False)
    return dict(zip(report["right ctx"], report["CER (%)"]))


@pytest.mark.slow
def test_toy_training_reaches_low_error_rate(toy_runs):
    """
    GIVEN the packaged toy configuration
    WHEN a model is trained and evaluated on held-out scenes
    THEN the non-streaming error rate is at most 10 %
    """
    assert _cer_by_setup(toy_runs[0])["-"] <= 10.0


@pytest.mark.slow
def test_streaming_error_rates_follow_right_context(toy_runs):
    """
    GIVEN toy models trained with three seeds
    WHEN the error rates of each setup are averaged over the seeds
    THEN no right context >= simulated >= real >= non-streaming
    """
    table = pd.DataFrame([_cer_by_setup(root) for root in toy_runs.values()]).mean()

    assert table["none"] >= table["simulated"] >= table["real"] >= table["-"]


@pytest.mark.slow
def test_validation_branch_losses_fall_during_training(toy_runs):
    """
    GIVEN toy models trained with three seeds
    WHEN their validation curves are read back
    THEN the best chunk and simulation losses are at least 30 % below the untrained ones
    """
    for root in toy_runs.values():
        curve = pd.read_json(root / "run" / "validation.jsonl", lines=True)
        untrained = curve.loc[curve["step"] == 0].iloc[0]
        trained = curve.loc[curve["step"] > 0]

        assert trained["l_chunk"].min() <= 0.7 * untrained["l_chunk"]
        assert trained["l_simu"].min() <= 0.7 * untrained["l_simu"]
