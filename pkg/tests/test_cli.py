import time

import numpy as np
import pytest

from fraecodec import bitstream, cli, dsp, training
from fraecodec.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE
from fraecodec.prior import PriorKind
from fraecodec.schemes import CodecModel


MINIMAL_CONFIG = """\
scheme = no_recurrency
bottleneck = 2
hidden = 12
epochs = 4
utterances = 10
utterance_len = 96
batch_size = 4
tbptt = 16
learning_rate = 0.003
seed = 0
"""


def write_config(tmp_path, text=MINIMAL_CONFIG, name="cfg.txt"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(argv):
    return cli.main(argv)


# ---------------------------------------------------------------------------
# train

def test_train_minimal_config_under_two_minutes(tmp_path, capsys):
    config = write_config(tmp_path)
    model_path = tmp_path / "m.frae"
    log_path = tmp_path / "log.csv"
    started = time.monotonic()
    code = run(["train", "--config", config, "--out", str(model_path),
                "--log", str(log_path)])
    elapsed = time.monotonic() - started
    assert code == EXIT_OK
    assert elapsed < 120.0
    assert model_path.exists()
    lines = log_path.read_text().splitlines()
    assert lines[0] == "epoch,split,mel_mse,bits_per_frame,loss"
    assert len(lines) == 1 + 4 * 2  # train + val rows per epoch
    out = capsys.readouterr().out
    assert "trained scheme=no_recurrency" in out


def test_train_missing_config_flag_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        run(["train", "--out", str(tmp_path / "m.frae")])
    assert err.value.code == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_train_nonexistent_config_is_runtime_error(tmp_path, capsys):
    code = run(["train", "--config", str(tmp_path / "nope.txt"),
                "--out", str(tmp_path / "m.frae")])
    assert code == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert err.startswith("error: ")
    assert "\n" not in err.strip()


def test_train_bad_config_reports_line(tmp_path, capsys):
    config = write_config(tmp_path, "seed = 1\nbottleneck = pear\n")
    code = run(["train", "--config", config, "--out", str(tmp_path / "m.frae")])
    assert code == EXIT_RUNTIME
    assert "line 2" in capsys.readouterr().err


def test_train_identical_seeds_identical_outputs(tmp_path):
    config = write_config(tmp_path)
    outs = []
    for tag in ("a", "b"):
        model_path = tmp_path / f"{tag}.frae"
        log_path = tmp_path / f"{tag}.csv"
        assert run(["train", "--config", config, "--out", str(model_path),
                    "--log", str(log_path)]) == EXIT_OK
        outs.append((model_path.read_bytes(), log_path.read_text()))
    assert outs[0] == outs[1]


def test_train_resume_continues_log_identically(tmp_path):
    full_config = write_config(tmp_path, MINIMAL_CONFIG, name="full.txt")
    short_config = write_config(tmp_path, MINIMAL_CONFIG.replace(
        "epochs = 4", "epochs = 2"), name="short.txt")
    ckpt = tmp_path / "m.ckpt"
    assert run(["train", "--config", short_config, "--out", str(tmp_path / "m0.frae"),
                "--checkpoint", str(ckpt)]) == EXIT_OK

    continuations = []
    for tag in ("r1", "r2"):
        model_path = tmp_path / f"{tag}.frae"
        log_path = tmp_path / f"{tag}.csv"
        assert run(["train", "--config", full_config, "--resume", str(ckpt),
                    "--out", str(model_path), "--log", str(log_path),
                    "--checkpoint", str(tmp_path / f"{tag}.ckpt")]) == EXIT_OK
        continuations.append((model_path.read_bytes(), log_path.read_text()))
    assert continuations[0] == continuations[1]
    epochs = [int(line.split(",")[0]) for line in
              continuations[0][1].splitlines()[1:]]
    assert sorted(set(epochs)) == [2, 3]


# ---------------------------------------------------------------------------
# synth-data

def test_synth_data_writes_spec_files(tmp_path, capsys):
    out_dir = tmp_path / "data"
    assert run(["synth-data", "--kind", "ar1", "--out", str(out_dir),
                "--utterances", "3", "--length", "40", "--channels", "2",
                "--seed", "5"]) == EXIT_OK
    files = sorted(out_dir.iterdir())
    assert len(files) == 3
    frames = dsp.read_spec(files[0])
    assert frames.shape == (40, 2)


def test_train_on_synth_data_directory(tmp_path):
    out_dir = tmp_path / "data"
    assert run(["synth-data", "--out", str(out_dir), "--utterances", "8",
                "--length", "64", "--channels", "2", "--seed", "1"]) == EXIT_OK
    config = write_config(tmp_path, MINIMAL_CONFIG + "data_kind = spec\n"
                          f"data_path = {out_dir}\n")
    assert run(["train", "--config", config,
                "--out", str(tmp_path / "m.frae")]) == EXIT_OK


# ---------------------------------------------------------------------------
# encode / decode

@pytest.fixture(scope="module")
def trained_audio_model(tmp_path_factory):
    """A tiny model over real 161-bin spectrograms plus a 1-second test wav."""
    root = tmp_path_factory.mktemp("audio")
    rng = np.random.default_rng(0)
    t = np.arange(16000) / dsp.SAMPLE_RATE
    wavs = []
    for i in range(6):
        f0 = 200.0 + 120.0 * i
        x = (0.4 * np.sin(2 * np.pi * f0 * t)
             + 0.2 * np.sin(2 * np.pi * 2.5 * f0 * t)
             + 0.02 * rng.standard_normal(t.size))
        path = root / f"utt{i}.wav"
        dsp.wav_write(path, x)
        wavs.append(path)
    config = training.TrainConfig(
        scheme=training.SchemeId.FRAE, bottleneck=8, hidden=24, epochs=2,
        batch_size=2, tbptt=16, learning_rate=3e-3, seed=0,
        data_kind="wav", data_path=str(root), mel_weighted=True)
    model, _ = training.train(config)
    model_path = root / "model.frae"
    model.save(model_path)
    return {"root": root, "model": str(model_path), "wav": str(wavs[0])}


def test_encode_reports_paper_rate(trained_audio_model, tmp_path, capsys):
    out = tmp_path / "x.fraebits"
    code = run(["encode", "--model", trained_audio_model["model"],
                "--in", trained_audio_model["wav"], "--out", str(out),
                "--mode", "fixed"])
    assert code == EXIT_OK
    stdout = capsys.readouterr().out
    # 99 frames x 16 bits at 100 Hz -> 1.6 kbps
    assert "frames=99" in stdout
    assert "bits=1584" in stdout
    assert "kbps=1.6 " in stdout


def test_decode_roundtrip_matches_eval_path(trained_audio_model, tmp_path):
    model = CodecModel.load(trained_audio_model["model"])
    frames = dsp.spectrogram(dsp.wav_read(trained_audio_model["wav"]))
    latents, recon_norm = training.code_utterance(model, frames)
    expected = model.denormalize(recon_norm)

    recons = {}
    for mode in ("fixed", "arith"):
        stream = tmp_path / f"x.{mode}.fraebits"
        spec_out = tmp_path / f"x.{mode}.spec"
        assert run(["encode", "--model", trained_audio_model["model"],
                    "--in", trained_audio_model["wav"], "--out", str(stream),
                    "--mode", mode]) == EXIT_OK
        assert run(["decode", "--model", trained_audio_model["model"],
                    "--in", str(stream), "--out", str(spec_out)]) == EXIT_OK
        recons[mode] = dsp.read_spec(spec_out)
    # fixed and arith reconstructions are identical, and match the eval path
    np.testing.assert_array_equal(recons["fixed"], recons["arith"])
    np.testing.assert_allclose(recons["fixed"], expected, atol=2e-4)  # float32 dump


def test_decode_synthesizes_waveform(trained_audio_model, tmp_path):
    stream = tmp_path / "x.fraebits"
    spec_out = tmp_path / "x.spec"
    wav_out = tmp_path / "x.wav"
    assert run(["encode", "--model", trained_audio_model["model"],
                "--in", trained_audio_model["wav"], "--out", str(stream)]) == EXIT_OK
    assert run(["decode", "--model", trained_audio_model["model"],
                "--in", str(stream), "--out", str(spec_out),
                "--wav", str(wav_out), "--gl-iters", "8"]) == EXIT_OK
    samples = dsp.wav_read(wav_out)
    assert samples.size == 99 * dsp.HOP - dsp.HOP + dsp.FRAME_LEN


def test_encode_empty_wav_is_runtime_error(tmp_path, capsys):
    import struct
    bad = tmp_path / "empty.wav"
    header = b"".join([
        b"RIFF", struct.pack("<I", 36), b"WAVE",
        b"fmt ", struct.pack("<IHHIIHH", 16, 1, 1, 16000, 32000, 2, 16),
        b"data", struct.pack("<I", 0),
    ])
    bad.write_bytes(header)
    model = CodecModel.new(training.SchemeId.FRAE, dsp.N_BINS, 8, hidden=8, seed=0)
    model_path = tmp_path / "m.frae"
    model.save(model_path)
    code = run(["encode", "--model", str(model_path), "--in", str(bad),
                "--out", str(tmp_path / "x.bits")])
    assert code == EXIT_RUNTIME
    assert "error:" in capsys.readouterr().err


def test_decode_with_wrong_model_hash_fails(trained_audio_model, tmp_path, capsys):
    stream = tmp_path / "x.fraebits"
    assert run(["encode", "--model", trained_audio_model["model"],
                "--in", trained_audio_model["wav"], "--out", str(stream)]) == EXIT_OK
    other = CodecModel.new(training.SchemeId.FRAE, dsp.N_BINS, 8, hidden=24, seed=77)
    other_path = tmp_path / "other.frae"
    other.save(other_path)
    code = run(["decode", "--model", str(other_path), "--in", str(stream),
                "--out", str(tmp_path / "y.spec")])
    assert code == EXIT_RUNTIME
    assert "hash" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval

def test_eval_csv_schema_and_determinism(tmp_path, capsys):
    data_dir = tmp_path / "data"
    assert run(["synth-data", "--out", str(data_dir), "--utterances", "6",
                "--length", "64", "--channels", "2", "--seed", "3"]) == EXIT_OK
    config = write_config(tmp_path, MINIMAL_CONFIG + "data_kind = spec\n"
                          f"data_path = {data_dir}\n")
    model_a = tmp_path / "a.frae"
    assert run(["train", "--config", config, "--out", str(model_a)]) == EXIT_OK
    capsys.readouterr()

    csvs = []
    for tag in ("1", "2"):
        out_csv = tmp_path / f"eval{tag}.csv"
        assert run(["eval", "--model", str(model_a), "--data", str(data_dir),
                    "--out", str(out_csv)]) == EXIT_OK
        csvs.append(out_csv.read_text())
    assert csvs[0] == csvs[1]
    lines = csvs[0].splitlines()
    assert lines[0] == "scheme,model,mel_mse,spectral_snr,bits_per_frame,bitrate_bps"
    row = lines[1].split(",")
    assert row[0] == "no_recurrency"
    assert float(row[2]) > 0.0
    assert float(row[5]) == 400.0  # D=2, K=4 at 100 Hz


# ---------------------------------------------------------------------------
# sweep

def test_sweep_grid_arithmetic():
    betas = [0.001 + 0.001 * i for i in range(7)]
    priors = cli._parse_priors("all")
    cells = cli.sweep_grid(betas, priors, [8, 16, 32, 36])
    assert len(cells) == 25  # 7 betas x 3 priors + 4 uniform baselines


def test_parse_betas():
    betas = cli._parse_betas("0.001:0.007:0.001")
    assert len(betas) == 7
    assert betas[0] == pytest.approx(0.001)
    assert betas[-1] == pytest.approx(0.007)
    assert cli._parse_betas("0.004") == [0.004]


def test_sweep_small_grid_writes_parseable_csv(tmp_path):
    config = write_config(tmp_path, MINIMAL_CONFIG
                          .replace("scheme = no_recurrency", "scheme = frae")
                          .replace("epochs = 4", "epochs = 2"))
    out_csv = tmp_path / "rd.csv"
    assert run(["sweep", "--config", config, "--betas", "0.002:0.004:0.002",
                "--priors", "time_invariant", "--baseline-dims", "2",
                "--out", str(out_csv)]) == EXIT_OK
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "scheme,prior,beta,seed,bitrate_bps,mel_mse,bits_per_frame"
    assert len(lines) == 1 + 2 + 1  # two betas + one baseline
    for line in lines[1:]:
        fields = line.split(",")
        assert fields[0] == "frae"
        float(fields[2]), float(fields[4]), float(fields[5])  # parse back
    baseline = lines[-1].split(",")
    assert baseline[1] == "uniform"
    assert float(baseline[4]) == 400.0  # fixed-rate D=2 at 100 Hz


# ---------------------------------------------------------------------------
# gl-decode

def test_gl_decode_produces_wav(tmp_path, capsys):
    t = np.arange(3200) / dsp.SAMPLE_RATE
    spec = dsp.spectrogram(0.3 * np.sin(2 * np.pi * 440.0 * t))
    spec_path = tmp_path / "x.spec"
    dsp.write_spec(spec_path, spec)
    wav_path = tmp_path / "x.wav"
    assert run(["gl-decode", "--in", str(spec_path), "--out", str(wav_path),
                "--iters", "10", "--seed", "1"]) == EXIT_OK
    assert dsp.wav_read(wav_path).size > 0


def test_gl_decode_rejects_non_audio_grid(tmp_path, capsys):
    spec_path = tmp_path / "x.spec"
    dsp.write_spec(spec_path, np.zeros((10, 4)))
    code = run(["gl-decode", "--in", str(spec_path), "--out", str(tmp_path / "x.wav")])
    assert code == EXIT_RUNTIME
    assert "161" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        run(["compress", "--help-me"])
    assert err.value.code == EXIT_USAGE
