import json
import subprocess
import sys

import pytest

from bimark.cli import main
from bimark.prf import WatermarkKey, read_key_file, write_key_file
from bimark.profiles import DetectionProfile, read_tokens, write_tokens


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def key_file(tmp_path):
    path = tmp_path / "key.hex"
    write_key_file(WatermarkKey.from_int(4242), path)
    return path


@pytest.fixture
def embed_config(tmp_path, key_file):
    path = tmp_path / "embed.cfg"
    path.write_text(
        f"key_file={key_file}\nvocab_size=128\nd=6\ndelta_base=1.0\nh=2\n"
        "lm=synthetic\nlm_order=1\nlm_alpha=1.0\nlm_seed=5\n"
        "max_new_tokens=120\nsampler_seed=3\n"
    )
    return path


@pytest.fixture
def profile_file(tmp_path, key_file):
    path = tmp_path / "profile"
    DetectionProfile(
        key=read_key_file(key_file), vocab_size=128, d=6, ell=8, h=2,
        delta_base=1.0,
    ).save(path)
    return path


class TestKeygen:
    def test_writes_hex_key(self, tmp_path, capsys):
        out = tmp_path / "k.hex"
        code, _, _ = run_cli(["keygen", "--out", str(out)], capsys)
        assert code == 0
        text = out.read_text()
        assert len(text) == 65 and text.endswith("\n")
        int(text.strip(), 16)

    def test_two_keys_differ(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli(["keygen", "--out", str(a)], capsys)
        run_cli(["keygen", "--out", str(b)], capsys)
        assert a.read_text() != b.read_text()


class TestEmbedDetect:
    def test_embed_is_deterministic(self, tmp_path, embed_config, capsys):
        out1, out2 = tmp_path / "t1", tmp_path / "t2"
        for out in (out1, out2):
            code, _, _ = run_cli(
                ["embed", "--config", str(embed_config), "--prompt", "1 2",
                 "--message", "10110100", "--out", str(out)],
                capsys,
            )
            assert code == 0
        assert out1.read_text() == out2.read_text()

    def test_round_trip_extraction(self, tmp_path, embed_config, profile_file, capsys):
        tokens = tmp_path / "tokens"
        code, _, _ = run_cli(
            ["embed", "--config", str(embed_config), "--prompt", "1 2",
             "--message", "10110100", "--out", str(tokens)],
            capsys,
        )
        assert code == 0
        code, out, _ = run_cli(
            ["detect", "--profile", str(profile_file), "--tokens", str(tokens)],
            capsys,
        )
        assert code == 0
        report = json.loads(out.splitlines()[0])
        assert report["message"] == "10110100"
        assert report["decision"] is True

    def test_zero_bit_mode_accepted(self, tmp_path, embed_config, capsys):
        tokens = tmp_path / "tokens"
        code, _, _ = run_cli(
            ["embed", "--config", str(embed_config), "--prompt", "1",
             "--message", "1", "--out", str(tokens)],
            capsys,
        )
        assert code == 0
        assert len(read_tokens(tokens)) == 120

    def test_message_length_mismatch_rejected(self, tmp_path, embed_config, capsys):
        config = embed_config.read_text() + "ell=4\n"
        bad = embed_config.parent / "bad.cfg"
        bad.write_text(config)
        code, _, err = run_cli(
            ["embed", "--config", str(bad), "--message", "101101",
             "--out", str(embed_config.parent / "t")],
            capsys,
        )
        assert code == 2
        assert "ell" in err

    def test_trace_written(self, tmp_path, embed_config, capsys):
        tokens, trace = tmp_path / "t", tmp_path / "trace.json"
        run_cli(
            ["embed", "--config", str(embed_config), "--prompt", "1 2",
             "--message", "1", "--out", str(tokens), "--trace", str(trace)],
            capsys,
        )
        records = json.loads(trace.read_text())["records"]
        assert len(records) == 120

    def test_detect_rejects_malformed_tokens(self, tmp_path, profile_file, capsys):
        bad = tmp_path / "bad"
        bad.write_text("1\nnot-a-token\n")
        code, _, err = run_cli(
            ["detect", "--profile", str(profile_file), "--tokens", str(bad)],
            capsys,
        )
        assert code == 2 and "not-a-token" in err

    def test_random_tokens_not_detected(self, tmp_path, profile_file, capsys):
        import numpy as np

        tokens = tmp_path / "rand"
        write_tokens(tokens, np.random.default_rng(0).integers(0, 128, 300).tolist())
        code, out, _ = run_cli(
            ["detect", "--profile", str(profile_file), "--tokens", str(tokens)],
            capsys,
        )
        assert code == 0
        assert json.loads(out.splitlines()[0])["decision"] is False

    def test_env_var_overrides_config_path(self, tmp_path, embed_config, capsys, monkeypatch):
        decoy = tmp_path / "decoy.cfg"
        decoy.write_text("vocab_size=broken\n")
        monkeypatch.setenv("BIMARK_CONFIG", str(embed_config))
        tokens = tmp_path / "t"
        code, _, _ = run_cli(
            ["embed", "--config", str(decoy), "--prompt", "1",
             "--message", "1", "--out", str(tokens)],
            capsys,
        )
        assert code == 0


class TestAttackCli:
    def test_attack_round_trip(self, tmp_path, capsys):
        src, dst = tmp_path / "src", tmp_path / "dst"
        write_tokens(src, list(range(100)))
        code, out, _ = run_cli(
            ["attack", "--tokens", str(src), "--out", str(dst),
             "--ratio", "0.2", "--seed", "5", "--vocab-size", "128"],
            capsys,
        )
        assert code == 0
        attacked = read_tokens(dst)
        assert sum(a != b for a, b in zip(attacked, range(100))) == 20


class TestAnalyze:
    def test_table_shape(self, capsys):
        code, out, _ = run_cli(
            ["analyze", "--delta-base", "1.0", "--taus", "0.0,0.5",
             "--lengths", "100", "--alpha", "0.01"],
            capsys,
        )
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0].startswith("tau,delta_base,expected_green")
        assert len(lines) == 3
        # tau=0 row: no watermark effect, beta = 1 - alpha
        fields = lines[1].split(",")
        assert float(fields[2]) == pytest.approx(0.5)
        assert float(fields[4]) == pytest.approx(0.99, abs=1e-6)


class TestRunCli:
    def test_run_writes_csv(self, tmp_path, capsys):
        csv_path = tmp_path / "grid.csv"
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "vocab_size=64\nlm_alpha=1.0\nbits_grid=4\nlength_grid=40\n"
            f"ratio_grid=0\nd_grid=5\ndelta_grid=1.0\nruns=2\nout_csv={csv_path}\n"
        )
        code, _, _ = run_cli(["run", "--config", str(cfg)], capsys)
        assert code == 0
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 2
        assert lines[0].startswith("scheme,bits,length")


class TestExitCodes:
    def test_usage_error_is_one(self):
        proc = subprocess.run(
            [sys.executable, "-m", "bimark", "nonsense"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 1

    def test_missing_required_flag_is_one(self):
        proc = subprocess.run(
            [sys.executable, "-m", "bimark", "keygen"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 1

    def test_data_error_is_two(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "bimark", "detect", "--profile",
             str(tmp_path / "missing"), "--tokens", str(tmp_path / "missing2")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2
