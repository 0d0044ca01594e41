import json
import subprocess
import sys

import numpy as np
import pytest

from bimark import (
    ContextWindow,
    EmbedParams,
    Message,
    ProbabilityDistribution,
    SeenContextLog,
    derive_partitions,
    detect,
    extraction_rate,
    generate,
    sample_token,
    watermark_step,
)
from bimark.profiles import write_tokens
from bimark.toylm import SyntheticLM

from bimark_adapter import (
    ProtocolError,
    ValidationError,
    open_session,
    watermark_hook,
)

def embed_params(profile, max_new_tokens=0):
    return EmbedParams(
        vocab_size=profile.vocab_size, ell=profile.ell, d=profile.d,
        delta_base=profile.delta_base, h=profile.h,
        max_new_tokens=max_new_tokens,
    )


class TestOpenSession:
    def test_profile_cached_and_matching(self, serve_argv, profile):
        with open_session(serve_argv) as session:
            assert session.profile["vocab_size"] == profile.vocab_size
            assert session.profile["d"] == profile.d
            assert session.profile["ell"] == profile.ell
            assert session.profile["h"] == profile.h
            assert session.requests == 1

    def test_double_open_gives_isolated_skip_state(self, serve_argv):
        probs = [1 / 64] * 64
        with open_session(serve_argv) as a, open_session(serve_argv) as b:
            first = a.reweight_step(probs, [3, 3], "10101010")
            second = b.reweight_step(probs, [3, 3], "10101010")
            # both sessions see the window as fresh, so both watermark it
            assert first == second
            assert first != probs
            # within one session the same window is now consumed: echo
            assert a.reweight_step(probs, [3, 3], "10101010") == probs

    def test_bad_socket_endpoint(self, tmp_path):
        with pytest.raises(ConnectionError):
            open_session(str(tmp_path / "absent.sock"))

    def test_bad_argv_endpoint(self):
        with pytest.raises((ConnectionError, ProtocolError)):
            open_session(["/nonexistent-binary-xyz"])


class TestReweightStep:
    def test_zero_delta_profile_echoes(self, tmp_path, profile):
        from bimark.profiles import DetectionProfile

        flat = DetectionProfile(
            key=profile.key, vocab_size=profile.vocab_size, d=profile.d,
            ell=profile.ell, h=profile.h, delta_base=0.0,
        )
        path = tmp_path / "flat.profile"
        flat.save(path)
        argv = [sys.executable, "-m", "bimark", "serve", "--profile", str(path)]
        rng = np.random.default_rng(1)
        with open_session(argv) as session:
            for i in range(5):
                probs = rng.random(64)
                probs /= probs.sum()
                reply = session.reweight_step(probs.tolist(), [i, i], "11111111")
                assert reply == probs.tolist()

    def test_wrong_length_probs_rejected_client_side(self, serve_argv):
        with open_session(serve_argv) as session:
            with pytest.raises(ValidationError):
                session.reweight_step([0.5, 0.5], [1, 2], "10101010")
            with pytest.raises(ValidationError):
                session.reweight_step([1 / 64] * 64, [1], "10101010")
            with pytest.raises(ValidationError):
                session.reweight_step([1 / 64] * 64, [1, 2], "1")

    def test_server_error_surfaces_as_protocol_error(self, serve_argv):
        with open_session(serve_argv) as session:
            with pytest.raises(ProtocolError) as err:
                session.detect_remote([])
            assert err.value.error.get("code") == "undefined_statistic"


class TestSecondaryCriterion11:
    def test_thousand_requests_bit_for_bit(self, serve_argv, profile):
        """Criterion 11a: adapter replies equal in-process watermark_step."""
        params = embed_params(profile)
        stack = derive_partitions(profile.key, profile.vocab_size, profile.d)
        log = SeenContextLog()
        rng = np.random.default_rng(11)
        with open_session(serve_argv) as session:
            for _ in range(1000):
                probs = rng.random(64)
                probs /= probs.sum()
                window = [int(x) for x in rng.integers(0, 32, size=2)]
                message = "".join(str(b) for b in rng.integers(0, 2, size=8))
                remote = session.reweight_step(probs.tolist(), window, message)
                local, _ = watermark_step(
                    ProbabilityDistribution(probs), profile.key,
                    ContextWindow(tuple(window)), Message.from_bitstring(message),
                    params, stack, log,
                )
                assert remote == [float(p) for p in local.probs]
        print("[criterion 11a] PASS — 1000 reweight requests bit-identical "
              "to in-process outputs")

    def test_detect_remote_equals_cli_detect(self, serve_argv, profile,
                                             profile_path, tmp_path):
        """Criterion 11b: remote detection equals the CLI on 100 sequences."""
        params = embed_params(profile, max_new_tokens=60)
        stack = derive_partitions(profile.key, profile.vocab_size, profile.d)
        rng = np.random.default_rng(7)
        with open_session(serve_argv) as session:
            for i in range(100):
                lm = SyntheticLM(64, order=1, alpha=1.0, seed=1000 + i)
                message = Message(tuple(int(b) for b in rng.integers(0, 2, 8)))
                tokens, _ = generate(
                    lm, [i, i + 1], message, profile.key, params,
                    sampler_seed=i, stack=stack,
                )
                remote = session.detect_remote(tokens)
                token_file = tmp_path / f"tokens_{i}.txt"
                write_tokens(token_file, tokens)
                proc = subprocess.run(
                    [sys.executable, "-m", "bimark", "detect",
                     "--profile", str(profile_path), "--tokens", str(token_file)],
                    capture_output=True, text=True, check=True,
                )
                assert remote == json.loads(proc.stdout.splitlines()[0])
        print("[criterion 11b] PASS — detect_remote equals CLI detection on "
              "100 generated sequences")


class TestSecondaryCriterion12:
    def test_bridge_generation_matches_in_process(self, serve_argv, profile,
                                                  profile_path, tmp_path):
        """Criterion 12: adapter-driven generation + CLI detection equals the
        in-process pipeline under identical seeds."""
        T, sampler_seed = 120, 99
        prompt = [5, 9]
        message_bits = "11010010"
        lm = SyntheticLM(64, order=1, alpha=1.0, seed=77)

        # adapter-driven loop: mock provider + remote reweighting + the same
        # one-uniform-per-token inverse-CDF sampler the library documents
        with open_session(serve_argv) as session:
            hook = watermark_hook(session, message_bits)
            rng = np.random.default_rng(sampler_seed)
            sequence = list(prompt)
            for _ in range(T):
                dist = lm.next_distribution(sequence)
                reweighted = hook(dist.probs.tolist(), sequence)
                token = sample_token(
                    ProbabilityDistribution(np.asarray(reweighted)), float(rng.random())
                )
                sequence.append(token)
            bridged = sequence[len(prompt):]

        # equivalent in-process run
        params = embed_params(profile, max_new_tokens=T)
        stack = derive_partitions(profile.key, profile.vocab_size, profile.d)
        lm2 = SyntheticLM(64, order=1, alpha=1.0, seed=77)
        local_tokens, _ = generate(
            lm2, prompt, Message.from_bitstring(message_bits), profile.key,
            params, sampler_seed=sampler_seed, stack=stack,
        )
        assert bridged == local_tokens

        token_file = tmp_path / "bridged.txt"
        write_tokens(token_file, bridged)
        proc = subprocess.run(
            [sys.executable, "-m", "bimark", "detect",
             "--profile", str(profile_path), "--tokens", str(token_file)],
            capture_output=True, text=True, check=True,
        )
        cli_report = json.loads(proc.stdout.splitlines()[0])
        local_report = detect(local_tokens, profile.key, params, stack)
        rate_bridged = extraction_rate(
            Message.from_bitstring(cli_report["message"]),
            Message.from_bitstring(message_bits),
        )
        rate_local = extraction_rate(
            local_report.extracted, Message.from_bitstring(message_bits)
        )
        assert rate_bridged == rate_local
        assert cli_report == local_report.to_dict()
        print(f"[criterion 12] PASS — bridged generation token-identical; "
              f"extraction rate {rate_bridged:.3f} equals in-process")


class TestWatermarkHook:
    def test_hook_pads_short_prefixes(self, serve_argv):
        with open_session(serve_argv) as session:
            hook = watermark_hook(session, "10101010")
            out = hook([1 / 64] * 64, [])  # window (64, 64): sentinel-padded
            assert len(out) == 64
            assert abs(sum(out) - 1.0) < 1e-9
