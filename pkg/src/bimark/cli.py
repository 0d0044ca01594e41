"""Command-line surface: keygen, embed, detect, attack, run, analyze, serve.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable/invalid
files, malformed values, broken contracts).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .baselines import (
    MPACParams,
    SoftRedListParams,
    mpac_extract,
    mpac_generate,
    srl_detect,
    srl_generate,
)
from .detect import detect, expected_green_stats, type2_error
from .embed import EmbedParams, Message, generate
from .errors import BimarkError
from .experiments import run_experiment, substitution_attack, write_csv, write_summary_json
from .prf import WatermarkKey, read_key_file, write_key_file
from .profiles import (
    DetectionProfile,
    ExperimentConfig,
    parse_kv_file,
    read_tokens,
    resolve_config_path,
    write_tokens,
)
from .serve import serve_socket, serve_streams
from .toylm import SyntheticLM, TraceLM, load_trace

USAGE_EXIT = 1
DATA_EXIT = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract here reserves 2 for
    # data errors, so remap.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bimark", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keygen", help="write a fresh 256-bit key file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("embed", help="generate watermarked tokens")
    p.add_argument("--config", help="key=value config file (BIMARK_CONFIG overrides)")
    p.add_argument("--prompt", help="space-separated prompt token ids")
    p.add_argument("--message", help="message bits, e.g. 10110010")
    p.add_argument("--out", help="output token file")
    p.add_argument("--trace", help="output trace JSON")

    p = sub.add_parser("detect", help="detect and extract from a token file")
    p.add_argument("--profile", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--threshold", type=float, default=4.0)
    p.add_argument("--out", help="also write the report JSON here")

    p = sub.add_parser("attack", help="random-substitution attack on a token file")
    p.add_argument("--tokens", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, required=True)

    p = sub.add_parser("run", help="run an experiment grid from a config")
    p.add_argument("--config", help="key=value config file (BIMARK_CONFIG overrides)")

    p = sub.add_parser("analyze", help="closed-form green statistics tables")
    p.add_argument("--delta-base", type=float, default=1.0)
    p.add_argument("--taus", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--lengths", default="100,200,300")
    p.add_argument("--alpha", type=float, default=0.01)

    p = sub.add_parser("serve", help="newline-delimited JSON request loop")
    p.add_argument("--profile", required=True)
    p.add_argument("--socket", help="serve on a unix socket instead of stdio")
    p.add_argument("--max-connections", type=int)
    return parser


def _cmd_keygen(args) -> int:
    write_key_file(WatermarkKey.generate(), args.out)
    print(f"wrote {args.out}")
    return 0


def _load_embed_config(args) -> dict:
    path = resolve_config_path(args.config, os.environ)
    if path is None:
        raise BimarkError("embed needs --config or BIMARK_CONFIG")
    return parse_kv_file(path)


def _build_lm(kv: dict, vocab_size: int, prompt_length: int):
    kind = kv.get("lm", "synthetic")
    if kind == "synthetic":
        return SyntheticLM(
            vocab_size,
            order=int(kv.get("lm_order", 1)),
            alpha=float(kv.get("lm_alpha", 1.0)),
            seed=int(kv.get("lm_seed", 0)),
        )
    if kind == "trace":
        return TraceLM(load_trace(kv["lm_trace"]), prompt_length)
    raise BimarkError(f"unknown lm kind {kind!r}")


def _cmd_embed(args) -> int:
    kv = _load_embed_config(args)
    key = read_key_file(kv["key_file"])
    vocab_size = int(kv["vocab_size"])
    prompt_text = args.prompt if args.prompt is not None else kv.get("prompt", "")
    prompt = [int(t) for t in prompt_text.split()]
    message_text = args.message if args.message is not None else kv.get("message", "1")
    message = Message.from_bitstring(message_text)
    if "ell" in kv and int(kv["ell"]) != message.ell:
        raise BimarkError(
            f"message has {message.ell} bits but config says ell={kv['ell']}"
        )
    scheme = kv.get("scheme", "bimark")
    max_new = int(kv.get("max_new_tokens", 200))
    sampler_seed = int(kv.get("sampler_seed", 0))
    out_path = args.out or kv.get("out_tokens", "tokens.txt")
    lm = _build_lm(kv, vocab_size, len(prompt))

    if scheme == "bimark":
        params = EmbedParams(
            vocab_size=vocab_size, ell=message.ell,
            d=int(kv.get("d", 10)), delta_base=float(kv.get("delta_base", 1.0)),
            h=int(kv.get("h", 2)), max_new_tokens=max_new,
        )
        tokens, trace = generate(lm, prompt, message, key, params, sampler_seed)
        trace_path = args.trace or kv.get("out_trace")
        if trace_path:
            _write_trace(trace_path, trace)
    elif scheme == "srl":
        params = SoftRedListParams(delta_logit=float(kv.get("delta_logit", 1.0)))
        tokens = srl_generate(
            lm, prompt, key, params, max_new, sampler_seed, h=int(kv.get("h", 2))
        )
    elif scheme == "mpac":
        params = MPACParams(
            ell=message.ell, delta_logit=float(kv.get("delta_logit", 1.0)),
            h=int(kv.get("h", 2)),
        )
        tokens = mpac_generate(lm, prompt, message, key, params, max_new, sampler_seed)
    else:
        raise BimarkError(f"unknown scheme {scheme!r}")
    write_tokens(out_path, tokens)
    print(f"wrote {len(tokens)} tokens to {out_path}")
    return 0


def _write_trace(path, trace) -> None:
    records = []
    for r in trace.records:
        records.append({
            "window": list(r.window),
            "seeded": r.seeded,
            "position": r.position,
            "mask": None if r.mask is None else "".join(map(str, r.mask)),
            "flips": None if r.flips is None else "".join(map(str, r.flips)),
            "token": r.token,
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"records": records}, fh)
        fh.write("\n")


def _cmd_detect(args) -> int:
    profile = DetectionProfile.load(args.profile)
    tokens = read_tokens(args.tokens)
    if profile.scheme == "bimark":
        from .prf import derive_partitions

        params = profile.embed_params()
        stack = derive_partitions(profile.key, profile.vocab_size, profile.d)
        report = detect(tokens, profile.key, params, stack, args.threshold)
        document = report.to_dict()
    elif profile.scheme == "srl":
        z, p, green, total = srl_detect(
            tokens, profile.key, SoftRedListParams(), profile.vocab_size, h=profile.h
        )
        document = {
            "z": z, "p_value": p, "message": None, "G": green, "N": total,
            "ambiguous": [], "skipped": 0, "decision": bool(z > args.threshold),
        }
    elif profile.scheme == "mpac":
        params = MPACParams(ell=profile.ell, h=profile.h)
        extracted, z, p, matrix = mpac_extract(
            tokens, profile.key, params, profile.vocab_size
        )
        green, total = int(matrix.counts.max(axis=1).sum()), int(matrix.counts.sum())
        document = {
            "z": z, "p_value": p, "message": extracted.to_bitstring(),
            "G": green, "N": total, "ambiguous": [], "skipped": 0,
            "decision": bool(z > args.threshold),
        }
    else:
        raise BimarkError(f"unknown scheme {profile.scheme!r}")
    text = json.dumps(document)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


def _cmd_attack(args) -> int:
    tokens = read_tokens(args.tokens)
    attacked = substitution_attack(tokens, args.ratio, args.seed, args.vocab_size)
    write_tokens(args.out, attacked)
    changed = sum(a != b for a, b in zip(tokens, attacked))
    print(f"replaced {changed} of {len(tokens)} tokens")
    return 0


def _cmd_run(args) -> int:
    path = resolve_config_path(args.config, os.environ)
    if path is None:
        raise BimarkError("run needs --config or BIMARK_CONFIG")
    config = ExperimentConfig.load(path)
    rows = run_experiment(config)
    if config.out_csv:
        write_csv(config.out_csv, rows)
        print(f"wrote {config.out_csv}")
    if config.out_json:
        write_summary_json(config.out_json, config, rows)
        print(f"wrote {config.out_json}")
    if not config.out_csv and not config.out_json:
        writer = None
        for row in rows:
            if writer is None:
                print(",".join(row.keys()))
                writer = True
            print(",".join(str(v) for v in row.values()))
    return 0


def _cmd_analyze(args) -> int:
    taus = [float(x) for x in args.taus.split(",")]
    lengths = [int(x) for x in args.lengths.split(",")]
    print("tau,delta_base,expected_green,green_variance," +
          ",".join(f"type2_T{t}" for t in lengths))
    for tau in taus:
        stats = expected_green_stats(tau, args.delta_base)
        betas = []
        for T in lengths:
            try:
                betas.append(f"{type2_error(tau, args.delta_base, T, args.alpha):.6g}")
            except BimarkError:
                betas.append("nan")
        print(f"{tau:.3g},{args.delta_base:.3g},{stats.expectation:.6g},"
              f"{stats.variance:.6g}," + ",".join(betas))
    return 0


def _cmd_serve(args) -> int:
    profile = DetectionProfile.load(args.profile)
    if args.socket:
        serve_socket(profile, args.socket, args.max_connections)
    else:
        serve_streams(profile, sys.stdin, sys.stdout)
    return 0


_COMMANDS = {
    "keygen": _cmd_keygen,
    "embed": _cmd_embed,
    "detect": _cmd_detect,
    "attack": _cmd_attack,
    "run": _cmd_run,
    "analyze": _cmd_analyze,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except BimarkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
