"""Experiment harness: grids, attacks, result tables.

Every trial is a self-contained embed -> (attack) -> detect round trip whose
key, model seed, message, prompt, and sampler seed are all derived from
(master seed, cell index, trial index), so results are byte-identical no
matter how trials are scheduled.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Optional, Sequence

import numpy as np

from .detect import (
    detect,
    extraction_rate,
    reference_green_count,
    gather_votes,
    z_score,
)
from .embed import EmbedParams, Message, generate
from .errors import DomainError
from .prf import WatermarkKey, derive_partitions, siphash24
from .profiles import ExperimentConfig
from .toylm import SyntheticLM, entropy

CSV_COLUMNS = [
    "scheme", "bits", "length", "ratio", "d", "delta_base", "runs",
    "extraction_rate_mean", "extraction_rate_std", "tpr",
    "mean_z_ref", "mean_z_majority", "mean_entropy", "failures",
]


def substitution_attack(
    tokens: Sequence[int], ratio: float, attack_seed: int, vocab_size: int
) -> list[int]:
    """Replace floor(ratio*T) uniformly chosen positions with random tokens.

    Replacements are uniform over the vocabulary minus the original token, so
    a ratio of 1.0 leaves no position unchanged. A model-free stand-in for
    semantic substitution: strictly harsher, since replacements ignore
    context entirely.
    """
    if not 0.0 <= ratio <= 1.0:
        raise DomainError(f"ratio must lie in [0, 1], got {ratio}")
    out = [int(t) for t in tokens]
    count = int(ratio * len(out))
    if count == 0:
        return out
    rng = np.random.default_rng(attack_seed)
    positions = rng.choice(len(out), size=count, replace=False)
    for pos in positions:
        replacement = int(rng.integers(0, vocab_size - 1))
        if replacement >= out[pos]:
            replacement += 1
        out[pos] = replacement
    return out


@dataclass(frozen=True)
class TrialSpec:
    scheme: str
    vocab_size: int
    lm_order: int
    lm_alpha: float
    h: int
    bits: int
    length: int
    ratio: float
    d: int
    delta_base: float
    tpr_z: float
    trial_seed: int
    lm_kind: str = "synthetic"
    lm_trace: Optional[str] = None


@dataclass(frozen=True)
class TrialResult:
    rate: float
    z_ref: float
    z_majority: float
    detected: bool
    mean_entropy: float


class _EntropyRecordingLM:
    """Wraps a provider and records the entropy of every step distribution."""

    def __init__(self, inner):
        self.inner = inner
        self.entropies: list[float] = []

    def next_distribution(self, prefix):
        dist = self.inner.next_distribution(prefix)
        self.entropies.append(entropy(dist))
        return dist


def _trial_streams(spec: TrialSpec) -> tuple[WatermarkKey, int, np.random.Generator]:
    """Independent key / model seed / auxiliary rng for one trial."""
    base = spec.trial_seed.to_bytes(8, "big")
    key = WatermarkKey.from_int(siphash24(base + b"wmkeyexp", b"watermark-key"))
    lm_seed = siphash24(base + b"toylmsed", b"toylm-seed")
    aux = np.random.default_rng(spec.trial_seed)
    return key, lm_seed, aux


@lru_cache(maxsize=4)
def _cached_trace(path: str):
    from .toylm import load_trace

    return load_trace(path)


def _build_trial_lm(spec: TrialSpec, lm_seed: int):
    if spec.lm_kind == "trace":
        from .toylm import TraceLM

        return TraceLM(_cached_trace(spec.lm_trace), prompt_length=spec.h)
    return SyntheticLM(
        spec.vocab_size, order=spec.lm_order, alpha=spec.lm_alpha, seed=lm_seed
    )


def run_trial(spec: TrialSpec) -> TrialResult:
    key, lm_seed, aux = _trial_streams(spec)
    lm = _EntropyRecordingLM(_build_trial_lm(spec, lm_seed))
    message = Message(tuple(int(b) for b in aux.integers(0, 2, size=spec.bits)))
    prompt = [int(t) for t in aux.integers(0, spec.vocab_size, size=spec.h)]
    sampler_seed = int(aux.integers(0, 2**63))
    attack_seed = int(aux.integers(0, 2**63))
    if spec.scheme == "srl":
        return _run_srl_trial(spec, key, lm, prompt, sampler_seed, attack_seed)
    if spec.scheme == "mpac":
        return _run_mpac_trial(
            spec, key, lm, prompt, message, sampler_seed, attack_seed
        )
    params = EmbedParams(
        vocab_size=spec.vocab_size, ell=spec.bits, d=spec.d,
        delta_base=spec.delta_base, h=spec.h, max_new_tokens=spec.length,
    )
    stack = derive_partitions(key, spec.vocab_size, spec.d)
    tokens, _ = generate(lm, prompt, message, key, params, sampler_seed, stack=stack)
    tokens = substitution_attack(tokens, spec.ratio, attack_seed, spec.vocab_size)
    report = detect(tokens, key, params, stack)
    matrix, _ = gather_votes(tokens, key, params, stack)
    z_ref = z_score(*reference_green_count(matrix, message))
    return TrialResult(
        rate=extraction_rate(report.extracted, message),
        z_ref=z_ref,
        z_majority=report.z,
        detected=bool(z_ref > spec.tpr_z),
        mean_entropy=float(np.mean(lm.entropies)) if lm.entropies else 0.0,
    )


def _run_srl_trial(spec, key, lm, prompt, sampler_seed, attack_seed) -> TrialResult:
    from .baselines import SoftRedListParams, srl_detect, srl_generate

    params = SoftRedListParams(gamma=0.5, delta_logit=spec.delta_base)
    tokens = srl_generate(lm, prompt, key, params, spec.length, sampler_seed, h=spec.h)
    tokens = substitution_attack(tokens, spec.ratio, attack_seed, spec.vocab_size)
    z, _, _, _ = srl_detect(tokens, key, params, spec.vocab_size, h=spec.h)
    return TrialResult(
        rate=float("nan"), z_ref=z, z_majority=z,
        detected=bool(z > spec.tpr_z),
        mean_entropy=float(np.mean(lm.entropies)) if lm.entropies else 0.0,
    )


def _run_mpac_trial(
    spec, key, lm, prompt, message, sampler_seed, attack_seed
) -> TrialResult:
    from .baselines import MPACParams, mpac_extract, mpac_generate

    params = MPACParams(ell=spec.bits, delta_logit=spec.delta_base, h=spec.h)
    tokens = mpac_generate(lm, prompt, message, key, params, spec.length, sampler_seed)
    tokens = substitution_attack(tokens, spec.ratio, attack_seed, spec.vocab_size)
    extracted, z_majority, _, matrix = mpac_extract(tokens, key, params, spec.vocab_size)
    z_ref = z_score(*reference_green_count(matrix, message))
    return TrialResult(
        rate=extraction_rate(extracted, message),
        z_ref=z_ref, z_majority=z_majority,
        detected=bool(z_ref > spec.tpr_z),
        mean_entropy=float(np.mean(lm.entropies)) if lm.entropies else 0.0,
    )


def _trial_seed(master_seed: int, cell_index: int, trial: int) -> int:
    payload = cell_index.to_bytes(8, "big") + trial.to_bytes(8, "big")
    master = (master_seed % 2**64).to_bytes(8, "big")
    return siphash24(master + b"gridcell", payload)


def _cells(config: ExperimentConfig):
    axes = product(
        config.bits_grid, config.length_grid, config.ratio_grid,
        config.d_grid, config.delta_grid,
    )
    for index, (bits, length, ratio, d, delta_base) in enumerate(axes):
        yield index, bits, length, ratio, d, delta_base


def run_experiment(config: ExperimentConfig) -> list[dict]:
    """Run the whole grid; one result row per cell.

    A trial that raises is counted in the cell's ``failures`` column and the
    run keeps going; statistics are over the surviving trials.
    """
    rows = []
    for index, bits, length, ratio, d, delta_base in _cells(config):
        specs = [
            TrialSpec(
                scheme=config.scheme, vocab_size=config.vocab_size,
                lm_order=config.lm_order, lm_alpha=config.lm_alpha,
                h=config.h, bits=bits, length=length, ratio=ratio, d=d,
                delta_base=delta_base, tpr_z=config.tpr_z,
                trial_seed=_trial_seed(config.master_seed, index, trial),
                lm_kind=config.lm, lm_trace=config.lm_trace,
            )
            for trial in range(config.runs)
        ]
        results: list[TrialResult] = []
        failures = 0
        if config.workers > 1:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                outcomes = list(pool.map(_guarded_trial, specs))
        else:
            outcomes = [_guarded_trial(spec) for spec in specs]
        for outcome in outcomes:
            if outcome is None:
                failures += 1
            else:
                results.append(outcome)
        rows.append(_summarize(config, bits, length, ratio, d, delta_base,
                               results, failures))
    return rows


def _guarded_trial(spec: TrialSpec) -> Optional[TrialResult]:
    try:
        return run_trial(spec)
    except Exception:
        return None


def _summarize(config, bits, length, ratio, d, delta_base,
               results: list[TrialResult], failures: int) -> dict:
    rates = [r.rate for r in results]
    return {
        "scheme": config.scheme,
        "bits": bits,
        "length": length,
        "ratio": ratio,
        "d": d,
        "delta_base": delta_base,
        "runs": len(results),
        "extraction_rate_mean": float(np.mean(rates)) if rates else float("nan"),
        "extraction_rate_std": float(np.std(rates)) if rates else float("nan"),
        "tpr": float(np.mean([r.detected for r in results])) if results else float("nan"),
        "mean_z_ref": float(np.mean([r.z_ref for r in results])) if results else float("nan"),
        "mean_z_majority": float(np.mean([r.z_majority for r in results])) if results else float("nan"),
        "mean_entropy": float(np.mean([r.mean_entropy for r in results])) if results else float("nan"),
        "failures": failures,
    }


def write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in CSV_COLUMNS})


def write_summary_json(path, config: ExperimentConfig, rows: list[dict]) -> None:
    payload = {
        "config": {
            "scheme": config.scheme, "vocab_size": config.vocab_size,
            "lm_order": config.lm_order, "lm_alpha": config.lm_alpha,
            "h": config.h, "runs": config.runs,
            "master_seed": config.master_seed, "tpr_z": config.tpr_z,
            "bits_grid": config.bits_grid, "length_grid": config.length_grid,
            "ratio_grid": config.ratio_grid, "d_grid": config.d_grid,
            "delta_grid": config.delta_grid,
        },
        "rows": rows,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
