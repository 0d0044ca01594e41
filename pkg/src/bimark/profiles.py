"""File formats: detection profiles, experiment configs, token files.

Everything on disk is plain text. Config and profile files are flat
``key=value`` lines (``#`` comments and blank lines ignored); token files
are one decimal token id per line. These formats are normative — detection
must be reproducible from the files alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .embed import EmbedParams
from .errors import ParseError
from .prf import WatermarkKey


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_kv_file(path, pairs: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in pairs.items():
            fh.write(f"{key}={value}\n")


@dataclass(frozen=True)
class DetectionProfile:
    """Everything detection needs, travelling with the key.

    ``delta_base`` is not needed to detect — the voting pass consumes only
    partitions and PRFs — but the serve endpoint embeds as well, so the
    field rides along optionally.
    """

    key: WatermarkKey
    vocab_size: int
    d: int
    ell: int
    h: int
    delta_base: Optional[float] = None
    scheme: str = "bimark"

    def embed_params(self, max_new_tokens: int = 0) -> EmbedParams:
        return EmbedParams(
            vocab_size=self.vocab_size,
            ell=self.ell,
            d=self.d,
            delta_base=self.delta_base if self.delta_base is not None else 1.0,
            h=self.h,
            max_new_tokens=max_new_tokens,
        )

    def save(self, path) -> None:
        pairs = {
            "scheme": self.scheme,
            "key": self.key.to_hex(),
            "vocab_size": self.vocab_size,
            "d": self.d,
            "ell": self.ell,
            "h": self.h,
        }
        if self.delta_base is not None:
            pairs["delta_base"] = repr(self.delta_base)
        write_kv_file(path, pairs)

    @classmethod
    def load(cls, path) -> "DetectionProfile":
        kv = parse_kv_file(path)
        try:
            return cls(
                key=WatermarkKey.from_hex(kv["key"]),
                vocab_size=int(kv["vocab_size"]),
                d=int(kv["d"]),
                ell=int(kv["ell"]),
                h=int(kv["h"]),
                delta_base=float(kv["delta_base"]) if "delta_base" in kv else None,
                scheme=kv.get("scheme", "bimark"),
            )
        except KeyError as exc:
            raise ParseError(f"{path}: missing profile field {exc}") from exc
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from exc


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


@dataclass
class ExperimentConfig:
    """Grid description for the experiment harness."""

    vocab_size: int = 1024
    scheme: str = "bimark"
    lm: str = "synthetic"
    lm_order: int = 1
    lm_alpha: float = 1.0
    lm_trace: Optional[str] = None
    h: int = 2
    max_new_tokens: int = 200
    bits_grid: list[int] = field(default_factory=lambda: [8])
    length_grid: list[int] = field(default_factory=lambda: [200])
    ratio_grid: list[float] = field(default_factory=lambda: [0.0])
    d_grid: list[int] = field(default_factory=lambda: [10])
    delta_grid: list[float] = field(default_factory=lambda: [1.0])
    runs: int = 10
    master_seed: int = 0
    tpr_z: float = 2.326
    out_csv: Optional[str] = None
    out_json: Optional[str] = None
    workers: int = 1

    def __post_init__(self) -> None:
        for name in ("bits_grid", "length_grid", "ratio_grid", "d_grid", "delta_grid"):
            if not getattr(self, name):
                raise ParseError(f"grid axis {name} must be non-empty")
        if self.runs < 1:
            raise ParseError("runs must be >= 1")
        if self.scheme not in ("bimark", "srl", "mpac"):
            raise ParseError(f"unknown scheme {self.scheme!r}")
        if self.lm not in ("synthetic", "trace"):
            raise ParseError(f"unknown lm kind {self.lm!r}")
        if self.lm == "trace":
            if not self.lm_trace:
                raise ParseError("lm=trace needs lm_trace=<path>")
            if not Path(self.lm_trace).exists():
                raise ParseError(f"lm_trace file not found: {self.lm_trace}")

    @classmethod
    def from_dict(cls, kv: dict[str, str]) -> "ExperimentConfig":
        known = {
            "vocab_size": int, "scheme": str, "lm": str, "lm_order": int,
            "lm_alpha": float, "lm_trace": str,
            "h": int, "max_new_tokens": int, "runs": int, "master_seed": int,
            "tpr_z": float, "out_csv": str, "out_json": str, "workers": int,
            "bits_grid": _int_list, "length_grid": _int_list,
            "ratio_grid": _float_list, "d_grid": _int_list,
            "delta_grid": _float_list,
        }
        fields = {}
        for key, value in kv.items():
            if key not in known:
                raise ParseError(f"unknown config key {key!r}")
            try:
                fields[key] = known[key](value)
            except ValueError as exc:
                raise ParseError(f"config key {key!r}: {exc}") from exc
        return cls(**fields)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(parse_kv_file(path))


def read_tokens(path) -> list[int]:
    tokens = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                tokens.append(int(line))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: not a token id: {line!r}") from exc
    return tokens


def write_tokens(path, tokens) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in tokens:
            fh.write(f"{int(token)}\n")


def resolve_config_path(explicit: Optional[str], env: dict) -> Optional[Path]:
    """BIMARK_CONFIG, when set, overrides whatever path the flag gave."""
    if "BIMARK_CONFIG" in env:
        return Path(env["BIMARK_CONFIG"])
    if explicit:
        return Path(explicit)
    return None
