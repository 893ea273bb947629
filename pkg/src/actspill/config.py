"""Model, parallelism, and hardware configuration.

Defaults mirror a common 2x A100 fine-tuning setup (FP16, head_dim 128,
seq_len 1024, tensor parallel 2, four consumer NVMe drives per GPU) so that a
minimal config file reproduces the canonical evaluation points.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Union

from .errors import InvalidConfig

ENCODER_ONLY = "encoder-only"
DECODER_ONLY = "decoder-only"
ENCODER_DECODER = "encoder-decoder"

_FAMILIES = (ENCODER_ONLY, DECODER_ONLY, ENCODER_DECODER)

# Accepted spellings in config files, canonicalized on load.
_FAMILY_ALIASES = {
    "bert": ENCODER_ONLY,
    "gpt": DECODER_ONLY,
    "t5": ENCODER_DECODER,
}

DEFAULT_VOCAB_SIZE = 50257  # calibration assumption; see README


@dataclass(frozen=True)
class ModelConfig:
    """Transformer shape and batch geometry for one training run."""

    hidden_dim: int
    num_layers: int
    num_heads: int
    family: str = ENCODER_ONLY
    head_dim: int = 128
    seq_len: int = 1024
    micro_batch: int = 16
    vocab_size: int = DEFAULT_VOCAB_SIZE
    bytes_per_element: int = 2

    @classmethod
    def from_hidden(cls, hidden_dim: int, num_layers: int, **kwargs) -> "ModelConfig":
        """Build a config deriving num_heads from hidden_dim / head_dim."""
        head_dim = kwargs.pop("head_dim", 128)
        num_heads = kwargs.pop("num_heads", hidden_dim // head_dim)
        return cls(
            hidden_dim=hidden_dim,
            num_layers=num_layers,
            num_heads=num_heads,
            head_dim=head_dim,
            **kwargs,
        )

    def decoder_layers(self) -> int:
        """Layers carrying cross-attention (encoder-decoder only)."""
        if self.family == ENCODER_DECODER:
            return self.num_layers // 2
        return 0


@dataclass(frozen=True)
class ParallelismConfig:
    tp_degree: int = 1
    pp_degree: int = 1
    dp_degree: int = 1
    zero_stage: int = 0
    num_microbatches: int = 1

    def gpus(self) -> int:
        return self.tp_degree * self.pp_degree * self.dp_degree


@dataclass(frozen=True)
class HardwareConfig:
    """Per-GPU compute/memory figures plus the local SSD array."""

    gpu_flops: float = 312e12          # dense FP16 peak
    gpu_flops_efficiency: float = 0.5  # achieved fraction of peak
    gpu_mem_bw: float = 1.555e12
    gpu_mem_capacity: float = 40e9
    ssd_count: int = 4
    ssd_write_bw: float = 5e9          # per drive, sequential
    ssd_rated_endurance: float = 600e12  # bytes written, vendor TBW rating
    jesd_waf: float = 2.5              # write amplification assumed by the rating
    actual_waf: float = 1.0            # amplification of our append-only stream
    retention_relax_factor: float = 86.0
    interconnect_bw: float = 300e9

    def array_write_bw(self) -> float:
        return self.ssd_count * self.ssd_write_bw


def _positive(violations: list[str], name: str, value) -> None:
    if not value > 0:
        violations.append(f"{name}: must be positive, got {value!r}")


def validate_model(m: ModelConfig) -> list[str]:
    v: list[str] = []
    if m.family not in _FAMILIES:
        v.append(f"model.family: expected one of {_FAMILIES}, got {m.family!r}")
    for name in ("hidden_dim", "num_layers", "num_heads", "head_dim",
                 "seq_len", "micro_batch", "vocab_size", "bytes_per_element"):
        value = getattr(m, name)
        if not isinstance(value, int) or value < 1:
            v.append(f"model.{name}: must be an integer >= 1, got {value!r}")
    if isinstance(m.hidden_dim, int) and isinstance(m.num_heads, int) and \
            isinstance(m.head_dim, int) and m.hidden_dim != m.num_heads * m.head_dim:
        v.append(
            f"model.hidden_dim: must equal num_heads * head_dim "
            f"({m.num_heads} * {m.head_dim} = {m.num_heads * m.head_dim}), got {m.hidden_dim}"
        )
    return v


def validate_parallelism(p: ParallelismConfig) -> list[str]:
    v: list[str] = []
    for name in ("tp_degree", "pp_degree", "dp_degree", "num_microbatches"):
        value = getattr(p, name)
        if not isinstance(value, int) or value < 1:
            v.append(f"parallelism.{name}: must be an integer >= 1, got {value!r}")
    if p.zero_stage not in (0, 1, 2, 3):
        v.append(f"parallelism.zero_stage: must be 0..3, got {p.zero_stage!r}")
    return v


def validate_hardware(h: HardwareConfig) -> list[str]:
    v: list[str] = []
    for name in ("gpu_flops", "gpu_mem_bw", "gpu_mem_capacity", "ssd_write_bw",
                 "ssd_rated_endurance", "retention_relax_factor", "interconnect_bw"):
        _positive(v, f"hardware.{name}", getattr(h, name))
    if not (isinstance(h.ssd_count, int) and h.ssd_count >= 1):
        v.append(f"hardware.ssd_count: must be an integer >= 1, got {h.ssd_count!r}")
    if not 0 < h.gpu_flops_efficiency <= 1:
        v.append(
            f"hardware.gpu_flops_efficiency: must be in (0, 1], got {h.gpu_flops_efficiency!r}"
        )
    if not h.actual_waf >= 1:
        v.append(f"hardware.actual_waf: must be >= 1, got {h.actual_waf!r}")
    if h.actual_waf >= 1 and not h.jesd_waf >= h.actual_waf:
        v.append(
            f"hardware.jesd_waf: must be >= actual_waf ({h.actual_waf}), got {h.jesd_waf!r}"
        )
    return v


_Config = Union[ModelConfig, ParallelismConfig, HardwareConfig]

_VALIDATORS = {
    ModelConfig: validate_model,
    ParallelismConfig: validate_parallelism,
    HardwareConfig: validate_hardware,
}


def validate(config: _Config) -> _Config:
    """Return ``config`` unchanged if every invariant holds.

    Raises InvalidConfig carrying the complete list of violations, one entry
    per offending field, so nothing has to be fixed blind. Idempotent.
    """
    try:
        checker = _VALIDATORS[type(config)]
    except KeyError:
        raise TypeError(f"not a config type: {type(config).__name__}") from None
    violations = checker(config)
    if violations:
        raise InvalidConfig(violations)
    return config


# -- config files -----------------------------------------------------------
#
# INI-style text with [model], [parallelism], [hardware], and optionally
# [activation_profile] and [storage] sections. Unknown sections or keys are
# hard errors: a typo must never silently fall back to a default.

_MODEL_KEYS = {
    "family": str,
    "hidden_dim": int,
    "num_layers": int,
    "num_heads": int,
    "head_dim": int,
    "seq_len": int,
    "micro_batch": int,
    "vocab_size": int,
    "bytes_per_element": int,
}

_PARALLELISM_KEYS = {
    "tp_degree": int,
    "pp_degree": int,
    "dp_degree": int,
    "zero_stage": int,
    "num_microbatches": int,
}

_HARDWARE_KEYS = {
    "gpu_flops": float,
    "gpu_flops_efficiency": float,
    "gpu_mem_bw": float,
    "gpu_mem_capacity": float,
    "ssd_count": int,
    "ssd_write_bw": float,
    "ssd_rated_endurance": float,
    "jesd_waf": float,
    "actual_waf": float,
    "retention_relax_factor": float,
    "interconnect_bw": float,
}

_PROFILE_KEYS = {
    "shared_bytes_per_token_dim": float,
    "sharded_bytes_per_token_dim": float,
    "cross_attention_extra": float,
    "flash_attention": bool,
}

_STORAGE_KEYS = {
    "write_bw": float,
    "read_bw": float,
    "fixed_latency": float,
}

_SECTIONS = {
    "model": _MODEL_KEYS,
    "parallelism": _PARALLELISM_KEYS,
    "hardware": _HARDWARE_KEYS,
    "activation_profile": _PROFILE_KEYS,
    "storage": _STORAGE_KEYS,
}

_BOOL_STRINGS = {
    "true": True, "yes": True, "on": True, "1": True,
    "false": False, "no": False, "off": False, "0": False,
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs, parsed and validated."""

    model: ModelConfig
    parallelism: ParallelismConfig
    hardware: HardwareConfig
    # Kept as plain dicts here to avoid an import cycle; activations/harness
    # construct their dataclasses from these.
    activation_profile: dict = field(default_factory=dict)
    storage: dict = field(default_factory=dict)


def _coerce(section: str, key: str, raw: str, kind, violations: list[str]):
    raw = raw.strip()
    try:
        if kind is bool:
            try:
                return _BOOL_STRINGS[raw.lower()]
            except KeyError:
                raise ValueError(raw)
        if kind is int:
            # Allow "4e3"-style ints written as floats if exact.
            as_float = float(raw)
            as_int = int(as_float)
            if as_int != as_float:
                raise ValueError(raw)
            return as_int
        return kind(raw)
    except (ValueError, TypeError):
        violations.append(
            f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}"
        )
        return None


def load_config_file(path: Union[str, Path]) -> RunConfig:
    """Parse and validate an INI config file.

    Missing sections or keys take package defaults; unknown sections/keys and
    unparseable values are collected and raised together as InvalidConfig.
    """
    path = Path(path)
    parser = configparser.ConfigParser()
    try:
        with path.open() as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise InvalidConfig([f"config file: {exc}"]) from exc
    except configparser.Error as exc:
        raise InvalidConfig([f"config file: {exc}"]) from exc

    violations: list[str] = []
    parsed: dict[str, dict] = {name: {} for name in _SECTIONS}

    for section in parser.sections():
        if section not in _SECTIONS:
            violations.append(f"{section}: unknown section")
            continue
        known = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in known:
                violations.append(f"{section}.{key}: unknown key")
                continue
            value = _coerce(section, key, raw, known[key], violations)
            if value is not None:
                parsed[section][key] = value

    if violations:
        raise InvalidConfig(violations)

    model_kwargs = dict(parsed["model"])
    if "family" in model_kwargs:
        fam = model_kwargs["family"].strip().lower()
        model_kwargs["family"] = _FAMILY_ALIASES.get(fam, fam)
    if "hidden_dim" in model_kwargs and "num_heads" not in model_kwargs:
        head_dim = model_kwargs.get("head_dim", 128)
        if head_dim > 0 and model_kwargs["hidden_dim"] % head_dim == 0:
            model_kwargs["num_heads"] = model_kwargs["hidden_dim"] // head_dim

    required = {"hidden_dim", "num_layers"}
    missing = required - model_kwargs.keys()
    if missing:
        raise InvalidConfig(
            [f"model.{name}: required key is missing" for name in sorted(missing)]
        )
    if "num_heads" not in model_kwargs:
        raise InvalidConfig(["model.num_heads: required (hidden_dim is not a "
                             "multiple of head_dim, so it cannot be derived)"])

    model = ModelConfig(**model_kwargs)
    parallelism = ParallelismConfig(**parsed["parallelism"])
    hardware = HardwareConfig(**parsed["hardware"])

    violations = (
        validate_model(model)
        + validate_parallelism(parallelism)
        + validate_hardware(hardware)
    )
    if violations:
        raise InvalidConfig(violations)

    return RunConfig(
        model=model,
        parallelism=parallelism,
        hardware=hardware,
        activation_profile=parsed["activation_profile"],
        storage=parsed["storage"],
    )


def with_updates(config, **changes):
    """dataclasses.replace with a friendlier name for CLI call sites."""
    return replace(config, **changes)


def config_as_dict(run: RunConfig) -> dict:
    """Flatten a RunConfig for the run manifest."""
    out: dict[str, dict] = {}
    for section_name in ("model", "parallelism", "hardware"):
        section = getattr(run, section_name)
        out[section_name] = {f.name: getattr(section, f.name) for f in fields(section)}
    out["activation_profile"] = dict(run.activation_profile)
    out["storage"] = dict(run.storage)
    return out
