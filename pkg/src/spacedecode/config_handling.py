# coding: utf-8

import logging
import os
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional

import simplejson

from .exceptions import SpaceInvalidConfig

logger = logging.getLogger(__name__)

__all__ = ["ModelConfig", "SamplingMode", "SamplingConfig", "VerificationMode", "DecodeConfig", "SarSftConfig",
           "RunPaths", "RunConfig"]

################################################################################
# Configuration reader/validator
#
# The run configuration is a JSON document with four sections:
#
#   { "model":  {...},  "decode": {...},  "sarsft": {...},  "paths": {...} }
#
# Every section is optional; absent keys take the defaults below.  Keys that are
# not listed in KNOWN are rejected (typos would otherwise be silently ignored).
# Command-line flags are applied on top of the file values.
################################################################################

# Known parameters -- flag others as potential typos!
KNOWN = {
    "model": [
        "vocab_size",
        "d_model",
        "n_layers",
        "n_heads",
        "d_ff",
        "max_position",
        "mask_token_id",
        "eos_token_id",
        "init_std",
        "mask_init_std",
        "layer_norm_eps",
        "seed",
    ],
    "decode": [
        "k",
        "sampling",
        "temperature",
        "top_p",
        "top_k",
        "verification",
        "max_new_tokens",
        "seed",
    ],
    "sarsft": [
        "k",
        "p_ar",
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "epochs",
        "batch_size",
        "schedule",
        "warmup_steps",
        "min_lr_ratio",
        "gradient_clip",
        "seed",
    ],
    "paths": [
        "checkpoint",
        "corpus",
        "report_dir",
    ],
}

SCHEDULES = ["cosine", "constant"]


class SamplingMode(Enum):
    GREEDY = 1
    STOCHASTIC = 2

    @staticmethod
    def from_string(mode_string: str) -> "SamplingMode":
        value = mode_string.strip().lower()
        if value == "greedy":
            return SamplingMode.GREEDY
        if value in ("stochastic", "sample", "sampling"):
            return SamplingMode.STOCHASTIC
        raise SpaceInvalidConfig(f"unknown sampling mode '{mode_string}' (greedy | stochastic)")


class VerificationMode(Enum):
    LOSSLESS_RESIDUAL = 1
    PAPER_LITERAL = 2
    GREEDY_MATCH = 3

    @staticmethod
    def from_string(mode_string: str) -> "VerificationMode":
        value = mode_string.strip().lower().replace("_", "-")
        for mode in VerificationMode:
            if mode.label == value:
                return mode
        raise SpaceInvalidConfig(f"unknown verification mode '{mode_string}' "
                                 f"({' | '.join(m.label for m in VerificationMode)})")

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 16
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_position: int = 128
    mask_token_id: int = 15
    eos_token_id: int = 14
    init_std: float = 0.02
    mask_init_std: float = 0.02
    layer_norm_eps: float = 1e-5
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_position"):
            if getattr(self, name) < 1:
                raise SpaceInvalidConfig(f"model '{name}' must be positive")
        if self.d_model % self.n_heads != 0:
            raise SpaceInvalidConfig(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.mask_token_id == self.eos_token_id:
            raise SpaceInvalidConfig("mask_token_id and eos_token_id must differ")
        for name in ("mask_token_id", "eos_token_id"):
            if not 0 <= getattr(self, name) < self.vocab_size:
                raise SpaceInvalidConfig(f"model '{name}' must be in [0, {self.vocab_size})")
        if self.vocab_size < 3:
            raise SpaceInvalidConfig("vocab_size must leave room for at least one ordinary token")
        if self.init_std <= 0 or self.mask_init_std <= 0 or self.layer_norm_eps <= 0:
            raise SpaceInvalidConfig("init_std, mask_init_std and layer_norm_eps must be positive")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def content_tokens(self) -> List[int]:
        """Token ids that are neither the mask token nor EOS."""
        return [t for t in range(self.vocab_size) if t not in (self.mask_token_id, self.eos_token_id)]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(values: Dict[str, Any]) -> "ModelConfig":
        unknown = set(values) - set(KNOWN["model"])
        if unknown:
            raise SpaceInvalidConfig(f"model config has unknown parameters: {sorted(unknown)}")
        return ModelConfig(**values).validate()


@dataclass(frozen=True)
class SamplingConfig:
    mode: SamplingMode = SamplingMode.GREEDY
    temperature: float = 1.0
    top_p: float = 0.95
    top_k: int = 10

    def validate(self) -> "SamplingConfig":
        if self.temperature <= 0:
            raise SpaceInvalidConfig("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise SpaceInvalidConfig("top_p must be in (0, 1]")
        if self.top_k < 0:
            raise SpaceInvalidConfig("top_k must be >= 0 (0 disables top-k)")
        return self

    @staticmethod
    def greedy() -> "SamplingConfig":
        return SamplingConfig(mode=SamplingMode.GREEDY)

    @staticmethod
    def untruncated(temperature: float = 1.0) -> "SamplingConfig":
        return SamplingConfig(mode=SamplingMode.STOCHASTIC, temperature=temperature, top_p=1.0, top_k=0)

    @property
    def is_greedy(self) -> bool:
        return self.mode == SamplingMode.GREEDY


@dataclass(frozen=True)
class DecodeConfig:
    k: int = 5
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    verification: VerificationMode = VerificationMode.GREEDY_MATCH
    max_new_tokens: int = 32
    seed: int = 0

    def validate(self) -> "DecodeConfig":
        if self.k < 1:
            raise SpaceInvalidConfig("decode 'k' must be >= 1")
        if self.max_new_tokens < 0:
            raise SpaceInvalidConfig("max_new_tokens must be >= 0")
        self.sampling.validate()
        if self.sampling.is_greedy and self.verification != VerificationMode.GREEDY_MATCH:
            raise SpaceInvalidConfig("greedy sampling requires greedy-match verification")
        if not self.sampling.is_greedy and self.verification == VerificationMode.GREEDY_MATCH:
            raise SpaceInvalidConfig("stochastic sampling requires lossless-residual or paper-literal verification")
        return self

    def with_k(self, k: int) -> "DecodeConfig":
        return replace(self, k=k).validate()

    def to_dict(self) -> Dict[str, Any]:
        return {"k": self.k, "sampling": self.sampling.mode.name.lower(), "temperature": self.sampling.temperature,
                "top_p": self.sampling.top_p, "top_k": self.sampling.top_k,
                "verification": self.verification.label, "max_new_tokens": self.max_new_tokens, "seed": self.seed}


@dataclass(frozen=True)
class SarSftConfig:
    k: int = 5
    p_ar: float = 0.5
    learning_rate: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 2
    batch_size: int = 4
    schedule: str = "cosine"
    warmup_steps: int = 0
    min_lr_ratio: float = 0.0
    gradient_clip: float = 1.0
    seed: int = 0

    def validate(self) -> "SarSftConfig":
        if self.k < 1:
            raise SpaceInvalidConfig("sarsft 'k' must be >= 1")
        if not 0.0 <= self.p_ar <= 1.0:
            raise SpaceInvalidConfig("p_ar must be in [0, 1]")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise SpaceInvalidConfig("learning_rate, epochs and batch_size must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise SpaceInvalidConfig("Adam betas must be in [0, 1)")
        if self.schedule not in SCHEDULES:
            raise SpaceInvalidConfig(f"schedule must be one of {SCHEDULES}")
        if self.warmup_steps < 0 or not 0.0 <= self.min_lr_ratio <= 1.0 or self.gradient_clip < 0:
            raise SpaceInvalidConfig("warmup_steps, min_lr_ratio and gradient_clip are out of range")
        return self

    @property
    def is_plain_sft(self) -> bool:
        return self.p_ar >= 1.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class RunPaths:
    checkpoint: str = "model.spc"
    corpus: str = "corpus.jsonl"
    report_dir: str = "reports"


class RunConfig(object):
    """
    Class to deal with all configuration loading and validation.
    """

    def __init__(self, config_file: Optional[str] = None, load=True) -> None:
        """
        :param config_file: JSON config file; None means "all defaults"
        """
        self.abs_config = os.path.abspath(os.path.expanduser(config_file)) if config_file else None
        self.source = f"Config file '{self.abs_config}'" if config_file else "Default config"
        self.the_config: Dict[str, Dict[str, Any]] = {}

        self.model = ModelConfig()
        self.decode = DecodeConfig()
        self.sarsft = SarSftConfig()
        self.paths = RunPaths()

        if load and self.abs_config:
            self.load_config()

    def load_config(self) -> None:
        if not os.path.exists(self.abs_config):
            raise SpaceInvalidConfig(f"{self.source} does not exist!")
        if os.path.isdir(self.abs_config):
            raise SpaceInvalidConfig(f"{self.source} is a directory!")

        try:
            with open(self.abs_config, encoding="utf-8") as fp:
                document = simplejson.load(fp)
        except (OSError, simplejson.JSONDecodeError) as err:
            raise SpaceInvalidConfig(f"{self.source} cannot be parsed: {err}")

        logger.debug(f"NOTE: using config file '{self.abs_config}'")
        if not isinstance(document, dict):
            raise SpaceInvalidConfig(f"{self.source} must hold a JSON object")

        extras = [key for key in document if key not in KNOWN]
        if extras:
            raise SpaceInvalidConfig(f"{self.source} has unknown sections: {extras}")
        for section, values in document.items():
            if not isinstance(values, dict):
                raise SpaceInvalidConfig(f"{self.source} section '{section}' must be an object")
            extras = [key for key in values if key not in KNOWN[section]]
            if extras:
                raise SpaceInvalidConfig(f"{self.source} section '{section}' has unknown parameters: {extras}")
        self.the_config = document

        self._model_check()
        self._decode_check()
        self._sarsft_check()
        self._paths_check()

    def _model_check(self) -> None:
        d = ModelConfig()
        vocab_size = self._as_int("model", "vocab_size", default=d.vocab_size, min_value=3)
        self.model = ModelConfig(
            vocab_size=vocab_size,
            d_model=self._as_int("model", "d_model", default=d.d_model, min_value=1),
            n_layers=self._as_int("model", "n_layers", default=d.n_layers, min_value=1),
            n_heads=self._as_int("model", "n_heads", default=d.n_heads, min_value=1),
            d_ff=self._as_int("model", "d_ff", default=d.d_ff, min_value=1),
            max_position=self._as_int("model", "max_position", default=d.max_position, min_value=1),
            mask_token_id=self._as_int("model", "mask_token_id", default=vocab_size - 1, min_value=0),
            eos_token_id=self._as_int("model", "eos_token_id", default=vocab_size - 2, min_value=0),
            init_std=self._as_float("model", "init_std", default=d.init_std, min_value=0.0),
            mask_init_std=self._as_float("model", "mask_init_std", default=d.mask_init_std, min_value=0.0),
            layer_norm_eps=self._as_float("model", "layer_norm_eps", default=d.layer_norm_eps, min_value=0.0),
            seed=self._as_int("model", "seed", default=d.seed),
        )
        try:
            self.model.validate()
        except SpaceInvalidConfig as err:
            raise SpaceInvalidConfig(f"{self.source}: {err}")

    def _decode_check(self) -> None:
        d = DecodeConfig()
        mode = SamplingMode.from_string(self._as_str("decode", "sampling", default="greedy",
                                                     allowed=["greedy", "stochastic"]))
        default_verification = "greedy-match" if mode == SamplingMode.GREEDY else "lossless-residual"
        sampling = SamplingConfig(
            mode=mode,
            temperature=self._as_float("decode", "temperature", default=d.sampling.temperature, min_value=0.0),
            top_p=self._as_float("decode", "top_p", default=d.sampling.top_p, min_value=0.0, max_value=1.0),
            top_k=self._as_int("decode", "top_k", default=d.sampling.top_k, min_value=0),
        )
        self.decode = DecodeConfig(
            k=self._as_int("decode", "k", default=d.k, min_value=1),
            sampling=sampling,
            verification=VerificationMode.from_string(self._as_str("decode", "verification",
                                                                   default=default_verification)),
            max_new_tokens=self._as_int("decode", "max_new_tokens", default=d.max_new_tokens, min_value=0),
            seed=self._as_int("decode", "seed", default=d.seed),
        )
        try:
            self.decode.validate()
        except SpaceInvalidConfig as err:
            raise SpaceInvalidConfig(f"{self.source}: {err}")

    def _sarsft_check(self) -> None:
        d = SarSftConfig()
        self.sarsft = SarSftConfig(
            k=self._as_int("sarsft", "k", default=d.k, min_value=1),
            p_ar=self._as_float("sarsft", "p_ar", default=d.p_ar, min_value=0.0, max_value=1.0),
            learning_rate=self._as_float("sarsft", "learning_rate", default=d.learning_rate, min_value=0.0),
            adam_beta1=self._as_float("sarsft", "adam_beta1", default=d.adam_beta1, min_value=0.0, max_value=1.0),
            adam_beta2=self._as_float("sarsft", "adam_beta2", default=d.adam_beta2, min_value=0.0, max_value=1.0),
            adam_eps=self._as_float("sarsft", "adam_eps", default=d.adam_eps, min_value=0.0),
            epochs=self._as_int("sarsft", "epochs", default=d.epochs, min_value=1),
            batch_size=self._as_int("sarsft", "batch_size", default=d.batch_size, min_value=1),
            schedule=self._as_str("sarsft", "schedule", default=d.schedule, allowed=SCHEDULES),
            warmup_steps=self._as_int("sarsft", "warmup_steps", default=d.warmup_steps, min_value=0),
            min_lr_ratio=self._as_float("sarsft", "min_lr_ratio", default=d.min_lr_ratio, min_value=0.0,
                                        max_value=1.0),
            gradient_clip=self._as_float("sarsft", "gradient_clip", default=d.gradient_clip, min_value=0.0),
            seed=self._as_int("sarsft", "seed", default=d.seed),
        )
        try:
            self.sarsft.validate()
        except SpaceInvalidConfig as err:
            raise SpaceInvalidConfig(f"{self.source}: {err}")

    def _paths_check(self) -> None:
        d = RunPaths()
        self.paths = RunPaths(
            checkpoint=self._as_path("paths", "checkpoint", default=d.checkpoint),
            corpus=self._as_path("paths", "corpus", default=d.corpus),
            report_dir=self._as_path("paths", "report_dir", default=d.report_dir),
        )

    # ----- Overrides ------------------------------------------------------------

    def apply_overrides(self, section: str, **values) -> None:
        """
        Apply command-line flag values on top of the loaded configuration; None means "not given".

        :raises SpaceInvalidConfig: on unknown keys or if the result does not validate
        """
        values = {key: value for key, value in values.items() if value is not None}
        if not values:
            return
        if section not in KNOWN:
            raise SpaceInvalidConfig(f"unknown configuration section '{section}'")
        extras = [key for key in values if key not in KNOWN[section]]
        if extras:
            raise SpaceInvalidConfig(f"unknown '{section}' overrides: {extras}")
        if section == "model":
            self.model = replace(self.model, **values).validate()
        elif section == "sarsft":
            self.sarsft = replace(self.sarsft, **values).validate()
        elif section == "paths":
            self.paths = replace(self.paths, **values)
        else:
            self.decode = self._decode_with(**values)

    def _decode_with(self, **values) -> DecodeConfig:
        sampling = self.decode.sampling
        if "sampling" in values:
            mode = SamplingMode.from_string(values.pop("sampling"))
            sampling = replace(sampling, mode=mode)
            if "verification" not in values:
                values["verification"] = ("greedy-match" if mode == SamplingMode.GREEDY
                                          else "lossless-residual")
        for key in ("temperature", "top_p", "top_k"):
            if key in values:
                sampling = replace(sampling, **{key: values.pop(key)})
        if "verification" in values:
            values["verification"] = VerificationMode.from_string(values["verification"])
        return replace(self.decode, sampling=sampling, **values).validate()

    # ----- Type Handlers ------------------------------------------------------------

    def _raw(self, section: str, param: str) -> Any:
        return self.the_config.get(section, {}).get(param)

    def _as_str(self,
                section: str,
                param: str,
                required: bool = False,
                default: str = "",
                allowed: List[str] = None) -> str:
        """
        Get a string parameter from the configuration.

        :param section: configuration section
        :param param: Name of the configuration parameter
        :param required: True if this must be specified in the configuration
        :param default: default value if not supplied
        :param allowed: optional list of permitted values
        :return: the string value, or default if not required and no exception
        :raises SpaceInvalidConfig:
        """
        value = self._raw(section, param)
        if value is None or (isinstance(value, str) and value.strip() == ""):
            if required:
                raise SpaceInvalidConfig(f"{self.source} has no '{section}.{param}' definition")
            value = default
        if not isinstance(value, str):
            raise SpaceInvalidConfig(f"{self.source} parameter '{section}.{param}' must be a string")
        value = value.strip()
        if allowed is not None and value not in allowed:
            raise SpaceInvalidConfig(f"{self.source} '{section}.{param}' does not specify an allowed value: "
                                     f"{allowed}")
        return value

    def _as_int(self,
                section: str,
                param: str,
                required: bool = False,
                default: int = -1,
                min_value: int = None) -> int:
        """
        Get an integer configuration parameter from the configuration.

        :param section: configuration section
        :param param: Name of the configuration parameter
        :param required: True if this must be specified in the configuration
        :param default: If not required, default value if not supplied
        :param min_value: minumum value allowed
        :return: the integer value, or default if not required and no exception
        :raises SpaceInvalidConfig:
        """
        value = self._raw(section, param)
        if value is None:
            if required:
                raise SpaceInvalidConfig(f"{self.source} has no '{section}.{param}' definition")
            value = default
        if isinstance(value, bool) or not isinstance(value, int):
            raise SpaceInvalidConfig(f"{self.source} parameter '{section}.{param}' must be an integer")
        if min_value is not None and value < min_value:
            raise SpaceInvalidConfig(f"{self.source} '{section}.{param}' must be greater or equal to {min_value}")
        return value

    def _as_float(self,
                  section: str,
                  param: str,
                  required: bool = False,
                  default: float = 0.0,
                  min_value: float = None,
                  max_value: float = None) -> float:
        """
        Get a real-valued configuration parameter (integers are accepted).

        :raises SpaceInvalidConfig:
        """
        value = self._raw(section, param)
        if value is None:
            if required:
                raise SpaceInvalidConfig(f"{self.source} has no '{section}.{param}' definition")
            value = default
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SpaceInvalidConfig(f"{self.source} parameter '{section}.{param}' must be a number")
        value = float(value)
        if min_value is not None and value < min_value:
            raise SpaceInvalidConfig(f"{self.source} '{section}.{param}' must be greater or equal to {min_value}")
        if max_value is not None and value > max_value:
            raise SpaceInvalidConfig(f"{self.source} '{section}.{param}' must be less or equal to {max_value}")
        return value

    def _as_path(self,
                 section: str,
                 param: str,
                 required: bool = False,
                 default: str = "") -> str:
        """
        Get a string parameter and treat it as a path.  Relative paths stay relative to the working
        directory; a "~/" at the beginning will be treated as the current user's home directory.

        :raises SpaceInvalidConfig:
        """
        value = self._as_str(section, param, required=required, default=default)
        if value == "":
            return value
        return os.path.expanduser(value)
