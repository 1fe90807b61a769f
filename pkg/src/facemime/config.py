"""Configuration tree: dataclasses, presets, and strict loading.

A RunConfig is resolved in three layers: preset defaults, then values from a
YAML config file, then ``--set key=value`` overrides. Unknown keys fail fast.
"""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any

import yaml

from .errors import ConfigError

VALID_PRESETS = ("toy64", "paper1024")

# Fraction of synthesis layers that may carry deformation offsets: 10 of 18
# at full scale, scaled proportionally for smaller resolutions.
DEFORM_LAYER_FRACTION = 10.0 / 18.0


def _default_channels(resolution: int, base: int, ch_max: int) -> dict[int, int]:
    channels = {}
    res = 4
    while res <= resolution:
        channels[res] = max(1, min(ch_max, base // res))
        res *= 2
    return channels


@dataclass
class GeneratorConfig:
    """Shape and behaviour of the style-based toy generator."""

    resolution: int = 64
    latent_dim: int = 128
    channels: dict[int, int] = field(default_factory=lambda: _default_channels(64, 1024, 256))
    n_deform_layers: int | None = None  # None -> proportional to 10/18
    truncation_psi: float = 0.7
    mapping_layers: int = 3
    noise_seed: int = 0  # frozen per-layer noise inputs

    @property
    def n_levels(self) -> int:
        return int(math.log2(self.resolution)) - 1

    @property
    def n_layers(self) -> int:
        """Total style-modulated conv layers (two per resolution level)."""
        return 2 * self.n_levels

    @property
    def deform_layers(self) -> int:
        if self.n_deform_layers is not None:
            return self.n_deform_layers
        return max(1, round(self.n_layers * DEFORM_LAYER_FRACTION))

    def level_resolutions(self) -> list[int]:
        return [4 * 2**i for i in range(self.n_levels)]

    def style_widths(self) -> list[int]:
        """Per-conv-layer style width (the conv's input channel count)."""
        widths = []
        prev = self.channels[4]
        for res in self.level_resolutions():
            ch = self.channels[res]
            if res == 4:
                widths += [ch, ch]  # conv on the constant input, then conv
            else:
                widths += [prev, ch]  # upsample-conv from prev level, then conv
            prev = ch
        return widths

    def validate(self) -> None:
        r = self.resolution
        if r < 32 or (r & (r - 1)) != 0:
            raise ConfigError(f"resolution must be a power of two >= 32, got {r}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if not 0.0 < self.truncation_psi <= 1.0:
            raise ConfigError(f"truncation_psi must be in (0, 1], got {self.truncation_psi}")
        expected = self.level_resolutions()
        keys = sorted(self.channels)
        if keys != expected:
            raise ConfigError(f"channel schedule keys {keys} != required resolutions {expected}")
        if any(c < 1 for c in self.channels.values()):
            raise ConfigError("all channel counts must be >= 1")
        if not 1 <= self.deform_layers <= self.n_layers:
            raise ConfigError(
                f"n_deform_layers must be in [1, {self.n_layers}], got {self.deform_layers}"
            )
        if self.mapping_layers < 1:
            raise ConfigError("mapping_layers must be >= 1")


@dataclass
class EncoderConfig:
    """Backbone + dual-head encoder shape."""

    backbone_widths: tuple[int, int, int] = (32, 64, 96)  # fine, medium, coarse
    backbone_depth: int = 1  # residual SE blocks per pyramid stage
    stem_width: int = 32
    head_width: int = 64  # map2style ladder channels
    deform_space: str = "stylespace"  # "stylespace" | "wplus" (no-hybrid ablation)
    # Style offsets per layer are predicted as deform_rank coefficients over a
    # learnable per-layer direction bank (0 = predict full-width offsets
    # directly). Facial deformation is low-dimensional; regressing a few
    # coefficients is conditioned far better than regressing every channel.
    deform_rank: int = 8
    progressive_stage: int | None = None  # None -> all layers active

    def validate(self, gen: GeneratorConfig) -> None:
        if len(self.backbone_widths) != 3:
            raise ConfigError("backbone_widths must list exactly 3 pyramid levels")
        if self.deform_space not in ("stylespace", "wplus"):
            raise ConfigError(f"unknown deform_space {self.deform_space!r}")
        if self.deform_rank < 0:
            raise ConfigError("deform_rank must be >= 0 (0 predicts offsets directly)")
        if self.progressive_stage is not None and not 1 <= self.progressive_stage <= gen.n_layers:
            raise ConfigError(
                f"progressive_stage must be in [1, {gen.n_layers}], got {self.progressive_stage}"
            )
        if min(self.backbone_widths) < 1 or self.stem_width < 1 or self.head_width < 1:
            raise ConfigError("backbone widths must be positive")
        if self.backbone_depth < 1:
            raise ConfigError("backbone_depth must be >= 1")


@dataclass
class LossWeights:
    """Weights of the total training objective."""

    l2: float = 1.0
    lpips: float = 0.8
    gv: float = 0.2
    id: float = 0.5
    w_id: float = 0.5
    d: float = 0.05
    reg: float = 0.005
    s: float = 1.0  # deformation-offset term inside the regularizer
    f: float = 1.0  # feature (masked) loss; active in the fine-tune stage only

    def validate(self) -> None:
        for fld in dataclasses.fields(self):
            v = getattr(self, fld.name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {fld.name} must be finite and >= 0, got {v}")


@dataclass
class TrainConfig:
    """One training stage."""

    stage: str = "pretrain"  # "pretrain" | "finetune"
    iterations: int = 2000
    batch_size: int = 4
    encoder_lr: float = 1e-3
    disc_lr: float = 1e-4
    # The deformation bank sees much weaker reconstruction gradients than the
    # identity path (offsets reach pixels only through style modulation), so
    # it gets its own learning-rate multiplier.
    deform_lr_mul: float = 1.0
    progressive_interval: int = 100  # iterations per newly unfrozen latent layer; 0 = off
    # Initial iterations rendered with zeroed offsets: the identity path has to
    # carry the whole appearance before the deformation head is allowed to move
    # pixels. Without this the offsets grab appearance early and never let go.
    warmup_iterations: int = 0
    optimizer: str = "ranger"  # "ranger" | "radam" | "adam"
    disc_enabled: bool = True
    r1_gamma: float = 10.0
    log_every: int = 25

    def validate(self) -> None:
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("ranger", "radam", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.progressive_interval < 0:
            raise ConfigError("progressive_interval must be >= 0 (0 disables growth)")
        if self.warmup_iterations < 0:
            raise ConfigError("warmup_iterations must be >= 0 (0 disables the warm-up)")
        if self.encoder_lr < 0 or self.disc_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.deform_lr_mul < 0:
            raise ConfigError("deform_lr_mul must be >= 0")


@dataclass
class CMAConfig:
    """Test-time generator adaptation."""

    steps: int = 150
    lr: float = 3e-4
    frame_subsample: int = 8
    perceptual_weight: float = 1.0
    l2_weight: float = 1.0
    divergence_factor: float = 5.0  # abort when loss exceeds this multiple of its start

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("cma.steps must be >= 0 (0 disables adaptation)")
        if self.frame_subsample < 1:
            raise ConfigError("cma.frame_subsample must be >= 1")
        if self.lr < 0 or self.perceptual_weight < 0 or self.l2_weight < 0:
            raise ConfigError("cma rates/weights must be >= 0")


@dataclass
class DataConfig:
    """Synthetic-oracle dataset shape."""

    n_identities: int = 16
    frames_per_clip: int = 32
    offset_scale: float = 4.0
    eval_identities: int = 8
    eval_frames_per_clip: int = 8
    max_frames_per_clip: int = 0  # subsample loaded clips; 0 = keep all

    def validate(self) -> None:
        if self.n_identities < 2 or self.frames_per_clip < 2:
            raise ConfigError("need >= 2 identities and >= 2 frames per clip for training")
        if self.offset_scale <= 0:
            raise ConfigError("offset_scale must be > 0")
        if self.max_frames_per_clip < 0:
            raise ConfigError("max_frames_per_clip must be >= 0")


@dataclass
class AblationFlags:
    """Toggles matching the published ablation rows."""

    no_id_reg: bool = False
    no_hybrid: bool = False
    no_cma: bool = False
    cma_as_pti: bool = False


@dataclass
class RunConfig:
    preset: str = "toy64"
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(warmup_iterations=600))
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage="finetune", iterations=500, encoder_lr=1e-4)
    )
    cma: CMAConfig = field(default_factory=CMAConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> None:
        if self.preset not in VALID_PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; valid: {VALID_PRESETS}")
        self.generator.validate()
        self.encoder.validate(self.generator)
        self.loss_weights.validate()
        self.pretrain.validate()
        self.finetune.validate()
        if self.pretrain.stage != "pretrain" or self.finetune.stage != "finetune":
            raise ConfigError("pretrain/finetune blocks must keep their stage names")
        self.cma.validate()
        self.data.validate()

    def resolved(self) -> "RunConfig":
        """Apply ablation flags that change module wiring, then validate."""
        if self.ablation.no_hybrid:
            self.encoder.deform_space = "wplus"
        self.validate()
        return self

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(to_plain_dict(self)).encode()).hexdigest()[:16]


def make_preset(name: str) -> RunConfig:
    if name == "toy64":
        return RunConfig(preset="toy64")
    if name == "paper1024":
        gen = GeneratorConfig(
            resolution=1024,
            latent_dim=512,
            channels=_default_channels(1024, 16384 * 2, 512),
            truncation_psi=0.7,
        )
        enc = EncoderConfig(backbone_widths=(64, 128, 256), stem_width=64,
                            head_width=128, deform_rank=0)
        return RunConfig(preset="paper1024", generator=gen, encoder=enc)
    raise ConfigError(f"unknown preset {name!r}; valid: {VALID_PRESETS}")


# ---------------------------------------------------------------------------
# strict mapping <-> dataclass plumbing


def to_plain_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_plain_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain_dict(v) for v in obj]
    return obj


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _coerce(value: Any, target_type: Any, path: str) -> Any:
    import typing

    origin = typing.get_origin(target_type)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin is dict:
        kt, vt = typing.get_args(target_type)
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return {_coerce_key(k, kt, path): _coerce(v, vt, path) for k, v in value.items()}
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a sequence, got {type(value).__name__}")
        elem = typing.get_args(target_type)[0]
        return tuple(_coerce(v, elem, path) for v in value)
    if origin is list:
        (elem,) = typing.get_args(target_type)
        return [_coerce(v, elem, path) for v in value]
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _coerce_key(key: Any, key_type: Any, path: str) -> Any:
    # JSON round-trips stringify integer mapping keys; accept digit strings.
    if key_type is int and isinstance(key, str) and key.lstrip("-").isdigit():
        key = int(key)
    return _coerce(key, key_type, path)


def _merge_into(cfg: Any, data: dict, path: str = "") -> Any:
    """Overlay a (possibly partial) mapping onto an existing dataclass tree."""
    import typing

    hints = typing.get_type_hints(type(cfg))
    names = {f.name for f in dataclasses.fields(cfg)}
    for key, value in data.items():
        here = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key: {here}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _merge_into(current, value, here)
        else:
            setattr(cfg, key, _coerce(value, hints[key], here))
    return cfg


def config_from_dict(template_cls: type, data: dict) -> Any:
    """Rebuild a config dataclass from a plain mapping (strict keys)."""
    return _merge_into(template_cls(), data)


def load_run_config(
    config_path: str | None = None,
    overrides: list[str] | None = None,
    preset: str | None = None,
) -> RunConfig:
    """Resolve preset defaults -> YAML file -> --set overrides, strictly."""
    file_data: dict = {}
    if config_path is not None:
        try:
            with open(config_path) as fh:
                file_data = yaml.safe_load(fh) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse config file {config_path}: {exc}") from exc
        if not isinstance(file_data, dict):
            raise ConfigError(f"config file {config_path} must contain a mapping")

    preset_name = preset or file_data.get("preset", "toy64")
    if not isinstance(preset_name, str):
        raise ConfigError(f"preset must be a string, got {preset_name!r}")
    cfg = make_preset(preset_name)
    _merge_into(cfg, file_data)

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse override value {raw!r}: {exc}") from exc
        tree: dict = {}
        node = tree
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node[part] = {}
            node = node[part]
        node[parts[-1]] = value
        _merge_into(cfg, tree)

    return cfg.resolved()
