"""Model, training and loss configuration with the toy and paper presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

# fixed by the architecture: f_DI/f_CE have four stride-2 stages, the decoder four x2 upsamplings
FINE_STRIDE = 8
COARSE_STRIDE = 16
IMAGE_CHANNELS = 4  # T1w, T2w, FLAIR surrogates + tumor mask


class ConfigError(ValueError):
    pass


@dataclass
class ScaleConfig:
    """One token scale: tokenizer width plus the Transformer stream that autoregresses it."""

    token_dim: int
    embed_dim: int
    num_heads: int
    num_layers: int
    max_seq_len: int


@dataclass
class CodecConfig:
    image_size: int = 64
    in_channels: int = IMAGE_CHANNELS
    di_widths: tuple[int, int, int, int] = (16, 24, 48, 64)
    ce_widths: tuple[int, int] = (16, 24)
    dv_width: int = 24
    decoder_widths: tuple[int, int, int, int] = (64, 48, 32, 16)
    disc_width: int = 16

    @property
    def fine_grid(self) -> int:
        return self.image_size // FINE_STRIDE

    @property
    def coarse_grid(self) -> int:
        return self.image_size // COARSE_STRIDE


@dataclass
class OptimConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 1


@dataclass
class LossConfig:
    l1: float = 1.0
    adv: float = 0.01
    l2: float = 1.0
    token_l2: float = 0.0


@dataclass
class ModelConfig:
    preset: str = "toy"
    codec: CodecConfig = field(default_factory=CodecConfig)
    fine: ScaleConfig = field(default_factory=lambda: ScaleConfig(32, 32, 2, 2, 3 * 64))
    coarse: ScaleConfig = field(default_factory=lambda: ScaleConfig(48, 48, 4, 2, 3 * 16))
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    num_steps: int = 3
    placeholder_fill: float = 0.0
    rope_base: float = 10000.0
    freeze_codec: bool = True
    pretrain_steps: int = 1000
    ar_steps: int = 1000
    checkpoint_every: int = 0
    log_every: int = 50
    seed: int = 0

    def validate(self) -> "ModelConfig":
        c = self.codec
        if c.image_size < 16 or c.image_size % COARSE_STRIDE:
            raise ConfigError(f"image_size {c.image_size} must be a positive multiple of {COARSE_STRIDE}")
        if c.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.num_steps not in (1, 2, 3):
            raise ConfigError(f"num_steps must be 1, 2 or 3, got {self.num_steps}")
        for name, scale, n in (("fine", self.fine, c.fine_grid ** 2), ("coarse", self.coarse, c.coarse_grid ** 2)):
            if scale.embed_dim % scale.num_heads or (scale.embed_dim // scale.num_heads) % 2:
                raise ConfigError(f"{name}: embed_dim {scale.embed_dim} needs an even head_dim with {scale.num_heads} heads")
            if scale.num_layers < 1:
                raise ConfigError(f"{name}: num_layers must be >= 1")
            need = self.num_blocks * n
            if need > scale.max_seq_len:
                raise ConfigError(f"{name}: sequence length {need} exceeds max_seq_len {scale.max_seq_len}")
        if self.optim.learning_rate <= 0 or self.optim.batch_size < 1:
            raise ConfigError("learning_rate must be > 0 and batch_size >= 1")
        for key, value in dataclasses.asdict(self.loss).items():
            if value < 0:
                raise ConfigError(f"loss weight {key} must be >= 0")
        return self

    @property
    def num_blocks(self) -> int:
        # a one-step model still carries one trailing placeholder block
        return max(self.num_steps, 2)

    # -- serialisation --------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: "ModelConfig | None" = None) -> "ModelConfig":
        """Overlay ``data`` on ``base`` (default: the preset named in data, else toy).

        Unknown keys raise :class:`ConfigError`.
        """
        data = dict(data)
        if base is None:
            base = preset(data.get("preset", "toy"))
        merged = _overlay(dataclasses.asdict(base), data, "")
        cfg = cls(
            **{
                **merged,
                "codec": CodecConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in merged["codec"].items()}),
                "fine": ScaleConfig(**merged["fine"]),
                "coarse": ScaleConfig(**merged["coarse"]),
                "optim": OptimConfig(**merged["optim"]),
                "loss": LossConfig(**merged["loss"]),
            }
        )
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def _overlay(base: dict, update: dict, path: str) -> dict:
    out = dict(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be a mapping")
            out[key] = _overlay(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def toy_config(**overrides) -> ModelConfig:
    """64x64 CPU preset; a larger step size so 1500+1500 steps converge in minutes."""
    cfg = ModelConfig(optim=OptimConfig(learning_rate=1e-3), pretrain_steps=1500, ar_steps=1500)
    return dataclasses.replace(cfg, **overrides).validate()


def tiny_config(**overrides) -> ModelConfig:
    """16x16 images, single-token coarse grid; for gradient checks and fast tests."""
    cfg = ModelConfig(
        preset="tiny",
        codec=CodecConfig(
            image_size=16,
            di_widths=(3, 4, 5, 6),
            ce_widths=(3, 4),
            dv_width=3,
            decoder_widths=(6, 5, 4, 3),
            disc_width=2,
        ),
        fine=ScaleConfig(4, 8, 2, 2, 3 * 4),
        coarse=ScaleConfig(6, 8, 2, 2, 3 * 1),
    )
    return dataclasses.replace(cfg, **overrides).validate()


def paper_config() -> ModelConfig:
    """Transformer hyperparameters as published; 96x96 makes the fine stream exactly 432 tokens."""
    return ModelConfig(
        preset="paper",
        codec=CodecConfig(image_size=96),
        fine=ScaleConfig(384, 384, 4, 4, 432),
        coarse=ScaleConfig(768, 768, 8, 8, 864),
        optim=OptimConfig(learning_rate=1e-4, beta1=0.9, beta2=0.99, batch_size=1),
    ).validate()


def preset(name: str) -> ModelConfig:
    try:
        return {"toy": toy_config, "tiny": tiny_config, "paper": paper_config}[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}") from None
