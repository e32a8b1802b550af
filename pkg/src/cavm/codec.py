"""Decomposition tokenizers, shared contrast tokenizer and reconstruction decoder.

Each encoder is a stack of stages built from 3x3 convolutions; a stage that
downsamples by 2**k uses k stride-2 convolutions followed by a stride-1
convolution whose (pre-activation) output is the stage output. The outputs of
the last two stages are the tokens: a fine grid at stride 8 and a coarse
grid at stride 16.

    f_DV: 2 stages, strides (8, 2)       -> dose-variant tokens of x
    f_DI: 4 stages, strides (2, 2, 2, 2) -> dose-invariant tokens of x
    f_CE: 4 stages, strides (2, 2, 2, 2) -> dose-variant tokens of a contrast image
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import COARSE_STRIDE, FINE_STRIDE, ModelConfig
from .nn import Weights, uniform_fan_in, zeros

ROLES = ("input_x", "dose_LD", "dose_HD", "dose_SD", "placeholder")


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int
    widths: tuple[int, ...]
    strides: tuple[int, ...]

    @property
    def stage_count(self) -> int:
        return len(self.widths)

    @property
    def token_strides(self) -> tuple[int, int]:
        total = np.cumprod(self.strides)
        return int(total[-2]), int(total[-1])


def encoder_configs(cfg: ModelConfig) -> dict[str, EncoderConfig]:
    c = cfg.codec
    fine, coarse = cfg.fine.token_dim, cfg.coarse.token_dim
    encoders = {
        "f_dv": EncoderConfig(c.in_channels, (fine, coarse), (FINE_STRIDE, 2)),
        "f_di": EncoderConfig(c.in_channels, tuple(c.di_widths), (2, 2, 2, 2)),
        "f_ce": EncoderConfig(1, (c.ce_widths[0], c.ce_widths[1], fine, coarse), (2, 2, 2, 2)),
    }
    for name, enc in encoders.items():
        if enc.token_strides != (FINE_STRIDE, COARSE_STRIDE):
            raise ShapeError(f"{name}: token strides {enc.token_strides} do not align with ({FINE_STRIDE}, {COARSE_STRIDE})")
    if encoders["f_dv"].widths[-2:] != encoders["f_ce"].widths[-2:]:
        raise ShapeError("f_DV and f_CE token widths differ")
    return encoders


# -- tokens -------------------------------------------------------------------

def to_tokens(feature: Tensor) -> Tensor:
    """(N, C, h, w) -> (N, h*w, C); row-major over the grid."""
    n, c, h, w = feature.shape
    return feature.reshape(n, c, h * w).transpose(0, 2, 1)


def from_tokens(tokens: Tensor, grid: int) -> Tensor:
    """(N, n, C) -> (N, C, grid, grid)."""
    n, count, c = tokens.shape
    if count != grid * grid:
        raise ShapeError(f"token block of {count} tokens does not fill a {grid}x{grid} grid")
    return tokens.transpose(0, 2, 1).reshape(n, c, grid, grid)


@dataclass
class TokenSequence:
    """Per-scale token blocks laid out back to back, shape (num_blocks * n, dim)."""

    scale: str
    n: int
    roles: tuple[str, ...]
    tokens: Tensor

    def __post_init__(self):
        if self.scale not in ("fine", "coarse"):
            raise ValueError(f"unknown token scale {self.scale!r}")
        for role in self.roles:
            if role not in ROLES:
                raise ValueError(f"unknown block role {role!r}")
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.n * len(self.roles):
            raise ShapeError(f"token tensor {self.tokens.shape} does not hold {len(self.roles)} blocks of {self.n}")

    @property
    def num_blocks(self) -> int:
        return len(self.roles)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def block(self, i: int) -> Tensor:
        return self.tokens[i * self.n:(i + 1) * self.n]

    @classmethod
    def from_blocks(cls, scale: str, blocks: Sequence[Tensor], roles: Sequence[str]) -> "TokenSequence":
        if len(blocks) != len(roles):
            raise ValueError("one role per block required")
        shapes = {b.shape for b in blocks}
        if len(shapes) != 1:
            raise ShapeError(f"token blocks differ in shape: {sorted(shapes)}")
        return cls(scale, blocks[0].shape[0], tuple(roles), ad.concat(list(blocks), axis=0))

    def check_placeholders(self, fill: float) -> bool:
        return all(
            bool(np.all(self.block(i).data == fill)) for i, role in enumerate(self.roles) if role == "placeholder"
        )


# -- encoders --------------------------------------------------------------------

def _conv_init(rng, cin: int, cout: int, dtype) -> tuple[Tensor, Tensor]:
    return uniform_fan_in(rng, (cout, cin, 3, 3), cin * 9, dtype), zeros((cout,), dtype)


def init_encoder(enc: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> Weights:
    w: Weights = {}
    cin = enc.in_channels
    for s, (width, stride) in enumerate(zip(enc.widths, enc.strides)):
        downs = int(np.log2(stride))
        if 2 ** downs != stride:
            raise ValueError(f"stage stride {stride} is not a power of two")
        for k in range(downs):
            w[f"s{s}.down{k}.w"], w[f"s{s}.down{k}.b"] = _conv_init(rng, cin, width, dtype)
            cin = width
        w[f"s{s}.out.w"], w[f"s{s}.out.b"] = _conv_init(rng, cin, width, dtype)
        cin = width
    return w


def run_encoder(x: Tensor, weights: Weights, enc: EncoderConfig) -> tuple[Tensor, Tensor]:
    """Returns (fine, coarse) tokens; (n, dim) for a (C,H,W) input, (N, n, dim) when batched."""
    squeeze = x.ndim == 3
    h = x.reshape((1,) + x.shape) if squeeze else x
    if h.ndim != 4 or h.shape[1] != enc.in_channels:
        raise ShapeError(f"encoder: expected ({enc.in_channels}, H, W) input, got {x.shape}")
    if h.shape[2] % COARSE_STRIDE or h.shape[3] % COARSE_STRIDE:
        raise ShapeError(f"encoder: spatial size {h.shape[2:]} not divisible by total stride {COARSE_STRIDE}")
    outputs = []
    for s, stride in enumerate(enc.strides):
        if s > 0:
            h = ad.silu(h)
        for k in range(int(np.log2(stride))):
            h = ad.silu(ad.conv2d(h, weights[f"s{s}.down{k}.w"], weights[f"s{s}.down{k}.b"], stride=2, padding=1))
        h = ad.conv2d(h, weights[f"s{s}.out.w"], weights[f"s{s}.out.b"], stride=1, padding=1)
        outputs.append(h)
    fine, coarse = to_tokens(outputs[-2]), to_tokens(outputs[-1])
    if squeeze:
        fine, coarse = fine.reshape(fine.shape[1:]), coarse.reshape(coarse.shape[1:])
    return fine, coarse


# -- decoder -------------------------------------------------------------------------

def init_decoder(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Weights:
    c = cfg.codec
    di = c.di_widths
    widths = c.decoder_widths
    ins = [
        cfg.coarse.token_dim + di[3],
        widths[0] + cfg.fine.token_dim + di[2],
        widths[1],
        widths[2],
    ]
    w: Weights = {}
    for s in range(4):
        w[f"s{s}.a.w"], w[f"s{s}.a.b"] = _conv_init(rng, ins[s], widths[s], dtype)
        w[f"s{s}.b.w"], w[f"s{s}.b.b"] = _conv_init(rng, widths[s], widths[s], dtype)
    w["head.w"], w["head.b"] = _conv_init(rng, widths[3], 1, dtype)
    return w


def decode(
    dose_invariant: tuple[Tensor, Tensor],
    dose_variant: tuple[Tensor, Tensor],
    weights: Weights,
    cfg: ModelConfig,
) -> Tensor:
    """Four upsampling stages; dose-variant and dose-invariant tokens are
    concatenated at the coarse (stage 0) and fine (stage 1) entry points.

    Returns (1, H, W), or (N, 1, H, W) for batched tokens.
    """
    di_fine, di_coarse = dose_invariant
    dv_fine, dv_coarse = dose_variant
    squeeze = dv_fine.ndim == 2
    grids = (cfg.codec.fine_grid, cfg.codec.coarse_grid)

    def grid(t: Tensor, g: int) -> Tensor:
        return from_tokens(t.reshape((1,) + t.shape) if t.ndim == 2 else t, g)

    try:
        fine = ad.concat([grid(dv_fine, grids[0]), grid(di_fine, grids[0])], axis=1)
        coarse = ad.concat([grid(dv_coarse, grids[1]), grid(di_coarse, grids[1])], axis=1)
    except ShapeError as exc:
        raise ShapeError(f"decode: token grid mismatch ({exc})") from None
    h = coarse
    for s in range(4):
        if s == 1:
            h = ad.concat([h, fine], axis=1)
        h = ad.silu(ad.conv2d(h, weights[f"s{s}.a.w"], weights[f"s{s}.a.b"], padding=1))
        h = ad.silu(ad.conv2d(h, weights[f"s{s}.b.w"], weights[f"s{s}.b.b"], padding=1))
        h = ad.upsample_nearest2d(h, 2)
    out = ad.conv2d(h, weights["head.w"], weights["head.b"], padding=1)
    return out.reshape(out.shape[1:]) if squeeze else out


# -- task-2 bridge -----------------------------------------------------------------------

def init_projection(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Weights:
    f, c = cfg.fine.token_dim, cfg.coarse.token_dim
    return {
        "fine.w": uniform_fan_in(rng, (f, f), f, dtype),
        "fine.b": zeros((f,), dtype),
        "coarse.w": uniform_fan_in(rng, (c, c), c, dtype),
        "coarse.b": zeros((c,), dtype),
    }


def project_dose_variant(tokens: tuple[Tensor, Tensor], weights: Weights) -> tuple[Tensor, Tensor]:
    """Learned per-scale 1x1 map from f_DV tokens into the decoder's dose-token slots."""
    fine, coarse = tokens
    return fine @ weights["fine.w"] + weights["fine.b"], coarse @ weights["coarse.w"] + weights["coarse.b"]


# -- bundle --------------------------------------------------------------------------------

class Codec:
    """Tokenizers, decoder and task-2 projection sharing one config.

    The contrast tokenizer is a single weight container reused for every dose level.
    """

    PARTS = ("f_dv", "f_di", "f_ce", "dec", "proj")

    def __init__(self, cfg: ModelConfig, weights: dict[str, Weights] | None = None, seed: int | None = None, dtype=np.float32):
        self.cfg = cfg
        self.encoders = encoder_configs(cfg)
        if weights is None:
            rng = np.random.default_rng(cfg.seed if seed is None else seed)
            weights = {name: init_encoder(enc, rng, dtype) for name, enc in self.encoders.items()}
            weights["dec"] = init_decoder(cfg, rng, dtype)
            weights["proj"] = init_projection(cfg, rng, dtype)
        self.weights = weights

    def encode_dose_variant(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return run_encoder(x, self.weights["f_dv"], self.encoders["f_dv"])

    def encode_dose_invariant(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return run_encoder(x, self.weights["f_di"], self.encoders["f_di"])

    def encode_contrast(self, y: Tensor) -> tuple[Tensor, Tensor]:
        return run_encoder(y, self.weights["f_ce"], self.encoders["f_ce"])

    def decode(self, dose_invariant, dose_variant) -> Tensor:
        return decode(dose_invariant, dose_variant, self.weights["dec"], self.cfg)

    def project(self, tokens):
        return project_dose_variant(tokens, self.weights["proj"])

    def parameters(self) -> dict[str, Tensor]:
        return {f"{part}.{k}": v for part in self.PARTS for k, v in self.weights[part].items()}


# module-level aliases matching the operation names
def encode_dose_variant(x: Tensor, codec: Codec) -> tuple[Tensor, Tensor]:
    return codec.encode_dose_variant(x)


def encode_dose_invariant(x: Tensor, codec: Codec) -> tuple[Tensor, Tensor]:
    return codec.encode_dose_invariant(x)


def encode_contrast(y: Tensor, codec: Codec) -> tuple[Tensor, Tensor]:
    return codec.encode_contrast(y)
