"""Dose-variant autoregression over two token scales.

One forward pass per scale computes

    out = seq + head(stack(seq @ W))

where ``stack`` is a series of staircase-masked LLaMA blocks with rotary
positions 0..K-1 over the whole sequence and ``head`` is a final RMSNorm
followed by a zero-initialised projection back to token width. Output block i
is the prediction for the (i+1)-th dose level of the schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor
from .codec import Codec, TokenSequence
from .config import ModelConfig, ScaleConfig
from .nn import AttentionConfig, Weights, build_staircase_mask, init_llama_block, llama_block, ones, rmsnorm, uniform_fan_in, zeros

SCALES = ("fine", "coarse")
DOSE_SCHEDULES = {1: (1.0,), 2: (1 / 3, 1.0), 3: (1 / 3, 2 / 3, 1.0)}
DOSE_ROLES = {1 / 3: "dose_LD", 2 / 3: "dose_HD", 1.0: "dose_SD"}


def make_placeholders(n: int, embed_dim: int, fill: float = 0.0, dtype=np.float32) -> Tensor:
    if n < 1 or embed_dim < 1:
        raise ValueError(f"placeholder block needs n >= 1 and embed_dim >= 1, got {n}, {embed_dim}")
    return Tensor(np.full((n, embed_dim), fill, dtype=dtype))


@dataclass
class ARModel:
    cfg: ModelConfig
    weights: dict[str, Weights]

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int | None = None, dtype=np.float32) -> "ARModel":
        rng = np.random.default_rng((cfg.seed if seed is None else seed) + 1)
        weights = {scale: init_stream(getattr(cfg, scale), cfg.rope_base, rng, dtype) for scale in SCALES}
        return cls(cfg, weights)

    @property
    def num_steps(self) -> int:
        return self.cfg.num_steps

    @property
    def num_blocks(self) -> int:
        return self.cfg.num_blocks

    @property
    def doses(self) -> tuple[float, ...]:
        return DOSE_SCHEDULES[self.cfg.num_steps]

    def attention_config(self, scale: str) -> AttentionConfig:
        s: ScaleConfig = getattr(self.cfg, scale)
        return AttentionConfig(s.embed_dim, s.num_heads, self.cfg.rope_base)

    def n_tokens(self, scale: str) -> int:
        grid = self.cfg.codec.fine_grid if scale == "fine" else self.cfg.codec.coarse_grid
        return grid * grid

    def sequence_length(self, scale: str) -> int:
        return self.num_blocks * self.n_tokens(scale)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{scale}.{k}": v for scale in SCALES for k, v in self.weights[scale].items()}


def init_stream(scale: ScaleConfig, rope_base: float, rng: np.random.Generator, dtype=np.float32) -> Weights:
    att = AttentionConfig(scale.embed_dim, scale.num_heads, rope_base)
    w: Weights = {"w_in": uniform_fan_in(rng, (scale.token_dim, scale.embed_dim), scale.token_dim, dtype)}
    for layer in range(scale.num_layers):
        w.update({f"layer{layer}.{k}": v for k, v in init_llama_block(att, rng, dtype).items()})
    w["norm_out"] = ones((scale.embed_dim,), dtype)
    w["w_out"] = zeros((scale.embed_dim, scale.token_dim), dtype)
    return w


def stream_forward(tokens: Tensor, n: int, weights: Weights, scale: ScaleConfig, rope_base: float) -> Tensor:
    """Staircase-masked pass over a (num_blocks * n, token_dim) sequence."""
    if tokens.ndim != 2 or tokens.shape[0] % n:
        raise ShapeError(f"stream: {tokens.shape} is not a whole number of {n}-token blocks")
    mask = build_staircase_mask(n, tokens.shape[0] // n)
    att = AttentionConfig(scale.embed_dim, scale.num_heads, rope_base)
    positions = range(tokens.shape[0])
    h = tokens @ weights["w_in"]
    for layer in range(scale.num_layers):
        prefix = f"layer{layer}."
        layer_w = {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}
        h = llama_block(h, mask, att, layer_w, positions)
    return tokens + rmsnorm(h, weights["norm_out"]) @ weights["w_out"]


def ar_forward(seq: TokenSequence, model: ARModel) -> TokenSequence:
    expected = model.sequence_length(seq.scale)
    if seq.tokens.shape[0] != expected or seq.n != model.n_tokens(seq.scale):
        raise ShapeError(f"ar_forward: {seq.scale} sequence of length {seq.tokens.shape[0]}, model expects {expected}")
    out = stream_forward(seq.tokens, seq.n, model.weights[seq.scale], getattr(model.cfg, seq.scale), model.cfg.rope_base)
    return TokenSequence(seq.scale, seq.n, seq.roles, out)


def _sequence(scale: str, blocks: list[Tensor], roles: list[str], model: ARModel) -> TokenSequence:
    n, dim = blocks[0].shape
    while len(blocks) < model.num_blocks:
        blocks.append(make_placeholders(n, dim, model.cfg.placeholder_fill, blocks[0].dtype))
        roles.append("placeholder")
    return TokenSequence.from_blocks(scale, blocks, roles)


def ar_infer(x: Tensor, codec: Codec, model: ARModel) -> list[Tensor]:
    """Gradual dose increase: one masked pass per step, decoding each new
    dose and re-encoding it with the contrast tokenizer for the next step.

    Returns one image per dose in the schedule (LD, HD, SD for three steps).
    """
    t_x = codec.encode_dose_variant(x)
    t_di = codec.encode_dose_invariant(x)
    updated: list[tuple[Tensor, Tensor]] = []
    images: list[Tensor] = []
    doses = model.doses
    for step, dose in enumerate(doses):
        predicted = []
        for s, scale in enumerate(SCALES):
            blocks = [t_x[s]] + [u[s] for u in updated]
            roles = ["input_x"] + [DOSE_ROLES[d] for d in doses[:step]]
            out = ar_forward(_sequence(scale, blocks, roles, model), model)
            predicted.append(out.block(step))
        image = codec.decode(t_di, tuple(predicted))
        images.append(image)
        if step < len(doses) - 1:
            updated.append(codec.encode_contrast(image))
    return images


def ar_teacher_forced(
    x: Tensor,
    dose_images: list[Tensor],
    codec: Codec,
    model: ARModel,
    t_x: tuple[Tensor, Tensor] | None = None,
    t_doses: list[tuple[Tensor, Tensor]] | None = None,
) -> list[tuple[Tensor, Tensor]]:
    """Single staircase-masked pass over (f_DV(x), f_CE(y_d1), ..., f_CE(y_d{S-1})).

    ``dose_images`` are the ground-truth images for every dose of the schedule
    except the last. Returns predicted (fine, coarse) tokens for every dose.
    Precomputed tokenizer outputs may be passed via ``t_x`` / ``t_doses``.
    """
    doses = model.doses
    if t_x is None:
        t_x = codec.encode_dose_variant(x)
    if t_doses is None:
        if len(dose_images) != len(doses) - 1:
            raise ValueError(f"expected {len(doses) - 1} teacher images, got {len(dose_images)}")
        t_doses = [codec.encode_contrast(y) for y in dose_images]
    outputs = []
    for s, scale in enumerate(SCALES):
        blocks = [t_x[s]] + [t[s] for t in t_doses]
        roles = ["input_x"] + [DOSE_ROLES[d] for d in doses[:-1]]
        outputs.append(ar_forward(_sequence(scale, blocks, roles, model), model))
    return [(outputs[0].block(i), outputs[1].block(i)) for i in range(len(doses))]


def decode_predictions(x: Tensor, predictions: list[tuple[Tensor, Tensor]], codec: Codec, t_di=None) -> list[Tensor]:
    if t_di is None:
        t_di = codec.encode_dose_invariant(x)
    return [codec.decode(t_di, p) for p in predictions]


def direct_synthesis(x: Tensor, codec: Codec) -> Tensor:
    """No-autoregression path: decoder fed projected f_DV tokens directly."""
    return codec.decode(codec.encode_dose_invariant(x), codec.project(codec.encode_dose_variant(x)))
