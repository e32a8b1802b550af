"""Two-phase training, losses, checkpoints and synthesis.

Phase 1 pretrains f_DI, f_DV, f_CE, the decoder and the task-2 projection on
an autoencoding task (random dose level) plus an x -> y_SD prediction task,
each with L1 and optional adversarial loss. Phase 2 trains only the
autoregression streams with an image-space l2 loss on every dose of the
schedule, using teacher-forced contrast tokens.

Checkpoint layout (little-endian)::

    b"CAVMCKPT" | u32 version | u32 manifest_len | manifest (UTF-8 JSON) | float32 payload

The manifest holds the config, phase, step counter, optimizer scalars and a
tensor table of (name, shape, dtype, offset) with offsets into the payload.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericFault, Tensor
from .autoregression import ARModel, ar_infer, ar_teacher_forced, direct_synthesis
from .codec import Codec
from .config import ModelConfig
from .nn import Weights, init_patch_discriminator, patch_discriminator
from .phantom import VolumeSample

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CAVMCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingFault(NumericFault):
    def __init__(self, step: int, message: str):
        super().__init__(f"numeric fault at step {step}: {message}")
        self.step = step


# -- losses ---------------------------------------------------------------------

def _check_shapes(op: str, pred: Tensor, target) -> Tensor:
    target = ad.as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"{op}: prediction {pred.shape} vs target {target.shape}")
    return target


def l1_loss(pred: Tensor, target) -> Tensor:
    target = _check_shapes("l1_loss", pred, target)
    return ad.mean(ad.abs_(pred - target))


def l2_loss(pred: Tensor, target) -> Tensor:
    target = _check_shapes("l2_loss", pred, target)
    diff = pred - target
    return ad.mean(diff * diff)


def adversarial_losses(disc: Weights, real: Tensor, fake: Tensor) -> tuple[Tensor, Tensor]:
    """Non-saturating GAN losses on the patch-logit grid.

    loss_D sees a detached copy of ``fake`` so it never reaches the generator.
    """
    loss_d = ad.mean(ad.softplus(-patch_discriminator(real.detach(), disc))) + ad.mean(
        ad.softplus(patch_discriminator(fake.detach(), disc))
    )
    loss_g = ad.mean(ad.softplus(-patch_discriminator(fake, disc)))
    return loss_d, loss_g


# -- checkpoint ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    cfg: ModelConfig
    codec: Codec | None = None
    ar: ARModel | None = None
    disc: Weights | None = None
    phase: str = "init"
    step: int = 0
    optimizers: dict[str, AdamState] = field(default_factory=dict)

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.codec is not None:
            out.update({f"codec.{k}": v for k, v in self.codec.parameters().items()})
        if self.ar is not None:
            out.update({f"ar.{k}": v for k, v in self.ar.parameters().items()})
        if self.disc is not None:
            out.update({f"disc.{k}": v for k, v in self.disc.items()})
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: v.data for k, v in self.tensors().items()}
        for group, state in self.optimizers.items():
            for name, m in state.first_moment.items():
                arrays[f"opt.{group}.m.{name}"] = m
            for name, v in state.second_moment.items():
                arrays[f"opt.{group}.v.{name}"] = v
        return arrays

    def fresh_codec(self) -> Codec:
        if self.codec is None:
            raise CheckpointError("checkpoint holds no tokenizer/decoder weights")
        return self.codec

    def save(self, path: str | Path) -> None:
        write_checkpoint(self, path)


def _blank(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Expected shapes for every model tensor the config defines."""
    shapes = {f"codec.{k}": v.shape for k, v in Codec(cfg).parameters().items()}
    shapes.update({f"ar.{k}": v.shape for k, v in ARModel.create(cfg).parameters().items()})
    disc = init_patch_discriminator(1, cfg.codec.disc_width, np.random.default_rng(0))
    shapes.update({f"disc.{k}": v.shape for k, v in disc.items()})
    return shapes


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    arrays = ckpt.arrays()
    table, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "config": ckpt.cfg.to_dict(),
        "phase": ckpt.phase,
        "step": ckpt.step,
        "optimizers": {
            g: {"step_count": s.step_count, "learning_rate": s.learning_rate, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps}
            for g, s in ckpt.optimizers.items()
        },
        "tensors": table,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
            for chunk in chunks:
                fh.write(chunk)
        tmp.replace(path)
    finally:
        if tmp.exists():
            tmp.unlink()


def read_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode())
        cfg = ModelConfig.from_dict(manifest["config"], base=ModelConfig())
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    payload = raw[16 + mlen:]
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise OSError(f"{path}: truncated payload at tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(entry["shape"]).astype(np.float32)

    expected = _blank(cfg)
    for name, arr in arrays.items():
        if name.startswith("opt."):
            continue
        if name not in expected:
            raise CheckpointError(f"{path}: tensor {name} not defined by the stored config")
        if tuple(arr.shape) != tuple(expected[name]):
            raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, config expects {expected[name]}")

    def group(prefix: str) -> dict[str, Tensor]:
        return {k[len(prefix):]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith(prefix)}

    ckpt = Checkpoint(cfg, phase=manifest["phase"], step=manifest["step"])
    codec_flat = group("codec.")
    if codec_flat:
        ckpt.codec = Codec(cfg, weights=_nest(codec_flat, Codec.PARTS))
    ar_flat = group("ar.")
    if ar_flat:
        ckpt.ar = ARModel(cfg, _nest(ar_flat, ("fine", "coarse")))
    disc_flat = group("disc.")
    if disc_flat:
        ckpt.disc = disc_flat
    for g, scalars in manifest.get("optimizers", {}).items():
        state = AdamState(scalars["learning_rate"], scalars["beta1"], scalars["beta2"], scalars["eps"], scalars["step_count"])
        for kind, target in (("m", state.first_moment), ("v", state.second_moment)):
            prefix = f"opt.{g}.{kind}."
            target.update({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        ckpt.optimizers[g] = state
    for part in (ckpt.codec.weights.values() if ckpt.codec else []):
        _require_complete(part)
    return ckpt


def _nest(flat: dict[str, Tensor], parts: Sequence[str]) -> dict[str, Weights]:
    nested: dict[str, Weights] = {p: {} for p in parts}
    for key, value in flat.items():
        part, _, rest = key.partition(".")
        if part not in nested:
            raise CheckpointError(f"unexpected tensor group {part!r}")
        nested[part][rest] = value
    return nested


def _require_complete(weights: Weights) -> None:
    if not weights:
        raise CheckpointError("checkpoint is missing a weight group")


# -- data helpers ------------------------------------------------------------------------

def _batch(samples: Sequence[VolumeSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.x for s in samples]), np.stack([s.y_sd[None] for s in samples])


def _adam(cfg: ModelConfig) -> AdamState:
    o = cfg.optim
    return AdamState(o.learning_rate, o.beta1, o.beta2, o.eps)


class MetricsLog:
    """Line-delimited JSON records (step, loss components, wall time)."""

    def __init__(self, path: str | Path | None = None, echo: Callable[[dict], None] | None = None):
        self.path = Path(path) if path else None
        self.echo = echo
        self.start = time.perf_counter()
        self.records: list[dict] = []
        if self.path:
            self.path.write_text("")

    def __call__(self, step: int, **values) -> None:
        rec = {"step": step, **{k: float(v) for k, v in values.items()}, "wall_time": round(time.perf_counter() - self.start, 3)}
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if self.echo:
            self.echo(rec)


# -- phase 1 ------------------------------------------------------------------------------

def pretrain_tokenizers(
    dataset: Sequence[VolumeSample],
    cfg: ModelConfig,
    steps: int | None = None,
    checkpoint_path: str | Path | None = None,
    metrics: MetricsLog | None = None,
) -> Checkpoint:
    if len(dataset) < 2:
        raise ValueError(f"pretraining needs at least 2 samples, got {len(dataset)}")
    cfg.validate()
    steps = cfg.pretrain_steps if steps is None else steps
    rng = np.random.default_rng(cfg.seed)
    codec = Codec(cfg)
    use_adv = cfg.loss.adv > 0
    disc = init_patch_discriminator(1, cfg.codec.disc_width, np.random.default_rng(cfg.seed + 2))
    ckpt = Checkpoint(cfg, codec=codec, disc=disc, phase="pretrain")
    gen_params = codec.parameters()
    ckpt.optimizers["gen"] = _adam(cfg)
    if use_adv:
        ckpt.optimizers["disc"] = _adam(cfg)
    doses = (1 / 3, 2 / 3, 1.0)
    metrics = metrics or MetricsLog()
    bs = cfg.optim.batch_size

    for step in range(steps):
        idx = rng.integers(0, len(dataset), size=bs)
        chosen = rng.integers(0, 3, size=bs)
        samples = [dataset[i] for i in idx]
        x_np, y_sd_np = _batch(samples)
        y_d_np = np.stack([s.dose(doses[c])[None] for s, c in zip(samples, chosen)])
        x, y_sd, y_d = Tensor(x_np), Tensor(y_sd_np), Tensor(y_d_np)
        try:
            t_di = codec.encode_dose_invariant(x)
            recon = codec.decode(t_di, codec.encode_contrast(y_d))
            pred = codec.decode(t_di, codec.project(codec.encode_dose_variant(x)))
            ae_l1 = l1_loss(recon, y_d)
            i2i_l1 = l1_loss(pred, y_sd)
            loss = cfg.loss.l1 * (ae_l1 + i2i_l1)
            parts = {"ae_l1": ae_l1.item(), "i2i_l1": i2i_l1.item()}
            if use_adv:
                d1, g1 = adversarial_losses(disc, y_d, recon)
                d2, g2 = adversarial_losses(disc, y_sd, pred)
                loss = loss + cfg.loss.adv * (g1 + g2)
                loss_d = d1 + d2
                parts.update(adv_g=(g1 + g2).item(), adv_d=loss_d.item())
            grads = ad.backward(loss, gen_params)
            if use_adv:
                ad.adam_step(disc, ad.backward(loss_d, disc), ckpt.optimizers["disc"])
            ad.adam_step(gen_params, grads, ckpt.optimizers["gen"])
        except NumericFault as exc:
            raise TrainingFault(step, str(exc)) from exc
        ckpt.step = step + 1
        if cfg.log_every and (step % cfg.log_every == 0 or step == steps - 1):
            metrics(step, loss=loss.item(), **parts)
        if checkpoint_path and cfg.checkpoint_every and ckpt.step % cfg.checkpoint_every == 0:
            write_checkpoint(ckpt, checkpoint_path)
    if checkpoint_path:
        write_checkpoint(ckpt, checkpoint_path)
    return ckpt


# -- phase 2 -----------------------------------------------------------------------------

def _frozen_copy(codec: Codec) -> Codec:
    weights = {part: {k: Tensor(v.data, requires_grad=False) for k, v in w.items()} for part, w in codec.weights.items()}
    return Codec(codec.cfg, weights=weights)


def train_autoregression(
    dataset: Sequence[VolumeSample],
    pretrained: Checkpoint,
    cfg: ModelConfig | None = None,
    steps: int | None = None,
    checkpoint_path: str | Path | None = None,
    metrics: MetricsLog | None = None,
) -> Checkpoint:
    """Train the autoregression streams on teacher-forced sequences.

    With ``cfg.freeze_codec`` (default) tokenizer and decoder weights are
    never updated; the returned checkpoint shares their arrays unchanged.
    """
    if pretrained.codec is None:
        raise CheckpointError("train_autoregression needs a pretrained checkpoint with tokenizer/decoder weights")
    if not dataset:
        raise ValueError("empty dataset")
    cfg = (cfg or pretrained.cfg).validate()
    _check_codec_compatible(cfg, pretrained.cfg)
    steps = cfg.ar_steps if steps is None else steps
    rng = np.random.default_rng(cfg.seed + 7)
    model = ARModel.create(cfg)
    frozen = cfg.freeze_codec
    if frozen:
        codec = _frozen_copy(pretrained.codec)
        out_codec = pretrained.codec
    else:
        codec = Codec(cfg, weights={p: {k: Tensor(v.data.copy(), requires_grad=True) for k, v in w.items()} for p, w in pretrained.codec.weights.items()})
        out_codec = codec
    params = model.parameters()
    if not frozen:
        params.update({f"codec.{k}": v for k, v in codec.parameters().items()})
    ckpt = Checkpoint(cfg, codec=out_codec, ar=model, disc=pretrained.disc, phase="autoregression")
    ckpt.optimizers["ar"] = _adam(cfg)
    doses = model.doses
    cache: dict[int, tuple] = {}
    metrics = metrics or MetricsLog()

    def prepare(i: int):
        sample = dataset[i]
        x = Tensor(sample.x)
        targets = [Tensor(sample.dose(d)[None]) for d in doses]
        if not frozen:
            return x, targets, None, None, None
        if i not in cache:
            t_x = codec.encode_dose_variant(x)
            t_di = codec.encode_dose_invariant(x)
            t_doses = [codec.encode_contrast(t) for t in targets[:-1]]
            cache[i] = (t_x, t_di, t_doses)
        return (x, targets, *cache[i])

    for step in range(steps):
        idx = rng.integers(0, len(dataset), size=cfg.optim.batch_size)
        try:
            total = None
            parts = {}
            for i in idx:
                x, targets, t_x, t_di, t_doses = prepare(int(i))
                preds = ar_teacher_forced(x, [t for t in targets[:-1]], codec, model, t_x=t_x, t_doses=t_doses)
                if t_di is None:
                    t_di = codec.encode_dose_invariant(x)
                loss = None
                for k, (tokens, target) in enumerate(zip(preds, targets)):
                    term = cfg.loss.l2 * l2_loss(codec.decode(t_di, tokens), target)
                    if cfg.loss.token_l2 > 0 and k < len(preds) - 1:
                        ref = t_doses[k] if t_doses is not None else codec.encode_contrast(target)
                        term = term + cfg.loss.token_l2 * (l2_loss(tokens[0], ref[0].detach()) + l2_loss(tokens[1], ref[1].detach()))
                    loss = term if loss is None else loss + term
                    parts[f"l2_{k}"] = parts.get(f"l2_{k}", 0.0) + term.item()
                total = loss if total is None else total + loss
            total = total * (1.0 / len(idx))
            grads = ad.backward(total, params)
            ad.adam_step(params, grads, ckpt.optimizers["ar"])
        except NumericFault as exc:
            raise TrainingFault(step, str(exc)) from exc
        ckpt.step = step + 1
        if cfg.log_every and (step % cfg.log_every == 0 or step == steps - 1):
            metrics(step, loss=total.item(), **parts)
        if checkpoint_path and cfg.checkpoint_every and ckpt.step % cfg.checkpoint_every == 0:
            write_checkpoint(ckpt, checkpoint_path)
    if checkpoint_path:
        write_checkpoint(ckpt, checkpoint_path)
    return ckpt


def _check_codec_compatible(cfg: ModelConfig, other: ModelConfig) -> None:
    if dataclasses.asdict(cfg.codec) != dataclasses.asdict(other.codec) or (
        cfg.fine.token_dim,
        cfg.coarse.token_dim,
    ) != (other.fine.token_dim, other.coarse.token_dim):
        raise CheckpointError("config tokenizer geometry differs from the pretrained checkpoint")


# -- inference -------------------------------------------------------------------------------

def synthesize(x: np.ndarray, ckpt: Checkpoint) -> list[np.ndarray]:
    """Run the dose-increase inference; one (H, W) image per scheduled dose.

    A checkpoint without autoregression weights falls back to the direct
    (no-autoregression) decoder path and returns a single image.
    """
    codec = ckpt.fresh_codec()
    xt = Tensor(np.asarray(x, dtype=np.float32))
    if ckpt.ar is None:
        return [direct_synthesis(xt, codec).data[0]]
    return [img.data[0] for img in ar_infer(xt, codec, ckpt.ar)]
