"""Synthetic dose-ramp phantoms, dose interpolation, normalisation and the sample file format.

Randomness comes from raw 64-bit PCG64 outputs converted to doubles by hand,
so a seed reproduces the same bytes regardless of numpy's distribution code.

Sample file layout (little-endian)::

    b"CAVM" | u32 version | u32 header_len | header (UTF-8 JSON) | float32 planes

The header lists ``channels`` (plane names in payload order), ``shape``
(H, W), ``dtype`` and ``seed``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CAVM"
VERSION = 1
CHANNELS = ("t1w", "t2w", "flair", "tumor_mask", "t1gd")
DOSE_LEVELS = (0.0, 1 / 3, 2 / 3, 1.0)


class SampleFormatError(ValueError):
    pass


class UnsupportedVersionError(SampleFormatError):
    pass


class PhantomRng:
    """Uniform/normal draws built on PCG64.random_raw (stable across numpy releases)."""

    def __init__(self, seed: int):
        self._bits = np.random.PCG64(seed)

    def uniform(self, low: float = 0.0, high: float = 1.0, size: int | None = None):
        raw = self._bits.random_raw(1 if size is None else size)
        u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u

    def normal(self, size: int) -> np.ndarray:
        # Box-Muller on (0, 1] uniforms
        u1 = 1.0 - self.uniform(size=size)
        u2 = self.uniform(size=size)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@dataclass
class VolumeSample:
    x_nc: np.ndarray  # (3, H, W)
    x_tm: np.ndarray  # (H, W), {0, 1}
    y_sd: np.ndarray  # (H, W)
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.y_sd.shape[-1]

    @property
    def x(self) -> np.ndarray:
        """Model input: non-contrast channels stacked with the tumor mask, (4, H, W)."""
        return np.concatenate([self.x_nc, self.x_tm[None]], axis=0)

    def dose(self, d: float) -> np.ndarray:
        return dose_interpolate(self.x_nc[0], self.y_sd, d)

    @property
    def y_ld(self) -> np.ndarray:
        return self.dose(1 / 3)

    @property
    def y_hd(self) -> np.ndarray:
        return self.dose(2 / 3)

    @property
    def brain(self) -> np.ndarray:
        return self.y_sd > 0


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    """Normalised elliptical radius at every pixel (<= 1 inside)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.sqrt((u / rx) ** 2 + (v / ry) ** 2)


def _texture(rng: PhantomRng, size: int, waves: int = 6) -> np.ndarray:
    """Smooth field in [-1, 1] from a few random low-frequency plane waves."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    field_ = np.zeros((size, size))
    freq = rng.uniform(1.0, 4.0, size=waves)
    theta = rng.uniform(0.0, 2 * np.pi, size=waves)
    phase = rng.uniform(0.0, 2 * np.pi, size=waves)
    for f, t, p in zip(freq, theta, phase):
        field_ += np.cos(2 * np.pi * f * (math.cos(t) * xx + math.sin(t) * yy) + p)
    return field_ / waves


def generate_phantom(seed: int, size: int = 64) -> VolumeSample:
    """Elliptical brain with a rim-enhancing elliptical tumor.

    Channel 0 (T1w-like) is the dose-0 image; the standard-dose target adds an
    enhancement field on the tumor rim whose amplitude is a random fraction
    in [0.3, 0.8] of the mean brain intensity. The FLAIR-like channel's
    tumor signal grows with that amplitude.
    """
    if size < 32 or size % 2:
        raise ValueError(f"phantom size must be an even integer >= 32, got {size}")
    rng = PhantomRng(seed)
    s = float(size)

    cy, cx = s / 2 + rng.uniform(-0.03, 0.03) * s, s / 2 + rng.uniform(-0.03, 0.03) * s
    bry, brx = rng.uniform(0.36, 0.44) * s, rng.uniform(0.30, 0.38) * s
    brain_angle = rng.uniform(-0.3, 0.3)
    brain_r = _ellipse(size, cy, cx, bry, brx, brain_angle)
    brain = brain_r <= 1.0

    try_ry, try_rx = rng.uniform(0.08, 0.15) * s, rng.uniform(0.08, 0.15) * s
    tumor_angle = rng.uniform(0.0, np.pi)
    # tumor centre on the inner half of the brain so the whole tumor stays inside
    rad = rng.uniform(0.0, 0.35)
    phi = rng.uniform(0.0, 2 * np.pi)
    ty = cy + rad * (bry - max(try_ry, try_rx)) * math.sin(phi)
    tx = cx + rad * (brx - max(try_ry, try_rx)) * math.cos(phi)
    tumor_r = _ellipse(size, ty, tx, try_ry, try_rx, tumor_angle)
    tumor = (tumor_r <= 1.0) & brain
    rim = tumor & (tumor_r >= 0.5)

    tex = _texture(rng, size)
    tex2 = _texture(rng, size)
    gm_wm = 0.85 + 0.12 * tex
    # soft falloff at the brain edge gives a skull-like darker border
    edge = np.clip((1.0 - brain_r) * 6.0, 0.0, 1.0)
    t1 = np.where(brain, gm_wm * (0.75 + 0.25 * edge), 0.0)
    t1 = np.where(tumor, 0.62 + 0.05 * tex2, t1)

    amplitude = rng.uniform(0.3, 0.8)
    brain_mean = float(t1[brain].mean())
    profile = 0.6 + 0.4 * np.clip(1.0 - np.abs(tumor_r - 0.78) / 0.28, 0.0, 1.0)
    enhancement = np.where(rim, amplitude * brain_mean * profile, 0.0)

    t2 = np.where(brain, 1.35 - 0.9 * gm_wm + 0.05 * tex2, 0.0)
    t2 = np.where(tumor, 1.1 + 0.1 * tex, t2)
    edema = brain & (tumor_r <= 1.6) & ~tumor
    flair = np.where(brain, 0.55 + 0.08 * tex, 0.0)
    flair = np.where(edema, flair + 0.25, flair)
    flair = np.where(tumor, 0.6 + 0.9 * amplitude + 0.04 * tex2, flair)

    noise = 0.01 * rng.normal(size * size).reshape(size, size)
    t1 = np.where(brain, t1 + noise, 0.0)
    y_sd = t1 + enhancement

    scale = _p95(t1)
    x_nc = np.stack([t1 / scale, normalize_volume(t2), normalize_volume(flair)]).astype(np.float32)
    y = (y_sd / scale).astype(np.float32)
    # float32 rounding must not break y_sd == t1 off the rim
    y = np.where(rim, np.maximum(y, x_nc[0]), x_nc[0]).astype(np.float32)
    return VolumeSample(
        x_nc=x_nc,
        x_tm=tumor.astype(np.float32),
        y_sd=y,
        seed=int(seed),
        meta={"amplitude": amplitude, "rim_pixels": int(rim.sum())},
    )


def dose_interpolate(x_t1: np.ndarray, y_sd: np.ndarray, d: float) -> np.ndarray:
    """Linear enhancement ramp y_d = x + d * (y_SD - x); endpoints returned exactly."""
    x_t1 = np.asarray(x_t1)
    y_sd = np.asarray(y_sd)
    if x_t1.shape != y_sd.shape:
        raise ValueError(f"dose_interpolate: shapes differ, {x_t1.shape} vs {y_sd.shape}")
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"dose fraction must lie in [0, 1], got {d}")
    if d == 0.0:
        return x_t1.copy()
    if d == 1.0:
        return y_sd.copy()
    dtype = np.result_type(x_t1, y_sd)
    return (x_t1 + dtype.type(d) * (y_sd - x_t1)).astype(dtype)


def _p95(v: np.ndarray) -> float:
    return float(np.percentile(v, 95))


def normalize_volume(v: np.ndarray) -> np.ndarray:
    """Divide by the 95th percentile (linear interpolation over all voxels)."""
    v = np.asarray(v)
    if np.any(v < 0):
        raise ValueError("normalize_volume expects non-negative intensities")
    p = _p95(v)
    if p <= 0:
        raise ValueError("normalize_volume: 95th percentile is zero (empty or all-zero image)")
    return v / p


def center_crop(v: np.ndarray, size: int) -> np.ndarray:
    h, w = v.shape[-2:]
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return v[..., top:top + size, left:left + size]


# -- file format ---------------------------------------------------------------------

def write_planes(path: str | Path, planes: dict[str, np.ndarray], seed: int = 0, meta: dict | None = None) -> None:
    """Write named (H, W) float32 planes; temp file then rename."""
    path = Path(path)
    arrays = [np.ascontiguousarray(p, dtype="<f4") for p in planes.values()]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ValueError(f"planes must share one (H, W) shape, got {sorted(shapes)}")
    h, w = arrays[0].shape
    header = json.dumps(
        {"channels": list(planes), "shape": [h, w], "dtype": "float32", "seed": int(seed), "meta": meta or {}},
        sort_keys=True,
    ).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for a in arrays:
            fh.write(a.tobytes())
    tmp.replace(path)


def read_planes(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise SampleFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise OSError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported sample format version {version}")
    if len(raw) < 12 + header_len:
        raise OSError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len].decode())
        h, w = header["shape"]
        channels = list(header["channels"])
    except (ValueError, KeyError, TypeError) as exc:
        raise SampleFormatError(f"{path}: corrupt header ({exc})") from None
    if header.get("dtype") != "float32":
        raise SampleFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    body = raw[12 + header_len:]
    expected = len(channels) * h * w * 4
    if len(body) != expected:
        raise OSError(f"{path}: payload has {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body, dtype="<f4").reshape(len(channels), h, w).astype(np.float32)
    return dict(zip(channels, data)), header


def write_sample(sample: VolumeSample, path: str | Path) -> None:
    planes = dict(zip(CHANNELS, (sample.x_nc[0], sample.x_nc[1], sample.x_nc[2], sample.x_tm, sample.y_sd)))
    write_planes(path, planes, sample.seed, sample.meta)


def read_sample(path: str | Path) -> VolumeSample:
    planes, header = read_planes(path)
    if list(planes) != list(CHANNELS):
        raise SampleFormatError(f"{path}: expected channels {CHANNELS}, found {tuple(planes)}")
    return VolumeSample(
        x_nc=np.stack([planes["t1w"], planes["t2w"], planes["flair"]]),
        x_tm=planes["tumor_mask"].copy(),
        y_sd=planes["t1gd"].copy(),
        seed=int(header["seed"]),
        meta=header.get("meta", {}),
    )


def write_pgm(path: str | Path, image: np.ndarray, vmax: float | None = None) -> None:
    """8-bit binary PGM preview, linearly scaled from [0, vmax]."""
    image = np.asarray(image, dtype=np.float64)
    vmax = float(image.max()) if vmax is None else vmax
    scaled = np.clip(image / vmax if vmax > 0 else image * 0, 0.0, 1.0)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def load_split(root: str | Path, split: str) -> list[VolumeSample]:
    folder = Path(root) / split
    files = sorted(folder.glob("*.cavm"), key=lambda p: int(p.stem))
    return [read_sample(f) for f in files]
