"""Shared fixtures-by-function for the test modules."""

import dataclasses

import numpy as np

from cavm import autodiff as ad
from cavm.autodiff import Tensor
from cavm.autoregression import ARModel
from cavm.codec import Codec
from cavm.config import ScaleConfig, tiny_config


def small_config(**overrides):
    """tiny widths on 32x32 phantoms: the smallest size the generator accepts."""
    base = tiny_config()
    cfg = dataclasses.replace(
        base,
        codec=dataclasses.replace(base.codec, image_size=32),
        fine=ScaleConfig(4, 8, 2, 1, 48),
        coarse=ScaleConfig(6, 8, 2, 1, 12),
        log_every=1,
    )
    return dataclasses.replace(cfg, **overrides).validate()


def random_weights(weights, rng, scale=0.3):
    return {k: Tensor(rng.normal(scale=scale, size=v.shape), requires_grad=True) for k, v in weights.items()}


def random_codec(cfg=None, seed=0, scale=0.3):
    """float64 codec with every weight (biases included) drawn at random."""
    cfg = cfg or tiny_config()
    base = Codec(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    return Codec(cfg, {part: random_weights(w, rng, scale) for part, w in base.weights.items()}, dtype=np.float64)


def random_model(cfg=None, seed=0, scale=0.3):
    """float64 autoregressor with non-zero output projections."""
    cfg = cfg or tiny_config()
    base = ARModel.create(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 2000)
    return ARModel(cfg, {s: random_weights(w, rng, scale) for s, w in base.weights.items()})


def zero_bias_codec(cfg=None, seed=0):
    codec = Codec(cfg or tiny_config(), seed=seed, dtype=np.float64)
    for w in codec.weights.values():
        for k, v in w.items():
            if k.endswith(".b"):
                v.data[...] = 0.0
    return codec


# -- direct-formula metric oracles (explicit loops, no shared code with cavm.metrics) --

def psnr_oracle(a, b, region, data_range):
    total, count = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if region[i][j]:
                total += (float(a[i][j]) - float(b[i][j])) ** 2
                count += 1
    mse = total / count
    return float("inf") if mse == 0 else 10.0 * np.log10(data_range ** 2 / mse)


def ssim_oracle(a, b, region, data_range, window=7):
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    half = window // 2
    values = []
    for ci in range(half, a.shape[0] - half):
        for cj in range(half, a.shape[1] - half):
            if not region[ci][cj]:
                continue
            pa = [float(a[i][j]) for i in range(ci - half, ci + half + 1) for j in range(cj - half, cj + half + 1)]
            pb = [float(b[i][j]) for i in range(ci - half, ci + half + 1) for j in range(cj - half, cj + half + 1)]
            n = len(pa)
            ma, mb = sum(pa) / n, sum(pb) / n
            va = sum((p - ma) ** 2 for p in pa) / n
            vb = sum((p - mb) ** 2 for p in pb) / n
            cov = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / n
            values.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(values) / len(values)


# -- differentiable ops with input shapes, for gradient checks --

MASK = np.array([[0.0, -np.inf, 0.0], [0.0, 0.0, -np.inf]])

OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "subtract": (lambda a, b: a - b, [(3, 1), (3, 4)]),
    "multiply": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "divide": (lambda a, b: a / (b * b + 1.0), [(2, 3), (3,)]),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 2)]),
    "reshape": (lambda a: a.reshape(3, 4), [(2, 6)]),
    "transpose": (lambda a: a.transpose(2, 0, 1), [(2, 3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "slice": (lambda a: a[1:, ::2], [(3, 5)]),
    "broadcast": (lambda a: ad.broadcast_to(a, (4, 3)), [(1, 3)]),
    "exp": (lambda a: ad.exp(a), [(5,)]),
    "log": (lambda a: ad.log(a * a + 0.5), [(5,)]),
    "stack": (lambda a, b: ad.stack([a, b], axis=1), [(2, 3), (2, 3)]),
    "sqrt": (lambda a: ad.sqrt(a * a + 1.0), [(5,)]),
    "power": (lambda a: ad.power(a * a + 0.5, 1.5), [(5,)]),
    "sum": (lambda a: ad.sum_(a, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: ad.mean(a, axis=0), [(3, 4)]),
    "softmax": (lambda a: ad.softmax_masked(a, MASK), [(2, 3)]),
    "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1), [(1, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "upsample": (lambda a: ad.upsample_nearest2d(a, 2), [(1, 2, 2, 3)]),
    "leaky_relu": (lambda a: ad.leaky_relu(a, 0.2), [(6,)]),
    "silu": (lambda a: ad.silu(a), [(6,)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(6,)]),
    "softplus": (lambda a: ad.softplus(a), [(6,)]),
    "abs": (lambda a: ad.abs_(a), [(6,)]),
}


def random_inputs(shapes, seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    # keep kinked ops away from their kink
    return [np.where(np.abs(a) < 0.05, 0.3, a) for a in arrays]
