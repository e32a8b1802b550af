"""Test-split evaluation and the step-count ablation."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .autoregression import direct_synthesis
from .config import ModelConfig
from .metrics import RegionReport, evaluate
from .phantom import VolumeSample
from .training import Checkpoint, MetricsLog, pretrain_tokenizers, synthesize, train_autoregression

ABLATION_ROWS = ("One Step", "Two Steps", "w/o Dose-variant Autoregression", "CAVM")


def predict_standard_dose(samples: Sequence[VolumeSample], ckpt: Checkpoint, direct: bool = False) -> list[np.ndarray]:
    if direct:
        codec = ckpt.fresh_codec()
        return [direct_synthesis(Tensor(s.x), codec).data[0] for s in samples]
    return [synthesize(s.x, ckpt)[-1] for s in samples]


def evaluate_checkpoint(samples: Sequence[VolumeSample], ckpt: Checkpoint, direct: bool = False) -> RegionReport:
    preds = predict_standard_dose(samples, ckpt, direct)
    return evaluate(preds, [s.y_sd for s in samples], [s.x_tm for s in samples])


def copy_input_baseline(samples: Sequence[VolumeSample]) -> RegionReport:
    """Predict y_SD as the T1w-like input channel."""
    return evaluate([s.x_nc[0] for s in samples], [s.y_sd for s in samples], [s.x_tm for s in samples])


def run_ablation(
    train: Sequence[VolumeSample],
    test: Sequence[VolumeSample],
    cfg: ModelConfig,
    pretrain_steps: int | None = None,
    ar_steps: int | None = None,
    pretrained: Checkpoint | None = None,
    metrics: MetricsLog | None = None,
) -> dict[str, RegionReport]:
    """Train and evaluate the four variants, sharing one phase-1 pretraining.

    Rows come back in the fixed order of :data:`ABLATION_ROWS`.
    """
    if pretrained is None:
        pretrained = pretrain_tokenizers(train, cfg, steps=pretrain_steps, metrics=metrics)
    reports: dict[str, RegionReport] = {}
    for row, steps in zip(ABLATION_ROWS, (1, 2, None, 3)):
        if steps is None:
            reports[row] = evaluate_checkpoint(test, pretrained, direct=True)
            continue
        variant = dataclasses.replace(cfg, num_steps=steps).validate()
        ckpt = train_autoregression(train, pretrained, variant, steps=ar_steps, metrics=metrics)
        reports[row] = evaluate_checkpoint(test, ckpt)
    return reports
