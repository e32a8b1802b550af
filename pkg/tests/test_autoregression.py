from unittest import mock

import numpy as np
import pytest

from cavm import autoregression as ar
from cavm.autodiff import ShapeError, Tensor
from cavm.autoregression import ARModel, ar_forward, ar_infer, ar_teacher_forced, make_placeholders
from cavm.codec import Codec, TokenSequence
from cavm.config import tiny_config

from helpers import random_codec, random_model


def _sequence(model, scale, seed, blocks=None):
    rng = np.random.default_rng(seed)
    n = model.n_tokens(scale)
    dim = getattr(model.cfg, scale).token_dim
    blocks = blocks or model.num_blocks
    tokens = Tensor(rng.normal(size=(blocks * n, dim)))
    return TokenSequence(scale, n, ("input_x",) + ("dose_LD",) * (blocks - 1), tokens)


def test_placeholders():
    p = make_placeholders(2, 3)
    assert p.shape == (2, 3) and not np.any(p.data)
    assert np.all(make_placeholders(2, 3, fill=0.5).data == 0.5)
    assert np.array_equal(make_placeholders(4, 2).data, make_placeholders(4, 2).data)
    with pytest.raises(ValueError):
        make_placeholders(0, 3)


def test_fresh_model_is_identity():
    model = ARModel.create(tiny_config(), dtype=np.float64)
    for scale in ar.SCALES:
        seq = _sequence(model, scale, 0)
        out = ar_forward(seq, model)
        assert out.tokens.shape == seq.tokens.shape
        assert np.array_equal(out.tokens.data, seq.tokens.data)


@pytest.mark.parametrize("scale", ar.SCALES)
def test_later_blocks_do_not_affect_earlier(scale):
    model = random_model()
    seq = _sequence(model, scale, 1)
    n = seq.n
    changed = seq.tokens.data.copy()
    changed[2 * n:] += 1.0
    a = ar_forward(seq, model).tokens.data
    b = ar_forward(TokenSequence(scale, n, seq.roles, Tensor(changed)), model).tokens.data
    assert np.array_equal(a[:2 * n], b[:2 * n])
    assert not np.array_equal(a[2 * n:], b[2 * n:])


def test_length_mismatch():
    model = random_model()
    with pytest.raises(ShapeError):
        ar_forward(_sequence(model, "fine", 0, blocks=2), model)


def test_num_blocks_has_floor_of_two():
    assert tiny_config(num_steps=1).num_blocks == 2
    assert tiny_config(num_steps=2).num_blocks == 2
    assert tiny_config(num_steps=3).num_blocks == 3


@pytest.mark.parametrize("steps", [1, 2, 3])
def test_infer_returns_one_image_per_step(steps):
    cfg = tiny_config(num_steps=steps)
    images = ar_infer(Tensor(np.random.default_rng(0).normal(size=(4, 16, 16))), random_codec(cfg), random_model(cfg))
    assert len(images) == steps
    assert all(im.shape == (1, 16, 16) for im in images)


def test_call_counts_three_steps():
    cfg = tiny_config()
    codec, model = random_codec(cfg), random_model(cfg)
    x = Tensor(np.random.default_rng(0).normal(size=(4, 16, 16)))
    with mock.patch.object(ar, "ar_forward", wraps=ar.ar_forward) as fwd, \
            mock.patch.object(codec, "decode", wraps=codec.decode) as dec, \
            mock.patch.object(codec, "encode_contrast", wraps=codec.encode_contrast) as ce:
        ar_infer(x, codec, model)
    assert fwd.call_count == 3 * len(ar.SCALES)
    assert dec.call_count == 3
    assert ce.call_count == 2


def test_one_step_sequence_is_input_then_placeholder():
    cfg = tiny_config(num_steps=1)
    codec, model = random_codec(cfg), random_model(cfg)
    seen = []
    original = ar.ar_forward

    def spy(seq, m):
        seen.append(seq)
        return original(seq, m)

    with mock.patch.object(ar, "ar_forward", side_effect=spy):
        images = ar_infer(Tensor(np.ones((4, 16, 16))), codec, model)
    assert len(images) == 1
    assert [s.roles for s in seen] == [("input_x", "placeholder")] * 2
    assert all(s.check_placeholders(0.0) for s in seen)


def test_first_step_unaffected_by_later_steps():
    cfg3 = tiny_config(num_steps=3)
    codec, model = random_codec(cfg3), random_model(cfg3)
    x = Tensor(np.random.default_rng(3).normal(size=(4, 16, 16)))
    full = ar_infer(x, codec, model)
    # run only the first step: the step-1 sequence is (t_x, t0, t0) in both cases
    t_x = codec.encode_dose_variant(x)
    predicted = []
    for s, scale in enumerate(ar.SCALES):
        seq = ar._sequence(scale, [t_x[s]], ["input_x"], model)
        predicted.append(ar_forward(seq, model).block(0))
    first = codec.decode(codec.encode_dose_invariant(x), tuple(predicted))
    assert np.array_equal(full[0].data, first.data)


def test_teacher_forced_block0_equals_inference_step1():
    cfg = tiny_config()
    codec, model = random_codec(cfg), random_model(cfg)
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(4, 16, 16)))
    dose_images = [Tensor(rng.normal(size=(1, 16, 16))) for _ in range(2)]
    preds = ar_teacher_forced(x, dose_images, codec, model)
    assert len(preds) == 3
    step1 = ar_infer(x, codec, model)[0]
    decoded = codec.decode(codec.encode_dose_invariant(x), preds[0])
    assert np.array_equal(decoded.data, step1.data)


def test_teacher_forcing_fixed_point_matches_inference():
    """Feeding the model's own decoded images as ground truth reproduces inference."""
    cfg = tiny_config()
    codec, model = random_codec(cfg), random_model(cfg)
    x = Tensor(np.random.default_rng(5).normal(size=(4, 16, 16)))
    inferred = ar_infer(x, codec, model)
    preds = ar_teacher_forced(x, inferred[:2], codec, model)
    decoded = ar.decode_predictions(x, preds, codec)
    for a, b in zip(decoded, inferred):
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)


def test_teacher_forced_wrong_count():
    cfg = tiny_config()
    with pytest.raises(ValueError):
        ar_teacher_forced(Tensor(np.ones((4, 16, 16))), [], random_codec(cfg), random_model(cfg))


def test_direct_synthesis_shape():
    codec = Codec(tiny_config(), seed=0)
    assert ar.direct_synthesis(Tensor(np.ones((4, 16, 16), np.float32)), codec).shape == (1, 16, 16)
