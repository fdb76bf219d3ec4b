from dataclasses import replace

import numpy as np
import pytest

from weakseg.data import DatasetConfig, generate_dataset
from weakseg.distributions import InvalidInputError, softmax_grid
from weakseg.kernels import KernelParams
from weakseg.losses import LossConfig
from weakseg.model import (
    CheckpointError,
    Conv,
    TinyFcn,
    TrainConfig,
    backward,
    col2im,
    decode_checkpoint,
    encode_checkpoint,
    forward,
    im2col,
    load_checkpoint,
    save_checkpoint,
    train,
)
from weakseg.prior import PriorConstraints
from weakseg.verify import check_model_gradient


def test_default_architecture():
    m = TinyFcn.init(4)
    assert [(l.in_ch, l.out_ch) for l in m.layers] == [(3, 16), (16, 16), (16, 4)]
    assert all(np.all(l.bias == 0) for l in m.layers)


def test_zero_weights_give_bias(rng):
    m = TinyFcn.init(3, hidden=(4,))
    for l in m.layers:
        l.weight[...] = 0
    m.layers[-1].bias[...] = [0.5, 0.5, 0.5]
    out = forward(m, rng.integers(0, 256, (5, 5, 3)))
    np.testing.assert_array_equal(out, 0.5)
    np.testing.assert_allclose(softmax_grid(out), 1 / 3)


def test_forward_deterministic(rng):
    img = rng.integers(0, 256, (6, 6, 3))
    a = forward(TinyFcn.init(4, seed=3), img)
    b = forward(TinyFcn.init(4, seed=3), img)
    np.testing.assert_array_equal(a, b)


def test_centre_tap_linear_map(rng):
    # a single conv with only the centre tap is a per-pixel linear map of the channels
    w = np.zeros((2, 3, 3, 3))
    a = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
    w[:, :, 1, 1] = a
    m = TinyFcn([Conv(w, np.array([0.1, -0.2]))])
    img = rng.integers(0, 256, (4, 5, 3))
    expect = (img / 255.0) @ a.T + [0.1, -0.2]
    np.testing.assert_allclose(forward(m, img), expect, atol=1e-14)


def test_im2col_adjoint(rng):
    x = rng.normal(size=(5, 4, 2))
    y = rng.normal(size=(20, 18))
    assert np.sum(im2col(x) * y) == pytest.approx(np.sum(x * col2im(y, 5, 4, 2)), rel=1e-12)


def test_zero_upstream_gradient(rng):
    m = TinyFcn.init(3, hidden=(4,))
    logits, cache = forward(m, rng.integers(0, 256, (6, 6, 3)), return_cache=True)
    assert all(np.all(g == 0) for g in backward(m, cache, np.zeros_like(logits)))


def test_parameter_gradient_fd(rng):
    for _ in range(3):
        assert check_model_gradient(rng) < 1e-5


def test_bad_image_shape():
    with pytest.raises(InvalidInputError):
        forward(TinyFcn.init(2), np.zeros((4, 4)))


def test_checkpoint_round_trip(tmp_path):
    m = TinyFcn.init(4, seed=7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m)
    back = load_checkpoint(path)
    for a, b in zip(m.params(), back.params()):
        np.testing.assert_array_equal(a, b)
    assert encode_checkpoint(back) == path.read_bytes()


def test_checkpoint_errors():
    good = encode_checkpoint(TinyFcn.init(2, hidden=(2,)))
    with pytest.raises(CheckpointError, match="not a TFCN"):
        decode_checkpoint(b"NOPE" + good[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(good[:4] + (2).to_bytes(4, "little") + good[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(good[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(good + b"\x00")


def test_lr_schedule():
    cfg = TrainConfig(lr=0.04, halve_every=10)
    assert [cfg.lr_at(s) for s in (0, 9, 10, 25)] == [0.04, 0.04, 0.02, 0.01]


@pytest.mark.parametrize("kwargs", [dict(lr=0), dict(batch_size=0), dict(momentum=1.0), dict(halve_every=0)])
def test_train_config_validation(kwargs):
    with pytest.raises(InvalidInputError):
        TrainConfig(**kwargs)


@pytest.fixture(scope="module")
def small_set():
    return generate_dataset(8, 5, DatasetConfig(size=24))


def _run(scenes, steps, lam=0.0, seed=0, **loss):
    model = TinyFcn.init(4, hidden=(8,), seed=seed)
    cfg = TrainConfig(total_steps=steps, batch_size=2, seed=seed, lr=0.03, halve_every=max(steps // 2, 1), hidden=(8,))
    log = train(model, scenes, cfg, LossConfig(lam=lam, normalize_per_pixel=True, **loss), KernelParams(), PriorConstraints())
    return model, log


def test_training_is_deterministic(small_set):
    _, a = _run(small_set, 6, lam=0.3)
    _, b = _run(small_set, 6, lam=0.3)
    assert list(a.rows()) == list(b.rows())


def test_training_log_lr_follows_schedule(small_set):
    _, log = _run(small_set, 8)
    assert [r.lr for r in log.records] == [0.03] * 4 + [0.015] * 4


def test_training_reduces_loss(small_set):
    _, log = _run(small_set, 150)
    first = np.mean([r.total for r in log.records[:5]])
    last = np.mean([r.total for r in log.records[-5:]])
    assert last < 0.5 * first


def test_one_image_constraints_hold(small_set):
    _, log = _run(small_set[:1], 60, lam=0.3)
    assert all(r.constraint_violations == 0 for r in log.records)
    assert log.records[-1].feasible_fraction == 1.0


def test_training_does_not_mutate_dataset(small_set):
    before = [s.image.copy() for s in small_set]
    _run(small_set, 2)
    for a, s in zip(before, small_set):
        np.testing.assert_array_equal(a, s.image)


def test_zero_steps(small_set):
    model, log = _run(small_set, 0)
    assert log.records == []
    np.testing.assert_array_equal(model.layers[0].weight, TinyFcn.init(4, hidden=(8,)).layers[0].weight)


def test_replace_keeps_validation():
    with pytest.raises(InvalidInputError):
        replace(TrainConfig(), lr=-1.0)
