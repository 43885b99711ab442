import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lapformer.data import synthetic_disks
from lapformer.errors import TrainingError
from lapformer.model import build_model, read_checkpoint
from lapformer.trainer import TrainConfig, lr_at, make_optimizer, overfit_check, split_decay, train


def small_cfg(tmp_path=None, **kw):
    base = dict(epochs=2, batch_size=4, base_lr=1e-3, input_size=(64, 64), seed=0,
                checkpoint_dir=tmp_path)
    base.update(kw)
    return TrainConfig(**base)


# --- schedule / optimizer -----------------------------------------------------

def test_lr_endpoints():
    assert lr_at(0, 100, 1e-4) == 1e-4
    assert lr_at(100, 100, 1e-4) == 0.0
    assert lr_at(50, 100, 1e-4) == pytest.approx(5e-5, rel=1e-12)


@given(st.integers(1, 5000))
def test_lr_monotone(total):
    lrs = [lr_at(s, total, 1.0) for s in range(0, total + 1, max(1, total // 50))]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_at(11, 10, 1e-4)
    with pytest.raises(ValueError):
        lr_at(0, 0, 1e-4)


def test_decay_partition(tiny):
    model = build_model(tiny)
    decay, no_decay = split_decay(model)
    names = [n for n, _ in model.named_parameters()]
    assert sorted(decay + no_decay) == sorted(names)
    assert not set(decay) & set(no_decay)
    assert all(n.endswith("bias") or "norm" in n or "bn" in n for n in no_decay), no_decay
    assert all(not n.endswith("bias") for n in decay)
    opt = make_optimizer(model, small_cfg())
    assert [g["weight_decay"] for g in opt.param_groups] == [0.01, 0.0]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(base_lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")


# --- training loop ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_two_epochs_reduce_loss(tiny, seed):
    samples = synthetic_disks(8, 64, seed=seed)
    model = build_model(tiny, seed=seed)
    _, hist = train(model, samples, small_cfg(seed=seed, augment=False))
    assert [h.epoch for h in hist] == [1, 2]
    assert hist[1].mean_loss < hist[0].mean_loss


def test_train_bit_identical(tiny, tmp_path):
    samples = synthetic_disks(6, 64)
    runs = []
    for k in range(2):
        model = build_model(tiny, seed=1)
        ckpt, hist = train(model, samples, small_cfg(tmp_path / str(k)), log_path=tmp_path / f"{k}.log")
        runs.append((ckpt, hist))
    (a, ha), (b, hb) = runs
    assert [h.mean_loss for h in ha] == [h.mean_loss for h in hb]
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k]), k
    assert (tmp_path / "0" / "epoch_002.ckpt").read_bytes() == (tmp_path / "1" / "epoch_002.ckpt").read_bytes()


def test_resume_matches_uninterrupted(tiny, tmp_path):
    samples = synthetic_disks(6, 64)
    full = build_model(tiny, seed=1)
    ref, _ = train(full, samples, small_cfg(tmp_path / "full", epochs=3))
    # epoch_001.ckpt of the same run stands in for an interrupted job
    resumed = build_model(tiny, seed=99)
    out, hist = train(resumed, samples, small_cfg(tmp_path / "resume", epochs=3),
                      resume_from=tmp_path / "full" / "epoch_001.ckpt")
    assert [h.epoch for h in hist] == [2, 3]
    for k in ref.params:
        assert np.array_equal(ref.params[k], out.params[k]), k


def test_step_log_format(tiny, tmp_path):
    train(build_model(tiny), synthetic_disks(5, 64), small_cfg(epochs=1), log_path=tmp_path / "log.txt")
    lines = (tmp_path / "log.txt").read_text().splitlines()
    assert len(lines) == math.ceil(5 / 4)
    epoch, step, loss, lr, wall = lines[0].split()
    assert (epoch, step) == ("1", "0") and float(lr) == 1e-3 and float(loss) > 0 and float(wall) >= 0


def test_checkpoint_metadata(tiny, tmp_path):
    train(build_model(tiny), synthetic_disks(4, 64), small_cfg(tmp_path, epochs=1))
    meta = read_checkpoint(tmp_path / "last.ckpt").metadata
    assert meta["epoch"] == "1" and meta["seed"] == "0" and meta["determinism"] in ("bitwise", "statistical")


def test_empty_split(tiny):
    with pytest.raises(ValueError, match="empty"):
        train(build_model(tiny), [], small_cfg())


def test_nonfinite_loss_raises(tiny):
    model = build_model(tiny)
    with torch.no_grad():
        model.decoder.predict.conv.bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="synth"):
        train(model, synthetic_disks(4, 64), small_cfg(epochs=1))


# --- overfit check ----------------------------------------------------------------

def test_overfit_zero_steps_is_read_only(tiny):
    model = build_model(tiny)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    overfit_check(model, synthetic_disks(2, 64), steps=0)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_overfit_all_background(tiny):
    model = build_model(tiny)
    assert overfit_check(model, synthetic_disks(2, 64, empty=True), steps=60, lr=1e-3) == 1.0


def test_overfit_tiny_model_learns(tiny):
    assert overfit_check(build_model(tiny), synthetic_disks(4, 64), steps=200, lr=3e-3) > 0.8


def test_overfit_limits():
    with pytest.raises(ValueError):
        overfit_check(None, [])
    with pytest.raises(ValueError, match="at most 8"):
        overfit_check(None, synthetic_disks(9, 8))
