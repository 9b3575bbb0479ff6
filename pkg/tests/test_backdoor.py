import json

import numpy as np
import pytest

import stylemark as sm
from stylemark.backdoor import apply_trigger, save_pattern_png
from stylemark.data import ShapeError

from conftest import make_image


@pytest.fixture(scope="module")
def spec():
    return sm.white_square_spec((3, 8, 8), size=3, target_label=2)


def test_white_square_spec_layout(spec):
    assert spec.trigger.shape == (3, 8, 8)
    assert spec.mask.sum() == 3 * 3 * 3
    assert np.all(spec.mask[:, 5:, 5:] == 1.0)
    assert np.all(spec.trigger[:, 5:, 5:] == 1.0)
    assert spec.mask[:, :5, :].sum() == 0


def test_backdoor_spec_validation():
    with pytest.raises(ShapeError):
        sm.BackdoorSpec(trigger=np.zeros((3, 4, 4)), mask=np.zeros((3, 5, 5)),
                        target_label=0)
    with pytest.raises(ValueError):
        sm.BackdoorSpec(trigger=np.full((1, 2, 2), 2.0), mask=np.zeros((1, 2, 2)),
                        target_label=0)
    with pytest.raises(ValueError):
        sm.BackdoorSpec(trigger=np.zeros((1, 2, 2)), mask=np.full((1, 2, 2), 0.5),
                        target_label=0)


def test_apply_trigger_elementwise(spec):
    x = make_image(3, shape=(3, 8, 8))
    out = apply_trigger(x.pixels, spec)
    inside = spec.mask == 1.0
    assert np.array_equal(out[inside], spec.trigger[inside])
    assert np.array_equal(out[~inside], x.pixels.astype(np.float64)[~inside])


def test_trigger_idempotent(spec):
    x = make_image(4, shape=(3, 8, 8))
    once = apply_trigger(x.pixels, spec)
    twice = apply_trigger(once, spec)
    assert np.array_equal(once, twice)


def test_zero_mask_trigger_keeps_pixels():
    spec = sm.BackdoorSpec(trigger=np.ones((3, 8, 8)), mask=np.zeros((3, 8, 8)),
                           target_label=1)
    ds = sm.make_synthetic_dataset(20, image_hw=(8, 8), seed=1)
    poisoned = sm.badnets_poison(ds, spec, 50.0, seed=2)
    # pixels unchanged everywhere, selected labels flipped to the target
    flipped = 0
    for a, b in zip(poisoned.items, ds.items):
        assert np.allclose(a.pixels, b.pixels)
        flipped += int(a.label != b.label)
    assert flipped > 0
    assert all(a.label in (b.label, 1) for a, b in zip(poisoned.items, ds.items))


def test_badnets_poison_counts_and_identity(spec):
    ds = sm.make_synthetic_dataset(40, image_hw=(8, 8), seed=3)
    poisoned = sm.badnets_poison(ds, spec, 25.0, seed=5)
    assert len(poisoned) == len(ds)
    untouched = sum(
        1 for a, b in zip(poisoned.items, ds.items)
        if np.array_equal(a.pixels, b.pixels) and a.label == b.label
    )
    assert untouched == 30  # 40 - round(25% of 40)
    changed = [
        (a, b) for a, b in zip(poisoned.items, ds.items)
        if not np.array_equal(a.pixels, b.pixels)
    ]
    assert all(a.label == spec.target_label for a, _ in changed)


def test_badnets_poison_validation(spec):
    ds = sm.make_synthetic_dataset(10, image_hw=(8, 8), seed=3)
    with pytest.raises(ValueError):
        sm.badnets_poison(ds, spec, 101.0, seed=0)
    bad = sm.white_square_spec((3, 8, 8), target_label=99)
    with pytest.raises(ValueError):
        sm.badnets_poison(ds, bad, 10.0, seed=0)


def test_patch_transform_keeps_label(spec):
    ds = sm.make_synthetic_dataset(10, image_hw=(8, 8), seed=4)
    x = ds[0]
    patched = sm.patch_transform(x, spec)
    poisoned = sm.badnets_poison(ds, spec, 100.0, seed=0)
    assert np.array_equal(patched.pixels, poisoned[0].pixels)
    assert patched.label == x.label
    assert poisoned[0].label == spec.target_label


def test_patch_transform_zero_mask_identity():
    spec = sm.BackdoorSpec(trigger=np.ones((3, 8, 8)), mask=np.zeros((3, 8, 8)),
                           target_label=0)
    x = make_image(5, shape=(3, 8, 8), label=3)
    out = sm.patch_transform(x, spec)
    assert np.allclose(out.pixels, x.pixels)
    assert out.label == 3


def test_asr_constant_target_model(spec, tiny_test_dataset):
    import torch

    class ConstNet(torch.nn.Module):
        def forward(self, x):
            out = torch.zeros(x.shape[0], 10)
            out[:, spec.target_label] = 1.0
            return out

    eight = sm.make_synthetic_dataset(30, image_hw=(8, 8), seed=6, split_tag="test")
    handle = sm.ModelHandle("cnn-small", ConstNet(), 10)
    assert sm.attack_success_rate(handle, spec, eight) == 1.0


def test_asr_excludes_target_class(spec):
    import torch

    class EchoNet(torch.nn.Module):
        def forward(self, x):
            return torch.zeros(x.shape[0], 10)

    only_target = sm.ImageDataset(
        [make_image(i, shape=(3, 8, 8), label=spec.target_label) for i in range(4)],
        class_count=10, split_tag="test",
    )
    handle = sm.ModelHandle("cnn-small", EchoNet(), 10)
    with pytest.raises(ValueError):
        sm.attack_success_rate(handle, spec, only_target)


def test_recover_trigger_zero_iterations_returns_init(tiny_model, tiny_test_dataset):
    cfg = sm.TriggerRecoveryConfig(epsilon=32.0, iterations=0, init="zeros",
                                   probe_size=8)
    out = sm.recover_trigger(tiny_model, 2, cfg, tiny_test_dataset)
    assert np.array_equal(out, np.zeros_like(out))

    eps = 32.0 / 255.0
    rng = np.random.default_rng(0)
    pattern = rng.uniform(-eps, eps, size=(3, 32, 32)).astype(np.float32)
    cfg2 = sm.TriggerRecoveryConfig(epsilon=32.0, iterations=0, init="pattern",
                                    probe_size=8)
    out2 = sm.recover_trigger(tiny_model, 2, cfg2, tiny_test_dataset,
                              init_pattern=pattern)
    assert np.allclose(out2, pattern, atol=1e-7)


def test_recover_trigger_stays_in_ball_and_improves(tiny_model, tiny_test_dataset):
    cfg = sm.TriggerRecoveryConfig(epsilon=16.0, iterations=8, step_size=2.0 / 255.0,
                                   probe_size=16)
    trace = []
    out = sm.recover_trigger(tiny_model, 1, cfg, tiny_test_dataset,
                             objective_trace=trace)
    eps = 16.0 / 255.0
    assert np.abs(out).max() <= eps + 1e-9  # exhaustive scan of every entry
    # objective never drops by more than the line-search tolerance
    assert all(b >= a - 1e-6 for a, b in zip(trace, trace[1:]))
    assert trace[-1] >= trace[0] - 1e-6


def test_recovery_config_validation():
    with pytest.raises(ValueError):
        sm.TriggerRecoveryConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        sm.TriggerRecoveryConfig(iterations=-1)
    with pytest.raises(ValueError):
        sm.TriggerRecoveryConfig(init="noise")


def test_pattern_png_sidecar(tmp_path):
    pattern = np.linspace(-0.1, 0.1, 3 * 8 * 8).reshape(3, 8, 8)
    path = tmp_path / "pattern.png"
    save_pattern_png(pattern, path, target_label=2, epsilon=32.0, iterations=40)
    assert path.exists()
    with open(str(path) + ".json") as f:
        sidecar = json.load(f)
    assert sidecar["target_label"] == 2
    assert sidecar["epsilon"] == 32.0
    assert sidecar["value_min"] == pytest.approx(-0.1)
