import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advunmix.errors import ConfigError, DimensionError
from advunmix.separator import (ArchDescriptor, MaskNet, images_to_tensor, load_separator,
                                mask_forward, save_separator, separate, separate_images,
                                tensor_to_images)

from conftest import constant_mask_model
from oracles import REL_TOL, gradient_check


@pytest.mark.parametrize("size,channels,n_down", [(4, 1, 1), (8, 1, 1), (32, 1, 3), (64, 3, 4)])
def test_arch_bottleneck_and_output_shape(size, channels, n_down):
    arch = ArchDescriptor(size, size, channels, base_channels=4)
    assert arch.n_down == n_down
    model = MaskNet(arch)
    y = torch.rand(2, channels, size, size)
    assert model.encoder(y).shape[-1] == max(2, 4 if size > 4 else 2)
    assert mask_forward(model, y).shape == y.shape


def test_penultimate_layer_has_base_channels():
    model = MaskNet(ArchDescriptor(32, 32, 1, base_channels=64))
    convs = [m for m in model.modules() if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d))]
    assert convs[-1].in_channels == 64
    assert [c.out_channels for c in convs[:3]] == [64, 128, 256]


def test_invalid_arch():
    with pytest.raises(ConfigError):
        ArchDescriptor(12, 12, 1)
    with pytest.raises(ConfigError):
        ArchDescriptor(8, 16, 1)


def test_mask_in_open_unit_interval(toy_arch):
    model = MaskNet(toy_arch, seed=3)
    m = mask_forward(model, torch.rand(16, 1, 8, 8) * 5)
    assert torch.all(m > 0) and torch.all(m < 1)


def test_deterministic(toy_arch):
    model = MaskNet(toy_arch, seed=3)
    y = torch.rand(4, 1, 8, 8)
    assert torch.equal(mask_forward(model, y), mask_forward(model, y))
    assert torch.equal(MaskNet(toy_arch, seed=3).decoder[-1].weight, model.decoder[-1].weight)


def test_single_image_input(toy_arch):
    model = MaskNet(toy_arch)
    y = torch.rand(1, 8, 8)
    assert mask_forward(model, y).shape == (1, 8, 8)


def test_shape_mismatch(toy_arch):
    model = MaskNet(toy_arch)
    with pytest.raises(DimensionError):
        mask_forward(model, torch.rand(2, 1, 4, 4))
    with pytest.raises(DimensionError):
        separate(model, torch.rand(2, 3, 8, 8))


def test_zero_input_gives_zero_estimates(toy_arch):
    r = separate(MaskNet(toy_arch), torch.zeros(3, 1, 8, 8))
    assert not r.x_hat.any() and not r.b_hat.any()


def test_mask_of_one_is_degenerate(toy_arch):
    model = constant_mask_model(toy_arch, 40.0)
    y = torch.rand(2, 1, 8, 8)
    r = separate(model, y)
    assert torch.all(r.mask == 1)
    assert torch.equal(r.x_hat, y)
    assert not r.b_hat.any()


def test_pixel_arithmetic(toy_arch):
    model = constant_mask_model(toy_arch, float(np.log(0.25 / 0.75)), torch.float64)
    y = torch.full((1, 1, 8, 8), 0.8, dtype=torch.float64)
    r = separate(model, y)
    assert r.x_hat[0, 0, 3, 3].item() == pytest.approx(0.2, abs=1e-12)
    assert r.b_hat[0, 0, 3, 3].item() == pytest.approx(0.6, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.0, 3.0))
def test_additivity_identity(seed, scale):
    arch = ArchDescriptor(8, 8, 1, base_channels=4)
    g = torch.Generator().manual_seed(seed)
    model = MaskNet(arch, seed=seed)
    y = torch.rand(3, 1, 8, 8, generator=g) * scale
    r = separate(model, y)
    assert (r.x_hat + r.b_hat - y).abs().max().item() <= 1e-6
    assert torch.equal(r.x_hat, y * r.mask)
    assert (r.b_hat - y * (1 - r.mask)).abs().max().item() <= 1e-6


def test_mask_gradient_matches_finite_differences(tiny_arch):
    torch.manual_seed(0)
    model = MaskNet(tiny_arch, seed=5).double()
    # larger weights than the 0.02 init so every layer contributes measurably
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0, 0.5)
    y = torch.rand(2, 1, 4, 4, dtype=torch.float64)
    head = torch.rand(2, 1, 4, 4, dtype=torch.float64)
    errs = gradient_check(lambda: (mask_forward(model, y) * head).sum(), model.parameters(), 10)
    assert np.mean(np.array(errs) <= REL_TOL) >= 0.99


def test_separation_gradient_matches_finite_differences(tiny_arch):
    model = MaskNet(tiny_arch, seed=6).double()
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0, 0.5)
    y = torch.rand(3, 1, 4, 4, dtype=torch.float64)

    def f():
        r = separate(model, y)
        return (r.x_hat ** 2).mean() - (r.b_hat * y).sum()

    errs = gradient_check(f, model.parameters(), 10, seed=1)
    assert np.mean(np.array(errs) <= REL_TOL) >= 0.99


def test_layout_conversions(rng):
    imgs = rng.random((3, 5, 5, 2), dtype=np.float32)
    t = images_to_tensor(imgs)
    assert t.shape == (3, 2, 5, 5)
    assert np.array_equal(tensor_to_images(t), imgs)
    assert images_to_tensor(imgs[0]).shape == (2, 5, 5)


def test_separate_images_batches(toy_arch, rng):
    model = MaskNet(toy_arch)
    imgs = rng.random((7, 8, 8, 1), dtype=np.float32)
    xa, ba = separate_images(model, imgs, batch_size=3)
    xb, bb = separate_images(model, imgs, batch_size=100)
    np.testing.assert_allclose(xa, xb, atol=1e-7)
    np.testing.assert_allclose(xa + ba, imgs, atol=1e-6)


def test_separator_file_roundtrip(tmp_path, toy_arch):
    model = MaskNet(toy_arch, seed=9)
    save_separator(model, tmp_path / "m.ckpt")
    loaded = load_separator(tmp_path / "m.ckpt")
    assert loaded.arch == toy_arch
    for a, b in zip(model.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)
    save_separator(loaded, tmp_path / "m2.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
