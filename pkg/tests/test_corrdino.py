import numpy as np
import pytest
import torch

from imlkit.backbone import StubVitBackend, stub_features
from imlkit.corrdino import (
    CorrDino,
    CorrDinoConfig,
    FeatureSuperResolution,
    LearnableAggregation,
    MultiAspectDenoiser,
    corr_dino_forward,
    correlation,
    load_corrdino,
    save_corrdino,
)
from imlkit.errors import DataError, ModelError
from imlkit.images import ImageTensor, random_photo

from .conftest import noisy_image
from .helpers import brute_force_correlation


def test_correlation_self_peak(rng):
    x = torch.from_numpy(rng.standard_normal((6, 4, 4)).astype(np.float32))
    vol = correlation(x, x)
    assert vol.shape == (16, 4, 4)
    for i in range(4):
        for j in range(4):
            slice_ij = vol[:, i, j]
            self_idx = i * 4 + j
            assert int(slice_ij.argmax()) == self_idx
            assert slice_ij[self_idx].item() == pytest.approx(1.0, abs=1e-6)


def test_correlation_duplicate_tokens_tie(rng):
    x = rng.standard_normal((8, 3, 3)).astype(np.float32)
    x[:, 2, 2] = x[:, 0, 1]  # identical tokens at positions (0,1) and (2,2)
    vol = correlation(torch.from_numpy(x), torch.from_numpy(x))
    source = vol[:, 0, 1]
    assert source[0 * 3 + 1].item() == source[2 * 3 + 2].item()
    assert source.max().item() == source[0 * 3 + 1].item()


def test_correlation_zero_target():
    x = torch.randn(5, 3, 3)
    z = torch.zeros(5, 3, 3)
    assert correlation(x, z).abs().max().item() == 0.0
    assert correlation(z, x).abs().max().item() == 0.0


def test_correlation_matches_brute_force(rng):
    fx = rng.standard_normal((7, 3, 4)).astype(np.float64)
    fy = rng.standard_normal((7, 3, 4)).astype(np.float64)
    fy[:, 1, 2] = 0.0  # include a zero vector
    vol = correlation(torch.from_numpy(fx), torch.from_numpy(fy)).numpy()
    oracle = brute_force_correlation(fx, fy)
    assert np.allclose(vol, oracle, atol=1e-12)


def test_correlation_transpose_symmetry(rng):
    fx = torch.from_numpy(rng.standard_normal((6, 3, 3)))
    fy = torch.from_numpy(rng.standard_normal((6, 3, 3)))
    v_xy = correlation(fx, fy)
    v_yx = correlation(fy, fx)
    gh, gw = 3, 3
    for i in range(gh):
        for j in range(gw):
            for k in range(gh * gw):
                assert v_xy[k, i, j].item() == v_yx[i * gw + j, k // gw, k % gw].item()


def test_correlation_shape_mismatch():
    with pytest.raises(DataError):
        correlation(torch.randn(4, 3, 3), torch.randn(4, 3, 4))


def test_aggregation_zero_volume():
    torch.manual_seed(0)
    agg = LearnableAggregation(in_channels=9, k=4)
    out = agg(torch.zeros(1, 9, 3, 3))
    assert out.shape == (1, 6, 3, 3)
    # bias response of the two 1x1 convs at zero input
    expected = agg.reduce2(torch.relu(agg.reduce1(torch.zeros(1, 9, 3, 3))))
    assert torch.equal(out[:, :4], expected)
    assert out[:, 4:].abs().max().item() == 0.0


def test_aggregation_stats_exact(rng):
    agg = LearnableAggregation(in_channels=16, k=3)
    vol = torch.from_numpy(rng.uniform(0, 1, (2, 16, 4, 4)).astype(np.float32))
    out = agg(vol)
    assert torch.equal(out[:, 3], vol.mean(dim=1))
    assert torch.equal(out[:, 4], vol.max(dim=1).values)


def test_fsr_scale_sizes():
    torch.manual_seed(0)
    fsr = FeatureSuperResolution(stack_channels=8, aggr_channels=5, d=6)
    stack = torch.randn(1, 8, 16, 16)
    aggr = torch.randn(1, 5, 16, 16)
    outs = fsr(stack, aggr)
    assert sorted(tuple(o.shape[-2:]) for o in outs) == [
        (16, 16), (32, 32), (64, 64), (128, 128)]
    assert outs[0].shape[-2:] == (128, 128)  # finest first
    assert all(o.shape[1] == 6 for o in outs)


def test_fsr_zero_aggr_reduces_to_stack_path():
    torch.manual_seed(1)
    fsr = FeatureSuperResolution(stack_channels=4, aggr_channels=3, d=4).double()
    stack = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    zero = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    outs = fsr(stack, zero)
    for i, scale in enumerate(fsr.SCALES):
        a = fsr.stack_proj[i](stack)
        b = fsr.aggr_proj[i](zero)  # pure bias map
        if scale != 1:
            size = (4 * scale, 4 * scale)
            a = torch.nn.functional.interpolate(a, size=size, mode="bilinear",
                                                align_corners=False)
            b = torch.nn.functional.interpolate(b, size=size, mode="bilinear",
                                                align_corners=False)
        assert torch.allclose(outs[i], fsr.fuse[i](a + b), atol=1e-12)


def test_fsr_linear_in_aggregation(rng):
    torch.manual_seed(2)
    fsr = FeatureSuperResolution(stack_channels=4, aggr_channels=3, d=4).double()
    stack = torch.from_numpy(rng.standard_normal((1, 4, 4, 4)))
    aggr = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
    out0 = fsr(stack, torch.zeros_like(aggr))
    out1 = fsr(stack, aggr)
    out2 = fsr(stack, 2.0 * aggr)
    for a, b, c in zip(out0, out1, out2):
        # doubling the aggregation doubles its (linear) contribution
        assert torch.allclose(c - b, b - a, atol=1e-10)


def test_fsr_grid_mismatch():
    fsr = FeatureSuperResolution(stack_channels=4, aggr_channels=3, d=4)
    with pytest.raises(DataError):
        fsr(torch.randn(1, 4, 4, 4), torch.randn(1, 3, 5, 5))


def test_denoiser_constant_input_constant_output():
    torch.manual_seed(3)
    mad = MultiAspectDenoiser([4, 4, 4, 4], width=4).double()
    feats = [torch.full((1, 4, size, size), 0.3, dtype=torch.float64)
             for size in (8, 4, 2, 1)]
    out = mad(feats)
    assert out.shape == (1, 1, 8, 8)
    assert out.max().item() == pytest.approx(out.min().item(), abs=1e-9)


def test_denoiser_wrong_scale_count():
    mad = MultiAspectDenoiser([4, 4, 4, 4], width=4)
    with pytest.raises(DataError):
        mad([torch.randn(1, 4, 8, 8)] * 3)


@pytest.fixture(scope="module")
def small_corrdino():
    torch.manual_seed(0)
    cfg = CorrDinoConfig(backend="stub", input_side=112, k=8, d=16, denoiser_width=16)
    return CorrDino(cfg)


def test_corrdino_output_shapes(small_corrdino, rng):
    a = random_photo(rng, 112, 112)
    b = random_photo(rng, 112, 112)
    mask_a, mask_b = corr_dino_forward(a, b, small_corrdino)
    assert mask_a.shape == (112, 112) and mask_b.shape == (112, 112)
    assert 0.0 <= mask_a.min() and mask_a.max() <= 1.0


def test_corrdino_identical_images_cross_equals_self(rng):
    img = noisy_image(rng, 112, 112)
    stack = stub_features(img, seed=0)
    last = stack.layers[-1]
    assert torch.equal(correlation(last, last), correlation(last, last.clone()))


def test_corrdino_swap_symmetry(small_corrdino, rng):
    a = random_photo(rng, 112, 112)
    b = random_photo(rng, 112, 112)
    mask_a, mask_b = corr_dino_forward(a, b, small_corrdino)
    mask_a2, mask_b2 = corr_dino_forward(b, a, small_corrdino)
    assert np.array_equal(mask_a, mask_b2)
    assert np.array_equal(mask_b, mask_a2)


def test_corrdino_rejects_wrong_input_side(small_corrdino, rng):
    a = random_photo(rng, 112, 112)
    wrong = random_photo(rng, 128, 128)
    with pytest.raises(DataError):
        corr_dino_forward(wrong, a, small_corrdino)


def test_corrdino_requires_frozen_vit():
    with pytest.raises(ModelError):
        CorrDino(CorrDinoConfig(backend="cnn"))


def test_corrdino_checkpoint_roundtrip(tmp_path, small_corrdino, rng):
    a = random_photo(rng, 112, 112)
    b = random_photo(rng, 112, 112)
    path = tmp_path / "corrdino.pt"
    save_corrdino(small_corrdino, path)
    loaded = load_corrdino(path)
    ma, _ = corr_dino_forward(a, b, small_corrdino)
    mb, _ = corr_dino_forward(a, b, loaded)
    assert np.array_equal(ma, mb)


def test_corrdino_backend_not_in_parameters(small_corrdino):
    # the frozen backend must not appear among trainable parameters
    names = [n for n, _ in small_corrdino.named_parameters()]
    assert all("backend" not in n for n in names)
    assert all(p.requires_grad for _, p in small_corrdino.named_parameters())
