import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lapformer.decoder import (ABLATIONS, DecoderConfig, FeatureRefinement, FeatureSelection,
                               LAPDecoder, PredictionHead, ProgressiveFusion, aggregate, decode,
                               fuse_low_level)
from lapformer.errors import ConfigError, DimensionError
from lapformer.model import count_parameters

B1_SHAPES = [(1, 64, 88, 88), (1, 128, 44, 44), (1, 320, 22, 22), (1, 512, 11, 11)]


def rand_pyramid(shapes, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(s, generator=g, dtype=dtype) for s in shapes]


# --- feature refinement -------------------------------------------------------

@pytest.mark.parametrize("shape,out", [((1, 320, 22, 22), 128), ((1, 64, 88, 88), 128)])
def test_frm_shape_and_nonnegative(shape, out):
    frm = FeatureRefinement(shape[1], out)
    y = frm(torch.randn(shape))
    assert y.shape == (1, out, *shape[-2:])
    assert y.min() >= 0


def test_frm_zero_input_passes_zero():
    frm = FeatureRefinement(16, 8)
    assert frm.conv.bias is None and torch.all(frm.bn.bias == 0)
    for mode in (frm.train, frm.eval):
        mode()
        assert torch.equal(frm(torch.zeros(2, 16, 5, 5)), torch.zeros(2, 8, 5, 5))


def test_frm_channel_mismatch_names_level():
    frm = FeatureRefinement(64, 32, level=2)
    with pytest.raises(ConfigError, match="level 2"):
        frm(torch.randn(1, 63, 8, 8))


# --- progressive fusion -------------------------------------------------------

def test_pff_all_at_quarter_resolution():
    refined = rand_pyramid([(1, 128, 88, 88), (1, 128, 44, 44), (1, 128, 22, 22), (1, 128, 11, 11)])
    fused = ProgressiveFusion(128, 4)(refined)
    assert [tuple(y.shape) for y in fused] == [(1, 128, 88, 88)] * 4


def _identity_slices(pff, upper: bool):
    e = pff.embed_dim
    w = torch.zeros(e, 2 * e, 1, 1)
    eye = torch.eye(e)[:, :, None, None]
    if upper:
        w[:, :e] = eye
    else:
        w[:, e:] = eye
    with torch.no_grad():
        pff.fuse[0].weight.copy_(w)
        pff.fuse[0].bias.zero_()


def test_pff_upper_identity_slice():
    x1, x2 = rand_pyramid([(1, 4, 8, 8), (1, 4, 4, 4)])
    pff = ProgressiveFusion(4, 2)
    _identity_slices(pff, upper=True)
    y1, y2 = pff([x1, x2])
    up = torch.nn.functional.interpolate(x2, size=(8, 8), mode="bilinear", align_corners=False)
    assert torch.equal(y2, up)
    assert torch.allclose(y1, y2, atol=1e-6, rtol=0)


def test_pff_lower_identity_slice():
    x1, x2 = rand_pyramid([(1, 4, 8, 8), (1, 4, 4, 4)])
    pff = ProgressiveFusion(4, 2)
    _identity_slices(pff, upper=False)
    y1, _ = pff([x1, x2])
    assert torch.allclose(y1, x1, atol=1e-6, rtol=0)


def test_pff_fuses_by_concatenation():
    # y_1 must depend on x_1 and y_2 through separate weight blocks (not a sum)
    pff = ProgressiveFusion(3, 2)
    assert pff.fuse[0].in_channels == 6 and pff.fuse[0].out_channels == 3


def test_pff_rejects_unequal_widths():
    with pytest.raises(ConfigError):
        ProgressiveFusion(4, 2)([torch.randn(1, 4, 8, 8), torch.randn(1, 5, 4, 4)])


# --- aggregation --------------------------------------------------------------

def test_aggregate_concat():
    maps = rand_pyramid([(1, 128, 88, 88)] * 4)
    out = aggregate(maps)
    assert out.shape == (1, 512, 88, 88)
    for k in (0, 127, 128, 300, 511):
        assert torch.equal(out[:, k], maps[k // 128][:, k % 128])


def test_aggregate_arity_and_spatial():
    with pytest.raises(DimensionError):
        aggregate(rand_pyramid([(1, 8, 4, 4)] * 3))
    with pytest.raises(DimensionError):
        aggregate(rand_pyramid([(1, 8, 4, 4)] * 3 + [(1, 8, 2, 2)]))


# --- feature selection --------------------------------------------------------

def test_fsm_shape():
    fsm = FeatureSelection(512, 128)
    assert fsm(torch.randn(1, 512, 88, 88)).shape == (1, 128, 88, 88)


@pytest.mark.parametrize("bias,expected", [(3.0, 1.0), (10.0, 1.0), (-3.0, 0.0), (-7.5, 0.0)])
def test_fsm_hard_sigmoid_saturation(bias, expected):
    fsm = FeatureSelection(16, 4, reduction=4)
    with torch.no_grad():
        fsm.fc2.weight.zero_()
        fsm.fc2.bias.fill_(bias)
    x = torch.randn(2, 16, 6, 6)
    out = fsm(x)
    assert torch.equal(fsm.last_weights, torch.full((2, 16), expected))
    x_inter = x if expected == 1.0 else torch.zeros_like(x)
    assert torch.equal(out, fsm.proj(x_inter))


def test_hard_sigmoid_formula():
    fsm = FeatureSelection(16, 4, reduction=4)
    z = torch.linspace(-5, 5, 41)
    assert torch.allclose(fsm.hsig(z), ((z + 3) / 6).clamp(0, 1), atol=1e-7)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 100.0))
def test_fsm_weights_in_unit_interval(seed, scale):
    torch.manual_seed(seed)
    fsm = FeatureSelection(32, 8, reduction=4)
    fsm(torch.randn(2, 32, 4, 4) * scale)
    w = fsm.last_weights
    assert (w >= 0).all() and (w <= 1).all()


# --- skip + prediction --------------------------------------------------------

def test_fuse_low_level_identities():
    a, b = torch.randn(2, 1, 8, 4, 4)
    z = torch.zeros_like(a)
    assert torch.equal(fuse_low_level(a, z), a)
    assert torch.equal(fuse_low_level(z, b), b)
    assert torch.equal(fuse_low_level(a, b), a + b)
    assert torch.equal(fuse_low_level(a, b), fuse_low_level(b, a))
    with pytest.raises(DimensionError):
        fuse_low_level(a, torch.randn(1, 8, 4, 5))


def test_predict_mask_shape_and_zero_weights():
    head = PredictionHead(128, 1)
    assert head(torch.randn(1, 128, 88, 88), (352, 352)).shape == (1, 1, 352, 352)
    with torch.no_grad():
        head.conv.weight.zero_()
        head.conv.bias.zero_()
    logits = head(torch.randn(1, 128, 8, 8), (32, 32))
    assert torch.equal(logits, torch.zeros(1, 1, 32, 32))
    assert torch.equal(torch.sigmoid(logits), torch.full((1, 1, 32, 32), 0.5))


def test_predict_mask_out_size_contract():
    with pytest.raises(DimensionError):
        PredictionHead(8, 1)(torch.randn(1, 8, 8, 8), (30, 32))


def test_predict_mask_batch_independence():
    head = PredictionHead(8, 1)
    x = torch.randn(2, 8, 6, 6)
    both = head(x, (24, 24))
    for i in range(2):
        assert torch.allclose(both[i], head(x[i:i + 1], (24, 24))[0], atol=1e-6)


# --- full decode --------------------------------------------------------------

def test_decode_b1_shape():
    with torch.no_grad():
        out = decode(rand_pyramid(B1_SHAPES), DecoderConfig())
    assert out.shape == (1, 1, 352, 352)


def test_decode_other_resolution_without_reconfiguration():
    dec = LAPDecoder(DecoderConfig(embed_dim=32)).eval()
    with torch.no_grad():
        a = dec(rand_pyramid(B1_SHAPES))
        b = dec(rand_pyramid([(1, c, s, s) for c, s in zip((64, 128, 320, 512), (80, 40, 20, 10))]))
    assert a.shape == (1, 1, 352, 352) and b.shape == (1, 1, 320, 320)


def test_decode_channel_mismatch():
    with pytest.raises(ConfigError):
        decode(rand_pyramid([(1, 8, 8, 8), (1, 16, 4, 4), (1, 32, 2, 2), (1, 64, 1, 1)]), DecoderConfig())


def test_decode_gradients_finite():
    dec = LAPDecoder(DecoderConfig(in_channels=(8, 16, 32, 64), embed_dim=16, fsm_reduction=4))
    shapes = [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4), (2, 64, 2, 2)]
    dec(rand_pyramid(shapes)).pow(2).mean().backward()
    for name, p in dec.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name


def test_decoder_state_resolutions():
    dec = LAPDecoder(DecoderConfig(in_channels=(8, 16, 32, 64), embed_dim=16, fsm_reduction=4)).eval()
    for side in (16, 24, 40):
        shapes = [(1, c, side // 2 ** i, side // 2 ** i) for i, c in enumerate((8, 16, 32, 64))]
        with torch.no_grad():
            st_ = dec.forward_state(rand_pyramid(shapes))
        assert all(y.shape[-2:] == (side, side) for y in st_.fused)
        assert st_.selected.shape == (1, 16, side, side)
        assert st_.aggregated.shape == (1, 64, side, side)
        assert st_.logits.shape == (1, 1, 4 * side, 4 * side)


def central_difference_check(f, params, h=1e-6, samples=6, seed=0):
    """Largest relative error between autograd and central differences over a
    few random entries of every parameter."""
    loss = f()
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.data.view(-1), g.view(-1)
        for idx in rng.choice(flat.numel(), size=min(samples, flat.numel()), replace=False):
            orig = flat[idx].item()
            flat[idx] = orig + h
            with torch.no_grad():
                up = f().item()
            flat[idx] = orig - h
            with torch.no_grad():
                down = f().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = gflat[idx].item()
            denom = max(abs(numeric), abs(analytic), 1e-4)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def test_toy_decoder_gradcheck_double():
    torch.manual_seed(0)
    cfg = DecoderConfig(in_channels=(3, 5), embed_dim=4, fsm_reduction=4)
    dec = LAPDecoder(cfg).double()
    x = rand_pyramid([(2, 3, 8, 8), (2, 5, 4, 4)], seed=3, dtype=torch.float64)
    target = (torch.rand(2, 1, 32, 32, dtype=torch.float64) > 0.5).double()

    def f():
        return ((dec(x) - target) ** 2).mean()

    err = central_difference_check(f, [p for p in dec.parameters()])
    assert err < 1e-5


# --- ablation configurations --------------------------------------------------

def analytic_decoder_params(name, c=(64, 128, 320, 512), e=256, r=16):
    n = len(c)
    lateral = sum(ci * e + e for ci in c)
    frm = sum(9 * ci * e for ci in c) + 2 * e * n
    pred = e + 1
    if name == "segformer":
        return lateral + n * e * e + 2 * e + pred
    total = lateral + (n - 1) * (2 * e * e + e) + pred
    flags = ABLATIONS[name]
    if flags["aggregate"]:
        total += n * e * e + e
    if flags["select"]:
        hidden = n * e // r
        total += n * e * hidden + hidden + hidden * n * e + n * e
    if flags["refine"]:
        total += frm - lateral
    return total


@pytest.mark.parametrize("name", list(ABLATIONS))
def test_ablation_param_counts_match_hand_count(name):
    dec = LAPDecoder(DecoderConfig(**ABLATIONS[name]))
    assert count_parameters(dec) == analytic_decoder_params(name)


def test_ablation_flag_validation():
    with pytest.raises(ConfigError):
        DecoderConfig(pff=False, refine=True)
    with pytest.raises(ConfigError):
        DecoderConfig(aggregate=False, select=True)
    assert DecoderConfig().ablation == "lapformer"
    assert DecoderConfig(**ABLATIONS["pff_a"]).ablation == "pff_a"


@pytest.mark.parametrize("name", list(ABLATIONS))
def test_every_ablation_decodes(name):
    dec = LAPDecoder(DecoderConfig(in_channels=(8, 16, 32, 64), embed_dim=16, fsm_reduction=4,
                                   **ABLATIONS[name])).eval()
    shapes = [(1, 8, 16, 16), (1, 16, 8, 8), (1, 32, 4, 4), (1, 64, 2, 2)]
    with torch.no_grad():
        assert dec(rand_pyramid(shapes)).shape == (1, 1, 64, 64)
