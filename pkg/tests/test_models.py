import numpy as np
import pytest

from phaseadapt import autodiff as ad
from phaseadapt.models import (
    CPN, CpnCfg, Discriminator, DiscriminatorCfg, ModelError, SegCfg, SegNet,
    Translator, TranslatorCfg, build_cpn, build_segnet, build_translator,
)


def test_cpn_reference_channel_schedule():
    cfg = CpnCfg(n_classes=19, width_mult=1.0)
    assert cfg.image_channels() == [16, 32, 64, 128, 256, 256]
    assert cfg.decoder_channels() == [512, 256, 128, 64, 32, 16]


def test_segnet_shapes_and_softmax_normalization():
    net = build_segnet(SegCfg(width=4, n_classes=2, image_size=32, seed=0))
    g = ad.Graph()
    x = g.leaf("x", np.random.default_rng(0).random((1, 3, 32, 32)).astype(np.float32))
    probs = ad.softmax_c(net.apply(g, x))
    assert probs.value.shape == (1, 2, 32, 32)
    np.testing.assert_allclose(probs.value.sum(axis=1), 1.0, atol=1e-6)


def test_same_seed_bit_identical_parameters():
    a = build_translator(TranslatorCfg(seed=3))
    b = build_translator(TranslatorCfg(seed=3))
    assert set(a.params) == set(b.params)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_different_seed_different_parameters():
    a = build_translator(TranslatorCfg(seed=3))
    b = build_translator(TranslatorCfg(seed=4))
    assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_k_below_two_rejected():
    with pytest.raises(ModelError):
        build_segnet(SegCfg(n_classes=1))
    with pytest.raises(ModelError):
        build_cpn(CpnCfg(n_classes=1))


def test_indivisible_extent_rejected():
    with pytest.raises(ModelError, match="divisible"):
        build_cpn(CpnCfg(image_size=48))  # 48 % 32 != 0


def test_translator_output_in_unit_interval(rng):
    t = build_translator(TranslatorCfg(width=4, n_res=1, seed=1))
    g = ad.Graph()
    x = g.leaf("x", (rng.random((1, 3, 16, 16)) * 4 - 2).astype(np.float32))
    out = t.apply(g, x)
    assert out.value.shape == (1, 3, 16, 16)
    assert out.value.min() >= 0.0 and out.value.max() <= 1.0


def test_cpn_bottleneck_is_structural(rng):
    cfg = CpnCfg(n_classes=5, width_mult=0.25, bottleneck_channels=4, image_size=64, seed=0)
    model = build_cpn(cfg)
    assert model.bottleneck_size == 4 * 2 * 2
    assert model.bottleneck_size < 64 * 64 * 5


def test_cpn_forward_shape(rng):
    cfg = CpnCfg(n_classes=3, width_mult=0.125, seg_branch_width=2,
                 bottleneck_channels=1, image_size=32, seed=0)
    model = build_cpn(cfg)
    g = ad.Graph()
    img = g.leaf("img", rng.random((1, 3, 32, 32)).astype(np.float32))
    seg = g.leaf("seg", rng.random((1, 3, 32, 32)).astype(np.float32))
    out = model.apply(g, img, seg)
    assert out.value.shape == (1, 3, 32, 32)


def test_checkpoint_save_load_round_trip(tmp_path):
    t = build_translator(TranslatorCfg(width=4, n_res=1, seed=9))
    path = tmp_path / "T.tnsr"
    t.save(path)
    back = Translator.load(path)
    assert back.cfg == t.cfg
    for k in t.params:
        assert np.array_equal(back.params[k], t.params[k])
    with pytest.raises(ModelError, match="expected SegNet"):
        SegNet.load(path)


def test_frozen_model_contributes_no_grads(rng):
    d = Discriminator(DiscriminatorCfg(width=4, seed=0)).freeze()
    g = ad.Graph()
    x = g.param("x", rng.random((1, 3, 16, 16)).astype(np.float32))
    loss = ad.mean_all(d.apply(g, x))
    grads = g.backward(loss)
    assert all(not k.startswith(d.prefix) for k in grads)
    assert "x" in grads  # gradient still flows through the frozen weights


def _end_to_end_gradcheck(model, build_inputs, tol=1e-4):
    model.astype(np.float64)
    g = ad.Graph()
    out = build_inputs(g, model)
    loss = ad.mean_all(out)
    assert ad.grad_check(g, loss, step=1e-4) <= tol


def test_translator_end_to_end_gradcheck(rng):
    t = Translator(TranslatorCfg(width=2, n_res=1, image_size=8, seed=0))
    x = rng.random((1, 3, 8, 8))
    _end_to_end_gradcheck(t, lambda g, m: m.apply(g, g.leaf("x", x)))


def test_discriminator_end_to_end_gradcheck(rng):
    d = Discriminator(DiscriminatorCfg(width=2, seed=0))
    x = rng.random((1, 3, 8, 8))
    _end_to_end_gradcheck(d, lambda g, m: m.apply(g, g.leaf("x", x), "sigmoid"))


def test_segnet_end_to_end_gradcheck(rng):
    net = SegNet(SegCfg(width=2, n_classes=2, image_size=8, seed=0))
    x = rng.random((1, 3, 8, 8))
    _end_to_end_gradcheck(net, lambda g, m: m.apply(g, g.leaf("x", x)))


def _differentiable_point(model, rng):
    """Damp weights and lift biases so no relu clips and no pool window ties;
    central differences are only meaningful away from those kinks."""
    for name, p in model.params.items():
        if name.endswith(".w"):
            p *= 0.3
        else:
            p += rng.uniform(0.3, 0.5, p.shape)


def test_cpn_end_to_end_gradcheck(rng):
    cfg = CpnCfg(n_classes=2, width_mult=0.03125, seg_branch_width=1,
                 bottleneck_channels=1, image_size=32, seed=0)
    model = CPN(cfg, dtype=np.float64)
    _differentiable_point(model, rng)
    img = rng.random((1, 3, 32, 32))
    seg = rng.random((1, 2, 32, 32))
    g = ad.Graph()
    out = model.apply(g, g.leaf("img", img), g.leaf("seg", seg))
    loss = ad.mean_all(out)
    assert ad.grad_check(g, loss, step=1e-4) <= 1e-4
