import numpy as np
import pytest

from phaseadapt import autodiff as ad
from phaseadapt import losses as L
from phaseadapt.models import CpnCfg, build_cpn


def _const_node(arr):
    g = ad.Graph()
    return g.leaf("x", np.asarray(arr, dtype=np.float64))


def test_loss_weights_defaults_and_validation():
    w = L.LossWeights()
    assert (w.lambda_d, w.lambda_cyc, w.lambda_ph, w.lambda_cpn) == (1.0, 10.0, 5.0, 0.5)
    with pytest.raises(L.LossError):
        L.LossWeights(lambda_cyc=-1)


# -- cross entropy -----------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = _const_node(np.zeros((1, 4, 2, 2)))
    mask = np.zeros((2, 2), dtype=np.uint8)
    loss = L.cross_entropy_seg(logits, mask)
    assert float(loss.value) == pytest.approx(np.log(4.0), abs=1e-9)


def test_cross_entropy_saturated_correct():
    logits = np.zeros((1, 3, 2, 2))
    logits[0, 1] = 20.0
    mask = np.ones((2, 2), dtype=np.uint8)
    loss = L.cross_entropy_seg(_const_node(logits), mask)
    assert float(loss.value) < 1e-6


def test_cross_entropy_hand_softmax_case():
    # 1x2 image, logits [[2,0],[0,2]] per pixel, both labeled class 0
    logits = np.zeros((1, 2, 1, 2))
    logits[0, :, 0, 0] = [2.0, 0.0]
    logits[0, :, 0, 1] = [0.0, 2.0]
    mask = np.zeros((1, 2), dtype=np.uint8)
    loss = L.cross_entropy_seg(_const_node(logits), mask)
    expect = (np.log(1 + np.exp(-2)) + np.log(1 + np.exp(2))) / 2
    assert float(loss.value) == pytest.approx(expect, abs=1e-4)
    assert float(loss.value) == pytest.approx(1.1269, abs=1e-4)


def test_cross_entropy_ignores_sentinel_pixels():
    logits = np.zeros((1, 2, 2, 2))
    logits[0, 0, 0, 0] = 10.0  # only scored pixel is confidently class 0
    mask = np.full((2, 2), L.IGNORE, dtype=np.uint8)
    mask[0, 0] = 0
    loss = L.cross_entropy_seg(_const_node(logits), mask)
    assert float(loss.value) < 1e-4


def test_cross_entropy_all_ignored_errors():
    logits = _const_node(np.zeros((1, 2, 2, 2)))
    with pytest.raises(L.LossError, match="ignored"):
        L.cross_entropy_seg(logits, np.full((2, 2), L.IGNORE, dtype=np.uint8))


def test_cross_entropy_nonnegative(rng):
    logits = _const_node(rng.standard_normal((1, 3, 4, 4)))
    mask = rng.integers(0, 3, (4, 4)).astype(np.uint8)
    assert float(L.cross_entropy_seg(logits, mask).value) >= 0.0


def test_cross_entropy_rejects_bad_class():
    logits = _const_node(np.zeros((1, 2, 2, 2)))
    with pytest.raises(L.LossError, match=">= K"):
        L.cross_entropy_seg(logits, np.full((2, 2), 7, dtype=np.uint8))


# -- GAN losses ----------------------------------------------------------------


def test_gan_log_generator_perfect_fool():
    loss = L.gan_generator_loss(_const_node(np.ones((2, 2))), "log")
    assert float(loss.value) == pytest.approx(0.0, abs=1e-12)


def test_gan_log_generator_exp_minus_one():
    loss = L.gan_generator_loss(_const_node(np.full((2, 2), np.exp(-1))), "log")
    assert float(loss.value) == pytest.approx(1.0, abs=1e-9)


def test_gan_least_squares_half():
    loss = L.gan_generator_loss(_const_node(np.full((3, 3), 0.5)), "least-squares")
    assert float(loss.value) == pytest.approx(0.25, abs=1e-12)


def test_gan_log_rejects_out_of_range():
    with pytest.raises(L.LossError, match="probability"):
        L.gan_generator_loss(_const_node(np.array([1.5])), "log")
    with pytest.raises(L.LossError, match="probability"):
        L.gan_generator_loss(_const_node(np.array([-0.1])), "log")


def test_gan_discriminator_losses():
    g = ad.Graph()
    real = g.leaf("r", np.full((2, 2), 0.8))
    fake = g.leaf("f", np.full((2, 2), 0.3))
    log_loss = L.gan_discriminator_loss(real, fake, "log")
    assert float(log_loss.value) == pytest.approx(-np.log(0.8) - np.log(0.7), abs=1e-9)
    ls_loss = L.gan_discriminator_loss(real, fake, "least-squares")
    assert float(ls_loss.value) == pytest.approx(0.2 ** 2 + 0.3 ** 2, abs=1e-9)


def test_unknown_variant_rejected():
    with pytest.raises(L.LossError, match="variant"):
        L.gan_generator_loss(_const_node(np.ones((1, 1))), "wasserstein")


# -- cycle loss -----------------------------------------------------------------


def test_cycle_identity_zero(rng):
    g = ad.Graph()
    x = g.leaf("x", rng.random((1, 3, 4, 4)))
    assert float(L.cycle_loss(x, x).value) == 0.0


def test_cycle_constant_offset():
    g = ad.Graph()
    x = g.leaf("x", np.zeros((1, 3, 4, 4)))
    r = g.leaf("r", np.full((1, 3, 4, 4), 0.5))
    assert float(L.cycle_loss(x, r).value) == pytest.approx(0.5, abs=1e-12)


def test_cycle_matches_elementwise_oracle(rng):
    a = rng.standard_normal((1, 2, 5, 5))
    b = rng.standard_normal((1, 2, 5, 5))
    g = ad.Graph()
    loss = L.cycle_loss(g.leaf("a", a), g.leaf("b", b))
    assert float(loss.value) == pytest.approx(np.abs(a - b).mean(), abs=1e-12)


def test_cycle_shape_mismatch():
    g = ad.Graph()
    with pytest.raises(L.LossError, match="mismatch"):
        L.cycle_loss(g.leaf("a", np.zeros((1, 1, 2, 2))), g.leaf("b", np.zeros((1, 1, 4, 4))))


# -- composed objectives ----------------------------------------------------------


class _Identity:
    """Stands in for a translator; returns its input unchanged."""

    def apply(self, g, x):
        return x


def test_translator_objective_identity_transport(rng):
    g = ad.Graph()
    x_s = g.leaf("xs", rng.random((1, 3, 8, 8)))
    x_t = g.leaf("xt", rng.random((1, 3, 8, 8)))
    w = L.LossWeights(lambda_d=0.0, lambda_cyc=10.0, lambda_ph=5.0)
    total, parts = L.translator_objective(_Identity(), _Identity(), None, None,
                                          x_s, x_t, w)
    assert float(total.value) == pytest.approx(-2 * 5.0, abs=1e-6)


def test_translator_objective_all_zero_weights(rng):
    g = ad.Graph()
    x_s = g.leaf("xs", rng.random((1, 3, 8, 8)))
    x_t = g.leaf("xt", rng.random((1, 3, 8, 8)))
    w = L.LossWeights(lambda_d=0.0, lambda_cyc=0.0, lambda_ph=0.0, lambda_cpn=0.0)
    total, _ = L.translator_objective(_Identity(), _Identity(), None, None, x_s, x_t, w)
    assert float(total.value) == 0.0


def test_translator_objective_recomposition(rng):
    from phaseadapt.models import DiscriminatorCfg, TranslatorCfg, build_discriminator, build_translator
    from phaseadapt.spectral import phase_consistency_loss

    t = build_translator(TranslatorCfg(width=2, n_res=1, seed=0), name="T")
    ti = build_translator(TranslatorCfg(width=2, n_res=1, seed=1), name="I")
    ds = build_discriminator(DiscriminatorCfg(width=2, seed=2), name="Ds").freeze()
    dt = build_discriminator(DiscriminatorCfg(width=2, seed=3), name="Dt").freeze()
    xs = rng.random((1, 3, 16, 16)).astype(np.float32)
    xt = rng.random((1, 3, 16, 16)).astype(np.float32)
    w = L.LossWeights()

    g = ad.Graph()
    total, parts = L.translator_objective(t, ti, ds, dt, g.leaf("xs", xs),
                                          g.leaf("xt", xt), w)
    # recompose from the independently evaluated component calls
    g2 = ad.Graph()
    fake_t = t.apply(g2, g2.leaf("xs", xs))
    fake_s = ti.apply(g2, g2.leaf("xt", xt))
    adv = float(L.gan_generator_loss(dt.apply(g2, fake_t), "least-squares").value) + \
        float(L.gan_generator_loss(ds.apply(g2, fake_s), "least-squares").value)
    cyc = float(L.cycle_loss(g2.leaves["xs"], ti.apply(g2, fake_t)).value) + \
        float(L.cycle_loss(g2.leaves["xt"], t.apply(g2, fake_s)).value)
    ph = phase_consistency_loss(xs[0].transpose(1, 2, 0), fake_t.value[0].transpose(1, 2, 0))[0] + \
        phase_consistency_loss(xt[0].transpose(1, 2, 0), fake_s.value[0].transpose(1, 2, 0))[0]
    expect = w.lambda_d * adv + w.lambda_cyc * cyc + w.lambda_ph * ph
    assert float(total.value) == pytest.approx(expect, rel=1e-5)


def test_translator_objective_monotone_in_lambda(rng):
    from phaseadapt.models import DiscriminatorCfg, TranslatorCfg, build_discriminator, build_translator

    t = build_translator(TranslatorCfg(width=2, n_res=1, seed=0), name="T")
    ti = build_translator(TranslatorCfg(width=2, n_res=1, seed=1), name="I")
    ds = build_discriminator(DiscriminatorCfg(width=2, seed=2), name="Ds").freeze()
    dt = build_discriminator(DiscriminatorCfg(width=2, seed=3), name="Dt").freeze()
    xs = rng.random((1, 3, 16, 16)).astype(np.float32)
    xt = rng.random((1, 3, 16, 16)).astype(np.float32)

    def value(**kw):
        g = ad.Graph()
        total, _ = L.translator_objective(t, ti, ds, dt, g.leaf("xs", xs),
                                          g.leaf("xt", xt), L.LossWeights(**kw))
        return float(total.value)

    base = value()
    assert value(lambda_cyc=20.0) >= base  # cycle loss is positive here
    assert value(lambda_d=2.0) >= base


def test_segmentation_objective_reduces_to_ce_without_cpn(rng):
    from phaseadapt.models import SegCfg, build_segnet

    net = build_segnet(SegCfg(width=2, n_classes=3, image_size=32, seed=0), name="phi")
    xs = rng.random((1, 3, 32, 32)).astype(np.float32)
    xt = rng.random((1, 3, 32, 32)).astype(np.float32)
    mask = rng.integers(0, 3, (32, 32)).astype(np.uint8)
    g = ad.Graph()
    w = L.LossWeights(lambda_cpn=0.0)
    total, parts = L.segmentation_objective(net, None, g.leaf("xs", xs), mask,
                                            g.leaf("xt", xt), w)
    assert float(total.value) == pytest.approx(float(parts["ce"].value))

    g2 = ad.Graph()
    ce = L.cross_entropy_seg(net.apply(g2, g2.leaf("x", xs)), mask)
    assert float(total.value) == pytest.approx(float(ce.value), rel=1e-6)


def test_segmentation_objective_requires_frozen_prior(rng):
    from phaseadapt.models import SegCfg, build_segnet

    net = build_segnet(SegCfg(width=2, n_classes=3, image_size=32, seed=0), name="phi")
    prior = build_cpn(CpnCfg(n_classes=3, width_mult=0.125, seg_branch_width=2,
                             bottleneck_channels=1, image_size=32, seed=1), name="Q")
    xs = rng.random((1, 3, 32, 32)).astype(np.float32)
    mask = rng.integers(0, 3, (32, 32)).astype(np.uint8)
    g = ad.Graph()
    with pytest.raises(L.LossError, match="frozen"):
        L.segmentation_objective(net, prior, g.leaf("xs", xs), mask,
                                 g.leaf("xt", xs), L.LossWeights())


def test_segmentation_objective_recomposition(rng):
    from phaseadapt.cpn import cpn_score
    from phaseadapt.models import SegCfg, build_segnet

    net = build_segnet(SegCfg(width=2, n_classes=3, image_size=32, seed=0), name="phi")
    prior = build_cpn(CpnCfg(n_classes=3, width_mult=0.125, seg_branch_width=2,
                             bottleneck_channels=1, image_size=32, seed=1), name="Q").freeze()
    xs = rng.random((1, 3, 32, 32)).astype(np.float32)
    xt = rng.random((1, 3, 32, 32)).astype(np.float32)
    mask = rng.integers(0, 3, (32, 32)).astype(np.uint8)
    g = ad.Graph()
    w = L.LossWeights(lambda_cpn=0.5)
    total, parts = L.segmentation_objective(net, prior, g.leaf("xs", xs), mask,
                                            g.leaf("xt", xt), w)
    g2 = ad.Graph()
    ce = float(L.cross_entropy_seg(net.apply(g2, g2.leaf("x", xs)), mask).value)
    seg_soft = ad.softmax_c(net.apply(g2, g2.leaf("xt", xt))).value[0]
    score = cpn_score(prior, seg_soft, xt[0])
    assert float(total.value) == pytest.approx(ce + 0.5 * (-score), rel=1e-5)
    # gradient flows into the segmenter only
    grads = g.backward(total)
    assert any(k.startswith("phi/") for k in grads)
    assert all(not k.startswith("Q/") for k in grads)
