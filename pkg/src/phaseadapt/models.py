"""Toy-scale networks: image translators, patch discriminators, a
segmentation encoder-decoder, and the scene-compatibility prior network.

Every model owns its parameter arrays (mutated in place by the optimizer) and
wires itself into a :class:`~phaseadapt.autodiff.Graph` on demand, so the same
weights can appear in several retained graphs at once. Frozen models
instantiate as non-trainable parameters: gradients still flow through their
activations but never into their weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from . import fileio


class ModelError(ValueError):
    pass


def _he_conv(rng, c_out, c_in, kh, kw, dtype):
    std = np.sqrt(2.0 / (c_in * kh * kw))
    return (rng.standard_normal((c_out, c_in, kh, kw)) * std).astype(dtype)


class BaseModel:
    """Parameter store + graph wiring shared by all architectures."""

    cfg_cls = None

    def __init__(self, cfg, dtype=np.float32, name=None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.seed = cfg.seed
        self.name = name or f"{type(self).__name__}:{cfg.seed}"
        self.frozen = False
        self.params: dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(cfg.seed)
        self._build_params()
        del self._rng

    def _conv(self, name, c_out, c_in, k):
        self.params[f"{name}.w"] = _he_conv(self._rng, c_out, c_in, k, k, self.dtype)
        self.params[f"{name}.b"] = np.zeros((c_out, 1, 1), dtype=self.dtype)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self):
        self.frozen = True
        return self

    def _p(self, g: ad.Graph, name: str) -> ad.Node:
        return g.param(f"{self.prefix}/{name}", self.params[name],
                       trainable=not self.frozen)

    def _conv_block(self, g, x, name, stride=1, pad=1):
        w = self._p(g, f"{name}.w")
        b = self._p(g, f"{name}.b")
        return ad.add(ad.conv2d(x, w, stride=stride, pad=pad), b)

    @property
    def prefix(self) -> str:
        return self.name

    def grads_for(self, all_grads: dict) -> dict:
        pre = self.prefix + "/"
        return {k[len(pre):]: v for k, v in all_grads.items() if k.startswith(pre)}

    def astype(self, dtype):
        """Cast parameters in place (f64 copies are used for gradient checks)."""
        self.dtype = np.dtype(dtype)
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        return self

    def save(self, path):
        tensors = dict(self.params)
        meta = {"kind": type(self).__name__, "cfg": asdict(self.cfg), "seed": self.seed}
        tensors["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        fileio.write_checkpoint(path, tensors)

    @classmethod
    def load(cls, path, name=None):
        tensors = fileio.read_checkpoint(path)
        meta = json.loads(bytes(tensors.pop("__meta__")).decode("utf-8"))
        if meta["kind"] != cls.__name__:
            raise ModelError(f"checkpoint holds a {meta['kind']}, expected {cls.__name__}")
        model = cls(cls.cfg_cls(**meta["cfg"]), name=name)
        for pname in model.params:
            model.params[pname] = np.ascontiguousarray(tensors[pname])
        return model


# -- translator ---------------------------------------------------------------

@dataclass
class TranslatorCfg:
    width: int = 8          # encoder base width; doubles at each downsampling
    n_res: int = 2          # residual blocks in the trunk
    end_kernel: int = 3     # kernel of the full-resolution input/output convs
    in_channels: int = 3
    image_size: int = 64
    seed: int = 0


class Translator(BaseModel):
    """Encoder / residual trunk / decoder image map with outputs in [0, 1]."""

    cfg_cls = TranslatorCfg

    def _build_params(self):
        cfg = self.cfg
        if cfg.image_size % 4:
            raise ModelError(f"image_size {cfg.image_size} not divisible by 4")
        if cfg.end_kernel % 2 == 0:
            raise ModelError("end_kernel must be odd")
        w = cfg.width
        self._conv("enc0", w, cfg.in_channels, cfg.end_kernel)
        self._conv("enc1", 2 * w, w, 3)
        self._conv("enc2", 4 * w, 2 * w, 3)
        for i in range(cfg.n_res):
            self._conv(f"res{i}.0", 4 * w, 4 * w, 3)
            self._conv(f"res{i}.1", 4 * w, 4 * w, 3)
        self._conv("dec0", 2 * w, 4 * w, 3)
        self._conv("dec1", w, 2 * w, 3)
        self._conv("out", cfg.in_channels, w, cfg.end_kernel)

    def apply(self, g: ad.Graph, x: ad.Node) -> ad.Node:
        ep = self.cfg.end_kernel // 2
        h = ad.relu(ad.instance_norm(self._conv_block(g, x, "enc0", pad=ep)))
        h = ad.relu(ad.instance_norm(self._conv_block(g, h, "enc1", stride=2)))
        h = ad.relu(ad.instance_norm(self._conv_block(g, h, "enc2", stride=2)))
        for i in range(self.cfg.n_res):
            r = ad.relu(ad.instance_norm(self._conv_block(g, h, f"res{i}.0")))
            r = ad.instance_norm(self._conv_block(g, r, f"res{i}.1"))
            h = ad.add(h, r)
        h = ad.relu(ad.instance_norm(self._conv_block(g, ad.upsample2(h), "dec0")))
        h = ad.relu(ad.instance_norm(self._conv_block(g, ad.upsample2(h), "dec1")))
        h = ad.tanh(self._conv_block(g, h, "out", pad=ep))
        return ad.scale(ad.add(h, g.const(np.ones((), dtype=self.dtype))), 0.5)


# -- discriminator --------------------------------------------------------------

@dataclass
class DiscriminatorCfg:
    width: int = 16
    in_channels: int = 3
    seed: int = 0


class Discriminator(BaseModel):
    """Strided-conv patch critic; a grid of per-patch domain scores."""

    cfg_cls = DiscriminatorCfg

    def _build_params(self):
        w = self.cfg.width
        self._conv("c0", w, self.cfg.in_channels, 4)
        self._conv("c1", 2 * w, w, 4)
        self._conv("c2", 1, 2 * w, 4)

    def apply(self, g: ad.Graph, x: ad.Node, head="raw") -> ad.Node:
        h = ad.leaky_relu(self._conv_block(g, x, "c0", stride=2, pad=1))
        h = ad.leaky_relu(ad.instance_norm(self._conv_block(g, h, "c1", stride=2, pad=1)))
        h = self._conv_block(g, h, "c2", stride=1, pad=1)
        if head == "sigmoid":
            return ad.sigmoid(h)
        if head != "raw":
            raise ModelError(f"unknown head {head!r}")
        return h


# -- segmentation network --------------------------------------------------------

@dataclass
class SegCfg:
    width: int = 12
    n_classes: int = 5
    in_channels: int = 3
    image_size: int = 64
    seed: int = 0


class SegNet(BaseModel):
    """Two-level encoder-decoder with skip connections; per-pixel K logits."""

    cfg_cls = SegCfg

    def _build_params(self):
        cfg = self.cfg
        if cfg.n_classes < 2:
            raise ModelError(f"n_classes must be >= 2, got {cfg.n_classes}")
        if cfg.image_size % 4:
            raise ModelError(f"image_size {cfg.image_size} not divisible by 4 (pooling depth 2)")
        w = cfg.width
        self._conv("e0", w, cfg.in_channels, 3)
        self._conv("e1", 2 * w, w, 3)
        self._conv("e2", 4 * w, 2 * w, 3)
        self._conv("d1", 2 * w, 4 * w + 2 * w, 3)
        self._conv("d0", w, 2 * w + w, 3)
        self.params["head.w"] = _he_conv(self._rng, cfg.n_classes, w, 1, 1, self.dtype)
        self.params["head.b"] = np.zeros((cfg.n_classes, 1, 1), dtype=self.dtype)

    def apply(self, g: ad.Graph, x: ad.Node) -> ad.Node:
        """Returns per-pixel logits (N, K, H, W)."""
        e0 = ad.relu(ad.instance_norm(self._conv_block(g, x, "e0")))
        e1 = ad.relu(ad.instance_norm(self._conv_block(g, ad.max_pool2(e0), "e1")))
        e2 = ad.relu(ad.instance_norm(self._conv_block(g, ad.max_pool2(e1), "e2")))
        d1 = ad.concat_c([ad.upsample2(e2), e1])
        d1 = ad.relu(ad.instance_norm(self._conv_block(g, d1, "d1")))
        d0 = ad.concat_c([ad.upsample2(d1), e0])
        d0 = ad.relu(ad.instance_norm(self._conv_block(g, d0, "d0")))
        w = self._p(g, "head.w")
        b = self._p(g, "head.b")
        return ad.add(ad.conv2d(d0, w, stride=1, pad=0), b)


# -- conditional prior network --------------------------------------------------

@dataclass
class CpnCfg:
    n_classes: int = 5
    width_mult: float = 0.25        # scales the reference channel schedules
    bottleneck_channels: int = 4    # segmentation-branch channels at the bottleneck
    seg_branch_width: int = 8
    in_channels: int = 3
    image_size: int = 64
    seed: int = 0

    def image_channels(self):
        return [max(1, int(round(c * self.width_mult))) for c in (16, 32, 64, 128, 256, 256)]

    def decoder_channels(self):
        return [max(1, int(round(c * self.width_mult))) for c in (512, 256, 128, 64, 32, 16)]


class CPN(BaseModel):
    """Scene-compatibility scorer: reconstructs a bottlenecked segmentation by
    leaning on image structure. Skip connections run from the image encoder to
    the decoder only; the segmentation branch ends in a narrow bottleneck of
    ``bottleneck_channels * (H/32) * (W/32)`` scalars per image.
    """

    cfg_cls = CpnCfg

    def _build_params(self):
        cfg = self.cfg
        if cfg.n_classes < 2:
            raise ModelError(f"n_classes must be >= 2, got {cfg.n_classes}")
        if cfg.image_size % 32:
            raise ModelError(f"image_size {cfg.image_size} not divisible by 32 (pooling depth 5)")
        ich = cfg.image_channels()
        dch = cfg.decoder_channels()
        prev = cfg.in_channels
        for i, c in enumerate(ich):
            self._conv(f"img{i}", c, prev, 3)
            prev = c
        sw = cfg.seg_branch_width
        prev = cfg.n_classes
        for i in range(5):
            c = sw if i < 4 else cfg.bottleneck_channels
            self._conv(f"seg{i}", c, prev, 3)
            prev = c
        # decoder stage i consumes the previous stage plus one encoder skip
        skips = [None, ich[4], ich[3], ich[2], ich[1], ich[0]]
        prev = ich[5] + cfg.bottleneck_channels
        for i, c in enumerate(dch):
            cin = prev + (skips[i] or 0)
            self._conv(f"dec{i}", c, cin, 3)
            prev = c
        self._conv("head", cfg.n_classes, dch[-1], 1)

    @property
    def bottleneck_size(self) -> int:
        s = self.cfg.image_size // 32
        return self.cfg.bottleneck_channels * s * s

    def apply(self, g: ad.Graph, image: ad.Node, seg: ad.Node) -> ad.Node:
        """``seg`` is one-hot or softmax (N, K, H, W); returns reconstruction
        logits of the same shape."""
        # no normalization layers: the class identity travels the bottleneck as
        # a spatially constant signal, which per-channel spatial normalization
        # would annihilate
        feats = []
        h = image
        for i in range(6):
            h = ad.relu(self._conv_block(g, h, f"img{i}"))
            feats.append(h)
            if i < 5:
                h = ad.max_pool2(h)
        s = seg
        for i in range(5):
            s = ad.relu(self._conv_block(g, s, f"seg{i}"))
            s = ad.max_pool2(s)
        d = ad.concat_c([h, s])
        skips = [None, feats[4], feats[3], feats[2], feats[1], feats[0]]
        for i in range(6):
            if skips[i] is not None:
                d = ad.concat_c([d, skips[i]])
            d = ad.relu(self._conv_block(g, d, f"dec{i}"))
            if i < 5:
                d = ad.upsample2(d)
        w = self._p(g, "head.w")
        b = self._p(g, "head.b")
        return ad.add(ad.conv2d(d, w, stride=1, pad=0), b)


# -- builders (cfg in, deterministic model out) -----------------------------------

def build_translator(cfg: TranslatorCfg, name=None) -> Translator:
    return Translator(cfg, name=name)


def build_discriminator(cfg: DiscriminatorCfg, name=None) -> Discriminator:
    return Discriminator(cfg, name=name)


def build_segnet(cfg: SegCfg, name=None) -> SegNet:
    return SegNet(cfg, name=name)


def build_cpn(cfg: CpnCfg, name=None) -> CPN:
    return CPN(cfg, name=name)
