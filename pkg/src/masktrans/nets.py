"""Generator (two-stream, FATE/FADE residual blocks) and the
segmentation-conditioned multi-level discriminator."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import Conv2d, Module, set_padding_mode
from .autodiff.tensor import Tensor, add, concat, leaky_relu, mul, tanh
from .denorm import LEAK, Denorm, FateResBlock
from .errors import ConfigMismatch, DivisibilityError, OddDimension, ShapeMismatch

FULL_GEN_ENCODER = (256, 512, 1024)
FULL_GEN_BLOCKS = (1024, 1024, 1024, 512, 256, 128, 64, 64, 64, 64)
FULL_CONTENT_ENCODER = (64, 64)
FULL_CONTENT = (64, 128, 256, 512, 1024, 1024, 1024, 1024)

FULL_DOWN = (64, 128, 256, 512, 512)
FULL_LATERAL = (256, 256, 256, 256)
FULL_PREDICT = (128, 128, 128)
FULL_SEG = (128, 128, 128)
FULL_SEG_EMBED = 128


def scale_filters(filters, width: float) -> tuple[int, ...]:
    return tuple(max(1, int(round(width * c))) for c in filters)


@dataclass
class GeneratorConfig:
    width_multiplier: float = 1 / 16
    cond_channels: int = 8
    image_channels: int = 3
    gen_encoder_filters: tuple[int, ...] = FULL_GEN_ENCODER
    gen_block_filters: tuple[int, ...] = FULL_GEN_BLOCKS
    content_encoder_filters: tuple[int, ...] = FULL_CONTENT_ENCODER
    content_filters: tuple[int, ...] = FULL_CONTENT
    denorm: str = "fate"
    gain: float = 0.02
    padding_mode: str = "zeros"

    def scaled(self, name: str) -> tuple[int, ...]:
        return scale_filters(getattr(self, name), self.width_multiplier)

    @property
    def pre_downsample(self) -> int:
        """Halvings applied to the input before the generator-stream encoder."""
        return 2

    @property
    def total_down(self) -> int:
        return self.pre_downsample + len(self.gen_encoder_filters)

    @property
    def factor(self) -> int:
        return 2**self.total_down

    def content_level(self, block: int) -> int:
        """Content-stream level feeding generator block ``block``."""
        return max(len(self.content_filters) - 1 - block, 0)

    def level_down(self, level: int) -> int:
        return min(level, self.total_down)

    def validate(self) -> None:
        enc, blocks, content = (self.scaled(n) for n in ("gen_encoder_filters", "gen_block_filters", "content_filters"))
        if len(content) <= self.total_down:
            raise ConfigMismatch("content stream needs more levels than downsampling steps")
        prev = enc[-1]
        for i, c_out in enumerate(blocks):
            lvl = self.content_level(i)
            if content[lvl] != prev:
                raise ConfigMismatch(
                    f"generator block {i} takes {prev} channels but content level {lvl} has {content[lvl]}"
                )
            prev = c_out
        if self.level_down(self.content_level(len(blocks) - 1)) != 0:
            raise ConfigMismatch("generator stream must end at full resolution")


@dataclass
class DiscriminatorConfig:
    width_multiplier: float = 1 / 16
    cond_channels: int = 8
    image_channels: int = 3
    down_filters: tuple[int, ...] = FULL_DOWN
    lateral_filters: tuple[int, ...] = FULL_LATERAL
    predict_filters: tuple[int, ...] = FULL_PREDICT
    seg_filters: tuple[int, ...] = FULL_SEG
    seg_embed_filters: int = FULL_SEG_EMBED
    levels: int = 3
    gain: float = 0.02

    def scaled(self, name: str) -> tuple[int, ...]:
        v = getattr(self, name)
        return scale_filters(v if isinstance(v, tuple) else (v,), self.width_multiplier)

    def validate(self) -> None:
        if len(self.lateral_filters) != len(self.down_filters) - 1:
            raise ConfigMismatch("one lateral 1x1 conv per downsampling conv after the first")
        if not (len(self.predict_filters) == len(self.seg_filters) == self.levels):
            raise ConfigMismatch("prediction filter lists must have one entry per level")
        if self.levels > len(self.lateral_filters) - 1:
            raise ConfigMismatch("not enough lateral maps for the requested prediction levels")
        if len(set(self.scaled("lateral_filters"))) != 1:
            raise ConfigMismatch("lateral maps are summed, so they need equal widths")
        if set(self.scaled("seg_filters")) != set(self.scaled("seg_embed_filters")):
            raise ConfigMismatch("segmentation features and embedding must have equal widths")


class ResBlock(Module):
    """Plain residual block for the content stream (norm -> lrelu -> conv, twice)."""

    def __init__(self, c_in, c_out, norm="instance", spectral=True, rng=None, gain=0.02, init=True):
        self.norm = norm
        mid = min(c_in, c_out)
        self.conv0 = Conv2d(c_in, mid, 3, spectral=spectral, rng=rng, gain=gain, init=init)
        self.conv1 = Conv2d(mid, c_out, 3, spectral=spectral, rng=rng, gain=gain, init=init)
        self.conv_s = (
            Conv2d(c_in, c_out, 1, spectral=spectral, bias=False, rng=rng, gain=gain, init=init)
            if c_in != c_out
            else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        dx = self.conv0(leaky_relu(F.normalize(x, self.norm), LEAK))
        dx = self.conv1(leaky_relu(F.normalize(dx, self.norm), LEAK))
        xs = self.conv_s(x) if self.conv_s is not None else x
        return add(xs, dx)


class Generator(Module):
    """Content stream (instance norm) feeding a generator stream of
    FATE/FADE residual blocks (batch norm) at every level."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator | None = None, init: bool = True):
        cfg.validate()
        self.cfg = cfg
        cin = cfg.image_channels + cfg.cond_channels
        g = cfg.gain
        enc = cfg.scaled("gen_encoder_filters")
        blocks = cfg.scaled("gen_block_filters")
        cenc = cfg.scaled("content_encoder_filters")
        content = cfg.scaled("content_filters")

        self.content_encoder = []
        prev = cin
        for c in cenc:
            self.content_encoder.append(Conv2d(prev, c, 3, rng=rng, gain=g, init=init))
            prev = c
        self.content_blocks = []
        for c in content:
            self.content_blocks.append(ResBlock(prev, c, "instance", True, rng, g, init))
            prev = c

        self.gen_encoder = []
        prev = cin
        for c in enc:
            self.gen_encoder.append(Conv2d(prev, c, 3, stride=2, rng=rng, gain=g, init=init))
            prev = c
        self.gen_blocks = []
        for i, c in enumerate(blocks):
            c_f = content[cfg.content_level(i)]
            self.gen_blocks.append(FateResBlock(prev, c, c_f, cfg.denorm, "batch", True, rng, g, init))
            prev = c
        self.to_rgb = Conv2d(prev, cfg.image_channels, 3, rng=rng, gain=g, init=init)
        if cfg.padding_mode != "zeros":
            set_padding_mode(self, cfg.padding_mode)

    def layer_filters(self) -> dict[str, list[int]]:
        return {
            "content_encoder": [c.cout for c in self.content_encoder],
            "content": [b.conv1.cout for b in self.content_blocks],
            "gen_encoder": [c.cout for c in self.gen_encoder],
            "gen_blocks": [b.c_out for b in self.gen_blocks],
        }

    def denorm_sites(self) -> list[tuple[str, Denorm]]:
        out = []
        for i, b in enumerate(self.gen_blocks):
            for name in ("mod0", "mod1", "mod_s"):
                out.append((f"block{i}.{name}", getattr(b, name)))
        return out

    def content_features(self, x: Tensor) -> list[Tensor]:
        h = x
        for conv in self.content_encoder:
            h = leaky_relu(F.instance_norm(conv(h)), LEAK)
        feats = []
        for lvl, block in enumerate(self.content_blocks):
            if 0 < lvl <= self.cfg.total_down:
                h = F.resample(h, 0.5, "nearest")
            h = block(h)
            feats.append(h)
        return feats

    def latent(self, x: Tensor) -> Tensor:
        h = F.resize(x, (x.shape[2] >> self.cfg.pre_downsample, x.shape[3] >> self.cfg.pre_downsample), "nearest")
        last = len(self.gen_encoder) - 1
        for i, conv in enumerate(self.gen_encoder):
            h = conv(h)
            if i < last:
                h = leaky_relu(F.instance_norm(h), LEAK)
        return h

    def __call__(self, image: Tensor, cond: Tensor) -> Tensor:
        _check_image_cond(image, cond)
        n, _, hh, ww = image.shape
        if hh % self.cfg.factor or ww % self.cfg.factor:
            raise DivisibilityError(f"input size {(hh, ww)} not divisible by {self.cfg.factor}")
        x = concat([image, cond], axis=1)
        feats = self.content_features(x)
        h = self.latent(x)
        for i, block in enumerate(self.gen_blocks):
            f = feats[self.cfg.content_level(i)]
            if f.shape[2:] != h.shape[2:]:
                h = F.resize(h, f.shape[2:], "nearest")
            h = block(h, f)
        return tanh(self.to_rgb(leaky_relu(h, LEAK)))


class Discriminator(Module):
    """Five stride-2 convolutions, lateral 1x1 maps on the last four, a
    top-down path with bilinear upsampling, and a class-projected prediction
    on each of the finest ``levels`` upsampled maps."""

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator | None = None, init: bool = True):
        cfg.validate()
        self.cfg = cfg
        g = cfg.gain
        down = cfg.scaled("down_filters")
        lat = cfg.scaled("lateral_filters")
        pred = cfg.scaled("predict_filters")
        seg = cfg.scaled("seg_filters")
        emb = cfg.scaled("seg_embed_filters")[0]
        prev = cfg.image_channels
        self.down = []
        for c in down:
            self.down.append(Conv2d(prev, c, 3, stride=2, spectral=True, rng=rng, gain=g, init=init))
            prev = c
        self.lateral = [Conv2d(c, l, 1, spectral=True, rng=rng, gain=g, init=init) for c, l in zip(down[1:], lat)]
        self.predict = [Conv2d(lat[0], p, 3, spectral=True, rng=rng, gain=g, init=init) for p in pred]
        self.to_score = [Conv2d(p, 1, 3, spectral=True, rng=rng, gain=g, init=init) for p in pred]
        self.seg_conv = [Conv2d(p, s, 3, spectral=True, rng=rng, gain=g, init=init) for p, s in zip(pred, seg)]
        self.seg_embed = Conv2d(cfg.cond_channels, emb, 3, spectral=True, rng=rng, gain=g, init=init)

    def layer_filters(self) -> dict[str, list[int]]:
        return {
            "down": [c.cout for c in self.down],
            "lateral": [c.cout for c in self.lateral],
            "predict": [c.cout for c in self.predict],
            "seg": [c.cout for c in self.seg_conv],
            "seg_embed": [self.seg_embed.cout],
            "score": [c.cout for c in self.to_score],
        }

    def __call__(self, image: Tensor, cond: Tensor, seg_branch: bool = True) -> list[Tensor]:
        _check_image_cond(image, cond)
        h = image
        feats = []
        for conv in self.down:
            h = leaky_relu(F.instance_norm(conv(h)), LEAK)
            feats.append(h)
        lats = [conv(f) for conv, f in zip(self.lateral, feats[1:])]
        u = lats[-1]
        maps = []
        for level in range(self.cfg.levels):
            target = lats[-2 - level]
            u = add(F.resize(u, target.shape[2:], "bilinear"), target)
            hp = leaky_relu(F.instance_norm(self.predict[level](u)), LEAK)
            score = self.to_score[level](hp)
            if seg_branch:
                c = F.resize(cond, hp.shape[2:], "nearest")
                proj = F.channel_sum(mul(self.seg_conv[level](hp), self.seg_embed(c)))
                score = add(score, proj)
            maps.append(score)
        return maps


def _check_image_cond(image: Tensor, cond: Tensor) -> None:
    if image.ndim != 4 or cond.ndim != 4:
        raise ShapeMismatch(f"expected NCHW tensors, got {image.shape} and {cond.shape}")
    if image.shape[0] != cond.shape[0] or image.shape[2:] != cond.shape[2:]:
        raise ShapeMismatch(f"image {image.shape} and condition {cond.shape} not aligned")


def build_generator(cfg: GeneratorConfig, rng: np.random.Generator | None = None, init: bool = True) -> Generator:
    """Build with Xavier-normal weights; ``init=False`` leaves zero weights
    (cheap shape audits of the full-width model)."""
    return Generator(cfg, rng if rng is not None else np.random.default_rng(0), init)


def build_discriminator(cfg: DiscriminatorConfig, rng: np.random.Generator | None = None,
                        init: bool = True) -> Discriminator:
    return Discriminator(cfg, rng if rng is not None else np.random.default_rng(0), init)


def generator_forward(params: Generator, image: Tensor, cond: Tensor) -> Tensor:
    return params(image, cond)


def discriminator_forward(params: Discriminator, image: Tensor, cond: Tensor) -> list[Tensor]:
    return params(image, cond)


def two_scale_views(image: Tensor, cond: Tensor, mask: Tensor | None = None):
    """Full-size view and a half-size view (bilinear image, nearest condition/mask)."""
    h, w = image.shape[2], image.shape[3]
    if h % 2 or w % 2:
        raise OddDimension(f"cannot halve odd spatial size {(h, w)}")
    half = (
        F.resample(image, 0.5, "bilinear"),
        F.resample(cond, 0.5, "nearest"),
        None if mask is None else F.resample(mask, 0.5, "nearest"),
    )
    return [(image, cond, mask), half]


def config_dict(cfg) -> dict:
    return {f.name: (list(v) if isinstance(v := getattr(cfg, f.name), tuple) else v) for f in fields(cfg)}


def config_from_dict(cls, raw: dict):
    kw = {}
    for f in fields(cls):
        if f.name in raw:
            v = raw[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)
