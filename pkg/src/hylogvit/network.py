"""Shared encoder with reflectance, shading and dehazing decoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from . import ops
from .cfsm import CfsmParams, cfsm, fuse_sum
from .hylog import BLOCK_KINDS, AblationBlock, HyLoGConfig
from .nn import ActNorm, Conv2d, ConvNormReLU, ConvTranspose2d, Module, ResBlock
from .tensor import ShapeError, Tensor, concat

DECODER_MODES = ("full", "w/o-RS", "w-R", "w-S")
FUSION_MODES = ("cfsm", "sum")


@dataclass
class ModelConfig:
    stages: int = 3
    base_channels: int = 16
    input_channels: int = 3
    image_height: int = 64
    image_width: int = 64
    grid_per_side: int = 8
    window: Optional[int] = None
    global_downscale: int = 2
    backbone: str = "hybrid"
    decoders: str = "full"
    fusion: str = "cfsm"
    pos_encoding: bool = False
    vit_depth: int = 1
    heads: int = 4
    mlp_ratio: int = 4
    cfsm_reduction: int = 4

    def __post_init__(self):
        self.validate()

    @property
    def uses_reflectance(self) -> bool:
        return self.decoders in ("full", "w-R")

    @property
    def uses_shading(self) -> bool:
        return self.decoders in ("full", "w-S")

    def channels(self, z: int) -> int:
        return self.base_channels * 2 ** z

    def extent(self, z: int) -> Tuple[int, int]:
        return self.image_height >> z, self.image_width >> z

    def block_geometry(self, z: int) -> HyLoGConfig:
        """Geometry of blocks working at the resolution of ``e^z`` (``z=0`` is full resolution)."""
        h, w = self.extent(z)
        return HyLoGConfig.for_extent(h, w, self.channels(z), self.grid_per_side, self.global_downscale, self.window)

    def validate(self) -> None:
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.backbone not in BLOCK_KINDS:
            raise ValueError(f"backbone {self.backbone!r} not in {BLOCK_KINDS}")
        if self.decoders not in DECODER_MODES:
            raise ValueError(f"decoders {self.decoders!r} not in {DECODER_MODES}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion {self.fusion!r} not in {FUSION_MODES}")
        f = 2 ** self.stages
        if self.image_height % f or self.image_width % f:
            raise ShapeError(
                f"image {self.image_height}x{self.image_width} not divisible by 2^stages={f}")
        for z in range(self.stages + 1):
            c = self.channels(z)
            if self.backbone != "cnn" and c % self.heads:
                raise ShapeError(f"stage {z} width {c} not divisible by {self.heads} heads")
            if z >= 1 and self.fusion == "cfsm" and self.decoders != "w/o-RS" and c % self.cfsm_reduction:
                raise ShapeError(f"stage {z} width {c} not divisible by CFSM reduction {self.cfsm_reduction}")
            if z < self.stages:
                self.block_geometry(z)
            if z >= 1:
                self.block_geometry(z)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _block(cfg: ModelConfig, z: int, rng, dtype) -> AblationBlock:
    return AblationBlock(cfg.backbone, cfg.block_geometry(z), rng, cfg.heads, cfg.mlp_ratio,
                         cfg.vit_depth, cfg.pos_encoding, dtype)


def _up(c_in: int, c_out: int, rng, dtype) -> ConvNormReLU:
    return ConvNormReLU(ConvTranspose2d(c_in, c_out, 4, rng, stride=2, pad=1, dtype=dtype), c_out, dtype)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        c0 = cfg.base_channels
        self.extract = ConvNormReLU(Conv2d(cfg.input_channels, c0, 5, rng, pad=2, dtype=dtype), c0, dtype)
        self.extract_res = ResBlock(c0, rng, dtype)
        self.blocks = [_block(cfg, z, rng, dtype) for z in range(cfg.stages)]
        self.downs = [
            ConvNormReLU(Conv2d(cfg.channels(z), cfg.channels(z + 1), 4, rng, stride=2, pad=1, dtype=dtype),
                         cfg.channels(z + 1), dtype)
            for z in range(cfg.stages)
        ]

    def forward(self, image: Tensor):
        e0 = self.extract_res(self.extract(image))
        feats = []
        x = e0
        for block, down in zip(self.blocks, self.downs):
            x = down(block(x))
            feats.append(x)
        return e0, feats


class Decoder(Module):
    """U-shaped decoder. Stage ``z`` (1-based) works at the geometry of ``e^z``.

    With ``fusion`` set, complementary features are merged in before each
    stage block and before the head (the dehazing decoder).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32,
                 fusion: Optional[str] = None):
        z_max = cfg.stages
        c = cfg.channels
        self.stages = z_max
        self.fusion = fusion
        self.blocks = [_block(cfg, z, rng, dtype) for z in range(1, z_max + 1)]
        self.ups = [_up(c(z + 1), c(z), rng, dtype) for z in range(1, z_max)]
        self.merges = [ConvNormReLU(Conv2d(2 * c(z), c(z), 3, rng, pad=1, dtype=dtype), c(z), dtype)
                       for z in range(1, z_max)]
        self.head_up = _up(c(1), c(0), rng, dtype)
        self.head = Conv2d(2 * c(0), cfg.input_channels, 3, rng, pad=1, dtype=dtype)
        if fusion == "cfsm":
            self.fusers = [CfsmParams(c(z), rng, cfg.cfsm_reduction, dtype) for z in range(1, z_max + 1)]
            self.head_fuser = CfsmParams(c(1), rng, cfg.cfsm_reduction, dtype)

    def _fuse(self, site: int, d: Tensor, r: Optional[Tensor], s: Optional[Tensor]) -> Tensor:
        # site in 1..Z for stage fusers, 0 for the head
        if self.fusion is None:
            return d
        r = r if r is not None else Tensor(np.zeros(d.shape, dtype=d.dtype))
        s = s if s is not None else Tensor(np.zeros(d.shape, dtype=d.dtype))
        if self.fusion == "sum":
            return fuse_sum(d, r, s)
        p = self.head_fuser if site == 0 else self.fusers[site - 1]
        return cfsm(d, r, s, p)

    def forward(self, e_z: Tensor, skips: List[Tensor], e0: Tensor,
                r_feats: Optional[List[Tensor]] = None, s_feats: Optional[List[Tensor]] = None):
        """Return ``([d^Z, ..., d^1], image)``.

        ``skips`` is ``[e^1, ..., e^{Z-1}]``; ``r_feats``/``s_feats`` are the
        other decoders' intermediates in the same ``[d^Z .. d^1]`` order.
        """
        z_max = self.stages
        if len(skips) != z_max - 1:
            raise ShapeError(f"decoder with {z_max} stages needs {z_max - 1} skips, got {len(skips)}")

        def comp(feats, z):
            return None if feats is None else feats[z_max - z]

        d = self._fuse(z_max, e_z, comp(r_feats, z_max), comp(s_feats, z_max))
        d = self.blocks[z_max - 1](d)
        out = [d]
        for z in range(z_max - 1, 0, -1):
            up = self.ups[z - 1](d)
            up = self._fuse(z, up, comp(r_feats, z), comp(s_feats, z))
            skip = skips[z - 1]
            if up.shape != skip.shape:
                raise ShapeError(f"stage {z}: upsampled {up.shape} does not match skip {skip.shape}")
            d = self.blocks[z - 1](self.merges[z - 1](concat([up, skip], axis=-1)))
            out.append(d)
        d1 = self._fuse(0, d, comp(r_feats, 1), comp(s_feats, 1))
        img = ops.sigmoid(self.head(concat([self.head_up(d1), e0], axis=-1)))
        return out, img


class NetworkParams(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = cfg
        self.encoder = Encoder(cfg, rng, dtype)
        self.dec_r = Decoder(cfg, rng, dtype) if cfg.uses_reflectance else None
        self.dec_s = Decoder(cfg, rng, dtype) if cfg.uses_shading else None
        fusion = None if cfg.decoders == "w/o-RS" else cfg.fusion
        self.dec_d = Decoder(cfg, rng, dtype, fusion=fusion)

    def forward(self, image: Tensor):
        return forward(image, self)


def build_network(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> NetworkParams:
    return NetworkParams(cfg, np.random.default_rng(seed), dtype)


class Outputs(NamedTuple):
    reflectance: Optional[Tensor]
    shading: Optional[Tensor]
    dehazed: Tensor


def _check_image(image: Tensor, cfg: ModelConfig) -> None:
    want = (cfg.image_height, cfg.image_width, cfg.input_channels)
    if image.shape[-3:] != want:
        raise ShapeError(f"network built for {want} images, got {image.shape}")


def encode(image: Tensor, params: NetworkParams):
    _check_image(image, params.config)
    return params.encoder(image)


def decode_r(e_z, skips, e0, params: NetworkParams):
    return params.dec_r(e_z, skips, e0)


def decode_s(e_z, skips, e0, params: NetworkParams):
    return params.dec_s(e_z, skips, e0)


def decode_d(e_z, skips, e0, r_feats, s_feats, params: NetworkParams) -> Tensor:
    return params.dec_d(e_z, skips, e0, r_feats, s_feats)[1]


def forward(image: Tensor, params: NetworkParams) -> Outputs:
    e0, feats = encode(image, params)
    e_z, skips = feats[-1], feats[:-1]
    i_r = i_s = None
    r_feats = s_feats = None
    if params.dec_r is not None:
        r_feats, i_r = params.dec_r(e_z, skips, e0)
    if params.dec_s is not None:
        s_feats, i_s = params.dec_s(e_z, skips, e0)
    _, i_d = params.dec_d(e_z, skips, e0, r_feats, s_feats)
    return Outputs(i_r, i_s, i_d)


def actnorm_modules(params: Module):
    return [(name, m) for name, m in params.named_modules() if isinstance(m, ActNorm)]
