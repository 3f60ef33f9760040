"""Noise-prediction U-Net conditioned on past/future frame blocks.

Frames are stacked along channels and processed with 2D convolutions. Two
conditioning modes are supported:

* ``concat``: past, noisy current and future frames are concatenated at the
  input, in that order.
* ``spatin``: only the noisy current frames enter the trunk; the conditioning
  frames are encoded once and modulate every normalization layer with a
  spatial scale and shift, in the manner of SPADE.

Tensors are batch-first with shape ``(B, frames, C, H, W)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import BlockLayout


class ConditioningMode(str, enum.Enum):
    CONCAT = "concat"
    SPATIN = "spatin"


@dataclass
class DenoiserConfig:
    layout: BlockLayout
    conditioning_mode: ConditioningMode = ConditioningMode.CONCAT
    base_width: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    attention_resolutions: tuple[int, ...] = (4,)
    num_res_blocks: int = 1
    embedding_dim: int = 128
    embedding_constant: float = 10000.0
    groups: int = 8
    num_heads: int = 1
    cond_width: int = 32
    zero_init_output: bool = True
    seed: int = 0

    def __post_init__(self):
        self.conditioning_mode = ConditioningMode(self.conditioning_mode)
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_resolutions = tuple(int(r) for r in self.attention_resolutions)
        if self.embedding_dim < 2 or self.embedding_dim % 2:
            raise ValueError(f"embedding_dim must be even and >= 2, got {self.embedding_dim}")
        if not self.channel_multipliers:
            raise ValueError("need at least one resolution level")
        res = self.resolutions
        lay = self.layout
        if lay.height != lay.width:
            raise ValueError("frames must be square")
        if lay.height % (2 ** (len(self.channel_multipliers) - 1)):
            raise ValueError(f"frame size {lay.height} not divisible across {len(res)} levels")
        bad = set(self.attention_resolutions) - set(res)
        if bad:
            raise ValueError(f"attention resolutions {sorted(bad)} not among U-Net resolutions {res}")
        for width in self.widths + (self.cond_width,):
            if width % self.groups:
                raise ValueError(f"width {width} not divisible by {self.groups} groups")

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(self.layout.height // 2**i for i in range(len(self.channel_multipliers)))

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_multipliers)

    @property
    def cond_frames(self) -> int:
        return self.layout.p + self.layout.f

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditioning_mode"] = self.conditioning_mode.value
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["layout"] = BlockLayout(**d["layout"])
        return cls(**d)


def noise_embedding(t, D: int, c: float = 10000.0) -> torch.Tensor:
    """Interleaved [cos(t w_1), sin(t w_1), ...] with w_d = c^(-2d/D), d = 1..D/2.

    ``t`` may be a scalar or a vector of noise levels; the result has a
    trailing axis of length D.
    """
    if D < 2 or D % 2:
        raise ValueError(f"embedding dimension must be even and >= 2, got {D}")
    t = torch.as_tensor(t, dtype=torch.float64 if not torch.is_tensor(t) else t.dtype)
    d = torch.arange(1, D // 2 + 1, dtype=t.dtype)
    freqs = c ** (-2.0 * d / D)
    angles = t.unsqueeze(-1) * freqs
    return torch.stack([torch.cos(angles), torch.sin(angles)], dim=-1).flatten(-2)


def _init_conv(conv: nn.Conv2d, scale: float = 1.0) -> nn.Conv2d:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    if scale == 0.0:
        nn.init.zeros_(conv.weight)
    else:
        nn.init.normal_(conv.weight, std=scale / math.sqrt(fan_in))
    nn.init.zeros_(conv.bias)
    return conv


def conv3(cin: int, cout: int, stride: int = 1, scale: float = 1.0) -> nn.Conv2d:
    return _init_conv(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), scale)


def conv1(cin: int, cout: int, scale: float = 1.0) -> nn.Conv2d:
    return _init_conv(nn.Conv2d(cin, cout, 1), scale)


class AdaptiveGroupNorm(nn.Module):
    """GroupNorm whose scale and shift are predicted from the noise embedding
    and, in SPATIN mode, from spatially resolved conditioning features."""

    def __init__(self, channels: int, groups: int, emb_dim: int | None = None, cond_dim: int | None = None):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels, eps=1e-6)
        self.emb = nn.Linear(emb_dim, 2 * channels) if emb_dim else None
        self.gamma = conv1(cond_dim, channels, scale=0.1) if cond_dim else None
        self.beta = conv1(cond_dim, channels, scale=0.1) if cond_dim else None

    def forward(self, x, emb=None, cond=None):
        h = self.norm(x)
        scale = shift = 0.0
        if self.emb is not None:
            scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        if self.gamma is not None:
            cond = F.adaptive_avg_pool2d(cond, x.shape[-2:])
            scale = scale + self.gamma(cond)
            shift = shift + self.beta(cond)
        return h * (1.0 + scale) + shift


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int, cond_dim: int | None):
        super().__init__()
        self.norm1 = AdaptiveGroupNorm(cin, groups, None, cond_dim)
        self.conv1 = conv3(cin, cout)
        self.norm2 = AdaptiveGroupNorm(cout, groups, emb_dim, cond_dim)
        self.conv2 = conv3(cout, cout)
        self.skip = conv1(cin, cout) if cin != cout else None

    def forward(self, x, emb, cond=None):
        h = self.conv1(F.silu(self.norm1(x, cond=cond)))
        h = self.conv2(F.silu(self.norm2(h, emb, cond)))
        return (x if self.skip is None else self.skip(x)) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int, groups: int, num_heads: int = 1):
        super().__init__()
        if channels % num_heads:
            raise ValueError(f"{channels} channels not divisible by {num_heads} heads")
        self.heads = num_heads
        self.norm = nn.GroupNorm(groups, channels, eps=1e-6)
        self.qkv = conv1(channels, 3 * channels)
        self.out = conv1(channels, channels, scale=1e-1)

    def forward(self, x):
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3, self.heads, C // self.heads, H * W).unbind(1)
        w = torch.einsum("bhcq,bhck->bhqk", q, k) / math.sqrt(C // self.heads)
        h = torch.einsum("bhqk,bhck->bhcq", w.softmax(dim=-1), v)
        return x + self.out(h.reshape(B, C, H, W))


class Denoiser(nn.Module):
    """eps-prediction network. Parameters are created from ``cfg.seed``."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        lay = cfg.layout
        C = lay.channels
        spatin = cfg.conditioning_mode is ConditioningMode.SPATIN
        cond_in = cfg.cond_frames * C
        in_ch = lay.k * C if spatin else (lay.p + lay.k + lay.f) * C
        emb_dim = 4 * cfg.base_width
        groups = cfg.groups

        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self.emb_fc1 = nn.Linear(cfg.embedding_dim, emb_dim)
            self.emb_fc2 = nn.Linear(emb_dim, emb_dim)

            cond_dim = None
            self.cond_encoder = None
            if spatin and cond_in > 0:
                cond_dim = cfg.cond_width
                self.cond_encoder = nn.Sequential(conv3(cond_in, cond_dim), nn.SiLU(), conv3(cond_dim, cond_dim))

            self.conv_in = conv3(in_ch, cfg.base_width)
            widths, resolutions = cfg.widths, cfg.resolutions
            self.down = nn.ModuleList()
            skips = [cfg.base_width]
            ch = cfg.base_width
            for level, (w, res) in enumerate(zip(widths, resolutions)):
                for _ in range(cfg.num_res_blocks):
                    blocks = nn.ModuleList([ResBlock(ch, w, emb_dim, groups, cond_dim)])
                    if res in cfg.attention_resolutions:
                        blocks.append(SelfAttention(w, groups, cfg.num_heads))
                    self.down.append(blocks)
                    ch = w
                    skips.append(ch)
                if level < len(widths) - 1:
                    self.down.append(nn.ModuleList([conv3(ch, ch, stride=2)]))
                    skips.append(ch)

            self.mid1 = ResBlock(ch, ch, emb_dim, groups, cond_dim)
            self.mid_attn = SelfAttention(ch, groups, cfg.num_heads)
            self.mid2 = ResBlock(ch, ch, emb_dim, groups, cond_dim)

            self.up = nn.ModuleList()
            for level in reversed(range(len(widths))):
                w, res = widths[level], resolutions[level]
                for _ in range(cfg.num_res_blocks + 1):
                    blocks = nn.ModuleList([ResBlock(ch + skips.pop(), w, emb_dim, groups, cond_dim)])
                    if res in cfg.attention_resolutions:
                        blocks.append(SelfAttention(w, groups, cfg.num_heads))
                    self.up.append(blocks)
                    ch = w
                if level > 0:
                    self.up.append(nn.ModuleList([nn.Upsample(scale_factor=2, mode="nearest"), conv3(ch, ch)]))

            self.norm_out = AdaptiveGroupNorm(ch, groups, None, cond_dim)
            self.conv_out = conv3(ch, lay.k * C, scale=0.0 if cfg.zero_init_output else 1.0)
        finally:
            torch.random.set_rng_state(gen_state)

    def embed_noise_level(self, t_level: torch.Tensor) -> torch.Tensor:
        """Sinusoidal features of the noise level, then FC -> SiLU -> FC."""
        dtype = self.emb_fc1.weight.dtype
        e = noise_embedding(torch.as_tensor(t_level, dtype=torch.float64), self.cfg.embedding_dim,
                            self.cfg.embedding_constant).to(dtype)
        return self.emb_fc2(F.silu(self.emb_fc1(e)))

    def _run(self, blocks: nn.ModuleList, h, emb, cond):
        for m in blocks:
            h = m(h, emb, cond) if isinstance(m, ResBlock) else m(h)
        return h

    def forward(self, xt, cond_past, cond_future, t_level):
        lay = self.cfg.layout
        B = xt.shape[0]
        expect = (lay.k, lay.channels, lay.height, lay.width)
        if tuple(xt.shape[1:]) != expect:
            raise ValueError(f"current block shape {tuple(xt.shape[1:])} != {expect}")
        for name, blk, n in (("past", cond_past, lay.p), ("future", cond_future, lay.f)):
            if tuple(blk.shape) != (B, n) + expect[1:]:
                raise ValueError(f"{name} block shape {tuple(blk.shape)} != {(B, n) + expect[1:]}")
        if not (torch.isfinite(xt).all() and torch.isfinite(cond_past).all() and torch.isfinite(cond_future).all()):
            raise FloatingPointError("non-finite denoiser input")
        t_level = torch.as_tensor(t_level, dtype=torch.float64).reshape(-1).expand(B)

        x = xt.flatten(1, 2)
        cond_frames = torch.cat([cond_past, cond_future], dim=1).flatten(1, 2)
        cond = None
        if self.cfg.conditioning_mode is ConditioningMode.CONCAT:
            x = torch.cat([cond_past.flatten(1, 2), x, cond_future.flatten(1, 2)], dim=1)
        elif self.cond_encoder is not None:
            cond = self.cond_encoder(cond_frames)

        emb = F.silu(self.embed_noise_level(t_level))
        h = self.conv_in(x)
        hs = [h]
        for blocks in self.down:
            h = self._run(blocks, h, emb, cond)
            hs.append(h)
        h = self.mid2(self.mid_attn(self.mid1(h, emb, cond)), emb, cond)
        for blocks in self.up:
            if isinstance(blocks[0], ResBlock):
                h = torch.cat([h, hs.pop()], dim=1)
            h = self._run(blocks, h, emb, cond)
        h = self.conv_out(F.silu(self.norm_out(h, cond=cond)))
        return h.reshape(xt.shape)


def denoise_forward(xt, cond_past, cond_future, t_level, model: Denoiser) -> torch.Tensor:
    """Predicted noise for the current block; conditioning must already be masked."""
    return model(xt, cond_past, cond_future, t_level)


def embed_noise_level(t_level, model: Denoiser) -> torch.Tensor:
    return model.embed_noise_level(torch.as_tensor(t_level, dtype=torch.float64).reshape(-1))


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


class LinearToyDenoiser(nn.Module):
    """Per-pixel affine map of the stacked frames plus a linear noise-level term.

    The training loss is quadratic in its parameters, so gradients have a
    closed form; used to validate gradient checking.
    """

    def __init__(self, layout: BlockLayout, seed: int = 0):
        super().__init__()
        self.layout = layout
        C = layout.channels
        gen = torch.Generator().manual_seed(seed)
        n_in = (layout.p + layout.k + layout.f) * C
        self.weight = nn.Parameter(0.1 * torch.randn(layout.k * C, n_in, generator=gen))
        self.bias = nn.Parameter(0.1 * torch.randn(layout.k * C, generator=gen))
        self.t_weight = nn.Parameter(0.1 * torch.randn(layout.k * C, generator=gen))

    def features(self, xt, cond_past, cond_future):
        return torch.cat([cond_past.flatten(1, 2), xt.flatten(1, 2), cond_future.flatten(1, 2)], dim=1)

    def forward(self, xt, cond_past, cond_future, t_level):
        z = self.features(xt, cond_past, cond_future)
        t = torch.as_tensor(t_level, dtype=z.dtype).reshape(-1, 1, 1, 1).expand(z.shape[0], 1, 1, 1)
        out = torch.einsum("oc,bchw->bohw", self.weight, z)
        out = out + self.bias[None, :, None, None] + self.t_weight[None, :, None, None] * t
        return out.reshape(xt.shape)
