"""Conditional noise-prediction UNet with recordable cross-attention.

Three resolution levels (32, 16, 8) with two residual blocks per level.
Cross-attention over the token condition follows every residual block at
the two coarser levels; the four layers at resolution 16 are the ones
recorded for layout work, the two at resolution 8 participate in the
forward pass only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokens import CONTEXT_LEN, VOCAB_SIZE
from .rng import substream

RECORD_RESOLUTION = 16
ATTN_16_LAYERS = ("attn.16.0", "attn.16.1", "attn.16.2", "attn.16.3")
ATTN_8_LAYERS = ("attn.8.0", "attn.8.1")


@dataclass(frozen=True)
class UNetConfig:
    resolution: int = 32
    in_channels: int = 3
    channels: tuple[int, int, int] = (32, 64, 128)
    d_model: int = 32
    d_head: int = 32
    num_groups: int = 8
    context_len: int = CONTEXT_LEN
    vocab_size: int = VOCAB_SIZE
    temb_dim: int = 64
    temb_hidden: int = 128
    t_train: int = 1000

    def __post_init__(self):
        if self.resolution % 4 != 0:
            raise ValueError(f"resolution {self.resolution} must be divisible by 4")
        for c in self.channels:
            if c % self.num_groups != 0:
                raise ValueError(f"channel width {c} not divisible by {self.num_groups} groups")
        if self.t_train < 2:
            raise ValueError(f"t_train must be at least 2, got {self.t_train}")

    def to_meta(self) -> dict[str, float]:
        return {
            "meta.resolution": float(self.resolution),
            "meta.in_channels": float(self.in_channels),
            "meta.ch0": float(self.channels[0]),
            "meta.ch1": float(self.channels[1]),
            "meta.ch2": float(self.channels[2]),
            "meta.d_model": float(self.d_model),
            "meta.d_head": float(self.d_head),
            "meta.num_groups": float(self.num_groups),
            "meta.context_len": float(self.context_len),
            "meta.vocab_size": float(self.vocab_size),
            "meta.temb_dim": float(self.temb_dim),
            "meta.temb_hidden": float(self.temb_hidden),
            "meta.t_train": float(self.t_train),
        }

    @staticmethod
    def from_meta(meta: dict[str, float]) -> "UNetConfig":
        g = lambda k: meta[f"meta.{k}"]
        return UNetConfig(
            resolution=int(g("resolution")),
            in_channels=int(g("in_channels")),
            channels=(int(g("ch0")), int(g("ch1")), int(g("ch2"))),
            d_model=int(g("d_model")),
            d_head=int(g("d_head")),
            num_groups=int(g("num_groups")),
            context_len=int(g("context_len")),
            vocab_size=int(g("vocab_size")),
            temb_dim=int(g("temb_dim")),
            temb_hidden=int(g("temb_hidden")),
            t_train=int(g("t_train")),
        )


@dataclass
class AttentionTrace:
    """Attention maps recorded during one forward pass, in graph.

    Each entry is an (h, w, L) tensor of token attention weights for one
    recorded layer; rows over L sum to one.
    """

    layer_names: list[str] = field(default_factory=list)
    maps: list[Tensor] = field(default_factory=list)

    def append(self, name: str, attn_map: Tensor) -> None:
        self.layer_names.append(name)
        self.maps.append(attn_map)

    def __len__(self) -> int:
        return len(self.maps)

    def summed(self, token_pos: int) -> Tensor:
        """Sum of the recorded maps at one token position: (h, w)."""
        if not self.maps:
            raise ValueError("trace is empty")
        total = self.maps[0][:, :, token_pos]
        for m in self.maps[1:]:
            total = total + m[:, :, token_pos]
        return total

    def layer(self, name: str, token_pos: int) -> Tensor:
        i = self.layer_names.index(name)
        return self.maps[i][:, :, token_pos]


def sinusoid_table(t_train: int, dim: int) -> np.ndarray:
    """Fixed (t_train, dim) sin/cos position table for timestep embedding."""
    if dim % 2 != 0:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.arange(t_train, dtype=np.float64)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return table.astype(np.float32)


def cross_attention(
    feat: Tensor,
    cond: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    d_head: int,
) -> tuple[Tensor, Tensor]:
    """Single-head cross-attention from spatial features onto token rows.

    feat: (B, h, w, c), cond: (B, L, d_model). Returns the residual branch
    output (B, h, w, c) and the attention weights (B, h, w, L).
    """
    b, h, w, c = feat.shape
    length = cond.shape[1]
    flat = T.reshape(feat, (b, h * w, c))
    q = T.matmul(flat, wq)
    k = T.matmul(cond, wk)
    logits = T.scalar_mul(T.bmm_nt(q, k), 1.0 / math.sqrt(d_head))
    attn = T.softmax(logits, axis=2)
    out = T.matmul(T.matmul(attn, T.matmul(cond, wv)), wo)
    return T.reshape(out, (b, h, w, c)), T.reshape(attn, (b, h, w, length))


def _conv_w(gen: np.random.Generator, kh: int, kw: int, cin: int, cout: int) -> Tensor:
    scale = math.sqrt(2.0 / (kh * kw * cin))
    return T.randn(gen, (kh, kw, cin, cout), scale=scale, requires_grad=True)


def _linear_w(gen: np.random.Generator, fan_in: int, fan_out: int, scale: float | None = None) -> Tensor:
    if scale is None:
        scale = 1.0 / math.sqrt(fan_in)
    return T.randn(gen, (fan_in, fan_out), scale=scale, requires_grad=True)


def _bias(n: int) -> Tensor:
    return T.zeros((n,), requires_grad=True)


def _gn_params(n: int) -> tuple[Tensor, Tensor]:
    return T.ones((n,), requires_grad=True), T.zeros((n,), requires_grad=True)


def init_params(cfg: UNetConfig, seed: int) -> dict[str, Tensor]:
    """Seeded parameter dictionary with stable, position-independent names."""
    gen = substream(seed, "unet-init")
    c0, c1, c2 = cfg.channels
    p: dict[str, Tensor] = {}

    # token rows feed the attention keys; rows this short would cap logit
    # spans near one nat and leave the maps too diffuse to steer
    p["tok.table"] = T.randn(gen, (cfg.vocab_size, cfg.d_model), scale=0.3, requires_grad=True)
    p["tok.pos"] = T.randn(gen, (cfg.context_len, cfg.d_model), scale=0.3, requires_grad=True)

    p["temb.fc1.w"] = _linear_w(gen, cfg.temb_dim, cfg.temb_hidden)
    p["temb.fc1.b"] = _bias(cfg.temb_hidden)
    p["temb.fc2.w"] = _linear_w(gen, cfg.temb_hidden, cfg.temb_hidden)
    p["temb.fc2.b"] = _bias(cfg.temb_hidden)

    p["stem.w"] = _conv_w(gen, 3, 3, cfg.in_channels, c0)
    p["stem.b"] = _bias(c0)

    def resblock(prefix: str, cin: int, cout: int):
        p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"] = _gn_params(cin)
        p[f"{prefix}.conv1.w"] = _conv_w(gen, 3, 3, cin, cout)
        p[f"{prefix}.conv1.b"] = _bias(cout)
        p[f"{prefix}.emb.w"] = _linear_w(gen, cfg.temb_hidden, cout)
        p[f"{prefix}.emb.b"] = _bias(cout)
        p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"] = _gn_params(cout)
        p[f"{prefix}.conv2.w"] = _conv_w(gen, 3, 3, cout, cout)
        p[f"{prefix}.conv2.b"] = _bias(cout)
        if cin != cout:
            p[f"{prefix}.skip.w"] = _conv_w(gen, 1, 1, cin, cout)
            p[f"{prefix}.skip.b"] = _bias(cout)

    def attn(prefix: str, c: int):
        p[f"{prefix}.gn.g"], p[f"{prefix}.gn.b"] = _gn_params(c)
        p[f"{prefix}.q"] = _linear_w(gen, c, cfg.d_head)
        p[f"{prefix}.k"] = _linear_w(gen, cfg.d_model, cfg.d_head)
        p[f"{prefix}.v"] = _linear_w(gen, cfg.d_model, c)
        p[f"{prefix}.o"] = _linear_w(gen, c, c)

    mid, low = cfg.resolution // 2, cfg.resolution // 4
    resblock("down0.rb0", c0, c0)
    resblock("down0.rb1", c0, c0)
    resblock("down1.rb0", c0, c1)
    attn(f"attn.{mid}.0", c1)
    resblock("down1.rb1", c1, c1)
    attn(f"attn.{mid}.1", c1)
    resblock("down2.rb0", c1, c2)
    attn(f"attn.{low}.0", c2)
    resblock("down2.rb1", c2, c2)
    attn(f"attn.{low}.1", c2)
    resblock("up1.rb0", c2 + c1, c1)
    attn(f"attn.{mid}.2", c1)
    resblock("up1.rb1", c1, c1)
    attn(f"attn.{mid}.3", c1)
    resblock("up0.rb0", c1 + c0, c0)
    resblock("up0.rb1", c0, c0)

    p["out.gn.g"], p["out.gn.b"] = _gn_params(c0)
    p["out.w"] = T.zeros((3, 3, c0, cfg.in_channels), requires_grad=True)
    p["out.b"] = _bias(cfg.in_channels)
    return p


class Denoiser:
    """Noise-prediction model: parameters, config and the forward pass."""

    def __init__(self, cfg: UNetConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self._sin = Tensor(sinusoid_table(cfg.t_train, cfg.temb_dim))

    @classmethod
    def create(cls, cfg: UNetConfig, seed: int) -> "Denoiser":
        return cls(cfg, init_params(cfg, seed))

    def trainable(self) -> list[Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def kv_param_view(self) -> dict[str, Tensor]:
        """The cross-attention K and V projection matrices, by name."""
        return {
            n: t
            for n, t in self.params.items()
            if n.startswith("attn.") and (n.endswith(".k") or n.endswith(".v"))
        }

    def frozen_view(self) -> "Denoiser":
        """Same weights, none trainable. Shares the underlying arrays."""
        frozen = {n: Tensor(t.data, requires_grad=False) for n, t in self.params.items()}
        return Denoiser(self.cfg, frozen)

    def encode_tokens(self, ids) -> Tensor:
        """Token id sequence(s) -> condition rows (L, d_model) or (B, L, d_model)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim not in (1, 2):
            raise ValueError(f"token ids must be rank 1 or 2, got rank {ids.ndim}")
        length = ids.shape[-1]
        if length == 0:
            raise ValueError("token sequence must contain at least one token")
        if length > self.cfg.context_len:
            raise ValueError(f"sequence length {length} exceeds context length {self.cfg.context_len}")
        rows = T.embedding(self.params["tok.table"], ids)
        pos = T.embedding(self.params["tok.pos"], np.arange(length))
        return rows + pos

    def forward(
        self,
        z: Tensor,
        t,
        cond: Tensor,
        record: bool = False,
        attn_sink=None,
    ) -> tuple[Tensor, AttentionTrace | None]:
        """Predict the noise in z at timestep t under the token condition.

        z: (B, H, W, C) latent, t: int or (B,) int array, cond: (B, L, d_model).
        With record=True (single-sample only) also returns the trace of the
        four resolution-16 attention maps. attn_sink, when given, is called
        as attn_sink(layer_name, weights) with the in-graph (B, h, w, L)
        attention weights of every cross-attention layer; it works at any
        batch size and is how training losses reach the maps.
        """
        cfg = self.cfg
        p = self.params
        if z.ndim != 4:
            raise T.ShapeError(f"latent must be (B, H, W, C), got {z.shape}")
        b = z.shape[0]
        if z.shape[1] != cfg.resolution or z.shape[2] != cfg.resolution:
            raise T.ShapeError(f"latent spatial size {z.shape[1:3]} does not match resolution {cfg.resolution}")
        if cond.ndim == 2:
            cond = T.reshape(cond, (1,) + cond.shape)
        if cond.shape[0] != b:
            raise T.ShapeError(f"condition batch {cond.shape[0]} does not match latent batch {b}")
        if record and b != 1:
            raise ValueError(f"attention recording requires batch size 1, got {b}")

        t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if t_arr.shape == (1,) and b > 1:
            t_arr = np.repeat(t_arr, b)
        if t_arr.shape != (b,):
            raise T.ShapeError(f"timestep batch {t_arr.shape} does not match latent batch {b}")
        if np.any(t_arr < 0) or np.any(t_arr >= cfg.t_train):
            raise ValueError(f"timesteps must lie in [0, {cfg.t_train}), got {t_arr}")

        temb = T.embedding(self._sin, t_arr)
        temb = T.silu(T.matmul(temb, p["temb.fc1.w"]) + p["temb.fc1.b"])
        temb = T.matmul(temb, p["temb.fc2.w"]) + p["temb.fc2.b"]

        trace = AttentionTrace() if record else None

        def resblock(x: Tensor, prefix: str) -> Tensor:
            h = T.group_norm(x, p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"], cfg.num_groups)
            h = T.conv2d(T.silu(h), p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
            e = T.matmul(T.silu(temb), p[f"{prefix}.emb.w"]) + p[f"{prefix}.emb.b"]
            h = h + T.reshape(e, (b, 1, 1, h.shape[3]))
            h = T.group_norm(h, p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"], cfg.num_groups)
            h = T.conv2d(T.silu(h), p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
            if f"{prefix}.skip.w" in p:
                x = T.conv2d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"])
            return x + h

        record_res = cfg.resolution // 2

        def attend(x: Tensor, prefix: str) -> Tensor:
            h = T.group_norm(x, p[f"{prefix}.gn.g"], p[f"{prefix}.gn.b"], cfg.num_groups)
            out, attn = cross_attention(
                h, cond, p[f"{prefix}.q"], p[f"{prefix}.k"], p[f"{prefix}.v"], p[f"{prefix}.o"], cfg.d_head
            )
            if trace is not None and x.shape[1] == record_res:
                trace.append(prefix, T.reshape(attn, attn.shape[1:]))
            if attn_sink is not None:
                attn_sink(prefix, attn)
            return x + out

        mid, low = cfg.resolution // 2, cfg.resolution // 4
        h0 = T.conv2d(z, p["stem.w"], p["stem.b"])
        h0 = resblock(h0, "down0.rb0")
        h0 = resblock(h0, "down0.rb1")

        h1 = T.avgpool2x(h0)
        h1 = attend(resblock(h1, "down1.rb0"), f"attn.{mid}.0")
        h1 = attend(resblock(h1, "down1.rb1"), f"attn.{mid}.1")

        h2 = T.avgpool2x(h1)
        h2 = attend(resblock(h2, "down2.rb0"), f"attn.{low}.0")
        h2 = attend(resblock(h2, "down2.rb1"), f"attn.{low}.1")

        u1 = T.concat([T.upsample_nearest2x(h2), h1], axis=3)
        u1 = attend(resblock(u1, "up1.rb0"), f"attn.{mid}.2")
        u1 = attend(resblock(u1, "up1.rb1"), f"attn.{mid}.3")

        u0 = T.concat([T.upsample_nearest2x(u1), h0], axis=3)
        u0 = resblock(u0, "up0.rb0")
        u0 = resblock(u0, "up0.rb1")

        out = T.group_norm(u0, p["out.gn.g"], p["out.gn.b"], cfg.num_groups)
        out = T.conv2d(T.silu(out), p["out.w"], p["out.b"])
        return out, trace

    def predict(self, z: Tensor, t, cond: Tensor) -> Tensor:
        eps, _ = self.forward(z, t, cond, record=False)
        return eps
