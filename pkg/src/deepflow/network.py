"""DeepFlow-{k}T: k equal DiT branches joined by VeRA blocks.

Layout for k = 2::

    x_t -> embed -> branch 1 (t_1) -> v*_1 -> velocity head -> v_1
                                        |
                                        +-> VeRA(d = t_2 - t_1, x tokens) -> refined_1
                                        |         (acc head on a*_1 -> a_1)
                                        v
                    branch 2 (t_2) on refined_1 -> v*_2 -> velocity head -> v_2
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .foundation import RngStream

DEFAULT_ACCMLP_MULTIPLIERS = (8 / 3, 16 / 3, 8 / 3, 1.0)
INIT_STREAM_ID = 2  # stream id of the weight-initialisation draws under a run seed


@dataclass
class ModelConfig:
    k: int = 2
    depth_per_branch: int = 2
    hidden: int = 64
    heads: int = 4
    num_classes: int = 8
    geometry: str = "point"  # "point" | "image"
    point_dim: int = 2
    image_channels: int = 1
    image_size: int = 8
    patch: int = 2
    vera_variant: str = "concat"  # "concat" | "additive"
    accmlp_multipliers: tuple = DEFAULT_ACCMLP_MULTIPLIERS
    label_dropout_prob: float = 0.1
    mlp_ratio: float = 4.0
    freq_dim: int = 256
    # component switches (ablation ladder)
    use_vera: bool = True
    use_acc: bool = True
    use_cross_attn: bool = True
    cross_attn_residual: bool = True
    detach_vera_input: bool = False

    def __post_init__(self):
        self.accmlp_multipliers = tuple(float(m) for m in self.accmlp_multipliers)
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.depth_per_branch < 0:
            raise ValueError("depth_per_branch must be >= 0")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.geometry not in ("point", "image"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.geometry == "image" and self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        if self.vera_variant not in ("concat", "additive"):
            raise ValueError(f"unknown vera_variant {self.vera_variant!r}")
        if not self.accmlp_multipliers or self.accmlp_multipliers[-1] != 1.0:
            raise ValueError("accmlp_multipliers must end with 1")
        if self.vera_variant == "additive" and not self.use_acc:
            raise ValueError("the additive VeRA variant needs the acceleration MLP")
        if self.num_classes < 0:
            raise ValueError("num_classes must be >= 0")

    @property
    def has_vera(self) -> bool:
        return self.k > 1 and self.use_vera

    @property
    def has_acc(self) -> bool:
        return self.has_vera and self.use_acc

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.hidden * self.mlp_ratio))

    @property
    def num_tokens(self) -> int:
        if self.geometry == "point":
            return 1
        return (self.image_size // self.patch) ** 2

    @property
    def token_dim(self) -> int:
        if self.geometry == "point":
            return self.point_dim
        return self.image_channels * self.patch * self.patch

    @property
    def data_shape(self) -> tuple:
        if self.geometry == "point":
            return (self.point_dim,)
        return (self.image_channels, self.image_size, self.image_size)

    def accmlp_channels(self) -> list[int]:
        return [int(round(m * self.hidden)) for m in self.accmlp_multipliers]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accmlp_multipliers"] = list(self.accmlp_multipliers)
        return d


def _linear_params(i: int, o: int) -> int:
    return i * o + o


def param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count of :class:`DeepFlow` for ``cfg``."""
    D = cfg.hidden
    n = _linear_params(cfg.token_dim, D)
    n += _linear_params(cfg.freq_dim, D) + _linear_params(D, D)
    if cfg.num_classes > 0:
        n += (cfg.num_classes + 1) * D
    block = (
        _linear_params(D, 3 * D)
        + _linear_params(D, D)
        + _linear_params(D, cfg.mlp_hidden)
        + _linear_params(cfg.mlp_hidden, D)
        + _linear_params(D, 6 * D)
    )
    head = _linear_params(D, 2 * D) + _linear_params(D, cfg.token_dim)
    n += cfg.k * cfg.depth_per_branch * block + cfg.k * head
    if cfg.has_vera:
        site = 0
        if cfg.use_acc:
            chans = [D] + cfg.accmlp_channels()
            site += sum(_linear_params(a, b) for a, b in zip(chans[:-1], chans[1:]))
            site += head
        w = 2 * D if (cfg.use_acc and cfg.vera_variant == "concat") else D
        site += _linear_params(D, 2 * w) + _linear_params(w, w) + _linear_params(w, D)
        if cfg.use_cross_attn:
            site += 4 * _linear_params(D, D)
        n += (cfg.k - 1) * site
    return n


# ---------------------------------------------------------------- embeddings


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Raw sinusoidal features [sin(t*f_j), cos(t*f_j)], f_j geometric from 1 to 1/max_period."""
    half = dim // 2
    if half > 1:
        expo = torch.arange(half, dtype=torch.float64) / (half - 1)
    else:
        expo = torch.zeros(half, dtype=torch.float64)
    freqs = torch.exp(-math.log(max_period) * expo).to(t.dtype)
    args = t.reshape(-1, 1) * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_features(t, self.freq_dim))


def sincos_pos_embed_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2D sin-cos positional embedding, shape (grid*grid, dim)."""

    def one_axis(d, pos):
        omega = 1.0 / 10_000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.einsum("m,d->md", pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    gh, gw = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    return np.concatenate([one_axis(dim // 2, gh), one_axis(dim // 2, gw)], axis=1)


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    B, C, H, W = x.shape
    x = x.reshape(B, C, H // p, p, W // p, p)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(B, (H // p) * (W // p), C * p * p)


def unpatchify(tokens: torch.Tensor, C: int, size: int, p: int) -> torch.Tensor:
    B, N, _ = tokens.shape
    g = size // p
    x = tokens.reshape(B, g, g, C, p, p).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(B, C, size, size)


class Embed(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.token_dim, cfg.hidden)
        if cfg.geometry == "image":
            pe = sincos_pos_embed_2d(cfg.hidden, cfg.image_size // cfg.patch)
            self.register_buffer("pos_embed", torch.from_numpy(pe).float()[None], persistent=False)
        else:
            self.pos_embed = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if tuple(x.shape[1:]) != cfg.data_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match geometry {cfg.data_shape}")
        if cfg.geometry == "point":
            return self.proj(x)[:, None, :]
        tok = self.proj(patchify(x, cfg.patch))
        return tok + self.pos_embed.to(tok.dtype)

    def to_data(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if cfg.geometry == "point":
            return tokens[:, 0, :]
        return unpatchify(tokens, cfg.image_channels, cfg.image_size, cfg.patch)


class LabelEmbedder(nn.Module):
    """Class table with one extra row, the null class used for CFG."""

    def __init__(self, num_classes: int, hidden: int):
        super().__init__()
        self.num_classes = num_classes
        self.table = nn.Embedding(num_classes + 1, hidden)

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        if torch.any(labels < 0) or torch.any(labels > self.num_classes):
            raise ValueError(f"class id out of range [0, {self.num_classes}]")
        return self.table(labels)


# ---------------------------------------------------------------- blocks


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def _layer_norm(x: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=1e-6)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    B, Nq, D = q.shape
    Nk = k.shape[1]
    hd = D // heads
    q = q.reshape(B, Nq, heads, hd).transpose(1, 2)
    k = k.reshape(B, Nk, heads, hd).transpose(1, 2)
    v = v.reshape(B, Nk, heads, hd).transpose(1, 2)
    w = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
    return (w @ v).transpose(1, 2).reshape(B, Nq, D)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.proj(attention(q, k, v, self.heads))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, out: Optional[int] = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class DiTBlock(nn.Module):
    """Self-attention + MLP, each gated by AdaLN-Zero."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.attn = SelfAttention(dim, heads)
        self.mlp = Mlp(dim, mlp_hidden)
        self.ada = nn.Linear(dim, 6 * dim)

    def forward(self, x, c):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(F.silu(c)).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.attn(modulate(_layer_norm(x), sh1, sc1))
        x = x + g2.unsqueeze(1) * self.mlp(modulate(_layer_norm(x), sh2, sc2))
        return x


class Branch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            DiTBlock(cfg.hidden, cfg.heads, cfg.mlp_hidden) for _ in range(cfg.depth_per_branch)
        )

    def forward(self, tokens, c):
        for blk in self.blocks:
            tokens = blk(tokens, c)
        return tokens


class OutputHead(nn.Module):
    """AdaLN-modulated layer norm followed by a zero-initialised projection to token space."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.ada = nn.Linear(dim, 2 * dim)
        self.linear = nn.Linear(dim, out_dim)

    def forward(self, x, c):
        shift, scale = self.ada(F.silu(c)).chunk(2, dim=-1)
        return self.linear(modulate(_layer_norm(x), shift, scale))


class AccMLP(nn.Module):
    def __init__(self, dim: int, channels: list[int]):
        super().__init__()
        chans = [dim] + list(channels)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(chans[:-1], chans[1:]))

    @property
    def channels(self) -> list[int]:
        return [l.out_features for l in self.layers]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.silu(x)
        return x


class GapModulation(nn.Module):
    """LayerNorm, then y * (1 + scale) + shift from a zero-init linear on T(d), then an MLP to D."""

    def __init__(self, width: int, dim: int):
        super().__init__()
        self.ada = nn.Linear(dim, 2 * width)
        self.mlp = Mlp(width, width, dim)

    def modulated(self, h, gap_emb):
        shift, scale = self.ada(F.silu(gap_emb)).chunk(2, dim=-1)
        return modulate(_layer_norm(h), shift, scale)

    def forward(self, h, gap_emb):
        return self.mlp(self.modulated(h, gap_emb))


class CrossSpaceAttention(nn.Module):
    """Queries from the input-token space, keys/values from the modulated velocity features."""

    def __init__(self, dim: int, heads: int, residual: bool = True):
        super().__init__()
        self.heads = heads
        self.residual = residual
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, modulated, x_tokens):
        if modulated.shape[1] != x_tokens.shape[1]:
            raise ValueError(
                f"token-count mismatch: {modulated.shape[1]} features vs {x_tokens.shape[1]} input tokens"
            )
        kv = _layer_norm(modulated)
        out = self.o(attention(self.q(_layer_norm(x_tokens)), self.k(kv), self.v(kv), self.heads))
        return out + modulated if self.residual else out


class VeRA(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.hidden
        self.variant = cfg.vera_variant
        self.acc_mlp = AccMLP(D, cfg.accmlp_channels()) if cfg.use_acc else None
        width = 2 * D if (cfg.use_acc and self.variant == "concat") else D
        self.modulation = GapModulation(width, D)
        self.cross = CrossSpaceAttention(D, cfg.heads, cfg.cross_attn_residual) if cfg.use_cross_attn else None

    def forward(self, vstar, gap_emb, x_tokens):
        """Returns (refined, astar); astar is None when the acceleration MLP is switched off."""
        astar = self.acc_mlp(vstar) if self.acc_mlp is not None else None
        if astar is None:
            modulated = self.modulation(vstar, gap_emb)
        elif self.variant == "concat":
            modulated = self.modulation(torch.cat([vstar, astar], dim=-1), gap_emb)
        else:
            modulated = vstar + self.modulation(astar, gap_emb)
        refined = self.cross(modulated, x_tokens) if self.cross is not None else modulated
        return refined, astar


@dataclass
class BranchOutputs:
    tokens: torch.Tensor
    vstar: list = field(default_factory=list)
    v: list = field(default_factory=list)
    astar: list = field(default_factory=list)
    a: list = field(default_factory=list)
    refined: list = field(default_factory=list)
    gaps: list = field(default_factory=list)


class DeepFlow(nn.Module):
    def __init__(self, cfg: ModelConfig, init_stream: Optional[RngStream] = None):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden
        self.embed = Embed(cfg)
        self.t_embedder = TimestepEmbedder(D, cfg.freq_dim)
        self.y_embedder = LabelEmbedder(cfg.num_classes, D) if cfg.num_classes > 0 else None
        self.branches = nn.ModuleList(Branch(cfg) for _ in range(cfg.k))
        self.v_heads = nn.ModuleList(OutputHead(D, cfg.token_dim) for _ in range(cfg.k))
        n_sites = cfg.k - 1 if cfg.has_vera else 0
        self.veras = nn.ModuleList(VeRA(cfg) for _ in range(n_sites))
        self.a_heads = nn.ModuleList(OutputHead(D, cfg.token_dim) for _ in range(n_sites if cfg.use_acc else 0))
        self.initialize_weights(init_stream if init_stream is not None else RngStream(0, INIT_STREAM_ID))

    @property
    def null_class(self) -> int:
        return self.cfg.num_classes

    @torch.no_grad()
    def initialize_weights(self, stream: RngStream):
        """Xavier-uniform linears, N(0, 0.02) embeddings, zeroed AdaLN/head projections.

        Every draw comes from ``stream`` in module-registration order, so the
        initial weights are a pure function of (config, stream).
        """

        def fill(p: torch.Tensor, values: np.ndarray):
            p.copy_(torch.from_numpy(values.reshape(p.shape)).to(p.dtype))

        for m in self.modules():
            if isinstance(m, nn.Linear):
                bound = math.sqrt(6.0 / (m.in_features + m.out_features))
                fill(m.weight, (2.0 * stream.uniform(m.weight.numel()) - 1.0) * bound)
                m.bias.zero_()
        for lin in self.t_embedder.mlp:
            if isinstance(lin, nn.Linear):
                fill(lin.weight, 0.02 * stream.normal(lin.weight.numel()))
        if self.y_embedder is not None:
            w = self.y_embedder.table.weight
            fill(w, 0.02 * stream.normal(w.numel()))
        zero = []
        for br in self.branches:
            zero += [blk.ada for blk in br.blocks]
        for h in list(self.v_heads) + list(self.a_heads):
            zero += [h.ada, h.linear]
        zero += [v.modulation.ada for v in self.veras]
        for lin in zero:
            lin.weight.zero_()
            lin.bias.zero_()

    def condition(self, t: torch.Tensor, class_ids: Optional[torch.Tensor]) -> torch.Tensor:
        c = self.t_embedder(t)
        if class_ids is not None:
            if self.y_embedder is None:
                raise ValueError("class conditioning requested on an unconditional model")
            c = c + self.y_embedder(class_ids)
        elif self.y_embedder is not None:
            null = torch.full((t.shape[0],), self.null_class, dtype=torch.long)
            c = c + self.y_embedder(null)
        return c

    def forward(self, x_t: torch.Tensor, times, class_ids: Optional[torch.Tensor] = None) -> BranchOutputs:
        """``times``: BranchTimes, a (B, k) array, a per-sample vector or a scalar."""
        cfg = self.cfg
        if hasattr(times, "times"):
            times = times.times
        B = x_t.shape[0]
        times = torch.as_tensor(times, dtype=x_t.dtype)
        if times.dim() == 0:
            times = times.expand(B)
        if times.dim() == 1:
            # one time per sample shared by every branch
            times = times[:, None].expand(B, cfg.k)
        if tuple(times.shape) != (B, cfg.k):
            raise ValueError(f"expected branch times of shape {(B, cfg.k)}, got {tuple(times.shape)}")

        tokens = self.embed(x_t)
        out = BranchOutputs(tokens=tokens)
        h = tokens
        for i in range(cfg.k):
            c = self.condition(times[:, i], class_ids)
            vstar = self.branches[i](h, c)
            out.vstar.append(vstar)
            out.v.append(self.embed.to_data(self.v_heads[i](vstar, c)))
            if i == cfg.k - 1:
                break
            gap = times[:, i + 1] - times[:, i]
            out.gaps.append(gap)
            if not cfg.has_vera:
                h = vstar
                continue
            src = vstar.detach() if cfg.detach_vera_input else vstar
            refined, astar = self.veras[i](src, self.t_embedder(gap), tokens)
            if astar is not None:
                out.astar.append(astar)
                out.a.append(self.embed.to_data(self.a_heads[i](astar, c)))
            out.refined.append(refined)
            h = refined
        return out
