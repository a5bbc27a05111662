"""Learnable components and forward passes.

Pipeline for one FC matrix ``X`` (batched along the first axis)::

    m_upper = gumbel_sigmoid(W2 relu(W1 x_upper + b1) + b2)
    X_mask  = M * X
    Z       = intra(X_mask);  Z0 = [z_summary; Z] + E
    Z'      = MHSA(LN(Z)) + Z;  Z_next = intra(Z') + Z'        (per block)
    p(c|X)  = softmax(cos(z_summary_out, p_c) / temp)
    X_hat   = decode(z_bar + z_summary_out)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DegenerateVector, ShapeError
from .fc_data import n_edges

NORM_EPS = 1e-12


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ModelConfig:
    r: int
    d: Optional[int] = None
    hidden_enc: int = 128
    n_blocks: int = 2
    n_heads: int = 10
    tau_gumbel: float = 5.0
    softmax_temp: float = 0.5
    dropout: float = 0.5
    attn_hidden: Optional[int] = None
    dec_hidden: Optional[int] = None
    n_classes: int = 2
    # "full" divides scores by sqrt(d) as written; "head" uses sqrt(d / n_heads)
    attn_scale: str = "full"
    init_seed: int = 0
    # structural ablations
    no_mask: bool = False
    no_intra: bool = False
    no_prototype: bool = False

    def __post_init__(self):
        e = n_edges(self.r)
        if self.d is None:
            object.__setattr__(self, "d", self.r)
        if self.attn_hidden is None:
            object.__setattr__(self, "attn_hidden", max(1, round_half_up(e / 4)))
        if self.dec_hidden is None:
            object.__setattr__(self, "dec_hidden", max(1, round_half_up(e / 4)))
        if self.r < 2:
            raise ConfigError("r must be at least 2")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.tau_gumbel <= 0 or self.softmax_temp <= 0:
            raise ConfigError("tau_gumbel and softmax_temp must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be non-negative")
        if self.attn_scale not in ("full", "head"):
            raise ConfigError("attn_scale must be 'full' or 'head'")
        if self.no_intra and self.d != self.r:
            raise ConfigError("no_intra requires d == r (rows enter the encoder unprojected)")

    @property
    def n_upper(self) -> int:
        return n_edges(self.r)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# --------------------------------------------------------------------------
# functional pieces


def gumbel_sigmoid(logits: torch.Tensor, tau: float, train: bool, generator: Optional[torch.Generator] = None):
    """Logistic relaxation of a Bernoulli gate.

    Training adds the difference of two independent Gumbel(0, 1) draws to
    the logits before the tempered sigmoid; evaluation drops the noise.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    if not train:
        return torch.sigmoid(logits / tau)
    tiny = torch.finfo(logits.dtype).tiny
    u = torch.rand((2,) + tuple(logits.shape), dtype=logits.dtype, device=logits.device, generator=generator)
    g = -torch.log((-torch.log(u.clamp_min(tiny))).clamp_min(tiny))
    return torch.sigmoid((logits + g[0] - g[1]) / tau)


class _Triu:
    """Cached upper-triangle index pairs per ROI count."""

    _cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    @classmethod
    def get(cls, r: int):
        if r not in cls._cache:
            cls._cache[r] = tuple(torch.triu_indices(r, r, offset=1))
        return cls._cache[r]


def vectorize_upper_t(x: torch.Tensor) -> torch.Tensor:
    """Batched strict upper triangle, ``(..., R, R) -> (..., R(R-1)/2)``."""
    i, j = _Triu.get(x.shape[-1])
    return x[..., i, j]


def devectorize_t(v: torch.Tensor, r: int) -> torch.Tensor:
    if v.shape[-1] != n_edges(r):
        raise ShapeError(f"vector length {v.shape[-1]} does not match R={r}")
    i, j = _Triu.get(r)
    out = v.new_zeros(tuple(v.shape[:-1]) + (r, r))
    out[..., i, j] = v
    out[..., j, i] = v
    return out


def apply_mask(x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    if x.shape != m.shape:
        raise ShapeError(f"mask shape {tuple(m.shape)} != FC shape {tuple(x.shape)}")
    return m * x


def self_attention(q, k, v, scale: float, return_weights: bool = False):
    """``softmax(q k^T / scale) v`` over the last two axes."""
    scores = q @ k.transpose(-2, -1) / scale
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def sinusoidal_table(n_pos: int, d: int) -> torch.Tensor:
    """Fixed positional table: sin on even feature indices, cos on odd ones."""
    pos = torch.arange(n_pos, dtype=torch.float64)[:, None]
    idx = torch.arange(d, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, (2 * torch.div(idx, 2, rounding_mode="floor")) / d)
    table = torch.where(idx.long() % 2 == 0, torch.sin(angle), torch.cos(angle))
    return table.to(torch.get_default_dtype())


def cosine_similarity(z: torch.Tensor, p: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Pairwise cosine between rows of ``z`` (B x d) and ``p`` (C x d) -> B x C."""
    zn = z.norm(dim=-1, keepdim=True)
    pn = p.norm(dim=-1, keepdim=True)
    if check and (bool((zn < NORM_EPS).any()) or bool((pn < NORM_EPS).any())):
        raise DegenerateVector("cosine similarity of a (near-)zero vector")
    return (z / zn.clamp_min(NORM_EPS)) @ (p / pn.clamp_min(NORM_EPS)).transpose(-2, -1)


def prototype_classify(z_summary_out: torch.Tensor, prototypes: torch.Tensor, softmax_temp: float):
    """Returns ``(similarities, probabilities)``; prediction is the argmax similarity."""
    sims = cosine_similarity(z_summary_out, prototypes)
    return sims, torch.softmax(sims / softmax_temp, dim=-1)


# --------------------------------------------------------------------------
# modules


class AdaptiveAttention(nn.Module):
    def __init__(self, n_upper: int, hidden: int):
        super().__init__()
        self.W1 = nn.Linear(n_upper, hidden)
        self.W2 = nn.Linear(hidden, n_upper)

    def logits(self, x_upper):
        return self.W2(F.relu(self.W1(x_upper)))

    def forward(self, x_upper, tau, generator=None):
        if x_upper.shape[-1] != self.W1.in_features:
            raise ShapeError(f"expected {self.W1.in_features} upper-triangle entries, got {x_upper.shape[-1]}")
        return gumbel_sigmoid(self.logits(x_upper), tau, self.training, generator)


class IntraNetworkEncoder(nn.Module):
    """Row-wise ``Linear(GELU(Linear(LN(z))))`` with weights shared across rows."""

    def __init__(self, d_in: int, hidden: int, d_out: int, dropout: float):
        super().__init__()
        self.ln = nn.LayerNorm(d_in)
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, d_out)
        self.drop = nn.Dropout(dropout)

    def forward(self, z):
        return self.drop(self.fc2(F.gelu(self.fc1(self.ln(z)))))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, dropout: float, scale: str = "full"):
        super().__init__()
        if d % n_heads:
            raise ConfigError(f"d={d} is not divisible by n_heads={n_heads}")
        self.d, self.n_heads = d, n_heads
        self.ln = nn.LayerNorm(d)
        self.W_Q = nn.Linear(d, d)
        self.W_K = nn.Linear(d, d)
        self.W_V = nn.Linear(d, d)
        self.W_MHSA = nn.Linear(d, d, bias=False)
        self.drop = nn.Dropout(dropout)
        self.scale = math.sqrt(d) if scale == "full" else math.sqrt(d // n_heads)

    def _split(self, t):
        *lead, n, _ = t.shape
        return t.reshape(*lead, n, self.n_heads, self.d // self.n_heads).transpose(-3, -2)

    def forward(self, z, return_weights: bool = False):
        h = self.ln(z)
        q, k, v = self._split(self.W_Q(h)), self._split(self.W_K(h)), self._split(self.W_V(h))
        heads, weights = self_attention(q, k, v, self.scale, return_weights=True)
        *lead, _, n, _ = heads.shape
        concat = heads.transpose(-3, -2).reshape(*lead, n, self.d)
        out = self.drop(self.W_MHSA(concat))
        return (out, weights) if return_weights else out


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mhsa = MultiHeadSelfAttention(cfg.d, cfg.n_heads, cfg.dropout, cfg.attn_scale)
        self.intra = None if cfg.no_intra else IntraNetworkEncoder(cfg.d, cfg.hidden_enc, cfg.d, cfg.dropout)

    def forward(self, z):
        z = self.mhsa(z) + z
        if self.intra is not None:
            z = self.intra(z) + z
        return z


class Decoder(nn.Module):
    def __init__(self, d: int, hidden: int, n_upper: int, r: int):
        super().__init__()
        self.r = r
        self.V1 = nn.Linear(d, hidden)
        self.V2 = nn.Linear(hidden, n_upper)

    def upper(self, feature):
        return self.V2(F.relu(self.V1(feature)))

    def forward(self, feature):
        return devectorize_t(self.upper(feature), self.r)


@dataclass
class ForwardTrace:
    mask: torch.Tensor
    x_mask: torch.Tensor
    z_blocks: list
    z_summary_out: torch.Tensor
    z_bar: torch.Tensor
    similarities: Optional[torch.Tensor]
    logits: torch.Tensor
    probs: torch.Tensor
    x_hat: torch.Tensor

    @property
    def prediction(self) -> torch.Tensor:
        return self.probs.argmax(dim=-1)


class CCFCNet(nn.Module):
    """Adaptive mask, relation encoder, prototype classifier and decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.init_seed)
        with _seeded(cfg.init_seed):
            self.attention = AdaptiveAttention(cfg.n_upper, cfg.attn_hidden)
            self.intra0 = None if cfg.no_intra else IntraNetworkEncoder(cfg.r, cfg.hidden_enc, cfg.d, cfg.dropout)
            self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_blocks))
            self.decoder = Decoder(cfg.d, cfg.dec_hidden, cfg.n_upper, cfg.r)
            self.head = nn.Linear(cfg.d, cfg.n_classes) if cfg.no_prototype else None
        self.z_summary = nn.Parameter(0.02 * torch.randn(1, cfg.d, generator=gen))
        self.prototypes = nn.Parameter(0.02 * torch.randn(cfg.n_classes, cfg.d, generator=gen))
        self.register_buffer("E", sinusoidal_table(cfg.r + 1, cfg.d), persistent=False)

    # -- pieces -----------------------------------------------------------

    def mask(self, x, generator=None):
        """Attention mask ``M`` for a batch of FC matrices (``B x R x R``)."""
        if self.cfg.no_mask:
            m = torch.ones_like(x)
            return m - torch.diag_embed(torch.diagonal(m, dim1=-2, dim2=-1))
        m_upper = self.attention(vectorize_upper_t(x), self.cfg.tau_gumbel, generator)
        return devectorize_t(m_upper, self.cfg.r)

    def encode(self, x_mask):
        """Returns ``(z_blocks, z_summary_out, z_bar)``."""
        if x_mask.shape[-1] != self.cfg.r:
            raise ShapeError(f"expected R={self.cfg.r}, got {x_mask.shape[-1]}")
        z = x_mask if self.intra0 is None else self.intra0(x_mask)
        lead = z.shape[:-2]
        summary = self.z_summary.expand(*lead, 1, self.cfg.d)
        z = torch.cat([summary, z], dim=-2) + self.E
        blocks = [z]
        for block in self.blocks:
            z = block(z)
            blocks.append(z)
        return blocks, z[..., 0, :], z[..., 1:, :].mean(dim=-2)

    def classify(self, z_summary_out):
        """Returns ``(similarities or None, logits, probs)``."""
        if self.head is not None:
            logits = self.head(z_summary_out)
            return None, logits, torch.softmax(logits, dim=-1)
        sims = cosine_similarity(z_summary_out, self.prototypes, check=False)
        logits = sims / self.cfg.softmax_temp
        return sims, logits, torch.softmax(logits, dim=-1)

    def decode(self, feature):
        if feature.shape[-1] != self.cfg.d:
            raise ShapeError(f"decoder expects width {self.cfg.d}, got {feature.shape[-1]}")
        return self.decoder(feature)

    def classify_fc(self, x):
        """Encoder + classifier without the attention mask (counter-condition path)."""
        _, z_sum, _ = self.encode(x)
        return self.classify(z_sum)

    # -- full pass --------------------------------------------------------

    def forward(self, x, generator=None) -> ForwardTrace:
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.shape[-2:] != (self.cfg.r, self.cfg.r):
            raise ShapeError(f"expected FC of shape ({self.cfg.r}, {self.cfg.r}), got {tuple(x.shape[-2:])}")
        m = self.mask(x, generator)
        x_mask = apply_mask(x, m)
        blocks, z_sum, z_bar = self.encode(x_mask)
        sims, logits, probs = self.classify(z_sum)
        x_hat = self.decode(z_bar + z_sum)
        return ForwardTrace(m, x_mask, blocks, z_sum, z_bar, sims, logits, probs, x_hat)

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups

    def decoder_parameter_names(self) -> list[str]:
        return [name for name, _ in self.named_parameters() if name.startswith("decoder.")]


class _seeded:
    """Temporarily seed torch's global RNG so default layer init is reproducible."""

    def __init__(self, seed: int):
        self.seed = seed

    def __enter__(self):
        self.state = torch.random.get_rng_state()
        torch.manual_seed(self.seed)

    def __exit__(self, *exc):
        torch.random.set_rng_state(self.state)
        return False


def build_model(cfg: ModelConfig) -> CCFCNet:
    return CCFCNet(cfg)
