"""Distributional trajectory and caption encoders plus the alignment loss.

Both encoders emit a diagonal Gaussian over a shared embedding space; a
reparameterized sample is L2-normalized and the two modalities are pulled
together with a symmetric cross-entropy over the cosine similarity matrix.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import blockworld as bw
from .substrate import Mlp, SeqEncoder

LOGVAR_LO = -10.0
LOGVAR_HI = 4.0


@dataclass
class EncoderConfig:
    embed_dim: int = 32
    behavior_d_model: int = 64
    text_d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ff_width: int = 128
    dropout: float = 0.1


@dataclass
class GaussianEmbedding:
    """Diagonal Gaussian over the embedding space; logvar is kept in
    [LOGVAR_LO, LOGVAR_HI] so the variance can neither collapse to zero nor
    explode."""

    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError("mu and logvar shapes differ")

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)


def _gaussian_head_output(h: torch.Tensor) -> GaussianEmbedding:
    mu, logvar = h.chunk(2, dim=-1)
    return GaussianEmbedding(mu, logvar.clamp(LOGVAR_LO, LOGVAR_HI))


class BehaviorEncoder(nn.Module):
    """Trajectory -> Gaussian embedding.

    Each (state, action) step is concatenated, linearly lifted to the model
    width, and summarized by the masked sequence encoder; a 3-layer head
    maps the summary to (mu, logvar).
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        d = cfg.behavior_d_model
        self.proj = nn.Linear(bw.STATE_DIM + 2, d)
        self.encoder = SeqEncoder(d, cfg.n_layers, cfg.n_heads, cfg.ff_width, cfg.dropout)
        self.head = Mlp([d, d, d, 2 * cfg.embed_dim])

    def forward(self, states, actions, mask=None, noise=None, site="behavior"):
        # states: (B, T+1, STATE_DIM); actions: (B, T, 2); mask: (B, T).
        if actions.shape[1] == 0:
            raise ValueError("cannot encode an empty trajectory")
        x = torch.cat([states[:, : actions.shape[1]], actions], dim=-1)
        h = self.encoder(self.proj(x), mask, noise, site)
        return _gaussian_head_output(self.head(h))


class TextEncoder(nn.Module):
    """Token ids -> Gaussian embedding over the same space."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), vocab_size: int = None):
        super().__init__()
        self.vocab_size = vocab_size or len(bw.VOCAB)
        d = cfg.text_d_model
        self.tok = nn.Embedding(self.vocab_size, d)
        self.encoder = SeqEncoder(d, cfg.n_layers, cfg.n_heads, cfg.ff_width, cfg.dropout)
        self.head = Mlp([d, d, d, 2 * cfg.embed_dim])

    def forward(self, tokens, noise=None, site="text"):
        # tokens: (B, L) int64, zero-padded after the end marker.
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ValueError(
                f"token id out of range [0, {self.vocab_size}): {int(tokens.min())}..{int(tokens.max())}"
            )
        mask = (tokens != bw.PAD).to(torch.get_default_dtype())
        h = self.encoder(self.tok(tokens), mask, noise, site)
        return _gaussian_head_output(self.head(h))


def reparameterize(g: GaussianEmbedding, eps: torch.Tensor) -> torch.Tensor:
    """z = normalize(mu + eps * sigma); eps=0 gives the mean direction."""
    z_raw = g.mu + eps * g.std
    norm = z_raw.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ValueError("zero-norm embedding sample cannot be normalized")
    return z_raw / norm


def sample_embedding(g: GaussianEmbedding, eps=None, distributional: bool = True) -> torch.Tensor:
    """Unit-norm embedding sample.

    With ``distributional`` off the Gaussian is ignored apart from its mean,
    which makes the encoders behave as point encoders; ``eps`` then has no
    effect.
    """
    if not distributional or eps is None:
        eps = torch.zeros_like(g.mu)
    if not distributional:
        g = GaussianEmbedding(g.mu, torch.zeros_like(g.logvar))
    return reparameterize(g, eps)


def alignment_loss(zb: torch.Tensor, zl: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Symmetric cross-entropy over the N x N cosine similarity matrix.

    Row i of ``zb`` and row i of ``zl`` are a matched pair; every other row
    is a negative. Both retrieval directions are averaged.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if zb.shape != zl.shape:
        raise ValueError("sample batches must have matching shapes")
    n = zb.shape[0]
    logits = zb @ zl.transpose(0, 1) / tau
    targets = torch.arange(n)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets))


def kl_to_standard_normal(g: GaussianEmbedding) -> torch.Tensor:
    """Mean KL(q || N(0, I)); optional regularizer, off by default."""
    var = torch.exp(g.logvar)
    per_dim = 0.5 * (g.mu.pow(2) + var - 1.0 - g.logvar)
    return per_dim.sum(dim=-1).mean()
