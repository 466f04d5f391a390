"""Behavior-to-language head: prefix mapping, causal decoder, beam search.

A behavior embedding is expanded into k prefix vectors that condition a
small causal transformer decoder; the decoder is trained jointly with the
mapper by teacher forcing and decoded with length-normalized beam search.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import blockworld as bw
from .substrate import EncoderLayer, sinusoidal_positions


@dataclass
class CaptionerConfig:
    embed_dim: int = 32
    dim: int = 32
    prefix_len: int = 10
    n_layers: int = 2
    n_heads: int = 2
    ff_width: int = 64
    dropout: float = 0.1
    beam_width: int = 3


class PrefixMapper(nn.Module):
    """Expands one embedding into ``prefix_len`` decoder-width vectors.

    The linear expansion gives each prefix slot its own weights, so the
    slots are distinguishable without position codes; two attention blocks
    then mix them.
    """

    def __init__(self, cfg: CaptionerConfig = CaptionerConfig()):
        super().__init__()
        self.k = cfg.prefix_len
        self.dim = cfg.dim
        self.expand = nn.Linear(cfg.embed_dim, cfg.prefix_len * cfg.dim)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.dim, cfg.n_heads, cfg.ff_width, cfg.dropout)
            for _ in range(cfg.n_layers)
        )

    def forward(self, z, noise=None, site="mapper"):
        x = self.expand(z).view(z.shape[0], self.k, self.dim)
        for i, layer in enumerate(self.layers):
            x = layer(x, None, noise, f"{site}/layer{i}")
        return x


class CaptionDecoder(nn.Module):
    """Causal transformer over [prefix ‖ token embeddings].

    The token table is tied with the output projection; it starts small
    (GPT-style) so untrained logits are near-uniform.
    """

    def __init__(self, cfg: CaptionerConfig = CaptionerConfig(), vocab_size: int = None):
        super().__init__()
        self.vocab_size = vocab_size or len(bw.VOCAB)
        self.dim = cfg.dim
        self.tok = nn.Embedding(self.vocab_size, cfg.dim)
        self.tok._init_scale = 0.05
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.dim, cfg.n_heads, cfg.ff_width, cfg.dropout)
            for _ in range(cfg.n_layers)
        )
        self.final_ln = nn.LayerNorm(cfg.dim)

    def forward(self, prefix, tokens, noise=None, site="decoder"):
        # prefix: (B, k, dim); tokens: (B, L) int64. Returns (B, k+L, V).
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ValueError("token id out of vocabulary")
        x = torch.cat([prefix, self.tok(tokens)], dim=1)
        s = x.shape[1]
        x = x + sinusoidal_positions(s, self.dim, x.dtype)
        bias = torch.triu(torch.full((s, s), -1e9, dtype=x.dtype), diagonal=1)
        bias = bias.view(1, 1, s, s)
        for i, layer in enumerate(self.layers):
            x = layer(x, None, noise, f"{site}/layer{i}", attn_bias=bias)
        h = self.final_ln(x)
        return h @ self.tok.weight.t()


class Captioner(nn.Module):
    def __init__(self, cfg: CaptionerConfig = CaptionerConfig(), vocab_size: int = None):
        super().__init__()
        self.cfg = cfg
        self.mapper = PrefixMapper(cfg)
        self.decoder = CaptionDecoder(cfg, vocab_size)

    def loss(self, z, tokens, noise=None, site="caption"):
        """Batch mean of the per-example summed next-token NLL."""
        total, count = self.token_nll(z, tokens, noise, site)
        return total.sum() / z.shape[0]

    def token_nll(self, z, tokens, noise=None, site="caption"):
        """Per-example NLL sums and the non-pad target count.

        Targets are the tokens shifted left by one; positions whose target
        is padding are excluded, so the end marker is still predicted.
        """
        prefix = self.mapper(z, noise, site + "/mapper")
        inputs, targets = tokens[:, :-1], tokens[:, 1:]
        logits = self.decoder(prefix, inputs, noise, site + "/decoder")
        logits = logits[:, self.cfg.prefix_len - 1 + 1 :]
        nll = F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
        ).view(targets.shape)
        keep = (targets != bw.PAD).to(nll.dtype)
        return (nll * keep).sum(dim=1), keep.sum()

    @torch.no_grad()
    def decode(self, z, beam_width: int = None, max_len: int = bw.CAPTION_LEN):
        """Length-normalized beam search for a single embedding (1, d)."""
        beam_width = self.cfg.beam_width if beam_width is None else beam_width
        if beam_width < 1:
            raise ValueError("beam_width must be at least 1")
        prefix = self.mapper(z.view(1, -1))
        beams = [((bw.BOS,), 0.0, False)]
        for _ in range(max_len - 1):
            if all(done for _, _, done in beams):
                break
            candidates = []
            for toks, logp, done in beams:
                if done:
                    candidates.append((toks, logp, True))
                    continue
                logits = self.decoder(prefix, torch.tensor([toks], dtype=torch.long))[0, -1]
                logprobs = F.log_softmax(logits, dim=-1)
                for v in range(self.decoder.vocab_size):
                    candidates.append((toks + (v,), logp + float(logprobs[v]), v == bw.EOS))
            # Score by log-prob per generated token; exact ties go to the
            # lexicographically smaller token sequence.
            candidates.sort(key=lambda c: (-(c[1] / (len(c[0]) - 1)), c[0]))
            beams = candidates[:beam_width]
        return list(beams[0][0])
