"""State-conditioned normalizing flow over the embedding space.

A stack of affine coupling layers with alternating even/odd masks maps an
embedding to a standard-Gaussian code, conditioned on the start state; the
exact inverse turns Gaussian draws into candidate embeddings for
exploration.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import blockworld as bw
from .substrate import Mlp


@dataclass
class FlowConfig:
    embed_dim: int = 32
    cond_dim: int = bw.STATE_DIM
    n_couplings: int = 4
    hidden: int = 64
    s_cap: float = 3.0


class AffineCoupling(nn.Module):
    """One coupling step: the pass-through half (plus the condition) sets a
    scale and shift for the other half. ``parity`` 0 passes even dims, 1
    passes odd dims."""

    def __init__(self, cfg: FlowConfig, parity: int):
        super().__init__()
        idx = torch.arange(cfg.embed_dim)
        self.register_buffer("pass_idx", idx[idx % 2 == parity])
        self.register_buffer("trans_idx", idx[idx % 2 != parity])
        in_dim = len(self.pass_idx) + cfg.cond_dim
        out_dim = len(self.trans_idx)
        self.scale_net = Mlp([in_dim, cfg.hidden, cfg.hidden, out_dim])
        self.translate_net = Mlp([in_dim, cfg.hidden, cfg.hidden, out_dim])
        self.s_cap = cfg.s_cap

    def _scale_shift(self, passed, cond):
        h = torch.cat([passed, cond], dim=-1)
        s = torch.tanh(self.scale_net(h)) * self.s_cap
        return s, self.translate_net(h)

    def forward(self, x, cond):
        passed = x[..., self.pass_idx]
        s, t = self._scale_shift(passed, cond)
        y = torch.empty_like(x)
        y[..., self.pass_idx] = passed
        y[..., self.trans_idx] = x[..., self.trans_idx] * torch.exp(s) + t
        return y, s.sum(dim=-1)

    def inverse(self, y, cond):
        passed = y[..., self.pass_idx]
        s, t = self._scale_shift(passed, cond)
        x = torch.empty_like(y)
        x[..., self.pass_idx] = passed
        x[..., self.trans_idx] = (y[..., self.trans_idx] - t) * torch.exp(-s)
        return x


class ConditionalFlow(nn.Module):
    def __init__(self, cfg: FlowConfig = FlowConfig()):
        super().__init__()
        self.cfg = cfg
        self.couplings = nn.ModuleList(
            AffineCoupling(cfg, parity=i % 2) for i in range(cfg.n_couplings)
        )

    def init_identity(self):
        """Zero the final scale/translate layers so the flow starts as the
        identity map; the standard stable starting point for training."""
        with torch.no_grad():
            for c in self.couplings:
                for net in (c.scale_net, c.translate_net):
                    net.layers[-1].weight.zero_()
                    net.layers[-1].bias.zero_()

    def forward(self, z, cond):
        x = z
        logdet = torch.zeros(z.shape[:-1], dtype=z.dtype)
        for c in self.couplings:
            x, ld = c(x, cond)
            logdet = logdet + ld
        if not (torch.isfinite(x).all() and torch.isfinite(logdet).all()):
            raise FloatingPointError("non-finite value in flow forward pass")
        return x, logdet

    def inverse(self, g, cond):
        x = g
        for c in reversed(self.couplings):
            x = c.inverse(x, cond)
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite value in flow inverse pass")
        return x


def prior_loss(flow: ConditionalFlow, z, cond) -> torch.Tensor:
    """Negative log-likelihood of z under the flow-transported standard
    Gaussian, averaged over the batch."""
    g, logdet = flow(z, cond)
    d = z.shape[-1]
    nll = 0.5 * g.pow(2).sum(dim=-1) + 0.5 * d * math.log(2.0 * math.pi) - logdet
    return nll.mean()


def sample_prior(flow: ConditionalFlow, cond, eps) -> torch.Tensor:
    """Push Gaussian draws through the inverse flow; unit-normalize to match
    the embedding convention."""
    with torch.no_grad():
        z_raw = flow.inverse(eps, cond)
        return z_raw / z_raw.norm(dim=-1, keepdim=True)
