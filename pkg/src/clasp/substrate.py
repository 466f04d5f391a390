"""Shared building blocks for every learned head in the package.

Parameterized maps are torch modules, but all randomness (init, dropout
masks, sampling noise) comes in through explicit counter-based draws so a
forward pass is a pure function of inputs, parameters, and noise. The
optimizer is written out longhand over a flat named parameter store, which
keeps checkpointing and bit-exact resume trivial.
"""

import math

import numpy as np
import torch
from torch import nn

from .seeding import philox_generator

ACTIVATIONS = {
    "gelu": nn.GELU,
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
}


class NonFiniteGradError(RuntimeError):
    """A NaN or inf gradient reached the optimizer."""


class NoiseSource:
    """Deterministic noise keyed by (seed, step, site).

    Each call site names itself with a string; the same (seed, step, site)
    always yields the same draw, so training steps replay exactly and
    gradcheck can pin its noise. ``None`` in place of a NoiseSource means
    eval mode: dropout becomes identity and sampling noise is zero.
    """

    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)

    def _gen(self, site: str) -> np.random.Generator:
        return philox_generator("noise", self.seed, self.step, site)

    def uniform(self, site: str, shape) -> torch.Tensor:
        draw = self._gen(site).random(tuple(shape))
        return torch.from_numpy(draw).to(torch.get_default_dtype())

    def normal(self, site: str, shape) -> torch.Tensor:
        draw = self._gen(site).standard_normal(tuple(shape))
        return torch.from_numpy(draw).to(torch.get_default_dtype())


def dropout(x: torch.Tensor, p: float, noise, site: str) -> torch.Tensor:
    if noise is None or p <= 0.0:
        return x
    keep = (noise.uniform(site, x.shape) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def sinusoidal_positions(length: int, dim: int, dtype=None) -> torch.Tensor:
    """Classic fixed position code, (length, dim)."""
    dtype = dtype or torch.get_default_dtype()
    pos = torch.arange(length, dtype=dtype).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=dtype)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), idx / dim)
    pe = torch.zeros(length, dim, dtype=dtype)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe


class Mlp(nn.Module):
    """Plain feed-forward stack; no activation after the last layer."""

    def __init__(self, layer_sizes, activation: str = "gelu"):
        super().__init__()
        if len(layer_sizes) < 2:
            raise ValueError("mlp needs an input size and at least one layer")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(layer_sizes[:-1], layer_sizes[1:])
        )
        self.act = ACTIVATIONS[activation]()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = self.act(x)
        return x


def mlp(layer_sizes, activation: str = "gelu") -> Mlp:
    return Mlp(layer_sizes, activation)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, p_drop: float):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model)
        # A key-projection bias shifts every score in a row equally, which
        # softmax cancels; the parameter would be exactly inert, so omit it.
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)
        self.p_drop = p_drop

    def forward(self, x, key_mask, noise, site, attn_bias=None):
        # x: (B, S, D); key_mask: (B, S) with 1 for attendable keys.
        b, s, d = x.shape
        q = self.wq(x).view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        k = self.wk(x).view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        v = self.wv(x).view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_mask is not None:
            pad = (1.0 - key_mask.to(scores.dtype)).view(b, 1, 1, s)
            scores = scores - 1e9 * pad
        if attn_bias is not None:
            scores = scores + attn_bias
        probs = torch.softmax(scores, dim=-1)
        probs = dropout(probs, self.p_drop, noise, site + "/probs")
        out = (probs @ v).transpose(1, 2).reshape(b, s, d)
        return self.wo(out)


class EncoderLayer(nn.Module):
    """Pre-norm residual block: attention then a two-layer feed-forward."""

    def __init__(self, d_model, n_heads, ff_width, p_drop):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads, p_drop)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_width), nn.GELU(), nn.Linear(ff_width, d_model))
        self.p_drop = p_drop

    def forward(self, x, key_mask, noise, site, attn_bias=None):
        h = self.attn(self.ln1(x), key_mask, noise, site + "/attn", attn_bias)
        x = x + dropout(h, self.p_drop, noise, site + "/attn_out")
        h = self.ff(self.ln2(x))
        return x + dropout(h, self.p_drop, noise, site + "/ff_out")


class SeqEncoder(nn.Module):
    """Masked transformer encoder that summarizes a sequence into one vector.

    Sinusoidal position codes are added to the input steps, then a learned
    summary token is prepended (it carries no position code) and the stack is
    run with padding masked out of attention. The summary token's output,
    after a final layer norm, is the representation.
    """

    def __init__(self, d_model, n_layers, n_heads, ff_width, p_drop):
        super().__init__()
        self.d_model = d_model
        self.cls = nn.Parameter(torch.zeros(d_model))
        self.layers = nn.ModuleList(
            EncoderLayer(d_model, n_heads, ff_width, p_drop) for _ in range(n_layers)
        )
        self.final_ln = nn.LayerNorm(d_model)

    def forward(self, x, mask=None, noise=None, site="seq"):
        # x: (B, T, d_model); mask: (B, T) with 1 for real steps.
        b, t, _ = x.shape
        x = x + sinusoidal_positions(t, self.d_model, x.dtype)
        x = torch.cat([self.cls.to(x.dtype).expand(b, 1, self.d_model), x], dim=1)
        if mask is None:
            key_mask = None
        else:
            ones = torch.ones(b, 1, dtype=x.dtype)
            key_mask = torch.cat([ones, mask.to(x.dtype)], dim=1)
        for i, layer in enumerate(self.layers):
            x = layer(x, key_mask, noise, f"{site}/layer{i}")
        return self.final_ln(x)[:, 0]


def seq_encoder(d_model, n_layers, n_heads, ff_width, dropout_p) -> SeqEncoder:
    return SeqEncoder(d_model, n_layers, n_heads, ff_width, dropout_p)


def init_params(module: nn.Module, seed: int, site: str = "init") -> None:
    """Deterministic re-initialization keyed by parameter name.

    Linear weights get a uniform fan-in-scaled draw with bound sqrt(6/fan_in)
    and zero bias; embeddings and bare vectors get the same uniform scheme on
    their trailing dimension; norm layers reset to identity. Keying by name
    makes the result independent of traversal order.
    """
    with torch.no_grad():
        for name, mod in module.named_modules():
            if isinstance(mod, nn.Linear):
                bound = math.sqrt(6.0 / mod.weight.shape[1])
                _fill_uniform(mod.weight, bound, seed, site, name + ".weight")
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.Embedding):
                bound = math.sqrt(6.0 / mod.weight.shape[1])
                _fill_uniform(mod.weight, bound, seed, site, name + ".weight")
                # Modules can ask for a smaller starting scale (tied token
                # tables keep untrained logits near-uniform this way).
                scale = getattr(mod, "_init_scale", None)
                if scale is not None:
                    mod.weight.mul_(scale)
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        for name, p in module.named_parameters(recurse=True):
            if p.dim() == 1 and name.endswith("cls"):
                _fill_uniform(p, math.sqrt(6.0 / p.shape[0]), seed, site, name)


def _fill_uniform(p: torch.Tensor, bound: float, seed, site, name) -> None:
    gen = philox_generator(site, seed, name)
    draw = gen.uniform(-bound, bound, tuple(p.shape))
    p.copy_(torch.from_numpy(draw).to(p.dtype))


class ParamStore:
    """Flat name -> parameter view plus Adam moment buffers.

    Holds references to live module parameters, so optimizer steps update
    the owning modules in place. ``t`` counts optimizer steps for bias
    correction and is carried through checkpoints for exact resume.
    """

    def __init__(self, named_params):
        self.params = dict(sorted(named_params.items()))
        for name, p in self.params.items():
            if not isinstance(p, torch.Tensor):
                raise TypeError(f"parameter {name} is not a tensor")
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.t = 0

    @classmethod
    def from_modules(cls, modules: dict) -> "ParamStore":
        named = {}
        for prefix, mod in modules.items():
            for name, p in mod.named_parameters():
                named[f"{prefix}.{name}"] = p
        return cls(named)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def state_arrays(self) -> dict:
        out = {}
        for name, p in self.params.items():
            out["p/" + name] = p.detach().cpu().numpy().copy()
            out["m/" + name] = self.m[name].cpu().numpy().copy()
            out["v/" + name] = self.v[name].cpu().numpy().copy()
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        with torch.no_grad():
            for name, p in self.params.items():
                for prefix, dest in (("p/", p.data), ("m/", self.m[name]), ("v/", self.v[name])):
                    key = prefix + name
                    if key not in arrays:
                        raise KeyError(f"checkpoint missing array {key}")
                    src = np.asarray(arrays[key])
                    if tuple(src.shape) != tuple(dest.shape):
                        raise ValueError(f"shape mismatch for {key}")
                    dest.copy_(torch.from_numpy(src.copy()).to(dest.dtype))


def adam_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    b1, b2 = betas
    store.t += 1
    t = store.t
    with torch.no_grad():
        for name, p in store.params.items():
            g = p.grad
            if g is None:
                g = torch.zeros_like(p)
            elif not torch.isfinite(g).all():
                raise NonFiniteGradError(f"non-finite gradient in {name} at step {t}")
            m, v = store.m[name], store.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))
    store.zero_grads()


def gradcheck(loss_fn, params, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a deterministic scalar closure over ``params`` (pin
    any noise before calling). Meant to run in double precision on small
    models; cost is two forward passes per parameter coordinate.
    """
    params = [p for p in params]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params
    ]
    max_rel = 0.0
    with torch.no_grad():
        for p, ga in zip(params, analytic):
            flat = p.view(-1)
            gflat = ga.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                a = float(gflat[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
                max_rel = max(max_rel, rel)
    for p in params:
        p.grad = None
    return max_rel
