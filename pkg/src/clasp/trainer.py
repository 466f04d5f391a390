"""Joint training loop, the weighted total objective, and checkpointing.

Training is exactly reproducible: parameter init, batch order, dropout
masks, and sampling noise are all keyed by (seed, step, site) counters, the
loop runs single-threaded, and checkpoints carry optimizer moments so a
resumed run continues the original bit for bit.
"""

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from . import blockworld as bw
from . import datastore
from .captioner import Captioner, CaptionerConfig
from .datastore import (
    ChecksumError,
    DataFormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from .encoders import (
    BehaviorEncoder,
    EncoderConfig,
    TextEncoder,
    alignment_loss,
    kl_to_standard_normal,
    sample_embedding,
)
from .generator import BehaviorPolicy, PolicyConfig, generation_loss
from .prior import ConditionalFlow, FlowConfig, prior_loss
from .seeding import derive_seed, philox_generator
from .substrate import NoiseSource, ParamStore, adam_step, init_params

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """The training loss went non-finite; the last finite state was saved."""


@dataclass
class TrainConfig:
    beta_align: float = 1.0
    beta_caption: float = 0.5
    beta_generation: float = 0.5
    beta_kl: float = 0.0
    tau: float = 0.07
    embed_dim: int = 32
    lr: float = 3e-4
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    distributional: bool = True
    dropout: float = 0.1
    log_every: int = 1
    data_path: str = ""
    # second phase: the state-conditioned flow over frozen embeddings
    prior_steps: int = 2000
    prior_lr: float = 3e-4
    prior_batch_size: int = 64
    flow_fit_on: str = "mu"  # "mu" or "sample"

    def validate(self):
        for name in ("beta_align", "beta_caption", "beta_generation", "beta_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.flow_fit_on not in ("mu", "sample"):
            raise ValueError("flow_fit_on must be 'mu' or 'sample'")
        return self


def parse_config_file(path) -> TrainConfig:
    """key=value lines; '#' starts a comment; unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    cfg = TrainConfig()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            setattr(cfg, key, _coerce(value, fields[key], key))
    return cfg.validate()


def _coerce(value: str, typ, key):
    if typ in (bool, "bool"):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean {key}={value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value


class CLASPModel:
    """The four jointly trained heads, plus the optional flow."""

    def __init__(self, cfg: TrainConfig, vocab=bw.VOCAB):
        self.cfg = cfg
        self.vocab = tuple(vocab)
        enc_cfg = EncoderConfig(embed_dim=cfg.embed_dim, dropout=cfg.dropout)
        self.behavior = BehaviorEncoder(enc_cfg)
        self.text = TextEncoder(enc_cfg, len(self.vocab))
        self.captioner = Captioner(
            CaptionerConfig(embed_dim=cfg.embed_dim, dropout=cfg.dropout), len(self.vocab)
        )
        self.policy = BehaviorPolicy(PolicyConfig(embed_dim=cfg.embed_dim))
        self.flow = None

    def modules(self) -> dict:
        mods = {
            "behavior": self.behavior,
            "text": self.text,
            "captioner": self.captioner,
            "policy": self.policy,
        }
        if self.flow is not None:
            mods["flow"] = self.flow
        return mods

    def init(self, seed: int):
        for name, mod in self.modules().items():
            init_params(mod, derive_seed("init", seed, name), name)
        return self

    def add_flow(self):
        self.flow = ConditionalFlow(FlowConfig(embed_dim=self.cfg.embed_dim))
        init_params(self.flow, derive_seed("init", self.cfg.seed, "flow"), "flow")
        self.flow.init_identity()
        return self.flow

    def joint_store(self) -> ParamStore:
        mods = {k: v for k, v in self.modules().items() if k != "flow"}
        return ParamStore.from_modules(mods)

    def embed_batch(self, batch: datastore.Batch, noise=None, eps_seed=None):
        """Eval embeddings for a batch: (z_b, z_l) plus the Gaussians.

        With ``eps_seed`` set (and a distributional model), fresh unit
        Gaussian noise perturbs the samples; otherwise eps=0 gives the mean
        directions.
        """
        states = torch.from_numpy(batch.states)
        actions = torch.from_numpy(batch.actions)
        mask = torch.from_numpy(batch.mask)
        captions = torch.from_numpy(batch.captions)
        gb = self.behavior(states, actions, mask, noise)
        gl = self.text(captions, noise)
        eps_b = eps_l = None
        if eps_seed is not None:
            src = NoiseSource(eps_seed)
            eps_b = src.normal("eval_eps_b", gb.mu.shape)
            eps_l = src.normal("eval_eps_l", gl.mu.shape)
        zb = sample_embedding(gb, eps_b, self.cfg.distributional)
        zl = sample_embedding(gl, eps_l, self.cfg.distributional)
        return zb, zl, gb, gl


def total_loss(model: CLASPModel, batch: datastore.Batch, noise: NoiseSource):
    """Weighted sum of the three head losses (+ optional KL), with the
    unweighted per-term breakdown. Terms with zero weight are skipped, so
    their parameters provably receive no gradient."""
    cfg = model.cfg
    states = torch.from_numpy(batch.states)
    actions = torch.from_numpy(batch.actions)
    mask = torch.from_numpy(batch.mask)
    captions = torch.from_numpy(batch.captions)

    gb = model.behavior(states, actions, mask, noise)
    gl = model.text(captions, noise)
    eps_b = eps_l = None
    if noise is not None and cfg.distributional:
        eps_b = noise.normal("eps_b", gb.mu.shape)
        eps_l = noise.normal("eps_l", gl.mu.shape)
    zb = sample_embedding(gb, eps_b, cfg.distributional)
    zl = sample_embedding(gl, eps_l, cfg.distributional)

    zero = torch.zeros(())
    l_align = alignment_loss(zb, zl, cfg.tau) if cfg.beta_align > 0 else zero
    l_caption = model.captioner.loss(zb, captions, noise) if cfg.beta_caption > 0 else zero
    l_pi = (
        generation_loss(model.policy, zl, states, actions, mask)
        if cfg.beta_generation > 0
        else zero
    )
    total = (
        cfg.beta_align * l_align + cfg.beta_caption * l_caption + cfg.beta_generation * l_pi
    )
    if cfg.beta_kl > 0:
        total = total + cfg.beta_kl * (kl_to_standard_normal(gb) + kl_to_standard_normal(gl))
    parts = {
        "align": float(l_align.detach()),
        "caption": float(l_caption.detach()),
        "pi": float(l_pi.detach()),
    }
    return total, parts


def _batch_for_step(records, batch_size: int, seed: int, step: int) -> datastore.Batch:
    """Epoch-shuffled fixed-size batch addressed purely by step number."""
    per_epoch = len(records) // batch_size
    if per_epoch == 0:
        raise ValueError("dataset smaller than one batch")
    epoch, slot = divmod(step, per_epoch)
    order = philox_generator("epoch", seed, epoch).permutation(len(records))
    take = order[slot * batch_size : (slot + 1) * batch_size]
    return datastore.collate([records[i] for i in take])


def _metric_line(step: int, total: float, parts, prior=None) -> str:
    cols = [str(step), repr(float(total))]
    cols += [repr(float(parts[k])) for k in ("align", "caption", "pi")]
    if prior is not None:
        cols.append(repr(float(prior)))
    return ",".join(cols) + "\n"


def fit(cfg: TrainConfig, records, ckpt_path, metrics_path, resume_from=None) -> "Checkpoint":
    """Joint phase: Adam over all four heads; one metrics line per step."""
    cfg.validate()
    if not records:
        raise ValueError("dataset is empty")
    torch.set_num_threads(1)

    if resume_from is not None:
        model = resume_from.build_model()
        model.cfg = cfg
        store = model.joint_store()
        store.load_state_arrays(resume_from.arrays)
        store.t = resume_from.adam_t
        start_step = resume_from.step
        mode = "a"
    else:
        model = CLASPModel(cfg).init(cfg.seed)
        store = model.joint_store()
        start_step = 0
        mode = "w"

    with open(metrics_path, mode) as metrics:
        for step in range(start_step, cfg.steps):
            batch = _batch_for_step(records, cfg.batch_size, cfg.seed, step)
            noise = NoiseSource(cfg.seed, step)
            store.zero_grads()
            total, parts = total_loss(model, batch, noise)
            if not torch.isfinite(total):
                _save_ckpt_state(model, store, step, ckpt_path)
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}; checkpoint saved to {ckpt_path}"
                )
            total.backward()
            adam_step(store, cfg.lr)
            if step % cfg.log_every == 0:
                metrics.write(_metric_line(step, float(total.detach()), parts))
    ckpt = _save_ckpt_state(model, store, cfg.steps, ckpt_path)
    return ckpt


def fit_prior(
    ckpt: "Checkpoint", records, ckpt_path, metrics_path, resume_from=None
) -> "Checkpoint":
    """Second phase: train only the flow on frozen (z, s0) pairs."""
    cfg = ckpt.config
    if not records:
        raise ValueError("dataset is empty")
    torch.set_num_threads(1)
    model = ckpt.build_model()

    if resume_from is not None and resume_from.has_flow:
        model = resume_from.build_model()
        flow_store = ParamStore.from_modules({"flow": model.flow})
        flow_store.load_state_arrays(
            {k: v for k, v in resume_from.arrays.items() if "/flow." in k}
        )
        flow_store.t = resume_from.flow_adam_t
        start_step = resume_from.prior_step
        mode = "a"
    else:
        model.add_flow()
        flow_store = ParamStore.from_modules({"flow": model.flow})
        start_step = 0
        mode = "w"

    z_all, s0_all = _frozen_flow_targets(model, records, cfg)
    # The saved checkpoint must keep carrying the joint phase's optimizer
    # state even though this phase never touches it.
    source = resume_from if resume_from is not None and resume_from.has_flow else ckpt
    joint_store = model.joint_store()
    joint_store.load_state_arrays(
        {k: v for k, v in source.arrays.items() if "/flow." not in k}
    )
    joint_store.t = source.adam_t

    with open(metrics_path, mode) as metrics:
        for step in range(start_step, cfg.prior_steps):
            idx = philox_generator("prior_batch", cfg.seed, step).choice(
                len(records), size=min(cfg.prior_batch_size, len(records)), replace=False
            )
            z = z_all[torch.from_numpy(np.sort(idx))]
            s0 = s0_all[torch.from_numpy(np.sort(idx))]
            flow_store.zero_grads()
            loss = prior_loss(model.flow, z, s0)
            if not torch.isfinite(loss):
                _save_ckpt_state(model, joint_store, ckpt.step, ckpt_path, flow_store, step)
                raise TrainingDivergedError(
                    f"non-finite prior loss at step {step}; checkpoint saved to {ckpt_path}"
                )
            loss.backward()
            adam_step(flow_store, cfg.prior_lr)
            if step % cfg.log_every == 0:
                zeros = {"align": 0.0, "caption": 0.0, "pi": 0.0}
                metrics.write(_metric_line(step, float(loss.detach()), zeros, float(loss.detach())))
    return _save_ckpt_state(
        model, joint_store, ckpt.step, ckpt_path, flow_store, cfg.prior_steps
    )


@torch.no_grad()
def _frozen_flow_targets(model: CLASPModel, records, cfg: TrainConfig):
    """Embedding targets and start states for flow training, detached."""
    zs, s0s = [], []
    for lo in range(0, len(records), 256):
        chunk = records[lo : lo + 256]
        batch = datastore.collate(chunk) if len(chunk) >= 2 else datastore.collate(chunk * 2)
        eps_seed = derive_seed("flow_targets", cfg.seed, lo) if cfg.flow_fit_on == "sample" else None
        zb, _, _, _ = model.embed_batch(batch, eps_seed=eps_seed)
        zb = zb[: len(chunk)]
        zs.append(zb)
        s0s.append(torch.from_numpy(batch.states[: len(chunk), 0]))
    return torch.cat(zs), torch.cat(s0s)


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: tuple
    step: int
    arrays: dict
    adam_t: int = 0
    has_flow: bool = False
    prior_step: int = 0
    flow_adam_t: int = 0

    def build_model(self) -> CLASPModel:
        model = CLASPModel(self.config, self.vocab)
        if self.has_flow:
            model.add_flow()
        with torch.no_grad():
            for name, p in ParamStore.from_modules(model.modules()).params.items():
                key = "p/" + name
                if key not in self.arrays:
                    raise KeyError(f"checkpoint missing parameter {key}")
                p.copy_(torch.from_numpy(self.arrays[key].copy()))
        return model


def _save_ckpt_state(model, store, step, path, flow_store=None, prior_step=0) -> Checkpoint:
    arrays = dict(store.state_arrays())
    has_flow = model.flow is not None
    flow_t = 0
    if has_flow and flow_store is not None:
        arrays.update(flow_store.state_arrays())
        flow_t = flow_store.t
    elif has_flow:
        arrays.update(ParamStore.from_modules({"flow": model.flow}).state_arrays())
    ckpt = Checkpoint(
        config=model.cfg,
        vocab=model.vocab,
        step=step,
        arrays=arrays,
        adam_t=store.t,
        has_flow=has_flow,
        prior_step=prior_step,
        flow_adam_t=flow_t,
    )
    save_checkpoint(ckpt, path)
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.arrays)
    index = []
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name])
        index.append([name, str(arr.dtype), list(arr.shape), len(payload)])
        payload += arr.tobytes()
    header = {
        "config": dataclasses.asdict(ckpt.config),
        "vocab": list(ckpt.vocab),
        "step": ckpt.step,
        "adam_t": ckpt.adam_t,
        "has_flow": ckpt.has_flow,
        "prior_step": ckpt.prior_step,
        "flow_adam_t": ckpt.flow_adam_t,
        "index": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", CKPT_VERSION)
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    body += payload
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CKPT_MAGIC) + 8:
        raise TruncatedFileError(f"{path}: file too short")
    if blob[:4] != CKPT_MAGIC:
        raise DataFormatError(f"{path}: bad magic bytes")
    body, crc_bytes = blob[4:-4], blob[-4:]
    (version,) = struct.unpack("<I", body[:4])
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if zlib.crc32(body) != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumError(f"{path}: checksum mismatch")
    (header_len,) = struct.unpack("<I", body[4:8])
    header = json.loads(body[8 : 8 + header_len].decode("utf-8"))
    payload = body[8 + header_len :]
    arrays = {}
    for name, dtype, shape, offset in header["index"]:
        arr = np.frombuffer(
            payload, dtype=np.dtype(dtype), count=int(np.prod(shape or [1])), offset=offset
        ).reshape(shape)
        arrays[name] = arr.copy()
    cfg = TrainConfig(**header["config"])
    return Checkpoint(
        config=cfg,
        vocab=tuple(header["vocab"]),
        step=header["step"],
        arrays=arrays,
        adam_t=header["adam_t"],
        has_flow=header["has_flow"],
        prior_step=header["prior_step"],
        flow_adam_t=header["flow_adam_t"],
    )
