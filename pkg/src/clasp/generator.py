"""Text-conditioned closed-loop policy and its teacher-forced loss."""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import blockworld as bw
from .substrate import Mlp


@dataclass
class PolicyConfig:
    embed_dim: int = 32
    hidden: int = 128
    n_layers: int = 6


class BehaviorPolicy(nn.Module):
    """a_t = pi(z, s_t): an MLP over the embedding and the flat state,
    squashed into the admissible action box."""

    def __init__(self, cfg: PolicyConfig = PolicyConfig()):
        super().__init__()
        sizes = [cfg.embed_dim + bw.STATE_DIM]
        sizes += [cfg.hidden] * (cfg.n_layers - 1)
        sizes += [2]
        self.net = Mlp(sizes)

    def forward(self, z, states):
        # z: (..., embed_dim); states: (..., STATE_DIM).
        raw = self.net(torch.cat([z, states], dim=-1))
        return torch.tanh(raw) * bw.A_MAX


def generation_loss(policy: BehaviorPolicy, z, states, actions, mask) -> torch.Tensor:
    """Mean over the batch of (1/T) * sum_t ||a_t - pi(z, s_t)||^2.

    Teacher-forced: ground-truth states condition every prediction, and
    padded steps contribute nothing.
    """
    t_len = actions.shape[1]
    z_rep = z.unsqueeze(1).expand(-1, t_len, -1)
    pred = policy(z_rep, states[:, :t_len])
    sq_err = ((pred - actions) ** 2).sum(dim=-1) * mask
    per_example = sq_err.sum(dim=1) / mask.sum(dim=1)
    return per_example.mean()


@torch.no_grad()
def rollout(policy: BehaviorPolicy, z, start: bw.BoardState, horizon: int) -> bw.Trajectory:
    """Iterate the simulator under the policy for ``horizon`` steps."""
    if not bw.T_MIN <= horizon <= bw.T_MAX:
        raise ValueError(f"horizon {horizon} outside [{bw.T_MIN}, {bw.T_MAX}]")
    z = z.view(1, -1)
    states = [start]
    actions = []
    state = start
    for _ in range(horizon):
        vec = torch.from_numpy(state.as_vector()[None]).to(z.dtype)
        a = policy(z, vec)[0].cpu().numpy().astype(np.float32)
        action = bw.Action(a)
        state = bw.step(state, action)
        actions.append(action)
        states.append(state)
    return bw.Trajectory(states, actions)
