"""Offline learning of the skill-selection policy from window-level tuples
(s0, z, R, s_c) by expectile-regression value estimation and advantage-
weighted extraction.

Three losses, all minimized:
  J_V = E[L2_lam(Q'(s0,z) - V(s0))]          updates V against the target Q
  J_Q = E[(R + gamma_eff*V(s_c) - Q(s0,z))^2] updates Q against live V
  J_pi = E[w * (-log pi(z|s0))], w = exp(beta_temp*(Q - V)) clipped at 100

The discounted backup spans one c-step window, so gamma_eff = gamma^c by
default; a literal single-step gamma mode exists for comparison. Skill
spaces come in two shapes: discrete skills get plain tables, continuous
latents get one-hidden-layer networks and a diagonal Gaussian policy head.
Everything trains full-batch, so runs are deterministic in the seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .skill_flow import _seeded_linear

IQL_SCHEMA_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)
_CLIP = 100.0
LOGSTD_LO = -5.0
LOGSTD_HI = 2.0


@dataclass
class IqlConfig:
    mode: str  # "tabular" or "continuous"
    num_states: int = 0
    num_skills: int = 0
    state_dim: int = 0
    latent: int = 0
    hidden: int = 32
    expectile: float = 0.7
    temperature: float = 3.0
    target_mix: float = 0.05
    lr: float = 0.05
    steps: int = 500
    discount_mode: str = "effective"

    def validate(self) -> None:
        if self.mode not in ("tabular", "continuous"):
            raise ValueError("mode must be 'tabular' or 'continuous'")
        if self.mode == "tabular" and (self.num_states < 1 or self.num_skills < 1):
            raise ValueError("tabular mode needs num_states and num_skills >= 1")
        if self.mode == "continuous" and (self.state_dim < 1 or self.latent < 1):
            raise ValueError("continuous mode needs state_dim and latent >= 1")
        if not 0.0 < self.expectile < 1.0:
            raise ValueError("expectile must lie in (0, 1)")
        if self.temperature < 0.0:
            raise ValueError("temperature must be nonnegative")
        if not 0.0 < self.target_mix <= 1.0:
            raise ValueError("target_mix must lie in (0, 1]")
        if self.lr <= 0 or self.steps < 1:
            raise ValueError("lr must be positive and steps >= 1")
        if self.discount_mode not in ("effective", "literal"):
            raise ValueError("discount_mode must be 'effective' or 'literal'")


def expectile_loss(u, lam: float):
    """Asymmetric squared loss |lam - 1[u<0]| * u^2, elementwise."""
    if not 0.0 < lam < 1.0:
        raise ValueError("expectile must lie in (0, 1)")
    if torch.is_tensor(u):
        weight = torch.where(u < 0, 1.0 - lam, lam)
        return weight * u**2
    u = np.asarray(u, dtype=np.float64)
    return np.where(u < 0, 1.0 - lam, lam) * u**2


class _Mlp(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.inner = _seeded_linear(in_dim, hidden, rng, zero=False)
        self.outer = _seeded_linear(hidden, out_dim, rng, zero=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(torch.tanh(self.inner(x)))


class _TabularNets(nn.Module):
    """Free tables over (state, skill); uniform policy and zero values at init."""

    def __init__(self, num_states: int, num_skills: int):
        super().__init__()
        z64 = torch.zeros((num_states, num_skills), dtype=torch.float64)
        self.q = nn.Parameter(z64.clone())
        self.v = nn.Parameter(torch.zeros(num_states, dtype=torch.float64))
        self.pi_logits = nn.Parameter(z64.clone())

    def q_at(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.q[s, z]

    def v_at(self, s: torch.Tensor) -> torch.Tensor:
        return self.v[s]

    def log_pi(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.pi_logits, dim=1)[s, z]


class _ContinuousNets(nn.Module):
    def __init__(self, state_dim: int, latent: int, hidden: int, seed: int):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.latent = latent
        self.q_net = _Mlp(state_dim + latent, hidden, 1, rng)
        self.v_net = _Mlp(state_dim, hidden, 1, rng)
        self.pi_net = _Mlp(state_dim, hidden, 2 * latent, rng)

    def q_at(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.q_net(torch.cat([s, z], dim=1))[:, 0]

    def v_at(self, s: torch.Tensor) -> torch.Tensor:
        return self.v_net(s)[:, 0]

    def pi_stats(self, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.pi_net(s)
        mean, raw = out[:, : self.latent], out[:, self.latent :]
        logstd = LOGSTD_LO + (LOGSTD_HI - LOGSTD_LO) * torch.sigmoid(raw)
        return mean, logstd

    def log_pi(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        mean, logstd = self.pi_stats(s)
        resid = (z - mean) * torch.exp(-logstd)
        return (-0.5 * (resid**2 + _LOG_2PI) - logstd).sum(dim=1)


class IqlParams:
    """Live nets plus their lagged target copies and the optimizer state."""

    def __init__(self, config: IqlConfig, seed: int):
        config.validate()
        self.config = config
        self.is_trained = False
        if config.mode == "tabular":
            self.nets = _TabularNets(config.num_states, config.num_skills)
            self.targets = _TabularNets(config.num_states, config.num_skills)
        else:
            self.nets = _ContinuousNets(config.state_dim, config.latent, config.hidden, seed)
            self.targets = _ContinuousNets(config.state_dim, config.latent, config.hidden, seed)
        self._sync_targets(1.0)
        for p in self.targets.parameters():
            p.requires_grad_(False)
        params = list(self.nets.parameters())
        self.opt_v = torch.optim.Adam([p for n, p in self.nets.named_parameters() if _group(n) == "v"], lr=config.lr)
        self.opt_q = torch.optim.Adam([p for n, p in self.nets.named_parameters() if _group(n) == "q"], lr=config.lr)
        self.opt_pi = torch.optim.Adam([p for n, p in self.nets.named_parameters() if _group(n) == "pi"], lr=config.lr)
        assert len(params) == sum(len(g["params"]) for o in (self.opt_v, self.opt_q, self.opt_pi) for g in o.param_groups)

    def _sync_targets(self, alpha: float) -> None:
        with torch.no_grad():
            for pt, pl in zip(self.targets.parameters(), self.nets.parameters()):
                pt.mul_(1.0 - alpha).add_(alpha * pl)

    # ---- numpy-facing helpers ------------------------------------------

    def policy_probs(self) -> np.ndarray:
        """Tabular only: softmax policy table (num_states, num_skills)."""
        if self.config.mode != "tabular":
            raise ValueError("policy_probs is a tabular-mode query")
        with torch.no_grad():
            return torch.softmax(self.nets.pi_logits, dim=1).numpy()

    def sample_z(self, s0: np.ndarray, rng: np.random.Generator):
        """Draw skills from the extracted policy; vectorized over states."""
        if self.config.mode == "tabular":
            probs = self.policy_probs()[np.atleast_1d(np.asarray(s0, dtype=np.int64))]
            u = rng.random(len(probs))
            picks = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
            return int(picks[0]) if np.ndim(s0) == 0 else picks
        s = np.atleast_2d(np.asarray(s0, dtype=np.float64))
        with torch.no_grad():
            mean, logstd = self.nets.pi_stats(torch.from_numpy(s))
        out = mean.numpy() + np.exp(logstd.numpy()) * rng.standard_normal(size=mean.shape)
        return out[0] if np.ndim(s0) == 1 else out


def _group(param_name: str) -> str:
    if param_name.startswith(("q", "q_net")):
        return "q"
    if param_name.startswith(("v", "v_net")):
        return "v"
    return "pi"


def _as_batch(params: IqlParams, s0, z, reward, s_next):
    cfg = params.config
    if np.asarray(reward).size == 0:
        raise ValueError("batch must be nonempty")
    reward = torch.from_numpy(np.asarray(reward, dtype=np.float64).copy())
    if cfg.mode == "tabular":
        s0 = torch.from_numpy(np.asarray(s0, dtype=np.int64).copy())
        z = torch.from_numpy(np.asarray(z, dtype=np.int64).copy())
        s_next = torch.from_numpy(np.asarray(s_next, dtype=np.int64).copy())
    else:
        n = len(reward)
        s0 = torch.from_numpy(np.asarray(s0, dtype=np.float64).reshape(n, -1).copy())
        z = torch.from_numpy(np.asarray(z, dtype=np.float64).reshape(n, -1).copy())
        s_next = torch.from_numpy(np.asarray(s_next, dtype=np.float64).reshape(n, -1).copy())
    return s0, z, reward, s_next


def _first_bad(name: str, values: torch.Tensor) -> None:
    finite = torch.isfinite(values)
    if not bool(finite.all()):
        idx = int((~finite).nonzero()[0, 0])
        raise ValueError(f"non-finite {name} contribution at batch index {idx}")


def compute_losses(params: IqlParams, s0, z, reward, s_next, gamma_eff: float) -> dict:
    """Per-loss torch scalars on the current parameters, plus the fraction of
    the batch whose advantage weight hit the clip."""
    cfg = params.config
    s0, z, reward, s_next = _as_batch(params, s0, z, reward, s_next)
    nets, targets = params.nets, params.targets

    u = targets.q_at(s0, z).detach() - nets.v_at(s0)
    _first_bad("J_V", u)
    j_v = expectile_loss(u, cfg.expectile).mean()

    backup = reward + gamma_eff * nets.v_at(s_next).detach()
    _first_bad("J_Q", backup)
    j_q = ((backup - nets.q_at(s0, z)) ** 2).mean()

    with torch.no_grad():
        adv = nets.q_at(s0, z) - nets.v_at(s0)
        log_w = cfg.temperature * adv
        clipped = log_w > math.log(_CLIP)
        weight = torch.exp(torch.clamp(log_w, max=math.log(_CLIP)))
    log_pi = nets.log_pi(s0, z)
    _first_bad("J_pi", log_pi)
    j_pi = (weight * (-log_pi)).mean()

    return {
        "J_V": j_v,
        "J_Q": j_q,
        "J_pi": j_pi,
        "clip_rate": float(clipped.to(torch.float64).mean()),
    }


def iql_step(batch, params: IqlParams, gamma_eff: float) -> tuple[IqlParams, dict]:
    """One gradient step on each loss, then exponential target mixing."""
    s0, z, reward, s_next = batch
    losses = compute_losses(params, s0, z, reward, s_next, gamma_eff)
    for key, opt in (("J_V", params.opt_v), ("J_Q", params.opt_q), ("J_pi", params.opt_pi)):
        opt.zero_grad()
        losses[key].backward(retain_graph=True)
        opt.step()
    params._sync_targets(params.config.target_mix)
    return params, {k: (float(v.detach()) if torch.is_tensor(v) else v) for k, v in losses.items()}


def train_iql(D_hi, config: IqlConfig, seed: int) -> tuple[IqlParams, dict]:
    """Full-batch training; gamma_eff follows config.discount_mode."""
    config.validate()
    if len(D_hi.reward) == 0:
        raise ValueError("dataset must be nonempty")
    gamma_eff = D_hi.gamma**D_hi.c if config.discount_mode == "effective" else D_hi.gamma
    params = IqlParams(config, seed=seed)
    batch = (D_hi.s0, D_hi.z, D_hi.reward, D_hi.s_next)
    trace = {"J_V": [], "J_Q": [], "J_pi": [], "clip_rate": []}
    for _ in range(config.steps):
        params, losses = iql_step(batch, params, gamma_eff)
        for k in trace:
            trace[k].append(losses[k])
    params.is_trained = True
    return params, {k: np.asarray(v) for k, v in trace.items()}


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def iql_to_json(params: IqlParams) -> str:
    cfg = params.config
    payload = {
        "schema_version": IQL_SCHEMA_VERSION,
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "is_trained": params.is_trained,
        "nets": {k: v.tolist() for k, v in params.nets.state_dict().items()},
        "targets": {k: v.tolist() for k, v in params.targets.state_dict().items()},
    }
    return json.dumps(payload)


def iql_from_json(text: str) -> IqlParams:
    payload = json.loads(text)
    if payload.get("schema_version") != IQL_SCHEMA_VERSION:
        raise ValueError("unsupported iql schema version")
    params = IqlParams(IqlConfig(**payload["config"]), seed=0)
    for module, key in ((params.nets, "nets"), (params.targets, "targets")):
        state = {k: torch.tensor(v, dtype=torch.float64) for k, v in payload[key].items()}
        module.load_state_dict(state)
    params.is_trained = bool(payload["is_trained"])
    return params
