"""State-conditioned affine coupling flow between latent vectors and
flattened c-step action sequences, plus the learned Gaussian skill prior.

The latent keeps the full c*m dimensions (a bijection cannot compress), which
is exactly what makes decode(encode(a)) reproduce a to machine precision.
Sequences flatten time-major: the first action's coordinates come first. The
degenerate c*m = 1 case pads with a dummy coordinate that decode drops.

Each coupling block runs two half-transforms (upper half conditioned on the
lower half and s0, then the flip), so one block already moves every
coordinate. Scale outputs pass through clamp*tanh(raw/clamp), which keeps
exp() bounded without breaking invertibility. All output layers start at
zero, so a fresh flow is the identity map.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

FLOW_SCHEMA_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowConfig:
    c: int
    m: int
    state_dim: int
    k: int = 1
    hidden: int = 50
    kl_weight: float = 0.1
    clamp: float = 5.0

    @property
    def flat_dim(self) -> int:
        return self.c * self.m

    @property
    def D(self) -> int:
        return max(2, self.flat_dim)

    @property
    def padded(self) -> bool:
        return self.flat_dim < 2

    def validate(self) -> None:
        if self.c < 1 or self.m < 1 or self.state_dim < 1:
            raise ValueError("c, m, and state_dim must be >= 1")
        if self.k < 1:
            raise ValueError("need at least one coupling block")
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be nonnegative")
        if self.clamp <= 0:
            raise ValueError("clamp must be positive")


def _seeded_linear(in_dim: int, out_dim: int, rng: np.random.Generator, zero: bool) -> nn.Linear:
    lin = nn.Linear(in_dim, out_dim, dtype=torch.float64)
    with torch.no_grad():
        if zero:
            lin.weight.zero_()
            lin.bias.zero_()
        else:
            bound = 1.0 / math.sqrt(in_dim)
            lin.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=(out_dim, in_dim))))
            lin.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=out_dim)))
    return lin


class _AffineHalf(nn.Module):
    """Scale/translate pair for one half-transform; identity at init."""

    def __init__(self, cond_dim: int, out_dim: int, hidden: int, clamp: float, rng):
        super().__init__()
        self.clamp = clamp
        self.v_in = _seeded_linear(cond_dim, hidden, rng, zero=False)
        self.v_out = _seeded_linear(hidden, out_dim, rng, zero=True)
        self.t_in = _seeded_linear(cond_dim, hidden, rng, zero=False)
        self.t_out = _seeded_linear(hidden, out_dim, rng, zero=True)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raw = self.v_out(torch.tanh(self.v_in(h)))
        v = self.clamp * torch.tanh(raw / self.clamp)
        t = self.t_out(torch.tanh(self.t_in(h)))
        return v, t


class _Block(nn.Module):
    def __init__(self, D: int, state_dim: int, hidden: int, clamp: float, rng):
        super().__init__()
        self.d_low = D // 2
        self.first = _AffineHalf(self.d_low + state_dim, D - self.d_low, hidden, clamp, rng)
        self.second = _AffineHalf((D - self.d_low) + state_dim, self.d_low, hidden, clamp, rng)


class CouplingFlow(nn.Module):
    """Invertible map a = f(z; s0) built from k two-half coupling blocks."""

    def __init__(self, config: FlowConfig, seed: int):
        super().__init__()
        config.validate()
        self.config = config
        self.is_trained = False
        rng = np.random.default_rng(seed)
        self.blocks = nn.ModuleList(
            [_Block(config.D, config.state_dim, config.hidden, config.clamp, rng)
             for _ in range(config.k)]
        )

    def forward_t(self, z: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        x = z
        for block in self.blocks:
            low, up = x[:, : block.d_low], x[:, block.d_low :]
            v, t = block.first(torch.cat([low, s], dim=1))
            up = up * torch.exp(v) + t
            v2, t2 = block.second(torch.cat([up, s], dim=1))
            low = low * torch.exp(v2) + t2
            x = torch.cat([low, up], dim=1)
        return x

    def inverse_t(self, a: torch.Tensor, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (z, log-determinant of the inverse-direction Jacobian)."""
        x = a
        log_det = torch.zeros(a.shape[0], dtype=a.dtype)
        for block in reversed(self.blocks):
            low, up = x[:, : block.d_low], x[:, block.d_low :]
            v2, t2 = block.second(torch.cat([up, s], dim=1))
            low = (low - t2) * torch.exp(-v2)
            v, t = block.first(torch.cat([low, s], dim=1))
            up = (up - t) * torch.exp(-v)
            log_det = log_det - v2.sum(dim=1) - v.sum(dim=1)
            x = torch.cat([low, up], dim=1)
        return x, log_det

    def encode_segments(self, actions: np.ndarray, s0: np.ndarray) -> np.ndarray:
        flat = flatten_segments(np.asarray(actions, dtype=np.float64), self.config)
        s = np.asarray(s0, dtype=np.float64)
        if s.ndim == 3:
            # whole state window supplied; the flow conditions on its start
            s = s[:, 0, :]
        s = np.atleast_2d(s)
        with torch.no_grad():
            z, _ = self.inverse_t(torch.from_numpy(flat), torch.from_numpy(s))
        return z.numpy()


class SkillPrior(nn.Module):
    """State-conditioned diagonal Gaussian over the latent space."""

    LOGSTD_LO = -5.0
    LOGSTD_HI = 2.0

    def __init__(self, config: FlowConfig, seed: int):
        super().__init__()
        self.config = config
        self.is_trained = False
        rng = np.random.default_rng(seed)
        self.mean_in = _seeded_linear(config.state_dim, config.hidden, rng, zero=False)
        self.mean_out = _seeded_linear(config.hidden, config.D, rng, zero=True)
        self.logstd_in = _seeded_linear(config.state_dim, config.hidden, rng, zero=False)
        self.logstd_out = _seeded_linear(config.hidden, config.D, rng, zero=True)

    def stats_t(self, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean = self.mean_out(torch.tanh(self.mean_in(s)))
        raw = self.logstd_out(torch.tanh(self.logstd_in(s)))
        span = self.LOGSTD_HI - self.LOGSTD_LO
        logstd = self.LOGSTD_LO + span * torch.sigmoid(raw)
        return mean, logstd

    def log_prob_t(self, z: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        mean, logstd = self.stats_t(s)
        inv_var = torch.exp(-2.0 * logstd)
        quad = ((z - mean) ** 2 * inv_var).sum(dim=1)
        return -0.5 * (quad + self.config.D * _LOG_2PI) - logstd.sum(dim=1)

    def sample(self, s0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s0, dtype=np.float64))
        with torch.no_grad():
            mean, logstd = self.stats_t(torch.from_numpy(s))
        noise = rng.standard_normal(size=mean.shape)
        out = mean.numpy() + np.exp(logstd.numpy()) * noise
        return out[0] if np.ndim(s0) == 1 else out


# ---------------------------------------------------------------------------
# flattening helpers
# ---------------------------------------------------------------------------


def flatten_segments(actions: np.ndarray, config: FlowConfig) -> np.ndarray:
    """(n, c, m) or (n, c) action segments -> (n, D) rows, zero-padded when
    c*m = 1."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 2:
        actions = actions[:, :, None]
    n, c, m = actions.shape
    if c != config.c or m != config.m:
        raise ValueError(
            f"segments have shape (c={c}, m={m}); config expects (c={config.c}, m={config.m})"
        )
    flat = actions.reshape(n, c * m)
    if config.padded:
        flat = np.hstack([flat, np.zeros((n, 1))])
    return flat


def unflatten_actions(flat: np.ndarray, config: FlowConfig) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.float64)
    if config.padded:
        flat = flat[..., : config.flat_dim]
    return flat.reshape(*flat.shape[:-1], config.c, config.m)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def _promote(vec: np.ndarray, s0: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    vec = np.asarray(vec, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)
    single = vec.ndim == 1
    if single:
        vec = vec[None]
    if s0.ndim == 1:
        s0 = np.broadcast_to(s0, (len(vec), len(s0))).copy()
    return vec, s0, single


def flow_forward(flow: CouplingFlow, z: np.ndarray, s0: np.ndarray) -> np.ndarray:
    z, s, single = _promote(z, s0)
    _check_finite("z", z)
    _check_finite("s0", s)
    with torch.no_grad():
        a = flow.forward_t(torch.from_numpy(np.ascontiguousarray(z)),
                           torch.from_numpy(np.ascontiguousarray(s)))
    out = a.numpy()
    return out[0] if single else out


def flow_inverse(flow: CouplingFlow, a: np.ndarray, s0: np.ndarray):
    a, s, single = _promote(a, s0)
    _check_finite("a", a)
    _check_finite("s0", s)
    with torch.no_grad():
        z, log_det = flow.inverse_t(torch.from_numpy(np.ascontiguousarray(a)),
                                    torch.from_numpy(np.ascontiguousarray(s)))
    if single:
        return z.numpy()[0], float(log_det.numpy()[0])
    return z.numpy(), log_det.numpy()


# ---------------------------------------------------------------------------
# objective and training
# ---------------------------------------------------------------------------


def _std_normal_logpdf(z: torch.Tensor) -> torch.Tensor:
    return -0.5 * ((z**2).sum(dim=1) + z.shape[1] * _LOG_2PI)


def _objective_t(
    flow: CouplingFlow,
    prior: SkillPrior,
    flat: torch.Tensor,
    s: torch.Tensor,
    kl_weight: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    z, log_det = flow.inverse_t(flat, s)
    base = _std_normal_logpdf(z)
    nll = (-base - log_det).mean()
    kl = (-prior.log_prob_t(z, s) + base).mean()
    return nll + kl_weight * kl, nll, kl


def flow_objective(
    flow: CouplingFlow,
    prior: SkillPrior,
    actions: np.ndarray,
    states: np.ndarray,
    kl_weight: float | None = None,
) -> tuple[float, dict]:
    """Penalized negative log-likelihood of flattened action rows.

    ``actions`` may be (n, D) flat rows or (n, c, m) segments; ``states`` are
    the window-start states. kl_weight defaults to the flow config's value.
    """
    actions = np.asarray(actions, dtype=np.float64)
    if len(actions) == 0:
        raise ValueError("batch must be nonempty")
    if actions.ndim != 2 or actions.shape[1] != flow.config.D:
        actions = flatten_segments(actions, flow.config)
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    weight = flow.config.kl_weight if kl_weight is None else kl_weight
    with torch.no_grad():
        loss, nll, kl = _objective_t(
            flow, prior, torch.from_numpy(actions), torch.from_numpy(s), weight
        )
    return float(loss), {"nll": float(nll), "kl": float(kl), "kl_weight": weight}


def train_flow(
    D_low,
    config: FlowConfig,
    seed: int,
    *,
    steps: int = 400,
    lr: float = 5e-3,
) -> tuple[CouplingFlow, SkillPrior, dict]:
    """Full-batch Adam on the penalized likelihood; deterministic in seed."""
    config.validate()
    actions = np.asarray(D_low.actions, dtype=np.float64)
    if actions.ndim == 2:
        actions = actions[:, :, None]
    if actions.shape[1] != config.c:
        raise ValueError("dataset segment length does not match config.c")
    if actions.shape[2] != config.m:
        raise ValueError("dataset action dimension does not match config.m")
    states = np.asarray(D_low.states, dtype=np.float64)
    s0 = states[:, 0]
    if s0.ndim == 1:
        s0 = s0[:, None]
    if s0.shape[1] != config.state_dim:
        raise ValueError("dataset state dimension does not match config.state_dim")

    flow = CouplingFlow(config, seed=seed)
    prior = SkillPrior(config, seed=seed + 1)
    flat = torch.from_numpy(flatten_segments(actions, config))
    s_t = torch.from_numpy(s0)
    params = list(flow.parameters()) + list(prior.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    trace = {"loss": [], "nll": [], "kl": []}
    for _ in range(steps):
        opt.zero_grad()
        loss, nll, kl = _objective_t(flow, prior, flat, s_t, config.kl_weight)
        loss.backward()
        opt.step()
        trace["loss"].append(float(loss.detach()))
        trace["nll"].append(float(nll.detach()))
        trace["kl"].append(float(kl.detach()))
    flow.is_trained = True
    prior.is_trained = True
    return flow, prior, {k: np.asarray(v) for k, v in trace.items()}


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


class FlowDecodePolicy:
    """Turns latents into executable c-step action plans."""

    def __init__(self, flow: CouplingFlow, prior: SkillPrior, high_policy=None,
                 action_bound: float | None = None):
        if not getattr(flow, "is_trained", False) or not getattr(prior, "is_trained", False):
            raise ValueError("flow and prior must be trained before decoding")
        self.flow = flow
        self.prior = prior
        self.high_policy = high_policy
        self.action_bound = action_bound

    def decode(self, z: np.ndarray, s0: np.ndarray) -> np.ndarray:
        flat = flow_forward(self.flow, z, s0)
        acts = unflatten_actions(flat, self.flow.config)
        if self.action_bound is not None:
            acts = np.clip(acts, -self.action_bound, self.action_bound)
        return acts

    def sample(self, s0: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.high_policy is not None:
            z = self.high_policy.sample_z(s0, rng)
        else:
            z = self.prior.sample(s0, rng)
        return z, self.decode(z, s0)


def flow_decode_policy(flow, prior, high_policy=None, action_bound=None) -> FlowDecodePolicy:
    return FlowDecodePolicy(flow, prior, high_policy=high_policy, action_bound=action_bound)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _config_doc(config: FlowConfig) -> dict:
    return {
        "c": config.c, "m": config.m, "state_dim": config.state_dim, "k": config.k,
        "hidden": config.hidden, "kl_weight": config.kl_weight, "clamp": config.clamp,
    }


def flow_to_json(flow: CouplingFlow, prior: SkillPrior) -> str:
    doc = {
        "schema_version": FLOW_SCHEMA_VERSION,
        "config": _config_doc(flow.config),
        "trained": bool(flow.is_trained and prior.is_trained),
        "flow": {k: v.numpy().tolist() for k, v in flow.state_dict().items()},
        "prior": {k: v.numpy().tolist() for k, v in prior.state_dict().items()},
    }
    return json.dumps(doc)


def flow_from_json(text: str) -> tuple[CouplingFlow, SkillPrior]:
    doc = json.loads(text)
    if doc.get("schema_version") != FLOW_SCHEMA_VERSION:
        raise ValueError("unsupported flow schema version")
    config = FlowConfig(**doc["config"])
    flow = CouplingFlow(config, seed=0)
    prior = SkillPrior(config, seed=0)
    flow.load_state_dict(
        {k: torch.tensor(v, dtype=torch.float64) for k, v in doc["flow"].items()}
    )
    prior.load_state_dict(
        {k: torch.tensor(v, dtype=torch.float64) for k, v in doc["prior"].items()}
    )
    flow.is_trained = prior.is_trained = doc["trained"]
    return flow, prior
