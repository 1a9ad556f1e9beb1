"""Sequence VAE over c-step action segments: the lossy counterpart to the
coupling flow.

Encoder reads the whole flattened window (states then actions, time-major)
and emits a Gaussian over an L-dimensional latent; the decoder is a per-step
Gaussian over actions conditioned on (s_t, z); the prior is a Gaussian
conditioned on the window's first state. With L < c*m the latent is a genuine
bottleneck, so decode(encode(tau)) cannot reproduce every segment, which is
the behavior the representation contrast experiment measures.

Log-stds everywhere are squashed into [-5, 2] through a sigmoid, matching the
skill prior in skill_flow. hidden=0 switches every network to a plain linear
map, which is what the identity-initialized autoencoder construction uses.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .skill_flow import _seeded_linear

VAE_SCHEMA_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)
LOGSTD_LO = -5.0
LOGSTD_HI = 2.0


@dataclass
class VaeConfig:
    c: int
    m: int
    state_dim: int
    latent: int = 2
    hidden: int = 32
    kl_weight: float = 0.1

    @property
    def flat_dim(self) -> int:
        # encoder input: all states then all actions, time-major
        return self.c * (self.state_dim + self.m)

    def validate(self) -> None:
        if self.c < 1 or self.m < 1 or self.state_dim < 1:
            raise ValueError("c, m, and state_dim must be >= 1")
        if self.latent < 1:
            raise ValueError("latent dimension must be >= 1")
        if self.hidden < 0:
            raise ValueError("hidden width must be >= 0 (0 means linear)")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be nonnegative")


def _clamped_logstd(raw: torch.Tensor) -> torch.Tensor:
    return LOGSTD_LO + (LOGSTD_HI - LOGSTD_LO) * torch.sigmoid(raw)


class _GaussianHead(nn.Module):
    """in_dim -> (mean, clamped log-std), optionally through one tanh layer.

    Mean/log-std output layers start at zero so a fresh head emits N(0, e^-3).
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        if hidden > 0:
            self.trunk = _seeded_linear(in_dim, hidden, rng, zero=False)
            feat = hidden
        else:
            self.trunk = None
            feat = in_dim
        self.mean_out = _seeded_linear(feat, out_dim, rng, zero=True)
        self.logstd_out = _seeded_linear(feat, out_dim, rng, zero=True)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = torch.tanh(self.trunk(x)) if self.trunk is not None else x
        return self.mean_out(h), _clamped_logstd(self.logstd_out(h))


class VaeModel(nn.Module):
    def __init__(self, config: VaeConfig, seed: int):
        super().__init__()
        config.validate()
        self.config = config
        self.is_trained = False
        rng = np.random.default_rng(seed)
        self.encoder = _GaussianHead(config.flat_dim, config.latent, config.hidden, rng)
        self.decoder = _GaussianHead(config.state_dim + config.latent, config.m, config.hidden, rng)
        self.prior = _GaussianHead(config.state_dim, config.latent, config.hidden, rng)

    # ---- torch-side stats -------------------------------------------------

    def encoder_stats_t(self, states: torch.Tensor, actions: torch.Tensor):
        n = states.shape[0]
        flat = torch.cat([states.reshape(n, -1), actions.reshape(n, -1)], dim=1)
        return self.encoder(flat)

    def decoder_stats_t(self, states: torch.Tensor, z: torch.Tensor):
        """states (n,c,sd), z (n,L) -> per-step action mean/log-std (n,c,m)."""
        n, c, _ = states.shape
        z_rep = z[:, None, :].expand(n, c, z.shape[1])
        inp = torch.cat([states, z_rep], dim=2).reshape(n * c, -1)
        mean, logstd = self.decoder(inp)
        m = self.config.m
        return mean.reshape(n, c, m), logstd.reshape(n, c, m)

    def prior_stats_t(self, s0: torch.Tensor):
        return self.prior(s0)

    # ---- numpy conveniences ------------------------------------------------

    def encode_segments(self, actions: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Posterior-mean encoding; duck-typed for relabel_high_dataset."""
        if not self.is_trained:
            raise ValueError("untrained model: train or load parameters first")
        st, at, _ = _canon_batch(states, actions, self.config)
        with torch.no_grad():
            mean, _ = self.encoder_stats_t(st, at)
        return mean.numpy()

    def sample_prior(self, s0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s0, dtype=np.float64))
        with torch.no_grad():
            mean, logstd = self.prior_stats_t(torch.from_numpy(s))
        out = mean.numpy() + np.exp(logstd.numpy()) * rng.standard_normal(size=mean.shape)
        return out[0] if np.ndim(s0) == 1 else out


def identity_vae(config: VaeConfig) -> VaeModel:
    """Linear VAE wired as an exact autoencoder; needs latent == c*m.

    Encoder mean copies the action block of the flattened window; the decoder
    is only able to mirror that when c == 1 (it is shared across steps), so
    the construction insists on it.
    """
    config.validate()
    if config.hidden != 0:
        raise ValueError("identity wiring requires hidden == 0 (linear model)")
    if config.latent != config.c * config.m:
        raise ValueError("identity wiring requires latent == c*m")
    if config.c != 1:
        raise ValueError("the shared per-step decoder can only invert c == 1")
    model = VaeModel(config, seed=0)
    sd, m = config.state_dim, config.m
    with torch.no_grad():
        enc = torch.zeros((config.latent, config.flat_dim), dtype=torch.float64)
        enc[:, sd:] = torch.eye(m, dtype=torch.float64)
        model.encoder.mean_out.weight.copy_(enc)
        dec = torch.zeros((m, sd + config.latent), dtype=torch.float64)
        dec[:, sd:] = torch.eye(m, dtype=torch.float64)
        model.decoder.mean_out.weight.copy_(dec)
    return model


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def gaussian_kl(
    mean_q: np.ndarray, logstd_q: np.ndarray, mean_p: np.ndarray, logstd_p: np.ndarray
) -> np.ndarray:
    """Closed-form KL(N_q || N_p) for diagonal Gaussians, summed over dims."""
    mean_q, logstd_q = np.atleast_2d(mean_q), np.atleast_2d(logstd_q)
    mean_p, logstd_p = np.atleast_2d(mean_p), np.atleast_2d(logstd_p)
    var_ratio = np.exp(2.0 * (logstd_q - logstd_p))
    quad = (mean_q - mean_p) ** 2 * np.exp(-2.0 * logstd_p)
    return 0.5 * (var_ratio + quad - 1.0).sum(axis=1) + (logstd_p - logstd_q).sum(axis=1)


def _kl_t(mean_q, logstd_q, mean_p, logstd_p) -> torch.Tensor:
    var_ratio = torch.exp(2.0 * (logstd_q - logstd_p))
    quad = (mean_q - mean_p) ** 2 * torch.exp(-2.0 * logstd_p)
    return 0.5 * (var_ratio + quad - 1.0).sum(dim=1) + (logstd_p - logstd_q).sum(dim=1)


def _canon_batch(states, actions, config: VaeConfig):
    """Normalize a segment batch to float64 (n,c,sd) states, (n,c,m) actions.

    Accepts single segments and tabular (integer state / scalar action) data.
    Returns torch views plus the number of segments.
    """
    st = np.asarray(states, dtype=np.float64)
    at = np.asarray(actions, dtype=np.float64)
    if at.ndim == 1:
        at = at[None, :, None] if config.m == 1 else at[None, :]
    elif at.ndim == 2:
        # (c, m) single segment when it matches, else (n, c) scalar actions
        if at.shape == (config.c, config.m) and config.m > 1:
            at = at[None]
        else:
            at = at[:, :, None]
    if st.ndim == 1:
        st = st[None, :, None] if config.state_dim == 1 else st[None, None, :]
    elif st.ndim == 2:
        if st.shape == (config.c, config.state_dim) and config.state_dim > 1:
            st = st[None]
        else:
            st = st[:, :, None]
    if at.shape[1] != config.c or at.shape[2] != config.m:
        raise ValueError("action segments do not match config (c, m)")
    if st.shape[1] != config.c or st.shape[2] != config.state_dim:
        raise ValueError("state segments do not match config (c, state_dim)")
    if st.shape[0] != at.shape[0]:
        raise ValueError("state and action batches disagree on segment count")
    return torch.from_numpy(st.copy()), torch.from_numpy(at.copy()), st.shape[0]


def _elbo_t(
    model: VaeModel,
    states: torch.Tensor,
    actions: torch.Tensor,
    kl_weight: float,
    noise: torch.Tensor,
):
    q_mean, q_logstd = model.encoder_stats_t(states, actions)
    z = q_mean + torch.exp(q_logstd) * noise
    d_mean, d_logstd = model.decoder_stats_t(states, z)
    resid = (actions - d_mean) * torch.exp(-d_logstd)
    step_ll = -0.5 * (resid**2 + _LOG_2PI) - d_logstd
    recon = -step_ll.sum(dim=(1, 2))
    if kl_weight == 0.0:
        # keep the prior out of the graph entirely so it receives no gradient
        with torch.no_grad():
            p_mean, p_logstd = model.prior_stats_t(states[:, 0, :])
            kl = _kl_t(q_mean, q_logstd, p_mean, p_logstd)
        loss = recon.mean()
    else:
        p_mean, p_logstd = model.prior_stats_t(states[:, 0, :])
        kl = _kl_t(q_mean, q_logstd, p_mean, p_logstd)
        loss = (recon + kl_weight * kl).mean()
    return loss, recon.mean(), kl.mean()


def elbo(
    model: VaeModel,
    states: np.ndarray,
    actions: np.ndarray,
    kl_weight: float | None = None,
    *,
    noise: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict]:
    """Single-sample negative-ELBO of a segment batch.

    The reparameterization noise can be pinned (``noise``, shape (n, L)) for
    reproducible evaluation; otherwise it is drawn from ``rng``.
    """
    if kl_weight is None:
        kl_weight = model.config.kl_weight
    if np.asarray(actions).size == 0:
        raise ValueError("batch must be nonempty")
    st, at, n = _canon_batch(states, actions, model.config)
    if noise is None:
        if rng is None:
            raise ValueError("provide either explicit noise or an rng")
        noise = rng.standard_normal(size=(n, model.config.latent))
    eps = torch.from_numpy(np.asarray(noise, dtype=np.float64).reshape(n, model.config.latent))
    with torch.no_grad():
        loss, recon, kl = _elbo_t(model, st, at, kl_weight, eps)
    return float(loss), {"recon": float(recon), "kl": float(kl)}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_vae(
    D_low,
    config: VaeConfig,
    seed: int,
    *,
    steps: int = 400,
    lr: float = 5e-3,
    init_model: VaeModel | None = None,
) -> tuple[VaeModel, dict]:
    """Full-batch Adam on the negative-ELBO; deterministic in seed."""
    config.validate()
    if np.asarray(D_low.actions).size == 0:
        raise ValueError("dataset must be nonempty")
    st, at, n = _canon_batch(D_low.states, D_low.actions, config)
    rng = np.random.default_rng(seed)
    if init_model is not None and init_model.config != config:
        raise ValueError("init_model config does not match")
    model = init_model if init_model is not None else VaeModel(config, seed=seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    trace = {"loss": [], "recon": [], "kl": []}
    for _ in range(steps):
        eps = torch.from_numpy(rng.standard_normal(size=(n, config.latent)))
        opt.zero_grad()
        loss, recon, kl = _elbo_t(model, st, at, config.kl_weight, eps)
        loss.backward()
        opt.step()
        trace["loss"].append(float(loss.detach()))
        trace["recon"].append(float(recon.detach()))
        trace["kl"].append(float(kl.detach()))
    model.is_trained = True
    return model, {k: np.asarray(v) for k, v in trace.items()}


# ---------------------------------------------------------------------------
# deterministic encode / decode
# ---------------------------------------------------------------------------


def vae_encode(model: VaeModel, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Posterior mean; (n, L), or (L,) for a single segment."""
    if not model.is_trained:
        raise ValueError("untrained model: train or load parameters first")
    st, at, _ = _canon_batch(states, actions, model.config)
    single = np.asarray(actions).ndim <= 2 and st.shape[0] == 1
    with torch.no_grad():
        mean, _ = model.encoder_stats_t(st, at)
    out = mean.numpy()
    return out[0] if single else out


def vae_decode(model: VaeModel, z: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Decoder means along a window's states; (n, c, m), or (c, m) single."""
    if not model.is_trained:
        raise ValueError("untrained model: train or load parameters first")
    cfg = model.config
    z = np.asarray(z, dtype=np.float64)
    st = np.asarray(states, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    if st.ndim == 1:
        st = st[None, :, None] if cfg.state_dim == 1 else st[None, None, :]
    elif st.ndim == 2:
        if st.shape == (cfg.c, cfg.state_dim) and cfg.state_dim > 1:
            st = st[None]
        else:
            st = st[:, :, None]
    if st.shape[1] != cfg.c or st.shape[2] != cfg.state_dim:
        raise ValueError("state windows do not match config (c, state_dim)")
    if z.shape != (st.shape[0], cfg.latent):
        raise ValueError("latents do not match config.latent")
    with torch.no_grad():
        mean, _ = model.decoder_stats_t(torch.from_numpy(st.copy()), torch.from_numpy(z))
    out = mean.numpy()
    return out[0] if single else out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def vae_to_json(model: VaeModel) -> str:
    cfg = model.config
    payload = {
        "schema_version": VAE_SCHEMA_VERSION,
        "config": {
            "c": cfg.c,
            "m": cfg.m,
            "state_dim": cfg.state_dim,
            "latent": cfg.latent,
            "hidden": cfg.hidden,
            "kl_weight": cfg.kl_weight,
        },
        "is_trained": model.is_trained,
        "state": {k: v.tolist() for k, v in model.state_dict().items()},
    }
    return json.dumps(payload)


def vae_from_json(text: str) -> VaeModel:
    payload = json.loads(text)
    if payload.get("schema_version") != VAE_SCHEMA_VERSION:
        raise ValueError("unsupported vae schema version")
    model = VaeModel(VaeConfig(**payload["config"]), seed=0)
    state = {k: torch.tensor(v, dtype=torch.float64) for k, v in payload["state"].items()}
    model.load_state_dict(state)
    model.is_trained = bool(payload["is_trained"])
    return model
