import json
import math

import numpy as np
import pytest
import torch
from scipy.integrate import simpson

from hrlab.data_pipeline import CorridorBehavior, sample_trajectories, segment_low_dataset
from hrlab.mdp_core import make_two_corridor_env
from hrlab.skill_flow import (
    CouplingFlow,
    FlowConfig,
    SkillPrior,
    _objective_t,
    flatten_segments,
    flow_decode_policy,
    flow_forward,
    flow_from_json,
    flow_inverse,
    flow_objective,
    flow_to_json,
    train_flow,
    unflatten_actions,
)


def _randomize(module: torch.nn.Module, rng: np.random.Generator, scale: float = 0.3):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(rng.uniform(-scale, scale, size=tuple(p.shape))))


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(c=0, m=1, state_dim=1).validate()
    with pytest.raises(ValueError):
        FlowConfig(c=2, m=1, state_dim=1, k=0).validate()
    with pytest.raises(ValueError):
        FlowConfig(c=2, m=1, state_dim=1, kl_weight=-0.1).validate()
    cfg = FlowConfig(c=1, m=1, state_dim=2)
    assert cfg.D == 2 and cfg.padded
    assert FlowConfig(c=3, m=2, state_dim=2).D == 6


def test_fresh_flow_is_identity():
    flow = CouplingFlow(FlowConfig(c=2, m=2, state_dim=3, k=2, hidden=8), seed=0)
    rng = np.random.default_rng(1)
    z = rng.normal(size=(10, 4))
    s = rng.normal(size=(10, 3))
    assert np.array_equal(flow_forward(flow, z, s), z)
    z_back, log_det = flow_inverse(flow, z, s)
    assert np.array_equal(z_back, z)
    assert np.array_equal(log_det, np.zeros(10))


def test_hand_evaluated_block():
    cfg = FlowConfig(c=2, m=1, state_dim=1, k=1, hidden=4, clamp=5.0)
    flow = CouplingFlow(cfg, seed=0)
    ln2 = math.log(2.0)
    with torch.no_grad():
        # constant scale ln2 and shift 1 on the transformed (second) half;
        # the raw bias pre-compensates the smooth clamp
        flow.blocks[0].first.v_out.bias.fill_(cfg.clamp * math.atanh(ln2 / cfg.clamp))
        flow.blocks[0].first.t_out.bias.fill_(1.0)
    a = flow_forward(flow, np.array([1.0, 1.0]), np.array([0.3]))
    assert a == pytest.approx([1.0, 3.0], abs=1e-12)
    z, log_det = flow_inverse(flow, np.array([1.0, 3.0]), np.array([0.3]))
    assert z == pytest.approx([1.0, 1.0], abs=1e-12)
    assert log_det == pytest.approx(-ln2, abs=1e-12)


def test_round_trip_many_pairs():
    cfg = FlowConfig(c=3, m=1, state_dim=2, k=2, hidden=6)
    flow = CouplingFlow(cfg, seed=3)
    _randomize(flow, np.random.default_rng(4), scale=0.5)
    rng = np.random.default_rng(5)
    z = rng.normal(size=(10_000, 3))
    s = rng.normal(size=(10_000, 2))
    a = flow_forward(flow, z, s)
    z_back, _ = flow_inverse(flow, a, s)
    assert np.max(np.abs(z_back - z)) <= 1e-9
    # and the other direction
    a2 = flow_forward(flow, z_back, s)
    assert np.max(np.abs(a2 - a)) <= 1e-9


def test_log_det_matches_numerical_jacobian():
    cfg = FlowConfig(c=3, m=1, state_dim=2, k=2, hidden=5)
    flow = CouplingFlow(cfg, seed=7)
    _randomize(flow, np.random.default_rng(8), scale=0.6)
    rng = np.random.default_rng(9)
    h = 1e-5
    for _ in range(5):
        a = rng.normal(size=3)
        s = rng.normal(size=2)
        J = np.zeros((3, 3))
        for j in range(3):
            up = a.copy(); up[j] += h
            dn = a.copy(); dn[j] -= h
            z_up, _ = flow_inverse(flow, up, s)
            z_dn, _ = flow_inverse(flow, dn, s)
            J[:, j] = (z_up - z_dn) / (2 * h)
        _, log_det = flow_inverse(flow, a, s)
        want = math.log(abs(np.linalg.det(J)))
        assert log_det == pytest.approx(want, rel=1e-4)


def test_non_finite_inputs_rejected():
    flow = CouplingFlow(FlowConfig(c=2, m=1, state_dim=1), seed=0)
    with pytest.raises(ValueError, match="non-finite"):
        flow_forward(flow, np.array([np.nan, 0.0]), np.array([0.0]))
    with pytest.raises(ValueError, match="non-finite"):
        flow_inverse(flow, np.array([0.0, np.inf]), np.array([0.0]))


def test_objective_identity_at_origin():
    cfg = FlowConfig(c=2, m=1, state_dim=1, kl_weight=0.0)
    flow = CouplingFlow(cfg, seed=0)
    prior = SkillPrior(cfg, seed=1)
    loss, parts = flow_objective(flow, prior, np.zeros((4, 2)), np.zeros((4, 1)))
    assert loss == pytest.approx(math.log(2 * math.pi), abs=1e-12)
    assert parts["nll"] == pytest.approx(math.log(2 * math.pi), abs=1e-12)


def test_objective_ignores_prior_when_unweighted():
    cfg = FlowConfig(c=2, m=2, state_dim=2, kl_weight=0.0)
    flow = CouplingFlow(cfg, seed=0)
    rng = np.random.default_rng(2)
    _randomize(flow, rng)
    a = rng.normal(size=(6, 4))
    s = rng.normal(size=(6, 2))
    p1 = SkillPrior(cfg, seed=3)
    p2 = SkillPrior(cfg, seed=4)
    _randomize(p2, rng)
    l1, _ = flow_objective(flow, p1, a, s)
    l2, _ = flow_objective(flow, p2, a, s)
    assert l1 == l2
    with pytest.raises(ValueError, match="nonempty"):
        flow_objective(flow, p1, np.zeros((0, 4)), np.zeros((0, 2)))


def test_objective_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    cases = [
        FlowConfig(c=1, m=1, state_dim=1, k=1, hidden=3, kl_weight=0.0),
        FlowConfig(c=2, m=1, state_dim=2, k=1, hidden=4, kl_weight=0.5),
        FlowConfig(c=1, m=2, state_dim=1, k=2, hidden=3, kl_weight=0.1),
        FlowConfig(c=2, m=2, state_dim=2, k=1, hidden=3, kl_weight=1.0),
        FlowConfig(c=3, m=1, state_dim=1, k=2, hidden=3, kl_weight=0.2),
    ]
    for idx, cfg in enumerate(cases):
        flow = CouplingFlow(cfg, seed=idx)
        prior = SkillPrior(cfg, seed=idx + 50)
        _randomize(flow, rng, scale=0.4)
        _randomize(prior, rng, scale=0.4)
        a = torch.from_numpy(
            flatten_segments(rng.normal(size=(4, cfg.c, cfg.m)), cfg)
        )
        s = torch.from_numpy(rng.normal(size=(4, cfg.state_dim)))

        def value() -> float:
            with torch.no_grad():
                return float(_objective_t(flow, prior, a, s, cfg.kl_weight)[0])

        params = list(flow.parameters()) + list(prior.parameters())
        for p in params:
            p.grad = None
        loss, _, _ = _objective_t(flow, prior, a, s, cfg.kl_weight)
        loss.backward()
        h = 1e-5
        for p in params:
            grad = p.grad
            if grad is None:
                continue
            flat = p.data.view(-1)
            gflat = grad.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = value()
                flat[i] = orig - h
                dn = value()
                flat[i] = orig
                fd = (up - dn) / (2 * h)
                an = float(gflat[i])
                if max(abs(an), abs(fd)) > 1e-6:
                    assert an == pytest.approx(fd, rel=1e-4, abs=1e-8)


@pytest.fixture(scope="module")
def corridor_segments():
    env = make_two_corridor_env()
    ctrl = CorridorBehavior(max_step=env.max_step)
    trajs = sample_trajectories(env, ctrl, n=24, horizon=12, resample_skill_every=4, seed=13)
    return env, segment_low_dataset(trajs, c=4)


@pytest.fixture(scope="module")
def trained(corridor_segments):
    env, ds = corridor_segments
    cfg = FlowConfig(c=4, m=2, state_dim=2, k=1, hidden=16)
    return cfg, *train_flow(ds, cfg, seed=17, steps=250, lr=5e-3)


def test_training_reduces_nll_and_is_deterministic(corridor_segments, trained):
    env, ds = corridor_segments
    cfg, flow, prior, trace = trained
    assert trace["nll"][-1] < trace["nll"][0]
    assert len(trace["loss"]) == 250

    flow2, prior2, trace2 = train_flow(ds, cfg, seed=17, steps=250, lr=5e-3)
    for k, v in flow.state_dict().items():
        assert torch.equal(v, flow2.state_dict()[k])
    for k, v in prior.state_dict().items():
        assert torch.equal(v, prior2.state_dict()[k])
    assert np.array_equal(trace["loss"], trace2["loss"])


def test_training_on_singleton_halves_nll(corridor_segments):
    _, ds = corridor_segments
    one = type(ds)(
        c=ds.c, states=np.repeat(ds.states[:1], 16, axis=0),
        actions=np.repeat(ds.actions[:1], 16, axis=0),
        labels=ds.labels[:16], traj_index=ds.traj_index[:16], offsets=ds.offsets[:16],
    )
    cfg = FlowConfig(c=4, m=2, state_dim=2, k=1, hidden=16)
    _, _, trace = train_flow(one, cfg, seed=19, steps=300, lr=1e-2)
    assert trace["nll"][-1] <= 0.5 * trace["nll"][0]


def test_train_flow_rejects_mismatched_shapes(corridor_segments):
    _, ds = corridor_segments
    with pytest.raises(ValueError, match="config.c"):
        train_flow(ds, FlowConfig(c=3, m=2, state_dim=2), seed=0, steps=1)
    with pytest.raises(ValueError, match="action dimension"):
        train_flow(ds, FlowConfig(c=4, m=1, state_dim=2), seed=0, steps=1)
    with pytest.raises(ValueError, match="state_dim"):
        train_flow(ds, FlowConfig(c=4, m=2, state_dim=5), seed=0, steps=1)


def test_trained_flow_stays_invertible_and_lossless(corridor_segments, trained):
    _, ds = corridor_segments
    cfg, flow, prior, _ = trained
    s0 = ds.states[:, 0]
    z = flow.encode_segments(ds.actions, s0)
    decoded = unflatten_actions(flow_forward(flow, z, s0), cfg)
    assert np.max(np.abs(decoded - ds.actions)) <= 1e-6

    rng = np.random.default_rng(23)
    zr = rng.normal(size=(10_000, cfg.D))
    sr = rng.uniform(0, 1, size=(10_000, 2))
    back, _ = flow_inverse(flow, flow_forward(flow, zr, sr), sr)
    assert np.max(np.abs(back - zr)) <= 1e-6


def test_decode_policy(trained):
    cfg, flow, prior, _ = trained
    policy = flow_decode_policy(flow, prior, action_bound=0.12)
    rng = np.random.default_rng(29)
    s0 = np.array([0.1, 0.1])
    z, acts = policy.sample(s0, rng)
    assert acts.shape == (4, 2)
    assert np.max(np.abs(acts)) <= 0.12

    fresh = CouplingFlow(cfg, seed=0)
    with pytest.raises(ValueError, match="trained"):
        flow_decode_policy(fresh, prior)


def test_identity_decode_matches_latent():
    cfg = FlowConfig(c=2, m=2, state_dim=2)
    flow = CouplingFlow(cfg, seed=0)
    prior = SkillPrior(cfg, seed=1)
    flow.is_trained = prior.is_trained = True
    policy = flow_decode_policy(flow, prior, action_bound=1.0)
    z = np.array([0.4, -0.2, 2.0, -3.0])
    acts = policy.decode(z, np.zeros(2))
    assert acts == pytest.approx(np.clip(z, -1, 1).reshape(2, 2))


def test_padded_single_dimension_round_trip():
    cfg = FlowConfig(c=1, m=1, state_dim=1, hidden=4)
    flow = CouplingFlow(cfg, seed=2)
    _randomize(flow, np.random.default_rng(3))
    flow.is_trained = True
    prior = SkillPrior(cfg, seed=4)
    prior.is_trained = True
    acts = np.random.default_rng(5).normal(size=(7, 1, 1))
    s0 = np.random.default_rng(6).normal(size=(7, 1))
    z = flow.encode_segments(acts, s0)
    assert z.shape == (7, 2)
    policy = flow_decode_policy(flow, prior)
    for i in range(7):
        dec = policy.decode(z[i], s0[i])
        assert dec == pytest.approx(acts[i], abs=1e-9)


def test_implied_density_integrates_to_one():
    cfg = FlowConfig(c=2, m=1, state_dim=1, k=2, hidden=5)
    flow = CouplingFlow(cfg, seed=31)
    _randomize(flow, np.random.default_rng(32), scale=0.5)
    s = np.array([0.4])
    grid = np.linspace(-9.0, 9.0, 201)
    aa, bb = np.meshgrid(grid, grid, indexing="ij")
    pts = np.stack([aa.ravel(), bb.ravel()], axis=1)
    z, log_det = flow_inverse(flow, pts, np.broadcast_to(s, (len(pts), 1)))
    log_p = -0.5 * ((z**2).sum(axis=1) + 2 * math.log(2 * math.pi)) + log_det
    density = np.exp(log_p).reshape(201, 201)
    mass = simpson(simpson(density, x=grid, axis=1), x=grid)
    assert mass == pytest.approx(1.0, abs=1e-2)


def test_hand_block_conditional_slice_integrates_to_one():
    cfg = FlowConfig(c=2, m=1, state_dim=1, k=1, hidden=4, clamp=5.0)
    flow = CouplingFlow(cfg, seed=0)
    ln2 = math.log(2.0)
    with torch.no_grad():
        flow.blocks[0].first.v_out.bias.fill_(cfg.clamp * math.atanh(ln2 / cfg.clamp))
        flow.blocks[0].first.t_out.bias.fill_(1.0)
    # conditional of the second coordinate given the first is N(1, 2^2)
    grid = np.linspace(-12.0, 14.0, 401)
    pts = np.stack([np.full_like(grid, 0.7), grid], axis=1)
    z, _ = flow_inverse(flow, pts, np.zeros((len(grid), 1)))
    cond = np.exp(-0.5 * z[:, 1] ** 2) / math.sqrt(2 * math.pi) / 2.0
    assert simpson(cond, x=grid) == pytest.approx(1.0, abs=1e-3)


def test_serialization_round_trip(trained):
    cfg, flow, prior, _ = trained
    text = flow_to_json(flow, prior)
    flow2, prior2 = flow_from_json(text)
    rng = np.random.default_rng(41)
    z = rng.normal(size=(5, cfg.D))
    s = rng.uniform(0, 1, size=(5, 2))
    assert np.array_equal(flow_forward(flow, z, s), flow_forward(flow2, z, s))
    m1, l1 = prior.stats_t(torch.from_numpy(s))
    m2, l2 = prior2.stats_t(torch.from_numpy(s))
    assert torch.equal(m1, m2) and torch.equal(l1, l2)
    assert flow2.is_trained and prior2.is_trained

    bad = json.loads(text)
    bad["schema_version"] = 99
    with pytest.raises(ValueError, match="schema"):
        flow_from_json(json.dumps(bad))
