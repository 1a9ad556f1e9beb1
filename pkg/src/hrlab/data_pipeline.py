"""Skill-conditioned behavior policies, trajectory logging, window
segmentation into low-level datasets, relabeling into high-level tuples, and
tabular maximum-likelihood primitives.

Sampling is a pure function of (env, policy, seed): every draw flows through
one ``numpy.random.Generator`` in a fixed order, so runs are reproducible and
independent seeds can be farmed out to workers.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .mdp_core import LinearTabularMDP, PointMassEnv, PolicyTable

DATASET_SCHEMA_VERSION = 1


@dataclass
class SkillConfig:
    """Skill length; one high-level decision covers c base steps."""

    c: int

    def validate(self) -> None:
        if self.c < 1:
            raise ValueError("skill length c must be >= 1")


@dataclass
class BehaviorPolicy:
    """Latent-skill data-collection policy.

    ``skill_prior`` is a distribution over skills, either shared (K,) or
    state-conditioned (S, K). ``action_table[s, z]`` is the action
    distribution of skill z at state s.
    """

    num_skills: int
    skill_prior: np.ndarray
    action_table: np.ndarray

    def __post_init__(self):
        self.skill_prior = np.asarray(self.skill_prior, dtype=np.float64)
        self.action_table = np.asarray(self.action_table, dtype=np.float64)

    def validate(self) -> None:
        if self.num_skills < 1:
            raise ValueError("num_skills must be >= 1")
        if self.action_table.ndim != 3 or self.action_table.shape[1] != self.num_skills:
            raise ValueError("action table must have shape (S, K, A)")
        if np.min(self.action_table) < -1e-12:
            raise ValueError("action table has a negative probability")
        if np.max(np.abs(self.action_table.sum(axis=2) - 1.0)) > 1e-9:
            raise ValueError("action table rows must sum to 1")
        prior = self.skill_prior
        if prior.ndim not in (1, 2) or prior.shape[-1] != self.num_skills:
            raise ValueError("skill prior must be (K,) or (S, K)")
        if np.min(prior) < -1e-12 or np.max(np.abs(prior.sum(axis=-1) - 1.0)) > 1e-9:
            raise ValueError("skill prior rows must sum to 1")

    def as_low_policy_table(self) -> PolicyTable:
        return PolicyTable(kind="low", probs=self.action_table)

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": DATASET_SCHEMA_VERSION,
                "num_skills": self.num_skills,
                "skill_prior": self.skill_prior.tolist(),
                "action_table": self.action_table.tolist(),
            }
        )

    @staticmethod
    def from_json(text: str) -> "BehaviorPolicy":
        doc = json.loads(text)
        if doc.get("schema_version") != DATASET_SCHEMA_VERSION:
            raise ValueError("unsupported behavior schema version")
        policy = BehaviorPolicy(
            num_skills=doc["num_skills"],
            skill_prior=np.array(doc["skill_prior"]),
            action_table=np.array(doc["action_table"]),
        )
        policy.validate()
        return policy


def make_behavior_policy(
    mdp: LinearTabularMDP,
    num_skills: int,
    style: str,
    seed: int,
    *,
    temperature: float = 1.0,
    skill_prior: np.ndarray | None = None,
) -> BehaviorPolicy:
    """Build a skill-conditioned behavior policy over a tabular MDP.

    Styles: "actions-as-skills" (skill k deterministically plays action k,
    requires K == num_actions), "random-deterministic" (each (s, z) commits
    to one random action), "softmax-diverse" (random softmax rows; skills are
    pairwise distinct on at least one state).
    """
    if num_skills < 1:
        raise ValueError("num_skills must be >= 1")
    S, A = mdp.num_states, mdp.num_actions
    rng = np.random.default_rng(seed)
    if style == "actions-as-skills":
        if num_skills != A:
            raise ValueError("actions-as-skills requires K == num_actions")
        table = np.zeros((S, num_skills, A))
        for z in range(num_skills):
            table[:, z, z] = 1.0
    elif style == "random-deterministic":
        table = np.zeros((S, num_skills, A))
        picks = rng.integers(0, A, size=(S, num_skills))
        for s in range(S):
            for z in range(num_skills):
                table[s, z, picks[s, z]] = 1.0
    elif style == "softmax-diverse":
        for _ in range(100):
            logits = rng.normal(size=(S, num_skills, A)) / max(temperature, 1e-9)
            shifted = logits - logits.max(axis=2, keepdims=True)
            table = np.exp(shifted)
            table /= table.sum(axis=2, keepdims=True)
            distinct = True
            for z1 in range(num_skills):
                for z2 in range(z1 + 1, num_skills):
                    if np.max(np.abs(table[:, z1] - table[:, z2])) < 1e-6:
                        distinct = False
            if distinct:
                break
        else:  # pragma: no cover - continuous logits collide with probability 0
            raise ValueError("could not sample pairwise-distinct softmax skills")
    else:
        raise ValueError(f"unknown behavior style {style!r}")
    prior = np.full(num_skills, 1.0 / num_skills) if skill_prior is None else np.asarray(skill_prior, dtype=np.float64)
    policy = BehaviorPolicy(num_skills=num_skills, skill_prior=prior, action_table=table)
    policy.validate()
    return policy


@dataclass
class CorridorBehavior:
    """Bimodal continuous controller for the planar box testbed.

    Skill 0 tracks the bottom wall then climbs; skill 1 climbs the left wall
    then tracks the top. Actions are noisy steps toward the active waypoint,
    giving two well-separated action modes at comparable states.
    """

    max_step: float
    noise_sigma: float = 0.025
    num_skills: int = 2
    skill_prior: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))

    def waypoints(self, skill: int) -> np.ndarray:
        if skill == 0:
            return np.array([[0.9, 0.08], [0.9, 0.9]])
        return np.array([[0.08, 0.9], [0.9, 0.9]])

    def sample_actions(self, states: np.ndarray, skills: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = len(states)
        actions = np.zeros((n, 2))
        for z in (0, 1):
            mask = skills == z
            if not np.any(mask):
                continue
            pts = self.waypoints(z)
            s = states[mask]
            # head to the first waypoint not yet reached (within a step)
            first_done = np.linalg.norm(s - pts[0], axis=1) < 1.5 * self.max_step
            target = np.where(first_done[:, None], pts[1], pts[0])
            delta = target - s
            norm = np.maximum(np.linalg.norm(delta, axis=1, keepdims=True), 1e-9)
            actions[mask] = 0.8 * self.max_step * delta / norm
        actions += self.noise_sigma * rng.standard_normal(size=(n, 2))
        return np.clip(actions, -self.max_step, self.max_step)


@dataclass
class Trajectory:
    """One logged rollout: states has one more entry than the step arrays."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    skills: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def _draw_categorical(rng: np.random.Generator, cumprobs: np.ndarray) -> np.ndarray:
    """Vector draw: cumprobs is (n, K) of row-wise cumulative probabilities."""
    u = rng.random(len(cumprobs))
    return (u[:, None] > cumprobs).sum(axis=1)


def sample_trajectories(
    env,
    behavior,
    n: int,
    horizon: int,
    resample_skill_every: int,
    seed: int,
) -> list[Trajectory]:
    """Roll out the behavior policy, redrawing the skill every c steps.

    Works for both the tabular MDP (integer states/actions) and the planar
    box environment (vector states/actions). Deterministic in seed.
    """
    if n < 1:
        raise ValueError("need at least one trajectory")
    if not 1 <= resample_skill_every <= horizon:
        raise ValueError("need horizon >= resample_skill_every >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(env, LinearTabularMDP):
        return _sample_tabular(env, behavior, n, horizon, resample_skill_every, rng)
    return _sample_continuous(env, behavior, n, horizon, resample_skill_every, rng)


def _draw_skills(behavior, states, n, rng) -> np.ndarray:
    prior = np.asarray(behavior.skill_prior, dtype=np.float64)
    if prior.ndim == 1:
        cum = np.broadcast_to(prior.cumsum(), (n, behavior.num_skills))
    else:
        cum = prior.cumsum(axis=1)[states]
    return _draw_categorical(rng, cum)


def _sample_tabular(mdp, behavior, n, horizon, every, rng) -> list[Trajectory]:
    P, R = mdp.kernel(), mdp.rewards()
    cum_p = P.cumsum(axis=2)
    cum_b = np.asarray(behavior.action_table).cumsum(axis=2)
    states = np.empty((n, horizon + 1), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    rewards = np.empty((n, horizon), dtype=np.float64)
    skills = np.empty((n, horizon), dtype=np.int64)

    cum_mu = np.broadcast_to(mdp.mu0.cumsum(), (n, mdp.num_states))
    s = _draw_categorical(rng, cum_mu)
    z = None
    for t in range(horizon):
        if t % every == 0:
            z = _draw_skills(behavior, s, n, rng)
        a = _draw_categorical(rng, cum_b[s, z])
        states[:, t] = s
        actions[:, t] = a
        skills[:, t] = z
        rewards[:, t] = R[s, a]
        s = _draw_categorical(rng, cum_p[s, a])
    states[:, horizon] = s
    return [
        Trajectory(states=states[i], actions=actions[i], rewards=rewards[i], skills=skills[i])
        for i in range(n)
    ]


def _sample_continuous(env: PointMassEnv, behavior, n, horizon, every, rng) -> list[Trajectory]:
    dim = env.state_dim
    states = np.empty((n, horizon + 1, dim))
    actions = np.empty((n, horizon, env.action_dim))
    rewards = np.empty((n, horizon))
    skills = np.empty((n, horizon), dtype=np.int64)

    s = np.stack([env.reset(rng) for _ in range(n)])
    z = None
    for t in range(horizon):
        if t % every == 0:
            z = _draw_skills(behavior, None, n, rng)
        a = behavior.sample_actions(s, z, rng)
        states[:, t] = s
        actions[:, t] = a
        skills[:, t] = z
        s, r = env.step_batch(s, a)
        rewards[:, t] = r
    states[:, horizon] = s
    return [
        Trajectory(states=states[i], actions=actions[i], rewards=rewards[i], skills=skills[i])
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class SkillDataset:
    """Fixed-length windows cut from logged trajectories.

    ``states``/``actions`` hold the first c states/actions of each window;
    hidden skill labels are retained for oracle checks only.
    """

    c: int
    states: np.ndarray
    actions: np.ndarray
    labels: np.ndarray
    traj_index: np.ndarray
    offsets: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class HighLevelDataset:
    """Window-level tuples (s0, z, R, s_c) for high-level learning."""

    c: int
    gamma: float
    s0: np.ndarray
    z: np.ndarray
    reward: np.ndarray
    s_next: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)


def _window_starts(length: int, c: int) -> np.ndarray:
    return np.arange(0, (length // c) * c, c)


def segment_low_dataset(trajectories: list[Trajectory], c: int) -> SkillDataset:
    """Cut non-overlapping c-step windows at offsets 0, c, 2c, ...

    The trailing remainder of each trajectory is dropped; it is an error if
    every trajectory is shorter than c.
    """
    if c < 1:
        raise ValueError("skill length c must be >= 1")
    states, actions, labels, idx, offs = [], [], [], [], []
    for i, traj in enumerate(trajectories):
        for start in _window_starts(len(traj), c):
            states.append(traj.states[start : start + c])
            actions.append(traj.actions[start : start + c])
            labels.append(traj.skills[start])
            idx.append(i)
            offs.append(start)
    if not labels:
        raise ValueError("no window fits: c exceeds every trajectory length")
    return SkillDataset(
        c=c,
        states=np.stack(states),
        actions=np.stack(actions),
        labels=np.asarray(labels),
        traj_index=np.asarray(idx, dtype=np.int64),
        offsets=np.asarray(offs, dtype=np.int64),
    )


def relabel_high_dataset(
    trajectories: list[Trajectory],
    labeler: str,
    c: int,
    gamma: float,
    encoder=None,
) -> HighLevelDataset:
    """Reduce each c-step window to (s0, z, discounted window reward, s_c).

    ``labeler`` picks z: "ground-truth" reads the hidden skill at the window
    start; "flow-encoder" / "vae-encoder" run the trained encoder on the
    window's actions given s0.
    """
    if c < 1:
        raise ValueError("skill length c must be >= 1")
    if labeler not in ("ground-truth", "flow-encoder", "vae-encoder"):
        raise ValueError(f"unknown labeler {labeler!r}")
    if labeler != "ground-truth":
        if encoder is None or not getattr(encoder, "is_trained", False):
            raise ValueError("untrained encoder requested for relabeling")
    disc = gamma ** np.arange(c)
    s0s, zs, rewards, s_nexts = [], [], [], []
    seg_states, seg_actions = [], []
    for traj in trajectories:
        for start in _window_starts(len(traj), c):
            s0s.append(traj.states[start])
            s_nexts.append(traj.states[start + c])
            rewards.append(float(disc @ traj.rewards[start : start + c]))
            if labeler == "ground-truth":
                zs.append(traj.skills[start])
            else:
                # encoders see the whole window's states; flow-style encoders
                # only read the first one
                seg_states.append(traj.states[start : start + c])
                seg_actions.append(traj.actions[start : start + c])
    if not rewards:
        raise ValueError("no window fits: c exceeds every trajectory length")
    if labeler == "ground-truth":
        z_arr = np.asarray(zs)
    else:
        z_arr = encoder.encode_segments(np.stack(seg_actions), np.stack(seg_states))
    return HighLevelDataset(
        c=c,
        gamma=gamma,
        s0=np.stack(s0s) if np.ndim(s0s[0]) else np.asarray(s0s),
        z=z_arr,
        reward=np.asarray(rewards),
        s_next=np.stack(s_nexts) if np.ndim(s_nexts[0]) else np.asarray(s_nexts),
    )


# ---------------------------------------------------------------------------
# tabular maximum-likelihood primitive
# ---------------------------------------------------------------------------


@dataclass
class TabularPrimitive:
    """Smoothed empirical action table per (state, skill), with visit counts."""

    table: np.ndarray
    counts: np.ndarray
    smoothing: float

    @property
    def num_states(self) -> int:
        return self.table.shape[0]

    @property
    def num_skills(self) -> int:
        return self.table.shape[1]

    @property
    def num_actions(self) -> int:
        return self.table.shape[2]

    def validate(self) -> None:
        if np.min(self.table) < -1e-12:
            raise ValueError("primitive table has a negative probability")
        if np.max(np.abs(self.table.sum(axis=2) - 1.0)) > 1e-9:
            raise ValueError("primitive rows must sum to 1")

    def as_behavior(self, skill_prior: np.ndarray | None = None) -> BehaviorPolicy:
        prior = (
            np.full(self.num_skills, 1.0 / self.num_skills)
            if skill_prior is None
            else np.asarray(skill_prior, dtype=np.float64)
        )
        return BehaviorPolicy(num_skills=self.num_skills, skill_prior=prior, action_table=self.table)


def fit_tabular_primitive(
    dataset: SkillDataset,
    smoothing: float = 0.0,
    *,
    num_states: int | None = None,
    num_actions: int | None = None,
    num_skills: int | None = None,
) -> TabularPrimitive:
    """Maximum-likelihood (optionally Laplace-smoothed) conditional action table.

    Unseen (state, skill) rows fall back to the uniform distribution. Sizes
    default to the largest index seen; pass them explicitly when the dataset
    may miss the top index.
    """
    if len(dataset) == 0:
        raise ValueError("cannot fit a primitive on an empty dataset")
    if smoothing < 0:
        raise ValueError("smoothing must be nonnegative")
    states = dataset.states.reshape(-1).astype(np.int64)
    actions = dataset.actions.reshape(-1).astype(np.int64)
    skills = np.repeat(dataset.labels.astype(np.int64), dataset.c)
    S = num_states if num_states is not None else int(states.max()) + 1
    A = num_actions if num_actions is not None else int(actions.max()) + 1
    K = num_skills if num_skills is not None else int(skills.max()) + 1
    counts = np.zeros((S, K, A))
    np.add.at(counts, (states, skills, actions), 1.0)
    totals = counts.sum(axis=2, keepdims=True)
    table = np.full((S, K, A), 1.0 / A)
    smoothed_totals = totals + A * smoothing
    np.divide(counts + smoothing, smoothed_totals, out=table, where=smoothed_totals > 0)
    prim = TabularPrimitive(table=table, counts=counts, smoothing=smoothing)
    prim.validate()
    return prim


def measured_primitive_tv(primitive: TabularPrimitive, behavior: BehaviorPolicy, reduce: str = "visitation") -> float:
    """TV distance between learned and true conditional action tables.

    reduce "visitation": mean weighted by the primitive's empirical (s, z)
    visit frequencies (the statistically decaying quantity). reduce "max":
    worst row, including unseen rows (the audit-grade quantity).
    """
    rows_tv = 0.5 * np.abs(primitive.table - behavior.action_table).sum(axis=2)
    if reduce == "max":
        return float(rows_tv.max())
    if reduce == "visitation":
        weights = primitive.counts.sum(axis=2)
        total = weights.sum()
        if total <= 0:
            raise ValueError("primitive has no visits to weight by")
        return float((rows_tv * weights).sum() / total)
    raise ValueError(f"unknown reduce mode {reduce!r}")


# ---------------------------------------------------------------------------
# on-disk form: columnar CSV plus JSON manifest
# ---------------------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_trajectories(
    trajectories: list[Trajectory], csv_path: str, manifest_path: str, meta: dict | None = None
) -> None:
    """One CSV row per step (trajectory id, t, state, action, reward, hidden
    skill) plus a manifest with counts and caller-supplied metadata."""
    first = trajectories[0]
    tabular = first.states.ndim == 1
    if tabular:
        header = ["traj", "t", "s", "a", "r", "z"]
    else:
        sd = first.states.shape[1]
        ad = first.actions.shape[1]
        header = (
            ["traj", "t"]
            + [f"s{i}" for i in range(sd)]
            + [f"a{i}" for i in range(ad)]
            + ["r", "z"]
        )
    lines = [",".join(header)]
    for i, traj in enumerate(trajectories):
        for t in range(len(traj)):
            if tabular:
                cells = [str(i), str(t), str(int(traj.states[t])), str(int(traj.actions[t]))]
            else:
                cells = [str(i), str(t)]
                cells += [repr(float(x)) for x in traj.states[t]]
                cells += [repr(float(x)) for x in traj.actions[t]]
            cells.append(repr(float(traj.rewards[t])))
            cells.append(str(int(traj.skills[t])))
            lines.append(",".join(cells))
    _atomic_write(csv_path, "\n".join(lines) + "\n")

    manifest = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "num_trajectories": len(trajectories),
        "total_steps": int(sum(len(t) for t in trajectories)),
        "tabular": tabular,
    }
    # final states, one per trajectory, so rollouts reconstruct exactly
    if tabular:
        manifest["final_states"] = [int(t.states[-1]) for t in trajectories]
    else:
        manifest["final_states"] = [[float(x) for x in t.states[-1]] for t in trajectories]
    manifest.update(meta or {})
    _atomic_write(manifest_path, json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_trajectories(csv_path: str, manifest_path: str) -> tuple[list[Trajectory], dict]:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise ValueError("unsupported dataset schema version")
    tabular = manifest["tabular"]
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    sd = sum(1 for name in header if name.startswith("s") and name != "s")
    ad = sum(1 for name in header if name.startswith("a") and name != "a")
    by_traj: dict[int, list] = {}
    for row in rows:
        by_traj.setdefault(int(row[0]), []).append(row)
    out = []
    for i in sorted(by_traj):
        chunk = sorted(by_traj[i], key=lambda r: int(r[1]))
        if tabular:
            states = np.array([int(r[2]) for r in chunk] + [manifest["final_states"][i]])
            actions = np.array([int(r[3]) for r in chunk])
            rewards = np.array([float(r[4]) for r in chunk])
            skills = np.array([int(r[5]) for r in chunk])
        else:
            states = np.array(
                [[float(x) for x in r[2 : 2 + sd]] for r in chunk] + [manifest["final_states"][i]]
            )
            actions = np.array([[float(x) for x in r[2 + sd : 2 + sd + ad]] for r in chunk])
            rewards = np.array([float(r[2 + sd + ad]) for r in chunk])
            skills = np.array([int(r[-1]) for r in chunk])
        out.append(Trajectory(states=states, actions=actions, rewards=rewards, skills=skills))
    return out, manifest
