"""Config-driven experiment runner and command-line entry point.

A single JSON config names an experiment kind, the instance generator, the
(c, N, seed) grids, and the learner settings. ``run_experiment`` executes the
grid cell by cell (optionally across worker threads), records every cell in
CSV and JSON, and draws an SVG whose every plotted number also appears in a
CSV row. Outputs are a pure function of the config: reruns produce identical
bytes. A failing cell is recorded and skipped; the others are unaffected.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analysis import (
    concentration_coefficient,
    make_bound_inputs,
    random_tv_instance,
    representation_error,
    similarity_map,
    suboptimality_decomposition,
    theorem1_bound,
    tv_subopt_check,
)
from .data_pipeline import (
    CorridorBehavior,
    fit_tabular_primitive,
    make_behavior_policy,
    measured_primitive_tv,
    relabel_high_dataset,
    sample_trajectories,
    save_trajectories,
    segment_low_dataset,
    load_trajectories,
)
from .high_iql import IqlConfig, iql_to_json, train_iql
from .mdp_core import (
    LinearTabularMDP,
    PolicyTable,
    build_hyper_mdp,
    build_sparse_chain_mdp,
    build_tabular_linear_mdp,
    exact_state_values,
    exact_value_iteration,
    make_two_corridor_env,
    policy_value,
)
from .pevi import compute_beta_schedule, fit_pessimistic_value
from .skill_flow import FlowConfig, flow_forward, flow_to_json, train_flow, unflatten_actions
from .skill_vae import VaeConfig, train_vae, vae_decode, vae_encode, vae_to_json

CONFIG_SCHEMA_VERSION = 1
EXPERIMENT_KINDS = (
    "skill-length-sweep",
    "rate-sweep",
    "pessimism-audit",
    "representation-contrast",
    "decomposition-audit",
    "tv-audit",
)
_KINDS_NEEDING_TABULAR = ("skill-length-sweep", "rate-sweep", "pessimism-audit", "decomposition-audit")
DEFAULT_C_GRID = [1, 2, 3, 5, 8]
DEFAULT_N_GRID = [250, 1000, 4000, 16000]


@dataclass
class ExperimentConfig:
    kind: str
    name: str = "run"
    out_dir: str = "results"
    seeds: list = field(default_factory=list)
    c_list: list = field(default_factory=lambda: list(DEFAULT_C_GRID))
    n_list: list = field(default_factory=lambda: list(DEFAULT_N_GRID))
    mdp: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    pevi: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)
    vae: dict = field(default_factory=dict)
    iql: dict = field(default_factory=dict)
    workers: int = 1
    master_seed: int = 0
    schema_version: int = CONFIG_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def validate(self) -> list:
        return config_errors(self.to_dict())


def config_errors(raw: dict) -> list:
    """Full structural and range validation; returns field-level messages."""
    errors = []
    if not isinstance(raw, dict):
        return ["config: top level must be a JSON object"]
    known = set(ExperimentConfig.__dataclass_fields__)
    for key in sorted(set(raw) - known):
        errors.append(f"{key}: unknown field")

    kind = raw.get("kind")
    if kind is None:
        errors.append("kind: field is required")
    elif kind not in EXPERIMENT_KINDS:
        errors.append(f"kind: must be one of {', '.join(EXPERIMENT_KINDS)}")

    if raw.get("schema_version", CONFIG_SCHEMA_VERSION) != CONFIG_SCHEMA_VERSION:
        errors.append(f"schema_version: only version {CONFIG_SCHEMA_VERSION} is supported")

    seeds = raw.get("seeds")
    if seeds is None or seeds == []:
        errors.append("seeds: field is required (list of integer seeds)")
    elif not all(isinstance(s, int) for s in seeds):
        errors.append("seeds: every entry must be an integer")

    for name, default in (("c_list", DEFAULT_C_GRID), ("n_list", DEFAULT_N_GRID)):
        grid = raw.get(name, default)
        if not grid or not all(isinstance(v, int) for v in grid):
            errors.append(f"{name}: must be a nonempty list of integers")
        elif name == "c_list" and min(grid) < 1:
            errors.append("c_list: SkillConfig requires skill length c >= 1")
        elif name == "n_list" and min(grid) < 1:
            errors.append("n_list: sample sizes must be >= 1")

    out_dir = raw.get("out_dir", "results")
    if not isinstance(out_dir, str) or not out_dir:
        errors.append("out_dir: must be a nonempty path")
    if not isinstance(raw.get("name", "run"), str):
        errors.append("name: must be a string")
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        errors.append("workers: must be an integer >= 1")
    if not isinstance(raw.get("master_seed", 0), int):
        errors.append("master_seed: must be an integer")

    mdp = raw.get("mdp", {})
    if not isinstance(mdp, dict):
        errors.append("mdp: must be an object")
        mdp = {}
    family = mdp.get("family", "random")
    if kind in _KINDS_NEEDING_TABULAR or family != "corridor":
        gamma = mdp.get("gamma")
        if kind in _KINDS_NEEDING_TABULAR or gamma is not None:
            if gamma is None:
                errors.append("mdp.gamma: field is required")
            elif not isinstance(gamma, (int, float)) or not 0.0 <= gamma < 1.0:
                errors.append(
                    "mdp.gamma: the discount must satisfy 0 <= gamma < 1 (open at 1), "
                    "the admissible range of the discounted linear-MDP definition"
                )
    if kind in _KINDS_NEEDING_TABULAR:
        if family == "random":
            for key in ("d", "num_states", "num_actions"):
                v = mdp.get(key)
                if not isinstance(v, int) or v < 1:
                    errors.append(f"mdp.{key}: must be an integer >= 1")
            if isinstance(mdp.get("d"), int) and mdp["d"] < 2:
                errors.append("mdp.d: feature dimension must be >= 2")
        elif family == "sparse-chain":
            if not isinstance(mdp.get("length"), int) or mdp["length"] < 3:
                errors.append("mdp.length: chain length must be an integer >= 3")
            if not isinstance(mdp.get("d"), int) or mdp["d"] < 2:
                errors.append("mdp.d: feature dimension must be >= 2")
        else:
            errors.append(f"mdp.family: kind {kind} needs a tabular family (random or sparse-chain)")
    if kind == "representation-contrast" and family not in ("corridor",):
        errors.append("mdp.family: representation-contrast runs on the corridor environment")

    pevi = raw.get("pevi", {})
    if not isinstance(pevi, dict):
        errors.append("pevi: must be an object")
        pevi = {}
    delta = pevi.get("delta", 0.1)
    if not isinstance(delta, (int, float)) or not 0.0 < delta < 1.0:
        errors.append("pevi.delta: must lie in (0, 1)")
    C = pevi.get("C", 1.0)
    if not isinstance(C, (int, float)) or C < 0.0:
        errors.append("pevi.C: must be nonnegative")
    if kind == "pessimism-audit":
        grid = pevi.get("C_grid", [0.0, 0.5, 1.0, 2.0])
        if not grid or not all(isinstance(v, (int, float)) and v >= 0 for v in grid):
            errors.append("pevi.C_grid: must be a nonempty list of nonnegative reals")

    for section in ("data", "flow", "vae", "iql"):
        if not isinstance(raw.get(section, {}), dict):
            errors.append(f"{section}: must be an object")
    for section, key in (("flow", "steps"), ("vae", "steps"), ("iql", "steps")):
        sec = raw.get(section, {})
        if isinstance(sec, dict) and key in sec and (not isinstance(sec[key], int) or sec[key] < 1):
            errors.append(f"{section}.{key}: must be an integer >= 1")
    return errors


def config_from_dict(raw: dict) -> ExperimentConfig:
    errors = config_errors(raw)
    if errors:
        raise ValueError("invalid config: " + "; ".join(errors))
    kwargs = {k: raw[k] for k in ExperimentConfig.__dataclass_fields__ if k in raw}
    return ExperimentConfig(**kwargs)


def load_config(path: str) -> tuple:
    """(config-or-None, error list); parse errors carry line context."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        return None, [f"config: cannot read {path}: {exc}"]
    except json.JSONDecodeError as exc:
        return None, [f"config: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"]
    errors = config_errors(raw)
    if errors:
        return None, errors
    return config_from_dict(raw), []


def validate_config(path: str) -> list:
    """Errors found in the file at ``path``; empty list means ok."""
    _, errors = load_config(path)
    return errors


# ---------------------------------------------------------------------------
# instance plumbing
# ---------------------------------------------------------------------------


def _build_mdp(mdp_cfg: dict, seed: int):
    family = mdp_cfg.get("family", "random")
    if family == "random":
        return build_tabular_linear_mdp(
            seed=seed,
            d=mdp_cfg["d"],
            num_states=mdp_cfg["num_states"],
            num_actions=mdp_cfg["num_actions"],
            gamma=mdp_cfg["gamma"],
            r_max=mdp_cfg.get("r_max", 1.0),
            kernel_concentration=mdp_cfg.get("kernel_concentration", 0.5),
            state_rewards=mdp_cfg.get("state_rewards", False),
        )
    if family == "sparse-chain":
        return build_sparse_chain_mdp(
            length=mdp_cfg["length"],
            gamma=mdp_cfg["gamma"],
            d=mdp_cfg["d"],
            seed=seed,
            r_max=mdp_cfg.get("r_max", 1.0),
            slip=mdp_cfg.get("slip", 0.1),
        )
    if family == "corridor":
        return make_two_corridor_env(max_step=mdp_cfg.get("max_step", 0.12))
    raise ValueError(f"unknown mdp family {family!r}")


def _tabular_behavior(mdp, data_cfg: dict, seed: int):
    num_skills = data_cfg.get("num_skills", mdp.num_actions)
    style = data_cfg.get("style", "actions-as-skills")
    return make_behavior_policy(
        mdp, num_skills, style, seed, temperature=data_cfg.get("temperature", 1.0)
    )


def _cell_stream(master_seed: int, cell_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, cell_index]))


def _sample_seed(master_seed: int, cell_index: int) -> int:
    return int(np.random.SeedSequence([master_seed, cell_index]).generate_state(1)[0] % 2**31)


def _hierarchy_cell(config: ExperimentConfig, c: int, n_base: int, seed: int, cell_index: int) -> dict:
    """One (c, N, seed) pipeline run: data -> PEVI on the hyper-MDP -> values."""
    mdp = _build_mdp(config.mdp, seed)
    behavior = _tabular_behavior(mdp, config.data, seed)
    horizon = c * max(1, config.data.get("windows_per_trajectory", 4))
    n_traj = max(1, n_base // horizon)
    trajs = sample_trajectories(
        mdp, behavior, n=n_traj, horizon=horizon, resample_skill_every=c,
        seed=_sample_seed(config.master_seed, cell_index),
    )
    hyper = build_hyper_mdp(mdp, behavior, c)
    D_hi = relabel_high_dataset(trajs, "ground-truth", c, mdp.gamma)
    sched = compute_beta_schedule(
        mdp.d, len(D_hi), mdp.gamma, c,
        config.pevi.get("delta", 0.1), C=config.pevi.get("C", 1.0), r_max=mdp.r_max,
    )
    est = fit_pessimistic_value(
        D_hi, hyper,
        lambda_reg=config.pevi.get("lambda_reg", 1.0),
        beta_scale=sched.beta_scale,
    )
    _, pi_star_beta = exact_value_iteration(hyper)
    j_star_beta = policy_value(hyper, pi_star_beta)
    j_hat = policy_value(hyper, est.policy)
    return {
        "mdp": mdp, "behavior": behavior, "hyper": hyper, "trajs": trajs,
        "D_hi": D_hi, "estimate": est, "pi_star_beta": pi_star_beta,
        "j_star_beta": j_star_beta, "j_hat": j_hat,
        "subopt": j_star_beta - j_hat,
    }


# ---------------------------------------------------------------------------
# experiment kinds
# ---------------------------------------------------------------------------


def _cells_skill_length(config: ExperimentConfig):
    n_base = config.n_list[0]
    grid = [(c, seed) for c in config.c_list for seed in config.seeds]

    def run(index, cell):
        c, seed = cell
        out = _hierarchy_cell(config, c, n_base, seed, index)
        mdp, behavior, trajs = out["mdp"], out["behavior"], out["trajs"]
        low = segment_low_dataset(trajs, c=1)
        prim = fit_tabular_primitive(
            low, smoothing=config.data.get("smoothing", 1e-3),
            num_states=mdp.num_states, num_actions=mdp.num_actions,
            num_skills=behavior.num_skills,
        )
        eps_theta = measured_primitive_tv(prim, behavior, reduce="max")
        _, pi_star = exact_value_iteration(mdp)
        eps_omega, _ = representation_error(mdp, behavior, [pi_star], c)
        c_dag = max(1.0, concentration_coefficient(out["D_hi"], out["hyper"], out["pi_star_beta"]))
        if math.isinf(c_dag):
            bound = None
        else:
            inputs = make_bound_inputs(
                d=mdp.d, N=len(out["D_hi"]), gamma=mdp.gamma, c=c,
                delta=config.pevi.get("delta", 0.1), C=config.pevi.get("C", 1.0),
                eps_theta=eps_theta, eps_omega=eps_omega, c_dagger=c_dag,
                r_max=mdp.r_max,
            )
            bound = theorem1_bound(inputs)
        return {
            "kind": config.kind, "c": c, "n": n_base, "seed": seed,
            "j_star_beta": out["j_star_beta"], "j_hat": out["j_hat"],
            "subopt": out["subopt"], "eps_theta": eps_theta,
            "eps_omega": eps_omega, "c_dagger": c_dag, "bound": bound,
        }

    def summarize(rows):
        summary = []
        for c in config.c_list:
            got = [r for r in rows if r["c"] == c]
            if not got:
                continue
            bounds = [r["bound"] for r in got if r["bound"] is not None]
            summary.append({
                "c": c,
                "median_subopt": float(np.median([r["subopt"] for r in got])),
                "median_bound": float(np.median(bounds)) if bounds else None,
                "cells": len(got),
            })
        series = [("median suboptimality", [s["c"] for s in summary], [s["median_subopt"] for s in summary])]
        if all(s["median_bound"] is not None for s in summary):
            series.append(("median bound", [s["c"] for s in summary], [s["median_bound"] for s in summary]))
        plot = {"series": series, "title": "suboptimality vs skill length",
                "xlabel": "c", "ylabel": "value", "logx": False, "logy": False}
        return summary, plot

    return grid, run, summarize


def _cells_rate(config: ExperimentConfig):
    c = config.c_list[0]
    grid = [(n, seed) for n in config.n_list for seed in config.seeds]

    def run(index, cell):
        n, seed = cell
        out = _hierarchy_cell(config, c, n, seed, index)
        return {
            "kind": config.kind, "c": c, "n": n, "seed": seed,
            "j_star_beta": out["j_star_beta"], "j_hat": out["j_hat"],
            "subopt": out["subopt"],
        }

    def summarize(rows):
        summary = []
        for n in config.n_list:
            got = [r["subopt"] for r in rows if r["n"] == n]
            if got:
                summary.append({"n": n, "median_subopt": float(np.median(got)), "cells": len(got)})
        xs = [s["n"] for s in summary]
        ys = [max(s["median_subopt"], 1e-12) for s in summary]
        if len(xs) >= 2:
            slope = float(np.polyfit(np.log(xs), np.log(ys), 1)[0])
        else:
            slope = None
        for s in summary:
            s["loglog_slope"] = slope
        plot = {"series": [("median suboptimality", xs, ys)],
                "title": "suboptimality vs sample size",
                "xlabel": "N", "ylabel": "median suboptimality",
                "logx": True, "logy": True}
        return summary, plot

    return grid, run, summarize


def _cells_pessimism(config: ExperimentConfig):
    c = config.c_list[0]
    n_base = config.n_list[0]
    c_grid = config.pevi.get("C_grid", [0.0, 0.5, 1.0, 2.0])
    grid = [(C, seed) for C in c_grid for seed in config.seeds]

    def run(index, cell):
        C, seed = cell
        local = ExperimentConfig(**{**config.to_dict(), "pevi": {**config.pevi, "C": C}})
        out = _hierarchy_cell(local, c, n_base, seed, index)
        v_pi = exact_state_values(out["hyper"], out["estimate"].policy)
        gap = out["estimate"].V_hat - v_pi
        return {
            "kind": config.kind, "C": C, "seed": seed,
            "satisfied": bool(np.all(gap <= 1e-8)),
            "max_violation": float(max(np.max(gap), 0.0)),
        }

    def summarize(rows):
        summary = []
        for C in c_grid:
            got = [r for r in rows if r["C"] == C]
            if got:
                rate = float(np.mean([r["satisfied"] for r in got]))
                summary.append({"C": C, "satisfaction_rate": rate, "cells": len(got)})
        plot = {"series": [("satisfaction rate", [s["C"] for s in summary],
                            [s["satisfaction_rate"] for s in summary])],
                "title": "pessimism satisfaction vs bonus scale",
                "xlabel": "C", "ylabel": "rate", "logx": False, "logy": False}
        return summary, plot

    return grid, run, summarize


def _cells_representation(config: ExperimentConfig):
    grid = [(seed,) for seed in config.seeds]
    c = config.c_list[0]

    def run(index, cell):
        (seed,) = cell
        env = _build_mdp({**config.mdp, "family": "corridor"}, seed)
        ctrl = CorridorBehavior(
            max_step=env.max_step, noise_sigma=config.data.get("noise_sigma", 0.025)
        )
        horizon = c * max(1, config.data.get("windows_per_trajectory", 3))
        trajs = sample_trajectories(
            env, ctrl, n=config.data.get("n_trajectories", 24), horizon=horizon,
            resample_skill_every=c, seed=_sample_seed(config.master_seed, index),
        )
        ds = segment_low_dataset(trajs, c)
        hold = max(1, len(ds.labels) // 5)

        fcfg = FlowConfig(c=c, m=2, state_dim=2,
                          k=config.flow.get("k", 1),
                          hidden=config.flow.get("hidden", 16),
                          kl_weight=config.flow.get("kl_weight", 0.1))
        steps = config.flow.get("steps", 250)
        flow, prior, _ = train_flow(ds, fcfg, seed=seed, steps=steps,
                                    lr=config.flow.get("lr", 5e-3))
        vcfg = VaeConfig(c=c, m=2, state_dim=2,
                         latent=config.vae.get("latent", 2),
                         hidden=config.vae.get("hidden", 16),
                         kl_weight=config.vae.get("kl_weight", 1.0))
        vae, _ = train_vae(ds, vcfg, seed=seed, steps=config.vae.get("steps", steps),
                           lr=config.vae.get("lr", 5e-3))

        acts = np.asarray(ds.actions[-hold:], dtype=np.float64)
        s0 = np.asarray(ds.states[-hold:, 0], dtype=np.float64)
        z_f = flow.encode_segments(acts, s0)
        back = unflatten_actions(flow_forward(flow, z_f, s0), fcfg)
        flow_err = float(np.max(np.abs(back - acts)))
        v_rec = vae_decode(vae, vae_encode(vae, ds.states[-hold:], acts), ds.states[-hold:])
        vae_err = float(np.mean(np.abs(v_rec - acts)))

        rng = _cell_stream(config.master_seed, index)
        starts = ds.states[:, 0]
        pick = rng.integers(0, len(starts), size=config.data.get("n_probe", 64))
        z_flow = rng.standard_normal(size=(len(pick), fcfg.D))
        a_flow = unflatten_actions(flow_forward(flow, z_flow, starts[pick]), fcfg)
        z_vae = rng.standard_normal(size=(len(pick), vcfg.latent))
        a_vae = vae_decode(vae, z_vae, ds.states[pick])
        radius = config.data.get("state_radius", 0.25)
        flow_eps = similarity_map(
            [(starts[p], a_flow[i][0]) for i, p in enumerate(pick)], trajs, radius)
        vae_eps = similarity_map(
            [(starts[p], a_vae[i][0]) for i, p in enumerate(pick)], trajs, radius)
        return {
            "kind": config.kind, "seed": seed,
            "flow_recon_max": flow_err, "vae_recon_l1": vae_err,
            "flow_median_eps": float(np.median(flow_eps)),
            "vae_median_eps": float(np.median(vae_eps)),
        }

    def summarize(rows):
        summary = [{
            "median_flow_recon_max": float(np.median([r["flow_recon_max"] for r in rows])),
            "median_vae_recon_l1": float(np.median([r["vae_recon_l1"] for r in rows])),
            "median_flow_eps": float(np.median([r["flow_median_eps"] for r in rows])),
            "median_vae_eps": float(np.median([r["vae_median_eps"] for r in rows])),
            "cells": len(rows),
        }] if rows else []
        xs = [r["seed"] for r in rows]
        plot = {"series": [("flow median eps", xs, [r["flow_median_eps"] for r in rows]),
                           ("vae median eps", xs, [r["vae_median_eps"] for r in rows])],
                "title": "random-latent action similarity",
                "xlabel": "seed", "ylabel": "median eps", "logx": False, "logy": False}
        return summary, plot

    return grid, run, summarize


def _cells_decomposition(config: ExperimentConfig):
    grid = [(seed,) for seed in config.seeds]
    c = config.c_list[0]
    n_base = config.n_list[0]

    def run(index, cell):
        (seed,) = cell
        out = _hierarchy_cell(config, c, n_base, seed, index)
        mdp, behavior = out["mdp"], out["behavior"]
        low = segment_low_dataset(out["trajs"], c=1)
        prim = fit_tabular_primitive(
            low, smoothing=config.data.get("smoothing", 1e-3),
            num_states=mdp.num_states, num_actions=mdp.num_actions,
            num_skills=behavior.num_skills,
        )
        rep = suboptimality_decomposition(mdp, out["hyper"], prim, out["estimate"].policy)
        residual = abs(
            rep.total_subopt
            - (rep.primitive_error + rep.offline_error + rep.representation_error)
        )
        return {
            "kind": config.kind, "seed": seed,
            "primitive_error": rep.primitive_error,
            "offline_error": rep.offline_error,
            "representation_error": rep.representation_error,
            "total_subopt": rep.total_subopt,
            "residual": residual,
        }

    def summarize(rows):
        summary = [{
            "max_residual": float(max(r["residual"] for r in rows)),
            "median_total": float(np.median([r["total_subopt"] for r in rows])),
            "cells": len(rows),
        }] if rows else []
        xs = [r["seed"] for r in rows]
        plot = {"series": [(key, xs, [r[key] for r in rows])
                           for key in ("primitive_error", "offline_error", "representation_error")],
                "title": "suboptimality decomposition",
                "xlabel": "seed", "ylabel": "term", "logx": False, "logy": False}
        return summary, plot

    return grid, run, summarize


def _cells_tv(config: ExperimentConfig):
    grid = [(seed,) for seed in config.seeds]

    def run(index, cell):
        (seed,) = cell
        inst = random_tv_instance(seed)
        lhs, rhs, holds = tv_subopt_check(inst)
        return {
            "kind": config.kind, "seed": seed,
            "num_states": inst.P1.shape[0], "c": inst.c,
            "lhs": lhs, "rhs": rhs, "holds": bool(holds),
        }

    def summarize(rows):
        summary = [{
            "violations": int(sum(not r["holds"] for r in rows)),
            "cells": len(rows),
        }] if rows else []
        xs = [r["lhs"] for r in rows]
        plot = {"series": [("rhs vs lhs", xs, [r["rhs"] for r in rows])],
                "title": "window-coupling bound audit",
                "xlabel": "lhs", "ylabel": "rhs", "logx": False, "logy": False,
                "scatter": True}
        return summary, plot

    return grid, run, summarize


_KIND_BUILDERS = {
    "skill-length-sweep": _cells_skill_length,
    "rate-sweep": _cells_rate,
    "pessimism-audit": _cells_pessimism,
    "representation-contrast": _cells_representation,
    "decomposition-audit": _cells_decomposition,
    "tv-audit": _cells_tv,
}


# ---------------------------------------------------------------------------
# output formatting
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(rows: list, columns: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(col)) for col in columns])
    return buf.getvalue()


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def config_hash(config: ExperimentConfig) -> str:
    canon = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _svg_plot(plot: dict, digest: str, width: int = 640, height: int = 440) -> str:
    """Hand-rolled line/scatter SVG; every number plotted comes from the CSV."""
    left, right, top, bottom = 62.0, width - 16.0, 26.0, height - 46.0
    palette = ("#1f6f8b", "#c0533e", "#5a8f3c", "#7a5aa0")

    def transform(vals, log):
        arr = np.asarray(vals, dtype=np.float64)
        if log:
            arr = np.log10(np.maximum(arr, 1e-300))
        return arr

    xs_all = np.concatenate([transform(xs, plot.get("logx", False)) for _, xs, _ in plot["series"] if len(xs)]) \
        if any(len(xs) for _, xs, _ in plot["series"]) else np.array([0.0, 1.0])
    ys_all = np.concatenate([transform(ys, plot.get("logy", False)) for _, _, ys in plot["series"] if len(ys)]) \
        if any(len(ys) for _, _, ys in plot["series"]) else np.array([0.0, 1.0])

    def bounds(arr):
        lo, hi = float(np.min(arr)), float(np.max(arr))
        if not math.isfinite(lo) or not math.isfinite(hi):
            lo, hi = 0.0, 1.0
        if hi - lo < 1e-12:
            lo, hi = lo - 1.0, hi + 1.0
        return lo, hi

    x_lo, x_hi = bounds(xs_all)
    y_lo, y_hi = bounds(ys_all)

    def px(v):
        return left + (v - x_lo) / (x_hi - x_lo) * (right - left)

    def py(v):
        return bottom - (v - y_lo) / (y_hi - y_lo) * (bottom - top)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<!-- config-hash: {digest} -->",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{(left + right) / 2:.2f}" y="16" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{plot["title"]}</text>',
        f'<line x1="{left:.2f}" y1="{bottom:.2f}" x2="{right:.2f}" y2="{bottom:.2f}" stroke="black"/>',
        f'<line x1="{left:.2f}" y1="{top:.2f}" x2="{left:.2f}" y2="{bottom:.2f}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        xl = 10.0**xv if plot.get("logx") else xv
        yl = 10.0**yv if plot.get("logy") else yv
        out.append(
            f'<text x="{px(xv):.2f}" y="{bottom + 16:.2f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{xl:.4g}</text>'
        )
        out.append(
            f'<text x="{left - 6:.2f}" y="{py(yv) + 3:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{yl:.4g}</text>'
        )
    out.append(
        f'<text x="{(left + right) / 2:.2f}" y="{height - 8:.2f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11">{plot["xlabel"]}</text>'
    )
    out.append(
        f'<text x="14" y="{(top + bottom) / 2:.2f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11" '
        f'transform="rotate(-90 14 {(top + bottom) / 2:.2f})">{plot["ylabel"]}</text>'
    )
    for si, (label, xs, ys) in enumerate(plot["series"]):
        color = palette[si % len(palette)]
        tx = transform(xs, plot.get("logx", False))
        ty = transform(ys, plot.get("logy", False))
        pts = [(px(a), py(b)) for a, b in zip(tx, ty) if math.isfinite(a) and math.isfinite(b)]
        if not plot.get("scatter") and len(pts) > 1:
            path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in pts:
            out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="{color}"/>')
        out.append(
            f'<text x="{right - 150:.2f}" y="{top + 14 * si + 4:.2f}" '
            f'font-family="sans-serif" font-size="10" fill="{color}">{label}</text>'
        )
    if plot.get("scatter"):
        # reference diagonal for bound plots
        lo = max(x_lo, y_lo)
        hi = min(x_hi, y_hi)
        if hi > lo:
            out.append(
                f'<line x1="{px(lo):.2f}" y1="{py(lo):.2f}" x2="{px(hi):.2f}" y2="{py(hi):.2f}" '
                f'stroke="#999999" stroke-dasharray="4 3"/>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute the grid, write cells.csv / summary.csv / records.json /
    plot.svg under out_dir/name, and return the bundle."""
    errors = config.validate()
    if errors:
        raise ValueError("invalid config: " + "; ".join(errors))
    grid, run, summarize = _KIND_BUILDERS[config.kind](config)

    results: list = [None] * len(grid)
    failures = []

    def attempt(index):
        try:
            return index, run(index, grid[index]), None
        except Exception as exc:  # cell isolation: record, continue
            return index, None, f"{type(exc).__name__}: {exc}"

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(attempt, range(len(grid))))
    else:
        outcomes = [attempt(i) for i in range(len(grid))]
    for index, row, err in outcomes:
        if err is None:
            results[index] = row
        else:
            failures.append({"cell": list(grid[index]), "index": index, "error": err})

    rows = [r for r in results if r is not None]
    summary, plot = summarize(rows)

    out_base = os.path.join(config.out_dir, config.name)
    os.makedirs(out_base, exist_ok=True)
    digest = config_hash(config)

    columns = list(rows[0].keys()) if rows else ["kind"]
    cells_csv = _csv_text(rows, columns)
    summary_cols = list(summary[0].keys()) if summary else ["cells"]
    summary_csv = _csv_text(summary, summary_cols)
    records = json.dumps(
        {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "config": config.to_dict(),
            "config_hash": digest,
            "cells": rows,
            "summary": summary,
            "failures": failures,
        },
        sort_keys=True,
        indent=1,
    ) + "\n"
    svg = _svg_plot(plot, digest)

    files = {
        "cells.csv": cells_csv,
        "summary.csv": summary_csv,
        "records.json": records,
        "plot.svg": svg,
    }
    for fname, text in files.items():
        _atomic_write(os.path.join(out_base, fname), text)

    return {
        "rows": rows,
        "summary": summary,
        "failures": failures,
        "out_dir": out_base,
        "files": sorted(files),
        "config_hash": digest,
    }


# ---------------------------------------------------------------------------
# single-step commands
# ---------------------------------------------------------------------------


def _cmd_validate(args) -> int:
    errors = validate_config(args.config)
    if errors:
        for e in errors:
            print(e)
        return 1
    print("ok")
    return 0


def _cmd_sweep(args) -> int:
    config, errors = load_config(args.config)
    if errors:
        for e in errors:
            print(e)
        return 1
    if args.out:
        config.out_dir = args.out
    if args.workers:
        config.workers = args.workers
    if args.master_seed is not None:
        config.master_seed = args.master_seed
    bundle = run_experiment(config)
    print(f"wrote {len(bundle['files'])} files to {bundle['out_dir']}")
    for failure in bundle["failures"]:
        print(f"cell {failure['cell']} failed: {failure['error']}")
    return 0 if not bundle["failures"] else 1


def _require_tabular(config: ExperimentConfig, command: str):
    if config.mdp.get("family", "random") == "corridor":
        raise ValueError(f"{command} supports the tabular families only")


def _cmd_gen_mdp(args) -> int:
    config, errors = load_config(args.config)
    if errors:
        for e in errors:
            print(e)
        return 1
    _require_tabular(config, "gen-mdp")
    seed = args.seed if args.seed is not None else config.master_seed
    mdp = _build_mdp(config.mdp, seed)
    out = args.out or config.out_dir
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "mdp.json")
    _atomic_write(path, mdp.to_json())
    print(f"wrote {path}")
    return 0


def _cmd_gen_data(args) -> int:
    config, errors = load_config(args.config)
    if errors:
        for e in errors:
            print(e)
        return 1
    seed = args.seed if args.seed is not None else config.master_seed
    env = _build_mdp(config.mdp, seed)
    c = config.c_list[0]
    if config.mdp.get("family", "random") == "corridor":
        behavior = CorridorBehavior(
            max_step=env.max_step, noise_sigma=config.data.get("noise_sigma", 0.025)
        )
    else:
        behavior = _tabular_behavior(env, config.data, seed)
    horizon = c * max(1, config.data.get("windows_per_trajectory", 4))
    trajs = sample_trajectories(
        env, behavior, n=config.data.get("n_trajectories", 32), horizon=horizon,
        resample_skill_every=c, seed=seed + 1,
    )
    out = args.out or config.out_dir
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "data.csv")
    manifest = os.path.join(out, "manifest.json")
    save_trajectories(trajs, csv_path, manifest)
    print(f"wrote {csv_path}")
    return 0


def _cmd_train_skills(args) -> int:
    config, errors = load_config(args.config)
    if errors:
        for e in errors:
            print(e)
        return 1
    trajs, _ = load_trajectories(args.data, args.manifest)
    c = config.c_list[0]
    ds = segment_low_dataset(trajs, c)
    acts = np.asarray(ds.actions, dtype=np.float64)
    m = 1 if acts.ndim == 2 else acts.shape[2]
    st = np.asarray(ds.states, dtype=np.float64)
    sd = 1 if st.ndim == 2 else st.shape[2]
    out = args.out or config.out_dir
    os.makedirs(out, exist_ok=True)

    fcfg = FlowConfig(c=c, m=m, state_dim=sd,
                      k=config.flow.get("k", 1), hidden=config.flow.get("hidden", 16),
                      kl_weight=config.flow.get("kl_weight", 0.1))
    flow, prior, ftrace = train_flow(ds, fcfg, seed=config.master_seed,
                                     steps=config.flow.get("steps", 250),
                                     lr=config.flow.get("lr", 5e-3))
    _atomic_write(os.path.join(out, "flow.json"), flow_to_json(flow, prior))
    _atomic_write(
        os.path.join(out, "flow_trace.csv"),
        _csv_text([{"step": i, **{k: v[i] for k, v in ftrace.items()}}
                   for i in range(len(ftrace["loss"]))], ["step", "loss", "nll", "kl"]),
    )

    vcfg = VaeConfig(c=c, m=m, state_dim=sd,
                     latent=config.vae.get("latent", 2), hidden=config.vae.get("hidden", 16),
                     kl_weight=config.vae.get("kl_weight", 1.0))
    vae, vtrace = train_vae(ds, vcfg, seed=config.master_seed,
                            steps=config.vae.get("steps", 250),
                            lr=config.vae.get("lr", 5e-3))
    _atomic_write(os.path.join(out, "vae.json"), vae_to_json(vae))
    _atomic_write(
        os.path.join(out, "vae_trace.csv"),
        _csv_text([{"step": i, **{k: v[i] for k, v in vtrace.items()}}
                   for i in range(len(vtrace["loss"]))], ["step", "loss", "recon", "kl"]),
    )
    print(f"wrote flow.json and vae.json to {out}")
    return 0


def _cmd_train_high(args) -> int:
    config, errors = load_config(args.config)
    if errors:
        for e in errors:
            print(e)
        return 1
    with open(args.mdp, "r", encoding="utf-8") as fh:
        mdp = LinearTabularMDP.from_json(fh.read())
    trajs, _ = load_trajectories(args.data, args.manifest)
    c = config.c_list[0]
    D_hi = relabel_high_dataset(trajs, "ground-truth", c, mdp.gamma)
    num_skills = int(np.max(D_hi.z)) + 1
    cfg = IqlConfig(
        mode="tabular", num_states=mdp.num_states, num_skills=num_skills,
        expectile=config.iql.get("expectile", 0.7),
        temperature=config.iql.get("temperature", 3.0),
        target_mix=config.iql.get("target_mix", 0.5),
        lr=config.iql.get("lr", 0.1),
        steps=config.iql.get("steps", 500),
    )
    params, trace = train_iql(D_hi, cfg, seed=config.master_seed)
    out = args.out or config.out_dir
    os.makedirs(out, exist_ok=True)
    _atomic_write(os.path.join(out, "iql.json"), iql_to_json(params))
    _atomic_write(
        os.path.join(out, "iql_trace.csv"),
        _csv_text([{"step": i, **{k: v[i] for k, v in trace.items()}}
                   for i in range(len(trace["J_V"]))],
                  ["step", "J_V", "J_Q", "J_pi", "clip_rate"]),
    )
    print(f"wrote iql.json to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    config, errors = load_config(args.config)
    if errors:
        for e in errors:
            print(e)
        return 1
    from .high_iql import iql_from_json

    with open(args.mdp, "r", encoding="utf-8") as fh:
        mdp = LinearTabularMDP.from_json(fh.read())
    with open(args.iql, "r", encoding="utf-8") as fh:
        params = iql_from_json(fh.read())
    c = config.c_list[0]
    behavior = _tabular_behavior(mdp, config.data, args.seed if args.seed is not None else config.master_seed)
    hyper = build_hyper_mdp(mdp, behavior, c)
    probs = params.policy_probs()
    greedy = PolicyTable.greedy(kind="high", choices=np.argmax(probs, axis=1), width=probs.shape[1])
    j_hat = policy_value(hyper, greedy)
    _, pi_star_beta = exact_value_iteration(hyper)
    j_star_beta = policy_value(hyper, pi_star_beta)
    _, pi_star = exact_value_iteration(mdp)
    report = {
        "j_hat": j_hat,
        "j_star_beta": j_star_beta,
        "j_star": policy_value(mdp, pi_star),
        "subopt_vs_hierarchical_optimum": j_star_beta - j_hat,
    }
    out = args.out or config.out_dir
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "eval.json")
    _atomic_write(path, json.dumps(report, sort_keys=True, indent=1) + "\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hrlab", description="experiment runner for hierarchical offline RL studies"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--out", default=None, help="output directory override")
        for flag, kwargs in extra.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("validate", _cmd_validate)
    add(
        "sweep", _cmd_sweep,
        **{"--workers": dict(type=int, default=None, help="worker thread count"),
           "--master-seed": dict(type=int, default=None, dest="master_seed",
                                 help="master seed override")},
    )
    add("gen-mdp", _cmd_gen_mdp, **{"--seed": dict(type=int, default=None)})
    add("gen-data", _cmd_gen_data, **{"--seed": dict(type=int, default=None)})
    add(
        "train-skills", _cmd_train_skills,
        **{"--data": dict(required=True), "--manifest": dict(required=True)},
    )
    add(
        "train-high", _cmd_train_high,
        **{"--data": dict(required=True), "--manifest": dict(required=True),
           "--mdp": dict(required=True)},
    )
    add(
        "evaluate", _cmd_evaluate,
        **{"--mdp": dict(required=True), "--iql": dict(required=True),
           "--seed": dict(type=int, default=None)},
    )

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
