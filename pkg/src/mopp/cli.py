"""Command-line pipeline: data generation, model training, evaluation, ablations."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import adm, data, envs, planner, value
from .config import RunConfig, default_config_text, load_config
from .errors import ConfigError, MoppError


def _info(args, message: str) -> None:
    if not args.quiet:
        print(message, flush=True)


def _resolve(out_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(out_dir, path)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seeds = (args.seed,)
        cfg.data_seed = args.seed
        cfg.dynamics_seed = args.seed + 1
        cfg.behavior_seed = args.seed + 2
        cfg.fqe_seed = args.seed + 3
    return cfg


def _make_env(cfg: RunConfig):
    return envs.make_env(cfg.env, v_cap=cfg.v_cap)


def _require(path: str, hint: str) -> None:
    if not os.path.exists(path):
        raise ConfigError(f"missing artifact {path}; {hint}")


def _adm_config(cfg: RunConfig, members: int) -> adm.AdmConfig:
    return adm.AdmConfig(
        members=members,
        steps=cfg.adm_steps,
        batch_size=cfg.adm_batch,
        learning_rate=cfg.adm_lr,
        embed_width=cfg.adm_embed,
        head_hidden=cfg.adm_head_hidden,
        activation=cfg.adm_activation,
    )


def _reward_transform(cfg: RunConfig):
    """Planning/FQE reward reshaping selected by the constraint mode."""
    cap = cfg.v_cap if cfg.v_cap is not None else envs.DEFAULT_V_CAP
    if cfg.constraint == "height_bonus":
        return envs.height_bonus_reward(alpha=cfg.alpha_r, weight=cfg.constraint_weight)
    if cfg.constraint == "velocity_penalty":
        return envs.velocity_penalty_reward(
            v_cap=cap, alpha=cfg.alpha_c, weight=cfg.constraint_weight
        )
    return None


def _constraints(cfg: RunConfig) -> planner.ConstraintConfig:
    cap = cfg.v_cap if cfg.v_cap is not None else envs.DEFAULT_V_CAP
    penalty = None
    if cfg.constraint == "velocity_rollout":
        penalty = envs.velocity_rollout_penalty(v_cap=cap, weight=cfg.constraint_weight)
    return planner.ConstraintConfig(
        reward_transform=_reward_transform(cfg), rollout_penalty=penalty
    )


def _planner_config(cfg: RunConfig, threshold: float) -> planner.PlannerConfig:
    return planner.PlannerConfig(
        horizon=cfg.horizon,
        kappa=cfg.kappa,
        beta=cfg.beta,
        uncertainty_threshold=threshold,
        sigma_scale=cfg.sigma_m,
        n_rollouts=cfg.n_rollouts,
        n_min=cfg.n_min,
        candidates=cfg.candidates,
        value_samples=cfg.k_q,
        use_max_q=cfg.use_max_q,
        use_pruning=cfg.use_pruning,
        use_value=cfg.use_value,
    )


def _load_bundle(cfg: RunConfig, out_dir: str):
    dyn_dir = _resolve(out_dir, cfg.dynamics_dir)
    beh_dir = _resolve(out_dir, cfg.behavior_dir)
    q_dir = _resolve(out_dir, cfg.q_dir)
    _require(dyn_dir, "run `mopp train-dynamics` first")
    _require(beh_dir, "run `mopp train-behavior` first")
    dynamics = adm.load_ensemble(dyn_dir)
    behavior = adm.load_ensemble(beh_dir)
    q = None
    if cfg.use_max_q or cfg.use_value:
        _require(q_dir, "run `mopp train-q` first (or disable use_max_q/use_value)")
        q = value.load_q(q_dir)
    return planner.ModelBundle(dynamics=dynamics, behavior=behavior, q=q)


def _resolve_threshold(cfg: RunConfig, dynamics, dataset) -> float:
    if cfg.threshold is not None:
        return cfg.threshold
    auto = planner.uncertainty_threshold_from_data(dynamics, dataset, percentile=85.0)
    return max(auto, 1e-12)  # degenerate ensembles can agree exactly


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    env = _make_env(cfg)
    policy = envs.scripted_policy(cfg.data_policy, env, seed=cfg.data_seed + 1)
    dataset = data.generate_dataset(env, policy, cfg.data_episodes, seed=cfg.data_seed)
    path = _resolve(args.out, cfg.dataset)
    data.save_dataset(dataset, path)
    _info(
        args,
        f"wrote {len(dataset)} transitions ({dataset.n_episodes} episodes, "
        f"mean return {dataset.stats.episode_returns.mean():.2f}) to {path}",
    )
    return 0


def _load_dataset(cfg: RunConfig, out_dir: str) -> data.Dataset:
    path = _resolve(out_dir, cfg.dataset)
    _require(path, "run `mopp gen-data` first")
    return data.load_dataset(path)


def cmd_train_dynamics(args) -> int:
    cfg = _load_run_config(args)
    dataset = _load_dataset(cfg, args.out)
    t0 = time.perf_counter()
    ensemble = adm.adm_train(dataset, "dynamics", _adm_config(cfg, cfg.k1), seed=cfg.dynamics_seed)
    out = _resolve(args.out, cfg.dynamics_dir)
    adm.save_ensemble(ensemble, out)
    _info(args, f"trained {cfg.k1} dynamics members in {time.perf_counter() - t0:.0f}s -> {out}")
    return 0


def cmd_train_behavior(args) -> int:
    cfg = _load_run_config(args)
    dataset = _load_dataset(cfg, args.out)
    t0 = time.perf_counter()
    ensemble = adm.adm_train(dataset, "behavior", _adm_config(cfg, cfg.k2), seed=cfg.behavior_seed)
    out = _resolve(args.out, cfg.behavior_dir)
    adm.save_ensemble(ensemble, out)
    _info(args, f"trained {cfg.k2} behavior members in {time.perf_counter() - t0:.0f}s -> {out}")
    return 0


def cmd_train_q(args) -> int:
    cfg = _load_run_config(args)
    dataset = _load_dataset(cfg, args.out)
    fqe_cfg = value.FqeConfig(
        gamma=cfg.fqe_gamma,
        iterations=cfg.fqe_iterations,
        steps_per_iteration=cfg.fqe_steps,
        batch_size=cfg.fqe_batch,
        learning_rate=cfg.fqe_lr,
        hidden=cfg.fqe_hidden,
        reward_transform=_reward_transform(cfg),
    )
    t0 = time.perf_counter()
    q = value.fqe_train(dataset, fqe_cfg, seed=cfg.fqe_seed)
    out = _resolve(args.out, cfg.q_dir)
    value.save_q(q, out)
    tag = f" (reward transform: {cfg.constraint})" if cfg.constraint != "none" else ""
    _info(args, f"fitted Q in {time.perf_counter() - t0:.0f}s{tag} -> {out}")
    return 0


def _format_row(values) -> str:
    out = []
    for v in values:
        if isinstance(v, float):
            out.append(f"{v:.6f}")
        else:
            out.append(str(v))
    return ",".join(out)


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    dataset = _load_dataset(cfg, args.out)
    bundle = _load_bundle(cfg, args.out)
    threshold = _resolve_threshold(cfg, bundle.dynamics, dataset)
    pcfg = _planner_config(cfg, threshold)
    constraints = _constraints(cfg)
    _info(args, f"evaluating with uncertainty threshold {threshold:.6g}")

    rows = []
    failed = False
    per_seed = {}
    first_episode_diag = None
    for seed in cfg.seeds:
        outcomes = []
        for ep in range(cfg.episodes):
            env = _make_env(cfg)
            try:
                res = planner.run_episode(env, bundle, pcfg, constraints=constraints, seed=(seed, ep))
                rows.append((seed, ep, float(res.ret), res.steps, res.violations, "ok"))
                outcomes.append(res)
                if first_episode_diag is None:
                    first_episode_diag = planner.diagnostics_csv(res)
                _info(args, f"seed {seed} episode {ep}: return {res.ret:.2f} violations {res.violations}")
            except MoppError as err:
                failed = True
                rows.append((seed, ep, "", "", "", "failed"))
                print(f"seed {seed} episode {ep} failed: {err}", file=sys.stderr)
        if outcomes:
            per_seed[seed] = (
                float(np.mean([r.ret for r in outcomes])),
                float(np.mean([r.steps for r in outcomes])),
                float(np.mean([r.violations for r in outcomes])),
            )

    header = "seed,episode,return,steps,violations"
    lines = []
    if failed:
        header += ",status"
        for row in rows:
            lines.append(_format_row(row))
    else:
        for row in rows:
            lines.append(_format_row(row[:-1]))
    if per_seed:
        means = np.array(list(per_seed.values()))
        ret_mean, ret_std = float(means[:, 0].mean()), float(means[:, 0].std())
        steps_mean = float(means[:, 1].mean())
        viol_mean, viol_std = float(means[:, 2].mean()), float(means[:, 2].std())
        agg = [
            "aggregate",
            "",
            f"{ret_mean:.6f}±{ret_std:.6f}",
            f"{steps_mean:.6f}",
            f"{viol_mean:.6f}±{viol_std:.6f}",
        ]
        if failed:
            agg.append("partial")
        lines.append(",".join(agg))

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "results.csv")
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header + "\n")
        f.write("\n".join(lines) + "\n")
    if first_episode_diag is not None:
        with open(os.path.join(args.out, "diagnostics.csv"), "w", encoding="utf-8", newline="\n") as f:
            f.write(first_episode_diag)
    _info(args, f"wrote {out_path}")
    return 1 if failed else 0


_VARIANT_TOGGLES = {
    "full": {},
    "noMQ": {"use_max_q": False},
    "noP": {"use_pruning": False},
    "noV": {"use_value": False},
}


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    dataset = _load_dataset(cfg, args.out)
    bundle = _load_bundle(cfg, args.out)
    base_threshold = _resolve_threshold(cfg, bundle.dynamics, dataset)
    constraints = _constraints(cfg)

    lines = ["axis,value,variant,return_mean,return_std,violations_mean"]
    failed = False
    for axis_value in cfg.ablate_values:
        for variant in cfg.ablate_variants:
            pcfg_kwargs = dict(
                horizon=cfg.horizon,
                kappa=cfg.kappa,
                beta=cfg.beta,
                uncertainty_threshold=base_threshold,
                sigma_scale=cfg.sigma_m,
                n_rollouts=cfg.n_rollouts,
                n_min=cfg.n_min,
                candidates=cfg.candidates,
                value_samples=cfg.k_q,
                use_max_q=cfg.use_max_q,
                use_pruning=cfg.use_pruning,
                use_value=cfg.use_value,
            )
            if cfg.ablate_axis == "sigma_m":
                pcfg_kwargs["sigma_scale"] = axis_value
            elif cfg.ablate_axis == "h":
                pcfg_kwargs["horizon"] = int(axis_value)
            else:
                pcfg_kwargs["uncertainty_threshold"] = axis_value
            pcfg_kwargs.update(_VARIANT_TOGGLES[variant])
            pcfg = planner.PlannerConfig(**pcfg_kwargs)
            rets, viols = [], []
            try:
                for seed in cfg.seeds:
                    for ep in range(cfg.episodes):
                        env = _make_env(cfg)
                        res = planner.run_episode(
                            env, bundle, pcfg, constraints=constraints, seed=(seed, ep)
                        )
                        rets.append(res.ret)
                        viols.append(res.violations)
                lines.append(
                    f"{cfg.ablate_axis},{axis_value},{variant},"
                    f"{np.mean(rets):.6f},{np.std(rets):.6f},{np.mean(viols):.6f}"
                )
                _info(args, f"{cfg.ablate_axis}={axis_value} {variant}: {np.mean(rets):.2f}")
            except MoppError as err:
                failed = True
                lines.append(f"{cfg.ablate_axis},{axis_value},{variant},,,")
                print(f"cell {axis_value}/{variant} failed: {err}", file=sys.stderr)

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "ablation.csv")
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    _info(args, f"wrote {out_path}")
    return 1 if failed else 0


def cmd_print_config(args) -> int:
    print(default_config_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="config file (flat key = value sections)")
    common.add_argument("--seed", type=int, metavar="N", help="override every seed in the config")
    common.add_argument("--out", metavar="DIR", default="runs", help="artifact directory (default: runs)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(
        prog="mopp",
        description="Offline planning pipeline: learn models from a fixed dataset, plan with pruning and MPPI.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="roll scripted-policy episodes into a dataset file").set_defaults(fn=cmd_gen_data)
    sub.add_parser("train-dynamics", parents=[common], help="fit the dynamics ensemble").set_defaults(fn=cmd_train_dynamics)
    sub.add_parser("train-behavior", parents=[common], help="fit the behavior ensemble").set_defaults(fn=cmd_train_behavior)
    sub.add_parser("train-q", parents=[common], help="fit the behavioral Q-function (honors the constraint reward transform)").set_defaults(fn=cmd_train_q)
    sub.add_parser("evaluate", parents=[common], help="run planning episodes and write results.csv").set_defaults(fn=cmd_evaluate)
    sub.add_parser("ablate", parents=[common], help="sweep one axis with component toggles into ablation.csv").set_defaults(fn=cmd_ablate)
    sub.add_parser("print-config", parents=[common], help="print a config file with every default").set_defaults(fn=cmd_print_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except MoppError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
