"""Offline planning loop: guided rollouts, trajectory pruning, MPPI re-weighting.

Each control step shoots N model rollouts whose actions are sampled from the
learned behavior policy with rescaled stds and optionally picked by highest
behavioral Q-value, discards rollouts that hit high ensemble disagreement,
and averages the survivors' action sequences with exponentiated-return
weights. Only the first action of the updated plan is executed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import adm
from .adm import AdmEnsemble
from .data import Dataset
from .errors import ConfigError
from .value import QNetwork

SIGMA_EPS = 1e-6


@dataclass
class PlannerConfig:
    horizon: int = 4
    kappa: float = 3.0
    beta: float = 0.0
    uncertainty_threshold: float = 1.0
    sigma_scale: float = 0.5
    n_rollouts: int = 100
    n_min: Optional[int] = None
    candidates: int = 10
    value_samples: int = 10
    use_max_q: bool = True
    use_pruning: bool = True
    use_value: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.kappa <= 0:
            raise ConfigError("re-weighting factor must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("mixture coefficient must lie in [0, 1]")
        if self.uncertainty_threshold <= 0:
            raise ConfigError("uncertainty threshold must be positive")
        if self.sigma_scale <= 0:
            raise ConfigError("std scaling parameter must be positive")
        if self.n_rollouts < 1:
            raise ConfigError("need at least one rollout")
        if self.candidates < 1 or self.value_samples < 1:
            raise ConfigError("candidate and value-sample counts must be positive")
        if self.n_min is None:
            self.n_min = max(1, int(0.2 * self.n_rollouts))
        if not 1 <= self.n_min <= self.n_rollouts:
            raise ConfigError(
                f"minimum surviving count {self.n_min} must lie in [1, {self.n_rollouts}]"
            )


@dataclass
class ConstraintConfig:
    """Optional planning-time hooks: reward reshaping and pruning penalties.

    All callables are batch-wise: states (n, |S|), actions (n, |A|); the
    reward transform also takes rewards (n,). The rollout penalty must be
    non-negative. ``violation`` is only used for evaluation metrics.
    """

    reward_transform: Optional[Callable] = None
    rollout_penalty: Optional[Callable] = None
    violation: Optional[Callable] = None


NO_CONSTRAINTS = ConstraintConfig()


@dataclass
class Trajectory:
    states: np.ndarray  # (horizon, |S|)
    actions: np.ndarray  # (horizon, |A|)
    ret: float

    @property
    def steps(self):
        return list(zip(self.states, self.actions))


@dataclass
class ModelBundle:
    dynamics: AdmEnsemble
    behavior: AdmEnsemble
    q: Optional[QNetwork] = None


@dataclass
class StepDiagnostics:
    return_mean: float
    return_max: float
    surviving: int
    u_mean: float
    u_max: float


@dataclass
class EpisodeResult:
    ret: float
    steps: int
    violations: int
    diagnostics: list
    violation_flags: list = field(default_factory=list)


def initial_plan(horizon: int, action_dim: int) -> np.ndarray:
    """Zero action plan, per the planner's cold-start convention."""
    return np.zeros((horizon, action_dim), dtype=np.float32)


def scale_std(sigma, sigma_scale: float):
    """Rescale stds so their maximum equals ``sigma_scale``, preserving ratios.

    Degenerate all-but-zero inputs (max below 1e-6) map to a constant
    ``sigma_scale`` vector.
    """
    if sigma_scale <= 0:
        raise ConfigError("std scaling parameter must be positive")
    sigma = np.asarray(sigma, dtype=np.float64)
    top = float(sigma.max())
    if top < SIGMA_EPS:
        return np.full_like(sigma, sigma_scale)
    return sigma * (sigma_scale / top)


def _scale_std_rows(sigma: np.ndarray, sigma_scale: float) -> np.ndarray:
    top = sigma.max(axis=1, keepdims=True)
    out = np.where(
        top < SIGMA_EPS, sigma_scale, sigma * (sigma_scale / np.maximum(top, SIGMA_EPS))
    )
    return out.astype(np.float64)


def guided_action(s, behavior_member, q: Optional[QNetwork], config: PlannerConfig, rng):
    """Sample candidate actions around the behavior policy; keep the Q-argmax.

    With use_max_q off (or no Q-network) a single sample is returned. Ties
    break toward the lowest sample index.
    """
    m = config.candidates if config.use_max_q else 1
    eps = rng.standard_normal((m, behavior_member.output_dim))
    return _guided_from_eps(np.asarray(s)[None, :], behavior_member, q, config, eps[None])[0]


def _guided_from_eps(states, behavior_member, q, config, eps):
    """Vectorized candidate sampling. eps: (n, m, |A|) pre-drawn normals."""
    n, m, a_dim = eps.shape
    mu, sigma = adm.behavior_action_distribution_batch(behavior_member, states)
    sigma = _scale_std_rows(sigma, config.sigma_scale)
    cands = mu[:, None, :] + sigma[:, None, :] * eps
    if not config.use_max_q or q is None or m == 1:
        return cands[:, 0, :].astype(np.float32)
    flat_states = np.repeat(np.asarray(states, dtype=np.float32), m, axis=0)
    qv = q.values(flat_states, cands.reshape(n * m, a_dim)).reshape(n, m)
    best = np.argmax(qv, axis=1)
    return cands[np.arange(n), best].astype(np.float32)


@dataclass
class _RolloutDraws:
    """Pre-drawn randomness for one rollout; fixes the per-stream draw order."""

    behavior_members: np.ndarray  # (H,)
    candidate_eps: np.ndarray  # (H, m_eff, |A|)
    dynamics_members: np.ndarray  # (H,)
    value_member: int
    value_eps: np.ndarray  # (K_Q, |A|)


def _draw_rollout(rng, config: PlannerConfig, action_dim: int, k1: int, k2: int):
    h = config.horizon
    m_eff = config.candidates if config.use_max_q else 1
    behavior_members = np.empty(h, dtype=np.int64)
    candidate_eps = np.empty((h, m_eff, action_dim))
    dynamics_members = np.empty(h, dtype=np.int64)
    for t in range(h):
        behavior_members[t] = rng.integers(k2)
        candidate_eps[t] = rng.standard_normal((m_eff, action_dim))
        dynamics_members[t] = rng.integers(k1)
    value_member = int(rng.integers(k2)) if config.use_value else 0
    value_eps = (
        rng.standard_normal((config.value_samples, action_dim))
        if config.use_value
        else np.zeros((config.value_samples, action_dim))
    )
    return _RolloutDraws(behavior_members, candidate_eps, dynamics_members, value_member, value_eps)


def _rollout_batch(
    start_states: np.ndarray,
    bundle: ModelBundle,
    plan: np.ndarray,
    config: PlannerConfig,
    constraints: ConstraintConfig,
    draws: Sequence[_RolloutDraws],
):
    """Roll ``len(draws)`` trajectories in lockstep through the frozen models.

    Returns (states (n,H,|S|), actions (n,H,|A|), returns (n,), uncertainty (n,H)).
    Rollouts that produce a non-finite quantity are frozen in place and carry
    infinite uncertainty from that step on; their returns stay finite.
    """
    n = len(draws)
    h = config.horizon
    s_dim = bundle.dynamics.output_dim - 1
    a_dim = bundle.behavior.output_dim
    plan = np.asarray(plan, dtype=np.float32)
    if plan.shape != (h, a_dim):
        raise ValueError(
            f"plan shape {plan.shape} does not match (horizon, action dim) ({h}, {a_dim})"
        )
    states = np.zeros((n, h, s_dim), dtype=np.float32)
    actions = np.zeros((n, h, a_dim), dtype=np.float32)
    returns = np.zeros(n, dtype=np.float64)
    uncertainty = np.zeros((n, h), dtype=np.float64)
    alive = np.ones(n, dtype=bool)

    b_members = np.stack([d.behavior_members for d in draws])  # (n, H)
    d_members = np.stack([d.dynamics_members for d in draws])
    cand_eps = np.stack([d.candidate_eps for d in draws])  # (n, H, m, |A|)

    current = np.array(start_states, dtype=np.float32)
    for t in range(h):
        a_hat = np.zeros((n, a_dim), dtype=np.float32)
        for k in range(bundle.behavior.k):
            rows = np.flatnonzero(alive & (b_members[:, t] == k))
            if rows.size == 0:
                continue
            a_hat[rows] = _guided_from_eps(
                current[rows],
                bundle.behavior.members[k],
                bundle.q,
                config,
                cand_eps[rows, t],
            )
        prev = plan[t + 1] if t + 1 < h else plan[h - 1]
        a_mix = ((1.0 - config.beta) * a_hat + config.beta * prev).astype(np.float32)
        bad = ~np.isfinite(a_mix).all(axis=1)
        if bad.any():
            a_mix[bad] = 0.0
            alive &= ~bad
        states[:, t] = current
        actions[:, t] = a_mix
        uncertainty[~alive, t] = np.inf

        live = np.flatnonzero(alive)
        if live.size:
            preds_n = adm.dynamics_mode_all(bundle.dynamics, current[live], a_mix[live])
            disc_t = adm.disc_from_predictions(preds_n)
            preds = (
                preds_n * bundle.dynamics.stats.o_std + bundle.dynamics.stats.o_mean
            )
            reward = preds[:, :, 0].mean(axis=0)
            if constraints.reward_transform is not None:
                reward = np.asarray(
                    constraints.reward_transform(current[live], a_mix[live], reward),
                    dtype=np.float64,
                )
            next_states = preds[d_members[live, t], np.arange(live.size), 1:]
            u_row = disc_t
            if constraints.rollout_penalty is not None:
                u_row = u_row + np.asarray(
                    constraints.rollout_penalty(current[live], a_mix[live]), dtype=np.float64
                )
            ok = (
                np.isfinite(next_states).all(axis=1)
                & np.isfinite(reward)
                & np.isfinite(u_row)
            )
            uncertainty[live, t] = np.where(ok, u_row, np.inf)
            returns[live[ok]] += reward[ok]
            current = current.copy()
            current[live[ok]] = next_states[ok].astype(np.float32)
            alive[live[~ok]] = False

    if config.use_value and bundle.q is not None:
        v_members = np.array([d.value_member for d in draws])
        v_eps = np.stack([d.value_eps for d in draws])  # (n, K_Q, |A|)
        k_q = config.value_samples
        for k in range(bundle.behavior.k):
            rows = np.flatnonzero(alive & (v_members == k))
            if rows.size == 0:
                continue
            member = bundle.behavior.members[k]
            s_h = current[rows]
            x_n = member.normalize_x(s_h)
            x_rep = np.repeat(x_n, k_q, axis=0)
            sampled = member.denormalize_o(
                member.sample_normalized(x_rep, v_eps[rows].reshape(rows.size * k_q, a_dim))
            )
            qv = bundle.q.values(np.repeat(s_h, k_q, axis=0), sampled)
            v = qv.reshape(rows.size, k_q).mean(axis=1)
            good = np.isfinite(v)
            returns[rows[good]] += v[good]
    return states, actions, returns, uncertainty


def rollout(
    start_state,
    bundle: ModelBundle,
    plan: np.ndarray,
    config: PlannerConfig,
    constraints: ConstraintConfig,
    rng,
):
    """Roll a single guided trajectory; returns (Trajectory, uncertainty row)."""
    draws = _draw_rollout(
        rng, config, bundle.behavior.output_dim, bundle.dynamics.k, bundle.behavior.k
    )
    states, actions, returns, u = _rollout_batch(
        np.asarray(start_state, dtype=np.float32)[None, :],
        bundle,
        plan,
        config,
        constraints,
        [draws],
    )
    return Trajectory(states[0], actions[0], float(returns[0])), u[0]


def prune_indices(u: np.ndarray, threshold: float, n_min: int) -> np.ndarray:
    """Indices of trajectories kept by the pruning rule, in ascending order.

    Keeps every trajectory whose uncertainty stays below the threshold at all
    steps; if fewer than ``n_min`` qualify, backfills with the lowest
    cumulative-uncertainty rejects (ties toward the lower index).
    """
    u = np.asarray(u)
    n = u.shape[0]
    if n < 1:
        raise ConfigError("need at least one trajectory")
    if not 1 <= n_min <= n:
        raise ConfigError(f"minimum count {n_min} out of range for {n} trajectories")
    under = np.all(u < threshold, axis=1)
    kept = np.flatnonzero(under)
    if kept.size >= n_min:
        return kept
    rejected = np.flatnonzero(~under)
    totals = u[rejected].sum(axis=1)
    order = np.lexsort((rejected, totals))
    extra = rejected[order[: n_min - kept.size]]
    return np.sort(np.concatenate([kept, extra]))


def traj_prune(trajectories: Sequence[Trajectory], u: np.ndarray, threshold: float, n_min: int):
    """Refined trajectory list per the pruning rule."""
    keep = prune_indices(u, threshold, n_min)
    return [trajectories[i] for i in keep]


def mppi_update(trajectories, returns, kappa: float) -> np.ndarray:
    """Per-step action average weighted by exponentiated returns.

    The max return is subtracted inside the exponent for numerical
    stability, which leaves the weights unchanged.
    """
    if isinstance(trajectories, np.ndarray):
        acts = np.asarray(trajectories, dtype=np.float64)
    else:
        if len(trajectories) == 0:
            raise ValueError("empty trajectory set")
        acts = np.stack([t.actions for t in trajectories]).astype(np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    if acts.shape[0] == 0:
        raise ValueError("empty trajectory set")
    if returns.shape[0] != acts.shape[0]:
        raise ValueError("returns and trajectories disagree in length")
    w = np.exp(kappa * (returns - returns.max()))
    w /= w.sum()
    return np.einsum("n,nha->ha", w, acts).astype(np.float32)


def plan_step(
    state,
    bundle: ModelBundle,
    config: PlannerConfig,
    constraints: ConstraintConfig,
    plan: np.ndarray,
    seed,
):
    """One MPC step: shoot N rollouts, prune, re-weight; execute the plan head.

    ``seed`` (an int or tuple of ints) determines every random draw; rollout
    n uses its own stream keyed by (seed..., n), so results do not depend on
    evaluation order. Returns (action, updated plan, diagnostics).
    """
    seed_key = [int(v) for v in (seed if isinstance(seed, (tuple, list)) else (seed,))]
    draws = [
        _draw_rollout(
            np.random.default_rng(seed_key + [n]),
            config,
            bundle.behavior.output_dim,
            bundle.dynamics.k,
            bundle.behavior.k,
        )
        for n in range(config.n_rollouts)
    ]
    starts = np.broadcast_to(
        np.asarray(state, dtype=np.float32), (config.n_rollouts, len(state))
    )
    states, actions, returns, u = _rollout_batch(
        starts, bundle, plan, config, constraints, draws
    )
    if config.use_pruning:
        keep = prune_indices(u, config.uncertainty_threshold, config.n_min)
    else:
        keep = np.arange(config.n_rollouts)
    new_plan = mppi_update(actions[keep], returns[keep], config.kappa)
    finite_u = u[np.isfinite(u)]
    diag = StepDiagnostics(
        return_mean=float(returns.mean()),
        return_max=float(returns.max()),
        surviving=int(keep.size),
        u_mean=float(finite_u.mean()) if finite_u.size else math.inf,
        u_max=float(u.max()),
        )
    return new_plan[0].copy(), new_plan, diag


def run_episode(
    env,
    bundle: ModelBundle,
    config: PlannerConfig,
    constraints: ConstraintConfig = NO_CONSTRAINTS,
    seed: int = 0,
) -> EpisodeResult:
    """Closed-loop control of ``env``, re-planning every step.

    Accumulates the true environment reward; violations are counted with the
    constraint predicate (falling back to the environment's own) evaluated at
    each (state, executed action) pair.
    """
    if env.spec.state_dim != bundle.dynamics.output_dim - 1:
        raise ConfigError("environment and dynamics model disagree on state dim")
    if env.spec.action_dim != bundle.behavior.output_dim:
        raise ConfigError("environment and behavior model disagree on action dim")
    violation = constraints.violation or getattr(env, "violation", None)
    seed_key = tuple(int(v) for v in (seed if isinstance(seed, (tuple, list)) else (seed,)))
    s = env.reset(seed=[*seed_key, 0])
    plan = initial_plan(config.horizon, env.spec.action_dim)
    total = 0.0
    diagnostics = []
    flags = []
    steps = 0
    done = False
    while not done:
        a, plan, diag = plan_step(s, bundle, config, constraints, plan, (*seed_key, steps))
        diagnostics.append(diag)
        flags.append(bool(violation(s, a)) if violation is not None else False)
        s, r, done = env.step(a)
        total += r
        steps += 1
    return EpisodeResult(
        ret=total,
        steps=steps,
        violations=sum(flags),
        diagnostics=diagnostics,
        violation_flags=flags,
    )


def uncertainty_threshold_from_data(
    dynamics: AdmEnsemble, dataset: Dataset, percentile: float = 85.0, max_samples: int = 4096
) -> float:
    """Percentile of the ensemble discrepancy over dataset state-action pairs.

    This is the data-driven rule for picking the pruning threshold.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot calibrate a threshold on an empty dataset")
    idx = np.arange(n) if n <= max_samples else np.linspace(0, n - 1, max_samples).astype(int)
    preds = adm.dynamics_mode_all(dynamics, dataset.states[idx], dataset.actions[idx])
    d = adm.disc_from_predictions(preds)
    return float(np.percentile(d, percentile))


def diagnostics_csv(result: EpisodeResult) -> str:
    """Per-step planning diagnostics as CSV text."""
    lines = ["step,return_mean,return_max,surviving,u_mean,u_max,violation_flag"]
    for t, (diag, flag) in enumerate(zip(result.diagnostics, result.violation_flags)):
        lines.append(
            f"{t},{diag.return_mean:.6f},{diag.return_max:.6f},{diag.surviving},"
            f"{diag.u_mean:.6f},{diag.u_max:.6f},{int(flag)}"
        )
    return "\n".join(lines) + "\n"
