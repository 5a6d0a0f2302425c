"""PPO and PPO with deep mutual learning on rendered tabular MDPs.

Each iteration every worker draws a rendering function from the training
split, starts from ``rho`` and runs ``horizon`` steps; the value of the last
observation is the bootstrap. Advantages come from GAE, and each agent is
updated with Adam on shuffled minibatches. In ``dml`` mode two agents
collect their own data and each adds ``alpha * KL(peer || self)`` on its own
minibatch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .bounds import make_pair
from .mdp import TabularMdp, _inverse_cdf
from .policy import (
    LossSpec,
    Minibatch,
    ObservationPolicy,
    action_log_probs,
    entropy_rows,
    forward,
    init_policy,
    kl_rows,
    loss_and_grad,
    peer_kl_grad,
)
from .rendering import RenderingFamily, lift_all, rollout_returns
from .seeding import make_rng, seed_tree

__all__ = [
    "PpoConfig",
    "Trajectory",
    "Adam",
    "TrainResult",
    "METRIC_COLUMNS",
    "gae_advantages",
    "ppo_loss",
    "dml_loss",
    "collect_trajectories",
    "exact_returns",
    "train",
]


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    kl_weight: float = 1.0
    update_epochs: int = 3
    minibatches: int = 8
    horizon: int = 64
    n_workers: int = 8
    learning_rate: float = 5e-4
    total_steps: int = 2_000_000
    seed: int = 0
    arch: str = "one-hidden-mlp"
    hidden_dim: int = 32
    init_std: float = 0.1
    normalize_advantages: bool = True
    kl_grad_mode: str = "stop"
    log_every: int = 10
    eval_episodes: int = 64

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.kl_grad_mode not in ("stop", "joint"):
            raise ValueError("kl_grad_mode must be 'stop' or 'joint'")
        if min(self.update_epochs, self.minibatches, self.horizon, self.n_workers, self.log_every) < 1:
            raise ValueError("epochs, minibatches, horizon, n_workers and log_every must be >= 1")

    @property
    def steps_per_iteration(self) -> int:
        return self.horizon * self.n_workers

    def loss_spec(self, kl_weight: float | None = None) -> LossSpec:
        return LossSpec(
            clip_eps=self.clip_eps,
            value_coef=self.value_coef,
            entropy_coef=self.entropy_coef,
            kl_weight=self.kl_weight if kl_weight is None else kl_weight,
            normalize_advantages=self.normalize_advantages,
        )

    @classmethod
    def from_mapping(cls, values: dict) -> "PpoConfig":
        """Build from string or typed values; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            kind = type(getattr(cls(), key))
            if isinstance(raw, str):
                if kind is bool:
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
                    raw = raw.lower() in ("true", "1", "yes")
                elif kind is int:
                    raw = int(float(raw)) if "e" in raw.lower() else int(raw)
                else:
                    raw = kind(raw)
            kwargs[key] = raw
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trajectory:
    """One worker's rollout under a single rendering function."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_prob_old: np.ndarray
    value_old: np.ndarray
    f_index: int
    bootstrap_value: float

    def __len__(self):
        return len(self.rewards)


def gae_advantages(traj: Trajectory, gamma: float, lam: float):
    """GAE advantages and returns ``R = V_old + A``."""
    values = np.asarray(traj.value_old, dtype=np.float64)
    rewards = np.asarray(traj.rewards, dtype=np.float64)
    if len(rewards) == 0:
        raise ValueError("empty trajectory")
    next_values = np.append(values[1:], traj.bootstrap_value)
    deltas = rewards + gamma * next_values - values
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        running = deltas[t] + gamma * lam * running
        adv[t] = running
    return adv, values + adv


def ppo_loss(policy: ObservationPolicy, minibatch: Minibatch, config: PpoConfig):
    """``L = L_p + c1 L_v - c2 L_e``; returns ``(loss, {L_p, L_v, L_e})``."""
    batch = Minibatch(minibatch.obs, minibatch.actions, minibatch.log_prob_old,
                      minibatch.advantages, minibatch.returns)
    loss, comps, _ = loss_and_grad(policy, config.loss_spec(kl_weight=0.0), batch)
    return loss, {k: comps[k] for k in ("L_p", "L_v", "L_e")}


def dml_loss(policy: ObservationPolicy, peer_probs: np.ndarray, minibatch: Minibatch,
             config: PpoConfig) -> float:
    """``L_RL + alpha * mean KL(peer || policy)`` on the agent's own minibatch."""
    batch = Minibatch(minibatch.obs, minibatch.actions, minibatch.log_prob_old,
                      minibatch.advantages, minibatch.returns, peer_probs)
    return loss_and_grad(policy, config.loss_spec(), batch)[0]


class Adam:
    """Adam with bias correction; ``step`` updates ``params`` in place."""

    def __init__(self, n_params: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def collect_trajectories(policy: ObservationPolicy, mdp: TabularMdp, family: RenderingFamily,
                         horizon: int, n_workers: int, rng: np.random.Generator) -> list:
    """One rollout per worker, each under its own rendering function drawn
    from the training split."""
    weights = family.split_weights("train")
    tables = family.tables()
    p_cdf = np.cumsum(mdp.transition, axis=2)
    f_idx = _inverse_cdf(np.cumsum(weights)[None, :], rng.random(n_workers))
    s = _inverse_cdf(np.cumsum(mdp.rho)[None, :], rng.random(n_workers))
    obs_buf = np.zeros((horizon, n_workers, family.obs_dim))
    act_buf = np.zeros((horizon, n_workers), dtype=np.int64)
    rew_buf = np.zeros((horizon, n_workers))
    logp_buf = np.zeros((horizon, n_workers))
    val_buf = np.zeros((horizon, n_workers))
    workers = np.arange(n_workers)
    for t in range(horizon):
        obs = tables[f_idx, s]
        probs, value, _ = forward(policy, obs)
        a = _inverse_cdf(np.cumsum(probs, axis=1), rng.random(n_workers))
        obs_buf[t], act_buf[t], val_buf[t] = obs, a, value
        logp_buf[t] = np.log(probs[workers, a])
        rew_buf[t] = mdp.reward[s, a]
        s = _inverse_cdf(p_cdf[s, a], rng.random(n_workers))
    _, boot, _ = forward(policy, tables[f_idx, s])
    return [
        Trajectory(obs_buf[:, w], act_buf[:, w], rew_buf[:, w], logp_buf[:, w], val_buf[:, w],
                   int(f_idx[w]), float(boot[w]))
        for w in range(n_workers)
    ]


def _flatten(trajs: list, config: PpoConfig) -> dict:
    adv, ret = zip(*(gae_advantages(t, config.gamma, config.gae_lambda) for t in trajs))
    return {
        "obs": np.concatenate([t.obs for t in trajs]),
        "actions": np.concatenate([t.actions for t in trajs]),
        "log_prob_old": np.concatenate([t.log_prob_old for t in trajs]),
        "advantages": np.concatenate(adv),
        "returns": np.concatenate(ret),
    }


def exact_returns(policy: ObservationPolicy, family: RenderingFamily, mdp: TabularMdp) -> tuple[float, float]:
    """Exact ``(eta, zeta)`` of an observation policy by lifting and DP."""
    lifted = lift_all(policy, family)
    pair = make_pair(mdp, lifted, lifted)
    return float(family.split_weights("train") @ pair.returns), float(family.split_weights("all") @ pair.returns)


METRIC_COLUMNS = (
    "iteration", "steps", "agent", "train_return_emp", "train_return_se", "eval_return_emp",
    "eval_return_se", "eta_exact", "zeta_exact", "kl_between_agents", "entropy",
    "loss_total", "loss_policy", "loss_value", "loss_entropy", "loss_kl",
)


@dataclass
class TrainResult:
    agents: list
    metrics: list = field(default_factory=list)
    param_trace: list | None = None


def _empirical(policy, mdp, family, split, n, seed):
    if family.split_weights(split).sum() == 0:
        return math.nan, math.nan
    r = rollout_returns(mdp, family, policy, n, seed, split=split)
    return float(r.mean()), float(r.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan


def train(mdp: TabularMdp, family: RenderingFamily, config: PpoConfig, mode: str = "baseline",
          init_agents: list | None = None, grad_mask: np.ndarray | None = None,
          record_params: bool = False, evaluate: bool = True) -> TrainResult:
    """Train one PPO agent (``baseline``) or two mutually learning agents (``dml``).

    ``init_agents`` overrides the seeded initialization; ``grad_mask`` marks
    parameters whose gradient is zeroed (frozen). Both agents take their
    optimizer step after both gradients are computed.
    """
    if mode not in ("baseline", "dml"):
        raise ValueError("mode must be 'baseline' or 'dml'")
    if not family.train_mask.any():
        raise ValueError("training split is empty")
    n_agents = 2 if mode == "dml" else 1
    if init_agents is None:
        agents = [
            init_policy(config.arch, family.obs_dim, mdp.n_actions, config.hidden_dim,
                        seed=seed_tree(config.seed, "agent", i, "init"), std=config.init_std)
            for i in range(n_agents)
        ]
    else:
        agents = [a.copy() for a in init_agents[:n_agents]]
        if len(agents) != n_agents:
            raise ValueError(f"{mode} mode needs {n_agents} initial agents")
    rollout_rngs = [make_rng(seed_tree(config.seed, "agent", i, "rollout")) for i in range(n_agents)]
    batch_rngs = [make_rng(seed_tree(config.seed, "agent", i, "minibatch")) for i in range(n_agents)]
    optimizers = [Adam(a.n_params, config.learning_rate) for a in agents]
    alpha = config.kl_weight if mode == "dml" else 0.0
    spec = config.loss_spec(kl_weight=alpha)
    joint = mode == "dml" and config.kl_grad_mode == "joint"

    result = TrainResult(agents=agents, param_trace=[] if record_params else None)
    if record_params:
        result.param_trace.append([a.params.copy() for a in agents])
    n_iters = config.total_steps // config.steps_per_iteration
    for it in range(n_iters):
        data = [_flatten(collect_trajectories(a, mdp, family, config.horizon, config.n_workers, rng), config)
                for a, rng in zip(agents, rollout_rngs)]
        n = len(data[0]["actions"])
        comp_acc = [dict(loss=0.0, L_p=0.0, L_v=0.0, L_e=0.0, L_kl=0.0) for _ in agents]
        for _ in range(config.update_epochs):
            snapshots = [a.copy() for a in agents]
            perms = [rng.permutation(n) for rng in batch_rngs]
            comp_acc = [dict(loss=0.0, L_p=0.0, L_v=0.0, L_e=0.0, L_kl=0.0) for _ in agents]
            for k in range(config.minibatches):
                grads, batches, own_probs = [], [], []
                for i, agent in enumerate(agents):
                    idx = np.array_split(perms[i], config.minibatches)[k]
                    d = data[i]
                    peer_probs = None
                    if mode == "dml":
                        peer = agents[1 - i] if joint else snapshots[1 - i]
                        peer_probs = forward(peer, d["obs"][idx])[0]
                    mb = Minibatch(d["obs"][idx], d["actions"][idx], d["log_prob_old"][idx],
                                   d["advantages"][idx], d["returns"][idx], peer_probs)
                    loss, comps, grad = loss_and_grad(agent, spec, mb)
                    grads.append(grad)
                    batches.append(mb)
                    own_probs.append(forward(agent, mb.obs)[0] if joint else None)
                    acc = comp_acc[i]
                    acc["loss"] += loss / config.minibatches
                    for key in ("L_p", "L_v", "L_e", "L_kl"):
                        acc[key] += comps[key] / config.minibatches
                if joint:
                    # KL(agent_j || agent_i) on agent i's batch also depends on agent j
                    extra = [peer_kl_grad(agents[1 - i], batches[i].obs, own_probs[i], alpha)
                             for i in range(2)]
                    grads = [grads[0] + extra[1], grads[1] + extra[0]]
                for agent, opt, grad in zip(agents, optimizers, grads):
                    if grad_mask is not None:
                        grad = np.where(grad_mask, 0.0, grad)
                    opt.step(agent.params, grad)
        if record_params:
            result.param_trace.append([a.params.copy() for a in agents])
        if evaluate and ((it + 1) % config.log_every == 0 or it + 1 == n_iters):
            result.metrics.extend(_log_rows(it + 1, agents, data, comp_acc, mdp, family, config))
    return result


def _log_rows(iteration, agents, data, comp_acc, mdp, family, config):
    rows = []
    for i, agent in enumerate(agents):
        eta, zeta = exact_returns(agent, family, mdp)
        tr, tr_se = _empirical(agent, mdp, family, "train", config.eval_episodes,
                               seed_tree(config.seed, "eval", iteration, i, "train"))
        ev, ev_se = _empirical(agent, mdp, family, "eval", config.eval_episodes,
                               seed_tree(config.seed, "eval", iteration, i, "eval"))
        obs = data[i]["obs"]
        logp = action_log_probs(agent, obs)
        kl = math.nan
        if len(agents) == 2:
            kl = float(np.mean(kl_rows(forward(agents[1 - i], obs)[0], np.exp(logp))))
        acc = comp_acc[i]
        rows.append({
            "iteration": iteration,
            "steps": iteration * config.steps_per_iteration,
            "agent": i,
            "train_return_emp": tr,
            "train_return_se": tr_se,
            "eval_return_emp": ev,
            "eval_return_se": ev_se,
            "eta_exact": eta,
            "zeta_exact": zeta,
            "kl_between_agents": kl,
            "entropy": float(np.mean(entropy_rows(logp))),
            "loss_total": acc["loss"],
            "loss_policy": acc["L_p"],
            "loss_value": acc["L_v"],
            "loss_entropy": acc["L_e"],
            "loss_kl": acc["L_kl"],
        })
    return rows
