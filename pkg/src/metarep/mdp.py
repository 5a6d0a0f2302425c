"""Tabular MDPs and exact dynamic-programming solvers.

Everything here is a pure function of dense numpy arrays. Policies over
underlying states are plain ``(n_states, n_actions)`` row-stochastic arrays.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .seeding import make_rng

__all__ = [
    "TabularMdp",
    "ValueSolution",
    "MAX_STATES",
    "check_policy",
    "solve_values",
    "visitation",
    "discounted_return",
    "tv_distance",
    "tv_rows",
    "random_mdp",
    "mc_horizon",
    "simulate_returns",
]

MAX_STATES = 256
_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP ``(S, A, r, P, rho, gamma)``.

    ``transition[s, a, s2]`` is the probability of moving to ``s2``.
    """

    reward: np.ndarray
    transition: np.ndarray
    rho: np.ndarray
    gamma: float

    def __post_init__(self):
        reward = np.array(self.reward, dtype=np.float64)
        transition = np.array(self.transition, dtype=np.float64)
        rho = np.array(self.rho, dtype=np.float64)
        for arr in (reward, transition, rho):
            arr.setflags(write=False)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "gamma", float(self.gamma))
        self.validate()

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward)))

    def validate(self) -> None:
        n, m = self.reward.shape if self.reward.ndim == 2 else (0, 0)
        if self.reward.ndim != 2 or n < 1 or m < 1:
            raise ValueError("reward must be a non-empty (n_states, n_actions) matrix")
        if n > MAX_STATES:
            raise ValueError(f"n_states={n} exceeds the dense-solver cap {MAX_STATES}")
        if self.transition.shape != (n, m, n):
            raise ValueError(f"transition has shape {self.transition.shape}, expected {(n, m, n)}")
        if self.rho.shape != (n,):
            raise ValueError(f"rho has shape {self.rho.shape}, expected {(n,)}")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("reward contains non-finite entries")
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(-1) - 1)) > _TOL:
            raise ValueError("every transition[s, a, :] must be a probability vector")
        if np.any(self.rho < 0) or abs(self.rho.sum() - 1) > _TOL:
            raise ValueError("rho must be a probability vector")

    def policy_matrices(self, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """State-to-state kernel ``P_mu`` and expected reward ``r_mu``."""
        mu = check_policy(mu, self.n_states, self.n_actions)
        p_mu = np.einsum("sa,sat->st", mu, self.transition)
        r_mu = np.sum(mu * self.reward, axis=1)
        return p_mu, r_mu

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "reward": self.reward.tolist(),
            "transition": self.transition.tolist(),
            "rho": self.rho.tolist(),
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMdp":
        mdp = cls(data["reward"], data["transition"], data["rho"], data["gamma"])
        if (mdp.n_states, mdp.n_actions) != (data["n_states"], data["n_actions"]):
            raise ValueError("declared sizes disagree with array shapes")
        return mdp

    def to_json(self) -> str:
        # json emits repr(float), which round-trips doubles exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ValueSolution:
    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray


def check_policy(mu, n_states: int, n_actions: int) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (n_states, n_actions):
        raise ValueError(f"policy has shape {mu.shape}, expected {(n_states, n_actions)}")
    if np.any(mu < 0) or np.max(np.abs(mu.sum(axis=1) - 1)) > _TOL:
        raise ValueError("policy rows must be probability vectors")
    return mu


def solve_values(mdp: TabularMdp, mu: np.ndarray) -> ValueSolution:
    """Exact ``V``, ``Q`` and advantage of ``mu`` by a dense linear solve."""
    p_mu, r_mu = mdp.policy_matrices(mu)
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_mu, r_mu)
    q = mdp.reward + mdp.gamma * (mdp.transition @ v)
    return ValueSolution(v=v, q=q, adv=q - v[:, None])


def visitation(mdp: TabularMdp, mu: np.ndarray) -> np.ndarray:
    """Normalized discounted state visitation ``d^mu``."""
    p_mu, _ = mdp.policy_matrices(mu)
    a = np.eye(mdp.n_states) - mdp.gamma * p_mu.T
    d = np.linalg.solve(a, (1.0 - mdp.gamma) * mdp.rho)
    # solve noise can leave -1e-17 entries on unreachable states
    return np.clip(d, 0.0, None)


def discounted_return(mdp: TabularMdp, mu: np.ndarray) -> float:
    """Expected discounted return, computed through the visitation form."""
    d = visitation(mdp, mu)
    r_mu = np.sum(np.asarray(mu) * mdp.reward, axis=1)
    return float(d @ r_mu) / (1.0 - mdp.gamma)


def tv_distance(p, q) -> float:
    """Total variation distance ``0.5 * sum |p - q|``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return 0.5 * float(np.sum(np.abs(p - q)))


def tv_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise TV distance along the last axis."""
    return 0.5 * np.sum(np.abs(np.asarray(p) - np.asarray(q)), axis=-1)


def random_mdp(n_states: int, n_actions: int, seed: int, gamma: float = 0.9) -> TabularMdp:
    """Random MDP: flat-Dirichlet rows and rho, rewards uniform on [0, 1]."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be positive")
    rng = make_rng(seed)
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    # renormalize so the 1e-12 stochasticity check is never tripped by rounding
    transition /= transition.sum(axis=-1, keepdims=True)
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    rho /= rho.sum()
    return TabularMdp(reward, transition, rho, gamma)


def mc_horizon(gamma: float, r_max: float = 1.0, tol: float = 1e-8) -> int:
    """Truncation horizon with ``gamma**H * r_max < tol``."""
    if r_max <= 0:
        return 1
    return max(1, math.ceil(math.log(tol / r_max) / math.log(gamma)))


def simulate_returns(
    mdp: TabularMdp, mu: np.ndarray, n_episodes: int, seed: int, horizon: int | None = None
) -> np.ndarray:
    """Sampled truncated discounted returns of ``mu`` started from ``rho``.

    Vectorized over episodes; used as the Monte-Carlo oracle for the DP code.
    """
    mu = check_policy(mu, mdp.n_states, mdp.n_actions)
    if horizon is None:
        horizon = mc_horizon(mdp.gamma, max(mdp.r_max, 1e-300))
    rng = make_rng(seed)
    mu_cdf = np.cumsum(mu, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    s = _inverse_cdf(np.cumsum(mdp.rho)[None, :], rng.random(n_episodes))
    total = np.zeros(n_episodes)
    disc = 1.0
    for _ in range(horizon):
        a = _inverse_cdf(mu_cdf[s], rng.random(n_episodes))
        total += disc * mdp.reward[s, a]
        s = _inverse_cdf(p_cdf[s, a], rng.random(n_episodes))
        disc *= mdp.gamma
    return total


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sample indices from rows of ``cdf`` (broadcast against ``u``)."""
    idx = np.sum(cdf < u[:, None], axis=1)
    return np.minimum(idx, cdf.shape[-1] - 1)
