"""Rendering-function families, observation-space rollouts and the coin
gridworld.

A rendering function is stored as its full observation table: row ``s`` is
the observation ``f(s)``. Because the state space is finite this is exact,
and lifting an observation policy back to the underlying MDP is a single
batched forward pass.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMdp, _inverse_cdf, mc_horizon
from .policy import ObservationPolicy, forward
from .seeding import make_rng, seed_tree

__all__ = [
    "FAMILY_IDS",
    "RenderingFunction",
    "RenderingFamily",
    "GeneratedStep",
    "CoinSemantics",
    "EmptySplitError",
    "make_family",
    "family_from_dict",
    "lift_policy",
    "lift_all",
    "invert_observation",
    "generate_episode",
    "rollout_returns",
    "coin_gridworld",
    "coin_optimal_values",
    "sample_functions",
]

FAMILY_IDS = ("permute-onehot", "affine", "distractor", "distractor-correlated")
MAX_RETRIES = 100
INJECTIVITY_TOL = 1e-9


class EmptySplitError(ValueError):
    """Raised when sampling from a split with no members."""


@dataclass(frozen=True, eq=False)
class RenderingFunction:
    family_id: str
    seed: int
    obs_dim: int
    obs_table: np.ndarray

    def __post_init__(self):
        table = np.array(self.obs_table, dtype=np.float64)
        table.setflags(write=False)
        object.__setattr__(self, "obs_table", table)
        if table.ndim != 2 or table.shape[1] != self.obs_dim:
            raise ValueError(f"obs_table shape {table.shape} does not match obs_dim={self.obs_dim}")

    def __call__(self, state):
        return self.obs_table[state]

    @property
    def n_states(self) -> int:
        return self.obs_table.shape[0]


def min_pairwise_linf(table: np.ndarray) -> float:
    """Smallest L-infinity distance between two distinct rows."""
    if len(table) < 2:
        return np.inf
    diff = np.max(np.abs(table[:, None, :] - table[None, :, :]), axis=-1)
    iu = np.triu_indices(len(table), k=1)
    return float(diff[iu].min())


@dataclass(frozen=True)
class CoinSemantics:
    """Meaning of the integer states of :func:`coin_gridworld`."""

    width: int
    height: int
    palette_size: int
    agent_cell: np.ndarray
    coin_cell: np.ndarray
    side: np.ndarray
    distance: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def state_features(self) -> np.ndarray:
        """Agent-cell one-hot concatenated with coin-cell one-hot."""
        c = self.n_cells
        feats = np.zeros((len(self.agent_cell), 2 * c))
        rows = np.arange(len(self.agent_cell))
        feats[rows, self.agent_cell] = 1.0
        feats[rows, c + self.coin_cell] = 1.0
        return feats

    @property
    def feature_dim(self) -> int:
        return 2 * self.n_cells

    def to_dict(self) -> dict:
        return {"name": "coin-grid", "width": self.width, "height": self.height,
                "palette_size": self.palette_size}


@dataclass(eq=False)
class RenderingFamily:
    members: list
    weights: np.ndarray
    train_mask: np.ndarray
    family_id: str = "custom"
    seed: int | None = None
    semantics: CoinSemantics | None = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.train_mask = np.array(self.train_mask, dtype=bool)
        n = len(self.members)
        if n == 0:
            raise ValueError("a family needs at least one rendering function")
        if self.weights.shape != (n,) or self.train_mask.shape != (n,):
            raise ValueError("weights and train_mask must have one entry per member")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if not self.train_mask.any():
            raise ValueError("at least one member must be in the training split")
        dims = {m.obs_dim for m in self.members}
        if len(dims) != 1:
            raise ValueError("all members must share obs_dim")

    def __len__(self):
        return len(self.members)

    @property
    def obs_dim(self) -> int:
        return self.members[0].obs_dim

    @property
    def n_states(self) -> int:
        return self.members[0].n_states

    @property
    def Z(self) -> float:
        """Probability mass of the training split (exactly 1 when F_eval is empty)."""
        if self.train_mask.all():
            return 1.0
        return float(self.weights[self.train_mask].sum())

    @property
    def eval_mask(self) -> np.ndarray:
        return ~self.train_mask

    def split_weights(self, split: str) -> np.ndarray:
        """Weights renormalized onto ``split`` ("train", "eval" or "all").

        Entries outside the split are zero. An empty eval split gives all
        zeros, which makes every eval-split expectation vanish.
        """
        if split == "all" or (split == "train" and self.train_mask.all()):
            return self.weights.copy()
        if split == "train":
            mask = self.train_mask
        elif split == "eval":
            mask = self.eval_mask
        else:
            raise ValueError(f"unknown split {split!r}")
        w = np.where(mask, self.weights, 0.0)
        total = w.sum()
        return w / total if total > 0 else w

    def tables(self) -> np.ndarray:
        return np.stack([m.obs_table for m in self.members])

    def to_dict(self) -> dict:
        return {
            "family_id": self.family_id,
            "seed": self.seed,
            "seeds": [m.seed for m in self.members],
            "n_states": self.n_states,
            "obs_dim": self.obs_dim,
            "weights": self.weights.tolist(),
            "train_mask": self.train_mask.tolist(),
            "env": None if self.semantics is None else self.semantics.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class GeneratedStep:
    obs: np.ndarray
    action: int
    reward: float
    underlying_state: int
    f_index: int


def _palette(seed: int, size: int, dim: int) -> np.ndarray:
    return make_rng(seed_tree(seed, "palette")).standard_normal((size, dim))


def _render_table(family_id: str, member_seed: int, family_seed: int, n_states: int,
                  obs_dim: int, in_train: bool, semantics: CoinSemantics | None) -> np.ndarray:
    rng = make_rng(member_seed)
    if family_id == "permute-onehot":
        if obs_dim < n_states:
            raise ValueError(f"permute-onehot needs obs_dim >= n_states ({n_states})")
        slots = rng.permutation(obs_dim)[:n_states]
        table = np.zeros((n_states, obs_dim))
        table[np.arange(n_states), slots] = 1.0
        return table
    if family_id == "affine":
        onehot = np.eye(n_states)
        for _ in range(MAX_RETRIES):
            w = rng.standard_normal((obs_dim, n_states))
            b = rng.standard_normal(obs_dim)
            table = onehot @ w.T + b
            full_rank = np.linalg.matrix_rank(w) == min(obs_dim, n_states)
            if full_rank and min_pairwise_linf(table) > INJECTIVITY_TOL:
                return table
        raise RuntimeError(f"affine rendering not injective after {MAX_RETRIES} attempts")
    if family_id in ("distractor", "distractor-correlated"):
        feats = np.eye(n_states) if semantics is None else semantics.state_features
        n_bg = obs_dim - feats.shape[1]
        if n_bg < 1:
            raise ValueError(f"distractor needs obs_dim > {feats.shape[1]} (state features)")
        if family_id == "distractor" or not in_train:
            size = 4 if semantics is None else semantics.palette_size
            color = _palette(family_seed, size, n_bg)[rng.integers(size)]
            background = np.broadcast_to(color, (n_states, n_bg))
        else:
            if semantics is None:
                raise ValueError("distractor-correlated needs coin-gridworld semantics")
            # coin-right states draw from the first half of the palette,
            # coin-left states from the second half
            palette = _palette(family_seed, semantics.palette_size, n_bg)
            half = semantics.palette_size // 2
            right = palette[rng.integers(half)]
            left = palette[half + rng.integers(semantics.palette_size - half)]
            background = np.where((semantics.side >= 0)[:, None], right, left)
        return np.hstack([feats, background])
    raise ValueError(f"unknown family_id {family_id!r}; expected one of {FAMILY_IDS}")


def make_family(mdp: TabularMdp | None, family_id: str, n_functions: int, n_train: int,
                obs_dim: int, seed: int, weights=None,
                semantics: CoinSemantics | None = None, n_states: int | None = None) -> RenderingFamily:
    """Build a finite rendering family; the first ``n_train`` members form F_train."""
    if n_states is None:
        n_states = mdp.n_states
    if not (1 <= n_train <= n_functions):
        raise ValueError("need 1 <= n_train <= n_functions")
    if family_id == "distractor-correlated" and semantics is None:
        raise ValueError("distractor-correlated needs coin-gridworld semantics")
    members = []
    for i in range(n_functions):
        member_seed = seed_tree(seed, family_id, i)
        table = _render_table(family_id, member_seed, seed, n_states, obs_dim, i < n_train, semantics)
        if min_pairwise_linf(table) <= INJECTIVITY_TOL:
            raise RuntimeError(f"rendering function {i} is not injective")
        members.append(RenderingFunction(family_id, member_seed, obs_dim, table))
    if weights is None:
        weights = np.full(n_functions, 1.0 / n_functions)
    train_mask = np.arange(n_functions) < n_train
    return RenderingFamily(members, weights, train_mask, family_id, seed, semantics)


def family_from_dict(data: dict) -> RenderingFamily:
    """Rebuild a family from its JSON form, regenerating the tables from seeds."""
    semantics = None
    env = data.get("env")
    if env:
        _, semantics = coin_gridworld(env["width"], env["height"], env["palette_size"])
    train_mask = np.array(data["train_mask"], dtype=bool)
    members = []
    for i, member_seed in enumerate(data["seeds"]):
        table = _render_table(data["family_id"], int(member_seed), int(data["seed"]), int(data["n_states"]),
                              int(data["obs_dim"]), bool(train_mask[i]), semantics)
        members.append(RenderingFunction(data["family_id"], int(member_seed), int(data["obs_dim"]), table))
    return RenderingFamily(members, data["weights"], train_mask, data["family_id"], data["seed"], semantics)


def lift_policy(pi: ObservationPolicy, f: RenderingFunction, mdp: TabularMdp | None = None) -> np.ndarray:
    """Underlying policy ``mu_f(.|s) = pi(.|f(s))`` as an (S, A) array."""
    if pi.obs_dim != f.obs_dim:
        raise ValueError(f"policy obs_dim {pi.obs_dim} != rendering obs_dim {f.obs_dim}")
    if mdp is not None and f.n_states != mdp.n_states:
        raise ValueError("rendering function and MDP disagree on n_states")
    probs = forward(pi, f.obs_table)[0]
    return probs


def lift_all(pi: ObservationPolicy, family: RenderingFamily) -> np.ndarray:
    """Stack of lifted policies, shape (|F|, S, A)."""
    return np.stack([lift_policy(pi, f) for f in family.members])


def invert_observation(f: RenderingFunction, obs: np.ndarray) -> int:
    """``f^{-1}(obs)`` by exact row lookup."""
    hits = np.nonzero(np.all(f.obs_table == np.asarray(obs), axis=1))[0]
    if len(hits) != 1:
        raise KeyError("observation is not in the image of f")
    return int(hits[0])


def _simulate(mdp: TabularMdp, family: RenderingFamily, pi, n_episodes: int, horizon: int,
              seed: int, split: str, record: bool):
    """Algorithm-1 style data collection, vectorized over episodes.

    Per episode: draw f from the split weights, s0 ~ rho; then per step
    o = f(s), a ~ pi(.|o), reward and next state from the MDP. ``pi`` is an
    ObservationPolicy or a callable mapping an (n, obs_dim) batch to probs.
    """
    weights = family.split_weights(split)
    if weights.sum() == 0:
        raise EmptySplitError(f"split {split!r} has no rendering functions")
    rng = make_rng(seed)
    policy_fn = (lambda o: forward(pi, o)[0]) if isinstance(pi, ObservationPolicy) else pi
    tables = family.tables()
    p_cdf = np.cumsum(mdp.transition, axis=2)
    f_idx = _inverse_cdf(np.cumsum(weights)[None, :], rng.random(n_episodes))
    s = _inverse_cdf(np.cumsum(mdp.rho)[None, :], rng.random(n_episodes))
    total = np.zeros(n_episodes)
    disc = 1.0
    steps = []
    for _ in range(horizon):
        obs = tables[f_idx, s]
        probs = policy_fn(obs)
        a = _inverse_cdf(np.cumsum(probs, axis=1), rng.random(n_episodes))
        r = mdp.reward[s, a]
        if record:
            steps.append((obs, a, r, s.copy(), f_idx))
        total += disc * r
        disc *= mdp.gamma
        s = _inverse_cdf(p_cdf[s, a], rng.random(n_episodes))
    return total, f_idx, steps


def generate_episode(mdp: TabularMdp, family: RenderingFamily, pi, horizon: int, seed: int,
                     split: str = "train") -> list:
    """One episode of the MDP generator as a list of :class:`GeneratedStep`."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    _, _, steps = _simulate(mdp, family, pi, 1, horizon, seed, split, record=True)
    return [GeneratedStep(obs[0].copy(), int(a[0]), float(r[0]), int(s[0]), int(f[0]))
            for obs, a, r, s, f in steps]


def rollout_returns(mdp: TabularMdp, family: RenderingFamily, pi, n_episodes: int, seed: int,
                    split: str = "train", horizon: int | None = None) -> np.ndarray:
    """Truncated discounted returns of ``n_episodes`` generator episodes.

    The default horizon makes the truncation bias smaller than 1e-8.
    """
    if horizon is None:
        horizon = mc_horizon(mdp.gamma, max(mdp.r_max, 1e-300))
    total, _, _ = _simulate(mdp, family, pi, n_episodes, horizon, seed, split, record=False)
    return total


def sample_functions(family: RenderingFamily, split: str, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` member indices from the split weights."""
    weights = family.split_weights(split)
    if weights.sum() == 0:
        raise EmptySplitError(f"split {split!r} has no rendering functions")
    rng = make_rng(seed)
    return _inverse_cdf(np.cumsum(weights)[None, :], rng.random(n))


LEFT, RIGHT, UP, DOWN = range(4)
_MOVES = {LEFT: (-1, 0), RIGHT: (1, 0), UP: (0, -1), DOWN: (0, 1)}


def coin_gridworld(width: int, height: int = 1, background_palette_size: int = 4,
                   gamma: float = 0.99):
    """Coin-collection gridworld as a continuing tabular MDP.

    States enumerate (agent_cell, coin_cell) pairs, ``s = agent * C + coin``.
    Actions are left, right, up, down; moves into a wall leave the agent in
    place. Stepping onto the coin pays +1 and the next state is drawn from
    ``rho`` (uniform over agent != coin). States with agent == coin carry no
    start mass and also reset to ``rho`` with zero reward.

    Returns ``(mdp, semantics)``.
    """
    cells = width * height
    if cells < 2:
        raise ValueError("width * height must be >= 2")
    if background_palette_size < 2:
        raise ValueError("background_palette_size must be >= 2")
    n = cells * cells
    agent = np.repeat(np.arange(cells), cells)
    coin = np.tile(np.arange(cells), cells)
    ax, ay = agent % width, agent // width
    cx, cy = coin % width, coin // width
    rho = (agent != coin).astype(np.float64)
    rho /= rho.sum()
    reward = np.zeros((n, 4))
    transition = np.zeros((n, 4, n))
    for s in range(n):
        for a, (dx, dy) in _MOVES.items():
            if agent[s] == coin[s]:
                transition[s, a] = rho
                continue
            nx = min(max(ax[s] + dx, 0), width - 1)
            ny = min(max(ay[s] + dy, 0), height - 1)
            new_cell = ny * width + nx
            if new_cell == coin[s]:
                reward[s, a] = 1.0
                transition[s, a] = rho
            else:
                transition[s, a, new_cell * cells + coin[s]] = 1.0
    mdp = TabularMdp(reward, transition, rho, gamma)
    semantics = CoinSemantics(
        width=width,
        height=height,
        palette_size=background_palette_size,
        agent_cell=agent,
        coin_cell=coin,
        side=np.sign(cx - ax),
        distance=np.abs(cx - ax) + np.abs(cy - ay),
    )
    return mdp, semantics


def coin_optimal_values(mdp: TabularMdp, semantics: CoinSemantics) -> np.ndarray:
    """Closed-form optimal values from shortest-path distances.

    For a non-reset state at Manhattan distance d the optimum collects the
    coin at step d-1 and restarts from rho at step d, so
    ``V(s) = gamma**(d-1) * (1 + gamma * Vbar)`` with ``Vbar = E_rho V``.
    Reset states are worth ``gamma * Vbar``.
    """
    g = mdp.gamma
    live = semantics.distance > 0
    disc = np.where(live, g ** (semantics.distance - 1.0), 0.0)
    mean_disc = float(mdp.rho @ disc)
    vbar = mean_disc / (1.0 - g * mean_disc)
    return np.where(live, disc * (1.0 + g * vbar), g * vbar)
