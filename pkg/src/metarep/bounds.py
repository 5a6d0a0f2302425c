"""Exact evaluation of the rendering-generalization performance bounds.

Given two observation policies ``pi`` and ``pi_tilde`` and a finite rendering
family, every quantity is a finite sum over rendering functions, states and
actions of exact dynamic-programming solutions: no sampling anywhere.

Notation used in names:

``mu[f]``, ``mu_tilde[f]``
    the two policies lifted through rendering function ``f``
``tv[f, s]``
    total variation between ``mu_tilde[f](.|s)`` and ``mu[f](.|s)``
``eadv[f, s]``
    ``sum_a mu_tilde[f](a|s) * A^{mu[f]}(s, a)``
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .mdp import TabularMdp, random_mdp, solve_values, tv_rows, visitation
from .policy import ObservationPolicy, init_policy
from .rendering import RenderingFamily, lift_all, make_family
from .seeding import make_rng, seed_tree

__all__ = [
    "PolicyPair",
    "BoundReport",
    "THEOREMS",
    "make_pair",
    "lift_pair",
    "training_and_generalization_returns",
    "surrogate",
    "sup_constants",
    "divergence_terms",
    "r_robustness",
    "performance_difference",
    "visitation_shift",
    "advantage_expectation_gap",
    "verify_theorem1",
    "verify_theorem2",
    "verify_theorem3",
    "verify_theorem4",
    "verify_theorem5",
    "verify_corollary",
    "corollary_constants",
    "compute_report",
    "random_instance",
    "run_campaign",
]

THEOREMS = ("thm1", "thm2", "thm3", "thm4", "thm5", "corollary")
REL_TOL = 1e-9


@dataclass(eq=False)
class PolicyPair:
    """Both policies lifted through every member of a family, with their
    exact value functions, visitations and per-function returns."""

    mdp: TabularMdp
    mu: np.ndarray
    mu_tilde: np.ndarray
    adv: np.ndarray = field(repr=False)
    d_mu: np.ndarray = field(repr=False)
    d_mu_tilde: np.ndarray = field(repr=False)
    returns: np.ndarray = field(repr=False)
    returns_tilde: np.ndarray = field(repr=False)
    pi: ObservationPolicy | None = None
    pi_tilde: ObservationPolicy | None = None

    @property
    def tv(self) -> np.ndarray:
        return tv_rows(self.mu_tilde, self.mu)

    @property
    def eadv(self) -> np.ndarray:
        return np.sum(self.mu_tilde * self.adv, axis=-1)


def _per_function_return(mdp: TabularMdp, mu: np.ndarray, d: np.ndarray) -> float:
    return float(d @ np.sum(mu * mdp.reward, axis=1)) / (1.0 - mdp.gamma)


def make_pair(mdp: TabularMdp, mu, mu_tilde, pi=None, pi_tilde=None) -> PolicyPair:
    """Solve everything needed for the bounds from lifted policy stacks (F, S, A)."""
    mu = np.asarray(mu, dtype=np.float64)
    mu_tilde = np.asarray(mu_tilde, dtype=np.float64)
    if mu.shape != mu_tilde.shape or mu.shape[1:] != (mdp.n_states, mdp.n_actions):
        raise ValueError("lifted policy stacks must both have shape (F, S, A)")
    adv, d_mu, d_mu_tilde, ret, ret_tilde = [], [], [], [], []
    for m, mt in zip(mu, mu_tilde):
        adv.append(solve_values(mdp, m).adv)
        d = visitation(mdp, m)
        dt = visitation(mdp, mt)
        d_mu.append(d)
        d_mu_tilde.append(dt)
        ret.append(_per_function_return(mdp, m, d))
        ret_tilde.append(_per_function_return(mdp, mt, dt))
    return PolicyPair(mdp, mu, mu_tilde, np.array(adv), np.array(d_mu), np.array(d_mu_tilde),
                      np.array(ret), np.array(ret_tilde), pi, pi_tilde)


def lift_pair(pi: ObservationPolicy, pi_tilde: ObservationPolicy, family: RenderingFamily,
              mdp: TabularMdp) -> PolicyPair:
    return make_pair(mdp, lift_all(pi, family), lift_all(pi_tilde, family), pi, pi_tilde)


def training_and_generalization_returns(pair: PolicyPair, family: RenderingFamily) -> dict:
    """Exact eta (train split) and zeta (all of F) for both policies."""
    w_train = family.split_weights("train")
    w_all = family.split_weights("all")
    return {
        "eta_pi": float(w_train @ pair.returns),
        "zeta_pi": float(w_all @ pair.returns),
        "eta_pi_tilde": float(w_train @ pair.returns_tilde),
        "zeta_pi_tilde": float(w_all @ pair.returns_tilde),
    }


def performance_difference(pair: PolicyPair, family: RenderingFamily, split: str = "train") -> float:
    """Advantage form of ``J(pi_tilde) - J(pi)`` averaged over a split."""
    w = family.split_weights(split)
    inner = np.sum(pair.d_mu_tilde * pair.eadv, axis=1)
    return float(w @ inner) / (1.0 - pair.mdp.gamma)


def visitation_shift(pair: PolicyPair) -> tuple[np.ndarray, np.ndarray]:
    """Per-function ``||d^mu_tilde - d^mu||_1`` and its TV bound.

    The bound is ``2 g / (1 - g) * E_{s ~ d^mu} TV(mu_tilde, mu)[s]``.
    """
    g = pair.mdp.gamma
    lhs = np.sum(np.abs(pair.d_mu_tilde - pair.d_mu), axis=1)
    rhs = 2 * g / (1 - g) * np.sum(pair.d_mu * pair.tv, axis=1)
    return lhs, rhs


def advantage_expectation_gap(pair: PolicyPair) -> tuple[np.ndarray, np.ndarray]:
    """Per ``(f, s)``: ``|E_{a ~ mu_tilde} A^mu|`` and ``2 TV * max_a |A^mu|``."""
    lhs = np.abs(pair.eadv)
    rhs = 2 * pair.tv * np.max(np.abs(pair.adv), axis=-1)
    return lhs, rhs


def surrogate(pair: PolicyPair, family: RenderingFamily, mdp: TabularMdp | None = None) -> float:
    """First-order approximation ``L_pi(pi_tilde)`` of the training return."""
    gamma = pair.mdp.gamma
    w = family.split_weights("train")
    eta_pi = float(w @ pair.returns)
    inner = np.sum(pair.d_mu * pair.eadv, axis=1)
    return eta_pi + float(w @ inner) / (1.0 - gamma)


def _masked_max(values: np.ndarray, mask: np.ndarray) -> float:
    """Max over the selected functions; 0 when the selection is empty."""
    if not mask.any():
        return 0.0
    return float(np.max(values[mask]))


def sup_constants(pair: PolicyPair, family: RenderingFamily) -> dict:
    """``eps_train, delta_train, delta_eval, sigma_train, sigma_eval`` by enumeration."""
    eps_f = np.max(np.abs(pair.eadv), axis=1)
    delta_f = np.max(np.abs(pair.adv), axis=(1, 2))
    sigma_f = np.max(pair.tv, axis=1)
    train, evl = family.train_mask, family.eval_mask
    return {
        "eps_train": _masked_max(eps_f, train),
        "delta_train": _masked_max(delta_f, train),
        "delta_eval": _masked_max(delta_f, evl),
        "sigma_train": _masked_max(sigma_f, train),
        "sigma_eval": _masked_max(sigma_f, evl),
    }


def divergence_terms(pair: PolicyPair, family: RenderingFamily) -> dict:
    """``D_train, D_1, D_2, D_eval``: split-weighted expected TV under the
    visitation of ``mu`` (D_train, D_eval) or ``mu_tilde`` (D_1, D_2)."""
    tv = pair.tv
    under_mu = np.sum(pair.d_mu * tv, axis=1)
    under_tilde = np.sum(pair.d_mu_tilde * tv, axis=1)
    w_train = family.split_weights("train")
    w_eval = family.split_weights("eval")
    return {
        "D_train": float(w_train @ under_mu),
        "D_1": float(w_train @ under_tilde),
        "D_2": float(w_eval @ under_tilde),
        "D_eval": float(w_eval @ under_mu),
    }


def r_robustness(lifted) -> float:
    """Largest TV between the same policy lifted through two renderings.

    ``lifted`` is a (F, S, A) stack, or a ``(policy, family)`` tuple.
    """
    if isinstance(lifted, tuple):
        lifted = lift_all(*lifted)
    lifted = np.asarray(lifted)
    best = 0.0
    for i in range(len(lifted)):
        best = max(best, float(np.max(tv_rows(lifted[i][None], lifted))))
    return best


def _lower(lhs: float, rhs: float) -> tuple[float, float, bool]:
    scale = max(1.0, abs(lhs), abs(rhs))
    return lhs, rhs, bool(lhs >= rhs - REL_TOL * scale)


def _upper(lhs: float, rhs: float) -> tuple[float, float, bool]:
    scale = max(1.0, abs(lhs), abs(rhs))
    return lhs, rhs, bool(lhs <= rhs + REL_TOL * scale)


class _Quantities:
    """Lazily shared scalars for the verify_* functions."""

    def __init__(self, pair: PolicyPair, family: RenderingFamily):
        self.gamma = pair.mdp.gamma
        self.Z = family.Z
        self.r_max = pair.mdp.r_max
        self.returns = training_and_generalization_returns(pair, family)
        self.L = surrogate(pair, family)
        self.sup = sup_constants(pair, family)
        self.div = divergence_terms(pair, family)
        self._pair = pair
        self._family = family
        self._r = None

    @property
    def robustness(self) -> tuple[float, float]:
        if self._r is None:
            self._r = (r_robustness(self._pair.mu), r_robustness(self._pair.mu_tilde))
        return self._r


def _theorem1_rhs(q: _Quantities) -> float:
    g = q.gamma
    return q.L - 2 * g * q.sup["eps_train"] / (1 - g) ** 2 * q.div["D_train"]


def verify_theorem1(pair: PolicyPair, family: RenderingFamily, mdp=None, _q=None):
    """Training lower bound: ``eta(pi_tilde) >= L - 2 g eps D_train / (1-g)^2``."""
    q = _q or _Quantities(pair, family)
    return _lower(q.returns["eta_pi_tilde"], _theorem1_rhs(q))


def verify_theorem2(pair: PolicyPair, family: RenderingFamily, mdp=None, _q=None):
    """Generalization lower bound with the three (1 - Z)-scaled terms."""
    q = _q or _Quantities(pair, family)
    g, one_minus_z = q.gamma, 1.0 - q.Z
    rhs = (
        _theorem1_rhs(q)
        - 2 * q.r_max * one_minus_z / (1 - g)
        - 2 * q.sup["delta_train"] * one_minus_z / (1 - g) * q.div["D_1"]
        - 2 * q.sup["delta_eval"] * one_minus_z / (1 - g) * q.div["D_2"]
    )
    return _lower(q.returns["zeta_pi_tilde"], rhs)


def verify_theorem3(pair: PolicyPair, family: RenderingFamily, _q=None):
    q = _q or _Quantities(pair, family)
    factor = 1 + 2 * q.gamma * q.sup["sigma_train"] / (1 - q.gamma)
    return _upper(q.div["D_1"], factor * q.div["D_train"])


def verify_theorem4(pair: PolicyPair, family: RenderingFamily, _q=None):
    q = _q or _Quantities(pair, family)
    factor = 1 + 2 * q.gamma * q.sup["sigma_eval"] / (1 - q.gamma)
    return _upper(q.div["D_2"], factor * q.div["D_eval"])


def verify_theorem5(pair: PolicyPair, family: RenderingFamily, _q=None):
    q = _q or _Quantities(pair, family)
    r_pi, r_tilde = q.robustness
    factor = 1 + 2 * q.gamma * q.sup["sigma_train"] / (1 - q.gamma)
    return _upper(q.div["D_eval"], factor * r_pi + r_tilde + q.div["D_train"])


def corollary_constants(gamma: float, Z: float, r_max: float, sup: dict) -> dict:
    """``C_train, C_pi, C_pi_tilde, C`` of the combined generalization bound."""
    g = gamma
    k_train = 1 + 2 * g * sup["sigma_train"] / (1 - g)
    k_eval = 1 + 2 * g * sup["sigma_eval"] / (1 - g)
    a_train = 2 * sup["delta_train"] * (1 - Z) / (1 - g)
    a_eval = 2 * sup["delta_eval"] * (1 - Z) / (1 - g)
    return {
        "C_train": a_train * k_train + 2 * g * sup["eps_train"] / (1 - g) ** 2 + a_eval * k_eval,
        "C_pi": a_eval * k_eval * k_train,
        "C_pi_tilde": a_eval * k_eval,
        "C": 2 * r_max * (1 - Z) / (1 - g),
    }


def verify_corollary(pair: PolicyPair, family: RenderingFamily, mdp=None, _q=None):
    """Returns ``(lhs, rhs, holds, constants)``."""
    q = _q or _Quantities(pair, family)
    c = corollary_constants(q.gamma, q.Z, q.r_max, q.sup)
    r_pi, r_tilde = q.robustness
    rhs = q.L - c["C_train"] * q.div["D_train"] - c["C_pi"] * r_pi - c["C_pi_tilde"] * r_tilde - c["C"]
    lhs, rhs, holds = _lower(q.returns["zeta_pi_tilde"], rhs)
    return lhs, rhs, holds, c


@dataclass
class BoundReport:
    eta_pi: float
    eta_pi_tilde: float
    zeta_pi: float
    zeta_pi_tilde: float
    L_pi_of_tilde: float
    Z: float
    r_max: float
    eps_train: float
    delta_train: float
    delta_eval: float
    sigma_train: float
    sigma_eval: float
    D_train: float
    D_1: float
    D_2: float
    D_eval: float
    R_pi: float
    R_pi_tilde: float
    C_train: float
    C_pi: float
    C_pi_tilde: float
    C: float
    lhs_thm1: float
    lhs_thm2: float
    lhs_thm3: float
    lhs_thm4: float
    lhs_thm5: float
    lhs_corollary: float
    rhs_thm1: float
    rhs_thm2: float
    rhs_thm3: float
    rhs_thm4: float
    rhs_thm5: float
    rhs_corollary: float
    holds_thm1: bool
    holds_thm2: bool
    holds_thm3: bool
    holds_thm4: bool
    holds_thm5: bool
    holds_corollary: bool

    @property
    def all_hold(self) -> bool:
        return all(getattr(self, f"holds_{t}") for t in THEOREMS)

    def slack(self, theorem: str) -> float:
        """Signed margin; negative means the inequality is violated."""
        lhs, rhs = getattr(self, f"lhs_{theorem}"), getattr(self, f"rhs_{theorem}")
        return lhs - rhs if theorem in ("thm1", "thm2", "corollary") else rhs - lhs

    def to_dict(self) -> dict:
        return asdict(self)


def compute_report(pair: PolicyPair, family: RenderingFamily, mdp: TabularMdp | None = None) -> BoundReport:
    q = _Quantities(pair, family)
    r_pi, r_tilde = q.robustness
    t1 = verify_theorem1(pair, family, _q=q)
    t2 = verify_theorem2(pair, family, _q=q)
    t3 = verify_theorem3(pair, family, _q=q)
    t4 = verify_theorem4(pair, family, _q=q)
    t5 = verify_theorem5(pair, family, _q=q)
    lc, rc, hc, consts = verify_corollary(pair, family, _q=q)
    results = {"thm1": t1, "thm2": t2, "thm3": t3, "thm4": t4, "thm5": t5, "corollary": (lc, rc, hc)}
    fields = {}
    for name, (lhs, rhs, holds) in results.items():
        fields[f"lhs_{name}"] = lhs
        fields[f"rhs_{name}"] = rhs
        fields[f"holds_{name}"] = holds
    return BoundReport(
        **q.returns, L_pi_of_tilde=q.L, Z=q.Z, r_max=q.r_max, **q.sup, **q.div,
        R_pi=r_pi, R_pi_tilde=r_tilde, **consts, **fields,
    )


TEMPERATURES = (0.1, 1.0, 10.0)


def _random_policy(rng: np.random.Generator, arch: str, obs_dim: int, n_actions: int,
                   temperature: float, seed: int) -> ObservationPolicy:
    pi = init_policy(arch, obs_dim, n_actions, hidden_dim=8, seed=seed, std=1.0)
    params = pi.params.copy()
    for name in ("pi_w", "pi_b"):
        sl = pi.layout[name][0]
        params[sl] = rng.standard_normal(sl.stop - sl.start) / temperature
    return pi.with_params(params)


def random_instance(seed: int, n_states: int | None = None, n_actions: int | None = None,
                    n_functions: int | None = None, n_train: int | None = None,
                    gamma: float = 0.9):
    """A random (mdp, family, pi, pi_tilde) for the verification campaign.

    Unspecified sizes are drawn with at most 8 states, 4 actions and 8
    rendering functions. Policy temperatures are swept over 0.1, 1 and 10;
    a third of the time ``pi_tilde`` is a small perturbation of ``pi`` so the
    near-tight regime is covered too.
    """
    rng = make_rng(seed_tree(seed, "instance"))
    n_states = n_states or int(rng.integers(1, 9))
    n_actions = n_actions or int(rng.integers(1, 5))
    n_functions = n_functions or int(rng.integers(1, 9))
    n_train = n_train or int(rng.integers(1, n_functions + 1))
    mdp = random_mdp(n_states, n_actions, seed_tree(seed, "mdp"), gamma=gamma)
    family_id = ("permute-onehot", "affine", "distractor")[int(rng.integers(3))]
    if family_id == "permute-onehot":
        obs_dim = n_states + int(rng.integers(0, 3))
    elif family_id == "affine":
        obs_dim = max(1, math.ceil(math.log2(max(n_states, 2)))) + int(rng.integers(0, 4))
    else:
        obs_dim = n_states + 1 + int(rng.integers(0, 3))
    weights = rng.dirichlet(np.ones(n_functions)) if rng.random() < 0.5 else None
    if weights is not None:
        weights = np.maximum(weights, 1e-3)
        weights /= weights.sum()
    family = make_family(mdp, family_id, n_functions, n_train, obs_dim, seed_tree(seed, "family"), weights)
    arch = ("linear-softmax", "one-hidden-mlp")[int(rng.integers(2))]
    t_pi, t_tilde = (TEMPERATURES[int(i)] for i in rng.integers(3, size=2))
    pi = _random_policy(rng, arch, obs_dim, n_actions, t_pi, seed_tree(seed, "pi"))
    if rng.random() < 1 / 3:
        pi_tilde = pi.with_params(pi.params + 0.05 * rng.standard_normal(pi.n_params))
    else:
        pi_tilde = _random_policy(rng, arch, obs_dim, n_actions, t_tilde, seed_tree(seed, "pi_tilde"))
    return mdp, family, pi, pi_tilde


def run_campaign(n_instances: int, seed: int, on_failure=None, **sizes):
    """Verify every bound on ``n_instances`` random instances.

    Returns ``(reports, summary)``; ``on_failure(index, instance, report)``
    is called for each instance with a violated bound.
    """
    reports = []
    failures = 0
    min_slack = {t: math.inf for t in THEOREMS}
    for i in range(n_instances):
        instance = random_instance(seed_tree(seed, "campaign", i), **sizes)
        mdp, family, pi, pi_tilde = instance
        report = compute_report(lift_pair(pi, pi_tilde, family, mdp), family, mdp)
        reports.append(report)
        for t in THEOREMS:
            min_slack[t] = min(min_slack[t], report.slack(t))
        if not report.all_hold:
            failures += 1
            if on_failure is not None:
                on_failure(i, instance, report)
    summary = {"instances": n_instances, "failures": failures, "min_slack_per_theorem": min_slack}
    return reports, summary
