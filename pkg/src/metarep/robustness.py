"""Sensitivity of trained policies to random linear input perturbations.

A suite of Gaussian matrices plays the role of randomly initialized input
layers: each map is applied to the raw observation before the encoder and
the shift in the action distribution is measured by KL divergence.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMdp
from .policy import ObservationPolicy, forward, init_policy, kl_rows
from .rendering import RenderingFamily, generate_episode
from .seeding import make_rng, seed_tree
from .trainer import PpoConfig, TrainResult, train

__all__ = [
    "PerturbationSuite",
    "RobustnessRecord",
    "make_suite",
    "identity_suite",
    "robustness_test",
    "export_embeddings",
    "embeddings_csv",
    "feature_dispersion",
    "reinit_heads",
    "frozen_encoder_retrain",
]


@dataclass(frozen=True, eq=False)
class PerturbationSuite:
    """``n_perturbations`` square maps applied to observations as ``M @ o``."""

    maps: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        maps = np.array(self.maps, dtype=np.float64)
        if maps.ndim != 3 or maps.shape[1] != maps.shape[2]:
            raise ValueError(f"maps must have shape (n, d, d), got {maps.shape}")
        maps.setflags(write=False)
        object.__setattr__(self, "maps", maps)

    @property
    def n_perturbations(self) -> int:
        return self.maps.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.maps.shape[1]

    def apply(self, obs: np.ndarray) -> np.ndarray:
        """Perturbed copies of ``obs`` with shape ``(n_perturbations, ..., obs_dim)``."""
        obs = np.asarray(obs, dtype=np.float64)
        return np.einsum("kij,...j->k...i", self.maps, obs)


def make_suite(obs_dim: int, n_perturbations: int = 100, seed: int = 0) -> PerturbationSuite:
    """Standard Gaussian maps, regenerable from ``seed``."""
    if n_perturbations < 1 or obs_dim < 1:
        raise ValueError("n_perturbations and obs_dim must be positive")
    rng = make_rng(seed_tree(seed, "perturbations"))
    return PerturbationSuite(rng.standard_normal((n_perturbations, obs_dim, obs_dim)), seed)


def identity_suite(obs_dim: int, n_perturbations: int = 1) -> PerturbationSuite:
    return PerturbationSuite(np.broadcast_to(np.eye(obs_dim), (n_perturbations, obs_dim, obs_dim)))


@dataclass
class RobustnessRecord:
    per_step_mean_kl: np.ndarray
    summary_mean: float
    summary_std: float
    direction: str = "forward"
    reverse_per_step_mean_kl: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def reverse_summary(self) -> tuple[float, float]:
        return _summary(self.reverse_per_step_mean_kl)

    def to_dict(self) -> dict:
        out = {
            "direction": self.direction,
            "per_step_mean_kl": [float(x) for x in self.per_step_mean_kl],
            "summary_mean": self.summary_mean,
            "summary_std": self.summary_std,
        }
        if self.reverse_per_step_mean_kl is not None:
            rm, rs = self.reverse_summary
            out["reverse_per_step_mean_kl"] = [float(x) for x in self.reverse_per_step_mean_kl]
            out["reverse_summary_mean"] = rm
            out["reverse_summary_std"] = rs
        out.update(self.extra)
        return out


def _summary(values: np.ndarray) -> tuple[float, float]:
    # population statistics (divisor n)
    return float(np.mean(values)), float(np.std(values))


def robustness_test(policy: ObservationPolicy, mdp: TabularMdp, family: RenderingFamily,
                    suite: PerturbationSuite, n_steps: int = 100, split: str = "eval",
                    seed: int = 0, direction: str = "forward") -> RobustnessRecord:
    """Mean KL between clean and perturbed action distributions along a rollout.

    Actions are always sampled from the clean policy, so the visited
    observations do not depend on the suite. ``direction="forward"`` is
    ``KL(clean || perturbed)``; the other direction is reported alongside.
    """
    if direction not in ("forward", "reverse"):
        raise ValueError("direction must be 'forward' or 'reverse'")
    if suite.obs_dim != family.obs_dim or policy.obs_dim != family.obs_dim:
        raise ValueError("suite, policy and family disagree on obs_dim")
    steps = generate_episode(mdp, family, policy, n_steps, seed, split=split)
    obs = np.stack([st.obs for st in steps])
    clean = forward(policy, obs)[0]
    perturbed = forward(policy, suite.apply(obs).reshape(-1, obs.shape[1]))[0]
    perturbed = perturbed.reshape(suite.n_perturbations, len(obs), -1)
    fwd = kl_rows(clean[None], perturbed).mean(axis=0)
    rev = kl_rows(perturbed, clean[None]).mean(axis=0)
    primary, other = (fwd, rev) if direction == "forward" else (rev, fwd)
    mean, std = _summary(primary)
    return RobustnessRecord(primary, mean, std, direction, other)


def export_embeddings(policy: ObservationPolicy, observations: np.ndarray,
                      suite: PerturbationSuite) -> np.ndarray:
    """Encoder features of every perturbed observation.

    Returns rows ``(obs_id, perturbation_id, feature_0, ...)`` ordered by
    observation then perturbation.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if obs.shape[0] == 0:
        raise ValueError("observations must be nonempty")
    feats = forward(policy, suite.apply(obs).reshape(-1, obs.shape[1]))[2]
    feats = feats.reshape(suite.n_perturbations, len(obs), -1).transpose(1, 0, 2)
    n_obs, n_k, dim = feats.shape
    ids = np.stack(np.meshgrid(np.arange(n_obs), np.arange(n_k), indexing="ij"), axis=-1)
    return np.concatenate([ids.reshape(-1, 2), feats.reshape(-1, dim)], axis=1)


def embeddings_csv(rows: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n_feat = rows.shape[1] - 2
    writer.writerow(["obs_id", "perturbation_id"] + [f"feature_{j}" for j in range(n_feat)])
    for row in rows:
        writer.writerow([int(row[0]), int(row[1])] + [repr(float(x)) for x in row[2:]])
    return buf.getvalue()


def feature_dispersion(rows: np.ndarray) -> float:
    """Mean pairwise L2 distance between features sharing an ``obs_id``."""
    obs_ids = rows[:, 0].astype(int)
    totals = []
    for oid in np.unique(obs_ids):
        x = rows[obs_ids == oid, 2:]
        if len(x) < 2:
            continue
        d = np.sqrt(np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1))
        iu = np.triu_indices(len(x), k=1)
        totals.append(d[iu].mean())
    return float(np.mean(totals)) if totals else 0.0


def reinit_heads(checkpoint: ObservationPolicy, seed: int, std: float = 0.1) -> ObservationPolicy:
    """Keep the encoder of ``checkpoint``, draw fresh policy and value heads."""
    if not checkpoint.has_encoder:
        raise ValueError(f"architecture {checkpoint.arch!r} has no encoder to freeze")
    fresh = init_policy(checkpoint.arch, checkpoint.obs_dim, checkpoint.n_actions,
                        checkpoint.hidden_dim, seed=seed, std=std)
    mask = checkpoint.encoder_mask()
    return fresh.with_params(np.where(mask, checkpoint.params, fresh.params))


def frozen_encoder_retrain(checkpoint: ObservationPolicy, mdp: TabularMdp, family: RenderingFamily,
                           config: PpoConfig, evaluate: bool = True) -> TrainResult:
    """Baseline PPO on fresh heads over the frozen encoder of ``checkpoint``."""
    if not checkpoint.has_encoder:
        raise ValueError(f"architecture {checkpoint.arch!r} has no encoder to freeze")
    start = reinit_heads(checkpoint, seed_tree(config.seed, "retrain", "heads"), config.init_std)
    return train(mdp, family, config, "baseline", init_agents=[start],
                 grad_mask=start.encoder_mask(), evaluate=evaluate)
