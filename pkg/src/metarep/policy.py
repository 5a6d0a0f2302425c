"""Observation policies with a shared encoder, softmax action head and
linear value head, plus hand-derived gradients of the PPO/DML losses.

Parameters live in one flat float64 vector. Layout (row-major blocks, in
this order):

``one-hidden-mlp``
    ``enc_w`` (hidden, obs), ``enc_b`` (hidden,), ``pi_w`` (actions, hidden),
    ``pi_b`` (actions,), ``v_w`` (hidden,), ``v_b`` (1,)

``linear-softmax``
    ``pi_w`` (actions, obs), ``pi_b`` (actions,), ``v_w`` (obs,), ``v_b`` (1,)

The hidden tanh layer is the encoder; ``linear-softmax`` has no encoder and
its features are the raw observation.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .seeding import make_rng

__all__ = [
    "ARCHES",
    "ObservationPolicy",
    "LossSpec",
    "Minibatch",
    "init_policy",
    "param_layout",
    "forward",
    "action_log_probs",
    "log_softmax",
    "loss_and_grad",
    "backward",
    "peer_kl_grad",
    "kl_rows",
    "entropy_rows",
]

ARCHES = ("linear-softmax", "one-hidden-mlp")
ENCODER_BLOCKS = ("enc_w", "enc_b")


def param_layout(arch: str, obs_dim: int, n_actions: int, hidden_dim: int = 32) -> dict:
    """Map block name to ``(slice, shape)`` in the flat parameter vector."""
    if arch == "one-hidden-mlp":
        shapes = [
            ("enc_w", (hidden_dim, obs_dim)),
            ("enc_b", (hidden_dim,)),
            ("pi_w", (n_actions, hidden_dim)),
            ("pi_b", (n_actions,)),
            ("v_w", (hidden_dim,)),
            ("v_b", (1,)),
        ]
    elif arch == "linear-softmax":
        shapes = [
            ("pi_w", (n_actions, obs_dim)),
            ("pi_b", (n_actions,)),
            ("v_w", (obs_dim,)),
            ("v_b", (1,)),
        ]
    else:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHES}")
    layout, start = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        layout[name] = (slice(start, start + size), shape)
        start += size
    return layout


@dataclass(eq=False)
class ObservationPolicy:
    arch: str
    obs_dim: int
    n_actions: int
    hidden_dim: int = 32
    params: np.ndarray = field(default=None, repr=False)
    seed: int | None = None

    def __post_init__(self):
        self.layout = param_layout(self.arch, self.obs_dim, self.n_actions, self.hidden_dim)
        if self.params is None:
            self.params = np.zeros(self.n_params)
        self.params = np.array(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"params has shape {self.params.shape}, expected ({self.n_params},)")

    @property
    def n_params(self) -> int:
        return max(sl.stop for sl, _ in self.layout.values())

    @property
    def has_encoder(self) -> bool:
        return "enc_w" in self.layout

    @property
    def feature_dim(self) -> int:
        return self.hidden_dim if self.has_encoder else self.obs_dim

    def block(self, name: str, params: np.ndarray | None = None) -> np.ndarray:
        sl, shape = self.layout[name]
        return (self.params if params is None else params)[sl].reshape(shape)

    def encoder_mask(self) -> np.ndarray:
        """Boolean mask over params, True on the encoder slice."""
        mask = np.zeros(self.n_params, dtype=bool)
        for name in ENCODER_BLOCKS:
            if name in self.layout:
                mask[self.layout[name][0]] = True
        return mask

    def with_params(self, params: np.ndarray) -> "ObservationPolicy":
        return ObservationPolicy(self.arch, self.obs_dim, self.n_actions, self.hidden_dim,
                                 np.array(params, dtype=np.float64), self.seed)

    def copy(self) -> "ObservationPolicy":
        return self.with_params(self.params.copy())

    def to_dict(self) -> dict:
        raw = np.ascontiguousarray(self.params, dtype="<f8").tobytes()
        return {
            "arch": self.arch,
            "obs_dim": self.obs_dim,
            "n_actions": self.n_actions,
            "hidden_dim": self.hidden_dim,
            "seed": self.seed,
            "layout": {k: [sl.start, sl.stop] for k, (sl, _) in self.layout.items()},
            "params_b64": base64.b64encode(raw).decode("ascii"),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ObservationPolicy":
        params = np.frombuffer(base64.b64decode(data["params_b64"]), dtype="<f8").astype(np.float64)
        return cls(data["arch"], int(data["obs_dim"]), int(data["n_actions"]),
                   int(data["hidden_dim"]), params, data.get("seed"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ObservationPolicy":
        return cls.from_dict(json.loads(text))


def init_policy(arch: str, obs_dim: int, n_actions: int, hidden_dim: int = 32,
                seed: int = 0, std: float = 0.1) -> ObservationPolicy:
    """Gaussian weights with standard deviation ``std``, zero biases."""
    policy = ObservationPolicy(arch, obs_dim, n_actions, hidden_dim, seed=seed)
    rng = make_rng(seed)
    params = np.zeros(policy.n_params)
    for name, (sl, shape) in policy.layout.items():
        if name.endswith("_w"):
            params[sl] = std * rng.standard_normal(sl.stop - sl.start)
    policy.params = params
    return policy


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _forward_cache(policy: ObservationPolicy, obs: np.ndarray, params: np.ndarray | None = None):
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    obs2 = obs[None, :] if single else obs
    if obs2.ndim != 2 or obs2.shape[1] != policy.obs_dim:
        raise ValueError(f"observation dimension {obs.shape} does not match obs_dim={policy.obs_dim}")
    if not np.all(np.isfinite(obs2)):
        bad = int(np.nonzero(~np.all(np.isfinite(obs2), axis=1))[0][0])
        raise ValueError(f"non-finite observation at sample {bad}")
    if policy.has_encoder:
        w, b = policy.block("enc_w", params), policy.block("enc_b", params)
        feats = np.tanh(obs2 @ w.T + b)
    else:
        feats = obs2
    logits = feats @ policy.block("pi_w", params).T + policy.block("pi_b", params)
    value = feats @ policy.block("v_w", params) + policy.block("v_b", params)[0]
    logp = log_softmax(logits)
    return obs2, feats, logp, value, single


def forward(policy: ObservationPolicy, obs: np.ndarray, params: np.ndarray | None = None):
    """Return ``(action_probs, value, encoder_features)``.

    Accepts one observation ``(obs_dim,)`` or a batch ``(n, obs_dim)``.
    """
    _, feats, logp, value, single = _forward_cache(policy, obs, params)
    probs = np.exp(logp)
    if single:
        return probs[0], float(value[0]), feats[0]
    return probs, value, feats


def action_log_probs(policy: ObservationPolicy, obs: np.ndarray, params=None) -> np.ndarray:
    """Log-probabilities over actions for a batch of observations."""
    return _forward_cache(policy, obs, params)[2]


def entropy_rows(logp: np.ndarray) -> np.ndarray:
    return -np.sum(np.exp(logp) * logp, axis=-1)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``KL(p || q)`` per row for strictly positive ``q``."""
    p = np.asarray(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return np.sum(terms, axis=-1)


@dataclass(frozen=True)
class LossSpec:
    """Coefficients of ``L = c_p L_p + c_1 L_v - c_2 L_e + alpha L_KL``."""

    policy_coef: float = 1.0
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    kl_weight: float = 0.0
    normalize_advantages: bool = True


@dataclass
class Minibatch:
    obs: np.ndarray
    actions: np.ndarray
    log_prob_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    peer_probs: np.ndarray | None = None

    def __len__(self):
        return len(self.actions)


def normalized_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def _backprop(policy, obs2, feats, dlogits, dvalue, params=None) -> np.ndarray:
    """Chain rule from d(loss)/d(logits) and d(loss)/d(value) to params."""
    grad = np.zeros(policy.n_params)

    def put(name, g):
        grad[policy.layout[name][0]] = g.ravel()

    put("pi_w", dlogits.T @ feats)
    put("pi_b", dlogits.sum(axis=0))
    put("v_w", dvalue @ feats)
    put("v_b", np.array([dvalue.sum()]))
    if policy.has_encoder:
        dfeat = dlogits @ policy.block("pi_w", params) + np.outer(dvalue, policy.block("v_w", params))
        dpre = dfeat * (1.0 - feats ** 2)
        put("enc_w", dpre.T @ obs2)
        put("enc_b", dpre.sum(axis=0))
    return grad


def loss_and_grad(policy: ObservationPolicy, spec: LossSpec, batch: Minibatch,
                  params: np.ndarray | None = None):
    """Scalar loss, its components and the analytic gradient.

    ``batch.peer_probs`` enters the KL term as a constant target.
    Returns ``(loss, components, grad)`` where components holds
    ``L_p, L_v, L_e, L_kl``.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty minibatch")
    obs2, feats, logp, value, _ = _forward_cache(policy, batch.obs, params)
    actions = np.asarray(batch.actions, dtype=np.int64)
    probs = np.exp(logp)
    rows = np.arange(n)
    adv = np.asarray(batch.advantages, dtype=np.float64)
    if spec.normalize_advantages:
        adv = normalized_advantages(adv)

    log_ratio = logp[rows, actions] - np.asarray(batch.log_prob_old, dtype=np.float64)
    with np.errstate(over="ignore"):
        ratio = np.exp(log_ratio)
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError(f"non-finite probability ratio at sample {int(np.argmax(~np.isfinite(ratio)))}")
    clipped = np.clip(ratio, 1.0 - spec.clip_eps, 1.0 + spec.clip_eps)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    l_p = -float(np.mean(np.minimum(unclipped_obj, clipped_obj)))
    # the unclipped branch carries gradient wherever it attains the min
    active = unclipped_obj <= clipped_obj
    d_logp_a = np.where(active, -ratio * adv, 0.0) / n

    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    dlogits = spec.policy_coef * d_logp_a[:, None] * (onehot - probs)

    returns = np.asarray(batch.returns, dtype=np.float64)
    l_v = 0.5 * float(np.mean((value - returns) ** 2))
    dvalue = spec.value_coef * (value - returns) / n

    ent = entropy_rows(logp)
    l_e = float(np.mean(ent))
    # dH/dz = -p * (log p + H)
    dlogits += -spec.entropy_coef * (-probs * (logp + ent[:, None])) / n

    l_kl = 0.0
    if batch.peer_probs is not None:
        peer = np.asarray(batch.peer_probs, dtype=np.float64)
        l_kl = float(np.mean(kl_rows(peer, probs)))
        dlogits += spec.kl_weight * (probs - peer) / n

    loss = spec.policy_coef * l_p + spec.value_coef * l_v - spec.entropy_coef * l_e + spec.kl_weight * l_kl
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    bad = ~np.all(np.isfinite(dlogits), axis=1) | ~np.isfinite(dvalue)
    if np.any(bad):
        raise FloatingPointError(f"non-finite gradient intermediate at sample {int(np.argmax(bad))}")
    grad = _backprop(policy, obs2, feats, dlogits, dvalue, params)
    components = {"L_p": l_p, "L_v": l_v, "L_e": l_e, "L_kl": l_kl}
    return loss, components, grad


def backward(policy: ObservationPolicy, spec: LossSpec, batch: Minibatch) -> np.ndarray:
    """Gradient of the total loss with respect to ``policy.params``."""
    return loss_and_grad(policy, spec, batch)[2]


def peer_kl_grad(peer: ObservationPolicy, obs: np.ndarray, own_probs: np.ndarray,
                 weight: float) -> np.ndarray:
    """Gradient of ``weight * mean KL(peer || own)`` with respect to the peer.

    Used only when the KL term is back-propagated into both agents.
    """
    obs2, feats, logq, _, _ = _forward_cache(peer, obs)
    q = np.exp(logq)
    kl = np.sum(q * (logq - np.log(own_probs)), axis=1)
    dlogits = weight * q * (logq - np.log(own_probs) - kl[:, None]) / len(obs2)
    return _backprop(peer, obs2, feats, dlogits, np.zeros(len(obs2)))
