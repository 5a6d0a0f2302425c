# coding: utf-8

# # Baseline PPO versus a mutually learning pair on the coin corridor
#
# The agent walks a one-row corridor towards a coin. In the training
# renderings the background color gives away the coin side, so a policy can
# score well on them by reading the background. Held-out renderings break
# that shortcut. We train one PPO agent and one pair of agents that also pull
# their action distributions towards each other, then compare exact returns.
#
# One seed at 200k steps takes a couple of minutes on one core.

# In[1]:

import numpy as np

from metarep.harness import build_environment
from metarep.rendering import coin_optimal_values
from metarep.trainer import PpoConfig, exact_returns, train


# In[2]:

mdp, family = build_environment("coin-grid", "distractor-correlated", n_functions=8, n_train=4, seed=3)
print("obs dim", family.obs_dim, "train members", int(family.train_mask.sum()), "of", len(family.members))
print("best achievable return", float(mdp.rho @ coin_optimal_values(mdp, family.semantics)))


# In[3]:

config = PpoConfig(total_steps=200_000, seed=0, log_every=10, eval_episodes=8)
baseline = train(mdp, family, config, "baseline")
pair = train(mdp, family, config, "dml")


# The metrics rows hold exact returns on the training split (eta) and on the
# whole family (zeta) at every logging step.

# In[4]:

for row in baseline.metrics[-3:]:
    print("baseline", row["iteration"], round(row["eta_exact"], 2), round(row["zeta_exact"], 2))


# In[5]:

eta_b, zeta_b = exact_returns(baseline.agents[0], family, mdp)
pair_returns = np.array([exact_returns(a, family, mdp) for a in pair.agents])
print(f"baseline  eta {eta_b:.2f} zeta {zeta_b:.2f}")
print(f"pair mean eta {pair_returns[:, 0].mean():.2f} zeta {pair_returns[:, 1].mean():.2f}")
