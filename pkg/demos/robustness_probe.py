# coding: utf-8

# # How much do random input maps move a trained policy?
#
# Each perturbation is a Gaussian square matrix applied to the observation
# before the encoder. We roll out the clean policy on held-out renderings and
# average the KL divergence between clean and perturbed action distributions
# at every step. Then we keep the encoder, draw fresh heads and retrain only
# the heads to see how reusable the features are.

# In[1]:

import dataclasses

from metarep.harness import build_environment
from metarep.robustness import (export_embeddings, feature_dispersion, frozen_encoder_retrain, make_suite,
                                robustness_test)
from metarep.trainer import PpoConfig, exact_returns, train


# In[2]:

mdp, family = build_environment("coin-grid", "distractor-correlated", n_functions=8, n_train=4, seed=3)
config = PpoConfig(total_steps=100_000, seed=1, log_every=10**9, eval_episodes=8)
agent = train(mdp, family, config, "baseline", evaluate=False).agents[0]


# In[3]:

suite = make_suite(family.obs_dim, n_perturbations=50, seed=2)
record = robustness_test(agent, mdp, family, suite, n_steps=100, seed=3)
print(f"KL(clean || perturbed) {record.summary_mean:.3f} +/- {record.summary_std:.3f}")
print(f"KL(perturbed || clean) {record.reverse_summary[0]:.3f}")


# Encoder features of a few observations under every perturbation. The
# spread within one observation is a rough picture of the same effect.

# In[4]:

observations = family.members[-1].obs_table[:4]
rows = export_embeddings(agent, observations, suite)
print(rows.shape, "mean within-observation distance", round(feature_dispersion(rows), 3))


# In[5]:

retrained = frozen_encoder_retrain(agent, mdp, family, dataclasses.replace(config, total_steps=50_000), evaluate=False)
print("zeta before", round(exact_returns(agent, family, mdp)[1], 2),
      "after head retraining", round(exact_returns(retrained.agents[0], family, mdp)[1], 2))
