# coding: utf-8

# # Checking the return bounds on a small random instance
#
# A tabular MDP is seen through several rendering functions. Each one turns a
# state into an observation vector, and a policy acting on observations
# induces a different state policy under every rendering. Here we draw one
# random instance, lift two nearby policies through the family and look at
# the quantities the bounds are built from.

# In[1]:

from metarep.bounds import (THEOREMS, compute_report, lift_pair, random_instance, run_campaign,
                            training_and_generalization_returns)


# In[2]:

mdp, family, pi, pi_tilde = random_instance(seed=11, n_functions=6, n_train=3)
print("states", mdp.n_states, "actions", mdp.n_actions, "gamma", mdp.gamma)
print("training mass Z =", family.Z)


# Lifting gives one state policy per rendering function. The returns on the
# training split and on the whole family usually differ because the policy
# does not treat all renderings alike.

# In[3]:

pair = lift_pair(pi, pi_tilde, family, mdp)
returns = training_and_generalization_returns(pair, family)
for key, value in returns.items():
    print(f"{key:>14s} {value: .6f}")


# In[4]:

report = compute_report(pair, family, mdp)
for t in THEOREMS:
    lhs, rhs = getattr(report, f"lhs_{t}"), getattr(report, f"rhs_{t}")
    print(f"{t:>10s} lhs {lhs: .5f} rhs {rhs: .5f} holds {getattr(report, f'holds_{t}')}")


# The R term measures how far apart the lifted policies of one observation
# policy are across renderings. A policy that ignores its input gets R = 0.

# In[5]:

print("R(pi) =", report.R_pi, " R(pi~) =", report.R_pi_tilde)


# A campaign repeats this over many random instances and keeps the smallest
# margin per inequality. Negative margins of order 1e-14 are rounding.

# In[6]:

_, summary = run_campaign(200, seed=5)
print(summary["failures"], "failures in", summary["instances"], "instances")
print({t: f"{s:.2e}" for t, s in summary["min_slack_per_theorem"].items()})
