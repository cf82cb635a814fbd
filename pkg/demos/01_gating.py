"""
Adaptive gating on a handful of tokens
======================================

Each token gets a probability vector from the gate. Adaptive routing sends a
token to its second expert only when the top two probabilities are close.
"""

import numpy as np

from adaptmoe.moe import TOP1, TOP2, RoutingPolicy, route, select_experts

# a confident token and an undecided one
confident = np.array([0.70, 0.10, 0.10, 0.10])
undecided = np.array([0.36, 0.34, 0.20, 0.10])

policy = RoutingPolicy("adaptive", threshold=0.1)
for name, p in [("confident", confident), ("undecided", undecided)]:
    d = select_experts(p, policy)
    print(f"{name:10s} experts={d.expert_ids} weights={np.round(d.weights, 3)}")

# the gap is (p1 - p2) / (p1 + p2); the undecided token has gap 0.029
print("gap of undecided token:", (0.36 - 0.34) / (0.36 + 0.34))

# %%
# Sweeping the threshold on random gate outputs. T=0 is plain top-1 and
# T=1 is plain top-2; in between the share of two-expert tokens grows.
rng = np.random.default_rng(0)
logits = rng.normal(scale=2.0, size=(5000, 8))
probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)

for t in [0.0, 0.05, 0.1, 0.2, 0.4, 1.0]:
    r = route(probs, RoutingPolicy("adaptive", t))
    print(f"T={t:<4}  top-2 share {r.is_top2.mean():.3f}   expert calls per token {r.invocations / len(r):.3f}")

print("top1:", route(probs, TOP1).is_top2.mean(), " top2:", route(probs, TOP2).is_top2.mean())
