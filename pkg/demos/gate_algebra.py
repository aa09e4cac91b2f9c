"""When does the confidence gate open, and how often does it open for a competent policy?

Run: python demos/gate_algebra.py
"""

import numpy as np

from hapolab.gating import confidence, exact_open_probability, gate_threshold_count, hoeffding_bound
from hapolab.metrics import hoeffding_suite, threshold_enumeration

# The posterior mean of a Beta(1,1) prior after S successes in N rollouts.
N = 8
for s in range(N + 1):
    print(f"S={s}/{N}  confidence={confidence(s, N):.3f}")

# The gate opens (teacher injected) iff confidence < gamma, which is a count threshold.
gamma = 0.8
print(f"\ngamma={gamma}: opens iff S < {gate_threshold_count(N, gamma):.2f}")
print("exceptions in the exhaustive check:", len(threshold_enumeration(max_n=64)))

# For a policy with true success rate mu > gamma, the open probability decays with N.
mu = 0.95
print(f"\nmu={mu}, gamma={gamma}")
print(" N   exact    bound")
for n in (4, 8, 16, 32, 64):
    print(f"{n:3d}  {exact_open_probability(n, mu, gamma):.4f}  {hoeffding_bound(n, mu, gamma):.4f}")

# The bound is on the count, the gate acts on the smoothed mean: with a
# small group and a high threshold the prior keeps confidence below gamma.
print(f"\nN=4 gamma=0.9: max confidence {confidence(4, 4):.3f} < 0.9, so the gate never closes")
reports = hoeffding_suite(n_groups=20_000, seed=0)
bad = [(r.n, r.gamma, r.mu) for r in reports if not r.passed]
print(f"{len(reports) - len(bad)}/{len(reports)} grid cells within the envelope; outside: {bad}")
print("empirical open frequencies (N=32):",
      np.round([r.empirical_open_frequency for r in reports if r.n == 32], 4))
