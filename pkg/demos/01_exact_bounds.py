"""How tight is InfoNCE on a three-letter alphabet?

Every quantity here is computed exactly by enumerating the alphabet, so no
sampling noise gets in the way. We fix a positive distribution ``q1`` and a
negative distribution ``q0`` and follow what happens as the number of
negatives ``K`` grows.

Run with ``python demos/01_exact_bounds.py``.
"""

import math

import numpy as np

from contrastive_mi import oracle as orc

pair = orc.DiscretePair(q1=[0.3, 0.1, 0.6], q0=[0.2, 0.6, 0.2])
kl = orc.exact_kl(pair)
print(f"KL(q1 || q0) = {kl:.4f} bits\n")

# With the true ratio plugged in, the InfoNCE objective reaches the K-way
# Jensen-Shannon divergence. Both are capped by log2 K, so small K
# underestimates a large KL no matter how good the critic is.
print(f"{'K':>3} {'log2 K':>8} {'InfoNCE(true r)':>16} {'K-way JSD':>10} {'closed form':>12}")
for k in (1, 2, 3, 4, 6):
    nce = orc.infonce_objective(pair, k, pair.ratio)
    kjsd = orc.exact_kjsd(pair, k)
    bound = orc.theorem1_bound(kl, k)
    print(f"{k:>3} {math.log2(k):>8.4f} {nce:>16.4f} {kjsd:>10.4f} {bound:>12.4f}")

# Any rescaling of the ratio leaves InfoNCE unchanged. A badly shaped critic
# does strictly worse.
rng = np.random.default_rng(0)
print("\nInfoNCE at K=2 for different critics:")
print(f"  3.7 * true ratio : {orc.infonce_objective(pair, 2, 3.7 * pair.ratio):.4f}")
print(f"  random ratio     : {orc.infonce_objective(pair, 2, np.exp(rng.normal(size=3))):.4f}")

# The closed-form expression in the last column is not a true ceiling for
# the K-way JSD. At K=2 this pair already beats it. The lower bound
# KL - log2(1 + chi2/K) does hold.
chi2 = orc.exact_chi2(pair)
kjsd2 = orc.exact_kjsd(pair, 2)
print(f"\nK=2: K-way JSD {kjsd2:.5f} vs closed form {orc.theorem1_bound(kl, 2):.5f}")
print(f"     lower bound KL - log2(1 + chi2/K) = {kl - math.log2(1 + chi2 / 2):.5f}")
