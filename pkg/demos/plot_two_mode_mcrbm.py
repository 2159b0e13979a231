"""
Fitting a mean-covariance RBM to two kinds of noise
===================================================

Two clusters in eight dimensions: mode A is a blob shifted one way, mode B
is shifted the other way and also wobbles strongly along one hidden
direction ``u``.  The shift is a job for the mean units.  The wobble is a
job for the covariance units, which stay on for typical inputs and switch
off when a factor sees an unusually large projection.
"""

import numpy as np
from rgcmodes import evaluation, mcrbm

rng = np.random.default_rng(0)
n, dim = 2000, 8

mu = rng.standard_normal(dim)
mu *= 1.2 / np.linalg.norm(mu)
u = rng.standard_normal(dim)
u /= np.linalg.norm(u)

a = mu + 0.5 * rng.standard_normal((n, dim))
b = -mu + 0.5 * rng.standard_normal((n, dim)) + 1.5 * rng.standard_normal((n, 1)) * u
data = np.vstack([a, b])
which = np.repeat([0, 1], n)
data = (data - data.mean(0)) / data.std(0)

###############################################################################
# Train with persistent contrastive divergence.  ``train`` shuffles
# minibatches with the hyperparameter seed, so this is reproducible.

hyper = mcrbm.Hyperparams(n_vis=dim, n_mean=4, n_factors=8, n_cov=4, epochs=50,
                          learning_rate=3e-2, minibatch_size=50, seed=1)
model = mcrbm.train(data, hyper)

states = mcrbm.encode(data, model)
rep = evaluation.mutual_information(states, which)
print(f"{rep.n_distinct_states} distinct states, "
      f"normalized MI with the mode {rep.normalized_mi:.3f}")
for key, count in list(evaluation.state_occupancy(states).items())[:4]:
    print(f"  state {key}: {count:5d} points, {np.mean(which[states.keys == key] == 0):.0%} from A")

###############################################################################
# Covariance units: on almost everywhere, off for the B points that sit far
# out along ``u``.

off = states.h_c.min(axis=1) == 0
proj = np.abs(data @ u)
print(f"some covariance unit off: {off[:n].mean():.1%} of A, {off[n:].mean():.1%} of B")
print(f"|projection on u|: {proj[n:][off[n:]].mean():.2f} when off, "
      f"{proj[n:][~off[n:]].mean():.2f} when all on (mode B)")

###############################################################################
# The conditional Gaussian makes this concrete.  Switching the covariance
# units off removes their precision, so variance along ``u`` opens up.

h_m = states.h_m[n]
for h_c in (np.ones(4), np.zeros(4)):
    _, cov = mcrbm.visible_moments(h_m, h_c, model)
    draws = mcrbm.sample_visible(np.tile(h_m, (5000, 1)), np.tile(h_c, (5000, 1)), model, seed=2)
    print(f"h_c = {h_c.astype(int)}: variance along u {u @ cov @ u:.2f} "
          f"(sampled {np.var(draws @ u):.2f}), mean variance {np.trace(cov) / dim:.2f}")
