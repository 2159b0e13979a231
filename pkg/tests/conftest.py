import itertools

import numpy as np
import pytest

from rgcmodes import mcrbm


def random_model(rng, n_vis=3, n_mean=2, n_factors=3, n_cov=2, scale=0.7, eps=1.0):
    """Small mcRBM with parameters large enough to make every term matter."""
    hyper = mcrbm.Hyperparams(n_vis=n_vis, n_mean=n_mean, n_factors=n_factors, n_cov=n_cov,
                              minibatch_size=4, precision_floor=eps)
    R = rng.standard_normal((n_vis, n_factors))
    R /= np.linalg.norm(R, axis=0)
    return mcrbm.McRbmModel(
        W=scale * rng.standard_normal((n_vis, n_mean)),
        a=scale * rng.standard_normal(n_vis),
        c=scale * rng.standard_normal(n_mean),
        R=R,
        P=-scale * np.abs(rng.standard_normal((n_factors, n_cov))),
        d=scale * rng.standard_normal(n_cov),
        hyper=hyper,
        chains=rng.standard_normal((4, n_vis)),
    )


def brute_force_partition(v, model):
    """sum over every binary (h_m, h_c) of exp(-E), written out term by term."""
    total = 0.0
    for hm in itertools.product([0, 1], repeat=model.n_mean):
        for hc in itertools.product([0, 1], repeat=model.n_cov):
            hm_, hc_ = np.array(hm, float), np.array(hc, float)
            e = 0.5 * model.eps * np.sum((v - model.a) ** 2)
            e -= model.c @ hm_ + v @ model.W @ hm_
            e -= model.d @ hc_
            e -= sum(hc_[k] * sum(model.P[f, k] * (v @ model.R[:, f]) ** 2
                                  for f in range(model.n_factors))
                     for k in range(model.n_cov))
            total += np.exp(-e)
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
