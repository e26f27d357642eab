"""Small regression builders shared by the test modules."""

import numpy as np

from dualid.estimators import Regression, build_regression
from dualid.model import ParamEntry, concatenate
from dualid.simulate import random_excitation, simulate_inverse


def make_reg(Y, tau, qd=None, M0=None, Mp=None, prior=()):
    Y = np.asarray(Y, dtype=float)
    N, n, d = Y.shape
    return Regression(
        Y=Y, tau=np.asarray(tau, dtype=float),
        qd=np.ones((N, n)) if qd is None else np.asarray(qd, dtype=float),
        M0=np.tile(np.eye(n), (N, 1, 1)) if M0 is None else np.asarray(M0, dtype=float),
        Mp=np.zeros((N, d, n, n)) if Mp is None else np.asarray(Mp, dtype=float),
        constraints=(), layout=tuple(ParamEntry(f"p{j}", "test") for j in range(d)),
        prior_blocks=tuple(prior),
    )


def random_reg(seed, N=30, n=2, d=3, stds=1.0):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((N, n, d))
    pi = rng.standard_normal(d)
    tau = Y @ pi + rng.standard_normal((N, n)) * np.asarray(stds)
    return make_reg(Y, tau), pi


def noiseless(mech, seed=0, count=2):
    rng = np.random.default_rng(seed)
    data = [simulate_inverse(mech, random_excitation(mech, rng, duration=10.0, rate=20.0)) for _ in range(count)]
    return build_regression(mech, concatenate(data))


def trajectory(mech, seed=0, duration=10.0, rate=50.0):
    ex = random_excitation(mech, np.random.default_rng(seed), duration=duration, rate=rate)
    return simulate_inverse(mech, ex)
