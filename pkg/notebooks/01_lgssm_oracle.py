"""
Exact likelihoods for the LGSSM family
======================================

The synthetic data has a 1-D latent AR(1) state observed through a fixed
loading vector, so ``log p(x_{1:T})`` is available in closed form from the
Kalman filter.  This script generates a few sequences and checks the filter
against the brute-force joint Gaussian density.
"""

import math

import numpy as np

from avrnn.data import LgssmParams, gen_lgssm, kalman_loglik

p = LgssmParams(a=0.9, q=0.5, cobs=1.0, r=0.5, s0=1.0)
ds = gen_lgssm(p, n=5, T=12, x_dim=3, seed=0)
print("dataset", ds.x.shape, "per-step exact loglik", np.round(ds.loglik / ds.T, 3))

# %%
# The same numbers from the (T * x_dim)-dimensional Gaussian the sequence is drawn from.

T, d = ds.T, ds.x_dim
var = np.empty(T)
var[0] = p.s0 ** 2
for t in range(1, T):
    var[t] = p.a ** 2 * var[t - 1] + p.q ** 2
lat = np.array([[p.a ** abs(s - t) * var[min(s, t)] for t in range(T)] for s in range(T)])
cov = np.kron(lat, np.ones((d, d))) * p.cobs ** 2 + p.r ** 2 * np.eye(T * d)
_, logdet = np.linalg.slogdet(cov)
brute = [-0.5 * (T * d * math.log(2 * math.pi) + logdet + v @ np.linalg.solve(cov, v))
         for v in ds.x.reshape(5, -1)]
print("max abs difference:", np.max(np.abs(np.array(brute) - kalman_loglik(p, ds.x))))
