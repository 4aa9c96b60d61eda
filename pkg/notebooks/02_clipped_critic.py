"""
What a weight-clipped critic measures
=====================================

A frozen toy model has prior N(0, 1) and posterior N(1, 1) for a single
latent step, so the Earth-Mover distance between them is exactly 1.  The
default critic is clipped to [-0.01, 0.01], which caps its slope; the raw
score gap therefore estimates ``K * W1`` for the critic's slope ``K``.
Dividing by a local slope estimate recovers ``W1``.
"""

import numpy as np

from avrnn import autodiff as ad
from avrnn.adversarial import AdvConfig, Critic, critic_lipschitz, critic_train_step, em_estimate
from avrnn.vrnn import ModelBundle, VrnnConfig, latent_paths, split_paths

SP1 = np.log(np.e - 1.0)  # softplus(SP1) = 1

m = ModelBundle(VrnnConfig(x_dim=1, z_dim=1, h_dim=2, x_enc_dim=2, z_enc_dim=2, hidden_dim=0), seed=0)
for name in m.store:
    if m.store.tag_of(name) in ("omega", "tau"):
        m.store[name].data[...] = 0.0
m.store["tr.scale.bias"].data[...] = SP1
m.store["ps.scale.bias"].data[...] = SP1
m.store["ps.loc.bias"].data[...] = 1.0

for clip in (0.01, 0.1):
    d = Critic(1, seed=0)
    cfg, rng = AdvConfig(clip=clip), np.random.default_rng(0)
    for i in range(1000):
        critic_train_step(d, m, rng.standard_normal((64, 1, 1)), cfg, rng)
    n = 4096
    eps = rng.standard_normal((2, 1, n, 1))
    with ad.no_grad():
        z = latent_paths(m, np.zeros((n, 1, 1)), eps[0], eps[1])
        s = d(z).data
    est = em_estimate(s[:n].sum() - s[n:].sum(), n)
    slope = critic_lipschitz(d, split_paths(z)[0])
    print(f"clip {clip}: raw estimate {est:.4f}, slope {slope:.4f}, estimate / slope {est / slope:.3f}")
