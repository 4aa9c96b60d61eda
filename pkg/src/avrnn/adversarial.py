"""Weight-clipped recurrent critic and the two regularization sub-steps.

The critic scores whole latent sequences.  Its loss on a batch is::

    L_dis = sum_i [ D(z^(i)) - D(z~^(i)) ]

with ``z`` drawn along the prior path and ``z~`` along the posterior path.
The critic step descends ``L_dis`` in the critic parameters and then clips
them into ``[-c, c]``; the adversarial step descends ``-L_dis`` in the
transition (``omega``) and proposal (``tau``) parameters.  ``-L_dis / m`` is
the running Earth-Mover distance estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import DenseLayer, ParameterStore, RecurrentCell, clip_params, frozen, init_params, lstm_step, rmsprop_step
from .vrnn import ModelBundle, as_batch, latent_paths


@dataclass
class AdvConfig:
    clip: float = 0.01
    n_critic: int = 1
    lr_critic: float = 5e-5
    lr_adv: float = 5e-5
    critic_state: int = 128
    critic_width: int = 100
    rms_decay: float = 0.9
    rms_eps: float = 1e-8

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip must be > 0")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.critic_state < 1 or self.critic_width < 1:
            raise ValueError("critic sizes must be >= 1")


class Critic:
    """LSTM over the latent sequence, two tanh layers, then a linear score."""

    def __init__(self, z_dim: int, state: int = 128, width: int = 100, seed: Optional[int] = 0):
        self.z_dim = z_dim
        self.state = state
        self.width = width
        self.store = ParameterStore()
        s = self.store
        self.cell = RecurrentCell(s, "critic.lstm", "lstm", z_dim, state, "eta")
        self.fc1 = DenseLayer(s, "critic.fc1", state, width, "eta", "tanh")
        self.fc2 = DenseLayer(s, "critic.fc2", width, width, "eta", "tanh")
        self.head = DenseLayer(s, "critic.head", width, 1, "eta", "none")
        if seed is not None:
            init_params(s, seed)

    def to_meta(self) -> Dict[str, str]:
        return {"critic.z_dim": str(self.z_dim), "critic.state": str(self.state),
                "critic.width": str(self.width)}

    @classmethod
    def from_meta(cls, meta: Dict[str, str]) -> "Critic":
        return cls(int(meta["critic.z_dim"]), int(meta["critic.state"]), int(meta["critic.width"]), seed=None)

    def __call__(self, z_seq: Sequence) -> Tensor:
        return critic_score(self, z_seq)


def critic_score(d: Critic, z_seq: Sequence) -> Tensor:
    """Score each sequence in a batch; ``z_seq`` is T steps of ``(rows, z_dim)``. Returns ``(rows,)``."""
    if len(z_seq) == 0:
        raise ValueError("critic needs a nonempty sequence")
    steps = [ad._as_tensor(z) for z in z_seq]
    for z in steps:
        if z.shape[-1] != d.z_dim:
            raise ad.ShapeError(f"critic expects latent dimension {d.z_dim}, got {z.shape}")
    rows = steps[0].shape[:-1]
    h = ad.Tensor._from_op(np.zeros(rows + (d.state,)), False)
    c = h
    for z in steps:
        h, c = lstm_step(d.cell, z, h, c)
    out = d.head(d.fc2(d.fc1(h)))
    return ad.reshape(out, rows)


Scorer = Union[Critic, Callable[[Sequence], Tensor]]


def critic_loss(d: Scorer, prior_seqs: Sequence, post_seqs: Sequence) -> Tensor:
    """``sum_i [D(prior_i) - D(post_i)]`` over a batch of latent sequences."""
    if len(prior_seqs) != len(post_seqs):
        raise ValueError("prior and posterior sequences differ in length")
    pb = ad._as_tensor(prior_seqs[0]).shape[0]
    qb = ad._as_tensor(post_seqs[0]).shape[0]
    if pb != qb:
        raise ValueError(f"batch sizes differ: {pb} vs {qb}")
    if isinstance(d, Critic):
        stacked = [ad.concat([p, q], axis=0) for p, q in zip(prior_seqs, post_seqs)]
        return _stacked_loss(critic_score(d, stacked))
    return (d(prior_seqs) - d(post_seqs)).sum()


def _stacked_loss(scores: Tensor) -> Tensor:
    n = scores.shape[0] // 2
    return ad.slice_(scores, 0, n, axis=0).sum() - ad.slice_(scores, n, 2 * n, axis=0).sum()


def em_estimate(loss: float, m: int) -> float:
    """``-L_dis / m``: the Earth-Mover distance estimate of a trained critic."""
    if m < 1:
        raise ValueError("batch size must be >= 1")
    return -float(loss) / m


def _draw(rng: np.random.Generator, T: int, m: int, zd: int):
    return rng.standard_normal((T, m, zd)), rng.standard_normal((T, m, zd))


def critic_train_step(d: Critic, m: ModelBundle, batch, cfg: AdvConfig,
                      rng: np.random.Generator) -> float:
    """One critic update on a batch: RMSProp on ``eta``, then clip. Returns pre-step ``L_dis``."""
    x = as_batch(getattr(batch, "x", batch))
    nb, T, _ = x.shape
    eps_p, eps_q = _draw(rng, T, nb, m.cfg.z_dim)
    with ad.no_grad():
        z_seq = latent_paths(m, x, eps_p, eps_q)
    z_seq = [ad.detach(z) for z in z_seq]
    params = d.store.tensors("eta")
    with ad.Tape():
        loss = _stacked_loss(critic_score(d, z_seq))
        grads = ad.backward(loss, inputs=params)
    rmsprop_step(d.store, grads, cfg.lr_critic, cfg.rms_decay, cfg.rms_eps, tags=("eta",))
    clip_params(d.store, "eta", cfg.clip)
    return loss.item()


def adversarial_loss(d: Critic, m: ModelBundle, x, prior_noise, post_noise) -> Tensor:
    """``-L_dis = sum_i [D(z~_i) - D(z_i)]`` with gradients reaching the model."""
    return -_stacked_loss(critic_score(d, latent_paths(m, x, prior_noise, post_noise)))


def adversarial_train_step(d: Critic, m: ModelBundle, batch, cfg: AdvConfig,
                           rng: np.random.Generator) -> float:
    """One RMSProp update of ``omega`` and ``tau`` on ``-L_dis``. Returns pre-step ``-L_dis``."""
    x = as_batch(getattr(batch, "x", batch))
    nb, T, _ = x.shape
    eps_p, eps_q = _draw(rng, T, nb, m.cfg.z_dim)
    params = m.store.tensors(("omega", "tau"))
    with ad.Tape(), frozen(d.store.tensors()):
        loss = adversarial_loss(d, m, x, eps_p, eps_q)
        grads = ad.backward(loss, inputs=params)
    rmsprop_step(m.store, grads, cfg.lr_adv, cfg.rms_decay, cfg.rms_eps, tags=("omega", "tau"))
    return loss.item()


def critic_lipschitz(d: Critic, z_seq: Sequence) -> float:
    """Largest input-gradient norm of the critic over a batch of sequences.

    A local estimate of the critic's Lipschitz constant (a lower bound on it),
    used to put the raw score gap of a clipped critic on a 1-Lipschitz scale.
    """
    zs = [ad.Tensor(ad._as_tensor(z).data, requires_grad=True) for z in z_seq]
    with ad.Tape():
        s = critic_score(d, zs).sum()
        grads = ad.backward(s, inputs=zs)
    sq = sum(np.sum(grads[z] ** 2, axis=-1) for z in zs)
    return float(np.sqrt(np.max(sq)))
