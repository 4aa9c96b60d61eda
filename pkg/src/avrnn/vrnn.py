"""Variational RNN core: transition prior, proposal, emission and the GRU state.

One step of the inference path, for a batch of ``m`` sequences::

    P(z_t) = TR(h_{t-1})
    Q(z_t) = PS(phi_x(x_t), h_{t-1})       mean = stop_grad(mean of P) + offset
    z_t    ~ Q(z_t)                        reparameterized
    x_t    ~ EM(phi_z(z_t), h_{t-1})       log-likelihood term
    h_t    = GRU([phi_x(x_t), phi_z(z_t)], h_{t-1})

The posterior mean is an offset around the prior mean.  The prior mean enters
through a stop-gradient so that the reconstruction loss never reaches the
transition parameters; the transition network only learns through the
adversarial phase.

With ``tied_posterior=True`` the proposal returns the transition prior itself
(zero offset, shared scale head).  This is the degenerate configuration in
which prior and posterior coincide exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    BernoulliVec,
    DiagGaussian,
    bernoulli_logpmf,
    bernoulli_sample,
    gaussian_kl,
    gaussian_logpdf,
    gaussian_sample,
)
from .nn import DenseLayer, Mlp, ParameterStore, RecurrentCell, gru_step, init_params


@dataclass
class VrnnConfig:
    x_dim: int = 1
    z_dim: int = 4
    h_dim: int = 32
    emission_kind: str = "gaussian"
    x_enc_dim: int = 16
    z_enc_dim: int = 16
    hidden_dim: int = 32
    activation: str = "tanh"
    tied_posterior: bool = False

    def __post_init__(self):
        for k in ("x_dim", "z_dim", "h_dim", "x_enc_dim", "z_enc_dim"):
            if int(getattr(self, k)) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.hidden_dim < 0:
            raise ValueError("hidden_dim must be >= 0")
        if self.emission_kind not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown emission kind {self.emission_kind!r}")
        if self.activation not in ("none", "tanh", "sigmoid", "softplus"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_meta(self) -> Dict[str, str]:
        return {f"vrnn.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: Dict[str, str]) -> "VrnnConfig":
        kw = {}
        for f in cls.__dataclass_fields__.values():
            key = f"vrnn.{f.name}"
            if key not in meta:
                raise KeyError(f"checkpoint lacks {key}")
            raw = meta[key]
            if f.type in ("int", int):
                kw[f.name] = int(raw)
            elif f.type in ("bool", bool):
                kw[f.name] = raw == "True"
            else:
                kw[f.name] = raw
        return cls(**kw)


class _Head:
    """Optional hidden layer followed by a location head and a scale or probability head."""

    def __init__(self, store, prefix, in_dim, out_dim, tag, hidden, act, second):
        self.body = Mlp.build(store, f"{prefix}.body", [in_dim, hidden], tag, act) if hidden else Mlp()
        width = hidden or in_dim
        self.loc = DenseLayer(store, f"{prefix}.loc", width, out_dim, tag, "none") if second != "sigmoid" else None
        self.second = DenseLayer(store, f"{prefix}.{'prob' if second == 'sigmoid' else 'scale'}",
                                 width, out_dim, tag, second)

    def __call__(self, x):
        feat = self.body(x)
        return (self.loc(feat) if self.loc is not None else None), self.second(feat)


class ModelBundle:
    """All trainable pieces of the sequence model, sharing one parameter store.

    ``stop_prior_grad`` (default on) blocks gradients through the prior mean
    inside the posterior.  Switching it off changes no forward value; it only
    lets finite differences and autodiff agree on the full total derivative.
    """

    def __init__(self, cfg: VrnnConfig, seed: Optional[int] = 0):
        self.cfg = cfg
        self.stop_prior_grad = True
        self.store = ParameterStore()
        s = self.store
        act = cfg.activation
        self.enc_x = DenseLayer(s, "enc_x", cfg.x_dim, cfg.x_enc_dim, "theta", act)
        self.enc_z = DenseLayer(s, "enc_z", cfg.z_dim, cfg.z_enc_dim, "theta", act)
        self.rnn = RecurrentCell(s, "rnn", "gru", cfg.x_enc_dim + cfg.z_enc_dim, cfg.h_dim, "theta")
        self.tr = _Head(s, "tr", cfg.h_dim, cfg.z_dim, "omega", cfg.hidden_dim, act, "softplus")
        self.ps = _Head(s, "ps", cfg.x_enc_dim + cfg.h_dim, cfg.z_dim, "tau", cfg.hidden_dim, act, "softplus")
        em_second = "softplus" if cfg.emission_kind == "gaussian" else "sigmoid"
        self.em = _Head(s, "em", cfg.z_enc_dim + cfg.h_dim, cfg.x_dim, "phi", cfg.hidden_dim, act, em_second)
        if seed is not None:
            init_params(s, seed)

    def zero_state(self, batch: int) -> Tensor:
        return ad.Tensor(np.zeros((batch, self.cfg.h_dim)))


def _check_dim(t: Tensor, d: int, what: str):
    if t.shape[-1] != d:
        raise ad.ShapeError(f"{what}: expected last dimension {d}, got {t.shape}")


def transition_prior(m: ModelBundle, h_prev) -> DiagGaussian:
    h_prev = ad._as_tensor(h_prev)
    _check_dim(h_prev, m.cfg.h_dim, "transition_prior")
    mu, sigma = m.tr(h_prev)
    return DiagGaussian(mu, sigma)


def _posterior(m: ModelBundle, x_enc: Tensor, h_prev: Tensor, prior: DiagGaussian) -> DiagGaussian:
    if m.cfg.tied_posterior:
        return prior
    offset, sigma = m.ps(ad.concat([x_enc, h_prev], axis=-1))
    mu_p = ad.detach(prior.mu) if m.stop_prior_grad else prior.mu
    return DiagGaussian(mu_p + offset, sigma)


def proposal_posterior(m: ModelBundle, x_t, h_prev, prior: Optional[DiagGaussian] = None) -> DiagGaussian:
    x_t = ad._as_tensor(x_t)
    h_prev = ad._as_tensor(h_prev)
    _check_dim(x_t, m.cfg.x_dim, "proposal_posterior")
    _check_dim(h_prev, m.cfg.h_dim, "proposal_posterior")
    if prior is None:
        prior = transition_prior(m, h_prev)
    return _posterior(m, m.enc_x(x_t), h_prev, prior)


def _emission(m: ModelBundle, z_enc: Tensor, h_prev: Tensor):
    loc, second = m.em(ad.concat([z_enc, h_prev], axis=-1))
    if m.cfg.emission_kind == "gaussian":
        return DiagGaussian(loc, second)
    return BernoulliVec(second)


def emission(m: ModelBundle, z_t, h_prev):
    """Output distribution p(x_t | z_t, h_{t-1}): DiagGaussian or BernoulliVec."""
    z_t = ad._as_tensor(z_t)
    h_prev = ad._as_tensor(h_prev)
    _check_dim(z_t, m.cfg.z_dim, "emission")
    _check_dim(h_prev, m.cfg.h_dim, "emission")
    return _emission(m, m.enc_z(z_t), h_prev)


def _loglik(dist, x: Tensor) -> Tensor:
    if isinstance(dist, DiagGaussian):
        return gaussian_logpdf(dist, x)
    return bernoulli_logpmf(dist, x)


def _update(m: ModelBundle, h_prev: Tensor, x_enc: Tensor, z_enc: Tensor) -> Tensor:
    return gru_step(m.rnn, ad.concat([x_enc, z_enc], axis=-1), h_prev)


def state_update(m: ModelBundle, h_prev, x_t, z_t) -> Tensor:
    """``h_t = GRU([phi_x(x_t), phi_z(z_t)], h_{t-1})``."""
    h_prev = ad._as_tensor(h_prev)
    x_t = ad._as_tensor(x_t)
    z_t = ad._as_tensor(z_t)
    _check_dim(h_prev, m.cfg.h_dim, "state_update")
    _check_dim(x_t, m.cfg.x_dim, "state_update")
    _check_dim(z_t, m.cfg.z_dim, "state_update")
    return _update(m, h_prev, m.enc_x(x_t), m.enc_z(z_t))


def as_batch(x) -> np.ndarray:
    """Normalize observations to a ``(m, T, d)`` float array.

    A ``(T, d)`` array is one sequence; a list of ``T`` per-step arrays or
    tensors of shape ``(m, d)`` or ``(d,)`` is stacked along time.
    """
    if isinstance(x, np.ndarray):
        arr = x.astype(np.float64, copy=False)
    else:
        steps = [s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64) for s in x]
        if not steps:
            raise ValueError("empty sequence")
        arr = np.stack(steps, axis=-2)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ad.ShapeError(f"observations must be (T, d) or (m, T, d), got {arr.shape}")
    return arr


def _as_noise(noise, T: int, shape: Tuple[int, int]) -> np.ndarray:
    if isinstance(noise, np.ndarray):
        arr = noise
    else:
        arr = np.stack([n.data if isinstance(n, Tensor) else np.asarray(n, dtype=np.float64) for n in noise])
    if arr.ndim == 2 and shape[0] == 1:
        arr = arr[:, None, :]
    if arr.shape != (T,) + shape:
        raise ad.ShapeError(f"noise must have shape {(T,) + shape}, got {arr.shape}")
    return arr


@dataclass
class UnrollRecord:
    """Per-step quantities of one inference unroll; every list has length T."""

    priors: List[DiagGaussian] = field(default_factory=list)
    posteriors: List[DiagGaussian] = field(default_factory=list)
    z: List[Tensor] = field(default_factory=list)
    h: List[Tensor] = field(default_factory=list)
    loglik: List[Tensor] = field(default_factory=list)
    kl: List[Tensor] = field(default_factory=list)
    log_prior: List[Tensor] = field(default_factory=list)
    log_post: List[Tensor] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.loglik)


def unroll_inference(m: ModelBundle, x_seq, noise_seq, densities: bool = False) -> UnrollRecord:
    """Run the inference path over a batch of sequences.

    ``x_seq`` is ``(m, T, x_dim)`` (or anything :func:`as_batch` accepts) and
    ``noise_seq`` holds standard-normal draws of shape ``(T, m, z_dim)``.
    ``h`` in the record holds ``h_1 ... h_T``; ``h_0`` is zero.  With
    ``densities`` the record also carries ``log p(z_t|h)`` and
    ``log q(z_t|x, h)`` at the sampled ``z_t`` for sample-based bounds.
    """
    x = as_batch(x_seq)
    nb, T, xd = x.shape
    if T < 1:
        raise ValueError("empty sequence")
    if xd != m.cfg.x_dim:
        raise ad.ShapeError(f"observations have dimension {xd}, model expects {m.cfg.x_dim}")
    noise = _as_noise(noise_seq, T, (nb, m.cfg.z_dim))
    rec = UnrollRecord()
    h = m.zero_state(nb)
    for t in range(T):
        x_t = ad.Tensor._from_op(x[:, t, :], False)
        x_enc = m.enc_x(x_t)
        prior = transition_prior(m, h)
        post = _posterior(m, x_enc, h, prior)
        z = gaussian_sample(post, ad.Tensor._from_op(noise[t], False))
        z_enc = m.enc_z(z)
        out = _emission(m, z_enc, h)
        rec.priors.append(prior)
        rec.posteriors.append(post)
        rec.z.append(z)
        rec.loglik.append(_loglik(out, x_t))
        rec.kl.append(gaussian_kl(post, prior))
        if densities:
            rec.log_prior.append(gaussian_logpdf(prior, z))
            rec.log_post.append(gaussian_logpdf(post, z))
        h = _update(m, h, x_enc, z_enc)
        rec.h.append(h)
    return rec


def _total(terms: Sequence[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


def elbo(record: UnrollRecord, kl: str = "analytic") -> Tensor:
    """Single-sample ELBO per sequence, shape ``(m,)``.

    ``kl="analytic"`` uses the closed-form per-step KL; ``kl="sample"`` uses
    ``log p(z_t) - log q(z_t)`` at the drawn samples (needs ``densities=True``),
    which is the one-sample importance-weighted bound.
    """
    if kl == "analytic":
        return _total([ll - k for ll, k in zip(record.loglik, record.kl)])
    if kl == "sample":
        if len(record.log_prior) != record.T:
            raise ValueError("record was unrolled without densities")
        return _total([ll + lp - lq for ll, lp, lq in zip(record.loglik, record.log_prior, record.log_post)])
    raise ValueError(f"unknown kl mode {kl!r}")


def elbo_per_timestep(record: UnrollRecord) -> Tensor:
    return elbo(record) / float(record.T)


def reconstruction_loss(record: UnrollRecord) -> Tensor:
    """``-sum_t log p(x_t | z_t, h_{t-1})`` per sequence, shape ``(m,)``."""
    return -_total(record.loglik)


def kl_total(record: UnrollRecord) -> Tensor:
    return _total(record.kl)


def latent_paths(m: ModelBundle, x_seq, prior_noise, post_noise) -> List[Tensor]:
    """Draw prior and posterior latent sequences for the same observations.

    Rows ``0..m-1`` of every returned step follow the generative path
    ``z_t ~ P(z_t | h_{t-1})`` with ``h`` driven by ``x_t`` and the prior draw;
    rows ``m..2m-1`` follow the inference path with ``h`` driven by ``x_t`` and
    the posterior draw.  Both paths are evaluated as one stacked batch.
    """
    x = as_batch(x_seq)
    nb, T, _ = x.shape
    zd = m.cfg.z_dim
    eps_p = _as_noise(prior_noise, T, (nb, zd))
    eps_q = _as_noise(post_noise, T, (nb, zd))
    xx = np.concatenate([x, x], axis=0)
    eps = np.concatenate([eps_p, eps_q], axis=1)
    mask = np.zeros((2 * nb, zd))
    mask[:nb] = 1.0
    mask_t = ad.Tensor._from_op(mask, False)
    h = m.zero_state(2 * nb)
    out = []
    for t in range(T):
        e = ad.Tensor._from_op(eps[t], False)
        x_enc = m.enc_x(ad.Tensor._from_op(xx[:, t, :], False))
        prior = transition_prior(m, h)
        post = _posterior(m, x_enc, h, prior)
        zq = gaussian_sample(post, e)
        if m.cfg.tied_posterior:
            z = zq
        else:
            zp = gaussian_sample(prior, e)
            z = zq + mask_t * (zp - zq)
        out.append(z)
        h = _update(m, h, x_enc, m.enc_z(z))
    return out


def split_paths(z_seq: Sequence[Tensor]) -> Tuple[List[Tensor], List[Tensor]]:
    n = z_seq[0].shape[0] // 2
    return [ad.slice_(z, 0, n, axis=0) for z in z_seq], [ad.slice_(z, n, 2 * n, axis=0) for z in z_seq]


def generate(m: ModelBundle, T: int, seed: int, n: int = 1) -> np.ndarray:
    """Ancestral sampling of ``n`` sequences of length ``T``; returns ``(n, T, x_dim)``."""
    if T < 0:
        raise ValueError("T must be >= 0")
    rng = np.random.default_rng(seed)
    out = np.zeros((n, T, m.cfg.x_dim))
    with ad.no_grad():
        h = m.zero_state(n)
        for t in range(T):
            prior = transition_prior(m, h)
            z = gaussian_sample(prior, rng.standard_normal((n, m.cfg.z_dim)))
            z_enc = m.enc_z(z)
            dist = _emission(m, z_enc, h)
            if isinstance(dist, DiagGaussian):
                x = gaussian_sample(dist, rng.standard_normal((n, m.cfg.x_dim))).data
            else:
                x = bernoulli_sample(dist, rng.random((n, m.cfg.x_dim)))
            out[:, t, :] = x
            h = _update(m, h, m.enc_x(x), z_enc)
    return out
