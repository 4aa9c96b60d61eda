"""Alternating reconstruction / adversarial-regularization training loop.

Each iteration draws one batch for the reconstruction update of
``theta, phi, tau``, then ``n_critic`` fresh batches for critic updates of
``eta`` and one fresh batch for the adversarial update of ``omega, tau``.

Random streams are split from the run seed: model init, critic init, batch
indices, and training noise each get their own generator, and evaluation
noise is derived from ``(seed, iteration)``.  A run is therefore a pure
function of its config.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, TextIO, Union

import numpy as np

from . import autodiff as ad
from .adversarial import (AdvConfig, Critic, _stacked_loss, adversarial_train_step, critic_score, critic_train_step,
                          em_estimate)
from .data import SequenceBatch, SequenceDataset, batches, prefetch
from .nn import rmsprop_step
from .vrnn import ModelBundle, VrnnConfig, as_batch, elbo, latent_paths, reconstruction_loss, unroll_inference

CSV_HEADER = ("iter", "l_rec", "elbo", "l_dis", "em_estimate", "wallclock_s")
RECON_TAGS = ("theta", "phi", "tau")


class DivergenceError(RuntimeError):
    """A training loss became NaN or infinite."""


@dataclass
class TrainConfig:
    iters: int = 5000
    batch_size: int = 32
    seed: int = 0
    lr_recon: float = 1e-3
    eval_every: int = 100
    eval_batches: int = 4
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    record_wallclock: bool = False
    prefetch: bool = False
    model: VrnnConfig = field(default_factory=VrnnConfig)
    adv: AdvConfig = field(default_factory=AdvConfig)

    def __post_init__(self):
        if self.iters < 1 or self.batch_size < 1 or self.eval_every < 1 or self.eval_batches < 1:
            raise ValueError("iters, batch_size, eval_every and eval_batches must be >= 1")


@dataclass
class MetricsRecord:
    iter: int
    l_rec: float
    elbo: float
    l_dis: float
    em_estimate: float
    wallclock_s: float = 0.0

    def row(self) -> List[str]:
        return [str(self.iter)] + [repr(float(v)) for v in
                                   (self.l_rec, self.elbo, self.l_dis, self.em_estimate, self.wallclock_s)]


class MetricsWriter:
    """CSV sink with header ``iter,l_rec,elbo,l_dis,em_estimate,wallclock_s``."""

    def __init__(self, target: Union[str, TextIO]):
        self._own = isinstance(target, (str, bytes)) or hasattr(target, "__fspath__")
        self._fh = open(target, "w", newline="") if self._own else target
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(CSV_HEADER)
        self._fh.flush()

    def write(self, rec: MetricsRecord) -> None:
        self._w.writerow(rec.row())
        self._fh.flush()

    def close(self) -> None:
        if self._own:
            self._fh.close()


def read_metrics(path) -> List[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["iter"]), float(r["l_rec"]), float(r["elbo"]), float(r["l_dis"]),
                          float(r["em_estimate"]), float(r["wallclock_s"])) for r in rows]


def _batch_x(batch) -> np.ndarray:
    return as_batch(batch.x if isinstance(batch, SequenceBatch) else batch)


def reconstruction_phase(m: ModelBundle, batch, lr: float, rng: np.random.Generator,
                         decay: float = 0.9, eps: float = 1e-8) -> float:
    """RMSProp step on ``theta, phi, tau`` for the batch-summed reconstruction loss."""
    x = _batch_x(batch)
    nb, T, _ = x.shape
    noise = rng.standard_normal((T, nb, m.cfg.z_dim))
    params = m.store.tensors(RECON_TAGS)
    with ad.Tape():
        rec = unroll_inference(m, x, noise)
        loss = reconstruction_loss(rec).sum()
        grads = ad.backward(loss, inputs=params)
    rmsprop_step(m.store, grads, lr, decay, eps, tags=RECON_TAGS)
    return loss.item()


@dataclass
class PhaseCounters:
    critic_steps: int = 0
    adversarial_steps: int = 0
    reconstruction_steps: int = 0


def regularization_phase(d: Critic, m: ModelBundle, batch_source: Iterator, cfg: AdvConfig,
                         rng: np.random.Generator, counters: Optional[PhaseCounters] = None):
    """``n_critic`` critic steps then one adversarial step, each on a fresh batch.

    Returns ``(L_dis of the last critic step, -L_dis of the adversarial step)``.
    """
    l_dis = float("nan")
    for _ in range(cfg.n_critic):
        l_dis = critic_train_step(d, m, next(batch_source), cfg, rng)
        if counters is not None:
            counters.critic_steps += 1
    neg = adversarial_train_step(d, m, next(batch_source), cfg, rng)
    if counters is not None:
        counters.adversarial_steps += 1
    return l_dis, neg


def evaluate(m: ModelBundle, d: Critic, data: SequenceDataset, n_batches: int = 4,
             batch_size: int = 32, seed: int = 0, iteration: int = 0) -> MetricsRecord:
    """Per-timestep batch-mean L_rec and ELBO, batch L_dis and the EM estimate.

    Uses fresh noise from ``seed`` and never touches parameters.
    """
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    rng = np.random.default_rng(seed)
    src = batches(data, batch_size, int(rng.integers(2 ** 63)))
    lrec, el, ldis = [], [], []
    zd = m.cfg.z_dim
    with ad.no_grad():
        for _ in range(n_batches):
            x = next(src).x
            nb, T, _ = x.shape
            rec = unroll_inference(m, x, rng.standard_normal((T, nb, zd)))
            lrec.append(np.mean(reconstruction_loss(rec).data) / T)
            el.append(np.mean(elbo(rec).data) / T)
            x2 = next(src).x
            z = latent_paths(m, x2, rng.standard_normal((T, nb, zd)), rng.standard_normal((T, nb, zd)))
            ldis.append(_stacked_loss(critic_score(d, z)).item())
    l_dis = float(np.mean(ldis))
    return MetricsRecord(iteration, float(np.mean(lrec)), float(np.mean(el)), l_dis,
                         em_estimate(l_dis, batch_size))


@dataclass
class TrainResult:
    model: ModelBundle
    critic: Critic
    metrics: List[MetricsRecord]
    counters: PhaseCounters
    history: List[tuple] = field(default_factory=list)


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    init_m, init_c, data_s, noise_s, eval_s = ss.spawn(5)
    return (int(init_m.generate_state(1)[0]), int(init_c.generate_state(1)[0]),
            int(data_s.generate_state(1)[0]), np.random.default_rng(noise_s),
            int(eval_s.generate_state(1)[0]))


def run_training(cfg: TrainConfig, data: SequenceDataset,
                 sink: Optional[Union[MetricsWriter, Callable[[MetricsRecord], None]]] = None,
                 on_eval: Optional[Callable[[int, ModelBundle, Critic], None]] = None,
                 audit: bool = False) -> TrainResult:
    """Alternate the two phases ``cfg.iters`` times, evaluating every ``eval_every``
    iterations and after the last one.

    ``sink`` receives each :class:`MetricsRecord`; ``on_eval`` is called after
    each evaluation (e.g. to checkpoint).  Raises :class:`DivergenceError` on a
    non-finite loss, after which the last ``on_eval`` state is the last good one.
    With ``audit`` the tag isolation of every phase is verified at eval points.
    """
    if data.n_seq < 1:
        raise ValueError("empty dataset")
    mcfg = cfg.model
    if mcfg.x_dim != data.x_dim:
        raise ValueError(f"model x_dim {mcfg.x_dim} does not match data x_dim {data.x_dim}")
    seed_m, seed_c, seed_d, noise, seed_e = _streams(cfg.seed)
    model = ModelBundle(mcfg, seed=seed_m)
    critic = Critic(mcfg.z_dim, cfg.adv.critic_state, cfg.adv.critic_width, seed=seed_c)
    src = batches(data, cfg.batch_size, seed_d)
    if cfg.prefetch:
        src = prefetch(src)
    counters = PhaseCounters()
    metrics: List[MetricsRecord] = []
    history = []
    write = sink.write if isinstance(sink, MetricsWriter) else sink
    t0 = time.perf_counter()
    for it in range(1, cfg.iters + 1):
        try:
            rec = _iteration(it, cfg, data, model, critic, src, noise, counters, history, audit, seed_e)
        except (ad.DomainError, FloatingPointError) as exc:
            raise DivergenceError(f"numerical failure at iteration {it}: {exc}") from exc
        if rec is not None:
            if cfg.record_wallclock:
                rec.wallclock_s = time.perf_counter() - t0
            metrics.append(rec)
            if write is not None:
                write(rec)
            if on_eval is not None:
                on_eval(it, model, critic)
    return TrainResult(model, critic, metrics, counters, history)


def _iteration(it, cfg, data, model, critic, src, noise, counters, history, audit, seed_e):
    """One reconstruction phase plus one regularization phase; returns the eval record if due."""
    due = it % cfg.eval_every == 0 or it == cfg.iters
    check = audit and due
    if check:
        snap = _snapshot(model, critic)
    l_rec = reconstruction_phase(model, next(src), cfg.lr_recon, noise, cfg.rms_decay, cfg.rms_eps)
    counters.reconstruction_steps += 1
    if check:
        _assert_only(snap, _snapshot(model, critic), RECON_TAGS)
        snap = _snapshot(model, critic)
    l_dis, neg = regularization_phase(critic, model, src, cfg.adv, noise, counters)
    if check:
        _assert_only(snap, _snapshot(model, critic), ("eta", "omega", "tau"))
    history.append((l_rec, l_dis, neg))
    if not (math.isfinite(l_rec) and math.isfinite(l_dis) and math.isfinite(neg)):
        raise DivergenceError(f"non-finite loss at iteration {it}")
    if not due:
        return None
    eval_seed = int(np.random.SeedSequence([seed_e, it]).generate_state(1)[0])
    rec = evaluate(model, critic, data, cfg.eval_batches, cfg.batch_size, eval_seed, it)
    if not all(math.isfinite(v) for v in (rec.l_rec, rec.elbo, rec.l_dis)):
        raise DivergenceError(f"non-finite evaluation at iteration {it}")
    return rec


def _snapshot(model: ModelBundle, critic: Critic):
    snap = {}
    for store in (model.store, critic.store):
        for n in store:
            snap[n] = (store.tag_of(n), store[n].data.copy())
    return snap


def _assert_only(before, after, tags) -> None:
    for n, (tag, arr) in before.items():
        if tag not in tags and not np.array_equal(arr, after[n][1]):
            raise AssertionError(f"parameter {n} ({tag}) changed in a phase that must not touch it")


def _logmeanexp(v: np.ndarray) -> float:
    mx = np.max(v)
    return float(mx + np.log(np.mean(np.exp(v - mx))))


def iwae_bound(m: ModelBundle, x_seq, k: int, seed: int = 0, noise: Optional[np.ndarray] = None) -> float:
    """Importance-weighted bound ``log (1/k) sum_j p(x, z_j) / q(z_j | x)`` for one sequence.

    The ``k`` samples are unrolled together as ``k`` batch rows.  ``noise``
    of shape ``(T, k, z_dim)`` overrides the seeded draws.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = as_batch(x_seq)
    if x.shape[0] != 1:
        raise ValueError("iwae_bound takes a single sequence")
    T = x.shape[1]
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal((T, k, m.cfg.z_dim))
    xk = np.repeat(x, k, axis=0)
    with ad.no_grad():
        rec = unroll_inference(m, xk, noise, densities=True)
        logw = elbo(rec, kl="sample").data
    return _logmeanexp(logw)
