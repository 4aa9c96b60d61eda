import io
import math
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from avrnn.adversarial import AdvConfig, Critic
from avrnn.data import LgssmParams, gen_lgssm
from avrnn.training import (
    CSV_HEADER,
    DivergenceError,
    MetricsRecord,
    MetricsWriter,
    PhaseCounters,
    TrainConfig,
    evaluate,
    iwae_bound,
    read_metrics,
    reconstruction_phase,
    regularization_phase,
    run_training,
)
from avrnn.vrnn import ModelBundle, VrnnConfig, elbo, unroll_inference

from toys import SP1, shifted_gaussian_model, toy_batch

TINY = VrnnConfig(x_dim=2, z_dim=2, h_dim=6, x_enc_dim=4, z_enc_dim=4, hidden_dim=5)


def tiny_data(n=24, T=6, seed=0):
    return gen_lgssm(LgssmParams(), n, T, 2, seed)


def tiny_cfg(**kw):
    base = dict(iters=6, batch_size=4, eval_every=3, eval_batches=2, model=TINY,
                adv=AdvConfig(critic_state=5, critic_width=4))
    base.update(kw)
    return TrainConfig(**base)


def snapshot(*stores):
    return {n: (s.tag_of(n), s[n].data.copy()) for s in stores for n in s}


def changed_tags(before, *stores):
    return {before[n][0] for s in stores for n in s if not np.array_equal(before[n][1], s[n].data)}


# --- reconstruction phase ------------------------------------------------


def test_reconstruction_phase_zero_lr_keeps_parameters():
    m = ModelBundle(TINY, seed=0)
    before = snapshot(m.store)
    loss = reconstruction_phase(m, tiny_data().x[:4], 0.0, np.random.default_rng(0))
    assert math.isfinite(loss)
    assert changed_tags(before, m.store) == set()


def test_reconstruction_phase_updates_only_its_tags():
    m = ModelBundle(TINY, seed=0)
    before = snapshot(m.store)
    reconstruction_phase(m, tiny_data().x[:4], 1e-3, np.random.default_rng(0))
    assert changed_tags(before, m.store) == {"theta", "phi", "tau"}


def test_reconstruction_phase_fits_constant_sequences():
    cfg = VrnnConfig(x_dim=1, z_dim=2, h_dim=6, x_enc_dim=4, z_enc_dim=4, hidden_dim=5)
    m = ModelBundle(cfg, seed=1)
    x = np.full((8, 5, 1), 0.5)
    rng = np.random.default_rng(1)
    losses = [reconstruction_phase(m, x, 1e-2, rng) for _ in range(200)]
    assert losses[-1] < losses[0]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


# --- regularization phase -----------------------------------------------


def test_regularization_phase_counts_and_isolation():
    m, d = ModelBundle(TINY, seed=2), Critic(2, state=5, width=4, seed=2)
    data = tiny_data()
    src = iter([data.x[i:i + 4] for i in range(0, 24, 4)])
    counters = PhaseCounters()
    before = snapshot(m.store, d.store)
    l_dis, neg = regularization_phase(d, m, src, AdvConfig(n_critic=3, lr_adv=1e-2), np.random.default_rng(2),
                                      counters)
    assert counters.critic_steps == 3 and counters.adversarial_steps == 1
    assert changed_tags(before, m.store, d.store) == {"eta", "omega", "tau"}
    assert math.isfinite(l_dis) and math.isfinite(neg)


def test_regularization_phase_frozen_toy_estimate_nonnegative():
    m, d = shifted_gaussian_model(), Critic(1, state=8, width=8, seed=3)
    cfg = AdvConfig(lr_adv=0.0, lr_critic=1e-3, clip=0.1)
    rng = np.random.default_rng(3)
    src = (toy_batch(64, seed=i) for i in range(10**6))
    est = np.array([-regularization_phase(d, m, src, cfg, rng)[0] / 64 for _ in range(300)])
    tail = est[-100:]
    assert tail.mean() >= -3 * tail.std(ddof=1) / math.sqrt(tail.size)
    assert tail.mean() > 0


# --- evaluation ----------------------------------------------------------


def test_evaluate_is_pure_and_repeatable():
    m, d = ModelBundle(TINY, seed=4), Critic(2, state=5, width=4, seed=4)
    data = tiny_data()
    before = snapshot(m.store, d.store)
    a = evaluate(m, d, data, 3, 4, seed=11)
    b = evaluate(m, d, data, 3, 4, seed=11)
    assert a == b
    assert changed_tags(before, m.store, d.store) == set()
    assert evaluate(m, d, data, 3, 4, seed=12) != a
    with pytest.raises(ValueError):
        evaluate(m, d, data, 0)


def test_evaluate_per_timestep_convention():
    m, d = ModelBundle(TINY, seed=5), Critic(2, state=5, width=4, seed=5)
    data = tiny_data()
    r = evaluate(m, d, data, 1, 24, seed=0)
    assert r.em_estimate == -r.l_dis / 24
    assert r.iter == 0


def test_evaluate_tied_model_identity():
    m, d = ModelBundle(replace(TINY, tied_posterior=True), seed=6), Critic(2, state=5, width=4, seed=6)
    r = evaluate(m, d, tiny_data(), 2, 4, seed=0)
    assert abs(r.elbo + r.l_rec) < 1e-8


# --- run_training --------------------------------------------------------


def test_single_iteration_runs_one_phase_pair():
    res = run_training(tiny_cfg(iters=1, eval_every=1), tiny_data())
    assert res.counters == PhaseCounters(critic_steps=1, adversarial_steps=1, reconstruction_steps=1)
    assert [r.iter for r in res.metrics] == [1]


def test_rows_at_every_eval_point():
    res = run_training(tiny_cfg(iters=7, eval_every=3), tiny_data())
    assert [r.iter for r in res.metrics] == [3, 6, 7]
    assert len(res.history) == 7


def test_runs_are_deterministic():
    outs = []
    for prefetch in (False, False, True):
        buf = io.StringIO()
        run_training(tiny_cfg(prefetch=prefetch), tiny_data(), sink=MetricsWriter(buf))
        outs.append(buf.getvalue())
    assert outs[0] == outs[1] == outs[2]
    buf = io.StringIO()
    run_training(tiny_cfg(seed=1), tiny_data(), sink=MetricsWriter(buf))
    assert buf.getvalue() != outs[0]


def test_phase_isolation_audit_passes():
    res = run_training(tiny_cfg(iters=4, eval_every=1), tiny_data(), audit=True)
    assert len(res.metrics) == 4


def test_on_eval_callback_and_sink_callable():
    seen, recs = [], []
    run_training(tiny_cfg(), tiny_data(), sink=recs.append, on_eval=lambda it, m, d: seen.append(it))
    assert seen == [3, 6]
    assert [r.iter for r in recs] == [3, 6]


def test_divergence_is_reported():
    with pytest.raises(DivergenceError):
        run_training(tiny_cfg(iters=50, eval_every=50, lr_recon=1e9), tiny_data())


def test_mismatched_data_rejected():
    data = gen_lgssm(LgssmParams(), 4, 3, 3, 0)
    with pytest.raises(ValueError):
        run_training(tiny_cfg(), data)
    with pytest.raises(ValueError):
        TrainConfig(iters=0)


def test_metrics_csv_format(tmp_path):
    path = tmp_path / "m.csv"
    w = MetricsWriter(str(path))
    recs = [MetricsRecord(100, 1.5, -2.25, -0.5, 0.015625, 0.0), MetricsRecord(200, 1.0, -1.0, 0.1, 1 / 3, 2.5)]
    for r in recs:
        w.write(r)
    w.close()
    text = path.read_text()
    assert text.startswith("iter,l_rec,elbo,l_dis,em_estimate,wallclock_s\n")
    assert text.endswith("\n")
    assert text.splitlines()[1] == "100,1.5,-2.25,-0.5,0.015625,0.0"
    assert ",".join(CSV_HEADER) == text.splitlines()[0]
    assert read_metrics(path) == recs


# --- importance-weighted bound ---------------------------------------------


def test_iwae_single_sample_matches_elbo():
    m = ModelBundle(TINY, seed=7)
    x = tiny_data().x[0]
    noise = np.random.default_rng(7).standard_normal((x.shape[0], 1, 2))
    rec = unroll_inference(m, x[None], noise, densities=True)
    npt.assert_allclose(iwae_bound(m, x, 1, noise=noise), elbo(rec, kl="sample").item(), rtol=0, atol=1e-10)
    # the sample-KL and analytic-KL bounds share their expectation
    n = 4000
    noise = np.random.default_rng(8).standard_normal((x.shape[0], n, 2))
    rec = unroll_inference(m, np.repeat(x[None], n, 0), noise, densities=True)
    diff = elbo(rec, kl="sample").data - elbo(rec).data
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / math.sqrt(n)


def test_iwae_bound_increases_with_k():
    m = ModelBundle(TINY, seed=9)
    x = tiny_data().x[1]
    b1 = np.array([iwae_bound(m, x, 1, seed=s) for s in range(100)])
    b100 = np.array([iwae_bound(m, x, 100, seed=1000 + s) for s in range(100)])
    se = np.hypot(b1.std(ddof=1), b100.std(ddof=1)) / 10
    assert b100.mean() >= b1.mean() - 3 * se
    with pytest.raises(ValueError):
        iwae_bound(m, x, 0)
    with pytest.raises(ValueError):
        iwae_bound(m, tiny_data().x[:2], 3)


def test_iwae_converges_to_closed_form_marginal():
    # T = 1, z ~ N(mu_p, s_p^2), x | z ~ N(b + c z, s_x^2): the z encoder is
    # tanh(alpha z) with a tiny alpha and the emission weight undoes it, so the
    # emission mean is linear in z up to O(alpha^2 z^3).
    cfg = VrnnConfig(x_dim=1, z_dim=1, h_dim=1, x_enc_dim=1, z_enc_dim=1, hidden_dim=0)
    m = ModelBundle(cfg, seed=0)
    for t in m.store.tensors():
        t.data[...] = 0.0
    alpha, c, b = 1e-4, 1.3, 0.2
    mu_p, s_p, s_x = 0.4, math.log1p(math.exp(0.5)), math.log1p(math.exp(-0.3))
    m.store["enc_z.weight"].data[...] = alpha
    m.store["em.loc.weight"].data[0, 0] = c / alpha
    m.store["em.loc.bias"].data[...] = b
    m.store["em.scale.bias"].data[...] = -0.3
    m.store["tr.loc.bias"].data[...] = mu_p
    m.store["tr.scale.bias"].data[...] = 0.5
    m.store["ps.loc.bias"].data[...] = 0.3
    m.store["ps.scale.bias"].data[...] = SP1
    x = 1.1
    var = c * c * s_p * s_p + s_x * s_x
    exact = -0.5 * math.log(2 * math.pi * var) - (x - b - c * mu_p) ** 2 / (2 * var)
    assert abs(iwae_bound(m, np.array([[x]]), 10_000, seed=0) - exact) < 0.01
